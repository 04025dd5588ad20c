use dta_core::io::{read_dataset, read_embedding, read_manifest, write_dataset, write_embedding};
use dta_core::simgen::{simulate, simulate_with_counterfactuals, SimConfig};

fn corners() -> Vec<SimConfig> {
    let base = SimConfig { n: 12, t: 6, r: 2, p: 3, k: 1, h: 1, tau_cf: 1, seed: 1, ..SimConfig::default() };
    let mut out = Vec::new();
    for k in [1, 3] {
        for h in [1, 5] {
            for (ga, gy) in [(0.0, 0.0), (1.0, 1.0), (0.0, 1.0), (1.0, 0.0)] {
                for tau_cf in [1, 5] {
                    out.push(SimConfig { k, h, gamma_a: ga, gamma_y: gy, tau_cf, seed: out.len() as u64, ..base });
                }
            }
        }
    }
    out
}

#[test]
fn every_simulated_corner_round_trips_and_validates() {
    let root = tempfile::tempdir().unwrap();
    for (i, cfg) in corners().iter().enumerate() {
        cfg.validate().unwrap();
        let dir = root.path().join(format!("c{i}"));
        let (ds, _) = simulate_with_counterfactuals(cfg).unwrap();
        write_dataset(&ds, &dir, Some(cfg)).unwrap();
        let back = read_dataset(&dir).unwrap();
        back.validate().unwrap();
        assert_eq!(back, ds, "corner {cfg:?}");
        let manifest = read_manifest(&dir).unwrap();
        assert_eq!(manifest.provenance.as_ref(), Some(cfg));
    }
}

#[test]
fn main_table_schema() {
    let cfg = SimConfig { n: 5, t: 4, r: 2, p: 3, k: 2, h: 2, tau_cf: 2, ..SimConfig::default() };
    let (ds, _) = simulate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path(), None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("main.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "patient_id,t,x_1,x_2,x_3,a_1,a_2,y");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), cfg.n * cfg.t);
    assert!(rows.iter().all(|r| r.split(',').count() == 2 + cfg.p + cfg.k + 1));
    // Without counterfactuals no counterfactual table is written.
    assert!(!dir.path().join("counterfactuals.csv").exists());
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn embedding_table_round_trips() {
    let cfg = SimConfig { n: 6, t: 3, r: 2, p: 3, k: 1, h: 1, tau_cf: 1, ..SimConfig::default() };
    let (ds, _) = simulate(&cfg).unwrap();
    let emb = ndarray::Array3::from_shape_fn((6, 3, 2), |(i, t, j)| i as f64 * 0.1 - t as f64 + j as f64 / 3.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    write_embedding(&path, &ds.ids, &emb).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "patient_id,t,z_1,z_2");
    assert_eq!(read_embedding(&path, &ds).unwrap(), emb);
}

//! Text formats: dataset directories, embedding tables, loss histories,
//! prediction requests and experiment reports. Every file is written to a
//! temporary sibling first and renamed into place.
//!
//! A dataset directory holds
//! - `manifest.json`: dimensions, presence flags, format version, provenance;
//! - `main.csv`: `patient_id,t,x_1..x_p,a_1..a_k,y`, one row per patient and
//!   step, `t` starting at 1;
//! - `confounders.csv` (optional): `patient_id,t,z_1..z_r`;
//! - `counterfactuals.csv` (optional): `patient_id,step,cf_a_1..cf_a_k,cf_y`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::dta::LossBreakdown;
use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, ExperimentResult};
use crate::outcome::PredictionRequest;
use crate::simgen::SimConfig;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const MAIN: &str = "main.csv";
const CONFOUNDERS: &str = "confounders.csv";
const COUNTERFACTUALS: &str = "counterfactuals.csv";

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |j| format!("{prefix}_{j}"))
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub p: usize,
    pub k: usize,
    pub r: Option<usize>,
    pub has_confounders: bool,
    pub has_counterfactuals: bool,
    pub tau_cf: Option<usize>,
    /// 0-based step at which counterfactual plans start.
    pub anchor_t: Option<usize>,
    /// Simulator settings the data came from, when known.
    pub provenance: Option<SimConfig>,
}

/// Writes a dataset directory.
pub fn write_dataset(dataset: &TrajectoryDataset, dir: &Path, provenance: Option<&SimConfig>) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let (n, t_len, p) = dataset.x.dim();
    let k = dataset.treatment_dim();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        n,
        t: t_len,
        p,
        k,
        r: dataset.confounder_dim(),
        has_confounders: dataset.z.is_some(),
        has_counterfactuals: dataset.has_counterfactuals(),
        tau_cf: dataset.horizon(),
        anchor_t: dataset.anchor_t,
        provenance: provenance.cloned(),
    };

    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend(numbered("x", p));
    header.extend(numbered("a", k));
    header.push("y".into());
    let rows = (0..n).flat_map(|i| {
        (0..t_len).map(move |t| {
            let mut r = vec![dataset.ids[i].to_string(), (t + 1).to_string()];
            r.extend((0..p).map(|j| fmt_f(dataset.x[[i, t, j]])));
            r.extend((0..k).map(|l| fmt_f(dataset.a[[i, t, l]])));
            r.push(fmt_f(dataset.y[[i, t]]));
            r
        })
    });
    write_atomic(&dir.join(MAIN), &csv_bytes(&header, rows)?)?;

    if let Some(z) = &dataset.z {
        let r_dim = z.dim().2;
        let mut header = vec!["patient_id".to_string(), "t".to_string()];
        header.extend(numbered("z", r_dim));
        let rows = (0..n).flat_map(|i| {
            (0..t_len).map(move |t| {
                let mut r = vec![dataset.ids[i].to_string(), (t + 1).to_string()];
                r.extend((0..r_dim).map(|j| fmt_f(z[[i, t, j]])));
                r
            })
        });
        write_atomic(&dir.join(CONFOUNDERS), &csv_bytes(&header, rows)?)?;
    } else {
        remove_if_present(&dir.join(CONFOUNDERS))?;
    }

    if let (Some(cfa), Some(cfy)) = (&dataset.cf_a, &dataset.cf_y) {
        let tau = cfy.ncols();
        let mut header = vec!["patient_id".to_string(), "step".to_string()];
        header.extend(numbered("cf_a", k));
        header.push("cf_y".into());
        let rows = (0..n).flat_map(|i| {
            (0..tau).map(move |s| {
                let mut r = vec![dataset.ids[i].to_string(), (s + 1).to_string()];
                r.extend((0..k).map(|l| fmt_f(cfa[[i, s, l]])));
                r.push(fmt_f(cfy[[i, s]]));
                r
            })
        });
        write_atomic(&dir.join(COUNTERFACTUALS), &csv_bytes(&header, rows)?)?;
    } else {
        remove_if_present(&dir.join(COUNTERFACTUALS))?;
    }

    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

/// A keyed numeric table: `patient_id, index, values...`, with the index
/// running `1..=steps` within each patient and patients in `ids` order.
struct KeyedTable {
    ids: Vec<u64>,
    values: Vec<Vec<f64>>,
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.display().to_string(), line, msg: msg.into() }
}

/// Reads a keyed table, checking the header, row shape, ordering and
/// finiteness. `binary` marks value columns restricted to 0/1.
fn read_keyed(path: &Path, header: &[String], steps: usize, binary: &dyn Fn(usize) -> bool) -> Result<KeyedTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(parse_err(path, 1, format!("expected header `{}`, found `{}`", header.join(","), found.join(","))));
    }
    let width = header.len();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut expect_step = 1usize;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(path, line, format!("expected {width} columns, found {}", rec.len())));
        }
        let id: u64 = rec[0].trim().parse().map_err(|_| parse_err(path, line, format!("bad patient_id `{}`", &rec[0])))?;
        let step: usize = rec[1].trim().parse().map_err(|_| parse_err(path, line, format!("bad step `{}`", &rec[1])))?;
        if step != expect_step {
            return Err(parse_err(path, line, format!("expected step {expect_step}, found {step}")));
        }
        if step == 1 {
            ids.push(id);
        } else if ids.last() != Some(&id) {
            return Err(parse_err(path, line, format!("patient {id} interrupts the previous patient's rows")));
        }
        expect_step = if step == steps { 1 } else { step + 1 };
        let mut row = Vec::with_capacity(width - 2);
        for (j, field) in rec.iter().enumerate().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("column `{}`: `{field}` is not a number", header[j])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column `{}`: non-finite value", header[j])));
            }
            if binary(j - 2) && v != 0.0 && v != 1.0 {
                return Err(parse_err(path, line, format!("column `{}`: treatment must be 0 or 1, found {field}", header[j])));
            }
            row.push(v);
        }
        values.push(row);
    }
    if expect_step != 1 {
        return Err(parse_err(path, 0, "last patient has an incomplete set of rows"));
    }
    Ok(KeyedTable { ids, values })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported dataset format version {other:?} (expected {DATASET_FORMAT_VERSION})",
                path.display()
            )))
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let m = read_manifest(dir)?;
    let (n, t_len, p, k) = (m.n, m.t, m.p, m.k);
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend(numbered("x", p));
    header.extend(numbered("a", k));
    header.push("y".into());
    let main_path = dir.join(MAIN);
    let main = read_keyed(&main_path, &header, t_len, &|j| j >= p && j < p + k)?;
    if main.ids.len() != n {
        return Err(parse_err(&main_path, 0, format!("manifest declares {n} patients, table holds {}", main.ids.len())));
    }
    let mut x = Array3::zeros((n, t_len, p));
    let mut a = Array3::zeros((n, t_len, k));
    let mut y = Array2::zeros((n, t_len));
    for (row, vals) in main.values.iter().enumerate() {
        let (i, t) = (row / t_len, row % t_len);
        for j in 0..p {
            x[[i, t, j]] = vals[j];
        }
        for l in 0..k {
            a[[i, t, l]] = vals[p + l];
        }
        y[[i, t]] = vals[p + k];
    }

    let check_ids = |table: &KeyedTable, path: &Path| -> Result<()> {
        if table.ids != main.ids {
            return Err(parse_err(path, 0, "patient ids do not match main.csv"));
        }
        Ok(())
    };

    let z = if m.has_confounders {
        let r = m.r.ok_or_else(|| Error::Format("manifest flags confounders but gives no r".into()))?;
        let mut header = vec!["patient_id".to_string(), "t".to_string()];
        header.extend(numbered("z", r));
        let path = dir.join(CONFOUNDERS);
        let table = read_keyed(&path, &header, t_len, &|_| false)?;
        check_ids(&table, &path)?;
        let flat: Vec<f64> = table.values.into_iter().flatten().collect();
        Some(Array3::from_shape_vec((n, t_len, r), flat).map_err(|e| Error::Format(e.to_string()))?)
    } else {
        None
    };

    let (cf_a, cf_y, anchor_t) = if m.has_counterfactuals {
        let tau = m.tau_cf.ok_or_else(|| Error::Format("manifest flags counterfactuals but gives no tau_cf".into()))?;
        let mut header = vec!["patient_id".to_string(), "step".to_string()];
        header.extend(numbered("cf_a", k));
        header.push("cf_y".into());
        let path = dir.join(COUNTERFACTUALS);
        let table = read_keyed(&path, &header, tau, &|j| j < k)?;
        check_ids(&table, &path)?;
        let mut cfa = Array3::zeros((n, tau, k));
        let mut cfy = Array2::zeros((n, tau));
        for (row, vals) in table.values.iter().enumerate() {
            let (i, s) = (row / tau, row % tau);
            for l in 0..k {
                cfa[[i, s, l]] = vals[l];
            }
            cfy[[i, s]] = vals[k];
        }
        (Some(cfa), Some(cfy), m.anchor_t)
    } else {
        (None, None, None)
    };

    let ds = TrajectoryDataset { ids: main.ids, x, a, y, z, cf_a, cf_y, anchor_t };
    ds.validate()?;
    Ok(ds)
}

/// Embedding table `patient_id,t,z_1..z_d`.
pub fn write_embedding(path: &Path, ids: &[u64], emb: &Array3<f64>) -> Result<()> {
    let (n, t_len, d) = emb.dim();
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend(numbered("z", d));
    let rows = (0..n).flat_map(|i| {
        (0..t_len).map(move |t| {
            let mut r = vec![ids[i].to_string(), (t + 1).to_string()];
            r.extend((0..d).map(|j| fmt_f(emb[[i, t, j]])));
            r
        })
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Reads an embedding table aligned to `dataset`'s patients.
pub fn read_embedding(path: &Path, dataset: &TrajectoryDataset) -> Result<Array3<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let d = header.len().saturating_sub(2);
    let mut expected = vec!["patient_id".to_string(), "t".to_string()];
    expected.extend(numbered("z", d));
    let t_len = dataset.n_steps();
    let table = read_keyed(path, &expected, t_len, &|_| false)?;
    if table.ids != dataset.ids {
        return Err(parse_err(path, 0, "embedding patients do not match the dataset"));
    }
    let flat: Vec<f64> = table.values.into_iter().flatten().collect();
    Array3::from_shape_vec((dataset.n_patients(), t_len, d), flat).map_err(|e| Error::Format(e.to_string()))
}

/// Per-epoch training history `epoch,l_x,l_y,penalty,total`.
pub fn write_loss_history(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let header: Vec<String> = ["epoch", "l_x", "l_y", "penalty", "total"].iter().map(|s| s.to_string()).collect();
    let rows = history.iter().enumerate().map(|(e, b)| {
        vec![(e + 1).to_string(), fmt_f(b.l_x), fmt_f(b.l_y), fmt_f(b.penalty), fmt_f(b.total)]
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// One request in a prediction file; rows are time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub covariates: Vec<Vec<f64>>,
    pub treatments: Vec<Vec<f64>>,
    pub plan: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub requests: Vec<RequestRecord>,
}

fn rows_to_array(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape(format!("{what}: every row needs {cols} values")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

impl RequestRecord {
    pub fn to_request(&self) -> Result<PredictionRequest> {
        let d = self.covariates.first().map_or(0, Vec::len);
        let k = self.plan.first().map_or(0, Vec::len);
        Ok(PredictionRequest {
            covariates: rows_to_array(&self.covariates, d, "covariates")?,
            treatments: rows_to_array(&self.treatments, k, "treatments")?,
            plan: rows_to_array(&self.plan, k, "plan")?,
        })
    }

    pub fn from_request(id: Option<String>, req: &PredictionRequest) -> Self {
        let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect();
        Self { id, covariates: rows(&req.covariates), treatments: rows(&req.treatments), plan: rows(&req.plan) }
    }
}

pub fn read_requests(path: &Path) -> Result<Vec<PredictionRequest>> {
    let file: RequestFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.requests.iter().map(RequestRecord::to_request).collect()
}

/// Writes `results.csv`, `summary.csv`, `plotdata.csv` and `timings.csv`.
/// Only the last one carries wall-clock values.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();

    let mut rows = Vec::new();
    for u in &result.units {
        for r in &u.runs {
            rows.push(vec![
                fmt_f(r.gamma),
                r.method.to_string(),
                r.run.to_string(),
                opt(r.rmse),
                r.hyperparameters.clone(),
                r.error.clone().unwrap_or_default(),
            ]);
        }
        rows.push(vec![fmt_f(u.gamma), "train_mean".into(), u.run.to_string(), opt(u.baseline_rmse), String::new(), String::new()]);
    }
    let header = s(&["gamma", "method", "run", "rmse", "hyperparameters", "error"]);
    write_atomic(&dir.join("results.csv"), &csv_bytes(&header, rows.into_iter())?)?;

    let header = s(&["gamma", "method", "rmse_mean", "rmse_sd", "n_runs", "n_failed"]);
    let rows = result.summary.iter().map(|c| {
        vec![fmt_f(c.gamma), c.method.to_string(), fmt_f(c.rmse_mean), fmt_f(c.rmse_sd), c.n_runs.to_string(), c.n_failed.to_string()]
    });
    write_atomic(&dir.join("summary.csv"), &csv_bytes(&header, rows)?)?;

    let mut header = vec!["gamma".to_string()];
    for m in &cfg.methods {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    let rows = cfg.gamma_grid.iter().map(|&g| {
        let mut r = vec![fmt_f(g)];
        for &m in &cfg.methods {
            match result.cell(g, m) {
                Some(c) => {
                    r.push(fmt_f(c.rmse_mean));
                    r.push(fmt_f(c.rmse_sd));
                }
                None => r.extend([String::new(), String::new()]),
            }
        }
        r
    });
    write_atomic(&dir.join("plotdata.csv"), &csv_bytes(&header, rows)?)?;

    let header = s(&["gamma", "run", "stage", "runtime_s"]);
    let rows = result
        .units
        .iter()
        .flat_map(|u| u.timings.iter().map(move |(stage, secs)| vec![fmt_f(u.gamma), u.run.to_string(), stage.clone(), fmt_f(*secs)]));
    write_atomic(&dir.join("timings.csv"), &csv_bytes(&header, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{simulate, simulate_with_counterfactuals};

    fn tiny() -> (TrajectoryDataset, SimConfig) {
        let cfg = SimConfig { n: 6, t: 5, r: 2, p: 3, k: 2, tau_cf: 2, seed: 5, ..SimConfig::default() }.with_gamma(0.3);
        (simulate_with_counterfactuals(&cfg).unwrap().0, cfg)
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let (ds, cfg) = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), Some(&cfg)).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        assert_eq!(read_manifest(dir.path()).unwrap().provenance, Some(cfg));
    }

    #[test]
    fn round_trip_without_optional_tables() {
        let cfg = SimConfig { n: 4, t: 3, tau_cf: 1, ..SimConfig::default() };
        let mut ds = simulate(&cfg).unwrap().0;
        ds.z = None;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        assert!(!dir.path().join(CONFOUNDERS).exists());
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn main_table_has_expected_columns() {
        let (ds, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let text = fs::read_to_string(dir.path().join(MAIN)).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "patient_id,t,x_1,x_2,x_3,a_1,a_2,y");
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == 2 + 3 + 2 + 1));
    }

    fn corrupt(edit: impl Fn(&mut Vec<String>)) -> Error {
        let (ds, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let path = dir.path().join(MAIN);
        let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(str::to_string).collect();
        edit(&mut lines);
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        read_dataset(dir.path()).unwrap_err()
    }

    #[test]
    fn non_binary_treatment_names_line() {
        let err = corrupt(|lines| {
            let mut f: Vec<String> = lines[3].split(',').map(str::to_string).collect();
            f[5] = "2".into();
            lines[3] = f.join(",");
        });
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 4);
                assert!(msg.contains("a_1"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_column_count_and_non_finite_are_parse_errors() {
        let err = corrupt(|lines| lines[2].push_str(",1"));
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = corrupt(|lines| {
            let mut f: Vec<String> = lines[5].split(',').map(str::to_string).collect();
            f[2] = "NaN".into();
            lines[5] = f.join(",");
        });
        assert!(matches!(err, Error::Parse { line: 6, .. }), "{err}");
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let (ds, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn embedding_round_trip() {
        let (ds, _) = tiny();
        let emb = Array3::from_shape_fn((6, 5, 2), |(i, t, j)| i as f64 * 0.1 - t as f64 / 3.0 + j as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        write_embedding(&path, &ds.ids, &emb).unwrap();
        assert_eq!(read_embedding(&path, &ds).unwrap(), emb);
    }

    #[test]
    fn request_file_round_trip() {
        let (ds, _) = tiny();
        let plan = ds.cf_a.as_ref().unwrap().index_axis(ndarray::Axis(0), 1).to_owned();
        let req = PredictionRequest::from_arrays(ds.x.view(), ds.a.view(), 1, 3, plan.view());
        let file = RequestFile { requests: vec![RequestRecord::from_request(Some("p1".into()), &req)] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("req.json");
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert_eq!(read_requests(&path).unwrap(), vec![req]);
    }
}

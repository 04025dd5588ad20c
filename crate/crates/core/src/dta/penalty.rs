//! Regression-based KL penalty.
//!
//! For each step `t ≥ 1` and each assignment `a′`, the potential outcome
//! `ŷ_{t+1}[a′]` is regressed across patients on
//! `[ẑ_t, ẑ_{t-1}, a_t, a_{t-1}, 1]` (full) and on the same set without `a_t`
//! (reduced). Both fits are treated as Gaussians and compared with
//!
//! ```text
//! D = log(σ₂/σ₁) + (σ₁² + mean_i (μ₁ᵢ - μ₂ᵢ)²) / (2σ₂²) - 1/2
//! ```
//!
//! The penalty averages `D` over steps and assignments. The tape version
//! differentiates through the ridge-regularised normal equations.

use ndarray::{concatenate, Array1, Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::check_enumerable;
use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::neuralnet::{Matrix, NodeId, Tape};

/// KL divergence between `N(mu_p, sigma_p²)` and `N(mu_q, sigma_q²)`.
pub fn gaussian_kl(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64) -> Result<f64> {
    if !(sigma_p > 0.0 && sigma_q > 0.0) || !sigma_p.is_finite() || !sigma_q.is_finite() {
        return Err(Error::Domain(format!(
            "gaussian_kl needs positive finite sigmas (got {sigma_p}, {sigma_q})"
        )));
    }
    if mu_p == mu_q && sigma_p == sigma_q {
        return Ok(0.0);
    }
    let r = sigma_p / sigma_q;
    Ok(-r.ln() + 0.5 * (r * r + ((mu_p - mu_q) / sigma_q).powi(2)) - 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    /// Added to the diagonal of every Gram matrix.
    pub ridge: f64,
    /// Lower bound on residual standard deviations.
    pub sigma_floor: f64,
    /// Skip the identifiability check `N ≥ 2 p_z + 2k + 2`.
    pub allow_underdetermined: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { ridge: 1e-6, sigma_floor: 1e-4, allow_underdetermined: false }
    }
}

impl PenaltyConfig {
    /// Smallest batch for which both regressions are identifiable.
    pub fn min_rows(embed_dim: usize, treatment_dim: usize) -> usize {
        2 * embed_dim + 2 * treatment_dim + 2
    }

    fn check(&self, n: usize, t: usize, pz: usize, k: usize) -> Result<()> {
        if t < 2 {
            return Err(Error::Precondition(format!("penalty needs at least 2 steps, got {t}")));
        }
        let need = Self::min_rows(pz, k);
        if !self.allow_underdetermined && n < need {
            return Err(Error::Precondition(format!(
                "penalty regressions need at least {need} patients, got {n}"
            )));
        }
        if !(self.ridge >= 0.0 && self.sigma_floor > 0.0) {
            return Err(Error::Config("ridge must be >= 0 and sigma_floor > 0".into()));
        }
        Ok(())
    }
}

/// Fit summary for one step and one assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct KlEntry {
    /// 0-based step of the regressors `ẑ_t`, `a_t`.
    pub t: usize,
    /// Assignment index as in `assignments`.
    pub combo: usize,
    pub mu1: Array1<f64>,
    pub sigma1: f64,
    pub mu2: Array1<f64>,
    pub sigma2: f64,
    pub kl_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KlStats {
    pub entries: Vec<KlEntry>,
}

impl KlStats {
    pub fn max_sigma_gap(&self) -> f64 {
        self.entries.iter().map(|e| e.sigma1 - e.sigma2).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn regressors(z: &[Matrix], a: &[Matrix], t: usize, with_current: bool) -> Matrix {
    let n = z[t].nrows();
    let ones = Array2::ones((n, 1));
    let mut parts = vec![z[t].view(), z[t - 1].view()];
    if with_current {
        parts.push(a[t].view());
    }
    parts.push(a[t - 1].view());
    parts.push(ones.view());
    concatenate(Axis(1), &parts).expect("rows agree")
}

fn ridge_fit(r: &Matrix, y: &Matrix, ridge: f64) -> Result<Matrix> {
    let mut gram = r.t().dot(r);
    for i in 0..gram.nrows() {
        gram[[i, i]] += ridge;
    }
    let l = linalg::cholesky(gram.view()).map_err(|e| Error::Numerical(format!("penalty regression: {e}")))?;
    let beta = linalg::cholesky_solve(&l, r.t().dot(y).view());
    Ok(r.dot(&beta))
}

/// Penalty value and per-fit statistics from plain arrays: embeddings
/// `N × T × p_z`, treatments `N × T × k`, potential outcomes `N × T × 2^k`.
pub fn causal_penalty(
    z_hat: ArrayView3<'_, f64>,
    a: ArrayView3<'_, f64>,
    po: ArrayView3<'_, f64>,
    cfg: &PenaltyConfig,
) -> Result<(f64, KlStats)> {
    let (n, t_len, pz) = z_hat.dim();
    let k = a.dim().2;
    check_enumerable(k)?;
    let combos = 1usize << k;
    if a.dim().0 != n || a.dim().1 != t_len || po.dim() != (n, t_len, combos) {
        return Err(shape_err(format!(
            "penalty inputs disagree: z {:?}, a {:?}, potential outcomes {:?}",
            z_hat.dim(),
            a.dim(),
            po.dim()
        )));
    }
    cfg.check(n, t_len, pz, k)?;
    let z = super::time_major(z_hat);
    let at = super::time_major(a);
    let var_floor = cfg.sigma_floor * cfg.sigma_floor;
    let mut stats = KlStats::default();
    let mut total = 0.0;
    for t in 1..t_len {
        let y = po.index_axis(Axis(1), t).to_owned();
        let mu1 = ridge_fit(&regressors(&z, &at, t, true), &y, cfg.ridge)?;
        let mu2 = ridge_fit(&regressors(&z, &at, t, false), &y, cfg.ridge)?;
        for c in 0..combos {
            let var = |mu: &Matrix| {
                let r = &y.column(c) - &mu.column(c);
                (r.dot(&r) / n as f64).max(var_floor)
            };
            let (v1, v2) = (var(&mu1), var(&mu2));
            let d = &mu1.column(c) - &mu2.column(c);
            let gap = d.dot(&d) / n as f64;
            let kl = 0.5 * (v2.ln() - v1.ln()) + (v1 + gap) / (2.0 * v2) - 0.5;
            if !kl.is_finite() {
                return Err(Error::Numerical(format!("non-finite KL at step {t}, assignment {c}")));
            }
            total += kl;
            stats.entries.push(KlEntry {
                t,
                combo: c,
                mu1: mu1.column(c).to_owned(),
                sigma1: v1.sqrt(),
                mu2: mu2.column(c).to_owned(),
                sigma2: v2.sqrt(),
                kl_hat: kl,
            });
        }
    }
    Ok((total / ((t_len - 1) * combos) as f64, stats))
}

fn tape_fit(tape: &mut Tape, r: NodeId, y: NodeId, ridge: f64) -> Result<NodeId> {
    let q = tape.value(r).ncols();
    let gram = tape.matmul_at(r, r);
    let reg = tape.constant(Array2::eye(q) * ridge);
    let gram = tape.add(gram, reg);
    let rhs = tape.matmul_at(r, y);
    let beta = tape
        .solve(gram, rhs)
        .map_err(|e| Error::Numerical(format!("penalty regression: {e}")))?;
    Ok(tape.matmul(r, beta))
}

/// Recorded penalty. `z[t]` are `B × p_z` nodes, `po[t]` are `B × 2^k`
/// nodes (entry 0 is unused), `a[t]` are constant `B × k` treatments.
pub(crate) fn penalty_on_tape(
    tape: &mut Tape,
    z: &[NodeId],
    a: &[Matrix],
    po: &[Option<NodeId>],
    cfg: &PenaltyConfig,
) -> Result<NodeId> {
    let t_len = z.len();
    let (n, pz) = tape.value(z[0]).dim();
    let k = a[0].ncols();
    cfg.check(n, t_len, pz, k)?;
    let combos = 1usize << k;
    let var_floor = cfg.sigma_floor * cfg.sigma_floor;
    let ones = tape.constant(Array2::ones((n, 1)));
    let a_nodes: Vec<NodeId> = a.iter().map(|m| tape.constant(m.clone())).collect();
    let mut acc: Option<NodeId> = None;
    for t in 1..t_len {
        let y = po[t].ok_or_else(|| shape_err(format!("missing potential outcomes at step {t}")))?;
        let r1 = tape.concat_cols(&[z[t], z[t - 1], a_nodes[t], a_nodes[t - 1], ones]);
        let r2 = tape.concat_cols(&[z[t], z[t - 1], a_nodes[t - 1], ones]);
        let mu1 = tape_fit(tape, r1, y, cfg.ridge)?;
        let mu2 = tape_fit(tape, r2, y, cfg.ridge)?;
        let var = |tape: &mut Tape, mu: NodeId| {
            let r = tape.sub(y, mu);
            let sq = tape.square(r);
            let m = tape.mean_rows(sq);
            tape.clamp_min(m, var_floor)
        };
        let v1 = var(tape, mu1);
        let v2 = var(tape, mu2);
        let d = tape.sub(mu1, mu2);
        let d2 = tape.square(d);
        let gap = tape.mean_rows(d2);
        let l1 = tape.log(v1);
        let l2 = tape.log(v2);
        let log_ratio = tape.sub(l2, l1);
        let log_ratio = tape.scale(log_ratio, 0.5);
        let num = tape.add(v1, gap);
        let den = tape.scale(v2, 2.0);
        let frac = tape.div(num, den);
        let kl = tape.add(log_ratio, frac);
        let kl = tape.offset(kl, -0.5);
        let s = tape.sum(kl);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s),
            None => s,
        });
    }
    let sum = acc.expect("at least one step");
    Ok(tape.scale(sum, 1.0 / ((t_len - 1) * combos) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(0.3, 1.7, 0.3, 1.7).unwrap(), 0.0);
        assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let expect = 2f64.ln() + 1.0 / 8.0 - 0.5;
        assert!((gaussian_kl(0.0, 1.0, 0.0, 2.0).unwrap() - expect).abs() < 1e-15);
        assert!(matches!(gaussian_kl(0.0, 0.0, 0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_kl(0.0, 1.0, 0.0, -1.0), Err(Error::Domain(_))));
    }

    fn random_instance(n: usize, t: usize, pz: usize, k: usize, seed: u64) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array3::from_shape_fn((n, t, pz), |_| rng.sample::<f64, _>(StandardNormal));
        let a = Array3::from_shape_fn((n, t, k), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let po = Array3::from_shape_fn((n, t, 1 << k), |(i, s, _)| {
            z[[i, s, 0]] + 0.7 * a[[i, s, 0]] + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        (z, a, po)
    }

    #[test]
    fn precondition_on_patient_count() {
        let (z, a, po) = random_instance(5, 3, 2, 1, 0);
        let r = causal_penalty(z.view(), a.view(), po.view(), &PenaltyConfig::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
        let (z, a, po) = random_instance(20, 1, 2, 1, 0);
        let r = causal_penalty(z.view(), a.view(), po.view(), &PenaltyConfig::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn tape_matches_plain_penalty() {
        let (z, a, po) = random_instance(30, 4, 2, 2, 9);
        let cfg = PenaltyConfig::default();
        let (plain, stats) = causal_penalty(z.view(), a.view(), po.view(), &cfg).unwrap();
        assert_eq!(stats.entries.len(), 3 * 4);
        let mut tape = Tape::new();
        let zn: Vec<_> = super::super::time_major(z.view()).into_iter().map(|m| tape.constant(m)).collect();
        let pon: Vec<_> = super::super::time_major(po.view())
            .into_iter()
            .enumerate()
            .map(|(t, m)| (t > 0).then(|| tape.constant(m)))
            .collect();
        let at = super::super::time_major(a.view());
        let node = penalty_on_tape(&mut tape, &zn, &at, &pon, &cfg).unwrap();
        assert!((tape.scalar(node) - plain).abs() < 1e-12 * plain.abs().max(1.0));
    }

    #[test]
    fn irrelevant_treatment_gives_small_penalty() {
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = Array3::from_shape_fn((n, 4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let a = Array3::from_shape_fn((n, 4, 1), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let po = Array3::from_shape_fn((n, 4, 2), |(i, t, _)| z[[i, t, 1]] - 0.5 + rng.sample::<f64, _>(StandardNormal));
        let (p, _) = causal_penalty(z.view(), a.view(), po.view(), &PenaltyConfig::default()).unwrap();
        assert!((0.0..0.01).contains(&p), "penalty {p}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn nested_fits_and_nonnegative_kl(seed in 0u64..10_000, n in 12usize..40, k in 1usize..3) {
            let (z, a, po) = random_instance(n, 3, 2, k, seed);
            let (p, stats) = causal_penalty(z.view(), a.view(), po.view(), &PenaltyConfig::default()).unwrap();
            prop_assert!(p >= -1e-9);
            for e in &stats.entries {
                prop_assert!(e.sigma1 <= e.sigma2 + 1e-9);
                prop_assert!(e.kl_hat >= -1e-9);
                prop_assert!(e.sigma1 >= 1e-4 && e.sigma2 >= 1e-4);
            }
        }
    }
}

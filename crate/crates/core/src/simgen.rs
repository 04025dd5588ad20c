//! Synthetic longitudinal data with hidden confounders and noisy proxies.
//!
//! Per patient and step:
//!
//! ```text
//! Z_t,j = (1/h) Σ_i ( λ_j,i Z_{t-i},j + Σ_l ω_i,l A_{t-i},l ) + η_t,j      η ~ N(0, 0.1²)
//! X_t,m = Σ_j β_j,m Z_t,j + ε_t,m                                          ε ~ N(0, 5²)
//! π_t   = γ_A mean_j Z_t,j + (1 - γ_A) mean_l A_{t-1},l
//! A_t,l ~ Bernoulli(σ(π_t))
//! Y_t+1 = γ_Y mean_j Z_t,j + (1 - γ_Y) (1/h) Σ_i Σ_l ω'_i,l A_{t-i},l
//! ```
//!
//! Anything indexed before the first step is zero.
//!
//! Randomness comes from independent ChaCha streams of one seed (coefficients,
//! η, ε, treatment draws), so the η realizations can be regenerated exactly
//! when rolling counterfactual plans forward.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::neuralnet::sigmoid;

const ETA_SD: f64 = 0.1;
const EPS_SD: f64 = 5.0;
const LAMBDA_SD: f64 = 0.5;

const STREAM_PARAMS: u64 = 0;
const STREAM_ETA: u64 = 1;
const STREAM_EPS: u64 = 2;
const STREAM_TREAT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Patients.
    #[serde(rename = "N")]
    pub n: usize,
    /// Steps per trajectory.
    #[serde(rename = "T")]
    pub t: usize,
    /// Hidden confounder dimension.
    pub r: usize,
    /// Proxy dimension.
    pub p: usize,
    /// Treatment dimension.
    pub k: usize,
    /// Autoregressive order.
    pub h: usize,
    pub gamma_a: f64,
    pub gamma_y: f64,
    /// Counterfactual horizon in steps.
    pub tau_cf: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            t: 30,
            r: 5,
            p: 20,
            k: 2,
            h: 5,
            gamma_a: 0.0,
            gamma_y: 0.0,
            tau_cf: 5,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Sets `gamma_a = gamma_y = gamma`.
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma_a = gamma;
        self.gamma_y = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("N", self.n),
            ("T", self.t),
            ("r", self.r),
            ("p", self.p),
            ("k", self.k),
            ("h", self.h),
            ("tau_cf", self.tau_cf),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, g) in [("gamma_a", self.gamma_a), ("gamma_y", self.gamma_y)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("{name} = {g} outside [0, 1]")));
            }
        }
        if self.tau_cf > self.t {
            return Err(Error::Config(format!("tau_cf {} exceeds T {}", self.tau_cf, self.t)));
        }
        Ok(())
    }

    /// 0-based step where counterfactual plans start by default: the last
    /// `tau_cf` steps of the trajectory.
    pub fn default_anchor(&self) -> usize {
        self.t - self.tau_cf
    }
}

/// Coefficients shared by every patient of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// `r × h`: `lambda[[j, i]]` weights lag `i + 1` of confounder `j`.
    pub lambda: Array2<f64>,
    /// `h × k` treatment-lag weights on the confounders.
    pub omega: Array2<f64>,
    /// `h × k` treatment-lag weights on the outcome.
    pub omega_prime: Array2<f64>,
    /// `r × p` proxy loadings.
    pub beta: Array2<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite positive sd")
}

/// Draws λ, ω, ω′ and β.
pub fn draw_sim_params<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> SimParams {
    let h = cfg.h as f64;
    let lag_dist = |i: usize| normal(1.0 - (i as f64 + 1.0) / h, 1.0 / h);
    let lam = normal(0.0, LAMBDA_SD);
    let lambda = Array2::from_shape_fn((cfg.r, cfg.h), |_| lam.sample(rng));
    let omega = Array2::from_shape_fn((cfg.h, cfg.k), |(i, _)| lag_dist(i).sample(rng));
    let omega_prime = Array2::from_shape_fn((cfg.h, cfg.k), |(i, _)| lag_dist(i).sample(rng));
    let std = normal(0.0, 1.0);
    let beta = Array2::from_shape_fn((cfg.r, cfg.p), |_| std.sample(rng));
    SimParams { lambda, omega, omega_prime, beta }
}

/// η realizations for the whole dataset, `N × T × r`.
fn draw_eta(cfg: &SimConfig) -> Array3<f64> {
    let mut rng = stream(cfg.seed, STREAM_ETA);
    let d = normal(0.0, ETA_SD);
    Array3::from_shape_fn((cfg.n, cfg.t, cfg.r), |_| d.sample(&mut rng))
}

/// Confounders at step `t` given confounder and treatment history.
fn confounder_step(
    params: &SimParams,
    z: &Array2<f64>,
    a: &Array2<f64>,
    eta: ndarray::ArrayView1<'_, f64>,
    t: usize,
    out: &mut [f64],
) {
    let (r, h) = params.lambda.dim();
    let k = params.omega.ncols();
    let mut treat = 0.0;
    for i in 1..=h.min(t) {
        for l in 0..k {
            treat += params.omega[[i - 1, l]] * a[[t - i, l]];
        }
    }
    for (j, o) in out.iter_mut().enumerate().take(r) {
        let mut s = treat;
        for i in 1..=h.min(t) {
            s += params.lambda[[j, i - 1]] * z[[t - i, j]];
        }
        *o = s / h as f64 + eta[j];
    }
}

fn outcome_step(params: &SimParams, gamma_y: f64, z_t: &[f64], a: &Array2<f64>, t: usize) -> f64 {
    let h = params.omega_prime.nrows();
    let k = params.omega_prime.ncols();
    let zbar = z_t.iter().sum::<f64>() / z_t.len() as f64;
    let mut lagged = 0.0;
    for i in 1..=h.min(t) {
        for l in 0..k {
            lagged += params.omega_prime[[i - 1, l]] * a[[t - i, l]];
        }
    }
    gamma_y * zbar + (1.0 - gamma_y) * lagged / h as f64
}

/// Treatment logit π_t, identical for every treatment coordinate.
pub fn treatment_logit(gamma_a: f64, z_t: &[f64], a_prev: Option<&[f64]>) -> f64 {
    let zbar = z_t.iter().sum::<f64>() / z_t.len() as f64;
    let abar = a_prev.map_or(0.0, |a| a.iter().sum::<f64>() / a.len() as f64);
    gamma_a * zbar + (1.0 - gamma_a) * abar
}

/// Simulates factual trajectories (with oracle confounders, without
/// counterfactuals).
pub fn simulate(cfg: &SimConfig) -> Result<(TrajectoryDataset, SimParams)> {
    cfg.validate()?;
    let params = draw_sim_params(cfg, &mut stream(cfg.seed, STREAM_PARAMS));
    let eta = draw_eta(cfg);
    let mut eps_rng = stream(cfg.seed, STREAM_EPS);
    let mut treat_rng = stream(cfg.seed, STREAM_TREAT);
    let eps = normal(0.0, EPS_SD);

    let (n, tt, r, p, k) = (cfg.n, cfg.t, cfg.r, cfg.p, cfg.k);
    let mut x = Array3::zeros((n, tt, p));
    let mut a = Array3::zeros((n, tt, k));
    let mut y = Array2::zeros((n, tt));
    let mut z = Array3::zeros((n, tt, r));

    let mut z_loc = Array2::<f64>::zeros((tt, r));
    let mut a_loc = Array2::<f64>::zeros((tt, k));
    let mut zt = vec![0.0; r];
    for i in 0..n {
        z_loc.fill(0.0);
        a_loc.fill(0.0);
        for t in 0..tt {
            confounder_step(&params, &z_loc, &a_loc, eta.slice(ndarray::s![i, t, ..]), t, &mut zt);
            for j in 0..r {
                z_loc[[t, j]] = zt[j];
            }
            for m in 0..p {
                let mut s = 0.0;
                for j in 0..r {
                    s += params.beta[[j, m]] * zt[j];
                }
                x[[i, t, m]] = s + eps.sample(&mut eps_rng);
            }
            let prev = (t > 0).then(|| a_loc.row(t - 1).to_vec());
            let prob = sigmoid(treatment_logit(cfg.gamma_a, &zt, prev.as_deref()));
            for l in 0..k {
                let u: f64 = treat_rng.random();
                a_loc[[t, l]] = if u < prob { 1.0 } else { 0.0 };
            }
            y[[i, t]] = outcome_step(&params, cfg.gamma_y, &zt, &a_loc, t);
        }
        z.slice_mut(ndarray::s![i, .., ..]).assign(&z_loc);
        a.slice_mut(ndarray::s![i, .., ..]).assign(&a_loc);
    }

    let mut ds = TrajectoryDataset::new(x, a, y)?;
    ds.z = Some(z);
    Ok((ds, params))
}

/// Rolls `plan` (τ × k per patient) forward from `anchor_t`, reusing the
/// factual η draws. Returns counterfactual outcomes, `N × τ`.
pub fn rollout_plan(
    cfg: &SimConfig,
    params: &SimParams,
    dataset: &TrajectoryDataset,
    anchor_t: usize,
    plan: &Array3<f64>,
) -> Result<Array2<f64>> {
    let z = dataset
        .z
        .as_ref()
        .ok_or_else(|| Error::Usage("counterfactual rollout needs oracle confounders".into()))?;
    let (n, tau, k) = plan.dim();
    let tt = dataset.n_steps();
    if anchor_t + tau > tt {
        return Err(Error::Config(format!(
            "counterfactual horizon overflows: anchor {anchor_t} + tau {tau} > T {tt}"
        )));
    }
    if n != dataset.n_patients() || k != dataset.treatment_dim() {
        return Err(Error::Shape("plan does not match dataset dims".into()));
    }
    let eta = draw_eta(cfg);
    if eta.dim().0 != n || eta.dim().1 != tt {
        return Err(Error::Config("dataset was not produced by this config".into()));
    }
    let r = z.dim().2;
    let mut out = Array2::zeros((n, tau));
    let mut zt = vec![0.0; r];
    for i in 0..n {
        let mut z_loc = z.slice(ndarray::s![i, .., ..]).to_owned();
        let mut a_loc = dataset.a.slice(ndarray::s![i, .., ..]).to_owned();
        for s in 0..tau {
            let t = anchor_t + s;
            confounder_step(params, &z_loc, &a_loc, eta.slice(ndarray::s![i, t, ..]), t, &mut zt);
            for j in 0..r {
                z_loc[[t, j]] = zt[j];
            }
            for l in 0..k {
                a_loc[[t, l]] = plan[[i, s, l]];
            }
            out[[i, s]] = outcome_step(params, cfg.gamma_y, &zt, &a_loc, t);
        }
    }
    Ok(out)
}

/// Draws a Bernoulli(0.5) plan per patient and fills `cf_a`, `cf_y`, `anchor_t`.
pub fn simulate_counterfactuals<R: Rng + ?Sized>(
    cfg: &SimConfig,
    params: &SimParams,
    mut dataset: TrajectoryDataset,
    anchor_t: usize,
    rng: &mut R,
) -> Result<TrajectoryDataset> {
    if anchor_t + cfg.tau_cf > cfg.t {
        return Err(Error::Config(format!(
            "counterfactual horizon overflows: anchor {anchor_t} + tau {} > T {}",
            cfg.tau_cf, cfg.t
        )));
    }
    let plan = Array3::from_shape_fn((dataset.n_patients(), cfg.tau_cf, cfg.k), |_| {
        if rng.random::<f64>() < 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let cf_y = rollout_plan(cfg, params, &dataset, anchor_t, &plan)?;
    dataset.cf_a = Some(plan);
    dataset.cf_y = Some(cf_y);
    dataset.anchor_t = Some(anchor_t);
    Ok(dataset)
}

/// `simulate` followed by `simulate_counterfactuals` at the default anchor,
/// with the plan drawn from a stream of the config seed.
pub fn simulate_with_counterfactuals(cfg: &SimConfig) -> Result<(TrajectoryDataset, SimParams)> {
    let (ds, params) = simulate(cfg)?;
    let mut rng = stream(cfg.seed, 4);
    let ds = simulate_counterfactuals(cfg, &params, ds, cfg.default_anchor(), &mut rng)?;
    Ok((ds, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Axis};

    fn small(gamma: f64) -> SimConfig {
        SimConfig { n: 200, t: 12, seed: 7, ..SimConfig::default() }.with_gamma(gamma)
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { tau_cf: 40, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { gamma_a: 1.5, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { h: 0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }

    #[test]
    fn omega_with_h_one_is_standard_normal() {
        let cfg = SimConfig { h: 1, k: 1, ..SimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..20_000).map(|_| draw_sim_params(&cfg, &mut rng).omega[[0, 0]]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 3.0 / (draws.len() as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn lambda_mean_near_zero() {
        let cfg = SimConfig { r: 10, h: 10, ..SimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut all = Vec::new();
        while all.len() < 100_000 {
            all.extend(draw_sim_params(&cfg, &mut rng).lambda.iter().copied());
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 0.5 * 3.0 / (all.len() as f64).sqrt());
    }

    #[test]
    fn beta_shape() {
        let cfg = SimConfig { r: 5, p: 20, ..SimConfig::default() };
        let p = draw_sim_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.beta.dim(), (5, 20));
        assert_eq!(p.lambda.dim(), (5, 5));
        assert_eq!(p.omega.dim(), (5, 2));
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = small(0.4);
        let (a, pa) = simulate(&cfg).unwrap();
        let (b, pb) = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.x.dim(), (200, 12, 20));
        assert_eq!(a.a.dim(), (200, 12, 2));
        assert_eq!(a.y.dim(), (200, 12));
        assert_eq!(a.z.as_ref().unwrap().dim(), (200, 12, 5));
    }

    #[test]
    fn full_outcome_confounding_is_mean_of_z() {
        let cfg = SimConfig { gamma_a: 0.3, gamma_y: 1.0, ..small(0.0) };
        let (ds, _) = simulate(&cfg).unwrap();
        let z = ds.z.as_ref().unwrap();
        for i in 0..cfg.n {
            for t in 0..cfg.t {
                let zbar = z.slice(s![i, t, ..]).sum() / cfg.r as f64;
                assert_eq!(ds.y[[i, t]], zbar);
            }
        }
    }

    #[test]
    fn full_treatment_confounding_ties_logits_to_z() {
        let z = [0.2, -0.4, 0.9];
        let prev = [1.0, 0.0];
        assert_eq!(treatment_logit(1.0, &z, Some(&prev)), (0.2 - 0.4 + 0.9) / 3.0);
        assert_eq!(treatment_logit(0.0, &z, Some(&prev)), 0.5);
        assert_eq!(treatment_logit(0.0, &[0.0], None), 0.0);
    }

    #[test]
    fn counterfactual_of_factual_plan_is_factual() {
        let cfg = small(0.8);
        let (ds, params) = simulate(&cfg).unwrap();
        let anchor = cfg.default_anchor();
        let plan = ds.a.slice(s![.., anchor..anchor + cfg.tau_cf, ..]).to_owned();
        let cf = rollout_plan(&cfg, &params, &ds, anchor, &plan).unwrap();
        assert_eq!(cf, ds.y.slice(s![.., anchor..anchor + cfg.tau_cf]));
    }

    #[test]
    fn horizon_overflow_is_config_error() {
        let cfg = small(0.2);
        let (ds, params) = simulate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = simulate_counterfactuals(&cfg, &params, ds, cfg.t - 2, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn plan_is_fair_coin() {
        let cfg = SimConfig { n: 2000, ..small(0.4) };
        let (ds, _) = simulate_with_counterfactuals(&cfg).unwrap();
        let cfa = ds.cf_a.as_ref().unwrap();
        assert!(cfa.iter().all(|&v| v == 0.0 || v == 1.0));
        let n = cfa.len() as f64;
        let mean = cfa.sum() / n;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
        assert_eq!(ds.cf_y.as_ref().unwrap().dim(), (2000, cfg.tau_cf));
        assert_eq!(ds.anchor_t, Some(cfg.t - cfg.tau_cf));
        ds.validate().unwrap();
    }

    #[test]
    fn single_lag_outcome_responds_to_plan_one_step_later() {
        // With h = 1 and γ_Y = 0, Y after step t is Σ_l ω'_1,l A_{t-1},l, so
        // the plan entry at the anchor shows up in the second counterfactual
        // outcome while the first still reflects the factual step before it.
        let cfg = SimConfig { h: 1, gamma_y: 0.0, gamma_a: 0.5, ..small(0.0) };
        let (ds, params) = simulate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchor = cfg.default_anchor();
        let ds = simulate_counterfactuals(&cfg, &params, ds, anchor, &mut rng).unwrap();
        let cfa = ds.cf_a.as_ref().unwrap();
        let cfy = ds.cf_y.as_ref().unwrap();
        for i in 0..cfg.n {
            let first: f64 = (0..cfg.k).map(|l| params.omega_prime[[0, l]] * ds.a[[i, anchor - 1, l]]).sum();
            let second: f64 = (0..cfg.k).map(|l| params.omega_prime[[0, l]] * cfa[[i, 0, l]]).sum();
            assert!((cfy[[i, 0]] - first).abs() < 1e-15);
            assert!((cfy[[i, 1]] - second).abs() < 1e-15);
        }
    }

    #[test]
    fn treatments_at_first_step_are_fair_without_history() {
        let cfg = SimConfig { n: 5000, t: 2, tau_cf: 1, ..small(0.0) };
        let (ds, _) = simulate(&cfg).unwrap();
        let first = ds.a.index_axis(Axis(1), 0);
        let mean = first.sum() / first.len() as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / first.len() as f64).sqrt());
    }
}

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, IrlsConfig};
use super::{anchor_count, truncate_weights, window_weights, CovariateSource, PredictionRequest};
use crate::data::TrajectoryDataset;
use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::neuralnet::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsmConfig {
    pub tau: usize,
    pub truncation_low: f64,
    pub truncation_high: f64,
    pub irls: IrlsConfig,
    /// Ridge applied to the outcome regression only when its Gram matrix is
    /// numerically singular, as a fraction of the mean diagonal entry.
    pub fallback_ridge: f64,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self { tau: 5, truncation_low: 0.01, truncation_high: 0.99, irls: IrlsConfig::default(), fallback_ridge: 1e-8 }
    }
}

/// Fitted marginal structural model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    pub tau: usize,
    pub covariate_dim: usize,
    pub treatment_dim: usize,
    /// Per treatment, coefficients on `[a_{t-1}, 1]`.
    pub numerator: Vec<Array1<f64>>,
    /// Per treatment, coefficients on `[covariates_t, a_{t-1}, 1]`.
    pub denominator: Vec<Array1<f64>>,
    /// Coefficients on `[plan (τ·k), covariates_t, a_{t-1}, 1]`.
    pub outcome: Array1<f64>,
    pub truncation_low: f64,
    pub truncation_high: f64,
    /// Weight values at the truncation percentiles.
    pub weight_bounds: (f64, f64),
}

fn previous(a: ArrayView2<'_, f64>, t: usize) -> Array1<f64> {
    if t == 0 {
        Array1::zeros(a.ncols())
    } else {
        a.row(t - 1).to_owned()
    }
}

/// `[plan, covariates, a_prev, 1]`
fn outcome_row(plan: ArrayView2<'_, f64>, cov: ArrayView1<'_, f64>, a_prev: ArrayView1<'_, f64>) -> Vec<f64> {
    let mut row = Vec::with_capacity(plan.len() + cov.len() + a_prev.len() + 1);
    row.extend(plan.iter());
    row.extend(cov.iter());
    row.extend(a_prev.iter());
    row.push(1.0);
    row
}

/// Design and targets of the outcome stage over every anchor `0..=T-τ`,
/// rows ordered patient-major.
fn outcome_design(dataset: &TrajectoryDataset, source: &CovariateSource, tau: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, t_len, d) = source.covariates.dim();
    let k = dataset.treatment_dim();
    let anchors = anchor_count(t_len, tau)?;
    let q = tau * k + d + k + 1;
    let mut x = Array2::zeros((n * anchors, q));
    let mut y = Array1::zeros(n * anchors);
    for i in 0..n {
        let a = dataset.a.index_axis(Axis(0), i);
        for t in 0..anchors {
            let r = i * anchors + t;
            let plan = a.slice(s![t..t + tau, ..]);
            let prev = previous(a, t);
            let row = outcome_row(plan, source.covariates.slice(s![i, t, ..]), prev.view());
            x.row_mut(r).assign(&Array1::from(row));
            y[r] = dataset.y[[i, t + tau - 1]];
        }
    }
    Ok((x, y))
}

fn propensity_design(dataset: &TrajectoryDataset, source: &CovariateSource, with_covariates: bool) -> Array2<f64> {
    let (n, t_len, d) = source.covariates.dim();
    let k = dataset.treatment_dim();
    let q = if with_covariates { d + k + 1 } else { k + 1 };
    let mut x = Array2::zeros((n * t_len, q));
    for i in 0..n {
        let a = dataset.a.index_axis(Axis(0), i);
        for t in 0..t_len {
            let mut row = x.row_mut(i * t_len + t);
            let mut c = 0;
            if with_covariates {
                for j in 0..d {
                    row[c] = source.covariates[[i, t, j]];
                    c += 1;
                }
            }
            if t > 0 {
                for l in 0..k {
                    row[c + l] = a[[t - 1, l]];
                }
            }
            row[c + k] = 1.0;
        }
    }
    x
}

fn check_inputs(dataset: &TrajectoryDataset, source: &CovariateSource, cfg: &MsmConfig) -> Result<()> {
    dataset.validate()?;
    source.check(dataset)?;
    anchor_count(dataset.n_steps(), cfg.tau)?;
    if dataset.n_patients() == 0 {
        return Err(Error::Fit("no patients to fit".into()));
    }
    Ok(())
}

/// Weighted least squares; on a singular Gram matrix (collinear covariates)
/// retries with `relative_ridge` times the mean weighted squared regressor.
fn solve_outcome(x: ArrayView2<'_, f64>, y: &Array1<f64>, w: &Array1<f64>, relative_ridge: f64) -> Result<Array1<f64>> {
    let fail = |e: Error| Error::Fit(format!("weighted outcome regression: {e}"));
    match linalg::weighted_least_squares(x, y, w, 0.0) {
        Err(Error::Numerical(msg)) if relative_ridge > 0.0 => {
            let scale = x.rows().into_iter().zip(w).map(|(r, wi)| wi * r.dot(&r)).sum::<f64>() / x.ncols() as f64;
            log::warn!("outcome regression is singular ({msg}); retrying with ridge {:.3e}", relative_ridge * scale);
            linalg::weighted_least_squares(x, y, w, relative_ridge * scale).map_err(fail)
        }
        other => other.map_err(fail),
    }
}

/// Fits propensity models, forms truncated stabilized weights and solves
/// the weighted outcome regression.
pub fn fit_msm(dataset: &TrajectoryDataset, source: &CovariateSource, cfg: &MsmConfig) -> Result<MsmModel> {
    check_inputs(dataset, source, cfg)?;
    let (n, t_len, d) = source.covariates.dim();
    let k = dataset.treatment_dim();
    let x_num = propensity_design(dataset, source, false);
    let x_den = propensity_design(dataset, source, true);
    let mut numerator = Vec::with_capacity(k);
    let mut denominator = Vec::with_capacity(k);
    let mut p_num = Array3::zeros((n, t_len, k));
    let mut p_den = Array3::zeros((n, t_len, k));
    for l in 0..k {
        let target = dataset.a.slice(s![.., .., l]).iter().copied().collect::<Array1<f64>>();
        let bn = fit_logistic(x_num.view(), target.view(), &cfg.irls)
            .map_err(|e| Error::Fit(format!("numerator model for treatment {}: {e}", l + 1)))?;
        let bd = fit_logistic(x_den.view(), target.view(), &cfg.irls)
            .map_err(|e| Error::Fit(format!("denominator model for treatment {}: {e}", l + 1)))?;
        let pn = x_num.dot(&bn).mapv(sigmoid);
        let pd = x_den.dot(&bd).mapv(sigmoid);
        for i in 0..n {
            for t in 0..t_len {
                p_num[[i, t, l]] = pn[i * t_len + t];
                p_den[[i, t, l]] = pd[i * t_len + t];
            }
        }
        numerator.push(bn);
        denominator.push(bd);
    }
    let weights = window_weights(dataset.a.view(), &p_num, &p_den, cfg.tau);
    let mut flat: Vec<f64> = weights.iter().copied().collect();
    let bounds = truncate_weights(&mut flat, cfg.truncation_low, cfg.truncation_high)?;
    if bounds.0 == bounds.1 {
        return Err(Error::Fit("stabilized weights have zero spread after truncation".into()));
    }
    let (x, y) = outcome_design(dataset, source, cfg.tau)?;
    let outcome = solve_outcome(x.view(), &y, &Array1::from(flat), cfg.fallback_ridge)?;
    log::debug!("msm ({}): weight bounds {:?}, {} outcome rows", source.kind, bounds, y.len());
    Ok(MsmModel {
        tau: cfg.tau,
        covariate_dim: d,
        treatment_dim: k,
        numerator,
        denominator,
        outcome,
        truncation_low: cfg.truncation_low,
        truncation_high: cfg.truncation_high,
        weight_bounds: bounds,
    })
}

/// Outcome stage only, with caller-supplied weights (`N × (T-τ+1)`, one per
/// patient and anchor). Propensity coefficients are left empty.
pub fn fit_msm_with_weights(
    dataset: &TrajectoryDataset,
    source: &CovariateSource,
    cfg: &MsmConfig,
    weights: &Array2<f64>,
) -> Result<MsmModel> {
    check_inputs(dataset, source, cfg)?;
    let (x, y) = outcome_design(dataset, source, cfg.tau)?;
    if weights.len() != y.len() {
        return Err(shape_err(format!("{} weights for {} outcome rows", weights.len(), y.len())));
    }
    let w: Array1<f64> = weights.iter().copied().collect();
    let outcome = solve_outcome(x.view(), &y, &w, cfg.fallback_ridge)?;
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MsmModel {
        tau: cfg.tau,
        covariate_dim: source.dim(),
        treatment_dim: dataset.treatment_dim(),
        numerator: Vec::new(),
        denominator: Vec::new(),
        outcome,
        truncation_low: cfg.truncation_low,
        truncation_high: cfg.truncation_high,
        weight_bounds: (lo, hi),
    })
}

impl MsmModel {
    /// Stabilized weights (before truncation) this model assigns to the
    /// anchors of `dataset`, `N × (T-τ+1)`.
    pub fn stabilized_weights(&self, dataset: &TrajectoryDataset, source: &CovariateSource) -> Result<Array2<f64>> {
        if self.numerator.is_empty() {
            return Err(Error::Usage("model was fitted without propensity stages".into()));
        }
        source.check(dataset)?;
        let (n, t_len, _) = source.covariates.dim();
        let k = self.treatment_dim;
        let x_num = propensity_design(dataset, source, false);
        let x_den = propensity_design(dataset, source, true);
        let mut p_num = Array3::zeros((n, t_len, k));
        let mut p_den = Array3::zeros((n, t_len, k));
        for l in 0..k {
            let pn = x_num.dot(&self.numerator[l]).mapv(sigmoid);
            let pd = x_den.dot(&self.denominator[l]).mapv(sigmoid);
            for i in 0..n {
                for t in 0..t_len {
                    p_num[[i, t, l]] = pn[i * t_len + t];
                    p_den[[i, t, l]] = pd[i * t_len + t];
                }
            }
        }
        Ok(window_weights(dataset.a.view(), &p_num, &p_den, self.tau))
    }

    /// Planned-treatment coefficients, `τ × k`.
    pub fn plan_coefficients(&self) -> Array2<f64> {
        let m = self.tau * self.treatment_dim;
        self.outcome
            .slice(s![..m])
            .to_owned()
            .into_shape_with_order((self.tau, self.treatment_dim))
            .expect("plan block")
    }
}

/// Predicted outcome `τ` steps after the anchor under the request's plan.
pub fn predict_msm(model: &MsmModel, req: &PredictionRequest) -> Result<f64> {
    req.validate(model.covariate_dim, model.treatment_dim)?;
    if req.horizon() != model.tau {
        return Err(shape_err(format!("request horizon {} != fitted horizon {}", req.horizon(), model.tau)));
    }
    let cov = req.covariates.row(req.covariates.nrows() - 1);
    let prev = req.previous_treatment();
    let row = outcome_row(req.plan.view(), cov, prev.view());
    Ok(row.iter().zip(&model.outcome).map(|(a, b)| a * b).sum())
}

/// Predictions for every patient from a common `anchor` under per-patient
/// plans `N × τ × k`.
pub fn predict_msm_batch(
    model: &MsmModel,
    covariates: ArrayView3<'_, f64>,
    treatments: ArrayView3<'_, f64>,
    anchor: usize,
    plan: ArrayView3<'_, f64>,
) -> Result<Array1<f64>> {
    let n = covariates.dim().0;
    if treatments.dim().0 != n || plan.dim().0 != n {
        return Err(shape_err("batch prediction inputs disagree on patient count"));
    }
    if anchor >= covariates.dim().1 || anchor > treatments.dim().1 {
        return Err(shape_err(format!("anchor {anchor} outside the supplied history")));
    }
    (0..n)
        .map(|i| {
            let req = PredictionRequest::from_arrays(covariates, treatments, i, anchor, plan.index_axis(Axis(0), i));
            predict_msm(model, &req)
        })
        .collect()
}

//! Downstream outcome models for τ-step-ahead prediction under a treatment
//! plan: a marginal structural model with stabilized inverse-probability
//! weights, and a small recurrent marginal structural network.
//!
//! Both condition on a per-step covariate tensor chosen by
//! [`CovariateSource`]: raw proxies, learned embeddings or true confounders.

mod logistic;
mod msm;
mod rmsn;

pub use logistic::{fit_logistic, logistic_gradient, IrlsConfig};
pub use msm::{fit_msm, fit_msm_with_weights, predict_msm, predict_msm_batch, MsmConfig, MsmModel};
pub use rmsn::{
    fit_rmsn, fit_rmsn_unweighted, predict_rmsn, predict_rmsn_batch, rmsn_outcome_loss, rmsn_propensities, OutcomeNet,
    PropensityNet, RmsnHistory, RmsnHyper, RmsnModel, RmsnPath,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{shape_err, Error, Result};

/// Which per-step covariates an outcome model conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Observed noisy proxies.
    Proxies,
    /// Learned embedding.
    Embedding,
    /// True hidden confounders.
    Oracle,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Proxies => "proxies",
            SourceKind::Embedding => "embedding",
            SourceKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proxies" | "x" => Ok(SourceKind::Proxies),
            "embedding" | "z_hat" => Ok(SourceKind::Embedding),
            "oracle" | "z" => Ok(SourceKind::Oracle),
            _ => Err(Error::Usage(format!("unknown covariate source `{s}` (proxies, embedding, oracle)"))),
        }
    }
}

/// Per-step covariates `N × T × d` together with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSource {
    pub kind: SourceKind,
    pub covariates: Array3<f64>,
}

impl CovariateSource {
    /// Picks covariates out of `dataset`; `embedding` is required for
    /// [`SourceKind::Embedding`].
    pub fn from_dataset(kind: SourceKind, dataset: &TrajectoryDataset, embedding: Option<&Array3<f64>>) -> Result<Self> {
        let covariates = match kind {
            SourceKind::Proxies => dataset.x.clone(),
            SourceKind::Oracle => dataset
                .z
                .clone()
                .ok_or_else(|| Error::Usage("oracle source needs true confounders in the dataset".into()))?,
            SourceKind::Embedding => embedding
                .cloned()
                .ok_or_else(|| Error::Usage("embedding source needs an embedding tensor".into()))?,
        };
        let src = Self { kind, covariates };
        src.check(dataset)?;
        Ok(src)
    }

    pub fn dim(&self) -> usize {
        self.covariates.dim().2
    }

    pub(crate) fn check(&self, dataset: &TrajectoryDataset) -> Result<()> {
        let (n, t, _) = self.covariates.dim();
        if n != dataset.n_patients() || t != dataset.n_steps() {
            return Err(shape_err(format!(
                "{} covariates {:?} do not cover dataset ({} × {})",
                self.kind,
                self.covariates.dim(),
                dataset.n_patients(),
                dataset.n_steps()
            )));
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{} covariates contain non-finite values", self.kind)));
        }
        Ok(())
    }

    /// Rows for `rows` (positions) in order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self { kind: self.kind, covariates: self.covariates.select(ndarray::Axis(0), rows) }
    }
}

/// One patient's history up to an anchor step plus a treatment plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    /// Covariates for steps `0..=anchor`, `(anchor + 1) × d`.
    pub covariates: Array2<f64>,
    /// Treatments for steps `0..anchor`, `anchor × k`.
    pub treatments: Array2<f64>,
    /// Planned treatments for steps `anchor..anchor + τ`, `τ × k`.
    pub plan: Array2<f64>,
}

impl PredictionRequest {
    pub fn horizon(&self) -> usize {
        self.plan.nrows()
    }

    pub fn anchor(&self) -> usize {
        self.treatments.nrows()
    }

    /// History of patient `i` up to `anchor` with the given plan.
    pub fn from_arrays(
        covariates: ArrayView3<'_, f64>,
        treatments: ArrayView3<'_, f64>,
        i: usize,
        anchor: usize,
        plan: ArrayView2<'_, f64>,
    ) -> Self {
        Self {
            covariates: covariates.slice(s![i, ..=anchor, ..]).to_owned(),
            treatments: treatments.slice(s![i, ..anchor, ..]).to_owned(),
            plan: plan.to_owned(),
        }
    }

    pub fn validate(&self, d: usize, k: usize) -> Result<()> {
        if self.covariates.nrows() != self.treatments.nrows() + 1 {
            return Err(shape_err(format!(
                "request needs one more covariate row than treatment rows ({} vs {})",
                self.covariates.nrows(),
                self.treatments.nrows()
            )));
        }
        if self.covariates.ncols() != d || self.treatments.ncols() != k || self.plan.ncols() != k {
            return Err(shape_err(format!(
                "request dims (d {}, k {}/{}) do not match model (d {d}, k {k})",
                self.covariates.ncols(),
                self.treatments.ncols(),
                self.plan.ncols()
            )));
        }
        if self.plan.nrows() == 0 {
            return Err(Error::Config("plan horizon must be >= 1".into()));
        }
        if self.plan.iter().chain(self.treatments.iter()).any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("treatments and plans must be binary".into()));
        }
        Ok(())
    }

    /// Treatments at `anchor - 1`, zeros before the first step.
    pub(crate) fn previous_treatment(&self) -> Array1<f64> {
        let k = self.plan.ncols();
        match self.treatments.nrows() {
            0 => Array1::zeros(k),
            n => self.treatments.row(n - 1).to_owned(),
        }
    }
}

/// A fitted outcome model of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeModel {
    Msm(MsmModel),
    Rmsn(RmsnModel),
}

impl OutcomeModel {
    /// Predicted outcomes over the request's horizon. The linear model only
    /// predicts the last step, so its path has length one.
    pub fn predict(&self, req: &PredictionRequest) -> Result<Vec<f64>> {
        match self {
            OutcomeModel::Msm(m) => Ok(vec![predict_msm(m, req)?]),
            OutcomeModel::Rmsn(m) => Ok(predict_rmsn(m, req)?.outcomes.to_vec()),
        }
    }
}

pub const OUTCOME_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCheckpoint {
    pub format_version: u32,
    pub source: SourceKind,
    pub model: OutcomeModel,
}

impl OutcomeCheckpoint {
    pub fn new(source: SourceKind, model: OutcomeModel) -> Self {
        Self { format_version: OUTCOME_CHECKPOINT_VERSION, source, model }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        if ck.format_version != OUTCOME_CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "outcome checkpoint version {} not supported (expected {OUTCOME_CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

/// Probability of the observed binary value under `P(1) = p`.
fn likelihood(a: f64, p: f64) -> f64 {
    if a > 0.5 {
        p
    } else {
        1.0 - p
    }
}

/// Window-product stabilized weights `Π_{s=t}^{t+τ-1} Π_l P_num / P_den`
/// for every patient and every anchor `t ∈ 0..=T-τ`: `N × (T-τ+1)`.
pub(crate) fn window_weights(a: ArrayView3<'_, f64>, p_num: &Array3<f64>, p_den: &Array3<f64>, tau: usize) -> Array2<f64> {
    let (n, t_len, k) = a.dim();
    let anchors = t_len + 1 - tau;
    let mut ratio = Array2::<f64>::zeros((n, t_len));
    for i in 0..n {
        for t in 0..t_len {
            let mut r = 0.0;
            for l in 0..k {
                let av = a[[i, t, l]];
                r += likelihood(av, p_num[[i, t, l]]).ln() - likelihood(av, p_den[[i, t, l]]).ln();
            }
            ratio[[i, t]] = r;
        }
    }
    Array2::from_shape_fn((n, anchors), |(i, t)| ratio.slice(s![i, t..t + tau]).sum().exp())
}

/// Linear-interpolated percentile of `values` at `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Clamps weights to their `[low, high]` percentiles. Returns the bounds.
pub fn truncate_weights(w: &mut [f64], low: f64, high: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low >= high {
        return Err(Error::Config(format!("truncation percentiles ({low}, {high}) must satisfy 0 <= low < high <= 1")));
    }
    if w.is_empty() {
        return Err(Error::Fit("no weights to truncate".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Fit("stabilized weights must be positive and finite".into()));
    }
    let lo = percentile(w, low);
    let hi = percentile(w, high);
    for v in w.iter_mut() {
        *v = v.clamp(lo, hi);
    }
    Ok((lo, hi))
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err(format!("rmse over {} predictions and {} targets", pred.len(), target.len())));
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Anchors usable for τ-step targets on `t_len` steps.
pub(crate) fn anchor_count(t_len: usize, tau: usize) -> Result<usize> {
    if tau == 0 || tau > t_len {
        return Err(Error::Config(format!("horizon {tau} does not fit {t_len} steps")));
    }
    Ok(t_len + 1 - tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn truncation_bounds_are_percentiles() {
        let mut w: Vec<f64> = (1..=1000).map(|i| i as f64 / 100.0).collect();
        let (lo, hi) = truncate_weights(&mut w, 0.01, 0.99).unwrap();
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, lo);
        assert_eq!(max, hi);
        assert!(truncate_weights(&mut w, 0.5, 0.5).is_err());
    }

    #[test]
    fn window_weights_multiply_ratios() {
        let a = Array3::from_shape_vec((1, 3, 1), vec![1.0, 0.0, 1.0]).unwrap();
        let num = Array3::from_elem((1, 3, 1), 0.5);
        let den = Array3::from_shape_vec((1, 3, 1), vec![0.8, 0.25, 0.5]).unwrap();
        let w = window_weights(a.view(), &num, &den, 2);
        assert_eq!(w.dim(), (1, 2));
        assert!((w[[0, 0]] - (0.5 / 0.8) * (0.5 / 0.75)).abs() < 1e-12);
        assert!((w[[0, 1]] - (0.5 / 0.75)).abs() < 1e-12);
    }

    #[test]
    fn source_parsing() {
        assert_eq!("oracle".parse::<SourceKind>().unwrap(), SourceKind::Oracle);
        assert!("bogus".parse::<SourceKind>().is_err());
    }

    #[test]
    fn request_validation() {
        let req = PredictionRequest {
            covariates: array![[0.1, 0.2], [0.3, 0.4]],
            treatments: array![[1.0]],
            plan: array![[0.0], [1.0]],
        };
        req.validate(2, 1).unwrap();
        assert_eq!(req.anchor(), 1);
        assert_eq!(req.previous_treatment(), array![1.0]);
        let bad = PredictionRequest { plan: array![[2.0]], ..req.clone() };
        assert!(bad.validate(2, 1).is_err());
    }

    proptest! {
        #[test]
        fn truncated_weights_positive_finite(v in prop::collection::vec(1e-3f64..1e3, 2..200)) {
            let mut w = v.clone();
            truncate_weights(&mut w, 0.01, 0.99).unwrap();
            prop_assert!(w.iter().all(|x| x.is_finite() && *x > 0.0));
        }
    }
}

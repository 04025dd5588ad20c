use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{truncate_weights, CovariateSource, PredictionRequest};
use crate::data::TrajectoryDataset;
use crate::error::{shape_err, Error, Result};
use crate::neuralnet::{
    join, AdamConfig, Linear, LinearNodes, LstmCellParams, LstmNodes, Matrix, NodeId, OptimizerState, Parameters, Tape,
};

const CLIP_NORM: f64 = 5.0;
const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsnHyper {
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub propensity_epochs: usize,
    pub outcome_epochs: usize,
    pub truncation_low: f64,
    pub truncation_high: f64,
    pub seed: u64,
}

impl Default for RmsnHyper {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            batch_size: 128,
            learning_rate: 0.01,
            propensity_epochs: 10,
            outcome_epochs: 30,
            truncation_low: 0.01,
            truncation_high: 0.99,
            seed: 0,
        }
    }
}

impl RmsnHyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("rmsn hidden_dim and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("rmsn learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.truncation_low)
            || !(0.0..=1.0).contains(&self.truncation_high)
            || self.truncation_low >= self.truncation_high
        {
            return Err(Error::Config("rmsn truncation percentiles must satisfy 0 <= low < high <= 1".into()));
        }
        Ok(())
    }
}

/// LSTM with one sigmoid head per treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityNet {
    pub cell: LstmCellParams,
    pub head: Linear,
}

impl Parameters for PropensityNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.cell.visit(&join(prefix, "cell"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.cell.visit_mut(&join(prefix, "cell"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl PropensityNet {
    /// Treatment probabilities for every step, `N × T × k`, given per-step
    /// inputs `N × T × m`.
    pub fn probabilities(&self, inputs: ArrayView3<'_, f64>) -> Array3<f64> {
        let (n, t_len, _) = inputs.dim();
        let k = self.head.output_dim();
        let hid = self.cell.hidden_dim;
        let mut out = Array3::zeros((n, t_len, k));
        let mut h = Array2::zeros((n, hid));
        let mut c = Array2::zeros((n, hid));
        for t in 0..t_len {
            let x = inputs.index_axis(Axis(1), t).to_owned();
            let (h2, c2) = self.cell.step_batch(&x, &h, &c);
            h = h2;
            c = c2;
            let p = self.head.forward(&h).mapv(crate::neuralnet::sigmoid);
            out.index_axis_mut(Axis(1), t).assign(&p);
        }
        out
    }
}

/// Encoder over history, decoder over the plan, linear outcome head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeNet {
    pub encoder: LstmCellParams,
    pub decoder: LstmCellParams,
    pub head: Linear,
}

impl Parameters for OutcomeNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

struct OutcomeNodes {
    encoder: LstmNodes,
    decoder: LstmNodes,
    head: LinearNodes,
}

impl OutcomeNet {
    fn bind(&self, tape: &mut Tape) -> OutcomeNodes {
        OutcomeNodes {
            encoder: self.encoder.bind(tape, "encoder"),
            decoder: self.decoder.bind(tape, "decoder"),
            head: self.head.bind(tape, "head"),
        }
    }

    /// Encoder states after each history step, for a batch.
    fn encode(&self, history: ArrayView3<'_, f64>) -> Vec<(Matrix, Matrix)> {
        let (n, t_len, _) = history.dim();
        let hid = self.encoder.hidden_dim;
        let mut h = Array2::zeros((n, hid));
        let mut c = Array2::zeros((n, hid));
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x = history.index_axis(Axis(1), t).to_owned();
            let (h2, c2) = self.encoder.step_batch(&x, &h, &c);
            h = h2;
            c = c2;
            out.push((h.clone(), c.clone()));
        }
        out
    }

    /// Unrolls the decoder from `state` over `plan` (`rows × τ × k`).
    fn decode(&self, state: &(Matrix, Matrix), plan: ArrayView3<'_, f64>) -> Array2<f64> {
        let (rows, tau, _) = plan.dim();
        let (mut h, mut c) = state.clone();
        let mut out = Array2::zeros((rows, tau));
        for j in 0..tau {
            let x = plan.index_axis(Axis(1), j).to_owned();
            let (h2, c2) = self.decoder.step_batch(&x, &h, &c);
            h = h2;
            c = c2;
            out.column_mut(j).assign(&self.head.forward(&h).column(0));
        }
        out
    }
}

/// Fitted recurrent marginal structural network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsnModel {
    pub covariate_dim: usize,
    pub treatment_dim: usize,
    pub tau: usize,
    pub hyper: RmsnHyper,
    /// Input `a_{t-1}`.
    pub numerator: PropensityNet,
    /// Input `[covariates_t, a_{t-1}]`.
    pub denominator: PropensityNet,
    pub outcome: OutcomeNet,
    /// Weight values at the truncation percentiles.
    pub weight_bounds: (f64, f64),
}

impl Parameters for RmsnModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.numerator.visit(&join(prefix, "numerator"), f);
        self.denominator.visit(&join(prefix, "denominator"), f);
        self.outcome.visit(&join(prefix, "outcome"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.numerator.visit_mut(&join(prefix, "numerator"), f);
        self.denominator.visit_mut(&join(prefix, "denominator"), f);
        self.outcome.visit_mut(&join(prefix, "outcome"), f);
    }
}

/// Predicted outcomes for the `τ` steps following the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsnPath {
    pub outcomes: Array1<f64>,
}

impl RmsnPath {
    /// Outcome at the last planned step.
    pub fn final_step(&self) -> f64 {
        self.outcomes[self.outcomes.len() - 1]
    }
}

/// Treatments shifted one step forward, zeros at the first step.
fn lagged(a: ArrayView3<'_, f64>) -> Array3<f64> {
    let (n, t_len, k) = a.dim();
    let mut out = Array3::zeros((n, t_len, k));
    if t_len > 1 {
        out.slice_mut(s![.., 1.., ..]).assign(&a.slice(s![.., ..t_len - 1, ..]));
    }
    out
}

/// `[covariates_t, a_{t-1}]` for every step.
fn history_inputs(cov: ArrayView3<'_, f64>, a: ArrayView3<'_, f64>) -> Array3<f64> {
    let lag = lagged(a);
    ndarray::concatenate(Axis(2), &[cov, lag.view()]).expect("matching leading dims")
}

/// Prefix-product stabilized weights `N × A × τ`: entry `(i, t, j)` covers
/// steps `t..=t+j`.
fn prefix_weights(a: ArrayView3<'_, f64>, p_num: &Array3<f64>, p_den: &Array3<f64>, tau: usize) -> Array3<f64> {
    let (n, t_len, k) = a.dim();
    let anchors = t_len + 1 - tau;
    let mut log_ratio = Array2::<f64>::zeros((n, t_len));
    for i in 0..n {
        for t in 0..t_len {
            let mut r = 0.0;
            for l in 0..k {
                let (pn, pd) = (p_num[[i, t, l]], p_den[[i, t, l]]);
                r += if a[[i, t, l]] > 0.5 { pn.ln() - pd.ln() } else { (1.0 - pn).ln() - (1.0 - pd).ln() };
            }
            log_ratio[[i, t]] = r;
        }
    }
    let mut w = Array3::zeros((n, anchors, tau));
    for i in 0..n {
        for t in 0..anchors {
            let mut acc = 0.0;
            for j in 0..tau {
                acc += log_ratio[[i, t + j]];
                w[[i, t, j]] = acc.exp();
            }
        }
    }
    w
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size.min(n)).map(<[usize]>::to_vec).collect()
}

fn bce_on_tape(tape: &mut Tape, logits: NodeId, target: Matrix) -> NodeId {
    let p = tape.sigmoid(logits);
    let lp = tape.clamp_min(p, PROB_FLOOR);
    let lp = tape.log(lp);
    let q = tape.scale(p, -1.0);
    let q = tape.offset(q, 1.0);
    let lq = tape.clamp_min(q, PROB_FLOOR);
    let lq = tape.log(lq);
    let not_target = target.mapv(|v| 1.0 - v);
    let t1 = tape.constant(target);
    let t0 = tape.constant(not_target);
    let a = tape.mul(lp, t1);
    let b = tape.mul(lq, t0);
    let s = tape.add(a, b);
    let m = tape.mean(s);
    tape.scale(m, -1.0)
}

fn train_propensity(
    net: &mut PropensityNet,
    inputs: &Array3<f64>,
    a: ArrayView3<'_, f64>,
    hyper: &RmsnHyper,
    rng: &mut ChaCha8Rng,
    label: &str,
) -> Result<Vec<f64>> {
    let (n, t_len, _) = inputs.dim();
    let mut opt = OptimizerState::for_params(AdamConfig::with_lr(hyper.learning_rate), net);
    let mut history = Vec::with_capacity(hyper.propensity_epochs);
    for epoch in 0..hyper.propensity_epochs {
        let mut sum = 0.0;
        for (bi, rows) in batches(n, hyper.batch_size, rng).into_iter().enumerate() {
            let ctx = |msg: String| Error::Training { epoch: epoch + 1, batch: bi + 1, msg: format!("{label}: {msg}") };
            let x = inputs.select(Axis(0), &rows);
            let y = a.select(Axis(0), &rows);
            let mut tape = Tape::new();
            let cell = net.cell.bind(&mut tape, "cell");
            let head = net.head.bind(&mut tape, "head");
            let (mut h, mut c) = cell.zero_state(&mut tape, rows.len());
            let mut total = None;
            for t in 0..t_len {
                let xt = tape.constant(x.index_axis(Axis(1), t).to_owned());
                let (h2, c2) = cell.step(&mut tape, xt, h, c);
                h = h2;
                c = c2;
                let logits = head.forward(&mut tape, h);
                let l = bce_on_tape(&mut tape, logits, y.index_axis(Axis(1), t).to_owned());
                total = Some(match total {
                    Some(prev) => tape.add(prev, l),
                    None => l,
                });
            }
            let loss = tape.scale(total.expect("at least one step"), 1.0 / t_len as f64);
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(ctx(format!("non-finite propensity loss {v}")));
            }
            let mut grads = tape.backward(loss).map_err(|e| ctx(e.to_string()))?;
            grads.clip_global_norm(CLIP_NORM);
            opt.apply(net, &grads).map_err(|e| ctx(e.to_string()))?;
            sum += v * rows.len() as f64;
        }
        history.push(sum / n as f64);
    }
    Ok(history)
}

/// Weighted squared error of `τ`-step rollouts from every anchor, recorded
/// on `tape`. `w` is `B × A × τ`.
fn record_outcome_loss(
    tape: &mut Tape,
    nodes: &OutcomeNodes,
    history: ArrayView3<'_, f64>,
    a: ArrayView3<'_, f64>,
    y: ArrayView2<'_, f64>,
    w: ArrayView3<'_, f64>,
) -> NodeId {
    let (b, anchors, tau) = w.dim();
    let (mut h, mut c) = nodes.encoder.zero_state(tape, b);
    let mut total = None;
    for t in 0..anchors {
        let xt = tape.constant(history.index_axis(Axis(1), t).to_owned());
        let (h2, c2) = nodes.encoder.step(tape, xt, h, c);
        h = h2;
        c = c2;
        let (mut hd, mut cd) = (h, c);
        for j in 0..tau {
            let pj = tape.constant(a.index_axis(Axis(1), t + j).to_owned());
            let (h3, c3) = nodes.decoder.step(tape, pj, hd, cd);
            hd = h3;
            cd = c3;
            let pred = nodes.head.forward(tape, hd);
            let target = tape.constant(y.column(t + j).to_owned().insert_axis(Axis(1)));
            let d = tape.sub(pred, target);
            let d2 = tape.square(d);
            let wt = tape.constant(w.slice(s![.., t, j]).to_owned().insert_axis(Axis(1)));
            let wd = tape.mul(d2, wt);
            let s = tape.sum(wd);
            total = Some(match total {
                Some(prev) => tape.add(prev, s),
                None => s,
            });
        }
    }
    tape.scale(total.expect("at least one anchor"), 1.0 / (b * anchors * tau) as f64)
}

/// Weighted rollout loss on a whole dataset without a tape; `weights` of
/// `None` means unit weights.
pub fn rmsn_outcome_loss(
    model: &RmsnModel,
    dataset: &TrajectoryDataset,
    source: &CovariateSource,
    weights: Option<&Array3<f64>>,
) -> Result<f64> {
    source.check(dataset)?;
    let tau = model.tau;
    let anchors = super::anchor_count(dataset.n_steps(), tau)?;
    let hist = history_inputs(source.covariates.view(), dataset.a.view());
    let states = model.outcome.encode(hist.view());
    let mut total = 0.0;
    for (t, state) in states.iter().enumerate().take(anchors) {
        let plan = dataset.a.slice(s![.., t..t + tau, ..]);
        let pred = model.outcome.decode(state, plan);
        for i in 0..dataset.n_patients() {
            for j in 0..tau {
                let d = pred[[i, j]] - dataset.y[[i, t + j]];
                let w = weights.map_or(1.0, |w| w[[i, t, j]]);
                total += w * d * d;
            }
        }
    }
    Ok(total / (dataset.n_patients() * anchors * tau) as f64)
}

/// Per-epoch mean training losses of the two stages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RmsnHistory {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    pub outcome: Vec<f64>,
}

/// Two-stage fit: both propensity networks by cross-entropy, then the
/// encoder-decoder by stabilized-weight-weighted squared error.
pub fn fit_rmsn(
    dataset: &TrajectoryDataset,
    source: &CovariateSource,
    tau: usize,
    hyper: &RmsnHyper,
) -> Result<(RmsnModel, RmsnHistory)> {
    fit_rmsn_inner(dataset, source, tau, hyper, false)
}

/// As [`fit_rmsn`] with every stabilized weight forced to 1.
pub fn fit_rmsn_unweighted(
    dataset: &TrajectoryDataset,
    source: &CovariateSource,
    tau: usize,
    hyper: &RmsnHyper,
) -> Result<(RmsnModel, RmsnHistory)> {
    fit_rmsn_inner(dataset, source, tau, hyper, true)
}

fn fit_rmsn_inner(
    dataset: &TrajectoryDataset,
    source: &CovariateSource,
    tau: usize,
    hyper: &RmsnHyper,
    unit_weights: bool,
) -> Result<(RmsnModel, RmsnHistory)> {
    hyper.validate()?;
    dataset.validate()?;
    source.check(dataset)?;
    let anchors = super::anchor_count(dataset.n_steps(), tau)?;
    let n = dataset.n_patients();
    if n == 0 {
        return Err(Error::Fit("no patients to fit".into()));
    }
    let d = source.dim();
    let k = dataset.treatment_dim();
    let hid = hyper.hidden_dim;
    let mut init = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut numerator = PropensityNet { cell: LstmCellParams::new(k, hid, &mut init)?, head: Linear::new(hid, k, &mut init) };
    let mut denominator =
        PropensityNet { cell: LstmCellParams::new(d + k, hid, &mut init)?, head: Linear::new(hid, k, &mut init) };
    let mut outcome = OutcomeNet {
        encoder: LstmCellParams::new(d + k, hid, &mut init)?,
        decoder: LstmCellParams::new(k, hid, &mut init)?,
        head: Linear::new(hid, 1, &mut init),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);

    let lag = lagged(dataset.a.view());
    let hist = history_inputs(source.covariates.view(), dataset.a.view());
    let mut record = RmsnHistory {
        numerator: train_propensity(&mut numerator, &lag, dataset.a.view(), hyper, &mut rng, "numerator")?,
        denominator: train_propensity(&mut denominator, &hist, dataset.a.view(), hyper, &mut rng, "denominator")?,
        ..RmsnHistory::default()
    };

    let (weights, bounds) = if unit_weights {
        (Array3::ones((n, anchors, tau)), (1.0, 1.0))
    } else {
        let p_num = numerator.probabilities(lag.view());
        let p_den = denominator.probabilities(hist.view());
        let w = prefix_weights(dataset.a.view(), &p_num, &p_den, tau);
        let mut flat: Vec<f64> = w.iter().copied().collect();
        let bounds = truncate_weights(&mut flat, hyper.truncation_low, hyper.truncation_high)?;
        (Array3::from_shape_vec(w.raw_dim(), flat).expect("same length"), bounds)
    };

    let mut opt = OptimizerState::for_params(AdamConfig::with_lr(hyper.learning_rate), &outcome);
    for epoch in 0..hyper.outcome_epochs {
        let mut sum = 0.0;
        for (bi, rows) in batches(n, hyper.batch_size, &mut rng).into_iter().enumerate() {
            let ctx = |msg: String| Error::Training { epoch: epoch + 1, batch: bi + 1, msg: format!("outcome: {msg}") };
            let h = hist.select(Axis(0), &rows);
            let a = dataset.a.select(Axis(0), &rows);
            let y = dataset.y.select(Axis(0), &rows);
            let w = weights.select(Axis(0), &rows);
            let mut tape = Tape::new();
            let nodes = outcome.bind(&mut tape);
            let loss = record_outcome_loss(&mut tape, &nodes, h.view(), a.view(), y.view(), w.view());
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(ctx(format!("non-finite outcome loss {v}")));
            }
            let mut grads = tape.backward(loss).map_err(|e| ctx(e.to_string()))?;
            grads.clip_global_norm(CLIP_NORM);
            opt.apply(&mut outcome, &grads).map_err(|e| ctx(e.to_string()))?;
            sum += v * rows.len() as f64;
        }
        log::debug!("rmsn ({}) epoch {}: weighted loss {:.6}", source.kind, epoch + 1, sum / n as f64);
        record.outcome.push(sum / n as f64);
    }

    let model = RmsnModel {
        covariate_dim: d,
        treatment_dim: k,
        tau,
        hyper: *hyper,
        numerator,
        denominator,
        outcome,
        weight_bounds: bounds,
    };
    Ok((model, record))
}

/// Rollout under the request's plan.
pub fn predict_rmsn(model: &RmsnModel, req: &PredictionRequest) -> Result<RmsnPath> {
    req.validate(model.covariate_dim, model.treatment_dim)?;
    if req.horizon() > model.tau {
        return Err(shape_err(format!("request horizon {} exceeds trained horizon {}", req.horizon(), model.tau)));
    }
    let cov = req.covariates.view().insert_axis(Axis(0));
    let mut a = Array3::zeros((1, req.anchor() + 1, model.treatment_dim));
    a.slice_mut(s![0, ..req.anchor(), ..]).assign(&req.treatments);
    let hist = history_inputs(cov, a.view());
    let states = model.outcome.encode(hist.view());
    let path = model.outcome.decode(&states[req.anchor()], req.plan.view().insert_axis(Axis(0)));
    Ok(RmsnPath { outcomes: path.row(0).to_owned() })
}

/// Rollouts for every patient from a common `anchor` under per-patient
/// plans `N × τ × k`; returns `N × τ`.
pub fn predict_rmsn_batch(
    model: &RmsnModel,
    covariates: ArrayView3<'_, f64>,
    treatments: ArrayView3<'_, f64>,
    anchor: usize,
    plan: ArrayView3<'_, f64>,
) -> Result<Array2<f64>> {
    let (n, t_len, d) = covariates.dim();
    if d != model.covariate_dim || treatments.dim().2 != model.treatment_dim || plan.dim().2 != model.treatment_dim {
        return Err(shape_err("batch prediction dims do not match the model"));
    }
    if anchor >= t_len || treatments.dim().0 != n || plan.dim().0 != n || treatments.dim().1 < anchor {
        return Err(shape_err(format!("anchor {anchor} outside the supplied history of {t_len} steps")));
    }
    if plan.dim().1 == 0 || plan.dim().1 > model.tau {
        return Err(shape_err(format!("plan horizon {} outside 1..={}", plan.dim().1, model.tau)));
    }
    let hist = history_inputs(covariates.slice(s![.., ..=anchor, ..]), treatments.slice(s![.., ..=anchor, ..]));
    let states = model.outcome.encode(hist.view());
    Ok(model.outcome.decode(&states[anchor], plan))
}

/// Propensity probabilities of both networks, each `N × T × k`.
pub fn rmsn_propensities(model: &RmsnModel, dataset: &TrajectoryDataset, source: &CovariateSource) -> Result<(Array3<f64>, Array3<f64>)> {
    source.check(dataset)?;
    let lag = lagged(dataset.a.view());
    let hist = history_inputs(source.covariates.view(), dataset.a.view());
    Ok((model.numerator.probabilities(lag.view()), model.denominator.probabilities(hist.view())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outcome::SourceKind;
    use crate::simgen::{simulate, SimConfig};

    fn fixture() -> (TrajectoryDataset, CovariateSource) {
        let cfg = SimConfig { n: 60, t: 8, p: 6, r: 3, tau_cf: 3, seed: 9, ..SimConfig::default() }.with_gamma(0.5);
        let ds = simulate(&cfg).unwrap().0;
        let src = CovariateSource::from_dataset(SourceKind::Oracle, &ds, None).unwrap();
        (ds, src)
    }

    fn hyper() -> RmsnHyper {
        RmsnHyper { hidden_dim: 4, batch_size: 20, propensity_epochs: 2, outcome_epochs: 6, ..RmsnHyper::default() }
    }

    #[test]
    fn propensities_lie_in_open_unit_interval() {
        let (ds, src) = fixture();
        let (m, _) = fit_rmsn(&ds, &src, 3, &hyper()).unwrap();
        let (pn, pd) = rmsn_propensities(&m, &ds, &src).unwrap();
        assert!(pn.iter().chain(pd.iter()).all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn fitting_is_deterministic() {
        let (ds, src) = fixture();
        let (a, ha) = fit_rmsn(&ds, &src, 3, &hyper()).unwrap();
        let (b, hb) = fit_rmsn(&ds, &src, 3, &hyper()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn outcome_loss_decreases() {
        let (ds, src) = fixture();
        let h = RmsnHyper { outcome_epochs: 15, ..hyper() };
        let (_, hist) = fit_rmsn(&ds, &src, 3, &h).unwrap();
        assert!(hist.outcome.last().unwrap() < &hist.outcome[0], "{:?}", hist.outcome);
    }

    #[test]
    fn unit_weight_loss_is_plain_squared_error() {
        let (ds, src) = fixture();
        let (m, _) = fit_rmsn_unweighted(&ds, &src, 3, &hyper()).unwrap();
        assert_eq!(m.weight_bounds, (1.0, 1.0));
        let ones = Array3::ones((60, 6, 3));
        let weighted = rmsn_outcome_loss(&m, &ds, &src, Some(&ones)).unwrap();
        let mut sq = 0.0;
        let mut count = 0;
        for i in 0..60 {
            for t in 0..6 {
                let plan = ds.a.slice(s![i, t..t + 3, ..]);
                let req = PredictionRequest::from_arrays(src.covariates.view(), ds.a.view(), i, t, plan);
                let path = predict_rmsn(&m, &req).unwrap();
                for j in 0..3 {
                    sq += (path.outcomes[j] - ds.y[[i, t + j]]).powi(2);
                    count += 1;
                }
            }
        }
        assert!((weighted - sq / count as f64).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let (ds, src) = fixture();
        let (m, _) = fit_rmsn(&ds, &src, 3, &hyper()).unwrap();
        let lag_hist = history_inputs(src.covariates.view(), ds.a.view());
        let w = Array3::from_shape_fn((60, 6, 3), |(i, t, j)| 0.5 + ((i + t + j) % 3) as f64 * 0.25);
        let mut tape = Tape::new();
        let nodes = m.outcome.bind(&mut tape);
        let l = record_outcome_loss(&mut tape, &nodes, lag_hist.view(), ds.a.view(), ds.y.view(), w.view());
        let plain = rmsn_outcome_loss(&m, &ds, &src, Some(&w)).unwrap();
        assert!((tape.scalar(l) - plain).abs() < 1e-10);
    }

    #[test]
    fn plans_differing_at_last_step_share_prefix() {
        let (ds, src) = fixture();
        let (m, _) = fit_rmsn(&ds, &src, 3, &hyper()).unwrap();
        let p0 = Array2::zeros((3, 2));
        let mut p1 = p0.clone();
        p1[[2, 0]] = 1.0;
        let r0 = PredictionRequest::from_arrays(src.covariates.view(), ds.a.view(), 4, 5, p0.view());
        let r1 = PredictionRequest { plan: p1, ..r0.clone() };
        let a = predict_rmsn(&m, &r0).unwrap();
        let b = predict_rmsn(&m, &r1).unwrap();
        assert_eq!(a.outcomes.slice(s![..2]), b.outcomes.slice(s![..2]));
        assert_ne!(a.outcomes[2], b.outcomes[2]);
        assert_eq!(predict_rmsn(&m, &r0).unwrap(), a);
    }

    #[test]
    fn batch_prediction_matches_single() {
        let (ds, src) = fixture();
        let (m, _) = fit_rmsn(&ds, &src, 3, &hyper()).unwrap();
        let plan = ds.a.slice(s![.., 4..7, ..]).to_owned();
        let batch = predict_rmsn_batch(&m, src.covariates.view(), ds.a.view(), 4, plan.view()).unwrap();
        for i in [0, 17, 59] {
            let req = PredictionRequest::from_arrays(src.covariates.view(), ds.a.view(), i, 4, plan.slice(s![i, .., ..]));
            let single = predict_rmsn(&m, &req).unwrap();
            for j in 0..3 {
                assert!((single.outcomes[j] - batch[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn longer_request_than_trained_is_rejected() {
        let (ds, src) = fixture();
        let (m, _) = fit_rmsn(&ds, &src, 3, &RmsnHyper { outcome_epochs: 0, propensity_epochs: 0, ..hyper() }).unwrap();
        let plan = Array2::zeros((4, 2));
        let req = PredictionRequest::from_arrays(src.covariates.view(), ds.a.view(), 0, 2, plan.view());
        assert!(predict_rmsn(&m, &req).is_err());
    }
}

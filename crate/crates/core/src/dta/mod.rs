//! Deconfounding temporal autoencoder.
//!
//! An LSTM encoder maps proxies `x_t` to an embedding `ẑ_t`; an LSTM decoder
//! reads the embedding back and feeds a proxy head (`x̂_t`) and an outcome
//! head over `[h′_t; a_t]` (`ŷ_{t+1}`). Training minimises
//! `l_x + θ l_y + α R`, where `R` is the regression-based KL penalty in
//! [`penalty`].

mod penalty;
mod train;

pub use penalty::{causal_penalty, gaussian_kl, KlEntry, KlStats, PenaltyConfig};
pub use train::{evaluate, loss_and_gradients, train, train_with};

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::neuralnet::{join, Linear, LinearNodes, LstmCellParams, LstmNodes, Matrix, Parameters, Tape};

/// Largest treatment dimension for which all `2^k` assignments are enumerated.
pub const MAX_ENUMERATED_TREATMENTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtaModel {
    pub proxy_dim: usize,
    pub treatment_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub encoder: LstmCellParams,
    /// `h_t → ẑ_t`
    pub embed_head: Linear,
    pub decoder: LstmCellParams,
    /// `h′_t → x̂_t`
    pub proxy_head: Linear,
    /// `[h′_t; a_t] → ŷ_{t+1}`
    pub outcome_head: Linear,
}

/// Loss weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub theta: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { theta: 1.0, alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta >= 0.0 && self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative (theta {}, alpha {})",
                self.theta, self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_x: f64,
    pub l_y: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Combines component losses into the weighted objective.
pub fn total_loss(l_x: f64, l_y: f64, penalty: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown { l_x, l_y, penalty, total: l_x + weights.theta * l_y + weights.alpha * penalty }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtaHyper {
    /// Embedding size `p_z`.
    pub embed_dim: usize,
    /// Hidden size of both LSTMs.
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub theta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DtaHyper {
    fn default() -> Self {
        Self {
            embed_dim: 5,
            hidden_dim: 16,
            batch_size: 128,
            learning_rate: 0.005,
            dropout_rate: 0.1,
            theta: 1.0,
            alpha: 1.0,
            epochs: 200,
            seed: 0,
        }
    }
}

impl DtaHyper {
    pub fn weights(&self) -> LossWeights {
        LossWeights { theta: self.theta, alpha: self.alpha }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("embed_dim, hidden_dim and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Output of [`decode`] for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// `T × p`
    pub x_hat: Array2<f64>,
    /// `ŷ_{t+1}` for each step.
    pub y_hat: Array1<f64>,
    /// `T × dim_h`
    pub h_prime: Array2<f64>,
}

impl DtaModel {
    pub fn new<R: Rng + ?Sized>(
        proxy_dim: usize,
        treatment_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if proxy_dim == 0 || treatment_dim == 0 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("model dims must all be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {dropout_rate} outside [0, 1)")));
        }
        let encoder = LstmCellParams::new(proxy_dim, hidden_dim, rng)?;
        let embed_head = Linear::new(hidden_dim, embed_dim, rng);
        let decoder = LstmCellParams::new(embed_dim, hidden_dim, rng)?;
        let proxy_head = Linear::new(hidden_dim, proxy_dim, rng);
        let outcome_head = Linear::new(hidden_dim + treatment_dim, 1, rng);
        Ok(Self {
            proxy_dim,
            treatment_dim,
            embed_dim,
            hidden_dim,
            dropout_rate,
            encoder,
            embed_head,
            decoder,
            proxy_head,
            outcome_head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let (p, k, pz, h) = (self.proxy_dim, self.treatment_dim, self.embed_dim, self.hidden_dim);
        let ok = self.encoder.input_dim == p
            && self.encoder.hidden_dim == h
            && self.decoder.input_dim == pz
            && self.decoder.hidden_dim == h
            && self.embed_head.weight.dim() == (pz, h)
            && self.embed_head.bias.dim() == (1, pz)
            && self.proxy_head.weight.dim() == (p, h)
            && self.proxy_head.bias.dim() == (1, p)
            && self.outcome_head.weight.dim() == (1, h + k)
            && self.outcome_head.bias.dim() == (1, 1);
        if !ok || pz == 0 {
            return Err(shape_err("model tensors disagree with declared dims"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> DtaNodes {
        DtaNodes {
            encoder: self.encoder.bind(tape, "encoder"),
            embed_head: self.embed_head.bind(tape, "embed_head"),
            decoder: self.decoder.bind(tape, "decoder"),
            proxy_head: self.proxy_head.bind(tape, "proxy_head"),
            outcome_head: self.outcome_head.bind(tape, "outcome_head"),
        }
    }

    fn check_batch(&self, x: Option<ArrayView3<'_, f64>>, a: Option<ArrayView3<'_, f64>>) -> Result<()> {
        if let Some(x) = x {
            if x.dim().2 != self.proxy_dim {
                return Err(shape_err(format!("proxy dim {} != model {}", x.dim().2, self.proxy_dim)));
            }
        }
        if let Some(a) = a {
            if a.dim().2 != self.treatment_dim {
                return Err(shape_err(format!(
                    "treatment dim {} != model {}",
                    a.dim().2,
                    self.treatment_dim
                )));
            }
        }
        Ok(())
    }

    /// Hidden states of `cell` over time-major inputs.
    fn unroll(cell: &LstmCellParams, inputs: &[Matrix]) -> Vec<Matrix> {
        let rows = inputs.first().map_or(0, |m| m.nrows());
        let mut h = Array2::zeros((rows, cell.hidden_dim));
        let mut c = Array2::zeros((rows, cell.hidden_dim));
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (h2, c2) = cell.step_batch(x, &h, &c);
            h = h2;
            c = c2;
            out.push(h.clone());
        }
        out
    }

    /// Embeddings and encoder states for a batch, both time-major.
    fn encode_steps(&self, x: ArrayView3<'_, f64>) -> (Vec<Matrix>, Vec<Matrix>) {
        let xs = time_major(x);
        let hs = Self::unroll(&self.encoder, &xs);
        let zs = hs.iter().map(|h| self.embed_head.forward(h)).collect();
        (zs, hs)
    }

    /// Decoder states, proxy and outcome predictions for a batch.
    fn decode_steps(&self, zs: &[Matrix], a: ArrayView3<'_, f64>) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>) {
        let hp = Self::unroll(&self.decoder, zs);
        let xh = hp.iter().map(|h| self.proxy_head.forward(h)).collect();
        let yh = hp
            .iter()
            .enumerate()
            .map(|(t, h)| {
                let at = a.index_axis(Axis(1), t);
                let joined = ndarray::concatenate(Axis(1), &[h.view(), at]).expect("rows agree");
                self.outcome_head.forward(&joined)
            })
            .collect();
        (hp, xh, yh)
    }

    /// Outcome head on `h′` with every assignment in `{0,1}^k`: `B × 2^k`.
    fn all_assignments(&self, h_prime: &Matrix) -> Matrix {
        let k = self.treatment_dim;
        let h = self.hidden_dim;
        let w_h = self.outcome_head.weight.slice(s![.., ..h]);
        let w_a = self.outcome_head.weight.slice(s![0, h..]);
        let base = h_prime.dot(&w_h.t()).column(0).to_owned() + self.outcome_head.bias[[0, 0]];
        let combos = assignments(k);
        let mut out = Array2::zeros((h_prime.nrows(), combos.nrows()));
        for (c, combo) in combos.outer_iter().enumerate() {
            let shift: f64 = w_a.iter().zip(combo.iter()).map(|(w, v)| w * v).sum();
            out.column_mut(c).assign(&(&base + shift));
        }
        out
    }
}

impl Parameters for DtaModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.embed_head.visit(&join(prefix, "embed_head"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.proxy_head.visit(&join(prefix, "proxy_head"), f);
        self.outcome_head.visit(&join(prefix, "outcome_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.embed_head.visit_mut(&join(prefix, "embed_head"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.proxy_head.visit_mut(&join(prefix, "proxy_head"), f);
        self.outcome_head.visit_mut(&join(prefix, "outcome_head"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DtaNodes {
    pub encoder: LstmNodes,
    pub embed_head: LinearNodes,
    pub decoder: LstmNodes,
    pub proxy_head: LinearNodes,
    pub outcome_head: LinearNodes,
}

/// All `2^k` binary assignments as rows; bit `l` of row `c` is treatment `l`.
pub fn assignments(k: usize) -> Array2<f64> {
    let n = 1usize << k;
    Array2::from_shape_fn((n, k), |(c, l)| ((c >> l) & 1) as f64)
}

pub(crate) fn time_major(x: ArrayView3<'_, f64>) -> Vec<Matrix> {
    (0..x.dim().1).map(|t| x.index_axis(Axis(1), t).to_owned()).collect()
}

fn stack_time(steps: &[Matrix]) -> Array3<f64> {
    let views: Vec<_> = steps.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(1), &views).expect("time steps agree in shape")
}

fn single(x: ArrayView2<'_, f64>) -> ArrayView3<'_, f64> {
    x.insert_axis(Axis(0))
}

/// Encodes one trajectory: returns `(ẑ: T × p_z, h: T × dim_h)`.
pub fn encode(model: &DtaModel, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    model.check_batch(Some(single(x)), None)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("encode: non-finite proxies".into()));
    }
    let (zs, hs) = model.encode_steps(single(x));
    Ok((stack_time(&zs).index_axis_move(Axis(0), 0), stack_time(&hs).index_axis_move(Axis(0), 0)))
}

/// Decodes one trajectory's embedding under its treatments.
pub fn decode(model: &DtaModel, z_hat: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Decoded> {
    if z_hat.ncols() != model.embed_dim {
        return Err(shape_err(format!("embedding dim {} != model {}", z_hat.ncols(), model.embed_dim)));
    }
    if a.nrows() != z_hat.nrows() {
        return Err(shape_err(format!("{} embedding steps vs {} treatment steps", z_hat.nrows(), a.nrows())));
    }
    model.check_batch(None, Some(single(a)))?;
    let zs = time_major(single(z_hat));
    let (hp, xh, yh) = model.decode_steps(&zs, single(a));
    Ok(Decoded {
        x_hat: stack_time(&xh).index_axis_move(Axis(0), 0),
        y_hat: stack_time(&yh).index_axis_move(Axis(0), 0).column(0).to_owned(),
        h_prime: stack_time(&hp).index_axis_move(Axis(0), 0),
    })
}

/// `ŷ_{t+1}[a′]` for every step and every `a′ ∈ {0,1}^k`, as `T × 2^k` with
/// columns ordered as in [`assignments`]. The decoder state comes from the
/// factual decode; only the treatment input of the outcome head varies.
pub fn potential_outcomes(model: &DtaModel, z_hat: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_enumerable(model.treatment_dim)?;
    let dec = decode(model, z_hat, a)?;
    Ok(model.all_assignments(&dec.h_prime))
}

pub(crate) fn check_enumerable(k: usize) -> Result<()> {
    if k > MAX_ENUMERATED_TREATMENTS {
        return Err(Error::Config(format!(
            "enumerating 2^{k} treatment assignments exceeds the limit of k = {MAX_ENUMERATED_TREATMENTS}"
        )));
    }
    Ok(())
}

/// Inference-mode outputs for a batch of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs {
    /// `N × T × p_z`
    pub z_hat: Array3<f64>,
    /// `N × T × p`
    pub x_hat: Array3<f64>,
    /// `N × T`
    pub y_hat: Array2<f64>,
    /// `N × T × 2^k`
    pub potential: Array3<f64>,
}

/// Runs the whole model without dropout on `N × T × ·` arrays.
pub fn forward_batch(model: &DtaModel, x: ArrayView3<'_, f64>, a: ArrayView3<'_, f64>) -> Result<BatchOutputs> {
    model.check_batch(Some(x), Some(a))?;
    check_enumerable(model.treatment_dim)?;
    if x.dim().0 != a.dim().0 || x.dim().1 != a.dim().1 {
        return Err(shape_err(format!("proxies {:?} vs treatments {:?}", x.dim(), a.dim())));
    }
    let (zs, _) = model.encode_steps(x);
    let (hp, xh, yh) = model.decode_steps(&zs, a);
    let po: Vec<Matrix> = hp.iter().map(|h| model.all_assignments(h)).collect();
    Ok(BatchOutputs {
        z_hat: stack_time(&zs),
        x_hat: stack_time(&xh),
        y_hat: stack_time(&yh).index_axis_move(Axis(2), 0),
        potential: stack_time(&po),
    })
}

/// Embeddings `N × T × p_z` for every patient, dropout disabled.
pub fn embed_dataset(model: &DtaModel, dataset: &crate::data::TrajectoryDataset) -> Result<Array3<f64>> {
    model.validate()?;
    model.check_batch(Some(dataset.x.view()), Some(dataset.a.view()))?;
    if dataset.n_patients() == 0 {
        return Ok(Array3::zeros((0, dataset.n_steps(), model.embed_dim)));
    }
    let (zs, _) = model.encode_steps(dataset.x.view());
    Ok(stack_time(&zs))
}

/// Mean squared proxy error, normalised by `N T p`.
pub fn reconstruction_loss(x: ArrayView3<'_, f64>, x_hat: ArrayView3<'_, f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(shape_err(format!("reconstruction: {:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    Ok(mean_sq_diff(x.iter(), x_hat.iter(), x.len()))
}

/// Mean squared outcome error over `N T`.
pub fn outcome_loss(y: ArrayView2<'_, f64>, y_hat: ArrayView2<'_, f64>) -> Result<f64> {
    if y.dim() != y_hat.dim() {
        return Err(shape_err(format!("outcome: {:?} vs {:?}", y.dim(), y_hat.dim())));
    }
    Ok(mean_sq_diff(y.iter(), y_hat.iter(), y.len()))
}

fn mean_sq_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    a.zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / n as f64
}

/// Serialized model plus the hyperparameters it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtaCheckpoint {
    pub format_version: u32,
    pub hyper: DtaHyper,
    pub model: DtaModel,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl DtaCheckpoint {
    pub fn new(model: DtaModel, hyper: DtaHyper) -> Self {
        Self { format_version: CHECKPOINT_VERSION, hyper, model }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(k: usize) -> DtaModel {
        DtaModel::new(4, k, 2, 3, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn inputs(n: usize, t: usize, k: usize) -> (Array3<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array3::from_shape_fn((n, t, 4), |_| rng.random_range(-2.0..2.0));
        let a = Array3::from_shape_fn((n, t, k), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        (x, a)
    }

    #[test]
    fn zero_embed_weights_give_bias() {
        let mut m = model(1);
        m.embed_head.weight.fill(0.0);
        m.embed_head.bias = array![[0.3, -0.7]];
        let (x, _) = inputs(1, 6, 1);
        let (z, h) = encode(&m, x.index_axis(Axis(0), 0)).unwrap();
        assert_eq!(h.dim(), (6, 3));
        for row in z.outer_iter() {
            assert_eq!(row, array![0.3, -0.7]);
        }
    }

    #[test]
    fn embedding_shapes_follow_embed_dim() {
        for pz in [5, 10] {
            let m = DtaModel::new(20, 2, pz, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let x = Array2::from_elem((30, 20), 0.5);
            assert_eq!(encode(&m, x.view()).unwrap().0.dim(), (30, pz));
        }
    }

    #[test]
    fn patients_are_encoded_independently() {
        let m = model(1);
        let (x, a) = inputs(5, 4, 1);
        let full = forward_batch(&m, x.view(), a.view()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select(Axis(0), &perm);
        let ap = a.select(Axis(0), &perm);
        let permuted = forward_batch(&m, xp.view(), ap.view()).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            let lhs = permuted.z_hat.index_axis(Axis(0), row);
            let rhs = full.z_hat.index_axis(Axis(0), src);
            assert!(lhs.iter().zip(rhs.iter()).all(|(u, v)| (u - v).abs() < 1e-14));
        }
    }

    #[test]
    fn treatment_weights_shift_outcome_linearly() {
        let mut m = model(2);
        m.outcome_head.weight[[0, 3]] = 0.25;
        m.outcome_head.weight[[0, 4]] = -1.5;
        let (x, _) = inputs(1, 5, 2);
        let (z, _) = encode(&m, x.index_axis(Axis(0), 0)).unwrap();
        let a0 = Array2::zeros((5, 2));
        let mut a1 = a0.clone();
        a1[[2, 1]] = 1.0;
        let y0 = decode(&m, z.view(), a0.view()).unwrap().y_hat;
        let y1 = decode(&m, z.view(), a1.view()).unwrap().y_hat;
        for t in 0..5 {
            let expect = if t == 2 { -1.5 } else { 0.0 };
            assert!((y1[t] - y0[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_treatment_weights_make_outcome_invariant() {
        let mut m = model(2);
        m.outcome_head.weight.slice_mut(s![.., 3..]).fill(0.0);
        let (x, a) = inputs(1, 5, 2);
        let (z, _) = encode(&m, x.index_axis(Axis(0), 0)).unwrap();
        let dec = decode(&m, z.view(), a.index_axis(Axis(0), 0)).unwrap();
        assert_eq!(dec.x_hat.dim(), (5, 4));
        assert_eq!(dec.y_hat.len(), 5);
        let po = potential_outcomes(&m, z.view(), a.index_axis(Axis(0), 0)).unwrap();
        assert_eq!(po.dim(), (5, 4));
        for row in po.outer_iter() {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-14));
        }
    }

    #[test]
    fn factual_assignment_matches_factual_prediction() {
        let m = model(2);
        let (x, a) = inputs(1, 6, 2);
        let a0 = a.index_axis(Axis(0), 0);
        let (z, _) = encode(&m, x.index_axis(Axis(0), 0)).unwrap();
        let dec = decode(&m, z.view(), a0).unwrap();
        let po = potential_outcomes(&m, z.view(), a0).unwrap();
        for t in 0..6 {
            let c = (a0[[t, 0]] as usize) | ((a0[[t, 1]] as usize) << 1);
            assert!((po[[t, c]] - dec.y_hat[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn too_many_treatments_is_config_error() {
        let m = DtaModel::new(2, 11, 1, 2, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = Array2::zeros((3, 1));
        let a = Array2::zeros((3, 11));
        assert!(matches!(potential_outcomes(&m, z.view(), a.view()), Err(Error::Config(_))));
    }

    #[test]
    fn assignment_enumeration() {
        assert_eq!(assignments(2), array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert_eq!(assignments(3).nrows(), 8);
    }

    #[test]
    fn loss_examples() {
        let x = Array3::<f64>::zeros((1, 1, 2));
        let xh = Array3::from_shape_vec((1, 1, 2), vec![3.0, 4.0]).unwrap();
        assert_eq!(reconstruction_loss(x.view(), xh.view()).unwrap(), 12.5);
        assert_eq!(reconstruction_loss(x.view(), x.view()).unwrap(), 0.0);
        let shifted = &x + 1.0;
        assert_eq!(reconstruction_loss(x.view(), shifted.view()).unwrap(), 1.0);

        let y = array![[0.0], [0.0]];
        let yh = array![[1.0], [3.0]];
        assert_eq!(outcome_loss(y.view(), yh.view()).unwrap(), 5.0);
        let off = &y + 0.5;
        assert_eq!(outcome_loss(y.view(), off.view()).unwrap(), 0.25);
        assert!(outcome_loss(y.view(), x.index_axis(Axis(0), 0)).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights { theta: 0.5, alpha: 2.0 };
        assert_eq!(total_loss(1.0, 2.0, 3.0, w).total, 8.0);
        let zero = LossWeights { theta: 0.0, alpha: 0.0 };
        assert_eq!(total_loss(1.5, 9.0, 4.0, zero).total, 1.5);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = model(2);
        let ck = DtaCheckpoint::new(m, DtaHyper::default());
        let back = DtaCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}

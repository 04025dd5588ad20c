use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::penalty::penalty_on_tape;
use super::{
    assignments, causal_penalty, check_enumerable, forward_batch, outcome_loss, reconstruction_loss, time_major,
    total_loss, DtaHyper, DtaModel, DtaNodes, KlStats, LossBreakdown, LossWeights, PenaltyConfig,
};
use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::neuralnet::{AdamConfig, Gradients, NodeId, OptimizerState, Tape};

const CLIP_NORM: f64 = 5.0;

/// Scalar nodes of one recorded batch.
pub(crate) struct LossNodes {
    pub l_x: NodeId,
    pub l_y: NodeId,
    pub penalty: NodeId,
    pub total: NodeId,
}

fn dropout<R: Rng>(tape: &mut Tape, h: NodeId, rate: f64, rng: Option<&mut R>) -> NodeId {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let dims = tape.value(h).dim();
            let mask = Array2::from_shape_fn(dims, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = tape.constant(mask);
            tape.mul(h, m)
        }
        _ => h,
    }
}

fn accumulate(tape: &mut Tape, acc: Option<NodeId>, v: NodeId) -> Option<NodeId> {
    Some(match acc {
        Some(prev) => tape.add(prev, v),
        None => v,
    })
}

/// Records the full objective for one batch. Dropout is applied when `rng`
/// is given.
pub(crate) fn record_batch(
    tape: &mut Tape,
    model: &DtaModel,
    nodes: &DtaNodes,
    x: ArrayView3<'_, f64>,
    a: ArrayView3<'_, f64>,
    y: ArrayView2<'_, f64>,
    weights: LossWeights,
    penalty: &PenaltyConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossNodes> {
    let (b, t_len, p) = x.dim();
    let xs = time_major(x);
    let as_ = time_major(a);
    let combos = assignments(model.treatment_dim);
    let rate = model.dropout_rate;

    let (mut h, mut c) = nodes.encoder.zero_state(tape, b);
    let mut z = Vec::with_capacity(t_len);
    for xt in &xs {
        let xn = tape.constant(xt.clone());
        let (h2, c2) = nodes.encoder.step(tape, xn, h, c);
        h = h2;
        c = c2;
        let hd = dropout(tape, h, rate, rng.as_deref_mut());
        z.push(nodes.embed_head.forward(tape, hd));
    }

    let (mut h, mut c) = nodes.decoder.zero_state(tape, b);
    let mut sx = None;
    let mut sy = None;
    let mut po = vec![None; t_len];
    for t in 0..t_len {
        let (h2, c2) = nodes.decoder.step(tape, z[t], h, c);
        h = h2;
        c = c2;
        let hd = dropout(tape, h, rate, rng.as_deref_mut());

        let xhat = nodes.proxy_head.forward(tape, hd);
        let target = tape.constant(xs[t].clone());
        let d = tape.sub(xhat, target);
        let d2 = tape.square(d);
        let s = tape.sum(d2);
        sx = accumulate(tape, sx, s);

        let at = tape.constant(as_[t].clone());
        let joined = tape.concat_cols(&[hd, at]);
        let yhat = nodes.outcome_head.forward(tape, joined);
        let yt = tape.constant(y.column(t).to_owned().insert_axis(Axis(1)));
        let d = tape.sub(yhat, yt);
        let d2 = tape.square(d);
        let s = tape.sum(d2);
        sy = accumulate(tape, sy, s);

        if t > 0 {
            let cols: Vec<NodeId> = combos
                .outer_iter()
                .map(|combo| {
                    let fixed = combo.broadcast((b, combo.len())).expect("broadcast row").to_owned();
                    let fixed = tape.constant(fixed);
                    let joined = tape.concat_cols(&[hd, fixed]);
                    nodes.outcome_head.forward(tape, joined)
                })
                .collect();
            po[t] = Some(tape.concat_cols(&cols));
        }
    }

    let l_x = tape.scale(sx.expect("nonempty"), 1.0 / (b * t_len * p) as f64);
    let l_y = tape.scale(sy.expect("nonempty"), 1.0 / (b * t_len) as f64);
    let pen = penalty_on_tape(tape, &z, &as_, &po, penalty)?;
    let wy = tape.scale(l_y, weights.theta);
    let wr = tape.scale(pen, weights.alpha);
    let total = tape.add(l_x, wy);
    let total = tape.add(total, wr);
    Ok(LossNodes { l_x, l_y, penalty: pen, total })
}

/// Loss breakdown and parameter gradients on a batch, dropout off.
pub fn loss_and_gradients(
    model: &DtaModel,
    x: ArrayView3<'_, f64>,
    a: ArrayView3<'_, f64>,
    y: ArrayView2<'_, f64>,
    weights: LossWeights,
    penalty: &PenaltyConfig,
) -> Result<(LossBreakdown, Gradients)> {
    model.validate()?;
    check_enumerable(model.treatment_dim)?;
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape);
    let l = record_batch(&mut tape, model, &nodes, x, a, y, weights, penalty, None)?;
    let grads = tape.backward(l.total)?;
    let bd = total_loss(tape.scalar(l.l_x), tape.scalar(l.l_y), tape.scalar(l.penalty), weights);
    Ok((bd, grads))
}

/// Objective on a whole dataset in inference mode (no dropout), with the
/// penalty computed over all patients at once.
pub fn evaluate(
    model: &DtaModel,
    dataset: &TrajectoryDataset,
    weights: LossWeights,
    penalty: &PenaltyConfig,
) -> Result<(LossBreakdown, KlStats)> {
    model.validate()?;
    let out = forward_batch(model, dataset.x.view(), dataset.a.view())?;
    let l_x = reconstruction_loss(dataset.x.view(), out.x_hat.view())?;
    let l_y = outcome_loss(dataset.y.view(), out.y_hat.view())?;
    let (pen, stats) = causal_penalty(out.z_hat.view(), dataset.a.view(), out.potential.view(), penalty)?;
    Ok((total_loss(l_x, l_y, pen, weights), stats))
}

/// Trains with the default penalty settings.
pub fn train(dataset: &TrajectoryDataset, hyper: &DtaHyper) -> Result<(DtaModel, Vec<LossBreakdown>)> {
    train_with(dataset, hyper, &PenaltyConfig::default())
}

/// Splits a permutation into batches, folding a short tail into the
/// previous batch.
fn batches(order: &[usize], size: usize, min_rows: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 {
        let last = out[out.len() - 1].len();
        if last < min_rows.max(size.div_ceil(2)) {
            out.pop();
            let n = out.len();
            let start = (n - 1) * size;
            out[n - 1] = &order[start..];
        }
    }
    out
}

/// Mini-batch Adam on the weighted objective. Returns the trained model and
/// the per-epoch mean training losses (dropout active).
pub fn train_with(
    dataset: &TrajectoryDataset,
    hyper: &DtaHyper,
    penalty: &PenaltyConfig,
) -> Result<(DtaModel, Vec<LossBreakdown>)> {
    hyper.validate()?;
    dataset.validate()?;
    let n = dataset.n_patients();
    if n == 0 {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    if hyper.batch_size > n {
        return Err(Error::Config(format!("batch_size {} exceeds {} patients", hyper.batch_size, n)));
    }
    if dataset.n_steps() < 2 {
        return Err(Error::Precondition("training needs at least 2 steps".into()));
    }
    let k = dataset.treatment_dim();
    check_enumerable(k)?;
    let min_rows = PenaltyConfig::min_rows(hyper.embed_dim, k);
    if !penalty.allow_underdetermined && hyper.batch_size < min_rows {
        return Err(Error::Config(format!(
            "batch_size {} is below the {} rows the penalty regressions need",
            hyper.batch_size, min_rows
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = DtaModel::new(
        dataset.proxy_dim(),
        k,
        hyper.embed_dim,
        hyper.hidden_dim,
        hyper.dropout_rate,
        &mut init_rng,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);
    let mut opt = OptimizerState::for_params(AdamConfig::with_lr(hyper.learning_rate), &model);
    let weights = hyper.weights();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for (bi, rows) in batches(&order, hyper.batch_size, min_rows).into_iter().enumerate() {
            let ctx = |msg: String| Error::Training { epoch: epoch + 1, batch: bi + 1, msg };
            let x = dataset.x.select(Axis(0), rows);
            let a = dataset.a.select(Axis(0), rows);
            let y = dataset.y.select(Axis(0), rows);
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let l = record_batch(&mut tape, &model, &nodes, x.view(), a.view(), y.view(), weights, penalty, Some(&mut rng))
                .map_err(|e| ctx(e.to_string()))?;
            let vals = [tape.scalar(l.l_x), tape.scalar(l.l_y), tape.scalar(l.penalty)];
            if vals.iter().any(|v| !v.is_finite()) || !tape.scalar(l.total).is_finite() {
                return Err(ctx(format!("non-finite loss (l_x {}, l_y {}, penalty {})", vals[0], vals[1], vals[2])));
            }
            let mut grads = tape.backward(l.total).map_err(|e| ctx(e.to_string()))?;
            grads.clip_global_norm(CLIP_NORM);
            opt.apply(&mut model, &grads).map_err(|e| ctx(e.to_string()))?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * rows.len() as f64;
            }
        }
        let m = |s: f64| s / n as f64;
        let bd = total_loss(m(sums[0]), m(sums[1]), m(sums[2]), weights);
        log::debug!("epoch {}: total {:.6} (l_x {:.6}, l_y {:.6}, penalty {:.6})", epoch + 1, bd.total, bd.l_x, bd.l_y, bd.penalty);
        history.push(bd);
    }
    Ok((model, history))
}

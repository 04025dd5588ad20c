use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_uniform, join, sigmoid, Matrix, NodeId, Parameters, Tape};
use crate::error::{shape_err, Error, Result};

/// Weights of one LSTM gate: `W_in x + W_rec h + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Matrix,
}

impl GateParams {
    fn new<R: Rng + ?Sized>(input: usize, hidden: usize, bias: f64, rng: &mut R) -> Self {
        Self {
            w_in: init_uniform(hidden, input, input, rng),
            w_rec: init_uniform(hidden, hidden, hidden, rng),
            bias: Array2::from_elem((1, hidden), bias),
        }
    }

    fn pre_activation(&self, x: ArrayView1<'_, f64>, h: ArrayView1<'_, f64>) -> Array1<f64> {
        self.w_in.dot(&x) + self.w_rec.dot(&h) + self.bias.row(0)
    }
}

impl Parameters for GateParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        f(join(prefix, "w_in"), &self.w_in);
        f(join(prefix, "w_rec"), &self.w_rec);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "w_in"), &mut self.w_in);
        f(join(prefix, "w_rec"), &mut self.w_rec);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// A single LSTM cell. All four gates share identical shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub candidate: GateParams,
}

impl LstmCellParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, forget bias 1.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self> {
        if hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Config(format!(
                "lstm dims must be positive (input {input_dim}, hidden {hidden_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            input_gate: GateParams::new(input_dim, hidden_dim, 0.0, rng),
            forget_gate: GateParams::new(input_dim, hidden_dim, 1.0, rng),
            output_gate: GateParams::new(input_dim, hidden_dim, 0.0, rng),
            candidate: GateParams::new(input_dim, hidden_dim, 0.0, rng),
        })
    }

    pub fn gates(&self) -> [&GateParams; 4] {
        [&self.input_gate, &self.forget_gate, &self.output_gate, &self.candidate]
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(shape_err("lstm hidden_dim must be > 0"));
        }
        for g in self.gates() {
            if g.w_in.dim() != (self.hidden_dim, self.input_dim)
                || g.w_rec.dim() != (self.hidden_dim, self.hidden_dim)
                || g.bias.dim() != (1, self.hidden_dim)
            {
                return Err(shape_err("lstm gate shapes disagree with declared dims"));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> LstmNodes {
        let mut bind_gate = |g: &GateParams, name: &str| {
            let p = join(prefix, name);
            [
                tape.param(join(&p, "w_in"), &g.w_in),
                tape.param(join(&p, "w_rec"), &g.w_rec),
                tape.param(join(&p, "bias"), &g.bias),
            ]
        };
        LstmNodes {
            hidden_dim: self.hidden_dim,
            input_gate: bind_gate(&self.input_gate, "input_gate"),
            forget_gate: bind_gate(&self.forget_gate, "forget_gate"),
            output_gate: bind_gate(&self.output_gate, "output_gate"),
            candidate: bind_gate(&self.candidate, "candidate"),
        }
    }

    /// Runs the cell over a batch without recording; rows of `x` are samples.
    pub fn step_batch(&self, x: &Matrix, h: &Matrix, c: &Matrix) -> (Matrix, Matrix) {
        let pre = |g: &GateParams| x.dot(&g.w_in.t()) + h.dot(&g.w_rec.t()) + &g.bias;
        let i = pre(&self.input_gate).mapv(sigmoid);
        let f = pre(&self.forget_gate).mapv(sigmoid);
        let o = pre(&self.output_gate).mapv(sigmoid);
        let g = pre(&self.candidate).mapv(f64::tanh);
        let c_new = &f * c + &i * &g;
        let h_new = &o * &c_new.mapv(f64::tanh);
        (h_new, c_new)
    }
}

impl Parameters for LstmCellParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.input_gate.visit(&join(prefix, "input_gate"), f);
        self.forget_gate.visit(&join(prefix, "forget_gate"), f);
        self.output_gate.visit(&join(prefix, "output_gate"), f);
        self.candidate.visit(&join(prefix, "candidate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.input_gate.visit_mut(&join(prefix, "input_gate"), f);
        self.forget_gate.visit_mut(&join(prefix, "forget_gate"), f);
        self.output_gate.visit_mut(&join(prefix, "output_gate"), f);
        self.candidate.visit_mut(&join(prefix, "candidate"), f);
    }
}

/// One LSTM step on a single sample.
pub fn lstm_step(
    params: &LstmCellParams,
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    c_prev: ArrayView1<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    params.validate()?;
    if x.len() != params.input_dim || h_prev.len() != params.hidden_dim || c_prev.len() != params.hidden_dim {
        return Err(shape_err(format!(
            "lstm_step: expected x {} / h,c {}, got {} / {} / {}",
            params.input_dim,
            params.hidden_dim,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let i = params.input_gate.pre_activation(x, h_prev).mapv(sigmoid);
    let f = params.forget_gate.pre_activation(x, h_prev).mapv(sigmoid);
    let o = params.output_gate.pre_activation(x, h_prev).mapv(sigmoid);
    let g = params.candidate.pre_activation(x, h_prev).mapv(f64::tanh);
    let c = &f * &c_prev + &i * &g;
    let h = &o * &c.mapv(f64::tanh);
    Ok((h, c))
}

/// Tape handles for an LSTM cell's parameters, gate order `[w_in, w_rec, bias]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub hidden_dim: usize,
    pub input_gate: [NodeId; 3],
    pub forget_gate: [NodeId; 3],
    pub output_gate: [NodeId; 3],
    pub candidate: [NodeId; 3],
}

impl LstmNodes {
    fn gate(tape: &mut Tape, g: [NodeId; 3], x: NodeId, h: NodeId) -> NodeId {
        let a = tape.matmul_bt(x, g[0]);
        let b = tape.matmul_bt(h, g[1]);
        let s = tape.add(a, b);
        tape.add_row(s, g[2])
    }

    /// Recorded batch step; returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let i = Self::gate(tape, self.input_gate, x, h);
        let i = tape.sigmoid(i);
        let f = Self::gate(tape, self.forget_gate, x, h);
        let f = tape.sigmoid(f);
        let o = Self::gate(tape, self.output_gate, x, h);
        let o = tape.sigmoid(o);
        let g = Self::gate(tape, self.candidate, x, h);
        let g = tape.tanh(g);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (h_new, c_new)
    }

    /// Zero initial state for a batch of `rows`.
    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> (NodeId, NodeId) {
        let h = tape.constant(Array2::zeros((rows, self.hidden_dim)));
        let c = tape.constant(Array2::zeros((rows, self.hidden_dim)));
        (h, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{assign_flat, flatten_params};
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> LstmCellParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = LstmCellParams::new(input, hidden, &mut rng).unwrap();
        p.visit_mut("", &mut |_, m| m.fill(0.0));
        p
    }

    #[test]
    fn all_zero_weights_give_zero_state() {
        let p = zero_cell(3, 2);
        let (h, c) = lstm_step(&p, array![1.0, -2.0, 3.0].view(), Array1::zeros(2).view(), Array1::zeros(2).view()).unwrap();
        assert_eq!(h, Array1::<f64>::zeros(2));
        assert_eq!(c, Array1::<f64>::zeros(2));
    }

    #[test]
    fn saturated_gates_carry_cell_state() {
        let mut p = zero_cell(2, 2);
        p.forget_gate.bias.fill(50.0);
        p.input_gate.bias.fill(-50.0);
        let c_prev = array![0.7, -1.3];
        let (_, c) = lstm_step(&p, array![0.4, 0.1].view(), array![0.2, 0.3].view(), c_prev.view()).unwrap();
        for (a, b) in c.iter().zip(c_prev.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = zero_cell(3, 2);
        let r = lstm_step(&p, array![1.0].view(), Array1::zeros(2).view(), Array1::zeros(2).view());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn batch_and_tape_agree_with_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmCellParams::new(3, 4, &mut rng).unwrap();
        let x = init_uniform(2, 3, 1, &mut rng);
        let h = init_uniform(2, 4, 1, &mut rng);
        let c = init_uniform(2, 4, 1, &mut rng);
        let (hb, cb) = p.step_batch(&x, &h, &c);
        let mut tape = Tape::new();
        let nodes = p.bind(&mut tape, "cell");
        let (xn, hn, cn) = (tape.constant(x.clone()), tape.constant(h.clone()), tape.constant(c.clone()));
        let (ht, ct) = nodes.step(&mut tape, xn, hn, cn);
        for r in 0..2 {
            let (hs, cs) = lstm_step(&p, x.row(r), h.row(r), c.row(r)).unwrap();
            for j in 0..4 {
                assert!((hs[j] - hb[[r, j]]).abs() < 1e-14);
                assert!((cs[j] - cb[[r, j]]).abs() < 1e-14);
                assert!((hs[j] - tape.value(ht)[[r, j]]).abs() < 1e-14);
                assert!((cs[j] - tape.value(ct)[[r, j]]).abs() < 1e-14);
            }
        }
        let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| format!("cell.{n}")).collect();
        let taped: Vec<&str> = tape.param_names().collect();
        assert_eq!(names, taped);
    }

    #[test]
    fn gradient_of_squared_h_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LstmCellParams::new(3, 4, &mut rng).unwrap();
        let x = array![0.3, -0.8, 0.5];
        let h0 = array![0.1, -0.2, 0.05, 0.3];
        let c0 = array![0.4, 0.1, -0.6, 0.2];

        let mut tape = Tape::new();
        let nodes = p.bind(&mut tape, "");
        let xn = tape.constant(x.clone().insert_axis(Axis(0)));
        let hn = tape.constant(h0.clone().insert_axis(Axis(0)));
        let cn = tape.constant(c0.clone().insert_axis(Axis(0)));
        let (h, _) = nodes.step(&mut tape, xn, hn, cn);
        let sq = tape.square(h);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();

        let objective = |q: &LstmCellParams| {
            let (h, _) = lstm_step(q, x.view(), h0.view(), c0.view()).unwrap();
            h.iter().map(|v| v * v).sum::<f64>()
        };
        let flat = flatten_params(&p);
        let analytic: Vec<f64> = grads.grads.iter().flat_map(|g| g.iter().copied()).collect();
        let eps = 1e-6;
        let mut checked = 0;
        for idx in 0..flat.len() {
            let mut q = p.clone();
            let mut v = flat.clone();
            v[idx] += eps;
            assign_flat(&mut q, &v);
            let up = objective(&q);
            v[idx] -= 2.0 * eps;
            assign_flat(&mut q, &v);
            let down = objective(&q);
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[idx];
            let denom = fd.abs().max(an.abs());
            if denom > 1e-7 {
                assert!((fd - an).abs() / denom < 1e-5, "param {idx}: fd {fd} an {an}");
            } else {
                assert!((fd - an).abs() < 1e-9);
            }
            checked += 1;
        }
        assert_eq!(checked, p.param_count());
    }

    proptest! {
        #[test]
        fn hidden_state_is_bounded(
            seed in 0u64..1000,
            scale in 0.1f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = LstmCellParams::new(3, 5, &mut rng).unwrap();
            p.visit_mut("", &mut |_, m| m.mapv_inplace(|v| v * scale));
            let x = init_uniform(1, 3, 1, &mut rng).row(0).mapv(|v| v * scale);
            let h0 = init_uniform(1, 5, 1, &mut rng).row(0).to_owned();
            let c0 = init_uniform(1, 5, 1, &mut rng).row(0).mapv(|v| v * scale);
            let (h, c) = lstm_step(&p, x.view(), h0.view(), c0.view()).unwrap();
            prop_assert!(h.iter().all(|v| v.abs() < 1.0));
            prop_assert!(c.iter().all(|v| v.is_finite()));
        }
    }
}

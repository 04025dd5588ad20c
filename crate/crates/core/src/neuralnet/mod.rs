//! Minimal differentiable kernel: dense layers, LSTM cells, mean squared
//! error, Adam and a reverse-mode tape.
//!
//! Weights follow the `W x + b` convention (`W` is `out × in`); biases are
//! stored as `1 × out` row matrices so they broadcast over a batch of rows.

mod adam;
mod lstm;
mod tape;

pub use adam::{adam_update, AdamConfig, OptimizerState};
pub use lstm::{lstm_step, GateParams, LstmCellParams, LstmNodes};
pub use tape::{Gradients, NodeId, Tape};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{shape_err, Result};

/// Dense row-major matrix of 64-bit floats.
pub type Matrix = Array2<f64>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `W x + b` for a single input vector.
pub fn linear(w: &Matrix, b: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(shape_err(format!(
            "linear: W is {}x{}, b has {}, x has {}",
            w.nrows(),
            w.ncols(),
            b.len(),
            x.len()
        )));
    }
    Ok(w.dot(&x) + b)
}

/// Mean over all elements of the squared differences.
pub fn mse(pred: &[Array1<f64>], target: &[Array1<f64>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err(format!(
            "mse: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() {
            return Err(shape_err(format!("mse: vector lengths {} vs {}", p.len(), t.len())));
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Visitor over named learnable tensors. The visiting order is stable and
/// must match the order in which a module registers its tensors on a tape.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn named_params(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m.clone())));
        out
    }
}

/// All parameters concatenated in visiting order.
pub fn flatten_params(p: &dyn Parameters) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, m| out.extend(m.iter().copied()));
    out
}

/// Inverse of [`flatten_params`].
pub fn assign_flat(p: &mut dyn Parameters, values: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, m| {
        for v in m.iter_mut() {
            *v = values[offset];
            offset += 1;
        }
    });
    assert_eq!(offset, values.len(), "assign_flat: length mismatch");
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Fully connected layer `y = W x + b` used as a tape building block.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(output, input, input, rng),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> LinearNodes {
        LinearNodes {
            weight: tape.param(join(prefix, "weight"), &self.weight),
            bias: tape.param(join(prefix, "bias"), &self.bias),
        }
    }

    /// Batch forward without a tape: rows of `x` are samples.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.dot(&self.weight.t()) + &self.bias
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl LinearNodes {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let xw = tape.matmul_bt(x, self.weight);
        tape.add_row(xw, self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn linear_identity_and_zero() {
        let x = array![0.5, -1.5];
        let y = linear(&Array2::eye(2), array![0.0, 0.0].view(), x.view()).unwrap();
        assert_eq!(y, x);
        let b = array![3.0, 4.0];
        let y = linear(&Array2::zeros((2, 2)), b.view(), x.view()).unwrap();
        assert_eq!(y, b);
    }

    #[test]
    fn linear_hand_example() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        let y = linear(&w, array![1.0, 1.0].view(), array![1.0, 1.0].view()).unwrap();
        assert_eq!(y, array![4.0, 8.0]);
    }

    #[test]
    fn linear_shape_error() {
        let w = array![[1.0, 2.0]];
        assert!(linear(&w, array![0.0].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = vec![array![1.0, 2.0], array![3.0, 4.0]];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b: Vec<_> = a.iter().map(|v| v + 1.0).collect();
        assert_eq!(mse(&b, &a).unwrap(), 1.0);
        assert_eq!(mse(&[array![0.0, 2.0]], &[array![1.0, 0.0]]).unwrap(), 2.5);
        assert!(mse(&[array![0.0]], &[array![1.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn mse_nonnegative_zero_iff_equal(
            v in prop::collection::vec(-10.0f64..10.0, 1..20),
            d in prop::collection::vec(-1.0f64..1.0, 1..20),
        ) {
            let n = v.len().min(d.len());
            let p = Array1::from(v[..n].to_vec());
            let t = &p + &Array1::from(d[..n].to_vec());
            let m = mse(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, p == t);
        }
    }
}

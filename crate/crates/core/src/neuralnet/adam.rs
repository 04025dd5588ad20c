use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, Parameters};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl OptimizerState {
    /// Fresh state shaped like `model`'s parameters.
    pub fn for_params(config: AdamConfig, model: &dyn Parameters) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        model.visit("", &mut |n, m| {
            names.push(n);
            first.push(Array2::zeros(m.dim()));
        });
        let second = first.clone();
        Self { config, step: 0, names, first, second }
    }

    /// Applies one update to `model` from tape gradients. Gradients must be
    /// in the model's visiting order.
    pub fn apply(&mut self, model: &mut dyn Parameters, grads: &Gradients) -> Result<()> {
        if grads.grads.len() != self.first.len() {
            return Err(shape_err(format!(
                "optimizer holds {} tensors, got {} gradients",
                self.first.len(),
                grads.grads.len()
            )));
        }
        let mut shapes_ok = true;
        let mut i = 0;
        model.visit("", &mut |_, m| {
            shapes_ok &= m.dim() == grads.grads[i].dim();
            i += 1;
        });
        if !shapes_ok {
            return Err(shape_err("gradient shapes disagree with model parameters"));
        }
        self.check_grads(&grads.grads)?;
        self.step += 1;
        let mut i = 0;
        model.visit_mut("", &mut |_, m| {
            self.update_tensor(i, m, &grads.grads[i]);
            i += 1;
        });
        Ok(())
    }

    fn check_grads(&self, grads: &[Matrix]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if self.first[i].dim() != g.dim() {
                return Err(shape_err(format!("adam_update: shape mismatch for `{}`", self.names[i])));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: self.names[i].clone() });
            }
        }
        Ok(())
    }

    fn update_tensor(&mut self, i: usize, p: &mut Matrix, g: &Matrix) {
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        ndarray::Zip::from(p)
            .and(&mut self.first[i])
            .and(&mut self.second[i])
            .and(g)
            .for_each(|w, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            });
    }
}

/// Bias-corrected Adam step on `params` in place; increments the step counter.
pub fn adam_update(state: &mut OptimizerState, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(shape_err("adam_update: params, grads and state disagree in count"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.dim() != g.dim() {
            return Err(shape_err("adam_update: parameter and gradient shapes differ"));
        }
    }
    state.check_grads(grads)?;
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update_tensor(i, p, g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Scalar(Matrix);

    impl Parameters for Scalar {
        fn visit(&self, _: &str, f: &mut dyn FnMut(String, &Matrix)) {
            f("w".into(), &self.0);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
            f("w".into(), &mut self.0);
        }
    }

    fn grads(g: f64) -> Gradients {
        Gradients { names: vec!["w".into()], grads: vec![array![[g]]] }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = Scalar(array![[0.7]]);
        let mut st = OptimizerState::for_params(AdamConfig::with_lr(0.1), &s);
        st.apply(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s.0[[0, 0]], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = Scalar(array![[1.0]]);
        let mut st = OptimizerState::for_params(AdamConfig::with_lr(0.01), &s);
        st.apply(&mut s, &grads(1.0)).unwrap();
        assert!((s.0[[0, 0]] - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn descends_quadratic() {
        let mut s = Scalar(array![[1.0]]);
        let mut st = OptimizerState::for_params(AdamConfig::with_lr(0.1), &s);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = s.0[[0, 0]];
            st.apply(&mut s, &grads(2.0 * w)).unwrap();
            let now = s.0[[0, 0]].abs();
            assert!(now < prev, "|w| did not decrease: {now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = Scalar(array![[1.0]]);
        let mut st = OptimizerState::for_params(AdamConfig::default(), &s);
        match st.apply(&mut s, &grads(f64::NAN)) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = Scalar(array![[0.3]]);
            let mut st = OptimizerState::for_params(AdamConfig::with_lr(0.05), &s);
            for g in [0.5, -1.0, 2.0] {
                st.apply(&mut s, &grads(g)).unwrap();
            }
            (s.0, st)
        };
        assert_eq!(run(), run());
    }
}

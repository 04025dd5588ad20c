//! Logistic regression by iteratively reweighted least squares (Newton).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::neuralnet::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlsConfig {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    /// L2 penalty on the coefficients; keeps the Newton step defined when
    /// regressors are collinear (e.g. an undertrained embedding).
    pub ridge: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, ridge: 1e-6 }
    }
}

/// Penalised log-likelihood `ℓ(β) - ridge/2 ‖β‖²`.
fn objective(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, beta: &Array1<f64>, ridge: f64) -> f64 {
    let eta = x.dot(beta);
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log σ(e) = -softplus(-e), log(1-σ(e)) = -softplus(e)
            let sp = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
            if yi > 0.5 {
                -sp(-e)
            } else {
                -sp(e)
            }
        })
        .sum();
    ll - 0.5 * ridge * beta.dot(beta)
}

/// Score vector `Xᵀ(y - p)`.
pub fn logistic_gradient(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, beta: &Array1<f64>) -> Array1<f64> {
    let p = x.dot(beta).mapv(sigmoid);
    x.t().dot(&(&y - &p))
}

/// Maximum-likelihood coefficients for `P(y = 1 | x) = σ(x β)`, with the
/// configured L2 penalty.
pub fn fit_logistic(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, cfg: &IrlsConfig) -> Result<Array1<f64>> {
    let (n, q) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("logistic: {n} rows but {} labels", y.len())));
    }
    if n == 0 {
        return Err(Error::Fit("logistic: no observations".into()));
    }
    if !(cfg.ridge >= 0.0 && cfg.ridge.is_finite()) {
        return Err(Error::Config(format!("logistic ridge {} must be >= 0", cfg.ridge)));
    }
    let mut beta = Array1::zeros(q);
    let mut ll = objective(x, y, &beta, cfg.ridge);
    for _ in 0..cfg.max_iter {
        let p = x.dot(&beta).mapv(sigmoid);
        let grad = x.t().dot(&(&y - &p)) - &beta * cfg.ridge;
        let mut hess = Array2::<f64>::zeros((q, q));
        for (row, &pi) in x.outer_iter().zip(&p) {
            let w = pi * (1.0 - pi);
            for a in 0..q {
                let ra = w * row[a];
                for b in a..q {
                    hess[[a, b]] += ra * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[[a, b]] = hess[[b, a]];
            }
            hess[[a, a]] += cfg.ridge;
        }
        let step = linalg::solve_spd(hess.view(), &grad)
            .map_err(|e| Error::Fit(format!("logistic Hessian not invertible: {e}")))?;
        let mut scale = 1.0;
        let (next, next_ll) = loop {
            let cand = &beta + &(&step * scale);
            let cand_ll = objective(x, y, &cand, cfg.ridge);
            if cand_ll >= ll - 1e-12 || scale < 1e-6 {
                break (cand, cand_ll);
            }
            scale *= 0.5;
        };
        if !next_ll.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("logistic fit diverged".into()));
        }
        let gain = next_ll - ll;
        beta = next;
        ll = next_ll;
        if gain.abs() < cfg.tol {
            let p = x.dot(&beta).mapv(sigmoid);
            if p.iter().zip(y).all(|(pi, yi)| (pi - yi).abs() < 1e-6) {
                return Err(Error::Fit("logistic fit: outcomes are perfectly separated".into()));
            }
            return Ok(beta);
        }
    }
    Err(Error::Fit(format!("logistic fit did not converge in {} iterations", cfg.max_iter)))
}

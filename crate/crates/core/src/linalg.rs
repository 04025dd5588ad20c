//! Small dense solvers used by the regression-based pieces (causal penalty,
//! IRLS, weighted least squares).

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("cholesky of non-square {}x{}", n, a.ncols())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Numerical(format!(
                "matrix not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the lower factor `L`. `B` may have several columns.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves the SPD system `A x = b` for a single right-hand side.
pub fn solve_spd(a: ArrayView2<'_, f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    let rhs = b.view().insert_axis(ndarray::Axis(1));
    Ok(cholesky_solve(&l, rhs).column(0).to_owned())
}

/// Weighted least squares via the normal equations `XᵀWX β = XᵀWy`.
/// `ridge` is added to the diagonal (pass 0 for the plain solution).
pub fn weighted_least_squares(
    x: ArrayView2<'_, f64>,
    y: &Array1<f64>,
    w: &Array1<f64>,
    ridge: f64,
) -> Result<Array1<f64>> {
    let (n, q) = x.dim();
    if y.len() != n || w.len() != n {
        return Err(Error::Shape(format!(
            "wls: {} rows but y has {} and w has {}",
            n,
            y.len(),
            w.len()
        )));
    }
    let mut gram = Array2::<f64>::zeros((q, q));
    let mut rhs = Array1::<f64>::zeros(q);
    for i in 0..n {
        let row = x.row(i);
        let wi = w[i];
        for a in 0..q {
            let ra = wi * row[a];
            if ra == 0.0 {
                continue;
            }
            rhs[a] += ra * y[i];
            for b in a..q {
                gram[[a, b]] += ra * row[b];
            }
        }
    }
    for a in 0..q {
        gram[[a, a]] += ridge;
        for b in 0..a {
            gram[[a, b]] = gram[[b, a]];
        }
    }
    solve_spd(gram.view(), &rhs)
}

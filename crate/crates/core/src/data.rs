//! Longitudinal trajectory container shared by every stage of the pipeline.
//!
//! Time is 0-based internally: row `t` holds `X_{t+1}`, `A_{t+1}` and the
//! outcome that follows them, `Y_{t+2}` in one-based notation. Put plainly,
//! `y[[i, t]]` is the outcome observed right after treatments `a[[i, t, ..]]`.

use ndarray::{Array2, Array3, Axis};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    /// Stable patient identifiers; preserved through splits.
    pub ids: Vec<u64>,
    /// Observed noisy proxies, `N × T × p`.
    pub x: Array3<f64>,
    /// Binary treatments, `N × T × k`.
    pub a: Array3<f64>,
    /// Outcomes, `N × T`.
    pub y: Array2<f64>,
    /// True hidden confounders, `N × T × r` (synthetic data only).
    pub z: Option<Array3<f64>>,
    /// Counterfactual treatment plan, `N × τ × k`.
    pub cf_a: Option<Array3<f64>>,
    /// Counterfactual outcomes under `cf_a`, `N × τ`.
    pub cf_y: Option<Array2<f64>>,
    /// 0-based step at which counterfactual plans start.
    pub anchor_t: Option<usize>,
}

impl TrajectoryDataset {
    pub fn new(x: Array3<f64>, a: Array3<f64>, y: Array2<f64>) -> Result<Self> {
        let n = x.dim().0;
        let ds = Self {
            ids: (0..n as u64).collect(),
            x,
            a,
            y,
            z: None,
            cf_a: None,
            cf_y: None,
            anchor_t: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_patients(&self) -> usize {
        self.x.dim().0
    }

    pub fn n_steps(&self) -> usize {
        self.x.dim().1
    }

    pub fn proxy_dim(&self) -> usize {
        self.x.dim().2
    }

    pub fn treatment_dim(&self) -> usize {
        self.a.dim().2
    }

    pub fn confounder_dim(&self) -> Option<usize> {
        self.z.as_ref().map(|z| z.dim().2)
    }

    pub fn horizon(&self) -> Option<usize> {
        self.cf_y.as_ref().map(|c| c.ncols())
    }

    pub fn has_counterfactuals(&self) -> bool {
        self.cf_a.is_some() && self.cf_y.is_some() && self.anchor_t.is_some()
    }

    /// Checks shapes, binary treatments and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (n, t, _) = self.x.dim();
        if self.ids.len() != n {
            return Err(shape_err(format!("{} ids for {} patients", self.ids.len(), n)));
        }
        if self.a.dim().0 != n || self.a.dim().1 != t {
            return Err(shape_err(format!("treatments {:?} vs proxies {:?}", self.a.dim(), self.x.dim())));
        }
        if self.y.dim() != (n, t) {
            return Err(shape_err(format!("outcomes {:?}, expected ({n}, {t})", self.y.dim())));
        }
        let k = self.treatment_dim();
        if let Some(z) = &self.z {
            if z.dim().0 != n || z.dim().1 != t {
                return Err(shape_err(format!("confounders {:?} vs proxies {:?}", z.dim(), self.x.dim())));
            }
            check_finite(z.iter(), "z")?;
        }
        match (&self.cf_a, &self.cf_y, self.anchor_t) {
            (None, None, _) => {}
            (Some(cfa), Some(cfy), Some(anchor)) => {
                let tau = cfy.ncols();
                if cfa.dim() != (n, tau, k) || cfy.nrows() != n {
                    return Err(shape_err(format!(
                        "counterfactual plan {:?} / outcomes {:?} inconsistent",
                        cfa.dim(),
                        cfy.dim()
                    )));
                }
                if tau == 0 || anchor + tau > t {
                    return Err(Error::Config(format!(
                        "counterfactual horizon {tau} from anchor {anchor} exceeds {t} steps"
                    )));
                }
                check_binary(cfa.iter(), "cf_a")?;
                check_finite(cfy.iter(), "cf_y")?;
            }
            _ => return Err(shape_err("counterfactual fields must be present together")),
        }
        check_binary(self.a.iter(), "a")?;
        check_finite(self.x.iter(), "x")?;
        check_finite(self.y.iter(), "y")?;
        Ok(())
    }

    /// Patients at `rows` (positions, not ids), in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            x: self.x.select(Axis(0), rows),
            a: self.a.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            z: self.z.as_ref().map(|z| z.select(Axis(0), rows)),
            cf_a: self.cf_a.as_ref().map(|c| c.select(Axis(0), rows)),
            cf_y: self.cf_y.as_ref().map(|c| c.select(Axis(0), rows)),
            anchor_t: self.anchor_t,
        }
    }
}

fn check_binary<'a>(mut it: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    if it.any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("{what} must contain only 0/1 values")));
    }
    Ok(())
}

fn check_finite<'a>(mut it: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    if it.any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains non-finite values")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrajectoryDataset {
        let x = Array3::from_shape_fn((3, 4, 2), |(i, t, j)| (i * 10 + t + j) as f64);
        let a = Array3::from_shape_fn((3, 4, 1), |(i, t, _)| ((i + t) % 2) as f64);
        let y = Array2::from_shape_fn((3, 4), |(i, t)| (i + t) as f64 * 0.5);
        TrajectoryDataset::new(x, a, y).unwrap()
    }

    #[test]
    fn subset_keeps_ids_and_rows() {
        let ds = tiny();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(sub.ids, vec![2, 0]);
        assert_eq!(sub.x.index_axis(Axis(0), 0), ds.x.index_axis(Axis(0), 2));
        assert_eq!(sub.y.row(1), ds.y.row(0));
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let mut ds = tiny();
        ds.a[[0, 0, 0]] = 2.0;
        assert!(matches!(ds.validate(), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let mut ds = tiny();
        ds.x[[1, 1, 1]] = f64::NAN;
        assert!(ds.validate().is_err());
    }
}

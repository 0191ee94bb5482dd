use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::min_sym_eigenvalue;

/// Stage cost `c(x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    /// `x' Q x + R |u|^2`.
    Quadratic { q: Vec<Vec<f64>>, r: f64 },
    /// Quadratic plus `eta * max(|u| - u_bar, 0)` per input.
    SoftInput { q: Vec<Vec<f64>>, r: f64, u_bar: f64, eta: f64 },
    /// `|u|^2`.
    Economic,
    /// `|W1 x|_1 + |W2 u|_1`.
    WeightedL1 { w1: Vec<Vec<f64>>, w2: f64 },
}

fn diag_rows(d: &[f64]) -> Vec<Vec<f64>> {
    (0..d.len()).map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("ragged cost matrix".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl CostSpec {
    pub const QUAD_Q: [f64; 4] = [10.0, 0.1, 10.0, 0.1];
    pub const QUAD_R: f64 = 0.01;

    pub fn standard_quadratic() -> Self {
        Self::Quadratic { q: diag_rows(&Self::QUAD_Q), r: Self::QUAD_R }
    }

    pub fn standard_soft_input() -> Self {
        Self::SoftInput { q: diag_rows(&Self::QUAD_Q), r: Self::QUAD_R, u_bar: 5.0, eta: 50.0 }
    }

    pub fn standard_weighted_l1() -> Self {
        Self::WeightedL1 { w1: vec![vec![20.0, 0.1, 5.0, 0.1]], w2: 0.5 }
    }

    pub fn validate(&self, n_x: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            Self::Quadratic { q, r } | Self::SoftInput { q, r, .. } => {
                let q = rows_to_matrix(q)?;
                if q.shape() != (n_x, n_x) {
                    return bad("Q must be n_x by n_x");
                }
                if (&q - q.transpose()).amax() > 1e-12 || min_sym_eigenvalue(&q)? < -1e-12 {
                    return bad("Q must be symmetric positive semidefinite");
                }
                if !(*r > 0.0) {
                    return bad("R must be positive");
                }
                if let Self::SoftInput { u_bar, eta, .. } = self {
                    if !(*u_bar >= 0.0 && *eta >= 0.0) {
                        return bad("u_bar and eta must be nonnegative");
                    }
                }
            }
            Self::Economic => {}
            Self::WeightedL1 { w1, .. } => {
                if rows_to_matrix(w1)?.ncols() != n_x {
                    return bad("W1 must have n_x columns");
                }
            }
        }
        Ok(())
    }

    /// `(Q, R)` of the quadratic part, if the cost is quadratic.
    pub fn quadratic_weights(&self) -> Option<(DMatrix<f64>, f64)> {
        match self {
            Self::Quadratic { q, r } => rows_to_matrix(q).ok().map(|q| (q, *r)),
            _ => None,
        }
    }

    /// Compiled form used in the inner loops.
    pub fn compile(&self) -> Result<StageCost> {
        Ok(match self {
            Self::Quadratic { q, r } => StageCost { q: Some(rows_to_matrix(q)?), r: *r, soft: None, l1: None },
            Self::SoftInput { q, r, u_bar, eta } => {
                StageCost { q: Some(rows_to_matrix(q)?), r: *r, soft: Some((*u_bar, *eta)), l1: None }
            }
            Self::Economic => StageCost { q: None, r: 1.0, soft: None, l1: None },
            Self::WeightedL1 { w1, w2 } => {
                StageCost { q: None, r: 0.0, soft: None, l1: Some((rows_to_matrix(w1)?, *w2)) }
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct StageCost {
    q: Option<DMatrix<f64>>,
    r: f64,
    soft: Option<(f64, f64)>,
    l1: Option<(DMatrix<f64>, f64)>,
}

impl StageCost {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut c = self.r * u.norm_squared();
        if let Some(q) = &self.q {
            c += x.dot(&(q * x));
        }
        if let Some((u_bar, eta)) = self.soft {
            c += eta * u.iter().map(|v| (v.abs() - u_bar).max(0.0)).sum::<f64>();
        }
        if let Some((w1, w2)) = &self.l1 {
            c += (w1 * x).iter().map(|v| v.abs()).sum::<f64>() + u.iter().map(|v| (w2 * v).abs()).sum::<f64>();
        }
        c
    }

    /// Gradient with respect to `(x, u)`; kinks get derivative zero.
    pub fn grad(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut gu = u * (2.0 * self.r);
        let mut gx = DVector::zeros(x.len());
        if let Some(q) = &self.q {
            gx += (q + q.transpose()) * x;
        }
        if let Some((u_bar, eta)) = self.soft {
            for (g, v) in gu.iter_mut().zip(u.iter()) {
                if v.abs() > u_bar {
                    *g += eta * sign(*v);
                }
            }
        }
        if let Some((w1, w2)) = &self.l1 {
            gx += w1.transpose() * (w1 * x).map(sign);
            gu += u.map(|v| w2 * sign(w2 * v));
        }
        (gx, gu)
    }
}

/// `stage_cost`: evaluates a cost specification at one `(x, u)`.
pub fn stage_cost(spec: &CostSpec, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    Ok(spec.compile()?.eval(x, u))
}

//! Recurrent equilibrium networks (RENs).
//!
//! A REN is the state-space model
//!
//! ```text
//! x+ = A x  + B1 w  + B2 u  + b_x
//! v  = C1 x + D11 w + D12 u + b_v,   w = relu(v)
//! y  = C2 x + D21 w + D22 u + b_y
//! ```
//!
//! whose weights come from an unconstrained vector `theta` through
//! [`direct_construct`]. Every finite `theta` yields weights together with a
//! certificate `(P, Lambda)` satisfying the incremental-IQC matrix inequality
//! checked by [`lmi_certificate`].

mod certificate;
mod construct;
mod gain;
mod layer;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lti::{max_sym_eigenvalue, min_sym_eigenvalue};

pub use certificate::{lmi_certificate, lmi_matrix};
pub use construct::{construct_backward, direct_construct, direct_construct_with_tape, ConstructTape};
pub use gain::empirical_gain;
pub use layer::{equilibrium_iterate, equilibrium_solve, ren_step, ren_step_backward, ren_step_cached, RenStepCache};

/// Construction margin added to the free positive-definite block.
pub const EPS_LMI: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenDims {
    pub n_x: usize,
    pub n_v: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl RenDims {
    pub fn new(n_x: usize, n_v: usize, n_u: usize, n_y: usize) -> Self {
        Self { n_x, n_v, n_u, n_y }
    }
}

/// Incremental IQC `(Q, S, R)` the network must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IqcSpec {
    /// Incremental l2-gain bound `gamma`: `Q = -I/gamma, S = 0, R = gamma I`.
    Lipschitz { gamma: f64 },
    /// Incremental passivity: `Q = 0, S = I, R = 0`.
    Passive,
    /// `Q = -I/gamma, S = 0, R = diag(gamma I, eta I)` where the first
    /// `n_first` inputs get gain `gamma` and the rest `eta`.
    TwoChannelLipschitz { gamma: f64, eta: f64, n_first: usize },
    /// Explicit blocks, row-major rows.
    General { q: Vec<Vec<f64>>, s: Vec<Vec<f64>>, r: Vec<Vec<f64>> },
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return dim_err(format!("IQC block {name} must be {nrows}x{ncols}"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl IqcSpec {
    /// `(Q, S, R)` with shapes `n_y x n_y`, `n_u x n_y`, `n_u x n_u`.
    pub fn qsr(&self, n_u: usize, n_y: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        Ok(match self {
            Self::Lipschitz { gamma } => (
                DMatrix::identity(n_y, n_y) * (-1.0 / gamma),
                DMatrix::zeros(n_u, n_y),
                DMatrix::identity(n_u, n_u) * *gamma,
            ),
            Self::Passive => (
                DMatrix::zeros(n_y, n_y),
                DMatrix::identity(n_u, n_y),
                DMatrix::zeros(n_u, n_u),
            ),
            Self::TwoChannelLipschitz { gamma, eta, n_first } => {
                let r = DMatrix::from_diagonal(&DVector::from_fn(n_u, |i, _| {
                    if i < *n_first {
                        *gamma
                    } else {
                        *eta
                    }
                }));
                (DMatrix::identity(n_y, n_y) * (-1.0 / gamma), DMatrix::zeros(n_u, n_y), r)
            }
            Self::General { q, s, r } => (
                from_rows(q, n_y, n_y, "Q")?,
                from_rows(s, n_u, n_y, "S")?,
                from_rows(r, n_u, n_u, "R")?,
            ),
        })
    }

    /// Gain bound for Lipschitz-type specs.
    pub fn gamma(&self) -> Option<f64> {
        match self {
            Self::Lipschitz { gamma } | Self::TwoChannelLipschitz { gamma, .. } => Some(*gamma),
            _ => None,
        }
    }

    /// Checks the sign conditions and that the construction can realize the spec.
    pub fn validate(&self, dims: &RenDims) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            Self::Lipschitz { gamma } => {
                if !(*gamma > 0.0) || !gamma.is_finite() {
                    return bad(format!("Lipschitz bound must be positive, got {gamma}"));
                }
            }
            Self::TwoChannelLipschitz { gamma, eta, n_first } => {
                if !(*gamma > 0.0 && *eta > 0.0) || !gamma.is_finite() || !eta.is_finite() {
                    return bad(format!("channel gains must be positive, got {gamma}, {eta}"));
                }
                if *n_first > dims.n_u {
                    return bad(format!("n_first = {n_first} exceeds n_u = {}", dims.n_u));
                }
            }
            Self::Passive => {
                if dims.n_u != dims.n_y {
                    return bad(format!("passive REN needs n_u == n_y, got {} and {}", dims.n_u, dims.n_y));
                }
            }
            Self::General { .. } => {
                let (q, s, r) = self.qsr(dims.n_u, dims.n_y)?;
                let sym_tol = 1e-12 * (1.0 + q.norm() + r.norm());
                if (&q - q.transpose()).norm() > sym_tol || (&r - r.transpose()).norm() > sym_tol {
                    return bad("Q and R must be symmetric".into());
                }
                if dims.n_y > 0 && max_sym_eigenvalue(&q)? > 0.0 {
                    return bad("Q must be negative semidefinite".into());
                }
                if dims.n_u > 0 && min_sym_eigenvalue(&r)? < 0.0 {
                    return bad("R must be positive semidefinite".into());
                }
                if dims.n_u > 0 && min_sym_eigenvalue(&general_feedthrough_gram(&q, &s, &r)?)? <= 0.0 {
                    return bad("construction needs R - S Q^-1 S' > 0 (or R > 0 when S = 0)".into());
                }
            }
        }
        Ok(())
    }
}

/// `R + S D22 + D22' S' + D22' Q D22` at the feedthrough used for general specs.
fn general_feedthrough_gram(q: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d22 = general_feedthrough(q, s)?;
    Ok(r + s * &d22 + d22.transpose() * s.transpose() + d22.transpose() * q * &d22)
}

/// `D22 = -Q^{-1} S'`, or zero when `S = 0`.
fn general_feedthrough(q: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(q.nrows(), s.nrows()));
    }
    let neg = -q;
    let ch = neg
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("S != 0 requires Q negative definite".into()))?;
    Ok(ch.solve(&s.transpose()))
}

/// Offsets of the blocks of `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub dims: RenDims,
    pub passive: bool,
    pub acyclic: bool,
    pub x: usize,
    pub y: usize,
    pub b2: usize,
    pub c2: usize,
    pub d21: usize,
    pub d12: usize,
    pub m22: usize,
    pub n22: usize,
    pub n11: usize,
    pub bx: usize,
    pub bv: usize,
    pub by: usize,
    pub len: usize,
}

fn strict_lower(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

impl ThetaLayout {
    pub fn new(dims: RenDims, iqc: &IqcSpec, acyclic: bool) -> Self {
        let RenDims { n_x, n_v, n_u, n_y } = dims;
        let d = 2 * n_x + n_v;
        let passive = matches!(iqc, IqcSpec::Passive);
        let mut off = 0;
        let mut take = |n: usize| {
            let start = off;
            off += n;
            start
        };
        let x = take(d * d);
        let y = take(n_x * n_x);
        let b2 = take(n_x * n_u);
        let c2 = take(n_y * n_x);
        let d21 = take(n_y * n_v);
        let d12 = take(n_v * n_u);
        let m22 = take(if passive { n_u * n_u } else { 0 });
        let n22 = take(if passive { strict_lower(n_u) } else { 0 });
        let n11 = take(if acyclic { 0 } else { strict_lower(n_v) });
        let bx = take(n_x);
        let bv = take(n_v);
        let by = take(n_y);
        Self { dims, passive, acyclic, x, y, b2, c2, d21, d12, m22, n22, n11, bx, bv, by, len: off }
    }
}

/// Unconstrained parameters of a REN.
#[derive(Debug, Clone, PartialEq)]
pub struct RenFreeParams {
    pub theta: DVector<f64>,
    pub dims: RenDims,
    pub iqc: IqcSpec,
    pub acyclic: bool,
}

impl RenFreeParams {
    pub fn new(theta: DVector<f64>, dims: RenDims, iqc: IqcSpec, acyclic: bool) -> Result<Self> {
        iqc.validate(&dims)?;
        let n = Self::n_params(dims, &iqc, acyclic);
        if theta.len() != n {
            return dim_err(format!("theta has length {}, expected {n}", theta.len()));
        }
        Ok(Self { theta, dims, iqc, acyclic })
    }

    pub fn n_params(dims: RenDims, iqc: &IqcSpec, acyclic: bool) -> usize {
        ThetaLayout::new(dims, iqc, acyclic).len
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self.dims, &self.iqc, self.acyclic)
    }

    /// Zero-mean normal initialization with standard deviation `1/sqrt(fan_in)`
    /// per block, output blocks scaled by `output_scale`, zero biases.
    pub fn init(
        dims: RenDims,
        iqc: IqcSpec,
        acyclic: bool,
        output_scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let lay = ThetaLayout::new(dims, &iqc, acyclic);
        let RenDims { n_x, n_v, n_u, .. } = dims;
        let fan = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
        let blocks = [
            (lay.x, lay.y, fan(2 * n_x + n_v)),
            (lay.y, lay.b2, fan(n_x)),
            (lay.b2, lay.c2, fan(n_u)),
            (lay.c2, lay.d21, fan(n_x) * output_scale),
            (lay.d21, lay.d12, fan(n_v) * output_scale),
            (lay.d12, lay.m22, fan(n_u)),
            (lay.m22, lay.n22, fan(n_u) * output_scale),
            (lay.n22, lay.n11, fan(n_u) * output_scale),
            (lay.n11, lay.bx, fan(n_v)),
        ];
        let mut theta = DVector::zeros(lay.len);
        for (start, end, std) in blocks {
            for k in start..end {
                let z: f64 = StandardNormal.sample(rng);
                theta[k] = std * z;
            }
        }
        Self::new(theta, dims, iqc, acyclic)
    }
}

/// Explicit REN weights plus the certificate `(P, Lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenWeights {
    pub dims: RenDims,
    pub acyclic: bool,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    pub d22: DMatrix<f64>,
    pub bx: DVector<f64>,
    pub bv: DVector<f64>,
    pub by: DVector<f64>,
    /// Incremental storage matrix, positive definite.
    pub p: DMatrix<f64>,
    /// Diagonal IQC multiplier of the neuron layer, positive.
    pub lambda: DVector<f64>,
}

impl RenWeights {
    /// All-zero weights with identity certificate.
    pub fn zeros(dims: RenDims) -> Self {
        let RenDims { n_x, n_v, n_u, n_y } = dims;
        Self {
            dims,
            acyclic: true,
            a: DMatrix::zeros(n_x, n_x),
            b1: DMatrix::zeros(n_x, n_v),
            b2: DMatrix::zeros(n_x, n_u),
            c1: DMatrix::zeros(n_v, n_x),
            d11: DMatrix::zeros(n_v, n_v),
            d12: DMatrix::zeros(n_v, n_u),
            c2: DMatrix::zeros(n_y, n_x),
            d21: DMatrix::zeros(n_y, n_v),
            d22: DMatrix::zeros(n_y, n_u),
            bx: DVector::zeros(n_x),
            bv: DVector::zeros(n_v),
            by: DVector::zeros(n_y),
            p: DMatrix::identity(n_x, n_x),
            lambda: DVector::from_element(n_v, 1.0),
        }
    }

    pub fn check_dims(&self) -> Result<()> {
        let RenDims { n_x, n_v, n_u, n_y } = self.dims;
        let shapes = [
            ("A", self.a.shape(), (n_x, n_x)),
            ("B1", self.b1.shape(), (n_x, n_v)),
            ("B2", self.b2.shape(), (n_x, n_u)),
            ("C1", self.c1.shape(), (n_v, n_x)),
            ("D11", self.d11.shape(), (n_v, n_v)),
            ("D12", self.d12.shape(), (n_v, n_u)),
            ("C2", self.c2.shape(), (n_y, n_x)),
            ("D21", self.d21.shape(), (n_y, n_v)),
            ("D22", self.d22.shape(), (n_y, n_u)),
            ("P", self.p.shape(), (n_x, n_x)),
            ("b_x", (self.bx.len(), 1), (n_x, 1)),
            ("b_v", (self.bv.len(), 1), (n_v, 1)),
            ("b_y", (self.by.len(), 1), (n_y, 1)),
            ("Lambda", (self.lambda.len(), 1), (n_v, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return dim_err(format!("{name} is {got:?}, expected {want:?}"));
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to explicit REN weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RenWeightGrad {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    pub d22: DMatrix<f64>,
    pub bx: DVector<f64>,
    pub bv: DVector<f64>,
    pub by: DVector<f64>,
}

impl RenWeightGrad {
    pub fn zeros(dims: RenDims) -> Self {
        let w = RenWeights::zeros(dims);
        Self {
            a: w.a,
            b1: w.b1,
            b2: w.b2,
            c1: w.c1,
            d11: w.d11,
            d12: w.d12,
            c2: w.c2,
            d21: w.d21,
            d22: w.d22,
            bx: w.bx,
            bv: w.bv,
            by: w.by,
        }
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.a += &o.a;
        self.b1 += &o.b1;
        self.b2 += &o.b2;
        self.c1 += &o.c1;
        self.d11 += &o.d11;
        self.d12 += &o.d12;
        self.c2 += &o.c2;
        self.d21 += &o.d21;
        self.d22 += &o.d22;
        self.bx += &o.bx;
        self.bv += &o.bv;
        self.by += &o.by;
    }

    pub fn scale(&mut self, k: f64) {
        for m in [
            &mut self.a,
            &mut self.b1,
            &mut self.b2,
            &mut self.c1,
            &mut self.d11,
            &mut self.d12,
            &mut self.c2,
            &mut self.d21,
            &mut self.d22,
        ] {
            *m *= k;
        }
        self.bx *= k;
        self.bv *= k;
        self.by *= k;
    }
}

/// Internal state of a REN.
#[derive(Debug, Clone, PartialEq)]
pub struct RenState {
    pub x: DVector<f64>,
}

impl RenState {
    pub fn zeros(n_x: usize) -> Self {
        Self { x: DVector::zeros(n_x) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let dims = RenDims::new(2, 4, 1, 1);
        let lip = IqcSpec::Lipschitz { gamma: 1.0 };
        // X 8x8, Y 2x2, B2 2x1, C2 1x2, D21 1x4, D12 4x1, biases 2+4+1
        assert_eq!(RenFreeParams::n_params(dims, &lip, true), 64 + 4 + 2 + 2 + 4 + 4 + 7);
        assert_eq!(RenFreeParams::n_params(dims, &lip, false), 87 + 6);
        let dims = RenDims::new(2, 4, 2, 2);
        assert_eq!(
            RenFreeParams::n_params(dims, &IqcSpec::Passive, true),
            RenFreeParams::n_params(dims, &lip, true) + 4 + 1
        );
    }

    #[test]
    fn iqc_special_cases() {
        let (q, s, r) = IqcSpec::Lipschitz { gamma: 4.0 }.qsr(2, 3).unwrap();
        assert_eq!(q, DMatrix::identity(3, 3) * -0.25);
        assert_eq!(s, DMatrix::zeros(2, 3));
        assert_eq!(r, DMatrix::identity(2, 2) * 4.0);
        let (_, _, r) = IqcSpec::TwoChannelLipschitz { gamma: 2.0, eta: 100.0, n_first: 1 }
            .qsr(3, 1)
            .unwrap();
        assert_eq!(r.diagonal().as_slice(), &[2.0, 100.0, 100.0]);
        let (q, s, r) = IqcSpec::Passive.qsr(2, 2).unwrap();
        assert_eq!((q.norm(), r.norm()), (0.0, 0.0));
        assert_eq!(s, DMatrix::identity(2, 2));
    }

    #[test]
    fn iqc_validation() {
        let dims = RenDims::new(1, 1, 2, 1);
        assert!(IqcSpec::Lipschitz { gamma: 0.0 }.validate(&dims).is_err());
        assert!(IqcSpec::Passive.validate(&dims).is_err());
        let general = IqcSpec::General {
            q: vec![vec![1.0]],
            s: vec![vec![0.0], vec![0.0]],
            r: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert!(general.validate(&dims).is_err());
        let general = IqcSpec::General {
            q: vec![vec![-2.0]],
            s: vec![vec![0.5], vec![0.0]],
            r: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        general.validate(&dims).unwrap();
    }

    #[test]
    fn theta_length_is_checked() {
        let dims = RenDims::new(1, 1, 1, 1);
        let r = RenFreeParams::new(DVector::zeros(3), dims, IqcSpec::Lipschitz { gamma: 1.0 }, true);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}

//! Linear time-invariant numerics: exact discretization, spectral tests,
//! discrete LQR and H-infinity norm computation.
//!
//! For LTI systems the incremental l2-gain equals the H-infinity norm, so
//! [`hinf_norm`] is what sizes the gain budget of the Youla parameter.

use nalgebra::linalg::balancing::balance_parlett_reinsch;
use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub type CMatrix = DMatrix<Complex<f64>>;

const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeDomain {
    Continuous,
    Discrete { ts: f64 },
}

/// `x' = A x + B u`, `y = C x + D u`, continuous or sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub domain: TimeDomain,
}

impl StateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        domain: TimeDomain,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return dim_err(format!("A must be square, got {}x{}", n, a.ncols()));
        }
        if b.nrows() != n {
            return dim_err(format!("B has {} rows, expected {n}", b.nrows()));
        }
        if c.ncols() != n {
            return dim_err(format!("C has {} columns, expected {n}", c.ncols()));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return dim_err(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            ));
        }
        if let TimeDomain::Discrete { ts } = domain {
            if !(ts > 0.0) {
                return Err(Error::InvalidArgument(format!("sampling time must be > 0, got {ts}")));
            }
        }
        Ok(Self { a, b, c, d, domain })
    }

    /// Full-state output system (`C = I`, `D = 0`).
    pub fn state_output(a: DMatrix<f64>, b: DMatrix<f64>, domain: TimeDomain) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        Self::new(a, b, DMatrix::identity(n, n), DMatrix::zeros(n, m), domain)
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.domain, TimeDomain::Discrete { .. })
    }

    /// Frequency response `C (e^{jw} I - A)^{-1} B + D` of a discrete system.
    pub fn freq_response(&self, omega: f64) -> Result<CMatrix> {
        let n = self.n_states();
        let z = Complex::new(omega.cos(), omega.sin());
        let mut zi_a: CMatrix = self.a.map(|v| Complex::new(-v, 0.0));
        for i in 0..n {
            zi_a[(i, i)] += z;
        }
        let b = to_complex(&self.b);
        let x = if n == 0 {
            CMatrix::zeros(0, self.n_inputs())
        } else {
            zi_a.lu()
                .solve(&b)
                .ok_or_else(|| Error::Unstable(format!("pole on the unit circle at w={omega}")))?
        };
        Ok(to_complex(&self.c) * x + to_complex(&self.d))
    }
}

fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex::new(v, 0.0))
}

/// Matrix exponential by scaling and squaring with a [6/6] Padé approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let mut squarings = 0i32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as i32;
    }
    let scaled = a / 2f64.powi(squarings);
    let q = 6;
    let mut c = 0.5;
    let mut x = scaled.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut num = &eye + &scaled * c;
    let mut den = &eye - &scaled * c;
    let mut positive = true;
    for k in 2..=q {
        c *= (q - k + 1) as f64 / (k * (2 * q - k + 1)) as f64;
        x = &scaled * &x;
        num += &x * c;
        if positive {
            den += &x * c;
        } else {
            den -= &x * c;
        }
        positive = !positive;
    }
    let mut e = den.lu().solve(&num).expect("Padé denominator is invertible for ||A|| <= 1/2");
    for _ in 0..squarings {
        e = &e * &e;
    }
    e
}

/// Exact zero-order-hold discretization via the augmented-matrix exponential.
pub fn zoh_discretize(sys: &StateSpace, ts: f64) -> Result<StateSpace> {
    if sys.is_discrete() {
        return Err(Error::InvalidArgument("system is already discrete".into()));
    }
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(Error::InvalidArgument(format!("sampling time must be > 0, got {ts}")));
    }
    let n = sys.n_states();
    let m = sys.n_inputs();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * ts));
    let e = expm(&aug);
    StateSpace::new(
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
        sys.c.clone(),
        sys.d.clone(),
        TimeDomain::Discrete { ts },
    )
}

/// Eigenvalues of a real square matrix (Francis QR on the Hessenberg form).
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if a.nrows() != a.ncols() {
        return dim_err(format!("eigenvalues of a {}x{} matrix", a.nrows(), a.ncols()));
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    let mut balanced = a.clone();
    balance_parlett_reinsch(&mut balanced);
    let schur = [balanced.clone(), balanced.transpose(), a.clone()]
        .into_iter()
        .find_map(|m| Schur::try_new(m, f64::EPSILON, EIG_MAX_ITER))
        .ok_or_else(|| Error::NoConvergence("Schur eigenvalue iteration".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    sym_eigenvalues(m).map(|e| e.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    sym_eigenvalues(m).map(|e| e.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() != m.ncols() {
        return dim_err(format!("symmetric eigenvalues of a {}x{} matrix", m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric eigenvalue input".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-15, EIG_MAX_ITER)
        .map(|e| e.eigenvalues)
        .ok_or_else(|| Error::NoConvergence("symmetric eigenvalue iteration".into()))
}

/// Largest singular value of a complex matrix.
pub fn max_singular_value(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().copied().fold(0.0, f64::max)
}

const DLQR_MAX_ITER: usize = 200_000;

/// Discrete LQR: iterates the Riccati recursion from `P = Q` to a fixed point.
///
/// Returns `(K, P)` with `u = -K x` optimal for `sum x'Qx + u'Ru`.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return dim_err(format!(
            "dlqr: A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        ));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("dlqr: R is not positive definite".into()));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..DLQR_MAX_ITER {
        let btp = &bt * &p;
        let s = r + &btp * b;
        let k = s
            .clone()
            .lu()
            .solve(&(&btp * a))
            .ok_or_else(|| Error::NoConvergence("dlqr: singular R + B'PB".into()))?;
        let mut next = q + &at * &p * a - &at * &p * b * &k;
        next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence("dlqr: Riccati recursion diverged".into()));
        }
        let change = (&next - &p).norm();
        let scale = next.norm().max(f64::MIN_POSITIVE);
        p = next;
        if change <= 1e-12 * scale {
            let btp = &bt * &p;
            let k = (r + &btp * b).lu().solve(&(&btp * a)).ok_or_else(|| {
                Error::NoConvergence("dlqr: singular R + B'PB".into())
            })?;
            return Ok((k, p));
        }
    }
    Err(Error::NoConvergence(format!("dlqr after {DLQR_MAX_ITER} Riccati iterations")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HinfMethod {
    /// Maximum singular value over `n` uniformly spaced frequencies in `[0, pi]`.
    Grid(usize),
    /// Bisection on the bounded-real test to relative bracket width `tol`.
    Bisect(f64),
}

/// H-infinity norm of a Schur-stable discrete system.
pub fn hinf_norm(sys: &StateSpace, method: HinfMethod) -> Result<f64> {
    if !sys.is_discrete() {
        return Err(Error::InvalidArgument("hinf_norm expects a discrete system".into()));
    }
    let rho = spectral_radius(&sys.a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable(format!("spectral radius {rho} >= 1")));
    }
    match method {
        HinfMethod::Grid(n) => grid_peak(sys, n.max(2)).map(|(g, _)| g),
        HinfMethod::Bisect(tol) => {
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument(format!("bisection tolerance {tol}")));
            }
            hinf_bisect(sys, tol)
        }
    }
}

fn grid_peak(sys: &StateSpace, n: usize) -> Result<(f64, f64)> {
    let mut best = (0.0, 0.0);
    for k in 0..n {
        let w = std::f64::consts::PI * k as f64 / (n - 1) as f64;
        let s = max_singular_value(&sys.freq_response(w)?);
        if s > best.0 {
            best = (s, w);
        }
    }
    Ok(best)
}

fn hinf_bisect(sys: &StateSpace, tol: f64) -> Result<f64> {
    let sigma_d = max_singular_value(&to_complex(&sys.d));
    let (coarse, _) = grid_peak(sys, 64)?;
    let mut lo = sigma_d.max(coarse);
    let scale = sys.b.norm() * sys.c.norm() + sigma_d;
    if lo <= 1e-12 * scale || lo == 0.0 {
        // Transfer function vanishes to working precision.
        return Ok(lo);
    }
    let mut hi = 2.0 * lo;
    let mut expansions = 0;
    while let Some(peak) = gain_exceeds(sys, hi)? {
        lo = lo.max(peak);
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Bracket(format!(
                "upper bound kept failing the bounded-real test (last {hi:e}, lower {lo:e})"
            )));
        }
    }
    while hi - lo > tol * hi {
        let mid = 0.5 * (lo + hi);
        match gain_exceeds(sys, mid)? {
            Some(peak) => lo = peak.max(mid),
            None => hi = mid,
        }
    }
    if lo > hi {
        return Err(Error::Bracket(format!("lower bound {lo:e} crossed upper bound {hi:e}")));
    }
    Ok(0.5 * (lo + hi))
}

/// Discrete bounded-real test: returns the largest confirmed singular value
/// at a unit-circle eigenvalue of the symplectic pencil, if any.
///
/// The pencil `M - z L` is mapped to `(M + L)^{-1}(M - L)` by the Cayley
/// transform, so unit-circle pencil eigenvalues become imaginary-axis ones.
fn gain_exceeds(sys: &StateSpace, gamma: f64) -> Result<Option<f64>> {
    let n = sys.n_states();
    let m = sys.n_inputs();
    let p = sys.n_outputs();
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let r = DMatrix::<f64>::identity(m, m) * (gamma * gamma) - d.transpose() * d;
    let r_inv = match r.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => return Ok(Some(max_singular_value(&to_complex(d)))),
    };
    let a_t = a + b * &r_inv * d.transpose() * c;
    let g = b * &r_inv * b.transpose();
    let q = c.transpose() * (DMatrix::identity(p, p) + d * &r_inv * d.transpose()) * c;

    let mut mm = DMatrix::zeros(2 * n, 2 * n);
    mm.view_mut((0, 0), (n, n)).copy_from(&a_t);
    mm.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    mm.view_mut((n, n), (n, n)).fill_with_identity();
    let mut ll = DMatrix::zeros(2 * n, 2 * n);
    ll.view_mut((0, 0), (n, n)).fill_with_identity();
    ll.view_mut((0, n), (n, n)).copy_from(&(-&g));
    ll.view_mut((n, n), (n, n)).copy_from(&a_t.transpose());

    let mut freqs = Vec::new();
    match (&mm + &ll).lu().solve(&(&mm - &ll)) {
        Some(cayley) => {
            for s in eigenvalues(&cayley)? {
                if s.re.abs() <= 1e-7 * (1.0 + s.norm()) {
                    freqs.push(2.0 * s.im.atan().abs());
                }
            }
        }
        None => freqs.push(std::f64::consts::PI),
    }
    let mut best: Option<f64> = None;
    for w in freqs {
        let s = max_singular_value(&sys.freq_response(w)?);
        if s >= gamma * (1.0 - 1e-6) {
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
    }
    Ok(best)
}

//! Youla-parameterized and natural feedback policies around a robust gain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lti::{hinf_norm, max_sym_eigenvalue, min_sym_eigenvalue, spectral_radius, HinfMethod, StateSpace, TimeDomain};
use crate::model::{Model, ModelGrad, ModelSpec, StepCache};
use crate::plant::UncertainPlant;

/// Robust state-feedback gain for the cart-pole, `u = -K x`.
pub const BASE_K: [f64; 4] = [-7.40, -14.96, -125.82, -27.73];

/// Bisection tolerance used for all gain estimates in this module.
pub const HINF_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseController {
    pub k: DMatrix<f64>,
}

impl BaseController {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self { k }
    }

    pub fn from_row(k: &[f64]) -> Self {
        Self { k: DMatrix::from_row_slice(1, k.len(), k) }
    }

    pub fn standard() -> Self {
        Self::from_row(&BASE_K)
    }

    /// Discrete LQR gain of the plant at `rho_hat`.
    pub fn lqr_at(plant: &UncertainPlant, rho_hat: f64, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let real = plant.realize(rho_hat)?;
        let (k, _) = crate::lti::dlqr(&real.a, &real.b, q, r)?;
        Ok(Self { k })
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }

    /// Closed-loop matrix `A_d(rho) - B_d K`.
    pub fn closed_loop(&self, plant: &UncertainPlant, rho: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let real = plant.realize(rho)?;
        if self.k.shape() != (real.b.ncols(), real.a.nrows()) {
            return dim_err(format!("gain is {:?}, plant needs {}x{}", self.k.shape(), real.b.ncols(), real.a.nrows()));
        }
        Ok((&real.a - &real.b * &self.k, real.b))
    }
}

/// Per-grid-point stability of `A_d(rho) - B_d K` and the worst `v -> x` gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseControllerReport {
    pub rho: Vec<f64>,
    pub spectral_radius: Vec<f64>,
    pub schur_ok: Vec<bool>,
    /// Grid points where the closed loop is not Schur-stable.
    pub unstable: Vec<f64>,
    /// Largest H-infinity norm of `v -> x` over the stable grid points;
    /// infinite when any point is unstable.
    pub beta_achieved: f64,
}

impl BaseControllerReport {
    pub fn all_stable(&self) -> bool {
        self.unstable.is_empty()
    }
}

pub fn verify_base_controller(plant: &UncertainPlant, base: &BaseController, grid_size: usize) -> Result<BaseControllerReport> {
    let grid = plant.rho_grid(grid_size);
    let mut report = BaseControllerReport {
        rho: grid.clone(),
        spectral_radius: Vec::new(),
        schur_ok: Vec::new(),
        unstable: Vec::new(),
        beta_achieved: 0.0,
    };
    for &rho in &grid {
        let (acl, b) = base.closed_loop(plant, rho)?;
        let sr = spectral_radius(&acl)?;
        let ok = sr < 1.0;
        report.spectral_radius.push(sr);
        report.schur_ok.push(ok);
        if !ok {
            report.unstable.push(rho);
            report.beta_achieved = f64::INFINITY;
            continue;
        }
        let sys = StateSpace::state_output(acl, b, TimeDomain::Discrete { ts: sample_time(plant) })?;
        let g = hinf_norm(&sys, HinfMethod::Bisect(HINF_TOL))?;
        if report.beta_achieved.is_finite() {
            report.beta_achieved = report.beta_achieved.max(g);
        }
    }
    Ok(report)
}

fn sample_time(plant: &UncertainPlant) -> f64 {
    match &plant.family {
        crate::plant::PlantFamily::CartPole(cfg) => cfg.ts,
        crate::plant::PlantFamily::Affine { .. } => 1.0,
    }
}

/// Discrepancy system `v -> x - x_hat` between the true and nominal closed
/// loops, with state `(x, x_hat)`.
pub fn gdelta_realization(plant: &UncertainPlant, base: &BaseController, rho: f64, rho_hat: f64) -> Result<StateSpace> {
    let (a1, b1) = base.closed_loop(plant, rho)?;
    let (a2, b2) = base.closed_loop(plant, rho_hat)?;
    for (r, a) in [(rho, &a1), (rho_hat, &a2)] {
        let sr = spectral_radius(a)?;
        if sr >= 1.0 {
            return Err(Error::Unstable(format!("closed loop at rho = {r} has spectral radius {sr}")));
        }
    }
    let n = a1.nrows();
    let m = b1.ncols();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&a1);
    a.view_mut((n, n), (n, n)).copy_from(&a2);
    let mut b = DMatrix::zeros(2 * n, m);
    b.view_mut((0, 0), (n, m)).copy_from(&b1);
    b.view_mut((n, 0), (n, m)).copy_from(&b2);
    let mut c = DMatrix::zeros(n, 2 * n);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    c.view_mut((0, n), (n, n)).copy_from(&(-DMatrix::identity(n, n)));
    StateSpace::new(a, b, c, DMatrix::zeros(n, m), TimeDomain::Discrete { ts: sample_time(plant) })
}

/// Largest `v -> x_tilde` gain over a uniform grid of the parameter interval.
pub fn compute_alpha(plant: &UncertainPlant, base: &BaseController, rho_hat: f64, grid_size: usize) -> Result<f64> {
    let mut alpha: f64 = 0.0;
    for rho in plant.rho_grid(grid_size) {
        let sys = gdelta_realization(plant, base, rho, rho_hat).map_err(|e| match e {
            Error::Unstable(m) => Error::Unstable(format!("grid point rho = {rho}: {m}")),
            other => other,
        })?;
        alpha = alpha.max(hinf_norm(&sys, HinfMethod::Bisect(HINF_TOL))?);
    }
    Ok(alpha)
}

/// Q-parameter gain budget `gamma = margin / alpha`.
pub fn gamma_from_alpha(alpha: f64, margin: f64) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::InvalidArgument(format!("margin must lie in (0, 1), got {margin}")));
    }
    Ok(margin / alpha)
}

/// Block-diagonal incremental IQC of the discrepancy system. The `x` blocks
/// act on `(x_tilde, v)`, the `z` blocks on the performance channel `(z, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantIqc {
    pub q_xx: DMatrix<f64>,
    pub q_zz: DMatrix<f64>,
    pub s_vx: DMatrix<f64>,
    pub s_wz: DMatrix<f64>,
    pub r_vv: DMatrix<f64>,
    pub r_ww: DMatrix<f64>,
}

impl PlantIqc {
    /// Incremental gain bound `alpha` from `v` to `x_tilde`, empty `z` channel.
    pub fn small_gain(alpha: f64, n_x: usize, n_v: usize) -> Self {
        Self {
            q_xx: DMatrix::identity(n_x, n_x) * (-1.0 / alpha),
            q_zz: DMatrix::zeros(0, 0),
            s_vx: DMatrix::zeros(n_v, n_x),
            s_wz: DMatrix::zeros(0, 0),
            r_vv: DMatrix::identity(n_v, n_v) * alpha,
            r_ww: DMatrix::zeros(0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm1Result {
    pub holds: bool,
    /// Largest eigenvalue of the stability matrix; negative when it holds.
    pub margin: f64,
}

/// Closed-loop contraction test for a plant IQC and a Q-parameter IQC
/// `(Q_bar, S_bar, R_bar)` with input `x_tilde` and output `v`.
pub fn thm1_check(
    plant_iqc: &PlantIqc,
    q_bar: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    r_bar: &DMatrix<f64>,
) -> Result<Thm1Result> {
    let p = plant_iqc;
    let nx = p.q_xx.nrows();
    let nv = p.r_vv.nrows();
    let nz = p.q_zz.nrows();
    let nw = p.r_ww.nrows();
    let shapes = [
        ("Q_xx", p.q_xx.shape(), (nx, nx)),
        ("S_vx", p.s_vx.shape(), (nv, nx)),
        ("R_vv", p.r_vv.shape(), (nv, nv)),
        ("Q_zz", p.q_zz.shape(), (nz, nz)),
        ("S_wz", p.s_wz.shape(), (nw, nz)),
        ("R_ww", p.r_ww.shape(), (nw, nw)),
        ("Q_bar", q_bar.shape(), (nv, nv)),
        ("S_bar", s_bar.shape(), (nx, nv)),
        ("R_bar", r_bar.shape(), (nx, nx)),
    ];
    for (name, got, want) in shapes {
        if got != want {
            return dim_err(format!("{name} is {got:?}, expected {want:?}"));
        }
    }
    for (name, m) in [("Q_xx", &p.q_xx), ("Q_zz", &p.q_zz)] {
        if m.nrows() > 0 && max_sym_eigenvalue(m)? > 0.0 {
            return Err(Error::InvalidArgument(format!("{name} must be negative semidefinite")));
        }
    }
    for (name, m) in [("R_vv", &p.r_vv), ("R_ww", &p.r_ww)] {
        if m.nrows() > 0 && min_sym_eigenvalue(m)? < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} must be positive semidefinite")));
        }
    }
    let n = nx + nv;
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (nx, nx)).copy_from(&(&p.q_xx + r_bar));
    let off = p.s_vx.transpose() + s_bar;
    m.view_mut((0, nx), (nx, nv)).copy_from(&off);
    m.view_mut((nx, 0), (nv, nx)).copy_from(&off.transpose());
    m.view_mut((nx, nx), (nv, nv)).copy_from(&(&p.r_vv + q_bar));
    let margin = if n == 0 { f64::NEG_INFINITY } else { max_sym_eigenvalue(&m)? };
    Ok(Thm1Result { holds: margin < 0.0, margin })
}

/// Initial state of the nominal model inside the Youla policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NominalInit {
    /// `x_hat_0 = 0`: the nominal model starts at rest and the innovation
    /// carries the initial condition.
    #[default]
    Zero,
    /// `x_hat_0 = x_0`.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// `v = Q(x - x_hat)` with the nominal model in the loop.
    Youla,
    /// `v = C(x)`.
    Ctrl,
}

/// Everything needed to rebuild a policy from a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub structure: Structure,
    pub k: Vec<f64>,
    pub rho_hat: f64,
    #[serde(default)]
    pub nominal_init: NominalInit,
    /// Length of the optional reference input fed to the Q-parameter.
    #[serde(default)]
    pub reference_dim: usize,
    pub model: ModelSpec,
}

impl PolicySpec {
    pub fn build(&self, plant: &UncertainPlant, theta: &DVector<f64>) -> Result<Policy> {
        if self.k.len() != plant.n_x() * plant.n_u() {
            return dim_err(format!("gain has {} entries, plant needs {}", self.k.len(), plant.n_x() * plant.n_u()));
        }
        let base = BaseController::new(DMatrix::from_row_slice(plant.n_u(), plant.n_x(), &self.k));
        let model = self.model.build(theta)?;
        let gamma = match &self.model {
            ModelSpec::Ren { iqc, .. } => iqc.gamma(),
            _ => None,
        };
        if self.model.n_out() != plant.n_u() {
            return dim_err(format!("model output {} but plant input {}", self.model.n_out(), plant.n_u()));
        }
        Ok(match self.structure {
            Structure::Youla => {
                if self.model.n_in() != plant.n_x() + self.reference_dim {
                    return dim_err(format!(
                        "Q-parameter input {} but innovation plus reference is {}",
                        self.model.n_in(),
                        plant.n_x() + self.reference_dim
                    ));
                }
                let (a_nom, b_nom) = base.closed_loop(plant, self.rho_hat)?;
                Policy::Youla(YoulaPolicy {
                    base,
                    rho_hat: self.rho_hat,
                    a_nom,
                    b_nom,
                    model,
                    gamma,
                    nominal_init: self.nominal_init,
                    reference_dim: self.reference_dim,
                })
            }
            Structure::Ctrl => {
                if self.model.n_in() != plant.n_x() {
                    return dim_err("C-parameter input must equal the state dimension");
                }
                Policy::Ctrl(CtrlPolicy { base, model, gain_budget: gamma })
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct YoulaPolicy {
    pub base: BaseController,
    pub rho_hat: f64,
    /// Nominal closed loop `A_d(rho_hat) - B_d K`.
    pub a_nom: DMatrix<f64>,
    pub b_nom: DMatrix<f64>,
    pub model: Model,
    pub gamma: Option<f64>,
    pub nominal_init: NominalInit,
    pub reference_dim: usize,
}

#[derive(Debug, Clone)]
pub struct CtrlPolicy {
    pub base: BaseController,
    pub model: Model,
    pub gain_budget: Option<f64>,
}

/// Feedback laws that can be rolled out against the plant.
#[derive(Debug, Clone)]
pub enum Policy {
    Youla(YoulaPolicy),
    Ctrl(CtrlPolicy),
    /// Static `u = -K x`.
    Linear(BaseController),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub x_hat: DVector<f64>,
    pub q_state: DVector<f64>,
}

/// Values of one policy step kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PolicyCache {
    model: Option<StepCache>,
}

impl Policy {
    pub fn model(&self) -> Option<&Model> {
        match self {
            Self::Youla(p) => Some(&p.model),
            Self::Ctrl(p) => Some(&p.model),
            Self::Linear(_) => None,
        }
    }

    pub fn base(&self) -> &BaseController {
        match self {
            Self::Youla(p) => &p.base,
            Self::Ctrl(p) => &p.base,
            Self::Linear(b) => b,
        }
    }

    pub fn initial_state(&self, x0: &DVector<f64>) -> PolicyState {
        match self {
            Self::Youla(p) => PolicyState {
                x_hat: match p.nominal_init {
                    NominalInit::Zero => DVector::zeros(x0.len()),
                    NominalInit::Observed => x0.clone(),
                },
                q_state: p.model.initial_state(),
            },
            Self::Ctrl(p) => PolicyState { x_hat: DVector::zeros(0), q_state: p.model.initial_state() },
            Self::Linear(_) => PolicyState { x_hat: DVector::zeros(0), q_state: DVector::zeros(0) },
        }
    }

    pub fn step(&self, ps: &PolicyState, x: &DVector<f64>, r: Option<&DVector<f64>>) -> Result<(PolicyState, DVector<f64>)> {
        self.step_cached(ps, x, r).map(|(s, u, _)| (s, u))
    }

    pub fn step_cached(
        &self,
        ps: &PolicyState,
        x: &DVector<f64>,
        r: Option<&DVector<f64>>,
    ) -> Result<(PolicyState, DVector<f64>, PolicyCache)> {
        match self {
            Self::Youla(p) => {
                let n = x.len();
                let mut input = DVector::zeros(n + p.reference_dim);
                input.rows_mut(0, n).copy_from(&(x - &ps.x_hat));
                if let Some(r) = r {
                    if r.len() != p.reference_dim {
                        return dim_err(format!("reference has length {}, expected {}", r.len(), p.reference_dim));
                    }
                    input.rows_mut(n, p.reference_dim).copy_from(r);
                }
                let (q_next, v, cache) = p.model.step_cached(&ps.q_state, &input)?;
                let u = p.base.control(x) + &v;
                let x_hat = &p.a_nom * &ps.x_hat + &p.b_nom * &v;
                Ok((PolicyState { x_hat, q_state: q_next }, u, PolicyCache { model: Some(cache) }))
            }
            Self::Ctrl(p) => {
                let (q_next, v, cache) = p.model.step_cached(&ps.q_state, x)?;
                let u = p.base.control(x) + &v;
                Ok((PolicyState { x_hat: ps.x_hat.clone(), q_state: q_next }, u, PolicyCache { model: Some(cache) }))
            }
            Self::Linear(b) => Ok((ps.clone(), b.control(x), PolicyCache { model: None })),
        }
    }

    /// Reverse pass of one step. Takes the adjoints of the next policy state
    /// and of `u`; returns the adjoints of `x` and of the current policy state.
    pub fn step_backward(
        &self,
        cache: &PolicyCache,
        ps_bar_next: &PolicyState,
        u_bar: &DVector<f64>,
        grad: Option<&mut ModelGrad>,
    ) -> (DVector<f64>, PolicyState) {
        let base = self.base();
        let mut x_bar = -(base.k.transpose() * u_bar);
        match self {
            Self::Youla(p) => {
                let v_bar = u_bar + p.b_nom.transpose() * &ps_bar_next.x_hat;
                let mut x_hat_bar = p.a_nom.transpose() * &ps_bar_next.x_hat;
                let g = grad.expect("Youla backward needs a gradient accumulator");
                let cache = cache.model.as_ref().expect("Youla cache has a model step");
                let (q_bar, in_bar) = p.model.step_backward(cache, &ps_bar_next.q_state, &v_bar, g);
                let n = x_bar.len();
                let xt_bar = in_bar.rows(0, n);
                x_bar += xt_bar;
                x_hat_bar -= xt_bar;
                (x_bar, PolicyState { x_hat: x_hat_bar, q_state: q_bar })
            }
            Self::Ctrl(p) => {
                let g = grad.expect("Ctrl backward needs a gradient accumulator");
                let cache = cache.model.as_ref().expect("Ctrl cache has a model step");
                let (q_bar, in_bar) = p.model.step_backward(cache, &ps_bar_next.q_state, u_bar, g);
                x_bar += in_bar;
                (x_bar, PolicyState { x_hat: DVector::zeros(0), q_state: q_bar })
            }
            Self::Linear(_) => (x_bar, ps_bar_next.clone()),
        }
    }
}

/// `youla_step`: one step of a Youla policy.
pub fn youla_step(
    policy: &YoulaPolicy,
    ps: &PolicyState,
    x: &DVector<f64>,
    r: Option<&DVector<f64>>,
) -> Result<(PolicyState, DVector<f64>)> {
    Policy::Youla(policy.clone()).step(ps, x, r)
}

/// `ctrl_step`: one step of a natural policy `u = -K x + C(x)`.
pub fn ctrl_step(policy: &CtrlPolicy, ps: &PolicyState, x: &DVector<f64>) -> Result<(PolicyState, DVector<f64>)> {
    Policy::Ctrl(policy.clone()).step(ps, x, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{CartPoleConfig, DisturbanceChannel};

    fn plant() -> UncertainPlant {
        UncertainPlant::cartpole(CartPoleConfig::default(), DisturbanceChannel::StateAdditive).unwrap()
    }

    #[test]
    fn small_gain_reduction() {
        let alpha = 1.0 / 60.0;
        let iqc = PlantIqc::small_gain(alpha, 2, 1);
        let check = |gamma: f64| {
            thm1_check(
                &iqc,
                &(DMatrix::identity(1, 1) * (-1.0 / gamma)),
                &DMatrix::zeros(2, 1),
                &(DMatrix::identity(2, 2) * gamma),
            )
            .unwrap()
        };
        let ok = check(59.0);
        assert!(ok.holds);
        // diag(-60 + 59, 1/60 - 1/59)
        assert!((ok.margin - (1.0 / 60.0 - 1.0 / 59.0)).abs() < 1e-15);
        let bad = check(61.0);
        assert!(!bad.holds);
        assert!((bad.margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thm1_rejects_bad_shapes_and_signs() {
        let mut iqc = PlantIqc::small_gain(0.1, 2, 1);
        assert!(thm1_check(&iqc, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 1), &DMatrix::zeros(2, 2)).is_err());
        iqc.q_xx = DMatrix::identity(2, 2);
        assert!(thm1_check(&iqc, &DMatrix::zeros(1, 1), &DMatrix::zeros(2, 1), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn gamma_formula() {
        assert!((gamma_from_alpha(2.0, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!((gamma_from_alpha(1.0 / 60.0, 1.0 - 1e-6).unwrap() - 60.0).abs() < 1e-4);
        assert!(gamma_from_alpha(0.0, 0.5).is_err());
        assert!(gamma_from_alpha(1.0, 1.0).is_err());
    }

    #[test]
    fn gdelta_vanishes_at_nominal() {
        let p = plant();
        let g = gdelta_realization(&p, &BaseController::standard(), 1.1, 1.1).unwrap();
        assert!(hinf_norm(&g, HinfMethod::Bisect(HINF_TOL)).unwrap() < 1e-10);
        assert_eq!(compute_alpha(&p, &BaseController::standard(), 1.1, 1).unwrap(), g.d.amax());
    }

    #[test]
    fn zero_gain_is_unstable_everywhere() {
        let p = plant();
        let rep = verify_base_controller(&p, &BaseController::from_row(&[0.0; 4]), 10).unwrap();
        assert_eq!(rep.unstable.len(), 10);
        assert!(rep.beta_achieved.is_infinite());
    }
}

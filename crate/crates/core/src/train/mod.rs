//! Closed-loop rollouts, empirical cost, backpropagation through time and the
//! training loop.

mod cost;
mod optim;

use std::time::Instant;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cost::{stage_cost, CostSpec, StageCost};
pub use optim::{optimizer_step, OptState, OptimizerKind};

use crate::error::{Error, Result};
use crate::model::ModelGrad;
use crate::plant::{DisturbanceModel, Realization, Scenario, ScenarioSet, UncertainPlant};
use crate::policy::{Policy, PolicyCache, PolicySpec, PolicyState};

/// States beyond this norm count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// One closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    /// Average stage cost, `+inf` when the trajectory diverged.
    pub ell: f64,
    /// Step at which the state left the divergence ball.
    pub diverged_at: Option<usize>,
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

struct Tape {
    caches: Vec<PolicyCache>,
    zero_state: PolicyState,
}

fn simulate(
    real: &Realization,
    policy: &Policy,
    scenario: &Scenario,
    horizon: usize,
    cost: &StageCost,
    record: bool,
) -> Result<(Rollout, Option<Tape>)> {
    if scenario.w.len() < horizon + 1 {
        return Err(Error::InvalidArgument(format!(
            "scenario has {} disturbance samples, horizon {horizon} needs {}",
            scenario.w.len(),
            horizon + 1
        )));
    }
    let mut x = scenario.x0_vec();
    let mut ps = policy.initial_state(&x);
    let zero_state = PolicyState { x_hat: ps.x_hat.map(|_| 0.0), q_state: ps.q_state.map(|_| 0.0) };
    let mut out = Rollout { x: Vec::new(), u: Vec::new(), w: Vec::new(), ell: 0.0, diverged_at: None };
    let mut caches = Vec::new();
    let mut total = 0.0;
    for t in 0..=horizon {
        let (ps_next, u, cache) = policy.step_cached(&ps, &x, None)?;
        if u.iter().any(|v| !v.is_finite()) {
            out.diverged_at = Some(t);
            break;
        }
        let w = scenario.w_vec(t);
        total += cost.eval(&x, &u);
        out.x.push(x.clone());
        out.u.push(u.clone());
        if record {
            caches.push(cache);
        }
        if t < horizon {
            let next = real.step(&x, &u, &w);
            out.w.push(w);
            if !(next.norm() <= DIVERGENCE_NORM) {
                out.diverged_at = Some(t + 1);
                break;
            }
            x = next;
        } else {
            out.w.push(w);
        }
        ps = ps_next;
    }
    out.ell = if out.diverged_at.is_some() { f64::INFINITY } else { total / (horizon + 1) as f64 };
    Ok((out, record.then_some(Tape { caches, zero_state })))
}

/// `rollout`: closed-loop simulation of one scenario over `0..=horizon`.
pub fn rollout(
    plant: &UncertainPlant,
    policy: &Policy,
    scenario: &Scenario,
    horizon: usize,
    cost: &CostSpec,
) -> Result<Rollout> {
    let real = plant.realize(scenario.rho)?;
    simulate(&real, policy, scenario, horizon, &cost.compile()?, false).map(|(r, _)| r)
}

/// Per-scenario average costs, evaluated concurrently and returned in order.
pub fn scenario_costs(
    plant: &UncertainPlant,
    policy: &Policy,
    scenarios: &[Scenario],
    horizon: usize,
    cost: &CostSpec,
) -> Result<Vec<f64>> {
    let stage = cost.compile()?;
    scenarios
        .par_iter()
        .map(|s| {
            let real = plant.realize(s.rho)?;
            simulate(&real, policy, s, horizon, &stage, false).map(|(r, _)| r.ell)
        })
        .collect()
}

/// `empirical_cost`: mean of per-scenario average costs.
pub fn empirical_cost(
    plant: &UncertainPlant,
    policy: &Policy,
    scenarios: &[Scenario],
    horizon: usize,
    cost: &CostSpec,
) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("empirical cost needs at least one scenario".into()));
    }
    let ells = scenario_costs(plant, policy, scenarios, horizon, cost)?;
    Ok(ells.iter().sum::<f64>() / ells.len() as f64)
}

fn backprop(
    real: &Realization,
    policy: &Policy,
    roll: &Rollout,
    tape: &Tape,
    cost: &StageCost,
    grad: &mut ModelGrad,
) {
    let horizon = roll.x.len() - 1;
    let scale = 1.0 / (horizon + 1) as f64;
    let at = real.a.transpose();
    let bt = real.b.transpose();
    let mut x_bar_next: Option<DVector<f64>> = None;
    let mut ps_bar = tape.zero_state.clone();
    for t in (0..=horizon).rev() {
        let (cx, cu) = cost.grad(&roll.x[t], &roll.u[t]);
        let mut x_bar = cx * scale;
        let mut u_bar = cu * scale;
        if let Some(xn) = &x_bar_next {
            x_bar += &at * xn;
            u_bar += &bt * xn;
        }
        let (xb, psb) = policy.step_backward(&tape.caches[t], &ps_bar, &u_bar, Some(grad));
        x_bar += xb;
        ps_bar = psb;
        x_bar_next = Some(x_bar);
    }
}

/// Empirical cost with its gradient with respect to the policy parameters.
#[derive(Debug, Clone)]
pub struct CostGradient {
    pub cost: f64,
    pub grad: DVector<f64>,
    pub ells: Vec<f64>,
}

impl CostGradient {
    pub fn diverged(&self) -> bool {
        !self.cost.is_finite()
    }
}

/// `grad`: exact reverse-mode gradient of the empirical cost.
///
/// Scenario gradients are reduced in ascending index order, then pulled back
/// through the parameterization once. A diverged scenario makes the cost
/// `+inf` and the gradient zero.
pub fn grad(
    plant: &UncertainPlant,
    spec: &PolicySpec,
    theta: &DVector<f64>,
    scenarios: &[Scenario],
    horizon: usize,
    cost: &CostSpec,
) -> Result<CostGradient> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("gradient needs at least one scenario".into()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("policy parameters".into()));
    }
    let policy = spec.build(plant, theta)?;
    let model = policy.model().ok_or_else(|| Error::InvalidArgument("policy has no parameters".into()))?;
    let stage = cost.compile()?;
    let parts: Vec<(f64, Option<ModelGrad>)> = scenarios
        .par_iter()
        .map(|s| {
            let real = plant.realize(s.rho)?;
            let (roll, tape) = simulate(&real, &policy, s, horizon, &stage, true)?;
            if roll.diverged() {
                return Ok((roll.ell, None));
            }
            let mut g = model.grad_zeros();
            backprop(&real, &policy, &roll, tape.as_ref().expect("tape recorded"), &stage, &mut g);
            Ok((roll.ell, Some(g)))
        })
        .collect::<Result<_>>()?;

    let ells: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let m = scenarios.len() as f64;
    let cost_value = ells.iter().sum::<f64>() / m;
    if !cost_value.is_finite() {
        return Ok(CostGradient { cost: f64::INFINITY, grad: DVector::zeros(theta.len()), ells });
    }
    let mut total = model.grad_zeros();
    for (_, g) in &parts {
        total.add_assign(g.as_ref().expect("finite rollout has a gradient"));
    }
    let mut g = model.theta_grad(&total);
    g /= m;
    if let Some(k) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {k} after the parameterization backward pass")));
    }
    Ok(CostGradient { cost: cost_value, grad: g, ells })
}

/// Learning rate `lr` from `from_epoch` (1-based) onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub from_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub m_train: usize,
    pub t_train: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub policy: PolicySpec,
    pub cost: CostSpec,
    #[serde(default = "no_disturbance")]
    pub disturbance: DisturbanceModel,
    /// Test-cost cadence in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub m_test: usize,
    pub t_test: usize,
    pub test_seed: u64,
    #[serde(default = "default_bins")]
    pub test_bins: usize,
    #[serde(default = "default_output_scale")]
    pub init_output_scale: f64,
}

fn no_disturbance() -> DisturbanceModel {
    DisturbanceModel::None
}

fn default_bins() -> usize {
    10
}

fn default_output_scale() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m_train == 0 || self.m_test == 0 {
            return bad("scenario counts must be positive".into());
        }
        if self.t_train == 0 || self.t_test == 0 {
            return bad("horizons must be positive".into());
        }
        if self.lr_schedule.is_empty() {
            return bad("lr_schedule needs at least one phase".into());
        }
        for p in &self.lr_schedule {
            if !(p.lr > 0.0) || !p.lr.is_finite() {
                return bad(format!("learning rate {} must be positive", p.lr));
            }
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect at 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr_schedule[0].lr;
        for p in &self.lr_schedule {
            if epoch >= p.from_epoch {
                lr = p.lr;
            }
        }
        lr
    }

    /// Fixed test set, stratified over equal-width parameter bins.
    pub fn test_set(&self, plant: &UncertainPlant) -> ScenarioSet {
        ScenarioSet::stratified(
            plant,
            &plant.x0_set,
            &self.disturbance,
            self.t_test,
            self.m_test,
            self.test_bins,
            self.test_seed,
        )
    }

    /// Training scenarios for 1-based `epoch`.
    pub fn train_set(&self, plant: &UncertainPlant, epoch: usize) -> ScenarioSet {
        ScenarioSet::sample(plant, &self.disturbance, self.t_train, self.m_train, derive_seed(self.seed, epoch as u64))
    }

    pub fn init_theta(&self) -> Result<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0));
        self.policy.model.init_theta(self.init_output_scale, &mut rng)
    }
}

/// Independent seed for a sub-stream of a master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_add(1 << 40));
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_cost: f64,
    pub test_cost: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    /// Certificate margin of the parameters after this epoch's update.
    pub lmi_margin: Option<f64>,
    /// True when a training scenario diverged and the update was skipped.
    pub diverged: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: DVector<f64>,
    pub initial_test_cost: f64,
    pub history: Vec<EpochRecord>,
    pub diverged_epochs: Vec<usize>,
}

impl TrainOutcome {
    pub fn best_test_cost(&self) -> f64 {
        self.history
            .iter()
            .filter_map(|r| r.test_cost)
            .fold(self.initial_test_cost, f64::min)
    }

    pub fn final_test_cost(&self) -> f64 {
        self.history.iter().rev().find_map(|r| r.test_cost).unwrap_or(self.initial_test_cost)
    }

    pub fn min_lmi_margin(&self) -> Option<f64> {
        self.history.iter().filter_map(|r| r.lmi_margin).reduce(f64::min)
    }
}

/// `train`: gradient descent on freshly sampled scenarios each epoch.
///
/// `on_epoch` sees each record and the parameters after the update.
pub fn train(
    plant: &UncertainPlant,
    cfg: &TrainConfig,
    theta0: Option<DVector<f64>>,
    mut on_epoch: impl FnMut(&EpochRecord, &DVector<f64>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.cost.validate(plant.n_x())?;
    let mut theta = match theta0 {
        Some(t) => t,
        None => cfg.init_theta()?,
    };
    let test = cfg.test_set(plant);
    let test_cost = |theta: &DVector<f64>| -> Result<f64> {
        let policy = cfg.policy.build(plant, theta)?;
        empirical_cost(plant, &policy, &test.scenarios, cfg.t_test, &cfg.cost)
    };
    let initial_test_cost = test_cost(&theta)?;
    let mut opt = OptState::new(theta.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut diverged_epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let batch = cfg.train_set(plant, epoch);
        let cg = grad(plant, &cfg.policy, &theta, &batch.scenarios, cfg.t_train, &cfg.cost)?;
        let diverged = cg.diverged();
        if diverged {
            diverged_epochs.push(epoch);
        } else {
            optimizer_step(&cfg.optimizer, &mut theta, &cg.grad, &mut opt, lr)?;
        }
        let lmi_margin = match &cfg.policy.model {
            crate::model::ModelSpec::Ren { .. } => {
                let model = cfg.policy.model.build(&theta)?;
                Some(model.certificate_margin().expect("REN has a certificate")?)
            }
            _ => None,
        };
        let test_cost = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            Some(test_cost(&theta)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_cost: cg.cost,
            test_cost,
            grad_norm: cg.grad.norm(),
            lr,
            lmi_margin,
            diverged,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&record, &theta)?;
        history.push(record);
    }
    Ok(TrainOutcome { theta, initial_test_cost, history, diverged_epochs })
}

//! Test-cost evaluation, oracle baselines and closed-loop diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::dlqr;
use crate::plant::{scenario_rng, DisturbanceModel, Scenario, ScenarioSet, StateBox, UncertainPlant};
use crate::policy::{BaseController, Policy, PolicyState};
use crate::train::{empirical_cost, rollout, scenario_costs, CostSpec};

/// Default test protocol.
pub const TEST_M: usize = 50;
pub const TEST_T: usize = 100;
pub const TEST_BINS: usize = 10;

/// Fixed, stratified test scenarios.
pub fn test_set(
    plant: &UncertainPlant,
    dist: &DisturbanceModel,
    m: usize,
    horizon: usize,
    seed: u64,
) -> ScenarioSet {
    ScenarioSet::stratified(plant, &plant.x0_set, dist, horizon, m, TEST_BINS, seed)
}

/// `test_cost`: empirical cost on a fixed seeded test set.
pub fn test_cost(
    plant: &UncertainPlant,
    policy: &Policy,
    m: usize,
    horizon: usize,
    seed: u64,
    cost: &CostSpec,
) -> Result<f64> {
    let set = test_set(plant, &DisturbanceModel::None, m, horizon, seed);
    empirical_cost(plant, policy, &set.scenarios, horizon, cost)
}

/// `lqr_oracle_cost`: each scenario is controlled by the LQR gain of its true
/// parameter.
pub fn lqr_oracle_cost(
    plant: &UncertainPlant,
    scenarios: &[Scenario],
    horizon: usize,
    cost: &CostSpec,
) -> Result<f64> {
    let ells = lqr_oracle_costs(plant, scenarios, horizon, cost)?;
    if ells.is_empty() {
        return Err(Error::InvalidArgument("oracle cost needs at least one scenario".into()));
    }
    Ok(ells.iter().sum::<f64>() / ells.len() as f64)
}

pub fn lqr_oracle_costs(
    plant: &UncertainPlant,
    scenarios: &[Scenario],
    horizon: usize,
    cost: &CostSpec,
) -> Result<Vec<f64>> {
    let (q, r) = cost
        .quadratic_weights()
        .ok_or_else(|| Error::InvalidArgument("the LQR oracle is only defined for quadratic costs".into()))?;
    scenarios
        .par_iter()
        .map(|s| {
            let real = plant.realize(s.rho)?;
            let (k, _) = dlqr(&real.a, &real.b, &q, &DMatrix::from_element(1, 1, r))?;
            let policy = Policy::Linear(BaseController::new(k));
            rollout(plant, &policy, s, horizon, cost).map(|r| r.ell)
        })
        .collect()
}

/// `robust_baseline_cost`: `u = -K x` on every scenario.
pub fn robust_baseline_cost(
    plant: &UncertainPlant,
    base: &BaseController,
    scenarios: &[Scenario],
    horizon: usize,
    cost: &CostSpec,
) -> Result<f64> {
    empirical_cost(plant, &Policy::Linear(base.clone()), scenarios, horizon, cost)
}

/// `(J - J_opt) / J_opt`, `NaN` when the oracle cost is not positive.
pub fn performance_gap(j: f64, j_opt: f64) -> f64 {
    if j_opt > 0.0 {
        (j - j_opt) / j_opt
    } else {
        f64::NAN
    }
}

/// Mean cost of the scenarios whose parameter falls in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    #[serde(with = "crate::jsonnum")]
    pub mean_cost: f64,
}

/// Groups per-scenario costs into `n_bins` equal-width parameter bins.
pub fn bin_by_rho(plant: &UncertainPlant, scenarios: &[Scenario], ells: &[f64], n_bins: usize) -> Vec<RhoBin> {
    let (lo, hi) = plant.rho_set;
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<RhoBin> = (0..n_bins)
        .map(|b| RhoBin { lo: lo + b as f64 * width, hi: lo + (b + 1) as f64 * width, count: 0, mean_cost: 0.0 })
        .collect();
    for (s, &ell) in scenarios.iter().zip(ells) {
        let b = (((s.rho - lo) / width).floor().max(0.0) as usize).min(n_bins - 1);
        bins[b].count += 1;
        bins[b].mean_cost += ell;
    }
    for b in &mut bins {
        b.mean_cost = if b.count > 0 { b.mean_cost / b.count as f64 } else { f64::NAN };
    }
    bins
}

/// `shifted_eval`: per-parameter cost curve with initial states drawn from the
/// shifted box.
#[allow(clippy::too_many_arguments)]
pub fn shifted_eval(
    plant: &UncertainPlant,
    policy: &Policy,
    shift: &[f64],
    m: usize,
    horizon: usize,
    seed: u64,
    cost: &CostSpec,
    n_bins: usize,
) -> Result<Vec<RhoBin>> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let x0_set: StateBox = plant.x0_set.shifted(shift)?;
    let set = ScenarioSet::stratified(plant, &x0_set, &DisturbanceModel::None, horizon, m, n_bins, seed);
    let ells = scenario_costs(plant, policy, &set.scenarios, horizon, cost)?;
    Ok(bin_by_rho(plant, &set.scenarios, &ells, n_bins))
}

/// Exponential fit `|dx_t| ~ c lambda^t` of one trajectory pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionFit {
    pub index: usize,
    pub rho: f64,
    #[serde(with = "crate::jsonnum")]
    pub c: f64,
    #[serde(with = "crate::jsonnum")]
    pub lambda: f64,
    pub initial: f64,
    /// `|dx_T| / |dx_0|`.
    #[serde(with = "crate::jsonnum")]
    pub final_ratio: f64,
    /// First step at which the ratio drops below `1e-6`.
    pub steps_to_1e6: Option<usize>,
}

fn joint(x: &DVector<f64>, ps: &PolicyState) -> DVector<f64> {
    let mut v = x.as_slice().to_vec();
    v.extend_from_slice(ps.x_hat.as_slice());
    v.extend_from_slice(ps.q_state.as_slice());
    DVector::from_vec(v)
}

/// Least-squares fit of `log y_t = log c + t log lambda`.
pub fn fit_decay(ys: &[(usize, f64)]) -> (f64, f64) {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return (ys.first().map_or(0.0, |p| p.1), 0.0);
    }
    let (mut st, mut sl, mut stt, mut stl) = (0.0, 0.0, 0.0, 0.0);
    for &(t, y) in ys {
        let (t, l) = (t as f64, y.ln());
        st += t;
        sl += l;
        stt += t * t;
        stl += t * l;
    }
    let slope = (n * stl - st * sl) / (n * stt - st * st);
    let icpt = (sl - slope * st) / n;
    (icpt.exp(), slope.exp())
}

/// `contraction_diagnostic`: simulates closed-loop pairs from two initial
/// states under a shared disturbance and fits their decay.
///
/// The distance includes the policy's internal state. Identical initial
/// states are skipped.
pub fn contraction_diagnostic(
    plant: &UncertainPlant,
    policy: &Policy,
    dist: &DisturbanceModel,
    n_pairs: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<ContractionFit>> {
    let pairs: Vec<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> = (0..n_pairs as u64)
        .map(|i| {
            let mut rng = scenario_rng(seed, i);
            let rho = rng.random_range(plant.rho_set.0..=plant.rho_set.1);
            let xa = plant.x0_set.sample(&mut rng);
            let xb = plant.x0_set.sample(&mut rng);
            let w = dist.sample(plant.n_w(), horizon, &mut rng);
            (rho, xa, xb, w)
        })
        .collect();
    let fits: Vec<Option<ContractionFit>> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, (rho, xa, xb, w))| {
            let real = plant.realize(*rho)?;
            let mut xa = DVector::from_column_slice(xa);
            let mut xb = DVector::from_column_slice(xb);
            let mut pa = policy.initial_state(&xa);
            let mut pb = policy.initial_state(&xb);
            let d0 = (joint(&xa, &pa) - joint(&xb, &pb)).norm();
            if d0 == 0.0 {
                return Ok(None);
            }
            let mut points = vec![(0usize, d0)];
            let mut ratio = 1.0;
            let mut steps_to = None;
            for t in 0..horizon {
                let wt = DVector::from_column_slice(&w[t]);
                let (na, ua) = policy.step(&pa, &xa, None)?;
                let (nb, ub) = policy.step(&pb, &xb, None)?;
                xa = real.step(&xa, &ua, &wt);
                xb = real.step(&xb, &ub, &wt);
                pa = na;
                pb = nb;
                let d = (joint(&xa, &pa) - joint(&xb, &pb)).norm();
                if !d.is_finite() {
                    return Ok(Some(ContractionFit {
                        index,
                        rho: *rho,
                        c: f64::INFINITY,
                        lambda: f64::INFINITY,
                        initial: d0,
                        final_ratio: f64::INFINITY,
                        steps_to_1e6: None,
                    }));
                }
                ratio = d / d0;
                if steps_to.is_none() && ratio < 1e-6 {
                    steps_to = Some(t + 1);
                }
                if d > 1e-12 {
                    points.push((t + 1, d));
                }
            }
            let (c, lambda) = fit_decay(&points);
            Ok(Some(ContractionFit { index, rho: *rho, c, lambda, initial: d0, final_ratio: ratio, steps_to_1e6: steps_to }))
        })
        .collect::<Result<_>>()?;
    Ok(fits.into_iter().flatten().collect())
}

/// Summary of one trained policy on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "crate::jsonnum")]
    pub j_test: f64,
    #[serde(with = "crate::jsonnum::opt")]
    pub j_lqr_oracle: Option<f64>,
    #[serde(with = "crate::jsonnum")]
    pub j_robust: f64,
    #[serde(with = "crate::jsonnum::opt")]
    pub gap: Option<f64>,
    pub per_rho: Vec<RhoBin>,
    #[serde(with = "crate::jsonnum::vec")]
    pub contraction_lambdas: Vec<f64>,
    pub divergence_count: usize,
}

/// Evaluates `policy` against both baselines on `set`.
pub fn evaluate(
    plant: &UncertainPlant,
    policy: &Policy,
    set: &ScenarioSet,
    horizon: usize,
    cost: &CostSpec,
    contraction_pairs: usize,
    seed: u64,
) -> Result<EvalReport> {
    let ells = scenario_costs(plant, policy, &set.scenarios, horizon, cost)?;
    let j_test = ells.iter().sum::<f64>() / ells.len() as f64;
    let j_lqr_oracle = match cost.quadratic_weights() {
        Some(_) => Some(lqr_oracle_cost(plant, &set.scenarios, horizon, cost)?),
        None => None,
    };
    let j_robust = robust_baseline_cost(plant, policy.base(), &set.scenarios, horizon, cost)?;
    let contraction_lambdas = if contraction_pairs > 0 {
        contraction_diagnostic(plant, policy, &DisturbanceModel::None, contraction_pairs, horizon, seed)?
            .into_iter()
            .map(|f| f.lambda)
            .collect()
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        j_test,
        j_lqr_oracle,
        j_robust,
        gap: j_lqr_oracle.map(|o| performance_gap(j_test, o)),
        per_rho: bin_by_rho(plant, &set.scenarios, &ells, TEST_BINS),
        contraction_lambdas,
        divergence_count: ells.iter().filter(|e| !e.is_finite()).count(),
    })
}

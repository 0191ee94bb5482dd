//! The uncertain linearized cart-pole, disturbance models and scenario sampling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lti::{zoh_discretize, StateSpace, TimeDomain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleConfig {
    /// Admissible pendulum masses `[lo, hi]` in kg.
    pub mp_range: (f64, f64),
    pub mc: f64,
    pub ell: f64,
    pub g: f64,
    pub ts: f64,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self { mp_range: (0.2, 2.0), mc: 1.0, ell: 1.0, g: 9.81, ts: 0.05 }
    }
}

impl CartPoleConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mp_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("mass range [{lo}, {hi}]")));
        }
        if !(self.ts > 0.0) || !(self.mc > 0.0) || !(self.ell > 0.0) {
            return Err(Error::InvalidArgument("ts, mc and ell must be positive".into()));
        }
        Ok(())
    }

    /// Continuous linearization about the upright equilibrium, state
    /// `(p, p', psi, psi')`.
    pub fn continuous(&self, rho: f64) -> Result<StateSpace> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!("pendulum mass must be > 0, got {rho}")));
        }
        let (mc, g, ell) = (self.mc, self.g, self.ell);
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 1)] = 1.0;
        a[(1, 2)] = -rho * g / mc;
        a[(2, 3)] = 1.0;
        a[(3, 2)] = (mc + rho) * g / (mc * ell);
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 1.0 / mc, 0.0, -1.0 / mc]);
        StateSpace::state_output(a, b, TimeDomain::Continuous)
    }
}

/// Continuous cart-pole with the default physical constants.
pub fn cartpole_ct(rho: f64) -> Result<StateSpace> {
    CartPoleConfig::default().continuous(rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceChannel {
    /// `x+ = A x + B u + w`, `w` in R^n.
    StateAdditive,
    /// `x+ = A x + B (u + w)`, `w` in R^m.
    InputAdditive,
}

/// Axis-aligned box of initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return dim_err("state box bounds have different lengths");
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument("state box needs finite lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        Self {
            lo: half_widths.iter().map(|h| -h).collect(),
            hi: half_widths.to_vec(),
        }
    }

    /// Initial-state set of the regulation experiments.
    pub fn regulation() -> Self {
        Self::symmetric(&[10.0, 0.5, 2.0, 0.5])
    }

    /// Smaller initial-state set used with input constraints, disturbances
    /// and non-quadratic costs.
    pub fn narrow() -> Self {
        Self::symmetric(&[5.0, 0.1, 1.0, 0.1])
    }

    pub fn shifted(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.lo.len() {
            return dim_err(format!("shift of length {} for a {}-box", shift.len(), self.lo.len()));
        }
        Ok(Self {
            lo: self.lo.iter().zip(shift).map(|(l, s)| l + s).collect(),
            hi: self.hi.iter().zip(shift).map(|(h, s)| h + s).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| uniform(rng, l, h)).collect()
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// How `rho` maps to discrete-time dynamics.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantFamily {
    /// ZOH-sampled cart-pole linearization.
    CartPole(CartPoleConfig),
    /// Discrete family `A(rho) = a0 + rho * a1` with fixed `B`.
    Affine { a0: DMatrix<f64>, a1: DMatrix<f64>, b: DMatrix<f64> },
}

/// Discrete `(A_d, B_d)` for one parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub channel: DisturbanceChannel,
}

impl Realization {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a * x;
        match self.channel {
            DisturbanceChannel::StateAdditive => {
                next.gemv(1.0, &self.b, u, 1.0);
                next += w;
            }
            DisturbanceChannel::InputAdditive => next.gemv(1.0, &self.b, &(u + w), 1.0),
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertainPlant {
    pub family: PlantFamily,
    pub rho_set: (f64, f64),
    pub x0_set: StateBox,
    pub channel: DisturbanceChannel,
}

impl UncertainPlant {
    /// Sampled cart-pole with the regulation initial-state box.
    pub fn cartpole(cfg: CartPoleConfig, channel: DisturbanceChannel) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            family: PlantFamily::CartPole(cfg),
            rho_set: cfg.mp_range,
            x0_set: StateBox::regulation(),
            channel,
        })
    }

    pub fn affine(
        a0: DMatrix<f64>,
        a1: DMatrix<f64>,
        b: DMatrix<f64>,
        rho_set: (f64, f64),
        x0_set: StateBox,
        channel: DisturbanceChannel,
    ) -> Result<Self> {
        let n = a0.nrows();
        if a0.shape() != (n, n) || a1.shape() != (n, n) || b.nrows() != n || x0_set.dim() != n {
            return dim_err("affine plant blocks are inconsistent");
        }
        Ok(Self { family: PlantFamily::Affine { a0, a1, b }, rho_set, x0_set, channel })
    }

    pub fn with_x0_set(mut self, x0_set: StateBox) -> Result<Self> {
        if x0_set.dim() != self.n_x() {
            return dim_err("initial-state box dimension");
        }
        self.x0_set = x0_set;
        Ok(self)
    }

    pub fn n_x(&self) -> usize {
        match &self.family {
            PlantFamily::CartPole(_) => 4,
            PlantFamily::Affine { a0, .. } => a0.nrows(),
        }
    }

    pub fn n_u(&self) -> usize {
        match &self.family {
            PlantFamily::CartPole(_) => 1,
            PlantFamily::Affine { b, .. } => b.ncols(),
        }
    }

    pub fn n_w(&self) -> usize {
        match self.channel {
            DisturbanceChannel::StateAdditive => self.n_x(),
            DisturbanceChannel::InputAdditive => self.n_u(),
        }
    }

    /// Midpoint of the parameter interval.
    pub fn rho_mid(&self) -> f64 {
        0.5 * (self.rho_set.0 + self.rho_set.1)
    }

    /// Uniform grid of `n` points over the parameter interval.
    pub fn rho_grid(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.rho_set;
        match n {
            0 => Vec::new(),
            1 => vec![0.5 * (lo + hi)],
            _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
        }
    }

    pub fn realize(&self, rho: f64) -> Result<Realization> {
        let (a, b) = match &self.family {
            PlantFamily::CartPole(cfg) => {
                let d = zoh_discretize(&cfg.continuous(rho)?, cfg.ts)?;
                (d.a, d.b)
            }
            PlantFamily::Affine { a0, a1, b } => {
                if !rho.is_finite() {
                    return Err(Error::NonFinite("plant parameter".into()));
                }
                (a0 + a1 * rho, b.clone())
            }
        };
        Ok(Realization { a, b, channel: self.channel })
    }
}

/// `build_plant`: ZOH cart-pole with the given disturbance channel.
pub fn build_plant(cfg: CartPoleConfig, channel: DisturbanceChannel) -> Result<UncertainPlant> {
    UncertainPlant::cartpole(cfg, channel)
}

/// One exact linear update of the plant.
pub fn plant_step(
    plant: &UncertainPlant,
    rho: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != plant.n_x() || u.len() != plant.n_u() || w.len() != plant.n_w() {
        return dim_err("plant_step argument sizes");
    }
    if !rho.is_finite() || x.iter().chain(u.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant_step inputs".into()));
    }
    Ok(plant.realize(rho)?.step(x, u, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceModel {
    None,
    /// `w_t = w0`, each component `w0 ~ U[lo, hi]`.
    Constant { lo: f64, hi: f64 },
    /// `w_t = A sin(omega t + phi)` with per-scenario draws.
    Sinusoid { amplitude: (f64, f64), omega: (f64, f64), phase: (f64, f64) },
    /// Independent uniform draws per step and component.
    Iid { lo: f64, hi: f64 },
}

impl DisturbanceModel {
    pub fn constant() -> Self {
        Self::Constant { lo: -5.0, hi: 5.0 }
    }

    pub fn sinusoid() -> Self {
        Self::Sinusoid {
            amplitude: (0.0, 10.0),
            omega: (0.05 * PI, 0.5 * PI),
            phase: (-0.5 * PI, 0.5 * PI),
        }
    }

    /// Length-`horizon + 1` sequence of `n_w`-vectors.
    pub fn sample(&self, n_w: usize, horizon: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let len = horizon + 1;
        match *self {
            Self::None => vec![vec![0.0; n_w]; len],
            Self::Constant { lo, hi } => {
                let w0: Vec<f64> = (0..n_w).map(|_| uniform(rng, lo, hi)).collect();
                vec![w0; len]
            }
            Self::Sinusoid { amplitude, omega, phase } => {
                let params: Vec<(f64, f64, f64)> = (0..n_w)
                    .map(|_| {
                        (
                            uniform(rng, amplitude.0, amplitude.1),
                            uniform(rng, omega.0, omega.1),
                            uniform(rng, phase.0, phase.1),
                        )
                    })
                    .collect();
                (0..len)
                    .map(|t| params.iter().map(|&(a, om, ph)| a * (om * t as f64 + ph).sin()).collect())
                    .collect()
            }
            Self::Iid { lo, hi } => {
                (0..len).map(|_| (0..n_w).map(|_| uniform(rng, lo, hi)).collect()).collect()
            }
        }
    }
}

/// One sampled system setup `(rho, x0, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub rho: f64,
    pub x0: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub seed: u64,
    pub index: u64,
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.w.len().saturating_sub(1)
    }

    pub fn x0_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    pub fn w_vec(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.w[t])
    }
}

/// Independent ChaCha8 stream `index` under master seed `seed`.
pub fn scenario_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `rho ~ U(P)`, `x0 ~ U(X)` and the disturbance sequence.
pub fn sample_scenario(
    plant: &UncertainPlant,
    dist: &DisturbanceModel,
    horizon: usize,
    rng: &mut impl Rng,
) -> Scenario {
    let rho = uniform(rng, plant.rho_set.0, plant.rho_set.1);
    sample_with_rho(plant, &plant.x0_set, dist, horizon, rho, rng)
}

fn sample_with_rho(
    plant: &UncertainPlant,
    x0_set: &StateBox,
    dist: &DisturbanceModel,
    horizon: usize,
    rho: f64,
    rng: &mut impl Rng,
) -> Scenario {
    let x0 = x0_set.sample(rng);
    let w = dist.sample(plant.n_w(), horizon, rng);
    Scenario { rho, x0, w, seed: 0, index: 0 }
}

/// A reproducible batch of scenarios, one RNG stream per scenario index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn sample(
        plant: &UncertainPlant,
        dist: &DisturbanceModel,
        horizon: usize,
        count: usize,
        seed: u64,
    ) -> Self {
        let scenarios = (0..count as u64)
            .map(|i| {
                let mut rng = scenario_rng(seed, i);
                let mut s = sample_scenario(plant, dist, horizon, &mut rng);
                s.seed = seed;
                s.index = i;
                s
            })
            .collect();
        Self { seed, scenarios }
    }

    /// Like [`ScenarioSet::sample`] but scenario `i` draws `rho` uniformly
    /// inside equal-width bin `i mod n_bins`, and `x0` from `x0_set`.
    pub fn stratified(
        plant: &UncertainPlant,
        x0_set: &StateBox,
        dist: &DisturbanceModel,
        horizon: usize,
        count: usize,
        n_bins: usize,
        seed: u64,
    ) -> Self {
        let n_bins = n_bins.max(1);
        let (lo, hi) = plant.rho_set;
        let width = (hi - lo) / n_bins as f64;
        let scenarios = (0..count as u64)
            .map(|i| {
                let mut rng = scenario_rng(seed, i);
                let bin = (i as usize % n_bins) as f64;
                let rho = uniform(&mut rng, lo + bin * width, lo + (bin + 1.0) * width);
                let mut s = sample_with_rho(plant, x0_set, dist, horizon, rho, &mut rng);
                s.seed = seed;
                s.index = i;
                s
            })
            .collect();
        Self { seed, scenarios }
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

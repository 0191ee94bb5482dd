//! Config-driven experiment runner and run-directory comparison.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::Activation;
use crate::checkpoint::{save_checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::eval::{bin_by_rho, contraction_diagnostic, lqr_oracle_cost, performance_gap, shifted_eval, RhoBin};
use crate::model::ModelSpec;
use crate::plant::{CartPoleConfig, DisturbanceChannel, DisturbanceModel, ScenarioSet, StateBox, UncertainPlant};
use crate::policy::{
    compute_alpha, gamma_from_alpha, thm1_check, verify_base_controller, BaseController, NominalInit, PlantIqc,
    Policy, PolicySpec, Structure, BASE_K,
};
use crate::ren::{IqcSpec, RenDims};
use crate::train::{rollout, train, CostSpec, EpochRecord, LrPhase, OptimizerKind, Rollout, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    QuadraticComparison,
    CtrlVsYoula,
    SoftInput,
    Disturbance,
    Economic,
    WeightedL1,
    Verify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::QuadraticComparison => "quadratic_comparison",
            Self::CtrlVsYoula => "ctrl_vs_youla",
            Self::SoftInput => "soft_input",
            Self::Disturbance => "disturbance",
            Self::Economic => "economic",
            Self::WeightedL1 => "weighted_l1",
            Self::Verify => "verify",
        }
    }

    /// Experiments after the quadratic comparison use the narrow initial box
    /// and the longer horizons.
    fn uses_narrow_box(self) -> bool {
        matches!(self, Self::SoftInput | Self::Disturbance | Self::Economic | Self::WeightedL1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown scale {other:?}, expected desk or paper"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ren,
    LinearRen,
    RnnRelu,
    RnnTanh,
    Lstm,
}

// Raw config as written by the user. Every field but `experiment` may be
// omitted and is filled from the scale preset.

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub cartpole: Option<CartPoleConfig>,
    pub channel: Option<DisturbanceChannel>,
    pub x0_box: Option<StateBox>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub structure: Option<Structure>,
    pub k: Option<Vec<f64>>,
    pub rho_hat: Option<f64>,
    pub nominal_init: Option<NominalInit>,
    pub gamma: Option<f64>,
    pub gamma_margin: Option<f64>,
    pub alpha_grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<ModelKind>,
    pub n_x: Option<usize>,
    pub n_v: Option<usize>,
    pub hidden: Option<usize>,
    pub acyclic: Option<bool>,
    pub init_output_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub m: Option<usize>,
    pub t: Option<usize>,
    pub lr_schedule: Option<Vec<LrPhase>>,
    pub optimizer: Option<OptimizerKind>,
    pub cost: Option<CostSpec>,
    pub disturbance: Option<DisturbanceModel>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub m: Option<usize>,
    pub t: Option<usize>,
    pub seed: Option<u64>,
    pub bins: Option<usize>,
    pub shift: Option<Vec<f64>>,
    pub contraction_pairs: Option<usize>,
    pub trajectories: Option<usize>,
    pub u_bound: Option<f64>,
    pub steady_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: Option<u64>,
    pub scale: Option<Scale>,
    pub output_dir: Option<String>,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

// Fully resolved config, echoed to the run directory. It parses back as an
// `ExperimentConfig`.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedPlant {
    pub cartpole: CartPoleConfig,
    pub channel: DisturbanceChannel,
    pub x0_box: StateBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedPolicy {
    pub structure: Structure,
    pub k: Vec<f64>,
    pub rho_hat: f64,
    pub nominal_init: NominalInit,
    pub gamma: f64,
    pub gamma_margin: f64,
    pub alpha_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedModel {
    pub kind: ModelKind,
    pub n_x: usize,
    pub n_v: usize,
    pub hidden: usize,
    pub acyclic: bool,
    pub init_output_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedTrain {
    pub epochs: usize,
    pub m: usize,
    pub t: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub optimizer: OptimizerKind,
    pub cost: CostSpec,
    pub disturbance: DisturbanceModel,
    pub eval_every: usize,
    /// Epoch cadence of intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedEval {
    pub m: usize,
    pub t: usize,
    pub seed: u64,
    pub bins: usize,
    /// Empty for no shifted evaluation.
    pub shift: Vec<f64>,
    pub contraction_pairs: usize,
    pub trajectories: usize,
    pub u_bound: f64,
    pub steady_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedExperiment {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub scale: Scale,
    pub output_dir: String,
    pub plant: ResolvedPlant,
    pub policy: ResolvedPolicy,
    pub model: ResolvedModel,
    pub train: ResolvedTrain,
    pub eval: ResolvedEval,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills every omitted field from the scale preset and validates.
    pub fn resolve(&self, ov: &Overrides) -> Result<ResolvedExperiment> {
        let exp = self.experiment;
        let scale = ov.scale.or(self.scale).unwrap_or_default();
        let seed = ov.seed.or(self.seed).unwrap_or(1);
        let desk = scale == Scale::Desk;
        let narrow = exp.uses_narrow_box();

        let cartpole = self.plant.cartpole.unwrap_or_default();
        let channel = self.plant.channel.unwrap_or(if exp == ExperimentKind::Disturbance {
            DisturbanceChannel::InputAdditive
        } else {
            DisturbanceChannel::StateAdditive
        });
        let x0_box = self.plant.x0_box.clone().unwrap_or_else(|| {
            if narrow {
                StateBox::narrow()
            } else {
                StateBox::regulation()
            }
        });

        let model_kind = self.model.kind.unwrap_or(ModelKind::Ren);
        let model = ResolvedModel {
            kind: model_kind,
            n_x: self.model.n_x.unwrap_or(match (desk, exp) {
                (true, _) => 8,
                (false, ExperimentKind::SoftInput) => 50,
                (false, _) => 40,
            }),
            n_v: self.model.n_v.unwrap_or(match (desk, exp) {
                (true, _) => 64,
                (false, ExperimentKind::SoftInput) => 400,
                (false, _) => 500,
            }),
            hidden: self.model.hidden.unwrap_or(match (desk, model_kind) {
                (true, ModelKind::Lstm) => 32,
                (true, _) => 64,
                (false, ModelKind::Lstm) => 250,
                (false, _) => 500,
            }),
            acyclic: self.model.acyclic.unwrap_or(true),
            init_output_scale: self.model.init_output_scale.unwrap_or(0.1),
        };

        let epochs = self.train.epochs.unwrap_or(match (desk, exp) {
            (true, _) => 150,
            (false, ExperimentKind::SoftInput) => 500,
            (false, _) => 600,
        });
        let switch = if desk { 101 } else { 401 };
        let cost = self.train.cost.clone().unwrap_or(match exp {
            ExperimentKind::SoftInput => CostSpec::standard_soft_input(),
            ExperimentKind::Economic => CostSpec::Economic,
            ExperimentKind::WeightedL1 => CostSpec::standard_weighted_l1(),
            _ => CostSpec::standard_quadratic(),
        });
        let train = ResolvedTrain {
            epochs,
            m: self.train.m.unwrap_or(10),
            t: self.train.t.unwrap_or(if narrow { 100 } else { 60 }),
            lr_schedule: self.train.lr_schedule.clone().unwrap_or_else(|| {
                vec![LrPhase { from_epoch: 1, lr: 1e-3 }, LrPhase { from_epoch: switch, lr: 1e-4 }]
            }),
            optimizer: self.train.optimizer.unwrap_or_default(),
            cost,
            disturbance: self.train.disturbance.clone().unwrap_or(if exp == ExperimentKind::Disturbance {
                DisturbanceModel::constant()
            } else {
                DisturbanceModel::None
            }),
            eval_every: self.train.eval_every.unwrap_or(10),
            checkpoint_every: self.train.checkpoint_every.unwrap_or(0),
        };
        let eval = ResolvedEval {
            m: self.eval.m.unwrap_or(50),
            t: self.eval.t.unwrap_or(if narrow { 120 } else { 100 }),
            seed: self.eval.seed.unwrap_or(12345),
            bins: self.eval.bins.unwrap_or(10),
            shift: self.eval.shift.clone().unwrap_or_else(|| {
                if exp == ExperimentKind::QuadraticComparison {
                    vec![10.0, 0.0, 0.0, 0.0]
                } else {
                    Vec::new()
                }
            }),
            contraction_pairs: self.eval.contraction_pairs.unwrap_or(20),
            trajectories: self.eval.trajectories.unwrap_or(3),
            u_bound: self.eval.u_bound.unwrap_or(match &train.cost {
                CostSpec::SoftInput { u_bar, .. } => *u_bar,
                _ => 5.0,
            }),
            steady_window: self.eval.steady_window.unwrap_or(20),
        };

        let plant_res = ResolvedPlant { cartpole, channel, x0_box };
        let plant = build_plant(&plant_res)?;
        let k = self.policy.k.clone().unwrap_or_else(|| BASE_K.to_vec());
        let rho_hat = self.policy.rho_hat.unwrap_or_else(|| plant.rho_mid());
        let gamma_margin = self.policy.gamma_margin.unwrap_or(0.95);
        let alpha_grid = self.policy.alpha_grid.unwrap_or(50);
        let gamma = match self.policy.gamma {
            Some(g) => g,
            None => {
                if k.len() != plant.n_x() * plant.n_u() {
                    return Err(Error::Config(format!("policy.k has {} entries, expected {}", k.len(), plant.n_x())));
                }
                let base = BaseController::from_row(&k);
                match compute_alpha(&plant, &base, rho_hat, alpha_grid) {
                    Ok(alpha) => gamma_from_alpha(alpha, gamma_margin)
                        .map_err(|e| Error::Config(format!("policy.gamma_margin: {e}")))?,
                    Err(Error::Unstable(_)) if exp == ExperimentKind::Verify => f64::NAN,
                    Err(e) => return Err(e),
                }
            }
        };
        let policy = ResolvedPolicy {
            structure: self.policy.structure.unwrap_or(Structure::Youla),
            k,
            rho_hat,
            nominal_init: self.policy.nominal_init.unwrap_or_default(),
            gamma,
            gamma_margin,
            alpha_grid,
        };

        let output_dir = match &ov.output_dir {
            Some(p) => p.to_string_lossy().into_owned(),
            None => self.output_dir.clone().unwrap_or_else(|| format!("runs/{}", exp.name())),
        };
        let r = ResolvedExperiment {
            experiment: exp,
            seed,
            scale,
            output_dir,
            plant: plant_res,
            policy,
            model,
            train,
            eval,
        };
        r.validate()?;
        Ok(r)
    }
}

fn build_plant(p: &ResolvedPlant) -> Result<UncertainPlant> {
    p.cartpole.validate().map_err(|e| Error::Config(format!("plant.cartpole: {e}")))?;
    if p.x0_box.dim() != 4 || p.x0_box.lo.iter().zip(&p.x0_box.hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::Config("plant.x0_box must be a 4-dimensional box with lo <= hi".into()));
    }
    UncertainPlant::cartpole(p.cartpole, p.channel)?.with_x0_set(p.x0_box.clone())
}

impl ResolvedExperiment {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.policy.k.len() != 4 {
            return bad(format!("policy.k has {} entries, expected 4", self.policy.k.len()));
        }
        if self.experiment != ExperimentKind::Verify && !(self.policy.gamma > 0.0) {
            return bad(format!("policy.gamma must be positive, got {}", self.policy.gamma));
        }
        let (lo, hi) = self.plant.cartpole.mp_range;
        if !(self.policy.rho_hat >= lo && self.policy.rho_hat <= hi) {
            return bad(format!("policy.rho_hat {} lies outside [{lo}, {hi}]", self.policy.rho_hat));
        }
        if self.model.kind == ModelKind::Ren && self.model.n_v == 0 {
            return bad("model.n_v must be positive for kind = \"ren\"; use \"linear_ren\"".into());
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if !self.eval.shift.is_empty() && self.eval.shift.len() != 4 {
            return bad("eval.shift must have 4 entries".into());
        }
        if self.eval.m == 0 || self.eval.t == 0 || self.eval.bins == 0 {
            return bad("eval.m, eval.t and eval.bins must be positive".into());
        }
        if self.eval.steady_window == 0 || self.eval.steady_window > self.eval.t + 1 {
            return bad("eval.steady_window must lie in [1, eval.t + 1]".into());
        }
        self.train.cost.validate(4).map_err(|e| Error::Config(format!("train.cost: {e}")))?;
        for arm in self.arms() {
            self.train_config(&arm).validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn plant(&self) -> Result<UncertainPlant> {
        build_plant(&self.plant)
    }

    /// Policies trained by this experiment.
    pub fn arms(&self) -> Vec<Arm> {
        let kind = self.model.kind;
        let structure = self.policy.structure;
        match self.experiment {
            ExperimentKind::Verify => Vec::new(),
            ExperimentKind::CtrlVsYoula => vec![Arm::new(Structure::Youla, kind), Arm::new(Structure::Ctrl, kind)],
            ExperimentKind::SoftInput => {
                vec![Arm::new(structure, kind), Arm::new(structure, ModelKind::LinearRen)]
            }
            _ => vec![Arm::new(structure, kind)],
        }
    }

    pub fn model_spec(&self, kind: ModelKind) -> ModelSpec {
        let m = &self.model;
        let iqc = IqcSpec::Lipschitz { gamma: self.policy.gamma };
        match kind {
            ModelKind::Ren => ModelSpec::Ren { dims: RenDims::new(m.n_x, m.n_v, 4, 1), iqc, acyclic: m.acyclic },
            ModelKind::LinearRen => ModelSpec::Ren { dims: RenDims::new(m.n_x, 0, 4, 1), iqc, acyclic: m.acyclic },
            ModelKind::RnnRelu => ModelSpec::Rnn { activation: Activation::Relu, hidden: m.hidden, n_in: 4, n_out: 1 },
            ModelKind::RnnTanh => ModelSpec::Rnn { activation: Activation::Tanh, hidden: m.hidden, n_in: 4, n_out: 1 },
            ModelKind::Lstm => ModelSpec::Lstm { hidden: m.hidden, n_in: 4, n_out: 1 },
        }
    }

    pub fn policy_spec(&self, arm: &Arm) -> PolicySpec {
        PolicySpec {
            structure: arm.structure,
            k: self.policy.k.clone(),
            rho_hat: self.policy.rho_hat,
            nominal_init: self.policy.nominal_init,
            reference_dim: 0,
            model: self.model_spec(arm.kind),
        }
    }

    pub fn train_config(&self, arm: &Arm) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr_schedule: self.train.lr_schedule.clone(),
            m_train: self.train.m,
            t_train: self.train.t,
            optimizer: self.train.optimizer,
            seed: self.seed,
            policy: self.policy_spec(arm),
            cost: self.train.cost.clone(),
            disturbance: self.train.disturbance.clone(),
            eval_every: self.train.eval_every,
            m_test: self.eval.m,
            t_test: self.eval.t,
            test_seed: self.eval.seed,
            test_bins: self.eval.bins,
            init_output_scale: self.model.init_output_scale,
        }
    }
}

/// One trained policy of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub structure: Structure,
    pub kind: ModelKind,
    pub label: String,
}

impl Arm {
    fn new(structure: Structure, kind: ModelKind) -> Self {
        let s = match structure {
            Structure::Youla => "youla",
            Structure::Ctrl => "ctrl",
        };
        let k = match kind {
            ModelKind::Ren => "ren",
            ModelKind::LinearRen => "linear_ren",
            ModelKind::RnnRelu => "rnn_relu",
            ModelKind::RnnTanh => "rnn_tanh",
            ModelKind::Lstm => "lstm",
        };
        Self { structure, kind, label: format!("{s}-{k}") }
    }
}

/// Trajectory statistics shared by trained policies and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Fraction of steps with `|u| > u_bound`.
    pub u_exceed_fraction: f64,
    /// The same fraction over the second half of each trajectory.
    pub u_exceed_fraction_second_half: f64,
    /// Mean over scenarios of the average `|x_t|` over the last window.
    #[serde(with = "crate::jsonnum")]
    pub steady_state_norm: f64,
}

pub fn trajectory_stats(rolls: &[Rollout], horizon: usize, u_bound: f64, window: usize) -> TrajectoryStats {
    let (mut n_all, mut hit_all, mut n_half, mut hit_half) = (0usize, 0usize, 0usize, 0usize);
    let mut ss = 0.0;
    let half = (horizon + 1) / 2;
    for r in rolls {
        for (t, u) in r.u.iter().enumerate() {
            let hit = u.iter().any(|v| v.abs() > u_bound);
            n_all += 1;
            hit_all += hit as usize;
            if t >= half {
                n_half += 1;
                hit_half += hit as usize;
            }
        }
        ss += if r.diverged() {
            f64::INFINITY
        } else {
            r.x[r.x.len() - window..].iter().map(|x| x.norm()).sum::<f64>() / window as f64
        };
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    TrajectoryStats {
        u_exceed_fraction: frac(hit_all, n_all),
        u_exceed_fraction_second_half: frac(hit_half, n_half),
        steady_state_norm: ss / rolls.len().max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub label: String,
    pub structure: Structure,
    pub model_kind: String,
    pub n_params: usize,
    pub certified: bool,
    #[serde(with = "crate::jsonnum")]
    pub initial_test_cost: f64,
    #[serde(with = "crate::jsonnum")]
    pub j_test: f64,
    #[serde(with = "crate::jsonnum")]
    pub best_test_cost: f64,
    #[serde(with = "crate::jsonnum::opt")]
    pub j_lqr_oracle: Option<f64>,
    #[serde(with = "crate::jsonnum")]
    pub j_robust: f64,
    #[serde(with = "crate::jsonnum::opt")]
    pub gap: Option<f64>,
    pub divergence_count: usize,
    pub diverged_epochs: Vec<usize>,
    #[serde(with = "crate::jsonnum::opt")]
    pub min_lmi_margin: Option<f64>,
    pub per_rho: Vec<RhoBin>,
    pub shifted_per_rho: Vec<RhoBin>,
    #[serde(with = "crate::jsonnum::vec")]
    pub contraction_lambdas: Vec<f64>,
    pub stats: TrajectoryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    #[serde(with = "crate::jsonnum")]
    pub j_robust: f64,
    #[serde(with = "crate::jsonnum::opt")]
    pub j_lqr_oracle: Option<f64>,
    pub per_rho: Vec<RhoBin>,
    pub shifted_per_rho: Vec<RhoBin>,
    pub stats: TrajectoryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub rho: f64,
    pub spectral_radius: f64,
    pub schur_stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub rho_hat: f64,
    pub all_stable: bool,
    #[serde(with = "crate::jsonnum")]
    pub beta: f64,
    #[serde(with = "crate::jsonnum::opt")]
    pub alpha: Option<f64>,
    #[serde(with = "crate::jsonnum::opt")]
    pub gamma: Option<f64>,
    pub thm1_holds: Option<bool>,
    #[serde(with = "crate::jsonnum::opt")]
    pub thm1_margin: Option<f64>,
    pub grid: Vec<GridPoint>,
}

/// Contents of `metrics.json`. Carries no wall-clock values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub scale: Scale,
    pub seed: u64,
    #[serde(with = "crate::jsonnum::opt")]
    pub alpha: Option<f64>,
    #[serde(with = "crate::jsonnum")]
    pub gamma: f64,
    pub rho_hat: f64,
    pub arms: Vec<ArmMetrics>,
    pub baseline: Option<BaselineMetrics>,
    pub verify: Option<VerifyReport>,
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: Metrics,
}

fn verify(cfg: &ResolvedExperiment, plant: &UncertainPlant) -> Result<VerifyReport> {
    let base = BaseController::from_row(&cfg.policy.k);
    let report = verify_base_controller(plant, &base, cfg.policy.alpha_grid)?;
    let grid = report
        .rho
        .iter()
        .zip(&report.spectral_radius)
        .zip(&report.schur_ok)
        .map(|((&rho, &sr), &ok)| GridPoint { rho, spectral_radius: sr, schur_stable: ok })
        .collect();
    let (alpha, gamma, thm1) = if report.all_stable() {
        let alpha = compute_alpha(plant, &base, cfg.policy.rho_hat, cfg.policy.alpha_grid)?;
        let gamma = if cfg.policy.gamma.is_finite() {
            cfg.policy.gamma
        } else {
            gamma_from_alpha(alpha, cfg.policy.gamma_margin)?
        };
        let n = plant.n_x();
        let m = plant.n_u();
        let iqc = PlantIqc::small_gain(alpha, n, m);
        let q_bar = DMatrix::identity(m, m) * (-1.0 / gamma);
        let s_bar = DMatrix::zeros(n, m);
        let r_bar = DMatrix::identity(n, n) * gamma;
        let thm1 = thm1_check(&iqc, &q_bar, &s_bar, &r_bar)?;
        (Some(alpha), Some(gamma), Some(thm1))
    } else {
        (None, None, None)
    };
    Ok(VerifyReport {
        rho_hat: cfg.policy.rho_hat,
        all_stable: report.all_stable(),
        beta: report.beta_achieved,
        alpha,
        gamma,
        thm1_holds: thm1.map(|t| t.holds),
        thm1_margin: thm1.map(|t| t.margin),
        grid,
    })
}

/// Human-readable summary of a verify report.
pub fn format_verify(v: &VerifyReport) -> String {
    let mut s = String::new();
    let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    s.push_str(&format!("rho_hat = {}\n", v.rho_hat));
    s.push_str(&format!("alpha   = {}\n", opt(v.alpha)));
    s.push_str(&format!("gamma   = {}\n", opt(v.gamma)));
    s.push_str(&format!("beta    = {:.6}\n", v.beta));
    if let (Some(h), Some(m)) = (v.thm1_holds, v.thm1_margin) {
        s.push_str(&format!("small-gain condition holds = {h} (margin {m:.3e})\n"));
    }
    s.push_str("      rho   spectral radius   stable\n");
    for g in &v.grid {
        s.push_str(&format!("{:9.4}   {:15.6}   {}\n", g.rho, g.spectral_radius, g.schur_stable));
    }
    s
}

struct ArmResult {
    metrics: ArmMetrics,
    history: Vec<EpochRecord>,
    rolls: Vec<Rollout>,
}

fn run_arm(
    cfg: &ResolvedExperiment,
    plant: &UncertainPlant,
    arm: &Arm,
    test: &ScenarioSet,
    ckpt_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<ArmResult> {
    let tc = cfg.train_config(arm);
    let header = CheckpointHeader::for_policy(&tc.policy);
    let every = cfg.train.checkpoint_every;
    let label = arm.label.clone();
    let out = train(plant, &tc, None, |rec, theta| {
        if let Some(t) = rec.test_cost {
            log(&format!(
                "[{label}] epoch {:>4}  train {:>12.5}  test {:>12.5}  lr {:.1e}",
                rec.epoch, rec.train_cost, t, rec.lr
            ));
        }
        if every > 0 && rec.epoch % every == 0 {
            let h = CheckpointHeader { epoch: Some(rec.epoch), ..header.clone() };
            save_checkpoint(ckpt_dir.join(format!("{label}-epoch{:05}.ckpt", rec.epoch)), &h, theta)?;
        }
        Ok(())
    })?;
    let h = CheckpointHeader { epoch: Some(cfg.train.epochs), ..header.clone() };
    save_checkpoint(ckpt_dir.join(format!("{label}-final.ckpt")), &h, &out.theta)?;

    let policy = tc.policy.build(plant, &out.theta)?;
    let horizon = cfg.eval.t;
    let rolls = rollouts(plant, &policy, test, horizon, &tc.cost)?;
    let ells: Vec<f64> = rolls.iter().map(|r| r.ell).collect();
    let j_test = ells.iter().sum::<f64>() / ells.len() as f64;
    let j_lqr_oracle = oracle(plant, test, horizon, &tc.cost)?;
    let base = BaseController::from_row(&cfg.policy.k);
    let j_robust = crate::eval::robust_baseline_cost(plant, &base, &test.scenarios, horizon, &tc.cost)?;
    let shifted_per_rho = if cfg.eval.shift.is_empty() {
        Vec::new()
    } else {
        shifted_eval(plant, &policy, &cfg.eval.shift, cfg.eval.m, horizon, cfg.eval.seed, &tc.cost, cfg.eval.bins)?
    };
    let contraction_lambdas = contraction_diagnostic(
        plant,
        &policy,
        &DisturbanceModel::None,
        cfg.eval.contraction_pairs,
        horizon,
        cfg.eval.seed,
    )?
    .into_iter()
    .map(|f| f.lambda)
    .collect();
    let metrics = ArmMetrics {
        label: arm.label.clone(),
        structure: arm.structure,
        model_kind: tc.policy.model.label().to_string(),
        n_params: tc.policy.model.n_params(),
        certified: tc.policy.model.is_certified(),
        initial_test_cost: out.initial_test_cost,
        j_test,
        best_test_cost: out.best_test_cost(),
        j_lqr_oracle,
        j_robust,
        gap: j_lqr_oracle.map(|o| performance_gap(j_test, o)),
        divergence_count: ells.iter().filter(|e| !e.is_finite()).count(),
        diverged_epochs: out.diverged_epochs.clone(),
        min_lmi_margin: out.min_lmi_margin(),
        per_rho: bin_by_rho(plant, &test.scenarios, &ells, cfg.eval.bins),
        shifted_per_rho,
        contraction_lambdas,
        stats: trajectory_stats(&rolls, horizon, cfg.eval.u_bound, cfg.eval.steady_window),
    };
    Ok(ArmResult { metrics, history: out.history, rolls })
}

fn rollouts(
    plant: &UncertainPlant,
    policy: &Policy,
    set: &ScenarioSet,
    horizon: usize,
    cost: &CostSpec,
) -> Result<Vec<Rollout>> {
    use rayon::prelude::*;
    set.scenarios.par_iter().map(|s| rollout(plant, policy, s, horizon, cost)).collect()
}

fn oracle(plant: &UncertainPlant, set: &ScenarioSet, horizon: usize, cost: &CostSpec) -> Result<Option<f64>> {
    match cost.quadratic_weights() {
        Some(_) => lqr_oracle_cost(plant, &set.scenarios, horizon, cost).map(Some),
        None => Ok(None),
    }
}

fn write_history(path: &Path, rows: &[(String, EpochRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arm", "epoch", "train_cost", "test_cost", "grad_norm", "lr", "lmi_margin", "diverged", "wall_ms"])?;
    let f = |v: f64| v.to_string();
    for (arm, r) in rows {
        w.write_record([
            arm.clone(),
            r.epoch.to_string(),
            f(r.train_cost),
            r.test_cost.map(f).unwrap_or_default(),
            f(r.grad_norm),
            f(r.lr),
            r.lmi_margin.map(f).unwrap_or_default(),
            r.diverged.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_trajectories(path: &Path, set: &ScenarioSet, groups: &[(String, &[Rollout])], count: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_x = set.scenarios.first().map_or(0, |s| s.x0.len());
    let n_w = set.scenarios.first().map_or(0, |s| s.w.first().map_or(0, Vec::len));
    let mut header = vec!["arm".to_string(), "scenario".into(), "rho".into(), "t".into()];
    header.extend((1..=n_x).map(|i| format!("x{i}")));
    header.push("u".into());
    header.extend((1..=n_w).map(|i| if n_w == 1 { "w".to_string() } else { format!("w{i}") }));
    w.write_record(&header)?;
    for (label, rolls) in groups {
        for (s, r) in set.scenarios.iter().zip(rolls.iter()).take(count) {
            for t in 0..r.x.len() {
                let mut row = vec![label.clone(), s.index.to_string(), s.rho.to_string(), t.to_string()];
                row.extend(r.x[t].iter().map(|v| v.to_string()));
                row.push(r.u[t][0].to_string());
                row.extend(r.w[t].iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs a resolved experiment and writes its artifacts under
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ResolvedExperiment, log: &mut dyn FnMut(&str)) -> Result<RunOutput> {
    cfg.validate()?;
    let plant = cfg.plant()?;
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let base = BaseController::from_row(&cfg.policy.k);
    let mut metrics = Metrics {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment,
        scale: cfg.scale,
        seed: cfg.seed,
        alpha: None,
        gamma: cfg.policy.gamma,
        rho_hat: cfg.policy.rho_hat,
        arms: Vec::new(),
        baseline: None,
        verify: None,
    };

    if cfg.experiment == ExperimentKind::Verify {
        let v = verify(cfg, &plant)?;
        metrics.alpha = v.alpha;
        if let Some(g) = v.gamma {
            metrics.gamma = g;
        }
        metrics.verify = Some(v);
    } else {
        metrics.alpha = Some(compute_alpha(&plant, &base, cfg.policy.rho_hat, cfg.policy.alpha_grid)?);
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        let arms = cfg.arms();
        let test = cfg.train_config(&arms[0]).test_set(&plant);
        let horizon = cfg.eval.t;
        let cost = &cfg.train.cost;

        let base_policy = Policy::Linear(base.clone());
        let base_rolls = rollouts(&plant, &base_policy, &test, horizon, cost)?;
        let base_ells: Vec<f64> = base_rolls.iter().map(|r| r.ell).collect();
        metrics.baseline = Some(BaselineMetrics {
            j_robust: base_ells.iter().sum::<f64>() / base_ells.len() as f64,
            j_lqr_oracle: oracle(&plant, &test, horizon, cost)?,
            per_rho: bin_by_rho(&plant, &test.scenarios, &base_ells, cfg.eval.bins),
            shifted_per_rho: if cfg.eval.shift.is_empty() {
                Vec::new()
            } else {
                shifted_eval(&plant, &base_policy, &cfg.eval.shift, cfg.eval.m, horizon, cfg.eval.seed, cost, cfg.eval.bins)?
            },
            stats: trajectory_stats(&base_rolls, horizon, cfg.eval.u_bound, cfg.eval.steady_window),
        });

        let mut history = Vec::new();
        let mut results = Vec::new();
        for arm in &arms {
            let r = run_arm(cfg, &plant, arm, &test, &ckpt_dir, log)?;
            history.extend(r.history.iter().cloned().map(|h| (arm.label.clone(), h)));
            metrics.arms.push(r.metrics.clone());
            results.push(r);
        }
        write_history(&dir.join("history.csv"), &history)?;
        let mut groups: Vec<(String, &[Rollout])> =
            results.iter().map(|r| (r.metrics.label.clone(), r.rolls.as_slice())).collect();
        groups.push(("robust".into(), base_rolls.as_slice()));
        write_trajectories(&dir.join("trajectories.csv"), &test, &groups, cfg.eval.trajectories)?;
    }
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    Ok(RunOutput { dir, metrics })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub arm: String,
    pub model: String,
    pub n_params: usize,
    pub j_test: f64,
    pub j_lqr_oracle: Option<f64>,
    pub j_robust: f64,
    pub gap: Option<f64>,
    pub divergence_count: usize,
}

pub fn load_metrics(dir: &Path) -> Result<Metrics> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: cannot read metrics.json: {e}", dir.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::Config(format!(
                "{}: schema_version {:?} does not match {SCHEMA_VERSION}",
                dir.display(),
                other
            )))
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Rows for every trained arm of every run; gaps are recomputed from the
/// stored costs.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if dirs.is_empty() {
        return Err(Error::Config("compare needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for d in dirs {
        let m = load_metrics(d)?;
        for a in &m.arms {
            rows.push(CompareRow {
                run: d.display().to_string(),
                arm: a.label.clone(),
                model: a.model_kind.clone(),
                n_params: a.n_params,
                j_test: a.j_test,
                j_lqr_oracle: a.j_lqr_oracle,
                j_robust: a.j_robust,
                gap: a.j_lqr_oracle.map(|o| performance_gap(a.j_test, o)),
                divergence_count: a.divergence_count,
            });
        }
    }
    Ok(rows)
}

pub fn format_compare(rows: &[CompareRow]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let mut s = format!(
        "{:<28} {:<18} {:<11} {:>9} {:>12} {:>12} {:>12} {:>10} {:>5}\n",
        "run", "arm", "model", "params", "J_test", "J_lqr", "J_robust", "gap", "div"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:<18} {:<11} {:>9} {:>12.6} {:>12} {:>12.6} {:>10} {:>5}\n",
            r.run,
            r.arm,
            r.model,
            r.n_params,
            r.j_test,
            opt(r.j_lqr_oracle),
            r.j_robust,
            opt(r.gap),
            r.divergence_count
        ));
    }
    let mut ranked: Vec<&CompareRow> = rows.iter().filter(|r| r.gap.is_some_and(f64::is_finite)).collect();
    ranked.sort_by(|a, b| a.gap.partial_cmp(&b.gap).expect("finite gaps"));
    if !ranked.is_empty() {
        let order: Vec<String> = ranked.iter().map(|r| format!("{} ({})", r.arm, r.run)).collect();
        s.push_str(&format!("gap ordering: {}\n", order.join(" < ")));
    }
    s
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of a checkpointed policy, for reuse outside the runner.
pub fn final_checkpoint_path(run_dir: &Path, arm_label: &str) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{arm_label}-final.ckpt"))
}

use youla_ren::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use youla_ren::eval::test_cost;
use youla_ren::experiment::{ExperimentConfig, Overrides, ResolvedExperiment};
use youla_ren::plant::{DisturbanceModel, ScenarioSet};
use youla_ren::train::{empirical_cost, rollout, train, EpochRecord, TrainOutcome};

fn desk(extra: &str) -> ResolvedExperiment {
    let text = format!("experiment = \"quadratic_comparison\"\nseed = 3\n{extra}");
    ExperimentConfig::from_toml(&text).unwrap().resolve(&Overrides::default()).unwrap()
}

fn run(cfg: &ResolvedExperiment) -> TrainOutcome {
    let arm = &cfg.arms()[0];
    train(&cfg.plant().unwrap(), &cfg.train_config(arm), None, |_, _| Ok(())).unwrap()
}

fn strip_wall(h: &[EpochRecord]) -> Vec<EpochRecord> {
    h.iter().map(|r| EpochRecord { wall_ms: 0.0, ..r.clone() }).collect()
}

#[test]
fn empirical_cost_averages_rollouts() {
    let cfg = desk("");
    let plant = cfg.plant().unwrap();
    let tc = cfg.train_config(&cfg.arms()[0]);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let theta = tc.policy.model.init_theta(0.1, &mut rng).unwrap();
    let policy = tc.policy.build(&plant, &theta).unwrap();
    let set = ScenarioSet::sample(&plant, &DisturbanceModel::None, 40, 2, 77);
    let ells: Vec<f64> = set.scenarios.iter().map(|s| rollout(&plant, &policy, s, 40, &tc.cost).unwrap().ell).collect();
    let one = empirical_cost(&plant, &policy, &set.scenarios[..1], 40, &tc.cost).unwrap();
    assert_eq!(one, ells[0]);
    let two = empirical_cost(&plant, &policy, &set.scenarios, 40, &tc.cost).unwrap();
    assert!((two - 0.5 * (ells[0] + ells[1])).abs() <= 1e-14 * two);
    let same = vec![set.scenarios[1].clone(); 5];
    let j = empirical_cost(&plant, &policy, &same, 40, &tc.cost).unwrap();
    assert!((j - ells[1]).abs() <= 1e-14 * j);
}

#[test]
fn thirty_epochs_reduce_test_cost() {
    let cfg = desk("[train]\nepochs = 30\n");
    let out = run(&cfg);
    assert_eq!(out.history.len(), 30);
    let last = out.history.last().unwrap().test_cost.unwrap();
    assert!(last < out.initial_test_cost, "{last} vs {}", out.initial_test_cost);
    assert!(out.history.iter().all(|r| r.lmi_margin.unwrap() > 0.0));
}

#[test]
fn same_seed_gives_identical_history() {
    let cfg = desk("[train]\nepochs = 5\n");
    let (a, b) = (run(&cfg), run(&cfg));
    assert_eq!(strip_wall(&a.history), strip_wall(&b.history));
    assert!(a.theta.iter().zip(b.theta.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn lstm_and_rnn_arms_train_without_certificates() {
    for kind in ["lstm", "rnn_tanh"] {
        let cfg = desk(&format!("[model]\nkind = \"{kind}\"\nhidden = 8\n[train]\nepochs = 3\n"));
        let out = run(&cfg);
        assert!(out.history.iter().all(|r| r.lmi_margin.is_none()));
    }
}

#[test]
fn checkpoint_rebuilds_the_same_policy() {
    let cfg = desk("[train]\nepochs = 3\n");
    let out = run(&cfg);
    let tc = cfg.train_config(&cfg.arms()[0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&path, &CheckpointHeader::for_policy(&tc.policy), &out.theta).unwrap();
    let (header, theta) = load_checkpoint(&path).unwrap();
    let plant = cfg.plant().unwrap();
    let spec = header.policy.unwrap();
    assert_eq!(spec, tc.policy);
    let j1 = test_cost(&plant, &tc.policy.build(&plant, &out.theta).unwrap(), 10, 50, 5, &tc.cost).unwrap();
    let j2 = test_cost(&plant, &spec.build(&plant, &theta).unwrap(), 10, 50, 5, &tc.cost).unwrap();
    assert_eq!(j1.to_bits(), j2.to_bits());
    assert!(load_checkpoint(dir.path().join("missing.ckpt")).is_err());
}

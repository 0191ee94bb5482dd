use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use youla_ren::baselines::{Activation, RnnParams};
use youla_ren::eval::{
    contraction_diagnostic, lqr_oracle_cost, robust_baseline_cost, shifted_eval, test_cost, test_set,
};
use youla_ren::lti::{hinf_norm, HinfMethod};
use youla_ren::model::ModelSpec;
use youla_ren::plant::{CartPoleConfig, DisturbanceChannel, DisturbanceModel, ScenarioSet, UncertainPlant};
use youla_ren::policy::{
    compute_alpha, gamma_from_alpha, gdelta_realization, thm1_check, verify_base_controller, BaseController,
    NominalInit, Policy, PolicySpec, PlantIqc, Structure, BASE_K,
};
use youla_ren::ren::{IqcSpec, RenDims};
use youla_ren::train::{empirical_cost, rollout, CostSpec};

fn plant() -> UncertainPlant {
    UncertainPlant::cartpole(CartPoleConfig::default(), DisturbanceChannel::StateAdditive).unwrap()
}

fn youla_spec(gamma: f64, init: NominalInit) -> PolicySpec {
    PolicySpec {
        structure: Structure::Youla,
        k: BASE_K.to_vec(),
        rho_hat: 1.1,
        nominal_init: init,
        reference_dim: 0,
        model: ModelSpec::Ren { dims: RenDims::new(4, 8, 4, 1), iqc: IqcSpec::Lipschitz { gamma }, acyclic: true },
    }
}

/// Youla policy whose Q-parameter output is identically zero.
fn zero_q(p: &UncertainPlant, init: NominalInit) -> Policy {
    let spec = youla_spec(10.0, init);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let theta = spec.model.init_theta(0.0, &mut rng).unwrap();
    spec.build(p, &theta).unwrap()
}

#[test]
fn zero_q_at_nominal_mass_is_the_base_controller() {
    let p = plant();
    let policy = zero_q(&p, NominalInit::Observed);
    let real = p.realize(1.1).unwrap();
    let mut x = DVector::from_vec(vec![1.0, -0.2, 0.1, 0.3]);
    let mut ps = policy.initial_state(&x);
    let base = BaseController::standard();
    for _ in 0..50 {
        assert!((&x - &ps.x_hat).amax() <= 1e-12 * (1.0 + x.amax()));
        let (next, u) = policy.step(&ps, &x, None).unwrap();
        assert_eq!(u, base.control(&x));
        x = real.step(&x, &u, &DVector::zeros(4));
        ps = next;
    }
}

#[test]
fn mismatch_shows_up_in_the_innovation() {
    let p = plant();
    let policy = zero_q(&p, NominalInit::Observed);
    let real = p.realize(2.0).unwrap();
    let mut x = DVector::from_vec(vec![1.0, 0.0, 0.1, 0.0]);
    let mut ps = policy.initial_state(&x);
    let mut seen = 0.0f64;
    for _ in 0..20 {
        let (next, u) = policy.step(&ps, &x, None).unwrap();
        x = real.step(&x, &u, &DVector::zeros(4));
        ps = next;
        seen = seen.max((&x - &ps.x_hat).amax());
    }
    assert!(seen > 0.0);
}

#[test]
fn q_parameter_sees_only_the_innovation() {
    let p = plant();
    let spec = youla_spec(10.0, NominalInit::Observed);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = spec.model.init_theta(1.0, &mut rng).unwrap();
    let policy = spec.build(&p, &theta).unwrap();
    let x = DVector::from_vec(vec![0.3, 0.1, -0.05, 0.2]);
    let ps = policy.initial_state(&x);
    let offset = DVector::from_vec(vec![4.0, -1.0, 0.5, 2.0]);
    let shifted = youla_ren::policy::PolicyState { x_hat: &ps.x_hat + &offset, q_state: ps.q_state.clone() };
    let base = BaseController::standard();
    let (_, u1) = policy.step(&ps, &x, None).unwrap();
    let (_, u2) = policy.step(&shifted, &(&x + &offset), None).unwrap();
    let v1 = &u1 - base.control(&x);
    let v2 = &u2 - base.control(&(&x + &offset));
    assert!((v1 - v2).amax() < 1e-12);
}

#[test]
fn zero_c_parameter_is_the_base_controller() {
    let p = plant();
    let mut spec = youla_spec(10.0, NominalInit::Zero);
    spec.structure = Structure::Ctrl;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let theta = spec.model.init_theta(0.0, &mut rng).unwrap();
    let policy = spec.build(&p, &theta).unwrap();
    let x = DVector::from_vec(vec![2.0, 0.1, -0.3, 0.0]);
    let (_, u) = policy.step(&policy.initial_state(&x), &x, None).unwrap();
    assert_eq!(u, BaseController::standard().control(&x));
}

#[test]
fn discrepancy_matches_two_simulated_loops() {
    let p = plant();
    let base = BaseController::standard();
    let sys = gdelta_realization(&p, &base, 0.4, 1.1).unwrap();
    let (a1, b1) = base.closed_loop(&p, 0.4).unwrap();
    let (a2, b2) = base.closed_loop(&p, 1.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut x, mut x1, mut x2) = (DVector::zeros(8), DVector::zeros(4), DVector::zeros(4));
    for _ in 0..100 {
        let v = DVector::from_fn(1, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        x = &sys.a * &x + &sys.b * &v;
        x1 = &a1 * &x1 + &b1 * &v;
        x2 = &a2 * &x2 + &b2 * &v;
        assert!((&sys.c * &x - (&x1 - &x2)).amax() < 1e-10);
    }
    let nominal = gdelta_realization(&p, &base, 1.1, 1.1).unwrap();
    assert!(hinf_norm(&nominal, HinfMethod::Bisect(1e-9)).unwrap() < 1e-12);
    for rho in [0.2, 2.0] {
        let g = hinf_norm(&gdelta_realization(&p, &base, rho, 1.1).unwrap(), HinfMethod::Bisect(1e-8)).unwrap();
        assert!(g.is_finite() && g > 0.0);
    }
}

#[test]
fn alpha_grid_behaviour() {
    let p = plant();
    let base = BaseController::standard();
    let single = UncertainPlant { rho_set: (1.1, 1.1), ..p.clone() };
    assert_eq!(compute_alpha(&single, &base, 1.1, 5).unwrap(), 0.0);
    let a50 = compute_alpha(&p, &base, 1.1, 50).unwrap();
    let a100 = compute_alpha(&p, &base, 1.1, 100).unwrap();
    assert!((a100 - a50).abs() / a50 < 0.05, "{a50} {a100}");
    assert!((0.0203..0.0205).contains(&a50), "{a50}");
}

#[test]
fn gamma_examples_and_small_gain_consistency() {
    assert!((gamma_from_alpha(1.0 / 60.0, 1.0 - 1e-6).unwrap() - 60.0).abs() < 1e-4);
    assert_eq!(gamma_from_alpha(2.0, 0.5).unwrap(), 0.25);
    let alpha = compute_alpha(&plant(), &BaseController::standard(), 1.1, 50).unwrap();
    for margin in [0.1, 0.5, 0.95, 0.999] {
        let g = gamma_from_alpha(alpha, margin).unwrap();
        assert!(g * alpha < 1.0);
        let iqc = PlantIqc::small_gain(alpha, 4, 1);
        let r = thm1_check(
            &iqc,
            &(DMatrix::identity(1, 1) * (-1.0 / g)),
            &DMatrix::zeros(4, 1),
            &(DMatrix::identity(4, 4) * g),
        )
        .unwrap();
        assert!(r.holds, "margin {margin}: {}", r.margin);
    }
}

#[test]
fn thm1_trivial_case() {
    let iqc = PlantIqc {
        q_xx: -DMatrix::identity(2, 2),
        q_zz: DMatrix::zeros(0, 0),
        s_vx: DMatrix::zeros(1, 2),
        s_wz: DMatrix::zeros(0, 0),
        r_vv: DMatrix::zeros(1, 1),
        r_ww: DMatrix::zeros(0, 0),
    };
    let r = thm1_check(&iqc, &DMatrix::zeros(1, 1), &DMatrix::zeros(2, 1), &DMatrix::zeros(2, 2)).unwrap();
    // zero lower-right block puts the largest eigenvalue at 0
    assert!(!r.holds && r.margin == 0.0);
    let r = thm1_check(&iqc, &-DMatrix::identity(1, 1), &DMatrix::zeros(2, 1), &DMatrix::zeros(2, 2)).unwrap();
    assert!(r.holds && (r.margin + 1.0).abs() < 1e-14);
}

#[test]
fn base_controller_report() {
    let p = plant();
    let rep = verify_base_controller(&p, &BaseController::standard(), 50).unwrap();
    assert!(rep.all_stable());
    assert!(rep.beta_achieved.is_finite() && rep.beta_achieved > 0.0);
    let zero = verify_base_controller(&p, &BaseController::from_row(&[0.0; 4]), 50).unwrap();
    assert_eq!(zero.unstable.len(), 50);
    assert!(zero.beta_achieved.is_infinite());
}

#[test]
fn zero_q_cost_equals_robust_baseline() {
    let p = plant();
    let policy = zero_q(&p, NominalInit::Zero);
    let cost = CostSpec::standard_quadratic();
    let set = test_set(&p, &DisturbanceModel::None, 20, 60, 4);
    let j = empirical_cost(&p, &policy, &set.scenarios, 60, &cost).unwrap();
    let jr = robust_baseline_cost(&p, &BaseController::standard(), &set.scenarios, 60, &cost).unwrap();
    assert!((j - jr).abs() <= 1e-12 * jr);
    let jo = lqr_oracle_cost(&p, &set.scenarios, 60, &cost).unwrap();
    assert!(jo < jr);
}

#[test]
fn robust_baseline_is_bounded_across_the_grid() {
    let p = plant();
    let policy = zero_q(&p, NominalInit::Zero);
    let cost = CostSpec::standard_quadratic();
    let set = ScenarioSet::sample(&p, &DisturbanceModel::None, 200, 1, 3);
    for rho in p.rho_grid(50) {
        let mut s = set.scenarios[0].clone();
        s.rho = rho;
        let r = rollout(&p, &policy, &s, 200, &cost).unwrap();
        assert!(!r.diverged() && r.ell.is_finite());
        assert!(r.x.last().unwrap().amax() < 1e-2);
    }
}

#[test]
fn shifted_curve_examples() {
    let p = plant();
    let spec = youla_spec(40.0, NominalInit::Zero);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = spec.model.init_theta(0.1, &mut rng).unwrap();
    let policy = spec.build(&p, &theta).unwrap();
    let cost = CostSpec::standard_quadratic();
    let base = shifted_eval(&p, &policy, &[0.0; 4], 20, 50, 12345, &cost, 10).unwrap();
    let mean: f64 = base.iter().map(|b| b.mean_cost * b.count as f64).sum::<f64>() / 20.0;
    let direct = test_cost(&p, &policy, 20, 50, 12345, &cost).unwrap();
    assert!((mean - direct).abs() <= 1e-9 * direct);
    let shifted = shifted_eval(&p, &policy, &[10.0, 0.0, 0.0, 0.0], 20, 50, 12345, &cost, 10).unwrap();
    assert_eq!(shifted.len(), 10);
    assert!((shifted[0].lo - 0.2).abs() < 1e-12 && (shifted[9].hi - 2.0).abs() < 1e-12);
    assert!(shifted.iter().all(|b| b.mean_cost.is_finite()));
}

#[test]
fn certified_youla_pairs_contract() {
    let p = plant();
    let alpha = compute_alpha(&p, &BaseController::standard(), 1.1, 50).unwrap();
    let spec = youla_spec(gamma_from_alpha(alpha, 0.95).unwrap(), NominalInit::Zero);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let theta = spec.model.init_theta(1.0, &mut rng).unwrap();
    let policy = spec.build(&p, &theta).unwrap();
    let fits = contraction_diagnostic(&p, &policy, &DisturbanceModel::None, 100, 300, 1).unwrap();
    assert_eq!(fits.len(), 100);
    assert!(fits.iter().all(|f| f.lambda < 1.0));
}

#[test]
fn expanding_relu_rnn_breaks_contraction() {
    let p = plant();
    let hidden = 6;
    let mut rnn = RnnParams::zeros(Activation::Relu, hidden, 4, 1);
    rnn.w_h = DMatrix::identity(hidden, hidden) * 2.0;
    rnn.w_u = DMatrix::from_fn(hidden, 4, |i, j| if i % 4 == j { 1.0 } else { 0.0 });
    rnn.w_y = DMatrix::from_element(1, hidden, 1e-3);
    let spec = PolicySpec {
        structure: Structure::Youla,
        k: BASE_K.to_vec(),
        rho_hat: 1.1,
        nominal_init: NominalInit::Zero,
        reference_dim: 0,
        model: ModelSpec::Rnn { activation: Activation::Relu, hidden, n_in: 4, n_out: 1 },
    };
    let policy = spec.build(&p, &DVector::from_vec(rnn.flatten())).unwrap();
    let fits = contraction_diagnostic(&p, &policy, &DisturbanceModel::None, 20, 300, 1).unwrap();
    assert!(fits.iter().any(|f| f.lambda >= 1.0));
}

#[test]
fn identical_initial_states_are_skipped() {
    let p = plant();
    let narrow = p.clone().with_x0_set(youla_ren::plant::StateBox::symmetric(&[0.0; 4])).unwrap();
    let policy = zero_q(&narrow, NominalInit::Zero);
    let fits = contraction_diagnostic(&narrow, &policy, &DisturbanceModel::None, 5, 50, 1).unwrap();
    assert!(fits.is_empty());
}

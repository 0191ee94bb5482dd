//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use youla_ren::experiment::{run_experiment, ExperimentConfig, Overrides, Scale};
use youla_ren::lti::{hinf_norm, HinfMethod, StateSpace, TimeDomain};
use youla_ren::model::ModelSpec;
use youla_ren::plant::{CartPoleConfig, DisturbanceChannel, DisturbanceModel, ScenarioSet, UncertainPlant};
use youla_ren::policy::{compute_alpha, BaseController, NominalInit, PolicySpec, Structure, BASE_K};
use youla_ren::ren::{direct_construct, empirical_gain, lmi_certificate, ren_step, IqcSpec, RenDims, RenFreeParams, RenState, RenWeights};
use youla_ren::train::{empirical_cost, CostSpec};
use youla_ren::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn cost_by_name(name: &str) -> PyResult<CostSpec> {
    Ok(match name {
        "quadratic" => CostSpec::standard_quadratic(),
        "soft_input" => CostSpec::standard_soft_input(),
        "economic" => CostSpec::Economic,
        "weighted_l1" => CostSpec::standard_weighted_l1(),
        other => return Err(PyValueError::new_err(format!("unknown cost {other:?}"))),
    })
}

/// Cart-pole with uncertain pole mass.
#[pyclass(name = "CartPole", frozen)]
struct PyCartPole {
    inner: UncertainPlant,
}

#[pymethods]
impl PyCartPole {
    #[new]
    #[pyo3(signature = (disturbance_on_input = false))]
    fn new(disturbance_on_input: bool) -> PyResult<Self> {
        let channel =
            if disturbance_on_input { DisturbanceChannel::InputAdditive } else { DisturbanceChannel::StateAdditive };
        Ok(Self { inner: UncertainPlant::cartpole(CartPoleConfig::default(), channel).map_err(py_err)? })
    }

    #[getter]
    fn rho_range(&self) -> (f64, f64) {
        self.inner.rho_set
    }

    #[getter]
    fn n_x(&self) -> usize {
        self.inner.n_x()
    }

    /// Discrete `(A, B)` at pole mass `rho`.
    fn realize(&self, rho: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let r = self.inner.realize(rho).map_err(py_err)?;
        Ok((to_rows(&r.a), to_rows(&r.b)))
    }

    /// Small-gain level of the base loop around the nominal mass.
    #[pyo3(signature = (grid = 50))]
    fn alpha(&self, grid: usize) -> PyResult<f64> {
        compute_alpha(&self.inner, &BaseController::standard(), self.inner.rho_mid(), grid).map_err(py_err)
    }
}

/// Recurrent equilibrium network built from free parameters.
#[pyclass(name = "Ren")]
struct PyRen {
    params: RenFreeParams,
    weights: RenWeights,
}

#[pymethods]
impl PyRen {
    #[new]
    #[pyo3(signature = (n_x, n_v, n_u, n_y, gamma, acyclic = true, seed = 0, scale = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_x: usize,
        n_v: usize,
        n_u: usize,
        n_y: usize,
        gamma: f64,
        acyclic: bool,
        seed: u64,
        scale: f64,
    ) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = RenDims::new(n_x, n_v, n_u, n_y);
        let params =
            RenFreeParams::init(dims, IqcSpec::Lipschitz { gamma }, acyclic, scale, &mut rng).map_err(py_err)?;
        let weights = direct_construct(&params).map_err(py_err)?;
        Ok(Self { params, weights })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.theta.len()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.params.theta.iter().copied().collect()
    }

    #[setter]
    fn set_theta(&mut self, theta: Vec<f64>) -> PyResult<()> {
        let p = &self.params;
        let params = RenFreeParams::new(DVector::from_vec(theta), p.dims, p.iqc.clone(), p.acyclic).map_err(py_err)?;
        self.weights = direct_construct(&params).map_err(py_err)?;
        self.params = params;
        Ok(())
    }

    /// Smallest eigenvalue of the dissipation LMI; positive when certified.
    fn certificate_margin(&self) -> PyResult<f64> {
        lmi_certificate(&self.weights, &self.params.iqc).map_err(py_err)
    }

    fn step(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (s, y) =
            ren_step(&self.weights, &RenState { x: DVector::from_vec(x) }, &DVector::from_vec(u)).map_err(py_err)?;
        Ok((s.x.iter().copied().collect(), y.iter().copied().collect()))
    }

    #[pyo3(signature = (n_pairs = 100, horizon = 50, seed = 0))]
    fn empirical_gain(&self, n_pairs: usize, horizon: usize, seed: u64) -> PyResult<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        empirical_gain(&self.weights, n_pairs, horizon, &mut rng).map_err(py_err)
    }
}

/// Youla or direct-feedback REN policy around the fixed base gain.
#[pyclass(name = "Policy")]
struct PyPolicy {
    spec: PolicySpec,
    theta: DVector<f64>,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (gamma, n_x = 8, n_v = 64, structure = "youla", seed = 0, output_scale = 0.1))]
    fn new(gamma: f64, n_x: usize, n_v: usize, structure: &str, seed: u64, output_scale: f64) -> PyResult<Self> {
        let structure = match structure {
            "youla" => Structure::Youla,
            "ctrl" => Structure::Ctrl,
            s => return Err(PyValueError::new_err(format!("unknown structure {s:?}"))),
        };
        let spec = PolicySpec {
            structure,
            k: BASE_K.to_vec(),
            rho_hat: 1.1,
            nominal_init: NominalInit::Zero,
            reference_dim: 0,
            model: ModelSpec::Ren {
                dims: RenDims::new(n_x, n_v, 4, 1),
                iqc: IqcSpec::Lipschitz { gamma },
                acyclic: true,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = spec.model.init_theta(output_scale, &mut rng).map_err(py_err)?;
        Ok(Self { spec, theta })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Mean cost over `m` sampled scenarios of length `horizon`.
    #[pyo3(signature = (plant, m = 10, horizon = 60, seed = 0, cost = "quadratic"))]
    fn cost(&self, plant: &PyCartPole, m: usize, horizon: usize, seed: u64, cost: &str) -> PyResult<f64> {
        let cost = cost_by_name(cost)?;
        let policy = self.spec.build(&plant.inner, &self.theta).map_err(py_err)?;
        let set = ScenarioSet::sample(&plant.inner, &DisturbanceModel::None, horizon, m, seed);
        empirical_cost(&plant.inner, &policy, &set.scenarios, horizon, &cost).map_err(py_err)
    }
}

/// H-infinity norm of a discrete system.
#[pyfunction]
#[pyo3(signature = (a, b, c, d, ts = 1.0, tol = 1e-6))]
fn hinf(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>, d: Vec<Vec<f64>>, ts: f64, tol: f64) -> PyResult<f64> {
    let sys = StateSpace::new(to_matrix(&a)?, to_matrix(&b)?, to_matrix(&c)?, to_matrix(&d)?, TimeDomain::Discrete { ts })
        .map_err(py_err)?;
    hinf_norm(&sys, HinfMethod::Bisect(tol)).map_err(py_err)
}

/// Runs an experiment config and returns `metrics.json` as a string.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, scale = None, seed = None))]
fn run(py: Python<'_>, config_toml: &str, out_dir: PathBuf, scale: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let ov = Overrides {
        scale: scale.map(|s| s.parse::<Scale>()).transpose().map_err(py_err)?,
        seed,
        output_dir: Some(out_dir),
    };
    let cfg = ExperimentConfig::from_toml(config_toml).and_then(|c| c.resolve(&ov)).map_err(py_err)?;
    let out = py.detach(|| run_experiment(&cfg, &mut |_| {})).map_err(py_err)?;
    serde_json::to_string_pretty(&out.metrics).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn youla_ren_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCartPole>()?;
    m.add_class::<PyRen>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(hinf, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

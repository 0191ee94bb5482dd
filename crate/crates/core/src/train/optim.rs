use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        Self { m: DVector::zeros(n), v: DVector::zeros(n), t: 0 }
    }
}

/// One in-place update of `theta` along the gradient `g`.
pub fn optimizer_step(
    kind: &OptimizerKind,
    theta: &mut DVector<f64>,
    g: &DVector<f64>,
    state: &mut OptState,
    lr: f64,
) -> Result<()> {
    if theta.len() != g.len() || state.m.len() != g.len() {
        return dim_err(format!("optimizer got theta {}, gradient {}, state {}", theta.len(), g.len(), state.m.len()));
    }
    state.t += 1;
    match *kind {
        OptimizerKind::Sgd => theta.axpy(-lr, g, 1.0),
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.t as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for i in 0..g.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

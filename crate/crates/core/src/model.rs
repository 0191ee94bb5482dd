//! A single interface over the Q-parameter model families: REN (including the
//! linear `n_v = 0` case), Elman RNN and LSTM.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    lstm_step, lstm_step_backward, rnn_step, rnn_step_backward, Activation, LstmCache, LstmParams, RnnParams,
};
use crate::error::{dim_err, Result};
use crate::ren::{
    construct_backward, direct_construct_with_tape, lmi_certificate, ren_step_backward, ren_step_cached,
    ConstructTape, IqcSpec, RenDims, RenFreeParams, RenState, RenStepCache, RenWeightGrad, RenWeights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Ren { dims: RenDims, iqc: IqcSpec, acyclic: bool },
    Rnn { activation: Activation, hidden: usize, n_in: usize, n_out: usize },
    Lstm { hidden: usize, n_in: usize, n_out: usize },
}

impl ModelSpec {
    pub fn n_in(&self) -> usize {
        match self {
            Self::Ren { dims, .. } => dims.n_u,
            Self::Rnn { n_in, .. } | Self::Lstm { n_in, .. } => *n_in,
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Self::Ren { dims, .. } => dims.n_y,
            Self::Rnn { n_out, .. } | Self::Lstm { n_out, .. } => *n_out,
        }
    }

    /// Length of the flat internal state.
    pub fn state_dim(&self) -> usize {
        match self {
            Self::Ren { dims, .. } => dims.n_x,
            Self::Rnn { hidden, .. } => *hidden,
            Self::Lstm { hidden, .. } => 2 * hidden,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Ren { dims, iqc, acyclic } => RenFreeParams::n_params(*dims, iqc, *acyclic),
            Self::Rnn { hidden, n_in, n_out, .. } => RnnParams::param_count(*hidden, *n_in, *n_out),
            Self::Lstm { hidden, n_in, n_out } => LstmParams::param_count(*hidden, *n_in, *n_out),
        }
    }

    pub fn is_certified(&self) -> bool {
        matches!(self, Self::Ren { .. })
    }

    /// Short label such as `ren`, `linear_ren`, `rnn_relu`, `lstm`.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Ren { dims, .. } if dims.n_v == 0 => "linear_ren",
            Self::Ren { .. } => "ren",
            Self::Rnn { activation: Activation::Relu, .. } => "rnn_relu",
            Self::Rnn { activation: Activation::Tanh, .. } => "rnn_tanh",
            Self::Lstm { .. } => "lstm",
        }
    }

    pub fn init_theta(&self, output_scale: f64, rng: &mut impl Rng) -> Result<DVector<f64>> {
        Ok(match self {
            Self::Ren { dims, iqc, acyclic } => {
                RenFreeParams::init(*dims, iqc.clone(), *acyclic, output_scale, rng)?.theta
            }
            Self::Rnn { activation, hidden, n_in, n_out } => DVector::from_vec(
                RnnParams::init(*activation, *hidden, *n_in, *n_out, output_scale, rng).flatten(),
            ),
            Self::Lstm { hidden, n_in, n_out } => {
                DVector::from_vec(LstmParams::init(*hidden, *n_in, *n_out, output_scale, rng).flatten())
            }
        })
    }

    pub fn build(&self, theta: &DVector<f64>) -> Result<Model> {
        if theta.len() != self.n_params() {
            return dim_err(format!("{} expects {} parameters, got {}", self.label(), self.n_params(), theta.len()));
        }
        Ok(match self {
            Self::Ren { dims, iqc, acyclic } => {
                let params = RenFreeParams::new(theta.clone(), *dims, iqc.clone(), *acyclic)?;
                let (weights, tape) = direct_construct_with_tape(&params)?;
                Model::Ren { weights, tape, iqc: iqc.clone() }
            }
            Self::Rnn { activation, hidden, n_in, n_out } => {
                Model::Rnn(RnnParams::from_flat(theta.as_slice(), *activation, *hidden, *n_in, *n_out)?)
            }
            Self::Lstm { hidden, n_in, n_out } => {
                Model::Lstm(LstmParams::from_flat(theta.as_slice(), *hidden, *n_in, *n_out)?)
            }
        })
    }
}

/// A model instantiated from a parameter vector.
#[derive(Debug, Clone)]
pub enum Model {
    Ren { weights: RenWeights, tape: ConstructTape, iqc: IqcSpec },
    Rnn(RnnParams),
    Lstm(LstmParams),
}

/// Per-step values needed to run a step backwards.
#[derive(Debug, Clone)]
pub enum StepCache {
    Ren(RenStepCache),
    Rnn { h: DVector<f64>, u: DVector<f64>, hn: DVector<f64> },
    Lstm { h: DVector<f64>, c: DVector<f64>, u: DVector<f64>, cache: LstmCache },
}

/// Gradient accumulator in the model's natural coordinates.
#[derive(Debug, Clone)]
pub enum ModelGrad {
    Ren(RenWeightGrad),
    Rnn(RnnParams),
    Lstm(LstmParams),
}

impl ModelGrad {
    pub fn add_assign(&mut self, other: &Self) {
        match (self, other) {
            (Self::Ren(a), Self::Ren(b)) => a.add_assign(b),
            (Self::Rnn(a), Self::Rnn(b)) => {
                a.w_h += &b.w_h;
                a.w_u += &b.w_u;
                a.b += &b.b;
                a.w_y += &b.w_y;
                a.b_y += &b.b_y;
            }
            (Self::Lstm(a), Self::Lstm(b)) => {
                for (ga, gb) in [
                    (&mut a.input, &b.input),
                    (&mut a.forget, &b.forget),
                    (&mut a.output, &b.output),
                    (&mut a.cell, &b.cell),
                ] {
                    ga.w_h += &gb.w_h;
                    ga.w_u += &gb.w_u;
                    ga.b += &gb.b;
                }
                a.w_y += &b.w_y;
                a.b_y += &b.b_y;
            }
            _ => panic!("gradient kinds differ"),
        }
    }
}

impl Model {
    pub fn n_in(&self) -> usize {
        match self {
            Self::Ren { weights, .. } => weights.dims.n_u,
            Self::Rnn(p) => p.w_u.ncols(),
            Self::Lstm(p) => p.input.w_u.ncols(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Ren { weights, .. } => weights.dims.n_x,
            Self::Rnn(p) => p.hidden(),
            Self::Lstm(p) => 2 * p.hidden(),
        }
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.state_dim())
    }

    /// LMI margin of a REN; `None` for uncertified families.
    pub fn certificate_margin(&self) -> Option<Result<f64>> {
        match self {
            Self::Ren { weights, iqc, .. } => Some(lmi_certificate(weights, iqc)),
            _ => None,
        }
    }

    pub fn ren_weights(&self) -> Option<&RenWeights> {
        match self {
            Self::Ren { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn step(&self, state: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.step_cached(state, u).map(|(s, y, _)| (s, y))
    }

    pub fn step_cached(
        &self,
        state: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, StepCache)> {
        if state.len() != self.state_dim() || u.len() != self.n_in() {
            return dim_err(format!(
                "model step got state {} and input {}, expected {} and {}",
                state.len(),
                u.len(),
                self.state_dim(),
                self.n_in()
            ));
        }
        match self {
            Self::Ren { weights, .. } => {
                let (next, y, cache) = ren_step_cached(weights, &RenState { x: state.clone() }, u)?;
                Ok((next.x, y, StepCache::Ren(cache)))
            }
            Self::Rnn(p) => {
                let (hn, y) = rnn_step(p, state, u);
                Ok((hn.clone(), y, StepCache::Rnn { h: state.clone(), u: u.clone(), hn }))
            }
            Self::Lstm(p) => {
                let n = p.hidden();
                let h = state.rows(0, n).into_owned();
                let c = state.rows(n, n).into_owned();
                let (hn, cn, y, cache) = lstm_step(p, &h, &c, u);
                let mut next = DVector::zeros(2 * n);
                next.rows_mut(0, n).copy_from(&hn);
                next.rows_mut(n, n).copy_from(&cn);
                Ok((next, y, StepCache::Lstm { h, c, u: u.clone(), cache }))
            }
        }
    }

    pub fn grad_zeros(&self) -> ModelGrad {
        match self {
            Self::Ren { weights, .. } => ModelGrad::Ren(RenWeightGrad::zeros(weights.dims)),
            Self::Rnn(p) => ModelGrad::Rnn(RnnParams::zeros(p.activation, p.hidden(), p.w_u.ncols(), p.w_y.nrows())),
            Self::Lstm(p) => ModelGrad::Lstm(LstmParams::zeros(p.hidden(), p.input.w_u.ncols(), p.w_y.nrows())),
        }
    }

    /// Reverse pass of one step: returns the adjoints of `(state, u)`.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        state_bar: &DVector<f64>,
        y_bar: &DVector<f64>,
        grad: &mut ModelGrad,
    ) -> (DVector<f64>, DVector<f64>) {
        match (self, cache, grad) {
            (Self::Ren { weights, .. }, StepCache::Ren(c), ModelGrad::Ren(g)) => {
                ren_step_backward(weights, c, state_bar, y_bar, g)
            }
            (Self::Rnn(p), StepCache::Rnn { h, u, hn }, ModelGrad::Rnn(g)) => {
                rnn_step_backward(p, h, u, hn, state_bar, y_bar, g)
            }
            (Self::Lstm(p), StepCache::Lstm { h, c, u, cache }, ModelGrad::Lstm(g)) => {
                let n = p.hidden();
                let hb = state_bar.rows(0, n).into_owned();
                let cb = state_bar.rows(n, n).into_owned();
                let (h_bar, c_bar, u_bar) = lstm_step_backward(p, h, c, u, cache, &hb, &cb, y_bar, g);
                let mut s = DVector::zeros(2 * n);
                s.rows_mut(0, n).copy_from(&h_bar);
                s.rows_mut(n, n).copy_from(&c_bar);
                (s, u_bar)
            }
            _ => panic!("cache or gradient does not match the model"),
        }
    }

    /// Converts an accumulated gradient into a gradient with respect to `theta`.
    pub fn theta_grad(&self, grad: &ModelGrad) -> DVector<f64> {
        match (self, grad) {
            (Self::Ren { tape, .. }, ModelGrad::Ren(g)) => construct_backward(tape, g),
            (Self::Rnn(_), ModelGrad::Rnn(g)) => DVector::from_vec(g.flatten()),
            (Self::Lstm(_), ModelGrad::Lstm(g)) => DVector::from_vec(g.flatten()),
            _ => panic!("gradient does not match the model"),
        }
    }
}

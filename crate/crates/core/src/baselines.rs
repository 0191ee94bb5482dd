//! Elman RNN and LSTM cells used as uncertified Q-parameter baselines.
//!
//! Both cells read and write a flat parameter vector so the optimizer treats
//! them exactly like the REN's unconstrained `theta`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the output `a = act(z)`.
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Self::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - a * a,
        }
    }
}

fn take(theta: &[f64], off: &mut usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(rows, cols, &theta[*off..*off + rows * cols]);
    *off += rows * cols;
    m
}

fn take_vec(theta: &[f64], off: &mut usize, n: usize) -> DVector<f64> {
    let v = DVector::from_column_slice(&theta[*off..*off + n]);
    *off += n;
    v
}

fn put(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Square orthogonal matrix times `scale`, from the QR factor of a Gaussian draw.
pub fn orthogonal(n: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let qr = gaussian_matrix(n, n, 1.0, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q * scale
}

/// Elman cell `h' = act(W_h h + W_u u + b)`, `y = W_y h' + b_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub activation: Activation,
    pub w_h: DMatrix<f64>,
    pub w_u: DMatrix<f64>,
    pub b: DVector<f64>,
    pub w_y: DMatrix<f64>,
    pub b_y: DVector<f64>,
}

impl RnnParams {
    pub fn param_count(hidden: usize, n_in: usize, n_out: usize) -> usize {
        hidden * hidden + hidden * n_in + hidden + n_out * hidden + n_out
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn zeros(activation: Activation, hidden: usize, n_in: usize, n_out: usize) -> Self {
        Self {
            activation,
            w_h: DMatrix::zeros(hidden, hidden),
            w_u: DMatrix::zeros(hidden, n_in),
            b: DVector::zeros(hidden),
            w_y: DMatrix::zeros(n_out, hidden),
            b_y: DVector::zeros(n_out),
        }
    }

    pub fn from_flat(theta: &[f64], activation: Activation, hidden: usize, n_in: usize, n_out: usize) -> Result<Self> {
        let n = Self::param_count(hidden, n_in, n_out);
        if theta.len() != n {
            return dim_err(format!("RNN expects {n} parameters, got {}", theta.len()));
        }
        let mut off = 0;
        Ok(Self {
            activation,
            w_h: take(theta, &mut off, hidden, hidden),
            w_u: take(theta, &mut off, hidden, n_in),
            b: take_vec(theta, &mut off, hidden),
            w_y: take(theta, &mut off, n_out, hidden),
            b_y: take_vec(theta, &mut off, n_out),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(self.hidden(), self.w_u.ncols(), self.w_y.nrows()));
        put(&mut out, &self.w_h);
        put(&mut out, &self.w_u);
        out.extend(self.b.iter());
        put(&mut out, &self.w_y);
        out.extend(self.b_y.iter());
        out
    }

    /// Orthogonal recurrent weights scaled by 0.9, Gaussian input and output
    /// maps, zero biases.
    pub fn init(
        activation: Activation,
        hidden: usize,
        n_in: usize,
        n_out: usize,
        output_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
        Self {
            activation,
            w_h: orthogonal(hidden, 0.9, rng),
            w_u: gaussian_matrix(hidden, n_in, fan(n_in), rng),
            b: DVector::zeros(hidden),
            w_y: gaussian_matrix(n_out, hidden, fan(hidden) * output_scale, rng),
            b_y: DVector::zeros(n_out),
        }
    }
}

/// One Elman step.
pub fn rnn_step(p: &RnnParams, h: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let act = p.activation;
    let hn = (&p.w_h * h + &p.w_u * u + &p.b).map(|z| act.apply(z));
    let y = &p.w_y * &hn + &p.b_y;
    (hn, y)
}

/// Reverse pass of [`rnn_step`]. Returns the adjoints of `(h, u)`.
pub fn rnn_step_backward(
    p: &RnnParams,
    h: &DVector<f64>,
    u: &DVector<f64>,
    hn: &DVector<f64>,
    hn_bar: &DVector<f64>,
    y_bar: &DVector<f64>,
    grad: &mut RnnParams,
) -> (DVector<f64>, DVector<f64>) {
    grad.w_y += y_bar * hn.transpose();
    grad.b_y += y_bar;
    let total = hn_bar + p.w_y.transpose() * y_bar;
    let act = p.activation;
    let pre = total.zip_map(hn, |g, a| g * act.deriv_from_output(a));
    grad.w_h += &pre * h.transpose();
    grad.w_u += &pre * u.transpose();
    grad.b += &pre;
    (p.w_h.transpose() * &pre, p.w_u.transpose() * &pre)
}

/// LSTM gate block `W_h h + W_u u + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub w_h: DMatrix<f64>,
    pub w_u: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Gate {
    fn zeros(hidden: usize, n_in: usize) -> Self {
        Self { w_h: DMatrix::zeros(hidden, hidden), w_u: DMatrix::zeros(hidden, n_in), b: DVector::zeros(hidden) }
    }

    fn eval(&self, h: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.w_h * h + &self.w_u * u + &self.b
    }

    fn accumulate(&mut self, pre: &DVector<f64>, h: &DVector<f64>, u: &DVector<f64>) {
        self.w_h += pre * h.transpose();
        self.w_u += pre * u.transpose();
        self.b += pre;
    }
}

/// LSTM cell with input, forget, output and candidate gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub cell: Gate,
    pub w_y: DMatrix<f64>,
    pub b_y: DVector<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub i: DVector<f64>,
    pub f: DVector<f64>,
    pub o: DVector<f64>,
    pub g: DVector<f64>,
    pub c_new: DVector<f64>,
    pub tanh_c: DVector<f64>,
}

impl LstmParams {
    pub fn param_count(hidden: usize, n_in: usize, n_out: usize) -> usize {
        4 * (hidden * hidden + hidden * n_in + hidden) + n_out * hidden + n_out
    }

    pub fn hidden(&self) -> usize {
        self.input.b.len()
    }

    pub fn zeros(hidden: usize, n_in: usize, n_out: usize) -> Self {
        Self {
            input: Gate::zeros(hidden, n_in),
            forget: Gate::zeros(hidden, n_in),
            output: Gate::zeros(hidden, n_in),
            cell: Gate::zeros(hidden, n_in),
            w_y: DMatrix::zeros(n_out, hidden),
            b_y: DVector::zeros(n_out),
        }
    }

    pub fn from_flat(theta: &[f64], hidden: usize, n_in: usize, n_out: usize) -> Result<Self> {
        let n = Self::param_count(hidden, n_in, n_out);
        if theta.len() != n {
            return dim_err(format!("LSTM expects {n} parameters, got {}", theta.len()));
        }
        let mut off = 0;
        let gate = |off: &mut usize| Gate {
            w_h: take(theta, off, hidden, hidden),
            w_u: take(theta, off, hidden, n_in),
            b: take_vec(theta, off, hidden),
        };
        let input = gate(&mut off);
        let forget = gate(&mut off);
        let output = gate(&mut off);
        let cell = gate(&mut off);
        Ok(Self {
            input,
            forget,
            output,
            cell,
            w_y: take(theta, &mut off, n_out, hidden),
            b_y: take_vec(theta, &mut off, n_out),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [&self.input, &self.forget, &self.output, &self.cell] {
            put(&mut out, &g.w_h);
            put(&mut out, &g.w_u);
            out.extend(g.b.iter());
        }
        put(&mut out, &self.w_y);
        out.extend(self.b_y.iter());
        out
    }

    pub fn init(hidden: usize, n_in: usize, n_out: usize, output_scale: f64, rng: &mut impl Rng) -> Self {
        let fan = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
        let gate = |rng: &mut _| Gate {
            w_h: orthogonal(hidden, 0.9, rng),
            w_u: gaussian_matrix(hidden, n_in, fan(n_in), rng),
            b: DVector::zeros(hidden),
        };
        let input = gate(rng);
        let forget = gate(rng);
        let output = gate(rng);
        let cell = gate(rng);
        Self {
            input,
            forget,
            output,
            cell,
            w_y: gaussian_matrix(n_out, hidden, fan(hidden) * output_scale, rng),
            b_y: DVector::zeros(n_out),
        }
    }
}

/// One LSTM step on `(h, c)`.
pub fn lstm_step(
    p: &LstmParams,
    h: &DVector<f64>,
    c: &DVector<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, LstmCache) {
    let i = p.input.eval(h, u).map(sigmoid);
    let f = p.forget.eval(h, u).map(sigmoid);
    let o = p.output.eval(h, u).map(sigmoid);
    let g = p.cell.eval(h, u).map(f64::tanh);
    let c_new = f.component_mul(c) + i.component_mul(&g);
    let tanh_c = c_new.map(f64::tanh);
    let h_new = o.component_mul(&tanh_c);
    let y = &p.w_y * &h_new + &p.b_y;
    (h_new, c_new.clone(), y, LstmCache { i, f, o, g, c_new, tanh_c })
}

/// Reverse pass of [`lstm_step`]. Returns the adjoints of `(h, c, u)`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step_backward(
    p: &LstmParams,
    h: &DVector<f64>,
    c: &DVector<f64>,
    u: &DVector<f64>,
    cache: &LstmCache,
    hn_bar: &DVector<f64>,
    cn_bar: &DVector<f64>,
    y_bar: &DVector<f64>,
    grad: &mut LstmParams,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let h_new = cache.o.component_mul(&cache.tanh_c);
    grad.w_y += y_bar * h_new.transpose();
    grad.b_y += y_bar;
    let dh = hn_bar + p.w_y.transpose() * y_bar;
    let d_o = dh.component_mul(&cache.tanh_c);
    let dc = cn_bar + dh.component_mul(&cache.o).zip_map(&cache.tanh_c, |v, t| v * (1.0 - t * t));
    let d_f = dc.component_mul(c);
    let d_i = dc.component_mul(&cache.g);
    let d_g = dc.component_mul(&cache.i);
    let c_bar = dc.component_mul(&cache.f);

    let pre_i = d_i.zip_map(&cache.i, |d, s| d * s * (1.0 - s));
    let pre_f = d_f.zip_map(&cache.f, |d, s| d * s * (1.0 - s));
    let pre_o = d_o.zip_map(&cache.o, |d, s| d * s * (1.0 - s));
    let pre_g = d_g.zip_map(&cache.g, |d, t| d * (1.0 - t * t));

    grad.input.accumulate(&pre_i, h, u);
    grad.forget.accumulate(&pre_f, h, u);
    grad.output.accumulate(&pre_o, h, u);
    grad.cell.accumulate(&pre_g, h, u);

    let mut h_bar = DVector::zeros(h.len());
    let mut u_bar = DVector::zeros(u.len());
    for (gate, pre) in [(&p.input, &pre_i), (&p.forget, &pre_f), (&p.output, &pre_o), (&p.cell, &pre_g)] {
        h_bar += gate.w_h.transpose() * pre;
        u_bar += gate.w_u.transpose() * pre;
    }
    (h_bar, c_bar, u_bar)
}

use nalgebra::{DMatrix, DVector};

use super::{RenState, RenWeightGrad, RenWeights};
use crate::error::{dim_err, Error, Result};

const PICARD_DAMPING: f64 = 0.5;
const PICARD_CAP: usize = 500;
const NEWTON_CAP: usize = 20;
const PICARD_TOL: f64 = 1e-10;
const PICARD_TARGET: f64 = 1e-13;

fn is_strictly_lower(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (i..m.ncols()).all(|j| m[(i, j)] == 0.0))
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Forward substitution for strictly lower-triangular `D11`.
fn forward_substitute(d11: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let mut v = b[i];
        for j in 0..i {
            v += d11[(i, j)] * w[j];
        }
        w[i] = relu(v);
    }
    w
}

/// Solves the linear system on the active set `{i : (D11 w + b)_i > 0}`.
fn active_set_step(d11: &DMatrix<f64>, b: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let pre = d11 * w + b;
    let act: Vec<usize> = (0..b.len()).filter(|&i| pre[i] > 0.0).collect();
    let k = act.len();
    if k == 0 {
        return Some(DVector::zeros(b.len()));
    }
    let m =DMatrix::from_fn(k, k, |i, j| (i == j) as u8 as f64 - d11[(act[i], act[j])]);
    let rhs = DVector::from_fn(k, |i, _| b[act[i]]);
    let sol = m.lu().solve(&rhs)?;
    let mut out = DVector::zeros(b.len());
    for (i, &a) in act.iter().enumerate() {
        out[a] = sol[i];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Active-set Newton from `relu(b)`, falling back to the damped splitting
/// iteration `w <- relu((1-a) w + a (D11 w + b))` and a final Newton polish.
///
/// The fixed points are exactly the solutions of `w = relu(D11 w + b)`.
pub fn equilibrium_iterate(d11: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let start = b.map(relu);
    let mut w = start.clone();
    for _ in 0..NEWTON_CAP {
        match active_set_step(d11, b, &w) {
            Some(next) => w = next,
            None => break,
        }
        if ((d11 * &w + b).map(relu) - &w).amax() < PICARD_TARGET {
            return Ok(w);
        }
    }
    w = start;
    for _ in 0..PICARD_CAP {
        let res = (d11 * &w + b).map(relu) - &w;
        if res.amax() < PICARD_TARGET {
            return Ok(w);
        }
        let v = d11 * &w + b;
        w = (&w * (1.0 - PICARD_DAMPING) + v * PICARD_DAMPING).map(relu);
    }
    for _ in 0..NEWTON_CAP {
        match active_set_step(d11, b, &w) {
            Some(next) => w = next,
            None => break,
        }
        if ((d11 * &w + b).map(relu) - &w).amax() < PICARD_TARGET {
            return Ok(w);
        }
    }
    let res = ((d11 * &w + b).map(relu) - &w).amax();
    if res < PICARD_TOL {
        Ok(w)
    } else {
        Err(Error::NoConvergence(format!(
            "equilibrium layer ({PICARD_CAP} iterations, residual {res:.3e})"
        )))
    }
}

/// Solves `w = relu(D11 w + b_w)`.
pub fn equilibrium_solve(d11: &DMatrix<f64>, b_w: &DVector<f64>) -> Result<DVector<f64>> {
    if d11.shape() != (b_w.len(), b_w.len()) {
        return dim_err(format!("D11 is {:?} but b_w has length {}", d11.shape(), b_w.len()));
    }
    if b_w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("equilibrium layer input".into()));
    }
    if is_strictly_lower(d11) {
        Ok(forward_substitute(d11, b_w))
    } else {
        equilibrium_iterate(d11, b_w)
    }
}

/// Values of one [`ren_step`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RenStepCache {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub v: DVector<f64>,
}

fn step_inner(
    weights: &RenWeights,
    state: &RenState,
    u: &DVector<f64>,
) -> Result<(RenState, DVector<f64>, RenStepCache)> {
    if state.x.len() != weights.dims.n_x || u.len() != weights.dims.n_u {
        return dim_err(format!(
            "REN step got state {} and input {}, expected {} and {}",
            state.x.len(),
            u.len(),
            weights.dims.n_x,
            weights.dims.n_u
        ));
    }
    let x = &state.x;
    let bw = &weights.c1 * x + &weights.d12 * u + &weights.bv;
    let w = if weights.acyclic {
        forward_substitute(&weights.d11, &bw)
    } else {
        equilibrium_solve(&weights.d11, &bw)?
    };
    let v = &bw + &weights.d11 * &w;
    let xn = &weights.a * x + &weights.b1 * &w + &weights.b2 * u + &weights.bx;
    let y = &weights.c2 * x + &weights.d21 * &w + &weights.d22 * u + &weights.by;
    let cache = RenStepCache { x: x.clone(), u: u.clone(), w, v };
    Ok((RenState { x: xn }, y, cache))
}

/// One step of the REN: returns the next state and the output.
pub fn ren_step(weights: &RenWeights, state: &RenState, u: &DVector<f64>) -> Result<(RenState, DVector<f64>)> {
    step_inner(weights, state, u).map(|(s, y, _)| (s, y))
}

/// [`ren_step`] that also returns the cache for [`ren_step_backward`].
pub fn ren_step_cached(
    weights: &RenWeights,
    state: &RenState,
    u: &DVector<f64>,
) -> Result<(RenState, DVector<f64>, RenStepCache)> {
    step_inner(weights, state, u)
}

/// Reverse-mode pass through one step.
///
/// Takes the adjoints of the next state and of the output, accumulates weight
/// gradients into `grad`, and returns the adjoints of `(x, u)`.
pub fn ren_step_backward(
    weights: &RenWeights,
    cache: &RenStepCache,
    xn_bar: &DVector<f64>,
    y_bar: &DVector<f64>,
    grad: &mut RenWeightGrad,
) -> (DVector<f64>, DVector<f64>) {
    let nv = weights.dims.n_v;
    grad.a += xn_bar * cache.x.transpose();
    grad.b1 += xn_bar * cache.w.transpose();
    grad.b2 += xn_bar * cache.u.transpose();
    grad.bx += xn_bar;
    grad.c2 += y_bar * cache.x.transpose();
    grad.d21 += y_bar * cache.w.transpose();
    grad.d22 += y_bar * cache.u.transpose();
    grad.by += y_bar;

    let w_bar = weights.b1.transpose() * xn_bar + weights.d21.transpose() * y_bar;
    let active: Vec<bool> = cache.v.iter().map(|&v| v > 0.0).collect();
    // v_bar = J (w_bar + D11' v_bar)
    let v_bar = if weights.acyclic {
        let mut vb = DVector::zeros(nv);
        for i in (0..nv).rev() {
            if active[i] {
                let mut acc = w_bar[i];
                for j in i + 1..nv {
                    acc += weights.d11[(j, i)] * vb[j];
                }
                vb[i] = acc;
            }
        }
        vb
    } else {
        let mut m = DMatrix::identity(nv, nv);
        let mut rhs = DVector::zeros(nv);
        for i in 0..nv {
            if active[i] {
                rhs[i] = w_bar[i];
                for j in 0..nv {
                    m[(i, j)] -= weights.d11[(j, i)];
                }
            }
        }
        m.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(nv))
    };

    grad.c1 += &v_bar * cache.x.transpose();
    grad.d11 += &v_bar * cache.w.transpose();
    grad.d12 += &v_bar * cache.u.transpose();
    grad.bv += &v_bar;

    let x_bar = weights.a.transpose() * xn_bar + weights.c2.transpose() * y_bar + weights.c1.transpose() * &v_bar;
    let u_bar = weights.b2.transpose() * xn_bar + weights.d22.transpose() * y_bar + weights.d12.transpose() * &v_bar;
    (x_bar, u_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ren::{direct_construct, IqcSpec, RenDims, RenFreeParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn relu_layer_examples() {
        let w = equilibrium_solve(&DMatrix::zeros(2, 2), &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        let d11 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let w = equilibrium_solve(&d11, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn substitution_matches_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 8;
            let mut d11 = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..i {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    d11[(i, j)] = 0.2 * z;
                }
            }
            let b = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let direct = equilibrium_solve(&d11, &b).unwrap();
            let iter = equilibrium_iterate(&d11, &b).unwrap();
            let gap = (direct - iter).amax();
            assert!(gap < 1e-10, "{gap}");
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let dims = RenDims::new(2, 3, 1, 1);
        let w = RenWeights::zeros(dims);
        let (s, y) = ren_step(&w, &RenState::zeros(2), &DVector::from_element(1, 0.7)).unwrap();
        assert_eq!(s.x.amax(), 0.0);
        assert_eq!(y.amax(), 0.0);
    }

    #[test]
    fn linear_degeneration() {
        let mut w = RenWeights::zeros(RenDims::new(2, 0, 1, 1));
        w.a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, 0.1]);
        w.b2 = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let u = DVector::from_element(1, 0.5);
        let (s, _) = ren_step(&w, &RenState { x: x.clone() }, &u).unwrap();
        assert_eq!(s.x, &w.a * &x + &w.b2 * &u);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for acyclic in [true, false] {
            let dims = RenDims::new(3, 5, 2, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut p = RenFreeParams::init(dims, IqcSpec::Lipschitz { gamma: 2.0 }, acyclic, 1.0, &mut rng).unwrap();
            let lay = p.layout();
            for k in lay.bx..lay.len {
                p.theta[k] = 0.3;
            }
            let w = direct_construct(&p).unwrap();
            let x = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let u = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let xb = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let yb = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let (_, _, cache) = ren_step_cached(&w, &RenState { x: x.clone() }, &u).unwrap();
            let mut g = crate::ren::RenWeightGrad::zeros(dims);
            let (x_bar, u_bar) = ren_step_backward(&w, &cache, &xb, &yb, &mut g);
            let loss = |x: &DVector<f64>, u: &DVector<f64>, w: &RenWeights| {
                let (s, y) = ren_step(w, &RenState { x: x.clone() }, u).unwrap();
                s.x.dot(&xb) + y.dot(&yb)
            };
            let h = 1e-6;
            for i in 0..3 {
                let mut e = DVector::zeros(3);
                e[i] = h;
                let fd = (loss(&(&x + &e), &u, &w) - loss(&(&x - &e), &u, &w)) / (2.0 * h);
                assert!((fd - x_bar[i]).abs() < 1e-6, "x {i}");
            }
            for i in 0..2 {
                let mut e = DVector::zeros(2);
                e[i] = h;
                let fd = (loss(&x, &(&u + &e), &w) - loss(&x, &(&u - &e), &w)) / (2.0 * h);
                assert!((fd - u_bar[i]).abs() < 1e-6, "u {i}");
            }
            for (i, j) in [(2, 0), (4, 1), (3, 2)] {
                let mut wp = w.clone();
                wp.d11[(i, j)] += h;
                let mut wm = w.clone();
                wm.d11[(i, j)] -= h;
                let fd = (loss(&x, &u, &wp) - loss(&x, &u, &wm)) / (2.0 * h);
                assert!((fd - g.d11[(i, j)]).abs() < 1e-6, "d11 {i},{j}");
            }
            for i in 0..5 {
                let mut wp = w.clone();
                wp.bv[i] += h;
                let mut wm = w.clone();
                wm.bv[i] -= h;
                let fd = (loss(&x, &u, &wp) - loss(&x, &u, &wm)) / (2.0 * h);
                assert!((fd - g.bv[i]).abs() < 1e-6, "bv {i}");
            }
        }
    }
}

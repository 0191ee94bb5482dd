use nalgebra::{DMatrix, DVector};

use super::{general_feedthrough, IqcSpec, RenFreeParams, RenWeightGrad, RenWeights, ThetaLayout, EPS_LMI};
use crate::error::{Error, Result};

/// Intermediate values of [`direct_construct`] needed by [`construct_backward`].
#[derive(Debug, Clone)]
pub struct ConstructTape {
    layout: ThetaLayout,
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    s: DMatrix<f64>,
    m22: DMatrix<f64>,
    b2i: DMatrix<f64>,
    c2: DMatrix<f64>,
    d21: DMatrix<f64>,
    ri: DMatrix<f64>,
    sigma: DMatrix<f64>,
    l1: DMatrix<f64>,
    l2: DMatrix<f64>,
    d22: DMatrix<f64>,
    einv: DMatrix<f64>,
    f: DMatrix<f64>,
    b1i: DMatrix<f64>,
    c1i: DMatrix<f64>,
    d11i: DMatrix<f64>,
    d12i: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn block(theta: &DVector<f64>, start: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &theta.as_slice()[start..start + rows * cols])
}

fn write_block(out: &mut DVector<f64>, start: usize, m: &DMatrix<f64>) {
    let cols = m.ncols();
    for i in 0..m.nrows() {
        for j in 0..cols {
            out[start + i * cols + j] += m[(i, j)];
        }
    }
}

/// Fills a skew-symmetric matrix from strictly-lower entries stored row by row.
fn skew_from(theta: &DVector<f64>, start: usize, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = start;
    for i in 0..n {
        for j in 0..i {
            m[(i, j)] = theta[k];
            m[(j, i)] = -theta[k];
            k += 1;
        }
    }
    m
}

fn skew_grad(out: &mut DVector<f64>, start: usize, g: &DMatrix<f64>) {
    let mut k = start;
    for i in 0..g.nrows() {
        for j in 0..i {
            out[k] += g[(i, j)] - g[(j, i)];
            k += 1;
        }
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NonFinite(format!("{what} lost positive definiteness")))
}

/// Maps unconstrained parameters to certified explicit REN weights.
pub fn direct_construct(params: &RenFreeParams) -> Result<RenWeights> {
    direct_construct_with_tape(params).map(|(w, _)| w)
}

pub fn direct_construct_with_tape(params: &RenFreeParams) -> Result<(RenWeights, ConstructTape)> {
    let theta = &params.theta;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("REN parameter vector".into()));
    }
    let lay = params.layout();
    let dims = params.dims;
    let (nx, nv, nu, ny) = (dims.n_x, dims.n_v, dims.n_u, dims.n_y);
    let d = 2 * nx + nv;
    let (q, s, r) = params.iqc.qsr(nu, ny)?;

    let x = block(theta, lay.x, d, d);
    let y = block(theta, lay.y, nx, nx);
    let b2i = block(theta, lay.b2, nx, nu);
    let c2 = block(theta, lay.c2, ny, nx);
    let d21 = block(theta, lay.d21, ny, nv);
    let d12i = block(theta, lay.d12, nv, nu);

    let mut h = x.transpose() * &x;
    for i in 0..d {
        h[(i, i)] += EPS_LMI;
    }
    let (ox, ow, op) = (0, nx, nx + nv);
    let h11 = h.view((ox, ox), (nx, nx)).into_owned();
    let h21 = h.view((ow, ox), (nv, nx)).into_owned();
    let h22 = h.view((ow, ow), (nv, nv)).into_owned();
    let h31 = h.view((op, ox), (nx, nx)).into_owned();
    let h32 = h.view((op, ow), (nx, nv)).into_owned();
    let h33 = h.view((op, op), (nx, nx)).into_owned();

    let mut m22 = DMatrix::zeros(0, 0);
    let d22 = match &params.iqc {
        IqcSpec::Passive => {
            m22 = block(theta, lay.m22, nu, nu);
            let mut d22 = m22.transpose() * &m22 * 0.5 + skew_from(theta, lay.n22, nu);
            for i in 0..nu {
                d22[(i, i)] += EPS_LMI;
            }
            d22
        }
        IqcSpec::General { .. } => general_feedthrough(&q, &s)?,
        _ => DMatrix::zeros(ny, nu),
    };

    let rhat = &r + &s * &d22 + d22.transpose() * s.transpose() + d22.transpose() * &q * &d22;
    let ri = spd_inverse(&rhat, "input weighting")?;
    let sigma = s.transpose() + &q * &d22;
    let l1 = c2.transpose() * &sigma;
    let l2 = d21.transpose() * &sigma - &d12i;

    let b2ri = &b2i * &ri;
    let p = &h33 + &b2ri * b2i.transpose();
    let mut e2 = &h11 + &p - c2.transpose() * &q * &c2 + &l1 * &ri * l1.transpose() + &y - y.transpose();
    e2 *= 0.5;
    let f = &h31 + &b2ri * l1.transpose();
    let b1i = &h32 + &b2ri * l2.transpose();
    let c1i = -&h21 + d21.transpose() * &q * &c2 - &l2 * &ri * l1.transpose();
    let z = &h22 - d21.transpose() * &q * &d21 + &l2 * &ri * l2.transpose();

    let lambda = DVector::from_fn(nv, |i, _| 0.5 * z[(i, i)]);
    let mut d11i = DMatrix::zeros(nv, nv);
    for i in 0..nv {
        for j in 0..i {
            d11i[(i, j)] = -z[(i, j)];
        }
    }
    if !params.acyclic {
        d11i += skew_from(theta, lay.n11, nv);
    }

    let einv = e2
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NonFinite("state coupling matrix E is singular".into()))?;
    let inv_l = lambda.map(|l| 1.0 / l);
    let a = &einv * &f;
    let b1 = &einv * &b1i;
    let b2 = &einv * &b2i;
    let c1 = DMatrix::from_diagonal(&inv_l) * &c1i;
    let d11 = DMatrix::from_diagonal(&inv_l) * &d11i;
    let d12 = DMatrix::from_diagonal(&inv_l) * &d12i;
    let pinv = spd_inverse(&p, "state storage")?;
    let pe = e2.transpose() * &pinv * &e2;
    let pe = (&pe + pe.transpose()) * 0.5;

    let weights = RenWeights {
        dims,
        acyclic: params.acyclic,
        a,
        b1,
        b2,
        c1,
        d11,
        d12,
        c2: c2.clone(),
        d21: d21.clone(),
        d22: d22.clone(),
        bx: theta.rows(lay.bx, nx).into_owned(),
        bv: theta.rows(lay.bv, nv).into_owned(),
        by: theta.rows(lay.by, ny).into_owned(),
        p: pe,
        lambda: lambda.clone(),
    };
    if weights.a.iter().chain(weights.c1.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("constructed REN weights".into()));
    }
    let tape = ConstructTape {
        layout: lay,
        x,
        q,
        s,
        m22,
        b2i,
        c2,
        d21,
        ri,
        sigma,
        l1,
        l2,
        d22,
        einv,
        f,
        b1i,
        c1i,
        d11i,
        d12i,
        lambda,
    };
    Ok((weights, tape))
}

/// Pulls a weight gradient back to a gradient with respect to `theta`.
pub fn construct_backward(tape: &ConstructTape, g: &RenWeightGrad) -> DVector<f64> {
    let t = tape;
    let lay = t.layout;
    let (nx, nv, nu) = (lay.dims.n_x, lay.dims.n_v, lay.dims.n_u);
    let d = 2 * nx + nv;
    let mut out = DVector::zeros(lay.len);

    // explicit from implicit
    let einv_t = t.einv.transpose();
    let fbar = &einv_t * &g.a;
    let b1i_bar = &einv_t * &g.b1;
    let mut b2i_bar = &einv_t * &g.b2;
    let einv_bar = &g.a * t.f.transpose() + &g.b1 * t.b1i.transpose() + &g.b2 * t.b2i.transpose();
    let e_bar = -(&einv_t * einv_bar * &einv_t);

    let inv_l = t.lambda.map(|l| 1.0 / l);
    let mut lambda_bar = DVector::zeros(nv);
    let mut c1i_bar = DMatrix::zeros(nv, nx);
    let mut d11i_bar = DMatrix::zeros(nv, nv);
    let mut d12i_bar = DMatrix::zeros(nv, nu);
    for i in 0..nv {
        let mut acc = 0.0;
        for j in 0..nx {
            c1i_bar[(i, j)] = g.c1[(i, j)] * inv_l[i];
            acc += g.c1[(i, j)] * t.c1i[(i, j)];
        }
        for j in 0..nv {
            d11i_bar[(i, j)] = g.d11[(i, j)] * inv_l[i];
            acc += g.d11[(i, j)] * t.d11i[(i, j)];
        }
        for j in 0..nu {
            d12i_bar[(i, j)] = g.d12[(i, j)] * inv_l[i];
            acc += g.d12[(i, j)] * t.d12i[(i, j)];
        }
        lambda_bar[i] = -acc * inv_l[i] * inv_l[i];
    }

    let mut z_bar = DMatrix::zeros(nv, nv);
    for i in 0..nv {
        z_bar[(i, i)] = 0.5 * lambda_bar[i];
        for j in 0..i {
            z_bar[(i, j)] = -d11i_bar[(i, j)];
        }
    }
    if !lay.acyclic {
        skew_grad(&mut out, lay.n11, &d11i_bar);
    }

    let ri = &t.ri;
    let ri_t = ri.transpose();
    let q = &t.q;
    let q_t = q.transpose();
    let mut ri_bar = DMatrix::zeros(nu, nu);
    let mut l1_bar = DMatrix::zeros(nx, nu);
    let mut l2_bar = DMatrix::zeros(nv, nu);
    let mut c2_bar = g.c2.clone();
    let mut d21_bar = g.d21.clone();
    let mut d22_bar = g.d22.clone();

    // Z = H22 - D21' Q D21 + L2 Ri L2'
    let h22_bar = z_bar.clone();
    d21_bar -= q * &t.d21 * z_bar.transpose() + &q_t * &t.d21 * &z_bar;
    l2_bar += &z_bar * &t.l2 * &ri_t + z_bar.transpose() * &t.l2 * ri;
    ri_bar += t.l2.transpose() * &z_bar * &t.l2;

    // C1i = -H21 + D21' Q C2 - L2 Ri L1'
    let h21_bar = -&c1i_bar;
    d21_bar += q * &t.c2 * c1i_bar.transpose();
    c2_bar += &q_t * &t.d21 * &c1i_bar;
    l2_bar -= &c1i_bar * &t.l1 * &ri_t;
    ri_bar -= t.l2.transpose() * &c1i_bar * &t.l1;
    l1_bar -= c1i_bar.transpose() * &t.l2 * ri;

    // B1i = H32 + B2i Ri L2'
    let h32_bar = b1i_bar.clone();
    b2i_bar += &b1i_bar * &t.l2 * &ri_t;
    ri_bar += t.b2i.transpose() * &b1i_bar * &t.l2;
    l2_bar += b1i_bar.transpose() * &t.b2i * ri;

    // F = H31 + B2i Ri L1'
    let h31_bar = fbar.clone();
    b2i_bar += &fbar * &t.l1 * &ri_t;
    ri_bar += t.b2i.transpose() * &fbar * &t.l1;
    l1_bar += fbar.transpose() * &t.b2i * ri;

    // E = (H11 + P - C2' Q C2 + L1 Ri L1' + Y - Y') / 2
    let ge = &e_bar * 0.5;
    let h11_bar = ge.clone();
    let p_bar = ge.clone();
    c2_bar -= q * &t.c2 * ge.transpose() + &q_t * &t.c2 * &ge;
    l1_bar += &ge * &t.l1 * &ri_t + ge.transpose() * &t.l1 * ri;
    ri_bar += t.l1.transpose() * &ge * &t.l1;
    let y_bar = &ge - ge.transpose();

    // P = H33 + B2i Ri B2i'
    let h33_bar = p_bar.clone();
    b2i_bar += &p_bar * &t.b2i * &ri_t + p_bar.transpose() * &t.b2i * ri;
    ri_bar += t.b2i.transpose() * &p_bar * &t.b2i;

    // L1 = C2' Sigma, L2 = D21' Sigma - D12i
    c2_bar += &t.sigma * l1_bar.transpose();
    d21_bar += &t.sigma * l2_bar.transpose();
    let sigma_bar = &t.c2 * &l1_bar + &t.d21 * &l2_bar;
    d12i_bar -= &l2_bar;

    // Sigma = S' + Q D22, Ri = Rhat^-1, Rhat = R + S D22 + D22' S' + D22' Q D22
    d22_bar += &q_t * &sigma_bar;
    let rhat_bar = -(&ri_t * &ri_bar * &ri_t);
    let rsym = &rhat_bar + rhat_bar.transpose();
    d22_bar += t.s.transpose() * &rsym + q * &t.d22 * rhat_bar.transpose() + &q_t * &t.d22 * &rhat_bar;

    if lay.passive {
        let m22_bar = &t.m22 * (&d22_bar + d22_bar.transpose()) * 0.5;
        write_block(&mut out, lay.m22, &m22_bar);
        skew_grad(&mut out, lay.n22, &d22_bar);
    }

    let (ox, ow, op) = (0, nx, nx + nv);
    let mut h_bar = DMatrix::zeros(d, d);
    h_bar.view_mut((ox, ox), (nx, nx)).copy_from(&h11_bar);
    h_bar.view_mut((ow, ox), (nv, nx)).copy_from(&h21_bar);
    h_bar.view_mut((ow, ow), (nv, nv)).copy_from(&h22_bar);
    h_bar.view_mut((op, ox), (nx, nx)).copy_from(&h31_bar);
    h_bar.view_mut((op, ow), (nx, nv)).copy_from(&h32_bar);
    h_bar.view_mut((op, op), (nx, nx)).copy_from(&h33_bar);
    let x_bar = &t.x * (&h_bar + h_bar.transpose());

    write_block(&mut out, lay.x, &x_bar);
    write_block(&mut out, lay.y, &y_bar);
    write_block(&mut out, lay.b2, &b2i_bar);
    write_block(&mut out, lay.c2, &c2_bar);
    write_block(&mut out, lay.d21, &d21_bar);
    write_block(&mut out, lay.d12, &d12i_bar);
    out.rows_mut(lay.bx, nx).copy_from(&g.bx);
    out.rows_mut(lay.bv, nv).copy_from(&g.bv);
    out.rows_mut(lay.by, lay.dims.n_y).copy_from(&g.by);
    out
}

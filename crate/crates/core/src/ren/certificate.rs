use nalgebra::DMatrix;

use super::{IqcSpec, RenWeights};
use crate::error::{dim_err, Result};
use crate::lti::min_sym_eigenvalue;

/// Assembles the incremental-IQC dissipation matrix
///
/// ```text
/// [ P        -C1'L        C2'S'          ]   [A' ]   [A' ]'   [C2' ]   [C2' ]'
/// [ -L C1    W            D21'S' - L D12 ] - [B1'] P [B1']  + [D21'] Q [D21']
/// [ S C2     S D21-D12'L  R + S D22 + .. ]   [B2']   [B2']    [D22']   [D22']
/// ```
///
/// with `L = Lambda` and `W = 2L - L D11 - D11' L`. `output_sign` multiplies the
/// last term; `+1` is the dissipation inequality, `-1` a weaker variant.
pub fn lmi_matrix(w: &RenWeights, iqc: &IqcSpec, output_sign: f64) -> Result<DMatrix<f64>> {
    w.check_dims()?;
    let (nx, nv, nu, ny) = (w.dims.n_x, w.dims.n_v, w.dims.n_u, w.dims.n_y);
    let (q, s, r) = iqc.qsr(nu, ny)?;
    if w.lambda.iter().any(|&l| l <= 0.0) {
        return dim_err("Lambda must be positive");
    }
    let lam = DMatrix::from_diagonal(&w.lambda);
    let n = nx + nv + nu;
    let (ow, ou) = (nx, nx + nv);

    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (nx, nx)).copy_from(&w.p);
    let lc1 = &lam * &w.c1;
    m.view_mut((ow, 0), (nv, nx)).copy_from(&(-&lc1));
    m.view_mut((0, ow), (nx, nv)).copy_from(&(-lc1.transpose()));
    let ld11 = &lam * &w.d11;
    m.view_mut((ow, ow), (nv, nv)).copy_from(&(&lam * 2.0 - &ld11 - ld11.transpose()));
    let sc2 = &s * &w.c2;
    m.view_mut((ou, 0), (nu, nx)).copy_from(&sc2);
    m.view_mut((0, ou), (nx, nu)).copy_from(&sc2.transpose());
    let uw = &s * &w.d21 - w.d12.transpose() * &lam;
    m.view_mut((ou, ow), (nu, nv)).copy_from(&uw);
    m.view_mut((ow, ou), (nv, nu)).copy_from(&uw.transpose());
    let sd = &s * &w.d22;
    m.view_mut((ou, ou), (nu, nu)).copy_from(&(&r + &sd + sd.transpose()));

    let mut top = DMatrix::zeros(nx, n);
    top.view_mut((0, 0), (nx, nx)).copy_from(&w.a);
    top.view_mut((0, ow), (nx, nv)).copy_from(&w.b1);
    top.view_mut((0, ou), (nx, nu)).copy_from(&w.b2);
    let mut bot = DMatrix::zeros(ny, n);
    bot.view_mut((0, 0), (ny, nx)).copy_from(&w.c2);
    bot.view_mut((0, ow), (ny, nv)).copy_from(&w.d21);
    bot.view_mut((0, ou), (ny, nu)).copy_from(&w.d22);

    m -= top.transpose() * &w.p * &top;
    m += bot.transpose() * &q * &bot * output_sign;
    Ok((&m + m.transpose()) * 0.5)
}

/// Smallest eigenvalue of the dissipation matrix; positive means certified.
pub fn lmi_certificate(w: &RenWeights, iqc: &IqcSpec) -> Result<f64> {
    let m = lmi_matrix(w, iqc, 1.0)?;
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    min_sym_eigenvalue(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ren::{direct_construct, RenDims, RenFreeParams};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lyapunov_degeneration() {
        let mut w = RenWeights::zeros(RenDims::new(2, 0, 0, 0));
        w.a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let iqc = IqcSpec::Lipschitz { gamma: 1.0 };
        let expected = min_sym_eigenvalue(&(&w.p - w.a.transpose() * &w.p * &w.a)).unwrap();
        assert!((lmi_certificate(&w, &iqc).unwrap() - expected).abs() < 1e-14);
        w.a *= 4.0;
        assert!(lmi_certificate(&w, &iqc).unwrap() < 0.0);
    }

    #[test]
    fn b2_blowup_breaks_certificate() {
        let dims = RenDims::new(3, 4, 2, 1);
        let iqc = IqcSpec::Lipschitz { gamma: 5.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = direct_construct(&RenFreeParams::init(dims, iqc.clone(), true, 1.0, &mut rng).unwrap()).unwrap();
        assert!(lmi_certificate(&w, &iqc).unwrap() > 0.0);
        w.b2 *= 1e6;
        assert!(lmi_certificate(&w, &iqc).unwrap() < 0.0);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mut w = RenWeights::zeros(RenDims::new(2, 1, 1, 1));
        w.bx = DVector::zeros(3);
        assert!(lmi_certificate(&w, &IqcSpec::Passive).is_err());
    }
}

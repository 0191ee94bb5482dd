use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{ren_step, RenState, RenWeights};
use crate::error::Result;

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn pair_ratio(w: &RenWeights, seed: u64, horizon: usize) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = gaussian(w.dims.n_x, &mut rng);
    let (mut s1, mut s2) = (RenState { x: x0.clone() }, RenState { x: x0 });
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..horizon {
        let u1 = gaussian(w.dims.n_u, &mut rng);
        let u2 = gaussian(w.dims.n_u, &mut rng);
        let (n1, y1) = ren_step(w, &s1, &u1)?;
        let (n2, y2) = ren_step(w, &s2, &u2)?;
        num += (y1 - y2).norm_squared();
        den += (u1 - u2).norm_squared();
        s1 = n1;
        s2 = n2;
    }
    Ok((den > 0.0).then(|| (num / den).sqrt()))
}

/// Largest observed ratio `|y1 - y2| / |u1 - u2|` over random input pairs from a
/// shared random initial state. Pairs with identical inputs are skipped.
pub fn empirical_gain(w: &RenWeights, n_pairs: usize, horizon: usize, rng: &mut impl Rng) -> Result<f64> {
    let seeds: Vec<u64> = (0..n_pairs).map(|_| rng.random()).collect();
    let ratios = seeds
        .par_iter()
        .map(|&s| pair_ratio(w, s, horizon))
        .collect::<Result<Vec<_>>>()?;
    Ok(ratios.into_iter().flatten().fold(0.0, f64::max))
}

//! Sliced 1-Wasserstein distance between empirical point clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Number of random directions used by [`sliced_w1`].
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Exact W1 between two empirical distributions on the line, each point
/// carrying equal mass. Computed as `∫ |F(x) − G(x)| dx` over the merged
/// support, so the sample sizes may differ.
pub fn w1_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("W1 needs non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("W1 samples must be finite".into()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (wx, wy) = (1.0 / xs.len() as f64, 1.0 / ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut fx, mut fy) = (0.0f64, 0.0f64);
    let mut prev = xs[0].min(ys[0]);
    let mut total = 0.0;
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        total += (fx - fy).abs() * (next - prev);
        while i < xs.len() && xs[i] == next {
            fx += wx;
            i += 1;
        }
        while j < ys.len() && ys[j] == next {
            fy += wy;
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Random unit directions in `dim` dimensions.
pub fn projections(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Mean over `count` seeded random directions of the 1-D W1 between the
/// projected clouds.
pub fn sliced_w1<P: AsRef<[f64]>>(a: &[P], b: &[P], count: usize, seed: u64) -> Result<f64> {
    let dim = a
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| Error::InvalidArgument("empty point cloud".into()))?;
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    if let Some(p) = a.iter().chain(b).find(|p| p.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.as_ref().len(),
        });
    }
    let project = |cloud: &[P], dir: &[f64]| -> Vec<f64> {
        cloud
            .iter()
            .map(|p| p.as_ref().iter().zip(dir).map(|(x, d)| x * d).sum())
            .collect()
    };
    let mut total = 0.0;
    for dir in projections(dim, count, seed) {
        total += w1_1d(&project(a, &dir), &project(b, &dir))?;
    }
    Ok(total / count as f64)
}

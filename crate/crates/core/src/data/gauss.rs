use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};

/// Isotropic Gaussian blobs, `n_per_class` samples per mean, class by class.
pub fn gen_gaussian_2d(means: &[[f64; 2]], sigma: f64, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if means.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 class means, got {}", means.len())));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    for (i, a) in means.iter().enumerate() {
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("mean {i} is not finite")));
        }
        if means[..i].contains(a) {
            warn!("class mean {a:?} appears more than once; classes will overlap completely");
        }
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(means.len() * n_per_class * 2);
    let mut labels = Vec::with_capacity(means.len() * n_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            inputs.push(mean[0] + noise.sample(&mut rng));
            inputs.push(mean[1] + noise.sample(&mut rng));
            labels.push(class);
        }
    }
    Dataset::new(vec![2], inputs, labels, means.len())
}

/// `n` points uniform over the square `[lo, hi]²`.
pub fn uniform_points(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]).collect()
}

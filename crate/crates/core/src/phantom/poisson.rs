use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Draws from Poisson(`mean`); a nonpositive or non-finite mean gives 0.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0 && mean.is_finite()) {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as u64)
}

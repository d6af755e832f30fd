//! Thin wrappers over `rand_distr` for the conjugate draws used by the sampler.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Positive draws are kept inside `[TINY, HUGE]` so that chains with extreme
/// hyperparameters stay finite instead of propagating `0` or `inf`.
pub const TINY: f64 = 1e-300;
pub const HUGE: f64 = 1e300;

/// Draw from `IG(shape, rate)`, parameterised so that the mean is `rate / (shape - 1)`.
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate >= 0.0, "IG({shape}, {rate})");
    let g: f64 = Gamma::new(shape, 1.0)
        .expect("inverse-gamma shape must be positive")
        .sample(rng);
    (rate.clamp(TINY, HUGE) / g).clamp(TINY, HUGE)
}

/// Draw from `Gamma(shape, scale)` with mean `shape * scale`.
pub fn gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && scale > 0.0, "G({shape}, {scale})");
    let g: f64 = Gamma::new(shape, scale.clamp(TINY, HUGE))
        .expect("gamma parameters must be positive")
        .sample(rng);
    g.clamp(TINY, HUGE)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_gamma_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let m = (0..n).map(|_| inv_gamma(4.0, 3.0, &mut rng)).sum::<f64>() / n as f64;
        // IG(4, 3): mean 1, sd 1/sqrt(2)
        assert!((m - 1.0).abs() < 5.0 * (0.5f64).sqrt() / (n as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn gamma_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200_000;
        let m = (0..n).map(|_| gamma(3.0, 0.5, &mut rng)).sum::<f64>() / n as f64;
        let sd = (3.0f64).sqrt() * 0.5;
        assert!((m - 1.5).abs() < 5.0 * sd / (n as f64).sqrt(), "mean {m}");
    }
}

//! Gaussian distributions truncated to a set of half-spaces `x_i >= 0`.
//!
//! Sampling uses exact Hamiltonian dynamics: after whitening, the unconstrained
//! motion is harmonic and can be integrated in closed form, so the only
//! events to track are the times at which the trajectory meets a wall, where
//! the velocity is reflected. Each transition leaves the truncated Gaussian
//! exactly invariant.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::std_normal;
use crate::error::{check_dim, Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Bounce budget per trajectory; a transition that exceeds it is rejected.
const MAX_BOUNCES: usize = 10_000;

/// HMC transitions used by [`sample_trunc_mvn`] to forget its starting point.
pub const STANDALONE_TRANSITIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    PositiveOrthant,
    Full,
}

/// `N(mean, F F^T)` restricted to `x_i >= 0` for the flagged coordinates.
#[derive(Debug, Clone)]
pub struct TruncatedGaussian {
    mean: DVector<f64>,
    /// `x = mean + factor * z` with `z` standard normal.
    factor: DMatrix<f64>,
    /// inverse of `factor`
    unfactor: DMatrix<f64>,
    constrained: Vec<bool>,
    // Rows of `factor` for the constrained coordinates, flattened, with their
    // squared norms. Kept separately for the inner loop.
    walls: Vec<f64>,
    wall_norm2: Vec<f64>,
    wall_index: Vec<usize>,
}

impl TruncatedGaussian {
    /// Build from a precision matrix `Q` and linear term `b`, i.e. the density
    /// `exp(-x^T Q x / 2 + b^T x)`, whose mean is `Q^-1 b`.
    pub fn from_precision(q: DMatrix<f64>, b: &DVector<f64>, constrained: Vec<bool>) -> Result<Self> {
        let d = q.nrows();
        check_dim("precision matrix", d, q.ncols())?;
        check_dim("linear term", d, b.len())?;
        check_dim("constraint mask", d, constrained.len())?;
        let chol = q.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            context: format!("{d}x{d} conditional precision"),
        })?;
        let mean = chol.solve(b);
        let l = chol.l();
        // Q = L L^T  =>  covariance = L^-T L^-1, so factor = L^-T
        let lt = l.transpose();
        let factor = lt
            .solve_upper_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: "triangular factor inversion".into(),
            })?;
        Ok(Self::assemble(mean, factor, lt, constrained))
    }

    /// Build from a mean and a covariance matrix.
    pub fn from_covariance(mean: DVector<f64>, cov: DMatrix<f64>, support: Support) -> Result<Self> {
        let d = mean.len();
        check_dim("covariance rows", d, cov.nrows())?;
        check_dim("covariance cols", d, cov.ncols())?;
        let chol = cov.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            context: format!("{d}x{d} covariance"),
        })?;
        let factor = chol.l();
        let unfactor = factor
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: "triangular factor inversion".into(),
            })?;
        let constrained = vec![support == Support::PositiveOrthant; d];
        Ok(Self::assemble(mean, factor, unfactor, constrained))
    }

    fn assemble(mean: DVector<f64>, factor: DMatrix<f64>, unfactor: DMatrix<f64>, constrained: Vec<bool>) -> Self {
        let d = mean.len();
        let wall_index: Vec<usize> = (0..d).filter(|&i| constrained[i]).collect();
        let mut walls = Vec::with_capacity(wall_index.len() * d);
        let mut wall_norm2 = Vec::with_capacity(wall_index.len());
        for &i in &wall_index {
            let row: Vec<f64> = factor.row(i).iter().copied().collect();
            wall_norm2.push(row.iter().map(|v| v * v).sum());
            walls.extend(row);
        }
        Self {
            mean,
            factor,
            unfactor,
            constrained,
            walls,
            wall_norm2,
            wall_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean of the untruncated Gaussian.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance of the untruncated Gaussian.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn is_feasible(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.constrained).all(|(v, &c)| !c || *v >= 0.0)
    }

    /// A draw from the untruncated Gaussian.
    pub fn sample_unconstrained<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| std_normal(rng));
        &self.mean + &self.factor * z
    }

    /// A feasible point near the mode, used to start a fresh chain.
    pub fn interior_point(&self) -> DVector<f64> {
        let mut x = self.mean.clone();
        for i in 0..self.dim() {
            if self.constrained[i] {
                let sd = self.factor.row(i).norm();
                x[i] = x[i].max(0.0) + 1e-3 * sd;
            }
        }
        x
    }

    /// One exact HMC transition with travel time `pi / 2`, starting from the
    /// feasible point `x`, which is overwritten with the new state.
    ///
    /// Returns the number of wall reflections.
    pub fn hmc_step<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R) -> usize {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let centred = DVector::from_iterator(d, x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        let mut z: Vec<f64> = (&self.unfactor * centred).iter().copied().collect();
        let mut v: Vec<f64> = (0..d).map(|_| std_normal(rng)).collect();

        let mut remaining = FRAC_PI_2;
        let mut bounces = 0usize;
        loop {
            let mut hit_t = f64::INFINITY;
            let mut hit_wall = usize::MAX;
            for (k, &i) in self.wall_index.iter().enumerate() {
                let f = &self.walls[k * d..(k + 1) * d];
                let fz: f64 = f.iter().zip(&z).map(|(a, b)| a * b).sum();
                let fv: f64 = f.iter().zip(&v).map(|(a, b)| a * b).sum();
                let g = self.mean[i];
                // h(t) = fz cos t + fv sin t + g = u cos(t - phi) + g
                let u = fz.hypot(fv);
                if u <= g.abs() || u == 0.0 {
                    continue;
                }
                let phi = fv.atan2(fz);
                // the root where h crosses from positive to negative
                let mut t = (phi + (-g / u).clamp(-1.0, 1.0).acos()).rem_euclid(TWO_PI);
                if t > TWO_PI - 1e-10 {
                    t = 0.0;
                }
                if t < hit_t {
                    hit_t = t;
                    hit_wall = k;
                }
            }
            if hit_t >= remaining {
                let (c, s) = (remaining.cos(), remaining.sin());
                for (zi, vi) in z.iter_mut().zip(v.iter_mut()) {
                    let zn = *zi * c + *vi * s;
                    *vi = -*zi * s + *vi * c;
                    *zi = zn;
                }
                break;
            }
            let (c, s) = (hit_t.cos(), hit_t.sin());
            for (zi, vi) in z.iter_mut().zip(v.iter_mut()) {
                let zn = *zi * c + *vi * s;
                *vi = -*zi * s + *vi * c;
                *zi = zn;
            }
            let f = &self.walls[hit_wall * d..(hit_wall + 1) * d];
            let fv: f64 = f.iter().zip(&v).map(|(a, b)| a * b).sum();
            let k = 2.0 * fv / self.wall_norm2[hit_wall];
            for (vi, fi) in v.iter_mut().zip(f) {
                *vi -= k * fi;
            }
            remaining -= hit_t;
            bounces += 1;
            if bounces > MAX_BOUNCES {
                // symmetric rejection: the reversed trajectory has the same count
                return bounces;
            }
        }

        let zv = DVector::from_vec(z);
        let xn = &self.mean + &self.factor * zv;
        for i in 0..d {
            x[i] = if self.constrained[i] { xn[i].max(0.0) } else { xn[i] };
        }
        bounces
    }
}

/// One draw from `N(mu, sigma)` restricted to `support`.
///
/// The full-support case is sampled directly. For the positive orthant a
/// fresh HMC chain is started at an interior point and advanced
/// [`STANDALONE_TRANSITIONS`] times.
pub fn sample_trunc_mvn<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    support: Support,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let tg = TruncatedGaussian::from_covariance(mu.clone(), sigma.clone(), support)?;
    match support {
        Support::Full => Ok(tg.sample_unconstrained(rng)),
        Support::PositiveOrthant => {
            let mut x: Vec<f64> = tg.interior_point().iter().copied().collect();
            for _ in 0..STANDALONE_TRANSITIONS {
                tg.hmc_step(&mut x, rng);
            }
            Ok(DVector::from_vec(x))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precision_and_covariance_forms_agree() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.2, 0.3, 1.0, 0.1, -0.2, 0.1, 0.5]);
        let mean = DVector::from_vec(vec![0.2, -0.4, 1.0]);
        let q = cov.clone().try_inverse().unwrap();
        let b = &q * &mean;
        let tg = TruncatedGaussian::from_precision(q, &b, vec![true; 3]).unwrap();
        assert_relative_eq!(tg.mean(), &mean, epsilon = 1e-12);
        assert_relative_eq!(tg.covariance(), cov, epsilon = 1e-12);
    }

    #[test]
    fn non_spd_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = sample_trunc_mvn(&DVector::zeros(2), &cov, Support::Full, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn half_normal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let tg = TruncatedGaussian::from_covariance(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            Support::PositiveOrthant,
        )
        .unwrap();
        let mut x = vec![0.5];
        let mut sum = 0.0;
        for _ in 0..n {
            tg.hmc_step(&mut x, &mut rng);
            assert!(x[0] >= 0.0);
            sum += x[0];
        }
        let mean = sum / n as f64;
        assert!((mean - (2.0 / PI).sqrt()).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn full_support_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| sample_trunc_mvn(&mu, &cov, Support::Full, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().fold(DVector::zeros(2), |acc, d| acc + d) / n as f64;
        let mut c = DMatrix::zeros(2, 2);
        for d in &draws {
            let e = d - &mean;
            c += &e * e.transpose();
        }
        c /= (n - 1) as f64;
        assert!((mean[0] - 1.0).abs() < 4.0 / (n as f64).sqrt());
        assert!((mean[1] + 2.0).abs() < 4.0 * 2f64.sqrt() / (n as f64).sqrt());
        assert_relative_eq!(c, cov, epsilon = 0.04);
    }

    #[test]
    fn hmc_stays_feasible_with_partial_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = DMatrix::from_row_slice(3, 3, &[50.0, 45.0, 0.0, 45.0, 50.0, 10.0, 0.0, 10.0, 30.0]);
        let b = DVector::from_vec(vec![-5.0, 3.0, 1.0]);
        let tg = TruncatedGaussian::from_precision(q, &b, vec![true, true, false]).unwrap();
        let mut x = tg.interior_point().iter().copied().collect::<Vec<_>>();
        let mut saw_negative_free = false;
        for _ in 0..5_000 {
            tg.hmc_step(&mut x, &mut rng);
            assert!(tg.is_feasible(&x), "{x:?}");
            saw_negative_free |= x[2] < 0.0;
        }
        assert!(saw_negative_free);
    }

    #[test]
    fn starts_on_a_wall() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tg = TruncatedGaussian::from_covariance(
            DVector::from_vec(vec![-1.0, -1.0]),
            DMatrix::identity(2, 2),
            Support::PositiveOrthant,
        )
        .unwrap();
        let mut x = vec![0.0, 0.0];
        for _ in 0..1_000 {
            tg.hmc_step(&mut x, &mut rng);
            assert!(x.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}

//! Posterior summaries of a chain: MMSE estimates, nonlinearity energies and
//! the detection test.
//!
//! Everything is computed by [`PosteriorAccumulator`], which consumes samples
//! one at a time; the functions taking a [`ChainOutput`] are conveniences.

use crate::error::{check_dim, Error, Result};
use crate::model::{AbundanceField, Grid, HyperCube, InteractionBasis, NonlinField, PixelField};
use crate::sampler::{ChainOutput, ChainSample, SampleSink};

/// Default ratio threshold of the detection statistic.
pub const DEFAULT_ETA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub prob_map: Grid,
    pub decision_map: Vec<bool>,
    pub eta: f64,
    pub a0: f64,
    pub a1: f64,
}

impl DetectionResult {
    pub fn threshold(&self) -> f64 {
        self.a1 / (self.a0 + self.a1)
    }

    pub fn n_detected(&self) -> usize {
        self.decision_map.iter().filter(|d| **d).count()
    }
}

/// Posterior means and exceedance frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub n_samples: usize,
    pub abundances: AbundanceField,
    pub gamma: NonlinField,
    pub nonlin_energy: Grid,
    pub s: Grid,
    /// One probability map per requested `eta`, in request order.
    pub prob_maps: Vec<(f64, Grid)>,
}

impl PosteriorSummary {
    /// Posterior mean reconstruction `G [mean a; mean gamma]` (the posterior
    /// mean of the noise-free pixel, since it is linear in both).
    pub fn reconstruction(&self, basis: &InteractionBasis) -> Result<HyperCube> {
        mmse_reconstruction(&self.abundances, &self.gamma, basis)
    }

    pub fn prob_map(&self, eta: f64) -> Option<&Grid> {
        self.prob_maps.iter().find(|(e, _)| *e == eta).map(|(_, g)| g)
    }
}

/// Streaming reducer over retained samples.
pub struct PosteriorAccumulator<'a> {
    y: &'a HyperCube,
    basis: &'a InteractionBasis,
    etas: Vec<f64>,
    count: usize,
    sum_a: Vec<f64>,
    sum_gamma: Vec<f64>,
    sum_energy: Vec<f64>,
    sum_s: Vec<f64>,
    exceed: Vec<Vec<usize>>,
}

impl<'a> PosteriorAccumulator<'a> {
    pub fn new(y: &'a HyperCube, basis: &'a InteractionBasis, etas: &[f64]) -> Result<Self> {
        check_dim("cube bands", basis.bands(), y.bands())?;
        if let Some(e) = etas.iter().find(|e| !(**e > 0.0)) {
            return Err(Error::invalid("eta", format!("must be positive, got {e}")));
        }
        let n = y.n_pixels();
        Ok(Self {
            y,
            basis,
            etas: etas.to_vec(),
            count: 0,
            sum_a: vec![0.0; n * basis.n_endmembers()],
            sum_gamma: vec![0.0; n * basis.n_nonlinear()],
            sum_energy: vec![0.0; n],
            sum_s: vec![0.0; n],
            exceed: vec![vec![0; n]; etas.len()],
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<PosteriorSummary> {
        if self.count == 0 {
            return Err(Error::EmptyChain);
        }
        let (r, k, rows, cols) = (
            self.basis.n_endmembers(),
            self.basis.n_nonlinear(),
            self.y.rows(),
            self.y.cols(),
        );
        let c = self.count as f64;
        let mean = |v: Vec<f64>| v.into_iter().map(|x| x / c).collect::<Vec<_>>();
        let prob_maps = self
            .etas
            .iter()
            .zip(self.exceed)
            .map(|(eta, counts)| (*eta, Grid::from_vec(rows, cols, counts.into_iter().map(|n| n as f64 / c).collect())))
            .collect();
        Ok(PosteriorSummary {
            n_samples: self.count,
            abundances: PixelField::new(r, rows, cols, mean(self.sum_a))?,
            gamma: PixelField::new(k, rows, cols, mean(self.sum_gamma))?,
            nonlin_energy: Grid::from_vec(rows, cols, mean(self.sum_energy)),
            s: Grid::from_vec(rows, cols, mean(self.sum_s)),
            prob_maps,
        })
    }
}

impl SampleSink for PosteriorAccumulator<'_> {
    fn accept(&mut self, sample: &ChainSample) -> Result<()> {
        let shape = (
            sample.abundances.depth(),
            sample.gamma.depth(),
            sample.abundances.n_pixels(),
            sample.s.as_slice().len(),
        );
        let expected = (
            self.basis.n_endmembers(),
            self.basis.n_nonlinear(),
            self.y.n_pixels(),
            self.y.n_pixels(),
        );
        if shape != expected {
            return Err(Error::invalid(
                "chain sample",
                format!("shape {shape:?} does not match (R, K, pixels, pixels) = {expected:?}"),
            ));
        }
        self.count += 1;
        for (acc, v) in self.sum_a.iter_mut().zip(sample.abundances.as_slice()) {
            *acc += v;
        }
        for (acc, v) in self.sum_gamma.iter_mut().zip(sample.gamma.as_slice()) {
            *acc += v;
        }
        for (acc, v) in self.sum_s.iter_mut().zip(sample.s.as_slice()) {
            *acc += v;
        }
        let l = self.basis.bands();
        let mut phi = vec![0.0; l];
        let mut lin = vec![0.0; l];
        let m = self.basis.endmembers();
        for p in 0..self.y.n_pixels() {
            self.basis.phi_into(sample.gamma.pixel(p), &mut phi);
            m.mix(sample.abundances.pixel(p), &mut lin);
            let energy: f64 = phi.iter().map(|v| v * v).sum();
            let resid: f64 = self
                .y
                .pixel(p)
                .iter()
                .zip(&lin)
                .zip(&phi)
                .map(|((y, x), f)| (y - x - f).powi(2))
                .sum();
            self.sum_energy[p] += energy;
            for (e, eta) in self.etas.iter().enumerate() {
                // a zero residual makes the ratio infinite
                if resid == 0.0 || energy / resid > *eta {
                    self.exceed[e][p] += 1;
                }
            }
        }
        Ok(())
    }
}

fn summarize(chain: &ChainOutput, y: &HyperCube, basis: &InteractionBasis, etas: &[f64]) -> Result<PosteriorSummary> {
    let mut acc = PosteriorAccumulator::new(y, basis, etas)?;
    for s in &chain.samples {
        acc.accept(s)?;
    }
    acc.finish()
}

fn first_sample(chain: &ChainOutput) -> Result<&ChainSample> {
    chain.samples.first().ok_or(Error::EmptyChain)
}

/// Elementwise mean of the retained abundance samples.
pub fn mmse_abundances(chain: &ChainOutput) -> Result<AbundanceField> {
    let first = first_sample(chain)?;
    let mut sum = vec![0.0; first.abundances.as_slice().len()];
    for s in &chain.samples {
        for (acc, v) in sum.iter_mut().zip(s.abundances.as_slice()) {
            *acc += v;
        }
    }
    let c = chain.samples.len() as f64;
    PixelField::new(
        first.abundances.depth(),
        first.abundances.rows(),
        first.abundances.cols(),
        sum.into_iter().map(|v| v / c).collect(),
    )
}

/// Elementwise mean of the retained scale samples.
pub fn mmse_s(chain: &ChainOutput) -> Result<Grid> {
    let first = first_sample(chain)?;
    let mut sum = vec![0.0; first.s.as_slice().len()];
    for s in &chain.samples {
        for (acc, v) in sum.iter_mut().zip(s.s.as_slice()) {
            *acc += v;
        }
    }
    let c = chain.samples.len() as f64;
    Ok(Grid::from_vec(first.s.rows(), first.s.cols(), sum.into_iter().map(|v| v / c).collect()))
}

/// Per pixel, the mean over samples of `|phi(gamma)|^2`.
pub fn mmse_nonlin_energy(chain: &ChainOutput, basis: &InteractionBasis) -> Result<Grid> {
    let first = first_sample(chain)?;
    let (rows, cols) = (first.s.rows(), first.s.cols());
    let n = rows * cols;
    let mut sum = vec![0.0; n];
    let mut phi = vec![0.0; basis.bands()];
    for s in &chain.samples {
        check_dim("gamma depth", basis.n_nonlinear(), s.gamma.depth())?;
        for (p, acc) in sum.iter_mut().enumerate() {
            basis.phi_into(s.gamma.pixel(p), &mut phi);
            *acc += phi.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let c = chain.samples.len() as f64;
    Ok(Grid::from_vec(rows, cols, sum.into_iter().map(|v| v / c).collect()))
}

/// Fraction of samples whose energy ratio `|phi|^2 / |y - Ma - phi|^2` exceeds `eta`.
pub fn nonlin_probability(chain: &ChainOutput, y: &HyperCube, basis: &InteractionBasis, eta: f64) -> Result<Grid> {
    let mut summary = summarize(chain, y, basis, &[eta])?;
    Ok(summary.prob_maps.remove(0).1)
}

/// Decide "nonlinear" where the probability exceeds `a1 / (a0 + a1)`.
pub fn detect(prob_map: &Grid, eta: f64, a0: f64, a1: f64) -> Result<DetectionResult> {
    if !(a0 > 0.0 && a1 > 0.0) {
        return Err(Error::invalid("loss weights", format!("a0 and a1 must be positive, got {a0}, {a1}")));
    }
    let threshold = a1 / (a0 + a1);
    Ok(DetectionResult {
        prob_map: prob_map.clone(),
        decision_map: prob_map.as_slice().iter().map(|p| *p > threshold).collect(),
        eta,
        a0,
        a1,
    })
}

/// All posterior summaries in one pass over the chain.
pub fn posterior_summary(
    chain: &ChainOutput,
    y: &HyperCube,
    basis: &InteractionBasis,
    etas: &[f64],
) -> Result<PosteriorSummary> {
    summarize(chain, y, basis, etas)
}

/// `M a + phi(gamma)` at every pixel.
pub fn mmse_reconstruction(a: &AbundanceField, gamma: &NonlinField, basis: &InteractionBasis) -> Result<HyperCube> {
    check_dim("abundance depth", basis.n_endmembers(), a.depth())?;
    check_dim("gamma depth", basis.n_nonlinear(), gamma.depth())?;
    check_dim("pixel count", a.n_pixels(), gamma.n_pixels())?;
    let l = basis.bands();
    let mut data = vec![0.0; l * a.n_pixels()];
    for (p, out) in data.chunks_exact_mut(l).enumerate() {
        basis.reconstruct_into(a.pixel(p), gamma.pixel(p), out);
    }
    HyperCube::new(l, a.rows(), a.cols(), data)
}

//! Mixing model: endmembers, the polynomial interaction basis, per-pixel
//! fields and the Gaussian likelihood.
//!
//! All spectra are stored pixel-major with the band index varying fastest,
//! so a pixel's spectrum is a contiguous slice.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Observed reflectance image: `bands` values for each of `rows * cols` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    bands: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl HyperCube {
    pub fn new(bands: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if bands == 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid(
                "cube dimensions",
                format!("{bands}x{rows}x{cols} has an empty axis"),
            ));
        }
        check_dim("cube payload", bands * rows * cols, data.len())?;
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "cube data",
                format!("non-finite value at flat index {k}"),
            ));
        }
        Ok(Self {
            bands,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(bands: usize, rows: usize, cols: usize) -> Self {
        Self {
            bands,
            rows,
            cols,
            data: vec![0.0; bands * rows * cols],
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.bands..(p + 1) * self.bands]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.bands..(p + 1) * self.bands]
    }

    pub fn pixel_at(&self, i: usize, j: usize) -> &[f64] {
        self.pixel(i * self.cols + j)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Endmember matrix `M` (bands x materials), stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet {
    bands: usize,
    count: usize,
    columns: Vec<f64>,
}

impl EndmemberSet {
    /// Build from column-contiguous data (`count` spectra of `bands` values each).
    pub fn from_columns(bands: usize, count: usize, columns: Vec<f64>) -> Result<Self> {
        if bands == 0 || count == 0 {
            return Err(Error::invalid("endmembers", "need at least one band and one material"));
        }
        check_dim("endmember matrix", bands * count, columns.len())?;
        for (k, v) in columns.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid(
                    "endmembers",
                    format!("entry {v} (band {}, material {}) is negative or non-finite", k % bands, k / bands),
                ));
            }
        }
        for r in 0..count {
            if columns[r * bands..(r + 1) * bands].iter().all(|&v| v == 0.0) {
                return Err(Error::invalid("endmembers", format!("material {r} is identically zero")));
            }
        }
        Ok(Self {
            bands,
            count,
            columns,
        })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        // nalgebra is column-major already
        Self::from_columns(m.nrows(), m.ncols(), m.as_slice().to_vec())
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn column(&self, r: usize) -> &[f64] {
        &self.columns[r * self.bands..(r + 1) * self.bands]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.bands, self.count, &self.columns)
    }

    /// `M a` for one abundance vector.
    pub fn mix(&self, a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                for (o, m) in out.iter_mut().zip(self.column(r)) {
                    *o += ar * m;
                }
            }
        }
    }
}

/// Extended matrix `G = [M, nonlinear interaction spectra]`.
///
/// The nonlinear columns come in a fixed order: the scaled cross products
/// `sqrt(2) m_k * m_k'` for `k < k'` in lexicographic order, then the squares
/// `m_k * m_k`. The coefficient vector `gamma` uses the same order.
#[derive(Debug, Clone)]
pub struct InteractionBasis {
    endmembers: EndmemberSet,
    labels: Vec<(usize, usize)>,
    g: DMatrix<f64>,
}

/// Number of nonlinear coefficients for `r` endmembers.
pub fn n_interactions(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Interaction pairs in coefficient order (0-based): cross terms then squares.
pub fn interaction_labels(r: usize) -> Vec<(usize, usize)> {
    let mut labels = Vec::with_capacity(n_interactions(r));
    for k in 0..r {
        for kp in k + 1..r {
            labels.push((k, kp));
        }
    }
    labels.extend((0..r).map(|k| (k, k)));
    labels
}

impl InteractionBasis {
    pub fn new(endmembers: &EndmemberSet) -> Self {
        let (l, r) = (endmembers.bands(), endmembers.count());
        let labels = interaction_labels(r);
        let k = labels.len();
        assert_eq!(k, n_interactions(r));
        let mut g = DMatrix::zeros(l, r + k);
        for c in 0..r {
            g.column_mut(c).copy_from_slice(endmembers.column(c));
        }
        for (c, &(a, b)) in labels.iter().enumerate() {
            let scale = if a == b { 1.0 } else { SQRT_2 };
            let (ma, mb) = (endmembers.column(a), endmembers.column(b));
            for band in 0..l {
                g[(band, r + c)] = scale * ma[band] * mb[band];
            }
        }
        Self {
            endmembers: endmembers.clone(),
            labels,
            g,
        }
    }

    pub fn endmembers(&self) -> &EndmemberSet {
        &self.endmembers
    }

    pub fn bands(&self) -> usize {
        self.endmembers.bands()
    }

    /// R
    pub fn n_endmembers(&self) -> usize {
        self.endmembers.count()
    }

    /// K = R(R+1)/2
    pub fn n_nonlinear(&self) -> usize {
        self.labels.len()
    }

    pub fn n_columns(&self) -> usize {
        self.g.ncols()
    }

    pub fn labels(&self) -> &[(usize, usize)] {
        &self.labels
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Nonlinear perturbation `phi(gamma)`.
    pub fn phi(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        check_dim("phi coefficients", self.n_nonlinear(), gamma.len())?;
        let mut out = vec![0.0; self.bands()];
        self.phi_into(gamma, &mut out);
        Ok(out)
    }

    pub(crate) fn phi_into(&self, gamma: &[f64], out: &mut [f64]) {
        let r = self.n_endmembers();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, &gc) in gamma.iter().enumerate() {
            if gc != 0.0 {
                for (o, v) in out.iter_mut().zip(self.g.column(r + c).iter()) {
                    *o += gc * v;
                }
            }
        }
    }

    /// Noise-free pixel `M a + phi(gamma)`.
    pub fn reconstruct_pixel(&self, a: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
        check_dim("abundance vector", self.n_endmembers(), a.len())?;
        check_dim("nonlinear coefficients", self.n_nonlinear(), gamma.len())?;
        let mut out = vec![0.0; self.bands()];
        self.reconstruct_into(a, gamma, &mut out);
        Ok(out)
    }

    pub(crate) fn reconstruct_into(&self, a: &[f64], gamma: &[f64], out: &mut [f64]) {
        let r = self.n_endmembers();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, &coef) in a.iter().chain(gamma).enumerate() {
            if coef != 0.0 {
                debug_assert!(c < r + self.n_nonlinear());
                for (o, v) in out.iter_mut().zip(self.g.column(c).iter()) {
                    *o += coef * v;
                }
            }
        }
    }
}

/// Whether the nonlinearity coefficients are restricted to the positive orthant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// G-RCA+: `gamma >= 0`.
    #[default]
    PositiveOnly,
    /// G-RCA: `gamma` unrestricted.
    Unconstrained,
}

/// A vector of `depth` values at each pixel, pixel-major.
///
/// Used for abundances (`depth = R`) and nonlinearity coefficients (`depth = K`).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelField {
    depth: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

pub type AbundanceField = PixelField;
pub type NonlinField = PixelField;

impl PixelField {
    pub fn new(depth: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("pixel field", depth * rows * cols, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pixel field", "non-finite entry"));
        }
        Ok(Self {
            depth,
            rows,
            cols,
            values,
        })
    }

    pub fn filled(depth: usize, rows: usize, cols: usize, value: f64) -> Self {
        Self {
            depth,
            rows,
            cols,
            values: vec![value; depth * rows * cols],
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.depth..(p + 1) * self.depth]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.values[p * self.depth..(p + 1) * self.depth]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.depth.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// One component as a `rows x cols` grid.
    pub fn component(&self, c: usize) -> Grid {
        Grid::from_vec(
            self.rows,
            self.cols,
            self.values.iter().skip(c).step_by(self.depth).copied().collect(),
        )
    }

    /// True when every entry is non-negative.
    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }
}

/// A scalar per node of a rectangular grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "grid shape does not match data");
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Per-band noise variances, the diagonal of the noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariances(Vec<f64>);

impl NoiseVariances {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("noise variance", format!("{v} is not a positive finite value")));
        }
        Ok(Self(values))
    }

    pub fn constant(bands: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; bands])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fully normalised Gaussian log-likelihood of the image.
pub fn log_likelihood(
    y: &HyperCube,
    a: &AbundanceField,
    gamma: &NonlinField,
    sigma2: &NoiseVariances,
    basis: &InteractionBasis,
) -> Result<f64> {
    check_dim("likelihood bands", basis.bands(), y.bands())?;
    check_dim("likelihood noise bands", y.bands(), sigma2.len())?;
    check_dim("likelihood abundance pixels", y.n_pixels(), a.n_pixels())?;
    check_dim("likelihood nonlinear pixels", y.n_pixels(), gamma.n_pixels())?;
    check_dim("likelihood abundance depth", basis.n_endmembers(), a.depth())?;
    check_dim("likelihood nonlinear depth", basis.n_nonlinear(), gamma.depth())?;
    let s2 = sigma2.as_slice();
    let log_norm: f64 = -0.5 * s2.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>();
    let mut x = vec![0.0; y.bands()];
    let mut total = 0.0;
    for p in 0..y.n_pixels() {
        basis.reconstruct_into(a.pixel(p), gamma.pixel(p), &mut x);
        let quad: f64 = y
            .pixel(p)
            .iter()
            .zip(&x)
            .zip(s2)
            .map(|((yv, xv), v)| (yv - xv) * (yv - xv) / v)
            .sum();
        total += log_norm - 0.5 * quad;
    }
    Ok(total)
}

//! Constrained least-squares unmixing: NCLS, FCLS and FCLS on the bilinear
//! extended endmember matrix (NM).
//!
//! All three are the same convex QP `min |y - M a|^2` over `a >= 0`, with or
//! without `sum(a) = 1`, solved by a primal active-set method.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{AbundanceField, EndmemberSet, HyperCube, InteractionBasis, PixelField};

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub abundances: Vec<f64>,
    pub residual_norm: f64,
}

/// A least-squares problem with a fixed design matrix, reusable across pixels.
#[derive(Debug, Clone)]
pub struct LsqProblem {
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl LsqProblem {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        let gram = design.tr_mul(&design);
        let n = gram.nrows();
        let scale = (0..n).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
        // full column rank check on the Gram matrix, with a relative pivot floor
        let ok = scale > 0.0
            && gram.clone().cholesky().is_some_and(|c| {
                let l = c.l();
                (0..n).all(|i| l[(i, i)] * l[(i, i)] > 1e-13 * scale)
            });
        if !ok {
            return Err(Error::RankDeficient {
                context: format!("{}x{} design matrix", design.nrows(), n),
            });
        }
        Ok(Self { design, gram })
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.ncols()
    }

    /// `argmin_{a >= 0} |y - M a|`.
    pub fn ncls(&self, y: &[f64]) -> Result<LsqSolution> {
        self.solve(y, false)
    }

    /// `argmin_{a >= 0, sum a = 1} |y - M a|`.
    pub fn fcls(&self, y: &[f64]) -> Result<LsqSolution> {
        self.solve(y, true)
    }

    fn solve(&self, y: &[f64], sum_to_one: bool) -> Result<LsqSolution> {
        check_dim("pixel length", self.design.nrows(), y.len())?;
        let yv = DVector::from_column_slice(y);
        let c = self.design.tr_mul(&yv);
        let a = active_set(&self.gram, &c, sum_to_one);
        let residual_norm = (&yv - &self.design * &a).norm();
        Ok(LsqSolution {
            abundances: a.iter().copied().collect(),
            residual_norm,
        })
    }
}

/// Minimise `a^T H a / 2 - c^T a` subject to `a >= 0` and optionally `sum a = 1`.
fn active_set(h: &DMatrix<f64>, c: &DVector<f64>, sum_to_one: bool) -> DVector<f64> {
    let n = c.len();
    let tol = 1e-12 * (1.0 + c.amax()) * (1.0 + h.amax());
    let mut passive = vec![false; n];
    let mut a = DVector::zeros(n);
    if sum_to_one {
        // best vertex of the simplex
        let k = (0..n)
            .min_by(|&i, &j| {
                let fi = 0.5 * h[(i, i)] - c[i];
                let fj = 0.5 * h[(j, j)] - c[j];
                fi.total_cmp(&fj)
            })
            .unwrap_or(0);
        passive[k] = true;
        a[k] = 1.0;
    }

    let max_outer = 10 * (n + 1);
    for _ in 0..max_outer {
        let g = h * &a - c;
        let shift = if sum_to_one {
            let (sum, count) = (0..n).filter(|&i| passive[i]).fold((0.0, 0), |(s, k), i| (s + g[i], k + 1));
            sum / count as f64
        } else {
            0.0
        };
        // most violated multiplier among the active (zero) coordinates
        let candidate = (0..n)
            .filter(|&i| !passive[i])
            .map(|i| (i, g[i] - shift))
            .filter(|&(_, m)| m < -tol)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        let Some((enter, _)) = candidate else {
            break;
        };
        passive[enter] = true;

        loop {
            let z = subproblem(h, c, &passive, sum_to_one);
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                a = z;
                break;
            }
            let mut step = 1.0f64;
            for i in (0..n).filter(|&i| passive[i] && z[i] <= 0.0) {
                let denom = a[i] - z[i];
                if denom > 0.0 {
                    step = step.min(a[i] / denom);
                }
            }
            a += (z - &a) * step;
            for i in 0..n {
                if passive[i] && a[i] <= tol {
                    passive[i] = false;
                    a[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    a.iter_mut().for_each(|v| *v = v.max(0.0));
    if sum_to_one {
        let s = a.sum();
        if s > 0.0 {
            a /= s;
        }
    }
    a
}

/// Unconstrained optimum over the passive coordinates (others held at zero).
fn subproblem(h: &DMatrix<f64>, c: &DVector<f64>, passive: &[bool], sum_to_one: bool) -> DVector<f64> {
    let idx: Vec<usize> = (0..c.len()).filter(|&i| passive[i]).collect();
    let p = idx.len();
    let extra = usize::from(sum_to_one);
    let mut kkt = DMatrix::zeros(p + extra, p + extra);
    let mut rhs = DVector::zeros(p + extra);
    for (u, &i) in idx.iter().enumerate() {
        for (v, &j) in idx.iter().enumerate() {
            kkt[(u, v)] = h[(i, j)];
        }
        rhs[u] = c[i];
        if sum_to_one {
            kkt[(u, p)] = 1.0;
            kkt[(p, u)] = 1.0;
        }
    }
    if sum_to_one {
        rhs[p] = 1.0;
    }
    let sol = kkt.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(p + extra));
    let mut z = DVector::zeros(c.len());
    for (u, &i) in idx.iter().enumerate() {
        z[i] = sol[u];
    }
    z
}

pub fn ncls(y: &[f64], m: &EndmemberSet) -> Result<LsqSolution> {
    LsqProblem::new(m.matrix())?.ncls(y)
}

pub fn fcls(y: &[f64], m: &EndmemberSet) -> Result<LsqSolution> {
    LsqProblem::new(m.matrix())?.fcls(y)
}

/// `[M, m_k * m_k' for k < k']`: the extended matrix of the NM model, with
/// plain cross products and no squared terms.
pub fn nm_design(endmembers: &EndmemberSet) -> DMatrix<f64> {
    let r = endmembers.count();
    let l = endmembers.bands();
    let n_cross = r * (r - 1) / 2;
    let mut d = DMatrix::zeros(l, r + n_cross);
    for k in 0..r {
        d.column_mut(k).copy_from_slice(endmembers.column(k));
    }
    let mut col = r;
    for k in 0..r {
        for k2 in k + 1..r {
            let (a, b) = (endmembers.column(k), endmembers.column(k2));
            for band in 0..l {
                d[(band, col)] = a[band] * b[band];
            }
            col += 1;
        }
    }
    d
}

/// FCLS on the NM extended matrix.
pub fn nm_unmix(y: &[f64], basis: &InteractionBasis) -> Result<LsqSolution> {
    LsqProblem::new(nm_design(basis.endmembers()))?.fcls(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Ncls,
    Fcls,
    Nm,
}

/// Per-pixel baseline over a whole cube; also returns per-pixel residual norms.
pub fn unmix_image(cube: &HyperCube, endmembers: &EndmemberSet, method: Baseline) -> Result<(AbundanceField, Vec<f64>)> {
    check_dim("cube bands", endmembers.bands(), cube.bands())?;
    let design = match method {
        Baseline::Ncls | Baseline::Fcls => endmembers.matrix(),
        Baseline::Nm => nm_design(endmembers),
    };
    let problem = LsqProblem::new(design)?;
    let solutions: Vec<LsqSolution> = (0..cube.n_pixels())
        .into_par_iter()
        .map(|p| match method {
            Baseline::Ncls => problem.ncls(cube.pixel(p)),
            Baseline::Fcls | Baseline::Nm => problem.fcls(cube.pixel(p)),
        })
        .collect::<Result<_>>()?;
    let depth = problem.n_coefficients();
    let mut values = Vec::with_capacity(depth * cube.n_pixels());
    let mut residuals = Vec::with_capacity(cube.n_pixels());
    for s in solutions {
        values.extend(s.abundances);
        residuals.push(s.residual_norm);
    }
    Ok((PixelField::new(depth, cube.rows(), cube.cols(), values)?, residuals))
}

//! Synthetic scenes: endmembers, Potts class maps, per-class abundances and
//! forward models, and additive Gaussian noise.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::std_normal;
use crate::error::{Error, Result};
use crate::model::{AbundanceField, EndmemberSet, HyperCube, InteractionBasis, PixelField};
use crate::rng::{substream, Stream};

/// Forward model of a class of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingClass {
    /// Linear, abundances without sum-to-one (half-normal prior draws).
    LmmWsto,
    /// Linear, abundances uniform on the simplex.
    LmmSto,
    /// Bilinear with unit interaction coefficients (Fan).
    GbmFan,
    /// Post-nonlinear polynomial `Ma + b (Ma)*(Ma)`.
    Ppnm,
    /// Sum-to-one weights over endmembers and their cross products.
    Nm,
    /// Residual component with Gaussian coefficients on the full basis.
    RcaGen,
}

impl MixingClass {
    pub fn is_linear(self) -> bool {
        matches!(self, MixingClass::LmmWsto | MixingClass::LmmSto)
    }

    pub fn name(self) -> &'static str {
        match self {
            MixingClass::LmmWsto => "lmm_wsto",
            MixingClass::LmmSto => "lmm_sto",
            MixingClass::GbmFan => "gbm_fan",
            MixingClass::Ppnm => "ppnm",
            MixingClass::Nm => "nm",
            MixingClass::RcaGen => "rca_gen",
        }
    }

    /// The six classes in their usual order.
    pub fn all() -> [MixingClass; 6] {
        [
            MixingClass::LmmWsto,
            MixingClass::LmmSto,
            MixingClass::GbmFan,
            MixingClass::Ppnm,
            MixingClass::Nm,
            MixingClass::RcaGen,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// PPNM nonlinearity amplitude.
    pub ppnm_b: f64,
    /// Variance of each RCA coefficient.
    pub rca_s2: f64,
    /// Variance of the half-normal abundances.
    pub abundance_beta: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            ppnm_b: 0.2,
            rca_s2: 0.1,
            abundance_beta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_row: usize,
    pub n_col: usize,
    pub bands: usize,
    pub endmembers: usize,
    pub noise: NoiseLevel,
    pub class_models: Vec<MixingClass>,
    pub potts_beta: f64,
    pub potts_sweeps: usize,
    pub model_params: ModelParams,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_row: 30,
            n_col: 30,
            bands: 64,
            endmembers: 3,
            noise: NoiseLevel::Sigma2(3e-4),
            class_models: MixingClass::all().to_vec(),
            potts_beta: 1.6,
            potts_sweeps: 200,
            model_params: ModelParams::default(),
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |d: String| Err(Error::invalid("scene spec", d));
        if self.n_row == 0 || self.n_col == 0 || self.bands == 0 || self.endmembers == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.bands < self.endmembers {
            return fail(format!("need bands >= endmembers, got {} < {}", self.bands, self.endmembers));
        }
        match self.noise {
            NoiseLevel::Sigma2(v) if v >= 0.0 && v.is_finite() => {}
            NoiseLevel::SnrDb(v) if v.is_finite() => {}
            n => return fail(format!("bad noise level {n:?}")),
        }
        if self.class_models.is_empty() {
            return fail("at least one class model is required".into());
        }
        if !(self.potts_beta >= 0.0) {
            return fail(format!("potts_beta must be nonnegative, got {}", self.potts_beta));
        }
        let p = &self.model_params;
        if !(p.rca_s2 > 0.0 && p.abundance_beta > 0.0 && p.ppnm_b.is_finite()) {
            return fail("model parameters out of range".into());
        }
        Ok(())
    }

}

/// Additive white noise, as a per-band variance or as a target SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    Sigma2(f64),
    SnrDb(f64),
}

/// Integer labels on the pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<usize>,
}

impl ClassMap {
    pub fn uniform(rows: usize, cols: usize, label: usize) -> Self {
        Self {
            rows,
            cols,
            labels: vec![label; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.cols + j]
    }

    pub fn n_pixels(&self) -> usize {
        self.labels.len()
    }

    /// Fraction of 4-neighbour pairs carrying the same label.
    pub fn same_label_fraction(&self) -> f64 {
        let (mut same, mut total) = (0usize, 0usize);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i + 1 < self.rows {
                    total += 1;
                    same += usize::from(self.get(i, j) == self.get(i + 1, j));
                }
                if j + 1 < self.cols {
                    total += 1;
                    same += usize::from(self.get(i, j) == self.get(i, j + 1));
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub abundances: AbundanceField,
    /// Index into `class_models` per pixel.
    pub class_map: ClassMap,
    /// Nonlinear term `x - M a` per pixel (depth = bands).
    pub phi: PixelField,
    pub nonlin_mask: Vec<bool>,
}

impl GroundTruth {
    /// `|phi|^2` per pixel.
    pub fn phi_energy(&self) -> Vec<f64> {
        self.phi.pixels().map(|p| p.iter().map(|v| v * v).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub endmembers: EndmemberSet,
    pub clean: HyperCube,
    pub cube: HyperCube,
    pub sigma2: f64,
    pub truth: GroundTruth,
}

/// Smooth synthetic spectra: each endmember is a baseline plus 3 to 6 Gaussian
/// bumps, scaled into `[0, 1]`. Draws are repeated until every pair of
/// endmembers has correlation below 0.98.
pub fn gen_endmembers(r: usize, l: usize, seed: u64) -> Result<EndmemberSet> {
    if r == 0 || l < r {
        return Err(Error::invalid("endmember count", format!("need 1 <= R <= L, got R={r}, L={l}")));
    }
    for attempt in 0..1000u64 {
        let mut rng = substream(seed, attempt, 0, Stream::Endmembers);
        let mut columns = Vec::with_capacity(l * r);
        for _ in 0..r {
            let n_bumps = rng.random_range(3..=6);
            let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.04..0.2),
                        rng.random_range(0.2..1.0),
                    )
                })
                .collect();
            let base = rng.random_range(0.02..0.1);
            let spec: Vec<f64> = (0..l)
                .map(|b| {
                    let x = if l == 1 { 0.5 } else { b as f64 / (l - 1) as f64 };
                    base + bumps
                        .iter()
                        .map(|(c, w, a)| a * (-(x - c).powi(2) / (2.0 * w * w)).exp())
                        .sum::<f64>()
                })
                .collect();
            let peak = spec.iter().copied().fold(0.0, f64::max);
            let top = rng.random_range(0.5..1.0);
            columns.extend(spec.iter().map(|v| v / peak * top));
        }
        let m = EndmemberSet::from_columns(l, r, columns)?;
        let distinct = (0..r).all(|a| (a + 1..r).all(|b| correlation(m.column(a), m.column(b)) < 0.98));
        if distinct || l == 1 {
            log::info!("endmembers: condition number of M^T M = {:.3e}", gram_condition_number(&m));
            return Ok(m);
        }
    }
    Err(Error::invalid("endmember generation", "no sufficiently distinct set found"))
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 1.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Ratio of extreme eigenvalues of `M^T M`.
pub fn gram_condition_number(m: &EndmemberSet) -> f64 {
    let mm = m.matrix();
    let ev = mm.tr_mul(&mm).symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi / lo
}

/// Single-site Gibbs sampling of a 4-neighbour Potts field from a uniform
/// random start, raster order, `n_sweeps` sweeps.
pub fn gen_potts_map(rows: usize, cols: usize, n_classes: usize, beta: f64, n_sweeps: usize, seed: u64) -> Result<ClassMap> {
    if n_classes < 2 {
        return Err(Error::invalid("potts classes", format!("need at least 2, got {n_classes}")));
    }
    if !(beta >= 0.0) {
        return Err(Error::invalid("potts beta", format!("must be nonnegative, got {beta}")));
    }
    let mut rng = substream(seed, 0, 0, Stream::Potts);
    let mut map = ClassMap {
        rows,
        cols,
        labels: (0..rows * cols).map(|_| rng.random_range(0..n_classes)).collect(),
    };
    let mut weights = vec![0.0; n_classes];
    for sweep in 0..n_sweeps {
        let mut rng = substream(seed, sweep as u64 + 1, 0, Stream::Potts);
        for i in 0..rows {
            for j in 0..cols {
                weights.iter_mut().for_each(|w| *w = 0.0);
                let mut add = |ii: usize, jj: usize| weights[map.get(ii, jj)] += 1.0;
                if i > 0 {
                    add(i - 1, j);
                }
                if i + 1 < rows {
                    add(i + 1, j);
                }
                if j > 0 {
                    add(i, j - 1);
                }
                if j + 1 < cols {
                    add(i, j + 1);
                }
                let total: f64 = weights.iter().map(|n| (beta * n).exp()).sum();
                let mut u = rng.random_range(0.0..total);
                let mut label = n_classes - 1;
                for (c, n) in weights.iter().enumerate() {
                    let w = (beta * n).exp();
                    if u < w {
                        label = c;
                        break;
                    }
                    u -= w;
                }
                map.labels[i * cols + j] = label;
            }
        }
    }
    Ok(map)
}

/// Uniform draw from the probability simplex in `n` dimensions, by sorting
/// `n - 1` uniforms and taking the gaps.
pub fn uniform_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut cuts: Vec<f64> = (0..n.saturating_sub(1)).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(1.0 - prev);
    out
}

fn half_normal<R: Rng + ?Sized>(r: usize, variance: f64, rng: &mut R) -> Vec<f64> {
    (0..r).map(|_| (variance.sqrt() * std_normal(rng)).abs()).collect()
}

/// Abundances for one pixel of the given class.
///
/// NM pixels draw a uniform point on the simplex over endmembers and cross
/// products and keep the endmember part; the cross weights are completed in
/// [`gen_pixel`].
pub fn gen_pixel_abundances<R: Rng + ?Sized>(class: MixingClass, r: usize, params: &ModelParams, rng: &mut R) -> Vec<f64> {
    match class {
        MixingClass::LmmWsto | MixingClass::RcaGen => half_normal(r, params.abundance_beta, rng),
        MixingClass::LmmSto | MixingClass::GbmFan | MixingClass::Ppnm => uniform_simplex(r, rng),
        MixingClass::Nm => {
            let mut w = uniform_simplex(r + r * (r - 1) / 2, rng);
            w.truncate(r);
            w
        }
    }
}

/// Abundance field for a class map, with per-pixel random substreams.
pub fn gen_abundances(class_map: &ClassMap, spec: &SceneSpec) -> AbundanceField {
    let r = spec.endmembers;
    let values: Vec<f64> = (0..class_map.n_pixels())
        .into_par_iter()
        .flat_map_iter(|p| {
            let class = spec.class_models[class_map.labels[p]];
            let mut rng = substream(spec.seed, 0, p as u64, Stream::Abundances);
            gen_pixel_abundances(class, r, &spec.model_params, &mut rng)
        })
        .collect();
    PixelField::new(r, class_map.rows, class_map.cols, values).expect("abundance field dimensions")
}

/// Noise-free pixel for one class.
pub fn gen_pixel<R: Rng + ?Sized>(
    class: MixingClass,
    a: &[f64],
    basis: &InteractionBasis,
    params: &ModelParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = basis.endmembers();
    let (r, l) = (m.count(), m.bands());
    crate::error::check_dim("abundance length", r, a.len())?;
    let mut x = vec![0.0; l];
    m.mix(a, &mut x);
    match class {
        MixingClass::LmmWsto | MixingClass::LmmSto => {}
        MixingClass::GbmFan => {
            for k in 0..r {
                for k2 in k + 1..r {
                    let c = a[k] * a[k2];
                    for (b, xv) in x.iter_mut().enumerate() {
                        *xv += c * m.column(k)[b] * m.column(k2)[b];
                    }
                }
            }
        }
        MixingClass::Ppnm => {
            for xv in x.iter_mut() {
                *xv += params.ppnm_b * *xv * *xv;
            }
        }
        MixingClass::Nm => {
            let rest = (1.0 - a.iter().sum::<f64>()).max(0.0);
            let n_cross = r * (r - 1) / 2;
            let w = uniform_simplex(n_cross, rng);
            let mut idx = 0;
            for k in 0..r {
                for k2 in k + 1..r {
                    let c = rest * w[idx];
                    idx += 1;
                    for (b, xv) in x.iter_mut().enumerate() {
                        *xv += c * m.column(k)[b] * m.column(k2)[b];
                    }
                }
            }
        }
        MixingClass::RcaGen => {
            let gamma: Vec<f64> = (0..basis.n_nonlinear())
                .map(|_| params.rca_s2.sqrt() * std_normal(rng))
                .collect();
            x = basis.reconstruct_pixel(a, &gamma)?;
        }
    }
    Ok(x)
}

/// Add i.i.d. Gaussian noise to every band of every pixel. Returns the noisy
/// cube and the variance used; for an SNR target the variance is
/// `mean(|x|^2 / L) / 10^(snr / 10)`.
pub fn add_noise(cube: &HyperCube, level: NoiseLevel, seed: u64) -> Result<(HyperCube, f64)> {
    let sigma2 = match level {
        NoiseLevel::Sigma2(v) => v,
        NoiseLevel::SnrDb(db) => {
            let power = cube.as_slice().iter().map(|v| v * v).sum::<f64>() / cube.as_slice().len() as f64;
            power / 10f64.powf(db / 10.0)
        }
    };
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid("noise variance", format!("{sigma2}")));
    }
    let sd = sigma2.sqrt();
    let l = cube.bands();
    let data: Vec<f64> = (0..cube.n_pixels())
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut rng = substream(seed, 0, p as u64, Stream::Noise);
            cube.pixel(p).iter().map(move |v| v + sd * std_normal(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    Ok((HyperCube::new(l, cube.rows(), cube.cols(), data)?, sigma2))
}

/// Empirical SNR in dB of `noisy` relative to `clean`.
pub fn snr_db(clean: &HyperCube, noisy: &HyperCube) -> f64 {
    let signal: f64 = clean.as_slice().iter().map(|v| v * v).sum();
    let noise: f64 = clean.as_slice().iter().zip(noisy.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (signal / noise).log10()
}

/// Full scene from a spec: endmembers, class map, abundances, pixels, noise.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let endmembers = gen_endmembers(spec.endmembers, spec.bands, spec.seed)?;
    let basis = InteractionBasis::new(&endmembers);
    let n_classes = spec.class_models.len();
    let class_map = if n_classes == 1 {
        ClassMap::uniform(spec.n_row, spec.n_col, 0)
    } else {
        gen_potts_map(spec.n_row, spec.n_col, n_classes, spec.potts_beta, spec.potts_sweeps, spec.seed)?
    };
    let abundances = gen_abundances(&class_map, spec);
    let l = spec.bands;
    let pixels: Vec<(Vec<f64>, Vec<f64>)> = (0..class_map.n_pixels())
        .into_par_iter()
        .map(|p| {
            let class = spec.class_models[class_map.labels[p]];
            let a = abundances.pixel(p);
            let mut rng = substream(spec.seed, 0, p as u64, Stream::Pixels);
            let x = gen_pixel(class, a, &basis, &spec.model_params, &mut rng)?;
            let mut lin = vec![0.0; l];
            endmembers.mix(a, &mut lin);
            let phi = x.iter().zip(&lin).map(|(x, m)| x - m).collect();
            Ok((x, phi))
        })
        .collect::<Result<_>>()?;
    let mut clean = Vec::with_capacity(l * pixels.len());
    let mut phi = Vec::with_capacity(l * pixels.len());
    let mut nonlin_mask = Vec::with_capacity(pixels.len());
    for (p, (x, f)) in pixels.into_iter().enumerate() {
        let class = spec.class_models[class_map.labels[p]];
        nonlin_mask.push(!class.is_linear() && f.iter().any(|v| *v != 0.0));
        clean.extend(x);
        phi.extend(f);
    }
    let clean = HyperCube::new(l, spec.n_row, spec.n_col, clean)?;
    let (cube, sigma2) = add_noise(&clean, spec.noise, spec.seed)?;
    Ok(Scene {
        spec: spec.clone(),
        endmembers,
        clean,
        cube,
        sigma2,
        truth: GroundTruth {
            abundances,
            class_map,
            phi: PixelField::new(l, spec.n_row, spec.n_col, phi)?,
            nonlin_mask,
        },
    })
}

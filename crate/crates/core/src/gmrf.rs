//! Gamma Markov random field over the nonlinearity scales.
//!
//! The field couples the `rows x cols` scale matrix `S` with an auxiliary
//! `(rows+1) x (cols+1)` matrix `W` through a bipartite graph: `s[i][j]` is
//! linked to the four corners `w[i][j], w[i+1][j], w[i][j+1], w[i+1][j+1]`.
//! Every scale therefore has exactly four auxiliary neighbours, while border
//! auxiliaries have between one and four scale neighbours.
//!
//! The unnormalised joint density is
//!
//! ```text
//! prod_S s^-(a+1) * prod_W w^(a-1) * prod_E exp(-a w / (4 s))
//! ```
//!
//! with `a = alpha3`. Its conditionals are `s | W ~ IG(a, a * alpha4(W))` and
//! `w | S ~ Gamma(a, 1 / (a * alpha5(S)))`, where both local statistics are
//! the sum over existing neighbours divided by four.
//!
//! The joint density is scale invariant and therefore not integrable on its
//! own; it only becomes proper once combined with data (or with a fixed
//! border, see [`WBoundary::Anchored`]).

use rand::Rng;

use crate::dist;
use crate::error::{Error, Result};
use crate::model::Grid;
use crate::rng::{substream, Stream};

/// Lower end of the projection interval for `alpha3`.
pub const ALPHA3_FLOOR: f64 = 1e-3;

/// Default upper end of the projection interval for `alpha3`.
pub const ALPHA3_MAX: f64 = 20.0;

/// Treatment of the outer ring of auxiliary variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WBoundary {
    /// Every auxiliary variable is random (the standard field).
    #[default]
    Free,
    /// Border auxiliaries are held at their current values and never resampled.
    /// This pins the overall scale and makes the field a proper distribution.
    Anchored,
}

/// Scales `S` and auxiliaries `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrfState {
    pub s: Grid,
    pub w: Grid,
    pub boundary: WBoundary,
}

impl GmrfState {
    pub fn new(s: Grid, w: Grid) -> Result<Self> {
        if w.rows() != s.rows() + 1 || w.cols() != s.cols() + 1 {
            return Err(Error::invalid(
                "gmrf shapes",
                format!(
                    "S is {}x{} so W must be {}x{}, got {}x{}",
                    s.rows(),
                    s.cols(),
                    s.rows() + 1,
                    s.cols() + 1,
                    w.rows(),
                    w.cols()
                ),
            ));
        }
        let state = Self {
            s,
            w,
            boundary: WBoundary::Free,
        };
        state.check_positive()?;
        Ok(state)
    }

    pub fn constant(rows: usize, cols: usize, s: f64, w: f64) -> Self {
        Self {
            s: Grid::filled(rows, cols, s),
            w: Grid::filled(rows + 1, cols + 1, w),
            boundary: WBoundary::Free,
        }
    }

    pub fn with_boundary(mut self, boundary: WBoundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn rows(&self) -> usize {
        self.s.rows()
    }

    pub fn cols(&self) -> usize {
        self.s.cols()
    }

    fn check_positive(&self) -> Result<()> {
        for (name, grid) in [("S", &self.s), ("W", &self.w)] {
            if let Some(v) = grid.as_slice().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("gmrf state", format!("{name} holds non-positive entry {v}")));
            }
        }
        Ok(())
    }

    /// Whether `w[i][j]` is resampled by the Gibbs kernel.
    pub fn w_is_free(&self, i: usize, j: usize) -> bool {
        match self.boundary {
            WBoundary::Free => true,
            WBoundary::Anchored => i > 0 && j > 0 && i < self.rows() && j < self.cols(),
        }
    }
}

/// Mean of the four auxiliary corners of `s[i][j]`.
pub fn alpha4(w: &Grid, i: usize, j: usize) -> Result<f64> {
    if i + 1 >= w.rows() || j + 1 >= w.cols() {
        return Err(Error::OutOfRange {
            i,
            j,
            rows: w.rows().saturating_sub(1),
            cols: w.cols().saturating_sub(1),
        });
    }
    Ok(alpha4_unchecked(w, i, j))
}

#[inline]
fn alpha4_unchecked(w: &Grid, i: usize, j: usize) -> f64 {
    (w.get(i, j) + w.get(i + 1, j) + w.get(i, j + 1) + w.get(i + 1, j + 1)) / 4.0
}

/// Sum of reciprocal scales around `w[i][j]`, divided by four.
///
/// Neighbours outside the grid contribute nothing; the divisor stays four.
pub fn alpha5(s: &Grid, i: usize, j: usize) -> Result<f64> {
    if i > s.rows() || j > s.cols() {
        return Err(Error::OutOfRange {
            i,
            j,
            rows: s.rows() + 1,
            cols: s.cols() + 1,
        });
    }
    let mut sum = 0.0;
    for (si, sj) in s_neighbours(s.rows(), s.cols(), i, j) {
        let v = s.get(si, sj);
        if !(v > 0.0) {
            return Err(Error::invalid("scale", format!("s[{si}][{sj}] = {v} is not positive")));
        }
        sum += 1.0 / v;
    }
    Ok(sum / 4.0)
}

fn alpha5_unchecked(s: &Grid, i: usize, j: usize) -> f64 {
    s_neighbours(s.rows(), s.cols(), i, j)
        .map(|(si, sj)| 1.0 / s.get(si, sj))
        .sum::<f64>()
        / 4.0
}

/// Scale nodes adjacent to auxiliary node `(i, j)`.
fn s_neighbours(rows: usize, cols: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
    [(0usize, 0usize), (1, 0), (0, 1), (1, 1)]
        .into_iter()
        .filter_map(move |(di, dj)| {
            let si = i.checked_sub(di)?;
            let sj = j.checked_sub(dj)?;
            (si < rows && sj < cols).then_some((si, sj))
        })
}

/// Sum over edges of `w / s`.
fn edge_ratio_sum(state: &GmrfState) -> f64 {
    let (s, w) = (&state.s, &state.w);
    let mut sum = 0.0;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let corners = w.get(i, j) + w.get(i + 1, j) + w.get(i, j + 1) + w.get(i + 1, j + 1);
            sum += corners / s.get(i, j);
        }
    }
    sum
}

fn log_sum(g: &Grid) -> f64 {
    g.as_slice().iter().map(|v| v.ln()).sum()
}

/// Unnormalised log-density of the field (the partition function is omitted).
pub fn log_density_unnorm(state: &GmrfState, alpha3: f64) -> Result<f64> {
    state.check_positive()?;
    Ok(-(alpha3 + 1.0) * log_sum(&state.s) + (alpha3 - 1.0) * log_sum(&state.w)
        - alpha3 / 4.0 * edge_ratio_sum(state))
}

/// Statistic whose difference between chain and auxiliary states drives the
/// `alpha3` update; it equals four times the `alpha3`-derivative of
/// [`log_density_unnorm`].
pub fn lambda_stat(state: &GmrfState) -> Result<f64> {
    state.check_positive()?;
    Ok(-edge_ratio_sum(state) + 4.0 * (log_sum(&state.w) - log_sum(&state.s)))
}

/// Resample every scale from `IG(alpha3 + extra_shape, alpha3 * alpha4 + extra_rate)`.
///
/// `extra` supplies the per-pixel likelihood contribution (zero for the bare field).
pub(crate) fn sample_scales<R: Rng + ?Sized>(
    state: &mut GmrfState,
    alpha3: f64,
    extra: impl Fn(usize) -> (f64, f64),
    rng: &mut R,
) {
    let cols = state.cols();
    for i in 0..state.rows() {
        for j in 0..cols {
            let (shape_add, rate_add) = extra(i * cols + j);
            let rate = alpha3 * alpha4_unchecked(&state.w, i, j) + rate_add;
            let v = dist::inv_gamma(alpha3 + shape_add, rate, rng);
            state.s.set(i, j, v);
        }
    }
}

/// Resample every free auxiliary from `Gamma(alpha3, 1 / (alpha3 * alpha5))`.
pub(crate) fn sample_auxiliaries<R: Rng + ?Sized>(state: &mut GmrfState, alpha3: f64, rng: &mut R) {
    for i in 0..=state.rows() {
        for j in 0..=state.cols() {
            if !state.w_is_free(i, j) {
                continue;
            }
            let rate = alpha3 * alpha5_unchecked(&state.s, i, j);
            let v = dist::gamma(alpha3, 1.0 / rate, rng);
            state.w.set(i, j, v);
        }
    }
}

/// One two-block Gibbs sweep of the bare field: all of `S` given `W`, then all
/// of `W` given the new `S`. Within a block the updates are independent.
pub fn gibbs_kernel<R: Rng + ?Sized>(state: &GmrfState, alpha3: f64, rng: &mut R) -> GmrfState {
    let mut next = state.clone();
    sample_scales(&mut next, alpha3, |_| (0.0, 0.0), rng);
    sample_auxiliaries(&mut next, alpha3, rng);
    next
}

/// Projected stochastic-gradient step for `alpha3` with step size `t^(-3/4)`.
///
/// The result is clamped to `[ALPHA3_FLOOR, a_max]`.
pub fn update_alpha3(
    alpha3: f64,
    chain_state: &GmrfState,
    aux_state: &GmrfState,
    t: usize,
    a_max: f64,
) -> Result<f64> {
    update_alpha3_with(alpha3, chain_state, aux_state, t, a_max, StepScale::Raw)
}

/// Gain applied to the `Lambda` difference on top of `t^-3/4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScale {
    /// `delta_t = t^-3/4`.
    Raw,
    /// `delta_t = t^-3/4 / |V_S|`: the difference is a sum over all nodes, so
    /// dividing by the scale count keeps the step size independent of the
    /// image size.
    #[default]
    PerNode,
}

/// [`update_alpha3`] with an explicit step normalisation.
pub fn update_alpha3_with(
    alpha3: f64,
    chain_state: &GmrfState,
    aux_state: &GmrfState,
    t: usize,
    a_max: f64,
    scale: StepScale,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::invalid("iteration", "alpha3 updates start at t = 1"));
    }
    let grad = lambda_stat(chain_state)? - lambda_stat(aux_state)?;
    let mut step = (t as f64).powf(-0.75);
    if scale == StepScale::PerNode {
        step /= chain_state.s.as_slice().len() as f64;
    }
    Ok(project_alpha3(alpha3 + step * grad, a_max))
}

/// Run `n_sweeps` Gibbs sweeps of the bare field at `alpha3` starting from `init`.
pub fn simulate<R: Rng + ?Sized>(init: &GmrfState, alpha3: f64, n_sweeps: usize, rng: &mut R) -> GmrfState {
    let mut state = init.clone();
    for _ in 0..n_sweeps {
        sample_scales(&mut state, alpha3, |_| (0.0, 0.0), rng);
        sample_auxiliaries(&mut state, alpha3, rng);
    }
    state
}

/// One draw of `Lambda(chain) - Lambda(aux)` for an observed scale field:
/// the chain refreshes `W | S`, the auxiliary state is one sweep from it.
pub fn alpha3_gradient<R: Rng + ?Sized>(observed: &GmrfState, alpha3: f64, rng: &mut R) -> Result<f64> {
    let mut chain = observed.clone();
    sample_auxiliaries(&mut chain, alpha3, rng);
    let aux = gibbs_kernel(&chain, alpha3, rng);
    Ok(lambda_stat(&chain)? - lambda_stat(&aux)?)
}

/// Stochastic-gradient fit of `alpha3` to an observed `S` with `W` latent.
/// Returns the trajectory `alpha3^(1..=n_iter)`.
pub fn fit_alpha3(
    observed: &GmrfState,
    alpha3_init: f64,
    n_iter: usize,
    a_max: f64,
    scale: StepScale,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(alpha3_init > 0.0 && alpha3_init <= a_max) {
        return Err(Error::invalid("alpha3_init", format!("must lie in (0, {a_max}], got {alpha3_init}")));
    }
    let mut chain = observed.clone();
    let mut alpha3 = alpha3_init;
    let mut trace = Vec::with_capacity(n_iter);
    for t in 1..=n_iter {
        sample_auxiliaries(&mut chain, alpha3, &mut substream(seed, t as u64, 0, Stream::Auxiliary));
        let aux = gibbs_kernel(&chain, alpha3, &mut substream(seed, t as u64, 0, Stream::AuxGmrfScale));
        alpha3 = update_alpha3_with(alpha3, &chain, &aux, t, a_max, scale)?;
        trace.push(alpha3);
    }
    Ok(trace)
}

pub(crate) fn project_alpha3(value: f64, a_max: f64) -> f64 {
    if value.is_nan() {
        return ALPHA3_FLOOR;
    }
    value.clamp(ALPHA3_FLOOR, a_max)
}

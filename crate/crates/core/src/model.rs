//! Latent-variable GP: profiled maximum-likelihood fitting and kriging
//! prediction.
//!
//! Responses are standardized before fitting and predictions are returned in
//! original units. `mu` and `sigma2` in [`LvgpParams`] live on the
//! standardized scale.

use std::f64::consts::LN_10;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::kernel::{corr_matrix, pin_rows, CorrMatrixFactor, KernelParams, LatentEmbedding};
use crate::optim::{minimize_bounded, Bounds, LocalOptions};
use crate::space::{Dataset, DesignSpace, MixedPoint};

/// Returned by the likelihood wherever the correlation matrix cannot be factorized.
pub const SENTINEL: f64 = 1e10;

/// Floor applied to the profiled process variance.
pub const SIGMA2_FLOOR: f64 = 1e-12;

pub const DEFAULT_JITTER_FLOOR: f64 = 1e-6;

pub const LOG10_PHI_BOUNDS: (f64, f64) = (-3.0, 3.0);
pub const LATENT_BOUNDS: (f64, f64) = (-3.0, 3.0);
pub const LOG10_NUGGET_BOUNDS: (f64, f64) = (-8.0, 0.0);

/// Maps the free-parameter vector used by the optimizer to [`KernelParams`].
///
/// Layout: `log10(phi_i)` for every quantitative dimension, then per factor
/// the free latent coordinates (level 2's first coordinate, then both
/// coordinates of levels 3..m), then `log10(nugget)` when the model is noisy.
/// Level 1 is pinned at the origin and level 2 to the nonnegative first axis,
/// leaving `2m - 3` free coordinates per factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    n_quant: usize,
    level_counts: Vec<usize>,
    noisy: bool,
    latent_offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn new(n_quant: usize, level_counts: Vec<usize>, noisy: bool) -> Self {
        let mut latent_offsets = Vec::with_capacity(level_counts.len());
        let mut off = n_quant;
        for &m in &level_counts {
            latent_offsets.push(off);
            off += Self::free_latents(m);
        }
        Self {
            n_quant,
            level_counts,
            noisy,
            latent_offsets,
        }
    }

    pub fn for_space(space: &DesignSpace, noisy: bool) -> Self {
        Self::new(space.n_quant(), space.level_counts(), noisy)
    }

    /// Free latent coordinates for a factor with `m` levels.
    pub fn free_latents(m: usize) -> usize {
        (2 * m).saturating_sub(3)
    }

    pub fn n_params(&self) -> usize {
        self.n_quant
            + self.level_counts.iter().map(|&m| Self::free_latents(m)).sum::<usize>()
            + usize::from(self.noisy)
    }

    pub fn noisy(&self) -> bool {
        self.noisy
    }

    pub fn n_quant(&self) -> usize {
        self.n_quant
    }

    pub fn level_counts(&self) -> &[usize] {
        &self.level_counts
    }

    /// Parameter index of coordinate `coord` of 0-based `level` in `factor`,
    /// or `None` if that coordinate is pinned.
    #[inline]
    pub fn latent_param(&self, factor: usize, level: usize, coord: usize) -> Option<usize> {
        let base = self.latent_offsets[factor];
        match (level, coord) {
            (0, _) | (1, 1) => None,
            (1, 0) => Some(base),
            (l, c) => Some(base + 1 + 2 * (l - 2) + c),
        }
    }

    fn nugget_index(&self) -> Option<usize> {
        self.noisy.then(|| self.n_params() - 1)
    }

    pub fn bounds(&self) -> Bounds {
        let n = self.n_params();
        let mut lower = vec![LATENT_BOUNDS.0; n];
        let mut upper = vec![LATENT_BOUNDS.1; n];
        for i in 0..self.n_quant {
            lower[i] = LOG10_PHI_BOUNDS.0;
            upper[i] = LOG10_PHI_BOUNDS.1;
        }
        for (j, _) in self.level_counts.iter().enumerate() {
            if let Some(k) = self.latent_param(j, 1, 0) {
                lower[k] = 0.0;
            }
        }
        if let Some(k) = self.nugget_index() {
            lower[k] = LOG10_NUGGET_BOUNDS.0;
            upper[k] = LOG10_NUGGET_BOUNDS.1;
        }
        Bounds::new(lower, upper)
    }

    pub fn decode(&self, theta: &[f64]) -> KernelParams {
        debug_assert_eq!(theta.len(), self.n_params());
        let phi = theta[..self.n_quant].iter().map(|t| 10f64.powf(*t)).collect();
        let factors = self
            .level_counts
            .iter()
            .enumerate()
            .map(|(j, &m)| {
                (0..m)
                    .map(|l| {
                        let c = |coord| self.latent_param(j, l, coord).map_or(0.0, |k| theta[k]);
                        [c(0), c(1)]
                    })
                    .collect()
            })
            .collect();
        let nugget = self.nugget_index().map_or(0.0, |k| 10f64.powf(theta[k]));
        KernelParams::new(phi, LatentEmbedding::new(factors), nugget)
    }

    /// Encodes kernel parameters, pinning the latent rows first.
    pub fn encode(&self, params: &KernelParams) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_params()];
        for (i, phi) in params.phi.iter().enumerate() {
            theta[i] = phi.log10();
        }
        for (j, rows) in params.latents.factors.iter().enumerate() {
            let pinned = pin_rows(rows);
            for (l, z) in pinned.iter().enumerate() {
                for (c, v) in z.iter().enumerate() {
                    if let Some(k) = self.latent_param(j, l, c) {
                        theta[k] = *v;
                    }
                }
            }
        }
        if let Some(k) = self.nugget_index() {
            theta[k] = params.nugget.max(1e-300).log10();
        }
        let b = self.bounds();
        b.project(&mut theta);
        theta
    }

    /// Random start: log-roughness and log-nugget uniform within bounds,
    /// latent coordinates `0.5 * N(0, 1)` clipped to bounds.
    pub fn random_start<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let b = self.bounds();
        let mut theta = vec![0.0; self.n_params()];
        for i in 0..self.n_quant {
            theta[i] = rng.random_range(b.lower[i]..=b.upper[i]);
        }
        for i in self.n_quant..self.n_params() {
            let z: f64 = StandardNormal.sample(rng);
            theta[i] = 0.5 * z;
        }
        for (j, _) in self.level_counts.iter().enumerate() {
            if let Some(k) = self.latent_param(j, 1, 0) {
                theta[k] = theta[k].abs();
            }
        }
        if let Some(k) = self.nugget_index() {
            theta[k] = rng.random_range(b.lower[k]..=b.upper[k]);
        }
        b.project(&mut theta);
        theta
    }

    /// Neutral starting point: unit roughness, latent polygons of radius 0.5,
    /// nugget 1e-4.
    pub fn default_params(&self) -> KernelParams {
        KernelParams::new(
            vec![1.0; self.n_quant],
            LatentEmbedding::polygon(&self.level_counts, 0.5),
            if self.noisy { 1e-4 } else { 0.0 },
        )
    }
}

/// Profiled generalized-least-squares estimates of the mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfiledMoments {
    pub mu: f64,
    pub sigma2: f64,
    /// The raw estimate was at or below [`SIGMA2_FLOOR`] and has been clamped.
    pub clamped: bool,
}

struct Whitened {
    moments: ProfiledMoments,
    /// `L^{-1} (y - mu 1)`
    resid: DVector<f64>,
}

fn whiten(y: &[f64], factor: &CorrMatrixFactor) -> Whitened {
    let n = y.len();
    let u1 = factor.solve_lower(&vec![1.0; n]);
    let uy = factor.solve_lower(y);
    let mu = u1.dot(&uy) / u1.dot(&u1);
    let resid = uy - &u1 * mu;
    let raw = resid.norm_squared() / n as f64;
    let clamped = !(raw > SIGMA2_FLOOR);
    Whitened {
        moments: ProfiledMoments {
            mu,
            sigma2: if clamped { SIGMA2_FLOOR } else { raw },
            clamped,
        },
        resid,
    }
}

/// Closed-form `mu` and `sigma2` given a factorized correlation matrix.
pub fn profiled_mu_sigma2(y: &[f64], factor: &CorrMatrixFactor) -> ProfiledMoments {
    whiten(y, factor).moments
}

/// The profiled negative log-likelihood `n ln(sigma2) + ln|R|` over a fixed
/// (normalized) dataset.
#[derive(Debug, Clone, Copy)]
pub struct Likelihood<'a> {
    points: &'a [MixedPoint],
    y: &'a [f64],
    layout: &'a ParamLayout,
    jitter_floor: f64,
}

impl<'a> Likelihood<'a> {
    pub fn new(points: &'a [MixedPoint], y: &'a [f64], layout: &'a ParamLayout) -> Self {
        Self {
            points,
            y,
            layout,
            jitter_floor: 0.0,
        }
    }

    /// Smallest diagonal jitter tried when factorizing.
    pub fn with_jitter_floor(self, floor: f64) -> Self {
        Self {
            jitter_floor: floor,
            ..self
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        self.layout
    }

    /// Value at explicit (not necessarily pinned) kernel parameters.
    pub fn at_params(&self, params: &KernelParams) -> f64 {
        let r = corr_matrix(self.points, params);
        match CorrMatrixFactor::factorize_with_floor(&r, params.nugget, self.jitter_floor) {
            Ok(f) => {
                let w = whiten(self.y, &f);
                let v = self.y.len() as f64 * w.moments.sigma2.ln() + f.log_det();
                if v.is_finite() {
                    v
                } else {
                    SENTINEL
                }
            }
            Err(_) => SENTINEL,
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.at_params(&self.layout.decode(theta))
    }

    /// Value and analytic gradient with respect to the encoded parameters.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let np = self.layout.n_params();
        let params = self.layout.decode(theta);
        let r = corr_matrix(self.points, &params);
        let Ok(factor) = CorrMatrixFactor::factorize_with_floor(&r, params.nugget, self.jitter_floor) else {
            return (SENTINEL, vec![0.0; np]);
        };
        let n = self.y.len();
        let w = whiten(self.y, &factor);
        let s2 = w.moments.sigma2;
        let value = n as f64 * s2.ln() + factor.log_det();
        if !value.is_finite() {
            return (SENTINEL, vec![0.0; np]);
        }
        let mut alpha = w.resid.clone();
        factor.l().tr_solve_lower_triangular_mut(&mut alpha);
        let kinv = factor.inverse();

        // d f = tr(K^{-1} dK) - alpha' dK alpha / sigma2
        let mut grad = vec![0.0; np];
        let p = self.layout.n_quant();
        for a in 0..n {
            let pa = &self.points[a];
            for b in 0..a {
                let wab = 2.0 * (kinv[(a, b)] - alpha[a] * alpha[b] / s2) * r[(a, b)];
                if wab == 0.0 {
                    continue;
                }
                let pb = &self.points[b];
                for i in 0..p {
                    let d = pa.x[i] - pb.x[i];
                    grad[i] -= wab * LN_10 * params.phi[i] * d * d;
                }
                for (j, (&ta, &tb)) in pa.t.iter().zip(&pb.t).enumerate() {
                    if ta == tb {
                        continue;
                    }
                    let za = params.latents.point(j, ta);
                    let zb = params.latents.point(j, tb);
                    for c in 0..2 {
                        let diff = za[c] - zb[c];
                        if let Some(k) = self.layout.latent_param(j, ta - 1, c) {
                            grad[k] -= wab * 2.0 * diff;
                        }
                        if let Some(k) = self.layout.latent_param(j, tb - 1, c) {
                            grad[k] += wab * 2.0 * diff;
                        }
                    }
                }
            }
        }
        if let Some(k) = self.layout.nugget_index() {
            let tr: f64 = (0..n).map(|a| kinv[(a, a)] - alpha[a] * alpha[a] / s2).sum();
            grad[k] = LN_10 * params.nugget * tr;
        }
        (value, grad)
    }
}

/// Negated profiled log-likelihood at encoded parameters `theta`.
pub fn neg_profiled_loglik(theta: &[f64], likelihood: &Likelihood<'_>) -> f64 {
    likelihood.value(theta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_starts: usize,
    pub max_evals: usize,
    pub f_tol: f64,
    /// Estimate a nugget for noisy responses; otherwise the nugget is 0.
    pub noisy: bool,
    /// Run only the warm start when one is supplied.
    pub warm_only: bool,
    pub parallel: bool,
    /// Smallest diagonal jitter added to the correlation matrix.
    pub jitter_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_starts: 8,
            max_evals: 500,
            f_tol: 1e-6,
            noisy: false,
            warm_only: false,
            parallel: true,
            jitter_floor: DEFAULT_JITTER_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub offset: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn from_responses(y: &[f64]) -> Self {
        let n = y.len();
        let offset = y.iter().sum::<f64>() / n as f64;
        let scale = if n > 1 {
            let var = y.iter().map(|v| (v - offset).powi(2)).sum::<f64>() / (n - 1) as f64;
            if var > 0.0 && var.is_finite() {
                var.sqrt()
            } else {
                1.0
            }
        } else {
            1.0
        };
        Self { offset, scale }
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }

    pub fn undo(&self, y: f64) -> f64 {
        self.offset + self.scale * y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvgpParams {
    pub kernel: KernelParams,
    pub mu: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartResult {
    pub neg_loglik: f64,
    pub evals: usize,
    pub converged: bool,
    pub warm: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub neg_loglik: f64,
    pub starts: Vec<StartResult>,
    pub converged: bool,
    pub sigma2_clamped: bool,
    pub jitter: f64,
    /// Fewer than two observations: no estimation was run.
    pub flat: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A fitted LVGP with cached factorization and prediction weights.
#[derive(Debug, Clone)]
pub struct FittedModel {
    space: DesignSpace,
    data: Dataset,
    normalized: Vec<MixedPoint>,
    standardization: Standardization,
    params: LvgpParams,
    layout: ParamLayout,
    theta: Vec<f64>,
    factor: CorrMatrixFactor,
    jitter_floor: f64,
    weights: DVector<f64>,
    /// Low-order parts of the weights; `weights + weights_lo` solves the
    /// kriging system to roughly double the working precision.
    weights_lo: DVector<f64>,
    diagnostics: FitDiagnostics,
}

/// Serializable form of a fitted model; refitting is not needed to restore it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub space: DesignSpace,
    pub data: Dataset,
    pub kernel: KernelParams,
    pub noisy: bool,
    #[serde(default)]
    pub jitter_floor: f64,
}

fn prepare(space: &DesignSpace, data: &Dataset) -> Result<(Vec<MixedPoint>, Standardization, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("at least one observation is required".into()));
    }
    data.validate(space)?;
    let normalized = data.points.iter().map(|p| space.normalize_unchecked(p)).collect();
    let st = Standardization::from_responses(&data.responses);
    let y = data.responses.iter().map(|v| st.apply(*v)).collect();
    Ok((normalized, st, y))
}

/// Fits the model by multi-start profiled maximum likelihood.
pub fn fit<R: Rng + ?Sized>(
    space: &DesignSpace,
    data: &Dataset,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FittedModel> {
    fit_warm(space, data, config, rng, None)
}

/// As [`fit`], adding `warm` (an encoded optimum from a previous fit) as an
/// extra start.
pub fn fit_warm<R: Rng + ?Sized>(
    space: &DesignSpace,
    data: &Dataset,
    config: &FitConfig,
    rng: &mut R,
    warm: Option<&[f64]>,
) -> Result<FittedModel> {
    let (normalized, st, y) = prepare(space, data)?;
    let layout = ParamLayout::for_space(space, config.noisy);
    let np = layout.n_params();

    if data.len() == 1 {
        let kernel = layout.default_params();
        let theta = layout.encode(&kernel);
        let factor = CorrMatrixFactor::factorize_with_floor(
            &corr_matrix(&normalized, &kernel),
            kernel.nugget,
            config.jitter_floor,
        )?;
        return Ok(FittedModel::assemble(
            space.clone(),
            data.clone(),
            normalized,
            st,
            y,
            kernel,
            layout,
            theta,
            factor,
            config.jitter_floor,
            FitDiagnostics {
                converged: true,
                flat: true,
                ..Default::default()
            },
        ));
    }

    let warm = warm.filter(|w| w.len() == np);
    let mut starts: Vec<(Vec<f64>, bool)> = Vec::new();
    if let Some(w) = warm {
        let mut w = w.to_vec();
        layout.bounds().project(&mut w);
        starts.push((w, true));
    }
    if !(config.warm_only && warm.is_some()) {
        for _ in 0..config.n_starts.max(1) {
            starts.push((layout.random_start(rng), false));
        }
    }

    let lik = Likelihood::new(&normalized, &y, &layout).with_jitter_floor(config.jitter_floor);
    let bounds = layout.bounds();
    let opts = LocalOptions {
        max_evals: config.max_evals,
        f_tol: config.f_tol,
        g_tol: 1e-8,
    };
    let run = |(x0, warm): &(Vec<f64>, bool)| {
        let r = minimize_bounded(|t| lik.value_and_gradient(t), x0, &bounds, opts);
        (r, *warm)
    };
    let results: Vec<_> = if config.parallel {
        starts.par_iter().map(run).collect()
    } else {
        starts.iter().map(run).collect()
    };

    let best = results
        .iter()
        .enumerate()
        .filter(|(_, (r, _))| r.f < SENTINEL)
        .min_by(|a, b| a.1 .0.f.total_cmp(&b.1 .0.f).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    let Some(best) = best else {
        return Err(Error::FitFailed {
            n: data.len(),
            n_params: np,
        });
    };

    let kernel = layout.decode(&results[best].0.x);
    // Canonical mirror image; the likelihood is unchanged.
    let kernel = KernelParams {
        latents: kernel.latents.pinned(),
        ..kernel
    };
    let theta = layout.encode(&kernel);
    let factor =
        CorrMatrixFactor::factorize_with_floor(&corr_matrix(&normalized, &kernel), kernel.nugget, config.jitter_floor)?;
    let diagnostics = FitDiagnostics {
        neg_loglik: results[best].0.f,
        starts: results
            .iter()
            .map(|(r, warm)| StartResult {
                neg_loglik: r.f,
                evals: r.evals,
                converged: r.converged,
                warm: *warm,
            })
            .collect(),
        converged: results[best].0.converged,
        ..Default::default()
    };
    Ok(FittedModel::assemble(
        space.clone(),
        data.clone(),
        normalized,
        st,
        y,
        kernel,
        layout,
        theta,
        factor,
        config.jitter_floor,
        diagnostics,
    ))
}

/// Iterative refinement of `K w = y - mu` with residuals accumulated in
/// double-double arithmetic. Steps that do not reduce the residual are
/// rejected. Returns the low-order parts of the weights.
fn refine_weights(
    points: &[MixedPoint],
    kernel: &KernelParams,
    factor: &CorrMatrixFactor,
    y: &[f64],
    mu: f64,
    weights: &mut DVector<f64>,
) -> DVector<f64> {
    let n = y.len();
    let mut k = corr_matrix(points, kernel);
    for i in 0..n {
        k[(i, i)] += factor.nugget() + factor.jitter();
    }
    let residual = |hi: &DVector<f64>, lo: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let mut acc = TwoFloat::new_sub(y[i], mu);
                for j in 0..n {
                    acc -= TwoFloat::new_mul(k[(i, j)], hi[j]) + k[(i, j)] * lo[j];
                }
                acc.hi() + acc.lo()
            }),
        )
    };
    let mut lo = DVector::zeros(n);
    let mut resid = residual(weights, &lo);
    for _ in 0..3 {
        if resid.iter().all(|v| *v == 0.0) {
            break;
        }
        let d = factor.solve(resid.as_slice());
        let mut hi_next = weights.clone();
        let mut lo_next = lo.clone();
        for j in 0..n {
            let v = TwoFloat::new_add(weights[j], lo[j]) + d[j];
            hi_next[j] = v.hi();
            lo_next[j] = v.lo();
        }
        let next = residual(&hi_next, &lo_next);
        if !(next.norm() < resid.norm()) {
            break;
        }
        *weights = hi_next;
        lo = lo_next;
        resid = next;
    }
    lo
}

impl FittedModel {
    /// Builds a model at fixed kernel parameters (no estimation); `mu` and
    /// `sigma2` are still profiled.
    pub fn with_params(space: &DesignSpace, data: &Dataset, kernel: KernelParams) -> Result<Self> {
        Self::with_params_and_floor(space, data, kernel, 0.0)
    }

    /// As [`FittedModel::with_params`] with a minimum diagonal jitter.
    pub fn with_params_and_floor(
        space: &DesignSpace,
        data: &Dataset,
        kernel: KernelParams,
        jitter_floor: f64,
    ) -> Result<Self> {
        let (normalized, st, y) = prepare(space, data)?;
        let layout = ParamLayout::for_space(space, kernel.nugget > 0.0);
        if kernel.phi.len() != space.n_quant() || kernel.latents.level_counts() != space.level_counts() {
            return Err(Error::DimensionMismatch {
                what: "kernel parameters",
                expected: layout.n_params(),
                got: kernel.phi.len() + kernel.latents.factors.len(),
            });
        }
        let theta = layout.encode(&kernel);
        let factor = CorrMatrixFactor::factorize_with_floor(&corr_matrix(&normalized, &kernel), kernel.nugget, jitter_floor)?;
        Ok(Self::assemble(
            space.clone(),
            data.clone(),
            normalized,
            st,
            y,
            kernel,
            layout,
            theta,
            factor,
            jitter_floor,
            FitDiagnostics {
                converged: true,
                ..Default::default()
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        space: DesignSpace,
        data: Dataset,
        normalized: Vec<MixedPoint>,
        standardization: Standardization,
        y: Vec<f64>,
        kernel: KernelParams,
        layout: ParamLayout,
        theta: Vec<f64>,
        factor: CorrMatrixFactor,
        jitter_floor: f64,
        mut diagnostics: FitDiagnostics,
    ) -> Self {
        let w = whiten(&y, &factor);
        let mut weights = w.resid.clone();
        factor.l().tr_solve_lower_triangular_mut(&mut weights);
        let weights_lo = refine_weights(&normalized, &kernel, &factor, &y, w.moments.mu, &mut weights);
        let sigma2 = if w.moments.clamped {
            w.moments.sigma2
        } else {
            let mut acc = TwoFloat::from(0.0);
            for ((yi, hi), lo) in y.iter().zip(weights.iter()).zip(weights_lo.iter()) {
                let d = TwoFloat::new_sub(*yi, w.moments.mu);
                acc += d * (TwoFloat::new_add(*hi, *lo));
            }
            let v = f64::from(acc / y.len() as f64);
            if v > SIGMA2_FLOOR {
                v
            } else {
                w.moments.sigma2
            }
        };
        diagnostics.sigma2_clamped = w.moments.clamped;
        diagnostics.jitter = factor.jitter();
        diagnostics.neg_loglik = y.len() as f64 * w.moments.sigma2.ln() + factor.log_det();
        Self {
            space,
            data,
            normalized,
            standardization,
            params: LvgpParams {
                kernel,
                mu: w.moments.mu,
                sigma2,
            },
            layout,
            theta,
            factor,
            jitter_floor,
            weights,
            weights_lo,
            diagnostics,
        }
    }

    pub fn from_saved(saved: &SavedModel) -> Result<Self> {
        let mut kernel = saved.kernel.clone();
        if !saved.noisy {
            kernel.nugget = 0.0;
        }
        Self::with_params_and_floor(&saved.space, &saved.data, kernel, saved.jitter_floor)
    }

    pub fn to_saved(&self) -> SavedModel {
        SavedModel {
            space: self.space.clone(),
            data: self.data.clone(),
            kernel: self.params.kernel.clone(),
            noisy: self.layout.noisy(),
            jitter_floor: self.jitter_floor,
        }
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn jitter_floor(&self) -> f64 {
        self.jitter_floor
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &LvgpParams {
        &self.params
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Encoded optimum, usable as a warm start for the next fit.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn factor(&self) -> &CorrMatrixFactor {
        &self.factor
    }

    /// `R^{-1} (y - mu 1)` on the standardized scale.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    pub fn normalized_points(&self) -> &[MixedPoint] {
        &self.normalized
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    /// Mean in original units and process variance `sigma2 * scale^2`.
    pub fn mu(&self) -> f64 {
        self.standardization.undo(self.params.mu)
    }

    pub fn sigma2(&self) -> f64 {
        self.params.sigma2 * self.standardization.scale.powi(2)
    }

    pub fn predict(&self, query: &MixedPoint) -> Result<Prediction> {
        let q = self.space.normalize(query)?;
        Ok(self.predict_normalized(&q))
    }

    /// Prediction at a point already on the unit-normalized scale.
    ///
    /// Any jitter the factorization needed acts as a tiny nugget attached to
    /// exactly coincident inputs, so training points are still interpolated
    /// and, without a nugget, have zero variance.
    pub fn predict_normalized(&self, q: &MixedPoint) -> Prediction {
        let kernel = &self.params.kernel;
        let jitter = self.factor.jitter();
        let r: Vec<f64> = self
            .normalized
            .iter()
            .map(|p| {
                let c = kernel.corr_unchecked(q, p);
                if jitter > 0.0 && p == q {
                    c + jitter
                } else {
                    c
                }
            })
            .collect();
        let mut acc = TwoFloat::from(self.params.mu);
        for ((c, hi), lo) in r.iter().zip(self.weights.iter()).zip(self.weights_lo.iter()) {
            acc += TwoFloat::new_mul(*c, *hi) + c * lo;
        }
        let mean_std = acc.hi() + acc.lo();
        let observed = self.factor.nugget() == 0.0 && self.normalized.iter().any(|p| p == q);
        let var_std = if observed {
            0.0
        } else {
            let v = self.factor.solve_lower(&r);
            (self.params.sigma2 * (1.0 + jitter - v.norm_squared())).max(0.0)
        };
        let s = self.standardization.scale;
        Prediction {
            mean: self.standardization.undo(mean_std),
            variance: var_std * s * s,
        }
    }

    /// Fitted latent coordinates, one row per level of every factor.
    pub fn export_latents(&self) -> Vec<LatentRow> {
        let mut rows = Vec::new();
        for (j, spec) in self.space.qual().iter().enumerate() {
            for (l, label) in spec.levels.iter().enumerate() {
                let z = self.params.kernel.latents.factors[j][l];
                rows.push(LatentRow {
                    factor: spec.name.clone(),
                    level: label.clone(),
                    z1: z[0] + 0.0,
                    z2: z[1] + 0.0,
                });
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub factor: String,
    pub level: String,
    pub z1: f64,
    pub z2: f64,
}

/// Writes latent rows as a headered delimiter-separated table at full
/// float precision.
pub fn write_latents<W: Write>(rows: &[LatentRow], out: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
    w.write_record(["factor", "level", "z1", "z2"]).map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.factor.as_str(),
            r.level.as_str(),
            &format!("{:?}", r.z1),
            &format!("{:?}", r.z2),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Raw correlation matrix of the model's training points.
pub fn corr_matrix_of(model: &FittedModel) -> DMatrix<f64> {
    corr_matrix(&model.normalized, &model.params.kernel)
}

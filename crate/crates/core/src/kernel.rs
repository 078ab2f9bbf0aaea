//! Latent-variable correlation function and the training correlation matrix.
//!
//! Every qualitative factor maps its levels to points in a 2-D latent plane;
//! correlation decays with squared quantitative distance (weighted by the
//! roughness `phi`) plus squared latent distance. All quantitative inputs are
//! expected on the unit-normalized scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::MixedPoint;

/// Latent dimension per qualitative factor.
pub const LATENT_DIM: usize = 2;

/// Jitter ladder tried in order when the factorization is not positive definite.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// A Cholesky pivot at or below this value counts as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-12;

/// Shape of the decay applied to the combined squared distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationFamily {
    #[default]
    Gaussian,
}

impl CorrelationFamily {
    #[inline]
    pub fn from_sq_distance(self, d: f64) -> f64 {
        match self {
            CorrelationFamily::Gaussian => (-d).exp(),
        }
    }
}

/// Per-factor latent coordinates; `factors[j][l]` is the point for 0-based level `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub factors: Vec<Vec<[f64; 2]>>,
}

impl LatentEmbedding {
    pub fn new(factors: Vec<Vec<[f64; 2]>>) -> Self {
        Self { factors }
    }

    /// Regular polygon of radius `radius` per factor, already pinned.
    pub fn polygon(level_counts: &[usize], radius: f64) -> Self {
        let factors = level_counts
            .iter()
            .map(|&m| {
                let raw: Vec<[f64; 2]> = (0..m)
                    .map(|l| {
                        let a = 2.0 * std::f64::consts::PI * l as f64 / m as f64;
                        [radius * a.cos(), radius * a.sin()]
                    })
                    .collect();
                pin_rows(&raw)
            })
            .collect();
        Self { factors }
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.factors.iter().map(Vec::len).collect()
    }

    #[inline]
    pub fn point(&self, factor: usize, level: usize) -> [f64; 2] {
        self.factors[factor][level - 1]
    }

    /// True when every factor has level 1 at the origin and level 2 on the
    /// nonnegative first axis.
    pub fn is_pinned(&self) -> bool {
        self.factors.iter().all(|rows| {
            rows[0] == [0.0, 0.0] && rows.get(1).is_none_or(|r| r[1] == 0.0 && r[0] >= 0.0)
        })
    }

    /// Maps every factor onto the pinned representative of its isometry class.
    pub fn pinned(&self) -> Self {
        Self {
            factors: self.factors.iter().map(|r| pin_rows(r)).collect(),
        }
    }
}

/// Translates level 1 to the origin, rotates level 2 onto the positive first
/// axis, and mirrors across that axis so the first off-axis level has
/// `z2 > 0`. Pairwise distances are preserved.
pub fn pin_rows(rows: &[[f64; 2]]) -> Vec<[f64; 2]> {
    if rows.is_empty() {
        return Vec::new();
    }
    let o = rows[0];
    let shifted: Vec<[f64; 2]> = rows.iter().map(|r| [r[0] - o[0], r[1] - o[1]]).collect();
    let (c, s) = match shifted.get(1) {
        Some(r) => {
            let len = r[0].hypot(r[1]);
            if len > 0.0 {
                (r[0] / len, r[1] / len)
            } else {
                (1.0, 0.0)
            }
        }
        None => (1.0, 0.0),
    };
    let mut out: Vec<[f64; 2]> = shifted
        .iter()
        .map(|r| [c * r[0] + s * r[1], -s * r[0] + c * r[1]])
        .collect();
    out[0] = [0.0, 0.0];
    if out.len() > 1 {
        out[1] = [out[1][0].max(0.0), 0.0];
    }
    if let Some(first) = out.iter().skip(2).find(|r| r[1] != 0.0) {
        if first[1] < 0.0 {
            for r in out.iter_mut() {
                r[1] = -r[1];
            }
            out[1][1] = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Roughness per quantitative dimension (normalized scale).
    pub phi: Vec<f64>,
    pub latents: LatentEmbedding,
    /// Noise nugget added to the diagonal; 0 for deterministic responses.
    pub nugget: f64,
    #[serde(default)]
    pub family: CorrelationFamily,
}

impl KernelParams {
    pub fn new(phi: Vec<f64>, latents: LatentEmbedding, nugget: f64) -> Self {
        Self {
            phi,
            latents,
            nugget,
            family: CorrelationFamily::Gaussian,
        }
    }

    pub fn check_point(&self, pt: &MixedPoint) -> Result<()> {
        if pt.x.len() != self.phi.len() {
            return Err(Error::DimensionMismatch {
                what: "quantitative coordinates",
                expected: self.phi.len(),
                got: pt.x.len(),
            });
        }
        if pt.t.len() != self.latents.factors.len() {
            return Err(Error::DimensionMismatch {
                what: "qualitative factors",
                expected: self.latents.factors.len(),
                got: pt.t.len(),
            });
        }
        for (j, &l) in pt.t.iter().enumerate() {
            let m = self.latents.factors[j].len();
            if l < 1 || l > m {
                return Err(Error::DimensionMismatch {
                    what: "level index",
                    expected: m,
                    got: l,
                });
            }
        }
        Ok(())
    }

    /// Weighted squared distance in the combined quantitative/latent space.
    #[inline]
    pub fn sq_distance(&self, a: &MixedPoint, b: &MixedPoint) -> f64 {
        let mut d = 0.0;
        for ((phi, xa), xb) in self.phi.iter().zip(&a.x).zip(&b.x) {
            let diff = xa - xb;
            d += phi * diff * diff;
        }
        for (j, (&ta, &tb)) in a.t.iter().zip(&b.t).enumerate() {
            if ta != tb {
                let za = self.latents.point(j, ta);
                let zb = self.latents.point(j, tb);
                let d0 = za[0] - zb[0];
                let d1 = za[1] - zb[1];
                d += d0 * d0 + d1 * d1;
            }
        }
        d
    }

    #[inline]
    pub(crate) fn corr_unchecked(&self, a: &MixedPoint, b: &MixedPoint) -> f64 {
        self.family.from_sq_distance(self.sq_distance(a, b))
    }
}

/// Correlation between two normalized points.
pub fn correlation(a: &MixedPoint, b: &MixedPoint, params: &KernelParams) -> Result<f64> {
    params.check_point(a)?;
    params.check_point(b)?;
    Ok(params.corr_unchecked(a, b))
}

/// The raw correlation matrix `R` (unit diagonal, no nugget).
pub fn corr_matrix(points: &[MixedPoint], params: &KernelParams) -> DMatrix<f64> {
    let n = points.len();
    let mut r = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let c = params.corr_unchecked(&points[i], &points[j]);
            r[(i, j)] = c;
            r[(j, i)] = c;
        }
    }
    r
}

/// Cholesky factorization of `R + (nugget + jitter) I`.
#[derive(Debug, Clone)]
pub struct CorrMatrixFactor {
    l: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
    nugget: f64,
}

impl CorrMatrixFactor {
    /// Factorizes `r + nugget I`, escalating jitter along [`JITTER_LADDER`].
    pub fn factorize(r: &DMatrix<f64>, nugget: f64) -> Result<Self> {
        Self::factorize_with_floor(r, nugget, 0.0)
    }

    /// As [`factorize`](Self::factorize), with the jitter never below
    /// `floor`: the ladder starts at `floor` and continues with the larger
    /// rungs.
    pub fn factorize_with_floor(r: &DMatrix<f64>, nugget: f64, floor: f64) -> Result<Self> {
        let n = r.nrows();
        let floor = floor.max(0.0);
        let ladder = std::iter::once(floor).chain(JITTER_LADDER.iter().copied().filter(|&j| j > floor));
        for jitter in ladder {
            let mut k = r.clone();
            for i in 0..n {
                k[(i, i)] += nugget + jitter;
            }
            if let Some(ch) = k.cholesky() {
                let l = ch.unpack();
                let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
                if min_pivot > PIVOT_FLOOR && min_pivot.is_finite() {
                    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
                    return Ok(Self {
                        l,
                        log_det,
                        jitter,
                        nugget,
                    });
                }
            }
        }
        Err(Error::FactorizationFailed {
            max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1].max(floor),
        })
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// Lower-triangular factor `L` with `L Lᵀ = R + (nugget + jitter) I`.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `ln |R + (nugget + jitter) I|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// Solves `L v = b`.
    pub fn solve_lower(&self, b: &[f64]) -> DVector<f64> {
        let mut v = DVector::from_column_slice(b);
        self.l.solve_lower_triangular_mut(&mut v);
        v
    }

    /// Solves `(R + (nugget + jitter) I) x = b`.
    pub fn solve(&self, b: &[f64]) -> DVector<f64> {
        let mut v = self.solve_lower(b);
        self.l.tr_solve_lower_triangular_mut(&mut v);
        v
    }

    /// Explicit inverse, only for likelihood gradients.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut inv = DMatrix::<f64>::identity(n, n);
        self.l.solve_lower_triangular_mut(&mut inv);
        self.l.tr_solve_lower_triangular_mut(&mut inv);
        inv
    }
}

/// Assembles and factorizes the training correlation matrix.
pub fn build_corr_matrix(points: &[MixedPoint], params: &KernelParams) -> Result<CorrMatrixFactor> {
    if points.is_empty() {
        return Err(Error::InvalidDataset("cannot factorize an empty dataset".into()));
    }
    for p in points {
        params.check_point(p)?;
    }
    CorrMatrixFactor::factorize(&corr_matrix(points, params), params.nugget)
}

/// Correlations between `query` and every training point.
pub fn cross_corr_vector(
    query: &MixedPoint,
    points: &[MixedPoint],
    params: &KernelParams,
) -> Result<Vec<f64>> {
    params.check_point(query)?;
    for p in points {
        params.check_point(p)?;
    }
    Ok(points.iter().map(|p| params.corr_unchecked(query, p)).collect())
}

//! Expected improvement and its maximization over a mixed space.
//!
//! Without a candidate set, every qualitative tuple (or a uniform sample of
//! `enumeration_cap` tuples when there are more) gets a multi-start bounded
//! ascent of EI over the unit quantitative box. With a candidate set, EI is
//! evaluated on every candidate directly.

use std::collections::HashSet;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::design::random_lhs;
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::optim::{minimize_bounded, numerical_gradient, Bounds, LocalOptions};
use crate::space::MixedPoint;

/// Normalized distance below which a proposal counts as a resample.
pub const DUPLICATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionKind {
    /// Incumbent is the smallest observed response.
    #[default]
    Ei,
    /// Incumbent is the smallest posterior mean over the training inputs.
    EiPlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncumbentMode {
    ObservedMin,
    PlugIn,
}

impl From<AcquisitionKind> for IncumbentMode {
    fn from(k: AcquisitionKind) -> Self {
        match k {
            AcquisitionKind::Ei => IncumbentMode::ObservedMin,
            AcquisitionKind::EiPlugIn => IncumbentMode::PlugIn,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    pub enumeration_cap: usize,
    pub starts_per_tuple: usize,
    pub max_evals: usize,
    /// Explicit finite candidate set (original units) for tabular problems.
    #[serde(skip)]
    pub candidates: Option<Vec<MixedPoint>>,
    pub exclude_sampled: bool,
    pub parallel: bool,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::Ei,
            enumeration_cap: 4096,
            starts_per_tuple: 10,
            max_evals: 200,
            candidates: None,
            exclude_sampled: true,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub point: MixedPoint,
    pub ei: f64,
    pub mean: f64,
    pub sd: f64,
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Expected improvement below `incumbent` of a normal predictive
/// distribution. Degenerates to `max(0, incumbent - mean)` at zero spread.
pub fn expected_improvement(mean: f64, sd: f64, incumbent: f64) -> f64 {
    let delta = incumbent - mean;
    if !(sd > 0.0) {
        return delta.max(0.0);
    }
    let z = delta / sd;
    let ei = sd * std_normal_pdf(z) + delta * std_normal_cdf(z);
    if ei.is_finite() {
        ei.max(0.0)
    } else {
        0.0
    }
}

/// Reference value EI improves upon.
pub fn incumbent_value(model: &FittedModel, mode: IncumbentMode) -> f64 {
    match mode {
        IncumbentMode::ObservedMin => model.data().min_response().unwrap_or(f64::INFINITY),
        IncumbentMode::PlugIn => model
            .normalized_points()
            .iter()
            .map(|p| model.predict_normalized(p).mean)
            .fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone)]
struct Scored {
    point: MixedPoint,
    ei: f64,
    mean: f64,
    sd: f64,
}

fn score(model: &FittedModel, incumbent: f64, q: &MixedPoint) -> Scored {
    let pr = model.predict_normalized(q);
    let sd = pr.sd();
    Scored {
        point: q.clone(),
        ei: expected_improvement(pr.mean, sd, incumbent),
        mean: pr.mean,
        sd,
    }
}

/// True when `a` beats `b`: higher EI, then higher sd. Values within a
/// relative 1e-12 count as equal, so the earlier item keeps a tie.
fn better(a: &Scored, b: &Scored) -> bool {
    let differs = |u: f64, v: f64| (u - v).abs() > 1e-12 * u.abs().max(v.abs());
    if differs(a.ei, b.ei) {
        return a.ei > b.ei;
    }
    differs(a.sd, b.sd) && a.sd > b.sd
}

fn argmax<'a>(items: impl IntoIterator<Item = &'a Scored>) -> Option<&'a Scored> {
    let mut best: Option<&Scored> = None;
    for s in items {
        if best.is_none_or(|b| better(s, b)) {
            best = Some(s);
        }
    }
    best
}

fn point_key(p: &MixedPoint) -> (Vec<u64>, Vec<usize>) {
    (p.x.iter().map(|v| v.to_bits()).collect(), p.t.clone())
}

/// Proposes the next point to evaluate by maximizing EI.
pub fn propose_next<R: Rng + ?Sized>(
    model: &FittedModel,
    config: &AcquisitionConfig,
    rng: &mut R,
) -> Result<Proposal> {
    let mut subsample = ChaCha8Rng::from_rng(&mut &mut *rng);
    propose_next_with(model, config, rng, &mut subsample)
}

/// As [`propose_next`], drawing optimizer starts from `rng` and the tuple
/// subsample (when the tuple count exceeds the cap) from `subsample`.
pub fn propose_next_with<R: Rng + ?Sized, S: Rng + ?Sized>(
    model: &FittedModel,
    config: &AcquisitionConfig,
    rng: &mut R,
    subsample: &mut S,
) -> Result<Proposal> {
    let incumbent = incumbent_value(model, config.kind.into());
    let best = match &config.candidates {
        Some(cands) => propose_from_candidates(model, cands, config.exclude_sampled, incumbent)?,
        None => propose_continuous(model, config, incumbent, rng, subsample)?,
    };
    let point = model.space().denormalize(&best.point);
    Ok(Proposal {
        point,
        ei: best.ei,
        mean: best.mean,
        sd: best.sd,
    })
}

fn propose_from_candidates(
    model: &FittedModel,
    candidates: &[MixedPoint],
    exclude_sampled: bool,
    incumbent: f64,
) -> Result<Scored> {
    let sampled: HashSet<_> = if exclude_sampled {
        model.data().points.iter().map(point_key).collect()
    } else {
        HashSet::new()
    };
    let space = model.space();
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if sampled.contains(&point_key(c)) {
            continue;
        }
        let q = space.normalize(c)?;
        scored.push(score(model, incumbent, &q));
    }
    // Candidate order is preserved, so the earliest index wins remaining ties.
    argmax(&scored).cloned().ok_or(Error::ExhaustedSpace)
}

fn candidate_tuples<R: Rng + ?Sized>(model: &FittedModel, cap: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let space = model.space();
    let counts = space.level_counts();
    let total = counts.iter().try_fold(1usize, |a, &m| a.checked_mul(m));
    match total {
        Some(total) if total <= cap.max(1) => (0..total).map(|i| space.tuple_from_index(i)).collect(),
        Some(total) => {
            let mut idx = index::sample(rng, total, cap.max(1)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| space.tuple_from_index(i)).collect()
        }
        None => (0..cap.max(1))
            .map(|_| counts.iter().map(|&m| rng.random_range(1..=m)).collect())
            .collect(),
    }
}

fn propose_continuous<R: Rng + ?Sized, S: Rng + ?Sized>(
    model: &FittedModel,
    config: &AcquisitionConfig,
    incumbent: f64,
    rng: &mut R,
    subsample: &mut S,
) -> Result<Scored> {
    let p = model.space().n_quant();
    let tuples = candidate_tuples(model, config.enumeration_cap, subsample);
    let jobs: Vec<(Vec<usize>, Vec<Vec<f64>>)> = tuples
        .into_iter()
        .map(|t| {
            let starts = if p == 0 {
                vec![Vec::new()]
            } else {
                random_lhs(config.starts_per_tuple.max(1), p, rng)
            };
            (t, starts)
        })
        .collect();
    let fallback: Vec<f64> = (0..p).map(|_| rng.random()).collect();

    let bounds = Bounds::unit(p);
    let opts = LocalOptions {
        max_evals: config.max_evals.max(1),
        f_tol: 1e-9,
        g_tol: 1e-12,
    };
    let run = |(t, starts): &(Vec<usize>, Vec<Vec<f64>>)| -> Vec<Scored> {
        let mut out = Vec::new();
        for x0 in starts {
            let start = score(model, incumbent, &MixedPoint::new(x0.clone(), t.clone()));
            if p == 0 {
                out.push(start);
                continue;
            }
            let mut neg_ei = |x: &[f64]| -score(model, incumbent, &MixedPoint::new(x.to_vec(), t.clone())).ei;
            let res = minimize_bounded(
                |x| {
                    let f = neg_ei(x);
                    let g = numerical_gradient(&mut neg_ei, x, &bounds, 1e-6);
                    (f, g)
                },
                x0,
                &bounds,
                opts,
            );
            let end = score(model, incumbent, &MixedPoint::new(res.x, t.clone()));
            out.push(start);
            out.push(end);
        }
        out
    };
    let all: Vec<Scored> = if config.parallel {
        jobs.par_iter().flat_map_iter(run).collect()
    } else {
        jobs.iter().flat_map(run).collect()
    };

    let best = argmax(&all).cloned().expect("at least one tuple and start");
    if model.layout().noisy() {
        return Ok(best);
    }
    let is_dup = |s: &Scored| {
        model.normalized_points().iter().any(|q| {
            q.t == s.point.t
                && q.x
                    .iter()
                    .zip(&s.point.x)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    <= DUPLICATE_TOL
        })
    };
    if !is_dup(&best) {
        return Ok(best);
    }
    if let Some(alt) = argmax(all.iter().filter(|s| !is_dup(s))) {
        return Ok(alt.clone());
    }
    let t = best.point.t.clone();
    Ok(score(model, incumbent, &MixedPoint::new(fallback, t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelParams, LatentEmbedding};
    use crate::model::{fit, FitConfig};
    use crate::space::{Dataset, DesignSpace};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert!((expected_improvement(0.0, 1.0, 0.0) - 0.398_942_3).abs() < 1e-7);
        assert!((expected_improvement(0.0, 1e-12, 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(expected_improvement(0.0, 0.0, 1.0), 1.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn ei_matches_quadrature() {
        // E[max(0, I - Y)] with Y ~ N(m, s^2) by trapezoidal quadrature.
        for &(m, s, inc) in &[(0.3, 0.7, 0.1), (-1.0, 2.0, 0.5), (2.0, 0.5, 1.0)] {
            let n = 200_000;
            let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let y: f64 = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let dens = (-(y - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt());
                acc += w * (inc - y).max(0.0) * dens;
            }
            acc *= h;
            assert!((expected_improvement(m, s, inc) - acc).abs() < 1e-7, "{m} {s} {inc}");
        }
    }

    proptest! {
        #[test]
        fn ei_nonnegative_and_monotone_in_sd(delta in -5.0f64..5.0, s1 in 0.0f64..3.0, ds in 0.0f64..3.0) {
            let a = expected_improvement(0.0, s1, delta);
            let b = expected_improvement(0.0, s1 + ds, delta);
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a - 1e-15);
        }

        #[test]
        fn ei_translation_equivariant(m in -5.0f64..5.0, s in 0.0f64..3.0, inc in -5.0f64..5.0, c in -100.0f64..100.0) {
            let a = expected_improvement(m, s, inc);
            let b = expected_improvement(m + c, s, inc + c);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    fn one_d_model(xs: &[f64], ys: &[f64]) -> FittedModel {
        let space = DesignSpace::builder().quant("x", 0.0, 1.0).build().unwrap();
        let data = Dataset::new(xs.iter().map(|&x| MixedPoint::quant(vec![x])).collect(), ys.to_vec()).unwrap();
        fit(&space, &data, &FitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn incumbents_agree_when_interpolating() {
        let m = one_d_model(&[0.1, 0.5, 0.9], &[3.0, 1.0, 2.0]);
        assert_eq!(incumbent_value(&m, IncumbentMode::ObservedMin), 1.0);
        assert!((incumbent_value(&m, IncumbentMode::PlugIn) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn plug_in_smooths_outlier() {
        let space = DesignSpace::builder().quant("x", 0.0, 1.0).build().unwrap();
        let xs: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| (x - 0.5).powi(2)).collect();
        ys[7] -= 1.0;
        let data = Dataset::new(xs.iter().map(|&x| MixedPoint::quant(vec![x])).collect(), ys).unwrap();
        let k = KernelParams::new(vec![2.0], LatentEmbedding::new(vec![]), 0.5);
        let m = FittedModel::with_params(&space, &data, k).unwrap();
        let obs = incumbent_value(&m, IncumbentMode::ObservedMin);
        let plug = incumbent_value(&m, IncumbentMode::PlugIn);
        assert!(plug >= obs + 0.1, "plug {plug} obs {obs}");
    }

    #[test]
    fn single_point_proposal_moves_away() {
        let m = one_d_model(&[0.4], &[2.0]);
        let cfg = AcquisitionConfig {
            parallel: false,
            ..Default::default()
        };
        let p = propose_next(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((p.point.x[0] - 0.4).abs() > 1e-3);
        assert!(p.ei > 0.0);
        let at = m.predict(&MixedPoint::quant(vec![0.4])).unwrap();
        assert_eq!(expected_improvement(at.mean, at.sd(), 2.0), 0.0);
    }

    #[test]
    fn candidate_set_excludes_sampled_and_exhausts() {
        let space = DesignSpace::builder().qual("a", ["1", "2", "3"]).qual("b", ["1", "2"]).build().unwrap();
        let all: Vec<MixedPoint> = (0..6).map(|i| MixedPoint::qual(space.tuple_from_index(i))).collect();
        let data = Dataset::new(all[..2].to_vec(), vec![1.0, 2.0]).unwrap();
        let m = fit(&space, &data, &FitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = AcquisitionConfig {
            candidates: Some(all.clone()),
            ..Default::default()
        };
        let p = propose_next(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!data.points.contains(&p.point));

        let full = Dataset::new(all.clone(), vec![1.0, 2.0, 3.0, 0.5, 1.5, 2.5]).unwrap();
        let m = fit(&space, &full, &FitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(propose_next(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::ExhaustedSpace)));
    }

    #[test]
    fn symmetric_tie_break_prefers_first_candidate() {
        // Symmetric data about 0.5; candidates 0.2 and 0.8 score identically.
        let space = DesignSpace::builder().quant("x", 0.0, 1.0).build().unwrap();
        let data = Dataset::new(
            vec![MixedPoint::quant(vec![0.0]), MixedPoint::quant(vec![0.5]), MixedPoint::quant(vec![1.0])],
            vec![1.0, 0.0, 1.0],
        )
        .unwrap();
        let k = KernelParams::new(vec![4.0], LatentEmbedding::new(vec![]), 0.0);
        let m = FittedModel::with_params(&space, &data, k).unwrap();
        for order in [[0.2, 0.8], [0.8, 0.2]] {
            let cands: Vec<MixedPoint> = order.iter().map(|&x| MixedPoint::quant(vec![x])).collect();
            let cfg = AcquisitionConfig {
                candidates: Some(cands),
                ..Default::default()
            };
            let p = propose_next(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(p.point.x[0], order[0]);
        }
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let space = DesignSpace::builder().qual("c", ["a", "b", "c", "d", "e"]).build().unwrap();
        let data = Dataset::new(
            vec![MixedPoint::qual(vec![1]), MixedPoint::qual(vec![3]), MixedPoint::qual(vec![4])],
            vec![2.0, 0.5, 1.0],
        )
        .unwrap();
        let m = fit(&space, &data, &FitConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let inc = incumbent_value(&m, IncumbentMode::ObservedMin);
        let brute = (1..=5)
            .map(|l| {
                let pr = m.predict(&MixedPoint::qual(vec![l])).unwrap();
                (l, expected_improvement(pr.mean, pr.sd(), inc))
            })
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        let p = propose_next(&m, &AcquisitionConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p.point.t[0], brute.0);
        assert!((p.ei - brute.1).abs() < 1e-12);
    }

    #[test]
    fn tuple_subsampling_respects_cap() {
        let space = DesignSpace::builder()
            .quant("x", 0.0, 1.0)
            .qual("a", ["1", "2", "3", "4"])
            .qual("b", ["1", "2", "3", "4"])
            .build()
            .unwrap();
        let data = Dataset::new(
            vec![MixedPoint::new(vec![0.2], vec![1, 1]), MixedPoint::new(vec![0.7], vec![2, 3])],
            vec![1.0, 0.0],
        )
        .unwrap();
        let m = fit(&space, &data, &FitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tuples = candidate_tuples(&m, 5, &mut rng);
        assert_eq!(tuples.len(), 5);
        let uniq: HashSet<_> = tuples.iter().collect();
        assert_eq!(uniq.len(), 5);
        assert_eq!(candidate_tuples(&m, 4096, &mut rng).len(), 16);
    }
}

//! Initial designs: maximin Latin hypercubes for quantitative variables,
//! uniform level draws for qualitative factors.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::space::{DesignSpace, MixedPoint};

/// Default number of random hypercubes compared by [`maximin_lhs`].
pub const DEFAULT_LHS_RESTARTS: usize = 50;

/// Random Latin hypercube in `[0, 1]^p`: each column is a permutation of the
/// `n` strata with a uniform jitter inside each stratum.
pub fn random_lhs<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut design = vec![vec![0.0; p]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..p {
        perm.shuffle(rng);
        for (i, row) in design.iter_mut().enumerate() {
            let u: f64 = rng.random();
            row[j] = ((perm[i] as f64 + u) / n as f64).min(1.0);
        }
    }
    design
}

/// Smallest pairwise Euclidean distance; `inf` for fewer than two rows.
pub fn min_pairwise_distance(design: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..design.len() {
        for j in 0..i {
            let d2: f64 = design[i]
                .iter()
                .zip(&design[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

/// Best of `restarts` random Latin hypercubes under the maximin criterion.
/// Earlier candidates win ties.
pub fn maximin_lhs<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R, restarts: usize) -> Vec<Vec<f64>> {
    let mut best = random_lhs(n, p, rng);
    let mut best_d = min_pairwise_distance(&best);
    for _ in 1..restarts.max(1) {
        let cand = random_lhs(n, p, rng);
        let d = min_pairwise_distance(&cand);
        if d > best_d {
            best = cand;
            best_d = d;
        }
    }
    best
}

/// `n0` points: maximin-LHS quantitative coordinates scaled to the bounds and
/// i.i.d. uniform levels.
pub fn initial_design<R: Rng + ?Sized>(space: &DesignSpace, n0: usize, rng: &mut R) -> Vec<MixedPoint> {
    let unit = maximin_lhs(n0, space.n_quant(), rng, DEFAULT_LHS_RESTARTS);
    let counts = space.level_counts();
    unit.into_iter()
        .map(|u| {
            let t = counts.iter().map(|&m| rng.random_range(1..=m)).collect();
            space.denormalize(&MixedPoint::new(u, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stratified_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = maximin_lhs(10, 2, &mut rng, 50);
        for j in 0..2 {
            let mut strata: Vec<usize> = d.iter().map(|r| (r[j] * 10.0).floor() as usize).collect();
            strata.sort();
            assert_eq!(strata, (0..10).collect::<Vec<_>>());
        }
        let d = maximin_lhs(2, 1, &mut rng, 50);
        assert!((d[0][0] < 0.5) != (d[1][0] < 0.5));
        let d = maximin_lhs(4, 1, &mut rng, 50);
        let mut s: Vec<usize> = d.iter().map(|r| ((r[0] * 4.0).floor() as usize).min(3)).collect();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn more_restarts_never_worse() {
        for seed in 0..20 {
            let a = maximin_lhs(5, 2, &mut ChaCha8Rng::seed_from_u64(seed), 50);
            let b = maximin_lhs(5, 2, &mut ChaCha8Rng::seed_from_u64(seed), 1);
            assert!(min_pairwise_distance(&a) >= min_pairwise_distance(&b));
        }
    }

    #[test]
    fn design_is_deterministic_and_valid() {
        let space = DesignSpace::builder()
            .quant("a", -5.0, 10.0)
            .quant("b", 0.0, 1.0)
            .qual("c", ["1", "2", "3"])
            .build()
            .unwrap();
        let d1 = initial_design(&space, 10, &mut ChaCha8Rng::seed_from_u64(7));
        let d2 = initial_design(&space, 10, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(d1, d2);
        for p in &d1 {
            assert!(space.validate_point(p).is_ok());
        }
        let mut strata: Vec<usize> = d1.iter().map(|p| (((p.x[0] + 5.0) / 15.0 * 10.0).floor() as usize).min(9)).collect();
        strata.sort();
        assert_eq!(strata, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_level_frequencies() {
        let space = DesignSpace::builder().qual("c", ["a", "b", "c", "d"]).build().unwrap();
        let d = initial_design(&space, 400, &mut ChaCha8Rng::seed_from_u64(3));
        let mut counts = [0usize; 4];
        for p in &d {
            counts[p.t[0] - 1] += 1;
        }
        // Binomial(400, 1/4): mean 100, sd ~8.66.
        let sd = (400.0f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= 4.0 * sd, "{counts:?}");
        }
    }
}

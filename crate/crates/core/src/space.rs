//! Mixed design spaces: quantitative box bounds plus qualitative factors.
//!
//! Level indices are 1-based everywhere in the public API, so that level `k`
//! of a factor is `levels[k - 1]`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl QuantSpec {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualSpec {
    pub name: String,
    pub levels: Vec<String>,
}

impl QualSpec {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// 1-based index of a level label.
    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label).map(|i| i + 1)
    }
}

/// A validated mixed design space. Construct with [`DesignSpace::builder`]
/// or [`DesignSpace::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct DesignSpace {
    quant: Vec<QuantSpec>,
    qual: Vec<QualSpec>,
}

#[derive(Deserialize)]
struct RawSpace {
    quant: Vec<QuantSpec>,
    qual: Vec<QualSpec>,
}

impl TryFrom<RawSpace> for DesignSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        DesignSpace::new(raw.quant, raw.qual)
    }
}

impl DesignSpace {
    pub fn new(quant: Vec<QuantSpec>, qual: Vec<QualSpec>) -> Result<Self> {
        if quant.is_empty() && qual.is_empty() {
            return Err(Error::InvalidSpace("space needs at least one variable".into()));
        }
        let mut names = HashSet::new();
        for q in &quant {
            if !(q.lower.is_finite() && q.upper.is_finite()) || q.lower >= q.upper {
                return Err(Error::InvalidSpace(format!(
                    "variable '{}' needs finite bounds with lower < upper, got [{}, {}]",
                    q.name, q.lower, q.upper
                )));
            }
            if !names.insert(q.name.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate variable name '{}'", q.name)));
            }
        }
        for f in &qual {
            if f.levels.len() < 2 {
                return Err(Error::InvalidSpace(format!(
                    "factor '{}' has {} level(s); at least 2 are required",
                    f.name,
                    f.levels.len()
                )));
            }
            let mut seen = HashSet::new();
            for l in &f.levels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::InvalidSpace(format!(
                        "factor '{}' repeats level label '{}'",
                        f.name, l
                    )));
                }
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate variable name '{}'", f.name)));
            }
        }
        Ok(Self { quant, qual })
    }

    pub fn builder() -> DesignSpaceBuilder {
        DesignSpaceBuilder::default()
    }

    pub fn quant(&self) -> &[QuantSpec] {
        &self.quant
    }

    pub fn qual(&self) -> &[QualSpec] {
        &self.qual
    }

    /// Number of quantitative variables, `p`.
    pub fn n_quant(&self) -> usize {
        self.quant.len()
    }

    /// Number of qualitative factors, `q`.
    pub fn n_qual(&self) -> usize {
        self.qual.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.qual.iter().map(QualSpec::n_levels).collect()
    }

    /// Number of distinct qualitative tuples, saturating at `usize::MAX`.
    pub fn n_tuples(&self) -> usize {
        self.qual
            .iter()
            .fold(1usize, |acc, f| acc.saturating_mul(f.n_levels()))
    }

    /// Decodes a mixed-radix index in `0..n_tuples()` into a 1-based tuple.
    /// The last factor varies fastest.
    pub fn tuple_from_index(&self, mut index: usize) -> Vec<usize> {
        let mut t = vec![0; self.qual.len()];
        for (j, f) in self.qual.iter().enumerate().rev() {
            let m = f.n_levels();
            t[j] = index % m + 1;
            index /= m;
        }
        t
    }

    /// Lists every violated constraint; empty means the point is valid.
    pub fn violations(&self, pt: &MixedPoint) -> Vec<Violation> {
        let mut out = Vec::new();
        if pt.x.len() != self.quant.len() {
            out.push(Violation::QuantCount {
                expected: self.quant.len(),
                got: pt.x.len(),
            });
        } else {
            for (i, (v, spec)) in pt.x.iter().zip(&self.quant).enumerate() {
                if !(v.is_finite() && *v >= spec.lower && *v <= spec.upper) {
                    out.push(Violation::OutOfBounds {
                        index: i,
                        name: spec.name.clone(),
                        value: *v,
                        lower: spec.lower,
                        upper: spec.upper,
                    });
                }
            }
        }
        if pt.t.len() != self.qual.len() {
            out.push(Violation::QualCount {
                expected: self.qual.len(),
                got: pt.t.len(),
            });
        } else {
            for (j, (l, spec)) in pt.t.iter().zip(&self.qual).enumerate() {
                if *l < 1 || *l > spec.n_levels() {
                    out.push(Violation::BadLevel {
                        index: j,
                        name: spec.name.clone(),
                        level: *l,
                        n_levels: spec.n_levels(),
                    });
                }
            }
        }
        out
    }

    pub fn validate_point(&self, pt: &MixedPoint) -> Result<()> {
        let v = self.violations(pt);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidPoint(v))
        }
    }

    /// Scales quantitative coordinates to `[0, 1]`; levels are untouched.
    pub fn normalize(&self, pt: &MixedPoint) -> Result<MixedPoint> {
        self.validate_point(pt)?;
        Ok(self.normalize_unchecked(pt))
    }

    pub(crate) fn normalize_unchecked(&self, pt: &MixedPoint) -> MixedPoint {
        let x = pt
            .x
            .iter()
            .zip(&self.quant)
            .map(|(v, s)| (v - s.lower) / s.width())
            .collect();
        MixedPoint { x, t: pt.t.clone() }
    }

    /// Inverse of [`normalize`](Self::normalize). Coordinates are clamped to
    /// the unit box first so round-off never produces an out-of-bounds point.
    pub fn denormalize(&self, pt: &MixedPoint) -> MixedPoint {
        let x = pt
            .x
            .iter()
            .zip(&self.quant)
            .map(|(u, s)| {
                let u = u.clamp(0.0, 1.0);
                (s.lower + u * s.width()).clamp(s.lower, s.upper)
            })
            .collect();
        MixedPoint { x, t: pt.t.clone() }
    }

    pub fn level_label(&self, factor: usize, level: usize) -> &str {
        &self.qual[factor].levels[level - 1]
    }
}

#[derive(Debug, Default)]
pub struct DesignSpaceBuilder {
    quant: Vec<QuantSpec>,
    qual: Vec<QualSpec>,
}

impl DesignSpaceBuilder {
    pub fn quant(mut self, name: impl Into<String>, lower: f64, upper: f64) -> Self {
        self.quant.push(QuantSpec {
            name: name.into(),
            lower,
            upper,
        });
        self
    }

    pub fn qual<S: Into<String>>(
        mut self,
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
    ) -> Self {
        self.qual.push(QualSpec {
            name: name.into(),
            levels: levels.into_iter().map(Into::into).collect(),
        });
        self
    }

    pub fn build(self) -> Result<DesignSpace> {
        DesignSpace::new(self.quant, self.qual)
    }
}

/// One design: `p` real coordinates and `q` 1-based level indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPoint {
    pub x: Vec<f64>,
    pub t: Vec<usize>,
}

impl MixedPoint {
    pub fn new(x: Vec<f64>, t: Vec<usize>) -> Self {
        Self { x, t }
    }

    pub fn quant(x: Vec<f64>) -> Self {
        Self { x, t: Vec::new() }
    }

    pub fn qual(t: Vec<usize>) -> Self {
        Self { x: Vec::new(), t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    QuantCount { expected: usize, got: usize },
    QualCount { expected: usize, got: usize },
    OutOfBounds {
        index: usize,
        name: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    BadLevel {
        index: usize,
        name: String,
        level: usize,
        n_levels: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::QuantCount { expected, got } => {
                write!(f, "expected {expected} quantitative coordinates, got {got}")
            }
            Violation::QualCount { expected, got } => {
                write!(f, "expected {expected} level indices, got {got}")
            }
            Violation::OutOfBounds {
                name,
                value,
                lower,
                upper,
                ..
            } => write!(f, "'{name}' = {value} outside [{lower}, {upper}]"),
            Violation::BadLevel {
                name,
                level,
                n_levels,
                ..
            } => {
                if *level == 0 {
                    write!(f, "'{name}': level index 0 is invalid (indices are 1-based)")
                } else {
                    write!(f, "'{name}': level index {level} exceeds {n_levels}")
                }
            }
        }
    }
}

/// Observed `(point, response)` pairs over one design space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<MixedPoint>,
    pub responses: Vec<f64>,
}

impl Dataset {
    pub fn new(points: Vec<MixedPoint>, responses: Vec<f64>) -> Result<Self> {
        if points.len() != responses.len() {
            return Err(Error::InvalidDataset(format!(
                "{} points but {} responses",
                points.len(),
                responses.len()
            )));
        }
        Ok(Self { points, responses })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, pt: MixedPoint, y: f64) {
        self.points.push(pt);
        self.responses.push(y);
    }

    /// Checks every point against `space` and every response for finiteness.
    pub fn validate(&self, space: &DesignSpace) -> Result<()> {
        if self.points.len() != self.responses.len() {
            return Err(Error::InvalidDataset("length mismatch".into()));
        }
        for (i, (p, y)) in self.points.iter().zip(&self.responses).enumerate() {
            if let Err(Error::InvalidPoint(v)) = space.validate_point(p) {
                return Err(Error::InvalidDataset(format!(
                    "row {i}: {}",
                    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
                )));
            }
            if !y.is_finite() {
                return Err(Error::InvalidDataset(format!("row {i}: non-finite response {y}")));
            }
        }
        Ok(())
    }

    pub fn min_response(&self) -> Option<f64> {
        self.responses.iter().copied().reduce(f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> DesignSpace {
        DesignSpace::builder().quant("x", 0.0, 1.0).build().unwrap()
    }

    #[test]
    fn interior_and_boundary_points_validate() {
        let s = unit();
        assert!(s.validate_point(&MixedPoint::quant(vec![0.5])).is_ok());
        assert!(s.validate_point(&MixedPoint::quant(vec![1.0])).is_ok());
        assert!(s.validate_point(&MixedPoint::quant(vec![0.0])).is_ok());
    }

    #[test]
    fn bad_level_reported() {
        let s = DesignSpace::builder().qual("c", ["a", "b", "c"]).build().unwrap();
        let v = s.violations(&MixedPoint::qual(vec![4]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "'c': level index 4 exceeds 3");
    }

    #[test]
    fn every_violation_listed() {
        let s = DesignSpace::builder()
            .quant("a", 0.0, 1.0)
            .quant("b", 0.0, 1.0)
            .qual("c", ["u", "v"])
            .build()
            .unwrap();
        let v = s.violations(&MixedPoint::new(vec![-0.1, 2.0], vec![0]));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn construction_errors() {
        assert!(DesignSpace::builder().build().is_err());
        assert!(DesignSpace::builder().quant("x", 1.0, 1.0).build().is_err());
        assert!(DesignSpace::builder().quant("x", 2.0, 1.0).build().is_err());
        assert!(DesignSpace::builder().qual("c", ["only"]).build().is_err());
        assert!(DesignSpace::builder().qual("c", ["a", "a"]).build().is_err());
        assert!(DesignSpace::builder()
            .quant("x", 0.0, 1.0)
            .qual("x", ["a", "b"])
            .build()
            .is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = DesignSpace::builder().quant("t1", 50.0, 300.0).build().unwrap();
        let n = |v: f64| s.normalize(&MixedPoint::quant(vec![v])).unwrap().x[0];
        assert_eq!(n(50.0), 0.0);
        assert_eq!(n(300.0), 1.0);
        assert_eq!(n(175.0), 0.5);
        assert!(s.normalize(&MixedPoint::quant(vec![301.0])).is_err());
    }

    #[test]
    fn tuple_index_roundtrip_covers_product() {
        let s = DesignSpace::builder()
            .qual("a", ["1", "2", "3"])
            .qual("b", ["1", "2"])
            .build()
            .unwrap();
        let all: HashSet<Vec<usize>> = (0..s.n_tuples()).map(|i| s.tuple_from_index(i)).collect();
        assert_eq!(all.len(), 6);
        assert!(all.contains(&vec![3, 2]));
    }

    #[test]
    fn space_serde_revalidates() {
        let bad = r#"{"quant":[],"qual":[{"name":"c","levels":["x"]}]}"#;
        assert!(serde_json::from_str::<DesignSpace>(bad).is_err());
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(lo in -1e3f64..1e3, w in 1e-3f64..1e4, u in 0.0f64..=1.0, level in 1usize..=3) {
            let s = DesignSpace::builder()
                .quant("x", lo, lo + w)
                .qual("c", ["a", "b", "c"])
                .build()
                .unwrap();
            let pt = MixedPoint::new(vec![lo + u * w], vec![level]);
            prop_assume!(s.validate_point(&pt).is_ok());
            let back = s.denormalize(&s.normalize(&pt).unwrap());
            prop_assert_eq!(&back.t, &pt.t);
            let tol = 1e-12 * pt.x[0].abs().max(w).max(1.0);
            prop_assert!((back.x[0] - pt.x[0]).abs() <= tol);
        }

        #[test]
        fn validate_agrees_with_normalize(v in -2.0f64..3.0, level in 0usize..5) {
            let s = DesignSpace::builder()
                .quant("x", 0.0, 1.0)
                .qual("c", ["a", "b", "c"])
                .build()
                .unwrap();
            let pt = MixedPoint::new(vec![v], vec![level]);
            prop_assert_eq!(s.validate_point(&pt).is_ok(), s.normalize(&pt).is_ok());
        }
    }
}

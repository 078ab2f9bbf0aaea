//! Test objectives: mixed-variable Branin and Goldstein-Price functions (the
//! second input made qualitative), table-lookup objectives for finite
//! combinatorial spaces, and a seeded Gaussian-noise wrapper.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::Objective;
use crate::error::{Error, Result};
use crate::space::{DesignSpace, MixedPoint, QualSpec};

/// Values of the second Branin input selected by levels 1..=4.
pub const BRANIN_LEVELS: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
pub const BRANIN_X1_RANGE: (f64, f64) = (-5.0, 10.0);
/// Published optimum value over the mixed space, attained near `(-2.6, 10)`.
pub const BRANIN_MIN: f64 = 2.79118;

/// Values of the second Goldstein-Price input selected by levels 1..=5.
pub const GOLDSTEIN_PRICE_LEVELS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
pub const GOLDSTEIN_PRICE_X1_RANGE: (f64, f64) = (-2.0, 2.0);
/// Global minimum `f(0, -1) = 3`.
pub const GOLDSTEIN_PRICE_MIN: f64 = 3.0;

/// The continuous two-input Branin function.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - 1.0 / (8.0 * PI)) * x1.cos() + 10.0
}

/// The continuous two-input Goldstein-Price function.
pub fn goldstein_price(x1: f64, x2: f64) -> f64 {
    let a = 1.0
        + (x1 + x2 + 1.0).powi(2)
            * (19.0 - 14.0 * x1 + 3.0 * x1 * x1 - 14.0 * x2 + 6.0 * x1 * x2 + 3.0 * x2 * x2);
    let b = 30.0
        + (2.0 * x1 - 3.0 * x2).powi(2)
            * (18.0 - 32.0 * x1 + 12.0 * x1 * x1 + 48.0 * x2 - 36.0 * x1 * x2 + 27.0 * x2 * x2);
    a * b
}

fn check(name: &str, x1: f64, range: (f64, f64), level: usize, n_levels: usize) -> Result<()> {
    if !(x1 >= range.0 && x1 <= range.1) {
        return Err(Error::OutOfRange(format!(
            "{name}: x1 = {x1} outside [{}, {}]",
            range.0, range.1
        )));
    }
    if level < 1 || level > n_levels {
        return Err(Error::OutOfRange(format!("{name}: level {level} outside 1..={n_levels}")));
    }
    Ok(())
}

pub fn branin_mixed(x1: f64, level: usize) -> Result<f64> {
    check("branin", x1, BRANIN_X1_RANGE, level, BRANIN_LEVELS.len())?;
    Ok(branin(x1, BRANIN_LEVELS[level - 1]))
}

pub fn goldstein_price_mixed(x1: f64, level: usize) -> Result<f64> {
    check(
        "goldstein-price",
        x1,
        GOLDSTEIN_PRICE_X1_RANGE,
        level,
        GOLDSTEIN_PRICE_LEVELS.len(),
    )?;
    Ok(goldstein_price(x1, GOLDSTEIN_PRICE_LEVELS[level - 1]))
}

fn level_labels(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| format!("{v}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    Branin,
    GoldsteinPrice,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Branin => "branin",
            Benchmark::GoldsteinPrice => "goldstein-price",
        }
    }

    pub fn space(self) -> DesignSpace {
        let (range, levels) = match self {
            Benchmark::Branin => (BRANIN_X1_RANGE, &BRANIN_LEVELS[..]),
            Benchmark::GoldsteinPrice => (GOLDSTEIN_PRICE_X1_RANGE, &GOLDSTEIN_PRICE_LEVELS[..]),
        };
        DesignSpace::builder()
            .quant("x1", range.0, range.1)
            .qual("x2", level_labels(levels))
            .build()
            .expect("benchmark space is valid")
    }

    pub fn evaluate(self, pt: &MixedPoint) -> Result<f64> {
        if pt.x.len() != 1 || pt.t.len() != 1 {
            return Err(Error::OutOfRange(format!(
                "{} takes one quantitative and one qualitative input",
                self.name()
            )));
        }
        match self {
            Benchmark::Branin => branin_mixed(pt.x[0], pt.t[0]),
            Benchmark::GoldsteinPrice => goldstein_price_mixed(pt.x[0], pt.t[0]),
        }
    }

    pub fn known_minimum(self) -> f64 {
        match self {
            Benchmark::Branin => BRANIN_MIN,
            Benchmark::GoldsteinPrice => GOLDSTEIN_PRICE_MIN,
        }
    }
}

impl Objective for Benchmark {
    fn evaluate(&mut self, point: &MixedPoint) -> Result<f64> {
        Benchmark::evaluate(*self, point)
    }
}

/// Column roles for a delimiter-separated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    /// Columns holding qualitative factors, in factor order.
    pub factors: Vec<String>,
    pub response: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Optional explicit level lists; labels outside them are load errors.
    /// Without them, levels are taken in order of first appearance.
    #[serde(default)]
    pub levels: HashMap<String, Vec<String>>,
}

fn default_delimiter() -> char {
    ','
}

impl TabularSchema {
    pub fn new(factors: Vec<String>, response: impl Into<String>) -> Self {
        Self {
            factors,
            response: response.into(),
            delimiter: ',',
            levels: HashMap::new(),
        }
    }
}

/// Exact lookup objective over an all-qualitative space.
#[derive(Debug, Clone)]
pub struct TabularObjective {
    space: DesignSpace,
    rows: HashMap<Vec<usize>, f64>,
    order: Vec<Vec<usize>>,
    columns: Vec<String>,
    source: Option<PathBuf>,
}

impl TabularObjective {
    pub fn from_reader<R: Read>(reader: R, schema: &TabularSchema) -> Result<Self> {
        if !schema.delimiter.is_ascii() {
            return Err(Error::TabularLoad("delimiter must be a single ASCII character".into()));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(schema.delimiter as u8)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::TabularLoad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::TabularLoad(format!("missing column '{name}'")))
        };
        let factor_cols = schema.factors.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;
        let response_col = col(&schema.response)?;

        let mut levels: Vec<Vec<String>> = schema
            .factors
            .iter()
            .map(|f| schema.levels.get(f).cloned().unwrap_or_default())
            .collect();
        let fixed: Vec<bool> = schema.factors.iter().map(|f| schema.levels.contains_key(f)).collect();
        let mut rows = HashMap::new();
        let mut first_line: HashMap<Vec<usize>, u64> = HashMap::new();
        let mut order = Vec::new();
        let mut errors = Vec::new();

        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::TabularLoad(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let mut tuple = Vec::with_capacity(factor_cols.len());
            let mut ok = true;
            for (j, &c) in factor_cols.iter().enumerate() {
                let label = rec.get(c).unwrap_or("");
                match levels[j].iter().position(|l| l == label) {
                    Some(i) => tuple.push(i + 1),
                    None if fixed[j] => {
                        errors.push(format!(
                            "line {line}: unknown level '{label}' for '{}'",
                            schema.factors[j]
                        ));
                        ok = false;
                    }
                    None => {
                        levels[j].push(label.to_string());
                        tuple.push(levels[j].len());
                    }
                }
            }
            let raw = rec.get(response_col).unwrap_or("");
            let y = match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    errors.push(format!("line {line}: non-numeric response '{raw}'"));
                    continue;
                }
            };
            if !ok {
                continue;
            }
            if let Some(prev) = first_line.get(&tuple) {
                errors.push(format!("line {line}: duplicate tuple (first seen on line {prev})"));
                continue;
            }
            first_line.insert(tuple.clone(), line);
            rows.insert(tuple.clone(), y);
            order.push(tuple);
        }
        if !errors.is_empty() {
            return Err(Error::TabularLoad(errors.join("; ")));
        }
        if rows.is_empty() {
            return Err(Error::TabularLoad("table has no data rows".into()));
        }
        let qual = schema
            .factors
            .iter()
            .zip(levels)
            .map(|(name, levels)| QualSpec {
                name: name.clone(),
                levels,
            })
            .collect();
        let space = DesignSpace::new(Vec::new(), qual)?;
        Ok(Self {
            space,
            rows,
            order,
            columns: headers,
            source: None,
        })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Stored tuples in file order.
    pub fn tuples(&self) -> &[Vec<usize>] {
        &self.order
    }

    /// Every stored tuple as a point, in file order.
    pub fn candidates(&self) -> Vec<MixedPoint> {
        self.order.iter().map(|t| MixedPoint::qual(t.clone())).collect()
    }

    pub fn lookup(&self, tuple: &[usize]) -> Result<f64> {
        self.rows
            .get(tuple)
            .copied()
            .ok_or_else(|| Error::UnknownTuple(tuple.to_vec()))
    }

    pub fn response_range(&self) -> (f64, f64) {
        self.rows
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    pub fn labels(&self, tuple: &[usize]) -> Vec<String> {
        tuple
            .iter()
            .enumerate()
            .map(|(j, &l)| self.space.level_label(j, l).to_string())
            .collect()
    }

    /// Full scan for the smallest response; the earliest row wins ties.
    pub fn exhaustive_oracle(&self) -> (Vec<usize>, f64) {
        let mut best: Option<(&Vec<usize>, f64)> = None;
        for t in &self.order {
            let v = self.rows[t];
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((t, v));
            }
        }
        let (t, v) = best.expect("table is nonempty");
        (t.clone(), v)
    }
}

impl Objective for TabularObjective {
    fn evaluate(&mut self, point: &MixedPoint) -> Result<f64> {
        if !point.x.is_empty() {
            return Err(Error::OutOfRange("tabular objectives take no quantitative inputs".into()));
        }
        self.lookup(&point.t)
    }
}

pub fn load_tabular(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<TabularObjective> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut obj = TabularObjective::from_reader(file, schema)?;
    obj.source = Some(path.to_path_buf());
    Ok(obj)
}

pub fn exhaustive_oracle(obj: &TabularObjective) -> (Vec<usize>, f64) {
    obj.exhaustive_oracle()
}

/// Adds i.i.d. `N(0, sd^2)` noise. The draw for the `k`-th call depends only
/// on `(seed, k)`.
#[derive(Debug, Clone)]
pub struct NoisyObjective<O> {
    inner: O,
    sd: f64,
    seed: u64,
    calls: u64,
}

impl<O> NoisyObjective<O> {
    pub fn new(inner: O, sd: f64, seed: u64) -> Self {
        assert!(sd >= 0.0, "noise sd must be nonnegative");
        Self {
            inner,
            sd,
            seed,
            calls: 0,
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn noise(&self, call: u64) -> f64 {
        if self.sd == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(call);
        Normal::new(0.0, self.sd).expect("finite sd").sample(&mut rng)
    }
}

pub fn noisy_wrapper<O: Objective>(obj: O, sd: f64, seed: u64) -> NoisyObjective<O> {
    NoisyObjective::new(obj, sd, seed)
}

impl<O: Objective> Objective for NoisyObjective<O> {
    fn evaluate(&mut self, point: &MixedPoint) -> Result<f64> {
        let v = self.inner.evaluate(point)?;
        let e = self.noise(self.calls);
        self.calls += 1;
        Ok(v + e)
    }

    fn is_noisy(&self) -> bool {
        self.sd > 0.0 || self.inner.is_noisy()
    }

    fn budget(&self) -> Option<usize> {
        self.inner.budget()
    }
}

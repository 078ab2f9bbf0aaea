//! Sequential optimization loop with an ask/tell interface.
//!
//! A [`Campaign`] hands out the initial design first, then refits the model
//! on every successful evaluation and proposes the EI maximizer. One root seed
//! feeds four independent ChaCha streams (initial design, likelihood starts,
//! acquisition starts, tuple subsampling).

use std::io::{BufRead, Write};

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{propose_next_with, AcquisitionConfig};
use crate::design::initial_design;
use crate::error::{Error, Result};
use crate::model::{fit_warm, FitConfig, FittedModel};
use crate::space::{Dataset, DesignSpace, MixedPoint};

pub const STREAM_DESIGN: u64 = 0;
pub const STREAM_FIT: u64 = 1;
pub const STREAM_ACQUISITION: u64 = 2;
pub const STREAM_SUBSAMPLE: u64 = 3;

/// Above this many observations only the warm start is refined.
pub const WARM_ONLY_ABOVE: usize = 100;

/// A black-box function to minimize.
pub trait Objective {
    fn evaluate(&mut self, point: &MixedPoint) -> Result<f64>;

    fn is_noisy(&self) -> bool {
        false
    }

    /// Maximum number of evaluations, if limited.
    fn budget(&self) -> Option<usize> {
        None
    }
}

impl<O: Objective + ?Sized> Objective for Box<O> {
    fn evaluate(&mut self, point: &MixedPoint) -> Result<f64> {
        (**self).evaluate(point)
    }

    fn is_noisy(&self) -> bool {
        (**self).is_noisy()
    }

    fn budget(&self) -> Option<usize> {
        (**self).budget()
    }
}

/// Adapts a closure into an [`Objective`].
pub struct FnObjective<F> {
    f: F,
    noisy: bool,
}

impl<F: FnMut(&MixedPoint) -> f64> FnObjective<F> {
    pub fn new(f: F) -> Self {
        Self { f, noisy: false }
    }

    pub fn noisy(mut self, noisy: bool) -> Self {
        self.noisy = noisy;
        self
    }
}

impl<F: FnMut(&MixedPoint) -> f64> Objective for FnObjective<F> {
    fn evaluate(&mut self, point: &MixedPoint) -> Result<f64> {
        Ok((self.f)(point))
    }

    fn is_noisy(&self) -> bool {
        self.noisy
    }
}

/// Derives the `stream`-th generator of a root seed.
pub fn seed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub n0: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub acquisition: AcquisitionConfig,
    /// Replaces the generated initial design when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_points: Option<Vec<MixedPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evaluations: Option<usize>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            n0: 10,
            max_iterations: 30,
            seed: 0,
            fit: FitConfig::default(),
            acquisition: AcquisitionConfig::default(),
            initial_points: None,
            max_evaluations: None,
        }
    }
}

/// Condensed fit diagnostics stored with each proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub neg_loglik: f64,
    pub starts: usize,
    pub converged: bool,
    pub jitter: f64,
    pub sigma2_clamped: bool,
    pub flat: bool,
}

impl FitSummary {
    fn of(model: &FittedModel) -> Self {
        let d = model.diagnostics();
        Self {
            n: model.n(),
            neg_loglik: d.neg_loglik,
            starts: d.starts.len(),
            converged: d.converged,
            jitter: d.jitter,
            sigma2_clamped: d.sigma2_clamped,
            flat: d.flat,
        }
    }
}

/// One evaluated point. `iteration` is 0 for the initial design and counts
/// optimization steps from 1 afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub index: usize,
    pub iteration: usize,
    pub x: Vec<f64>,
    pub t: Vec<usize>,
    /// `None` when the evaluation failed or was not finite.
    pub response: Option<f64>,
    /// Best successful response so far.
    pub incumbent: Option<f64>,
    pub ei: Option<f64>,
    pub fit: Option<FitSummary>,
}

impl HistoryRecord {
    pub fn point(&self) -> MixedPoint {
        MixedPoint::new(self.x.clone(), self.t.clone())
    }

    pub fn failed(&self) -> bool {
        self.response.is_none()
    }
}

pub fn write_history<W: Write>(records: &[HistoryRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history<R: BufRead>(input: R) -> Result<Vec<HistoryRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidDataset(format!("history line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Pending {
    point: MixedPoint,
    ei: f64,
    fit: FitSummary,
}

#[derive(Debug, Clone)]
pub struct Campaign {
    space: DesignSpace,
    config: CampaignConfig,
    initial: Vec<MixedPoint>,
    initial_told: Vec<bool>,
    pending: Option<Pending>,
    data: Dataset,
    history: Vec<HistoryRecord>,
    failed: Vec<MixedPoint>,
    iterations: usize,
    fit_rng: ChaCha8Rng,
    acq_rng: ChaCha8Rng,
    sub_rng: ChaCha8Rng,
    model: Option<FittedModel>,
}

impl Campaign {
    pub fn new(space: DesignSpace, config: CampaignConfig) -> Result<Self> {
        let initial = match &config.initial_points {
            Some(pts) => {
                if pts.is_empty() {
                    return Err(Error::InvalidConfig("initial design is empty".into()));
                }
                for p in pts {
                    space.validate_point(p)?;
                }
                pts.clone()
            }
            None => {
                if config.n0 == 0 {
                    return Err(Error::InvalidConfig("n0 must be at least 1".into()));
                }
                initial_design(&space, config.n0, &mut seed_stream(config.seed, STREAM_DESIGN))
            }
        };
        if let Some(cands) = &config.acquisition.candidates {
            for c in cands {
                space.validate_point(c)?;
            }
        }
        Ok(Self {
            initial_told: vec![false; initial.len()],
            initial,
            pending: None,
            data: Dataset::default(),
            history: Vec::new(),
            failed: Vec::new(),
            iterations: 0,
            fit_rng: seed_stream(config.seed, STREAM_FIT),
            acq_rng: seed_stream(config.seed, STREAM_ACQUISITION),
            sub_rng: seed_stream(config.seed, STREAM_SUBSAMPLE),
            model: None,
            space,
            config,
        })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn initial_design(&self) -> &[MixedPoint] {
        &self.initial
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    /// Successful evaluations only.
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Completed optimization iterations (initial design excluded).
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn incumbent(&self) -> Option<f64> {
        self.data.min_response()
    }

    /// Best successful point and its response; the earliest wins ties.
    pub fn best(&self) -> Option<(MixedPoint, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &y) in self.data.responses.iter().enumerate() {
            if best.is_none_or(|(_, b)| y < b) {
                best = Some((i, y));
            }
        }
        best.map(|(i, y)| (self.data.points[i].clone(), y))
    }

    /// Model used for the most recent proposal.
    pub fn last_model(&self) -> Option<&FittedModel> {
        self.model.as_ref()
    }

    fn evaluations(&self) -> usize {
        self.history.len()
    }

    fn budget_left(&self) -> bool {
        self.config.max_evaluations.is_none_or(|b| self.evaluations() < b)
    }

    fn fit_config(&self, warm: bool) -> FitConfig {
        FitConfig {
            warm_only: warm && self.data.len() > WARM_ONLY_ABOVE,
            ..self.config.fit.clone()
        }
    }

    /// Fits the model to every successful evaluation, warm-started from the
    /// previous fit when there is one.
    pub fn fit_current(&mut self) -> Result<FittedModel> {
        if self.data.is_empty() {
            return Err(Error::InvalidDataset("no successful evaluations to fit".into()));
        }
        let warm = self.model.as_ref().map(|m| m.theta().to_vec());
        let cfg = self.fit_config(warm.is_some());
        fit_warm(&self.space, &self.data, &cfg, &mut self.fit_rng, warm.as_deref())
    }

    /// Next point to evaluate. Repeated calls without a `tell` return the
    /// same point.
    pub fn ask(&mut self) -> Result<MixedPoint> {
        if let Some(i) = self.initial_told.iter().position(|told| !told) {
            if !self.budget_left() {
                return Err(Error::BudgetExhausted);
            }
            return Ok(self.initial[i].clone());
        }
        if let Some(p) = &self.pending {
            return Ok(p.point.clone());
        }
        if self.iterations >= self.config.max_iterations || !self.budget_left() {
            return Err(Error::BudgetExhausted);
        }

        let mut acq = self.config.acquisition.clone();
        if let Some(cands) = acq.candidates.as_mut() {
            if !self.failed.is_empty() {
                cands.retain(|c| !self.failed.contains(c));
            }
            if acq.exclude_sampled && cands.iter().all(|c| self.data.points.contains(c)) {
                return Err(Error::ExhaustedSpace);
            }
        }

        let model = self.fit_current()?;
        let proposal = propose_next_with(&model, &acq, &mut self.acq_rng, &mut self.sub_rng)?;
        debug!(
            "iteration {}: n = {}, ei = {:.3e}, proposal = {:?}",
            self.iterations + 1,
            model.n(),
            proposal.ei,
            proposal.point
        );
        self.pending = Some(Pending {
            point: proposal.point.clone(),
            ei: proposal.ei,
            fit: FitSummary::of(&model),
        });
        self.model = Some(model);
        Ok(proposal.point)
    }

    /// Records the response at `point`, which must be the outstanding
    /// proposal or a not yet told initial point. Non-finite responses are
    /// recorded as failures and kept out of the dataset.
    pub fn tell(&mut self, point: &MixedPoint, response: f64) -> Result<()> {
        let (iteration, ei, fit) = if let Some(i) = self
            .initial
            .iter()
            .zip(&self.initial_told)
            .position(|(p, told)| !told && p == point)
        {
            self.initial_told[i] = true;
            (0, None, None)
        } else if self.pending.as_ref().is_some_and(|p| &p.point == point) {
            let p = self.pending.take().expect("checked above");
            self.iterations += 1;
            (self.iterations, Some(p.ei), Some(p.fit))
        } else {
            return Err(Error::UnexpectedPoint);
        };

        let response = if response.is_finite() {
            self.data.push(point.clone(), response);
            Some(response)
        } else {
            warn!("evaluation at {point:?} failed ({response}); excluded from the model");
            self.failed.push(point.clone());
            None
        };
        self.history.push(HistoryRecord {
            index: self.history.len(),
            iteration,
            x: point.x.clone(),
            t: point.t.clone(),
            response,
            incumbent: self.data.min_response(),
            ei,
            fit,
        });
        Ok(())
    }
}

/// Drives ask/tell until the iteration or evaluation budget runs out or the
/// candidate set is exhausted. Objective errors count as failed evaluations.
pub fn run<O: Objective + ?Sized>(
    objective: &mut O,
    space: DesignSpace,
    config: CampaignConfig,
) -> Result<Campaign> {
    let mut config = config;
    if let Some(b) = objective.budget() {
        config.max_evaluations = Some(config.max_evaluations.map_or(b, |m| m.min(b)));
    }
    if objective.is_noisy() {
        config.fit.noisy = true;
    }
    let mut campaign = Campaign::new(space, config)?;
    loop {
        let point = match campaign.ask() {
            Ok(p) => p,
            Err(Error::BudgetExhausted | Error::ExhaustedSpace) => break,
            Err(e) => return Err(e),
        };
        let y = match objective.evaluate(&point) {
            Ok(y) => y,
            Err(e) => {
                warn!("objective failed at {point:?}: {e}");
                f64::NAN
            }
        };
        campaign.tell(&point, y)?;
    }
    Ok(campaign)
}

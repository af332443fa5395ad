//! Forecast-then-optimize decision logic shared by the direct adaptive policy
//! and the bus services, so both paths make bit-identical decisions.

use serde::{Deserialize, Serialize};

use crate::domain::Demand;
use crate::error::{Error, Result};
use crate::microsim::RoundObservation;
use crate::optimizer::{anneal, OptimizationResult};
use crate::prediction::{forecast_horizon, PredictionModel};
use crate::scenario::{ExogenousTimeline, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLoopConfig {
    /// How often the loop re-forecasts and re-optimizes, seconds.
    pub reevaluation_period_s: f64,
    pub forecast_steps: usize,
    pub intersection_id: String,
    /// Per-subscriber queue bound on the bus.
    pub queue_capacity: usize,
    /// Wall-clock wait for a status confirmation before a round counts as stale.
    pub status_timeout_ms: u64,
}

impl ControlLoopConfig {
    pub fn for_intersection(id: &str) -> Self {
        ControlLoopConfig {
            reevaluation_period_s: crate::domain::DEFAULT_INTERVAL_S,
            forecast_steps: 1,
            intersection_id: id.to_string(),
            queue_capacity: crate::bus::DEFAULT_QUEUE_CAPACITY,
            status_timeout_ms: 5_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reevaluation_period_s > 0.0) {
            return Err(Error::Domain("reevaluation_period_s must be > 0".into()));
        }
        if self.forecast_steps < 1 {
            return Err(Error::Domain("forecast_steps must be >= 1".into()));
        }
        if self.queue_capacity < 1 {
            return Err(Error::Domain("queue_capacity must be >= 1".into()));
        }
        crate::bus::Topic::new(["traffic_signal_decisions", self.intersection_id.as_str()])
            .map_err(|e| Error::Domain(format!("intersection_id: {e}")))?;
        Ok(())
    }
}

/// Lag buffer plus model for one approach.
#[derive(Debug, Clone)]
pub struct FlowTracker {
    model: PredictionModel,
    /// Oldest first, at most `p` entries.
    lags: Vec<f64>,
}

impl FlowTracker {
    pub fn new(model: PredictionModel, history: &[f64]) -> Self {
        let mut t = FlowTracker { lags: Vec::new(), model };
        for &v in history {
            t.observe(v);
        }
        t
    }

    pub fn observe(&mut self, flow: f64) {
        self.lags.push(flow);
        let p = self.model.p();
        if self.lags.len() > p {
            self.lags.drain(..self.lags.len() - p);
        }
    }

    /// Forecasts `steps` intervals starting at interval `target_t`.
    pub fn forecast(&self, exog: &ExogenousTimeline, target_t: i64, steps: usize) -> Result<Vec<f64>> {
        let p = self.model.p();
        let oldest = self.lags.first().copied().unwrap_or(0.0);
        let mut recent: Vec<f64> = self.lags.iter().rev().copied().collect();
        recent.resize(p, oldest);
        forecast_horizon(&self.model, &recent, &exog.window(target_t, steps), steps)
    }
}

/// Flow vector handed to the optimizer: the mean of each approach's horizon.
pub fn planning_flows(forecasts: &[Vec<f64>]) -> Vec<f64> {
    forecasts
        .iter()
        .map(|f| f.iter().sum::<f64>() / f.len().max(1) as f64)
        .collect()
}

/// Annealing seed for one round of one run.
pub fn round_seed(schedule_seed: u64, run_seed: u64, round: u64) -> u64 {
    let mut z = schedule_seed
        ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ round.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Optimizes the green split for one round, starting from the uniform split.
pub fn decide(cfg: &ScenarioConfig, flows: &[f64], run_seed: u64, round: u64) -> Result<OptimizationResult> {
    let spec = &cfg.intersection;
    let schedule = cfg
        .anneal
        .clone()
        .with_seed(round_seed(cfg.anneal.seed, run_seed, round));
    anneal(
        &spec.uniform_plan(),
        &Demand::new(flows.to_vec(), cfg.interval_s),
        spec,
        &schedule,
    )
}

/// Round number of a reevaluation boundary at scenario time `clock_s`.
pub fn round_of(cfg: &ScenarioConfig, clock_s: f64) -> u64 {
    (clock_s / cfg.loop_config.reevaluation_period_s).round() as u64
}

/// Trackers seeded from the configured history, minus its newest entry which
/// is reported as the first round's observation.
pub fn seeded_trackers(cfg: &ScenarioConfig) -> Vec<FlowTracker> {
    cfg.prediction
        .models
        .iter()
        .zip(&cfg.prediction.initial_history)
        .map(|(m, h)| FlowTracker::new(m.clone(), &h[..h.len().saturating_sub(1)]))
        .collect()
}

/// Newest configured observation per approach.
pub fn seed_observation(cfg: &ScenarioConfig) -> Vec<f64> {
    cfg.prediction
        .initial_history
        .iter()
        .map(|h| h.last().copied().unwrap_or(0.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub round: u64,
    pub clock_s: f64,
    /// First forecast interval.
    pub target_t: i64,
    pub forecasts: Vec<Vec<f64>>,
    pub result: OptimizationResult,
}

/// Direct (no bus) adaptive policy.
#[derive(Debug, Clone)]
pub struct AdaptiveController<'a> {
    cfg: &'a ScenarioConfig,
    trackers: Vec<FlowTracker>,
    run_seed: u64,
    pub decisions: Vec<Decision>,
}

impl<'a> AdaptiveController<'a> {
    pub fn new(cfg: &'a ScenarioConfig, run_seed: u64) -> Self {
        AdaptiveController {
            cfg,
            trackers: seeded_trackers(cfg),
            run_seed,
            decisions: Vec::new(),
        }
    }

    pub fn on_round(&mut self, obs: &RoundObservation) -> Result<&Decision> {
        let observed = obs
            .observed_flows
            .clone()
            .unwrap_or_else(|| seed_observation(self.cfg));
        let target_t = self.cfg.interval_index(obs.clock_s);
        let steps = self.cfg.loop_config.forecast_steps;
        let mut forecasts = Vec::with_capacity(self.trackers.len());
        for (tr, &flow) in self.trackers.iter_mut().zip(&observed) {
            tr.observe(flow);
            forecasts.push(tr.forecast(&self.cfg.exog, target_t, steps)?);
        }
        let round = round_of(self.cfg, obs.clock_s);
        let result = decide(self.cfg, &planning_flows(&forecasts), self.run_seed, round)?;
        self.decisions.push(Decision {
            round,
            clock_s: obs.clock_s,
            target_t,
            forecasts,
            result,
        });
        Ok(self.decisions.last().expect("just pushed"))
    }
}

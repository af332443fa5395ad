//! Scenario files (TOML) and their validated in-memory form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::ControlLoopConfig;
use crate::domain::{ApproachSpec, ExogenousRecord, IntersectionSpec, DEFAULT_INTERVAL_S};
use crate::error::{Error, Result};
use crate::history::read_history_csv;
use crate::microsim::{ArrivalProfile, DEFAULT_IDLE_EMISSION_RATE};
use crate::optimizer::AnnealSchedule;
use crate::prediction::{fit, PredictionModel};

/// Exogenous values over time. A record holds until the next one.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExogenousTimeline {
    pub names: Vec<String>,
    pub records: Vec<ExogenousRecord>,
}

impl ExogenousTimeline {
    pub fn q(&self) -> usize {
        self.names.len()
    }

    pub fn value_at(&self, t: i64) -> Vec<f64> {
        let idx = self.records.partition_point(|r| r.t <= t);
        match idx {
            0 => self
                .records
                .first()
                .map(|r| r.values.clone())
                .unwrap_or_else(|| vec![0.0; self.q()]),
            k => self.records[k - 1].values.clone(),
        }
    }

    /// `steps` consecutive exogenous vectors starting at interval `t`.
    pub fn window(&self, t: i64, steps: usize) -> Vec<Vec<f64>> {
        (0..steps as i64).map(|k| self.value_at(t + k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSetup {
    pub p: usize,
    pub q: usize,
    pub ridge: f64,
    /// One model per approach, in approach order.
    pub models: Vec<PredictionModel>,
    /// Per approach, oldest first. The last entry is the observation available
    /// when the scenario starts.
    pub initial_history: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub intersection: IntersectionSpec,
    pub arrival_profile: ArrivalProfile,
    pub exog: ExogenousTimeline,
    pub prediction: PredictionSetup,
    pub anneal: AnnealSchedule,
    pub loop_config: ControlLoopConfig,
    pub duration_s: f64,
    pub seed: u64,
    pub interval_s: f64,
    pub dt_s: f64,
    pub idle_emission_rate_g_per_veh_s: f64,
    /// Wall-clock label of t = 0 in minutes after midnight, for reports only.
    pub start_clock_min: Option<u32>,
}

impl ScenarioConfig {
    /// Interval index containing scenario time `clock_s`.
    pub fn interval_index(&self, clock_s: f64) -> i64 {
        (clock_s / self.interval_s + 1e-9).floor() as i64
    }

    /// `HH:MM` label for interval `t`, when the scenario has a start clock.
    pub fn clock_label(&self, t: i64) -> Option<String> {
        let start = self.start_clock_min? as i64;
        let m = start + t * (self.interval_s as i64) / 60;
        Some(format!("{:02}:{:02}", m.div_euclid(60) % 24, m.rem_euclid(60)))
    }
}

// ---- file format ----

fn default_interval() -> f64 {
    DEFAULT_INTERVAL_S
}
fn default_dt() -> f64 {
    1.0
}
fn default_lanes() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
    #[serde(default)]
    start_clock: Option<String>,
    duration_s: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_interval")]
    interval_s: f64,
    #[serde(default = "default_dt")]
    dt_s: f64,
    intersection: RawIntersection,
    arrivals: ArrivalProfile,
    #[serde(default)]
    exogenous: ExogenousTimeline,
    prediction: RawPrediction,
    #[serde(default)]
    anneal: Option<AnnealSchedule>,
    #[serde(default, rename = "loop")]
    loop_config: Option<RawLoop>,
    #[serde(default)]
    emissions: Option<RawEmissions>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntersection {
    id: String,
    cycle_length_s: f64,
    lost_time_s: f64,
    approaches: Vec<RawApproach>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApproach {
    id: String,
    saturation_flow: f64,
    #[serde(default = "default_lanes")]
    lanes: u32,
    green_min_s: f64,
    green_max_s: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    p: usize,
    q: usize,
    #[serde(default)]
    ridge: f64,
    #[serde(default)]
    initial_history: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    history_file: Option<PathBuf>,
    #[serde(default, rename = "model")]
    models: Vec<RawModel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    approach_id: String,
    alpha: f64,
    beta: Vec<f64>,
    #[serde(default)]
    gamma: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoop {
    reevaluation_period_s: Option<f64>,
    forecast_steps: Option<usize>,
    intersection_id: Option<String>,
    queue_capacity: Option<usize>,
    status_timeout_ms: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEmissions {
    idle_rate_g_per_veh_s: f64,
}

/// A loaded scenario plus any defaulting notices worth telling the user about.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ScenarioConfig,
    pub notices: Vec<String>,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    parse_config(&text, path.parent())
}

/// Parses scenario TOML. Relative `history_file` paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<Loaded> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let path = e
            .span()
            .map(|s| {
                let line = text[..s.start].matches('\n').count() + 1;
                format!("line {line}")
            })
            .unwrap_or_else(|| "<document>".into());
        Error::config(path, msg)
    })?;
    build(raw, base_dir)
}

fn build(raw: RawScenario, base_dir: Option<&Path>) -> Result<Loaded> {
    let mut notices = Vec::new();
    let ri = raw.intersection;
    for (i, a) in ri.approaches.iter().enumerate() {
        if a.green_min_s > a.green_max_s {
            return Err(Error::config(
                format!("intersection.approaches[{i}].green_min_s"),
                format!(
                    "approach `{}`: green_min_s {} exceeds green_max_s {}",
                    a.id, a.green_min_s, a.green_max_s
                ),
            ));
        }
    }
    let spec = IntersectionSpec::new(
        ri.id,
        ri.approaches
            .iter()
            .map(|a| ApproachSpec {
                id: a.id.clone(),
                saturation_flow: a.saturation_flow,
                lanes: a.lanes,
            })
            .collect(),
        ri.cycle_length_s,
        ri.lost_time_s,
        ri.approaches.iter().map(|a| a.green_min_s).collect(),
        ri.approaches.iter().map(|a| a.green_max_s).collect(),
    )
    .map_err(|e| Error::config("intersection", e.to_string()))?;
    let n = spec.n();

    if !(raw.duration_s > 0.0 && raw.duration_s.is_finite()) {
        return Err(Error::config("duration_s", "must be > 0"));
    }
    if !(raw.interval_s > 0.0) {
        return Err(Error::config("interval_s", "must be > 0"));
    }
    if !(raw.dt_s > 0.0) {
        return Err(Error::config("dt_s", "must be > 0"));
    }
    raw.arrivals
        .validate(n)
        .map_err(|e| Error::config("arrivals", e.to_string()))?;

    let exog = raw.exogenous;
    for (k, r) in exog.records.iter().enumerate() {
        if r.values.len() != exog.q() {
            return Err(Error::config(
                format!("exogenous.records[{k}].values"),
                format!("expected {} values (one per name), got {}", exog.q(), r.values.len()),
            ));
        }
        if k > 0 && r.t <= exog.records[k - 1].t {
            return Err(Error::config(format!("exogenous.records[{k}].t"), "records must be strictly increasing in t"));
        }
    }

    let rp = raw.prediction;
    if rp.p == 0 {
        return Err(Error::config("prediction.p", "must be >= 1"));
    }
    if rp.q != exog.q() {
        return Err(Error::config(
            "prediction.q",
            format!("q={} but exogenous.names lists {}", rp.q, exog.q()),
        ));
    }
    let models = if let Some(file) = &rp.history_file {
        if !rp.models.is_empty() {
            return Err(Error::config("prediction", "give either history_file or [[prediction.model]], not both"));
        }
        let full = match base_dir {
            Some(b) if file.is_relative() => b.join(file),
            _ => file.clone(),
        };
        let f = std::fs::File::open(&full)
            .map_err(|e| Error::config("prediction.history_file", format!("{}: {e}", full.display())))?;
        let hist = read_history_csv(f, Some(rp.q))?;
        let mut models = Vec::with_capacity(n);
        for a in &spec.approaches {
            let series = hist
                .series
                .iter()
                .find(|(id, _)| *id == a.id)
                .ok_or_else(|| Error::config("prediction.history_file", format!("no rows for approach `{}`", a.id)))?;
            let (mut m, _) = fit(&series.1, &hist.exog, rp.p, rp.q, rp.ridge)
                .map_err(|e| Error::config("prediction.history_file", format!("approach `{}`: {e}", a.id)))?;
            m.exog_names = exog.names.clone();
            models.push(m);
        }
        notices.push(format!("fitted {} prediction models from {}", n, full.display()));
        models
    } else {
        let mut models = Vec::with_capacity(n);
        for a in &spec.approaches {
            let (k, m) = rp
                .models
                .iter()
                .enumerate()
                .find(|(_, m)| m.approach_id == a.id)
                .ok_or_else(|| Error::config("prediction.model", format!("missing model for approach `{}`", a.id)))?;
            let path = format!("prediction.model[{k}]");
            if m.beta.len() != rp.p {
                return Err(Error::config(format!("{path}.beta"), format!("expected p={} coefficients", rp.p)));
            }
            if m.gamma.len() != rp.q {
                return Err(Error::config(format!("{path}.gamma"), format!("expected q={} coefficients", rp.q)));
            }
            let mut model = PredictionModel::new(m.approach_id.clone(), m.alpha, m.beta.clone(), m.gamma.clone())
                .map_err(|e| Error::config(path, e.to_string()))?;
            model.exog_names = exog.names.clone();
            models.push(model);
        }
        models
    };

    let initial_history = match rp.initial_history {
        Some(h) => {
            if h.len() != n {
                return Err(Error::config(
                    "prediction.initial_history",
                    format!("expected {n} per-approach lists, got {}", h.len()),
                ));
            }
            for (i, s) in h.iter().enumerate() {
                if s.len() < rp.p {
                    return Err(Error::config(
                        format!("prediction.initial_history[{i}]"),
                        format!("need at least p={} values", rp.p),
                    ));
                }
                if s.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::config(format!("prediction.initial_history[{i}]"), "flows must be >= 0"));
                }
            }
            h
        }
        None => {
            notices.push("prediction.initial_history not given; seeded from the first arrival segment".into());
            raw.arrivals.segments[0]
                .rates
                .iter()
                .map(|&r| vec![r; rp.p])
                .collect()
        }
    };

    let anneal = match raw.anneal {
        Some(a) => a,
        None => {
            notices.push("no [anneal] section; using default schedule".into());
            AnnealSchedule::default()
        }
    };
    anneal.validate().map_err(|e| Error::config("anneal", e.to_string()))?;

    let rl = raw.loop_config.unwrap_or(RawLoop {
        reevaluation_period_s: None,
        forecast_steps: None,
        intersection_id: None,
        queue_capacity: None,
        status_timeout_ms: None,
    });
    let defaults = ControlLoopConfig::for_intersection(&spec.id);
    let loop_config = ControlLoopConfig {
        reevaluation_period_s: rl.reevaluation_period_s.unwrap_or(raw.interval_s),
        forecast_steps: rl.forecast_steps.unwrap_or(defaults.forecast_steps),
        intersection_id: rl.intersection_id.unwrap_or(defaults.intersection_id),
        queue_capacity: rl.queue_capacity.unwrap_or(defaults.queue_capacity),
        status_timeout_ms: rl.status_timeout_ms.unwrap_or(defaults.status_timeout_ms),
    };
    loop_config.validate().map_err(|e| Error::config("loop", e.to_string()))?;

    let rate = raw
        .emissions
        .map(|e| e.idle_rate_g_per_veh_s)
        .unwrap_or(DEFAULT_IDLE_EMISSION_RATE);
    if !(rate > 0.0) {
        return Err(Error::config("emissions.idle_rate_g_per_veh_s", "must be > 0"));
    }

    let start_clock_min = raw
        .start_clock
        .as_deref()
        .map(|s| {
            let (h, m) = s
                .split_once(':')
                .ok_or_else(|| Error::config("start_clock", "expected HH:MM"))?;
            let h: u32 = h.parse().map_err(|_| Error::config("start_clock", "expected HH:MM"))?;
            let m: u32 = m.parse().map_err(|_| Error::config("start_clock", "expected HH:MM"))?;
            if h > 23 || m > 59 {
                return Err(Error::config("start_clock", "expected HH:MM"));
            }
            Ok(h * 60 + m)
        })
        .transpose()?;

    let cfg = ScenarioConfig {
        name: raw.name,
        intersection: spec,
        arrival_profile: raw.arrivals,
        exog,
        prediction: PredictionSetup {
            p: rp.p,
            q: rp.q,
            ridge: rp.ridge,
            models,
            initial_history,
        },
        anneal,
        loop_config,
        duration_s: raw.duration_s,
        seed: raw.seed,
        interval_s: raw.interval_s,
        dt_s: raw.dt_s,
        idle_emission_rate_g_per_veh_s: rate,
        start_clock_min,
    };
    for (what, span) in [
        ("intersection.cycle_length_s", cfg.intersection.cycle_length_s),
        ("interval_s", cfg.interval_s),
        ("loop.reevaluation_period_s", cfg.loop_config.reevaluation_period_s),
    ] {
        let k = span / cfg.dt_s;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::config(what, format!("must be a multiple of dt_s ({})", cfg.dt_s)));
        }
    }
    Ok(Loaded { config: cfg, notices })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "mini"
duration_s = 600

[intersection]
id = "i1"
cycle_length_s = 60
lost_time_s = 4
[[intersection.approaches]]
id = "a1"
saturation_flow = 0.5
green_min_s = 7
green_max_s = 49
[[intersection.approaches]]
id = "a2"
saturation_flow = 0.5
green_min_s = 7
green_max_s = 49

[arrivals]
[[arrivals.segments]]
start_t = 0
rates = [40, 40]

[prediction]
p = 1
q = 0
[[prediction.model]]
approach_id = "a1"
alpha = 10
beta = [0.75]
[[prediction.model]]
approach_id = "a2"
alpha = 10
beta = [0.75]
"#;

    #[test]
    fn defaults_are_applied_with_notices() {
        let l = parse_config(MINIMAL, None).unwrap();
        assert_eq!(l.config.anneal, AnnealSchedule::default());
        assert!(l.notices.iter().any(|n| n.contains("anneal")));
        assert_eq!(l.config.prediction.initial_history, vec![vec![40.0], vec![40.0]]);
        assert_eq!(l.config.loop_config.reevaluation_period_s, 300.0);
        assert_eq!(l.config.interval_s, 300.0);
    }

    #[test]
    fn green_bounds_rejected_by_name() {
        let text = MINIMAL.replacen("green_min_s = 7", "green_min_s = 60", 1);
        let e = parse_config(&text, None).unwrap_err();
        let s = e.to_string();
        assert!(s.contains("intersection.approaches[0].green_min_s") && s.contains("a1"), "{s}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("duration_s = 600", "duration_s = 600\nbogus = 1");
        assert!(parse_config(&text, None).is_err());
    }

    #[test]
    fn model_dimension_checked() {
        let text = MINIMAL.replacen("beta = [0.75]", "beta = [0.75, 0.1]", 1);
        let e = parse_config(&text, None).unwrap_err().to_string();
        assert!(e.contains("prediction.model[0].beta"), "{e}");
    }

    #[test]
    fn timeline_carries_forward() {
        let tl = ExogenousTimeline {
            names: vec!["x".into()],
            records: vec![
                ExogenousRecord { t: 0, values: vec![1.0] },
                ExogenousRecord { t: 2, values: vec![5.0] },
            ],
        };
        assert_eq!(tl.value_at(-1), vec![1.0]);
        assert_eq!(tl.value_at(1), vec![1.0]);
        assert_eq!(tl.window(1, 3), vec![vec![1.0], vec![5.0], vec![5.0]]);
    }
}

//! Service adapters that close the forecast → optimize → control loop over the bus.
//!
//! Each adapter runs on its own thread and talks to the others only through
//! bus messages. The plant (arrival feed plus microsimulator) runs on the
//! calling thread: at every reevaluation boundary it publishes the counted
//! flows, then waits for the controller's status for that round and applies
//! a confirmed plan at the next cycle start.

use std::collections::BTreeMap;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    Bus, BusStats, Payload, PredictedFlowsPayload, Publisher, Recv, SignalDecisionPayload,
    SignalStatusPayload, Subscription, TrafficFlowPayload, PREDICTED_FLOWS, SIGNAL_DECISIONS,
    SIGNAL_STATUS, TRAFFIC_FLOWS,
};
use crate::controller::{decide, planning_flows, round_of, seed_observation, seeded_trackers};
use crate::domain::{validate_plan, SignalPlan};
use crate::error::Result;
use crate::microsim::{run_scenario, Policy, RoundObservation, SimRun};
use crate::scenario::ScenarioConfig;

/// Deliberate faults for exercising the loop's error paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopFaults {
    /// `(round, approach index)` flow reports the plant never publishes.
    pub withhold_flows: Vec<(u64, usize)>,
    /// Rounds whose decision the optimizer corrupts (first green +5 s, breaking the budget).
    pub corrupt_decisions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LoopStats {
    pub rounds: u64,
    pub decisions: u64,
    pub applied: u64,
    pub rejected: u64,
    /// Rounds that ended without a status confirmation; the previous plan stayed.
    pub stale_rounds: u64,
    pub warnings: Vec<String>,
    pub bus: BusStats,
    pub dropped_by_subscriber: BTreeMap<String, u64>,
}

/// One message as seen by the metrics subscriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedMessage {
    pub bus_seq: u64,
    pub topic: String,
    pub publisher_id: String,
    pub seq: u64,
    pub ts: f64,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub run: SimRun,
    pub stats: LoopStats,
    /// Everything on the four loop topics, in bus order.
    pub observed: Vec<ObservedMessage>,
}

impl LoopOutcome {
    pub fn observed_on(&self, root: &str) -> impl Iterator<Item = &ObservedMessage> {
        let prefix = format!("{root}/");
        self.observed.iter().filter(move |m| m.topic.starts_with(&prefix))
    }
}

#[derive(Debug, Default)]
struct ServiceReport {
    name: &'static str,
    warnings: Vec<String>,
    published: u64,
    applied: u64,
    rejected: u64,
    dropped: u64,
}

/// Runs the scenario as a closed loop over `bus`. Shuts the bus down when the feed ends.
pub fn run_control_loop(bus: &Bus, cfg: &ScenarioConfig, run_seed: u64) -> Result<LoopOutcome> {
    run_control_loop_with(bus, cfg, run_seed, &LoopFaults::default())
}

pub fn run_control_loop_with(
    bus: &Bus,
    cfg: &ScenarioConfig,
    run_seed: u64,
    faults: &LoopFaults,
) -> Result<LoopOutcome> {
    cfg.loop_config.validate()?;
    let iid = cfg.loop_config.intersection_id.clone();

    // every subscription exists before the first publication
    let flows_in = bus.subscribe(&format!("{TRAFFIC_FLOWS}/*"))?;
    let forecasts_in = bus.subscribe(&format!("{PREDICTED_FLOWS}/*"))?;
    let decisions_in = bus.subscribe(&format!("{SIGNAL_DECISIONS}/{iid}"))?;
    let status_in = bus.subscribe(&format!("{SIGNAL_STATUS}/{iid}"))?;
    let recorder_in = bus.subscribe_any(&[
        &format!("{TRAFFIC_FLOWS}/*"),
        &format!("{PREDICTED_FLOWS}/*"),
        &format!("{SIGNAL_DECISIONS}/*"),
        &format!("{SIGNAL_STATUS}/*"),
    ])?;

    thread::scope(|s| {
        let prediction = s.spawn(|| prediction_service(bus.publisher("prediction"), flows_in, cfg));
        let optimizer = s.spawn(|| {
            optimization_service(bus.publisher("optimizer"), forecasts_in, cfg, run_seed, faults)
        });
        let controller = s.spawn(|| signal_controller(bus.publisher("controller"), decisions_in, cfg));
        let recorder = s.spawn(|| metrics_recorder(recorder_in));

        let plant = run_plant(bus, status_in, cfg, run_seed, faults);
        bus.shutdown();

        let mut reports = Vec::new();
        for h in [prediction, optimizer, controller] {
            reports.push(h.join().expect("service thread panicked"));
        }
        let (observed, recorder_dropped) = recorder.join().expect("recorder thread panicked");
        let (run, plant_report, rounds) = plant?;

        let mut stats = LoopStats {
            rounds,
            bus: bus.stats(),
            ..LoopStats::default()
        };
        stats.stale_rounds = plant_report.published;
        stats.warnings.extend(plant_report.warnings);
        stats.dropped_by_subscriber.insert("plant".into(), plant_report.dropped);
        stats.dropped_by_subscriber.insert("recorder".into(), recorder_dropped);
        for r in reports {
            stats.warnings.extend(r.warnings);
            stats.dropped_by_subscriber.insert(r.name.into(), r.dropped);
            match r.name {
                "optimizer" => stats.decisions = r.published,
                "controller" => {
                    stats.applied = r.applied;
                    stats.rejected = r.rejected;
                }
                _ => {}
            }
        }
        Ok(LoopOutcome { run, stats, observed })
    })
}

/// Returns the run, a report whose `published` counts stale rounds, and the round count.
fn run_plant(
    bus: &Bus,
    status_in: Subscription,
    cfg: &ScenarioConfig,
    run_seed: u64,
    faults: &LoopFaults,
) -> Result<(SimRun, ServiceReport, u64)> {
    let sensors = bus.publisher("sensors");
    let timeout = Duration::from_millis(cfg.loop_config.status_timeout_ms);
    let mut report = ServiceReport { name: "plant", ..Default::default() };
    let mut rounds = 0u64;
    let mut failure = None;

    let mut on_round = |obs: &RoundObservation| -> Option<SignalPlan> {
        rounds += 1;
        let round = round_of(cfg, obs.clock_s);
        let flows = obs.observed_flows.clone().unwrap_or_else(|| seed_observation(cfg));
        let t = cfg.interval_index(obs.clock_s) - 1;
        for (i, (a, flow)) in cfg.intersection.approaches.iter().zip(flows).enumerate() {
            if faults.withhold_flows.contains(&(round, i)) {
                continue;
            }
            let payload = Payload::TrafficFlow(TrafficFlowPayload {
                t,
                flow_veh_per_interval: flow,
                approach_id: a.id.clone(),
            });
            if let Err(e) = sensors.publish(&format!("{TRAFFIC_FLOWS}/{}", a.id), payload, obs.clock_s) {
                failure.get_or_insert(e);
                return None;
            }
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match status_in.recv_timeout(left) {
                Recv::Message(m) if m.ts == obs.clock_s => {
                    if let Payload::SignalStatus(st) = &*m.payload {
                        return st.applied.then(|| SignalPlan::new(st.greens_s.clone(), &cfg.intersection));
                    }
                }
                // late confirmation of an earlier round
                Recv::Message(_) => {}
                Recv::Timeout | Recv::Closed => {
                    report.published += 1;
                    report.warnings.push(format!(
                        "round {round}: no status within {} ms; keeping previous plan",
                        timeout.as_millis()
                    ));
                    return None;
                }
            }
        }
    };

    let run = run_scenario(cfg, Policy::Adaptive(&mut on_round), run_seed);
    report.dropped = status_in.dropped();
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((run?, report, rounds))
}

fn prediction_service(out: Publisher, input: Subscription, cfg: &ScenarioConfig) -> ServiceReport {
    let mut report = ServiceReport { name: "prediction", ..Default::default() };
    let mut trackers = seeded_trackers(cfg);
    let steps = cfg.loop_config.forecast_steps;
    while let Some(m) = input.recv() {
        let Payload::TrafficFlow(f) = &*m.payload else { continue };
        let Some(i) = cfg.intersection.approach_index(&f.approach_id) else {
            report.warnings.push(format!("flow for unknown approach `{}`", f.approach_id));
            continue;
        };
        trackers[i].observe(f.flow_veh_per_interval);
        let target_t = cfg.interval_index(m.ts);
        let forecasts = match trackers[i].forecast(&cfg.exog, target_t, steps) {
            Ok(v) => v,
            Err(e) => {
                report.warnings.push(format!("forecast {}: {e}", f.approach_id));
                continue;
            }
        };
        let payload = Payload::PredictedFlows(PredictedFlowsPayload {
            t: target_t,
            horizon_steps: steps,
            forecasts,
            approach_id: f.approach_id.clone(),
        });
        match out.publish(&format!("{PREDICTED_FLOWS}/{}", f.approach_id), payload, m.ts) {
            Ok(_) => report.published += 1,
            Err(e) => report.warnings.push(e.to_string()),
        }
    }
    report.dropped = input.dropped();
    report
}

fn optimization_service(
    out: Publisher,
    input: Subscription,
    cfg: &ScenarioConfig,
    run_seed: u64,
    faults: &LoopFaults,
) -> ServiceReport {
    let mut report = ServiceReport { name: "optimizer", ..Default::default() };
    let n = cfg.intersection.n();
    let cycle = cfg.intersection.cycle_length_s;
    let topic = format!("{SIGNAL_DECISIONS}/{}", cfg.loop_config.intersection_id);
    // round -> (clock, per-approach forecasts)
    let mut pending: BTreeMap<u64, (f64, Vec<Option<Vec<f64>>>)> = BTreeMap::new();

    let stale = |round: u64, got: &[Option<Vec<f64>>]| {
        format!(
            "stale forecasts for round {round} ({} of {n} received); round skipped",
            got.iter().filter(|g| g.is_some()).count()
        )
    };

    while let Some(m) = input.recv() {
        let Payload::PredictedFlows(f) = &*m.payload else { continue };
        let Some(i) = cfg.intersection.approach_index(&f.approach_id) else { continue };
        let round = round_of(cfg, m.ts);

        // anything two or more periods behind the newest round will never complete
        let expired: Vec<u64> = pending.range(..round.saturating_sub(1)).map(|(r, _)| *r).collect();
        for r in expired {
            let (_, got) = pending.remove(&r).expect("listed");
            report.warnings.push(stale(r, &got));
        }

        let entry = pending.entry(round).or_insert_with(|| (m.ts, vec![None; n]));
        entry.1[i] = Some(f.forecasts.clone());
        if entry.1.iter().any(Option::is_none) {
            continue;
        }
        let (clock, got) = pending.remove(&round).expect("present");
        let forecasts: Vec<Vec<f64>> = got.into_iter().map(|g| g.expect("complete")).collect();
        let result = match decide(cfg, &planning_flows(&forecasts), run_seed, round) {
            Ok(r) => r,
            Err(e) => {
                report.warnings.push(format!("round {round}: optimization failed: {e}"));
                continue;
            }
        };
        let mut greens = result.best_plan.greens_s.clone();
        if faults.corrupt_decisions.contains(&round) {
            greens[0] += 5.0;
        }
        let payload = Payload::SignalDecision(SignalDecisionPayload {
            cycle_start_t_s: (clock / cycle).ceil() * cycle,
            greens_s: greens,
            cycle_length_s: cycle,
            cost_estimate_s: result.best_cost,
        });
        match out.publish(&topic, payload, clock) {
            Ok(_) => report.published += 1,
            Err(e) => report.warnings.push(e.to_string()),
        }
    }
    for (r, (_, got)) in pending {
        report.warnings.push(stale(r, &got));
    }
    report.dropped = input.dropped();
    report
}

fn signal_controller(out: Publisher, input: Subscription, cfg: &ScenarioConfig) -> ServiceReport {
    let mut report = ServiceReport { name: "controller", ..Default::default() };
    let spec = &cfg.intersection;
    let topic = format!("{SIGNAL_STATUS}/{}", cfg.loop_config.intersection_id);
    let mut current = spec.uniform_plan();
    while let Some(m) = input.recv() {
        let Payload::SignalDecision(d) = &*m.payload else { continue };
        let candidate = SignalPlan::new(d.greens_s.clone(), spec);
        let problem = if d.greens_s.len() != spec.n() {
            Some(format!("expected {} greens, got {}", spec.n(), d.greens_s.len()))
        } else if d.cycle_length_s != spec.cycle_length_s {
            Some(format!("cycle {} != {}", d.cycle_length_s, spec.cycle_length_s))
        } else {
            match validate_plan(&candidate, spec) {
                Ok(v) if v.is_empty() => None,
                Ok(v) => Some(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")),
                Err(e) => Some(e.to_string()),
            }
        };
        let status = match problem {
            None => {
                report.applied += 1;
                current = candidate;
                SignalStatusPayload {
                    applied: true,
                    greens_s: current.greens_s.clone(),
                    reason: format!("applied from cycle start {} s", d.cycle_start_t_s),
                }
            }
            Some(why) => {
                report.rejected += 1;
                SignalStatusPayload {
                    applied: false,
                    greens_s: current.greens_s.clone(),
                    reason: format!("rejected: {why}"),
                }
            }
        };
        if let Err(e) = out.publish(&topic, Payload::SignalStatus(status), m.ts) {
            report.warnings.push(e.to_string());
        }
    }
    report.dropped = input.dropped();
    report
}

fn metrics_recorder(input: Subscription) -> (Vec<ObservedMessage>, u64) {
    let mut log = Vec::new();
    while let Some(m) = input.recv() {
        log.push(ObservedMessage {
            bus_seq: m.bus_seq,
            topic: m.topic.to_string(),
            publisher_id: m.publisher_id.to_string(),
            seq: m.seq,
            ts: m.ts,
            payload: m.payload.to_json_value(),
        });
    }
    log.sort_by_key(|m| m.bus_seq);
    (log, input.dropped())
}

//! Paired fixed-vs-adaptive experiments over a list of seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bus::{run_control_loop, Bus, LoopStats};
use crate::controller::{AdaptiveController, Decision};
use crate::error::{Error, Result};
use crate::microsim::{run_scenario, write_rows_csv, Policy, RoundObservation, SimMetrics, SimRun};
use crate::par::{map_ordered, Execution};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Fixed,
    Adaptive,
    /// Adaptive policy driven through the bus loop.
    Loop,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Fixed => "fixed",
            Arm::Adaptive => "adaptive",
            Arm::Loop => "loop",
        }
    }
}

/// `k` consecutive seeds starting at `base`.
pub fn seed_list(base: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Fixed uniform split for the whole scenario.
pub fn run_fixed(cfg: &ScenarioConfig, seed: u64) -> Result<SimRun> {
    run_scenario(cfg, Policy::Fixed(cfg.intersection.uniform_plan()), seed)
}

/// Forecast-and-anneal policy called directly, without the bus.
pub fn run_adaptive(cfg: &ScenarioConfig, seed: u64) -> Result<(SimRun, Vec<Decision>)> {
    let mut ctl = AdaptiveController::new(cfg, seed);
    let mut failure = None;
    let mut cb = |obs: &RoundObservation| match ctl.on_round(obs) {
        Ok(d) => Some(d.result.best_plan.clone()),
        Err(e) => {
            failure.get_or_insert(e);
            None
        }
    };
    let run = run_scenario(cfg, Policy::Adaptive(&mut cb), seed)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((run, ctl.decisions))
}

/// Adaptive policy over a fresh bus.
pub fn run_loop(cfg: &ScenarioConfig, seed: u64) -> Result<(SimRun, LoopStats)> {
    let bus = Bus::new(cfg.loop_config.queue_capacity);
    let out = run_control_loop(&bus, cfg, seed)?;
    Ok((out.run, out.stats))
}

fn run_arm(cfg: &ScenarioConfig, arm: Arm, seed: u64) -> Result<(SimRun, Option<LoopStats>)> {
    match arm {
        Arm::Fixed => run_fixed(cfg, seed).map(|r| (r, None)),
        Arm::Adaptive => run_adaptive(cfg, seed).map(|(r, _)| (r, None)),
        Arm::Loop => run_loop(cfg, seed).map(|(r, s)| (r, Some(s))),
    }
}

/// `100·(base − other)/base`, zero when the base is zero.
pub fn reduction_pct(base: f64, other: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (base - other) / base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub run: SimRun,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loop_stats: Option<LoopStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub fixed_mean_wait_s: f64,
    pub adaptive_mean_wait_s: f64,
    pub wait_reduction_pct: f64,
    pub emissions_reduction_pct: f64,
}

/// Seed-averaged metrics for the arms that ran. Reductions need both a
/// baseline and a treated arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub seeds_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<SimMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<SimMetrics>,
    /// Treated arm label when it ran through the bus (`loop`).
    pub treated_arm: Arm,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wait_reduction_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emissions_reduction_pct: Option<f64>,
    pub per_seed: Vec<SeedComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loop_stats: Option<LoopStats>,
}

/// Element-wise mean of metrics across seeds.
pub fn mean_metrics(all: &[&SimMetrics]) -> SimMetrics {
    let k = all.len().max(1) as f64;
    let n = all.first().map_or(0, |m| m.approach_mean_wait_s.len());
    let avg = |f: &dyn Fn(&SimMetrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / k;
    SimMetrics {
        mean_wait_s: avg(&|m| m.mean_wait_s),
        approach_mean_wait_s: (0..n).map(|i| avg(&|m| m.approach_mean_wait_s[i])).collect(),
        max_queue: all.iter().map(|m| m.max_queue).max().unwrap_or(0),
        throughput: (avg(&|m| m.throughput as f64)).round() as u64,
        arrivals: (avg(&|m| m.arrivals as f64)).round() as u64,
        total_wait_veh_s: avg(&|m| m.total_wait_veh_s),
        stopped_time_veh_s: avg(&|m| m.stopped_time_veh_s),
        emissions_proxy_g: avg(&|m| m.emissions_proxy_g),
    }
}

/// Runs the requested arms on every seed. Both arms see identical arrivals per seed.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    seeds: &[u64],
    arms: &[Arm],
    exec: Execution,
) -> Result<(ComparisonReport, Vec<ArmRun>)> {
    if seeds.is_empty() {
        return Err(Error::Domain("at least one seed is required".into()));
    }
    if arms.is_empty() || arms.contains(&Arm::Adaptive) && arms.contains(&Arm::Loop) {
        return Err(Error::Domain("choose fixed and/or one adaptive arm".into()));
    }
    let jobs: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    // the bus loop already runs one thread per service
    let exec = if arms.contains(&Arm::Loop) { Execution::Sequential } else { exec };
    let results = map_ordered(jobs, exec, |(arm, seed)| {
        run_arm(cfg, arm, seed).map(|(run, loop_stats)| ArmRun {
            arm,
            seed,
            run,
            loop_stats,
        })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let pick = |arm: Arm| -> Vec<&ArmRun> { runs.iter().filter(|r| r.arm == arm).collect() };
    let mean_of = |rs: &[&ArmRun]| {
        (!rs.is_empty()).then(|| mean_metrics(&rs.iter().map(|r| &r.run.metrics).collect::<Vec<_>>()))
    };
    let treated_arm = if arms.contains(&Arm::Loop) { Arm::Loop } else { Arm::Adaptive };
    let fixed_runs = pick(Arm::Fixed);
    let treated_runs = pick(treated_arm);
    let fixed = mean_of(&fixed_runs);
    let adaptive = mean_of(&treated_runs);

    let per_seed = if fixed_runs.is_empty() || treated_runs.is_empty() {
        Vec::new()
    } else {
        fixed_runs
            .iter()
            .zip(&treated_runs)
            .map(|(f, a)| {
                let (f, a, seed) = (&f.run.metrics, &a.run.metrics, f.seed);
                SeedComparison {
                    seed,
                    fixed_mean_wait_s: f.mean_wait_s,
                    adaptive_mean_wait_s: a.mean_wait_s,
                    wait_reduction_pct: reduction_pct(f.mean_wait_s, a.mean_wait_s),
                    emissions_reduction_pct: reduction_pct(f.emissions_proxy_g, a.emissions_proxy_g),
                }
            })
            .collect()
    };
    let (wait_reduction_pct, emissions_reduction_pct) = match (&fixed, &adaptive) {
        (Some(f), Some(a)) => (
            Some(reduction_pct(f.mean_wait_s, a.mean_wait_s)),
            Some(reduction_pct(f.emissions_proxy_g, a.emissions_proxy_g)),
        ),
        _ => (None, None),
    };
    let loop_stats = treated_runs
        .iter()
        .filter_map(|r| r.loop_stats.clone())
        .reduce(|mut acc, s| {
            acc.rounds += s.rounds;
            acc.decisions += s.decisions;
            acc.applied += s.applied;
            acc.rejected += s.rejected;
            acc.stale_rounds += s.stale_rounds;
            acc.warnings.extend(s.warnings);
            acc.bus.published += s.bus.published;
            acc.bus.deliveries += s.bus.deliveries;
            acc.bus.dropped += s.bus.dropped;
            for (k, v) in s.bus.published_by_topic {
                *acc.bus.published_by_topic.entry(k).or_default() += v;
            }
            for (k, v) in s.dropped_by_subscriber {
                *acc.dropped_by_subscriber.entry(k).or_default() += v;
            }
            acc
        });

    let report = ComparisonReport {
        scenario: cfg.name.clone(),
        seeds: seeds.to_vec(),
        seeds_used: seeds.len(),
        fixed,
        adaptive,
        treated_arm,
        wait_reduction_pct,
        emissions_reduction_pct,
        per_seed,
        loop_stats,
    };
    Ok((report, runs))
}

/// Convenience wrapper: both arms, direct adaptive policy.
pub fn run_comparison(cfg: &ScenarioConfig, seeds: &[u64], exec: Execution) -> Result<ComparisonReport> {
    run_experiment(cfg, seeds, &[Arm::Fixed, Arm::Adaptive], exec).map(|(r, _)| r)
}

/// Writes `intervals_<arm>_seed<seed>.csv` per run and `summary.csv` into `dir`.
pub fn write_csv_outputs(dir: &Path, report: &ComparisonReport, runs: &[ArmRun]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in runs {
        let path = dir.join(format!("intervals_{}_seed{}.csv", r.arm.label(), r.seed));
        write_rows_csv(&r.run.rows, std::fs::File::create(path)?)?;
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "arm",
        "seed",
        "mean_wait_s",
        "max_queue",
        "throughput",
        "arrivals",
        "stopped_time_veh_s",
        "emissions_proxy_g",
    ])?;
    for r in runs {
        let m = &r.run.metrics;
        w.write_record([
            r.arm.label().to_string(),
            r.seed.to_string(),
            m.mean_wait_s.to_string(),
            m.max_queue.to_string(),
            m.throughput.to_string(),
            m.arrivals.to_string(),
            m.stopped_time_veh_s.to_string(),
            m.emissions_proxy_g.to_string(),
        ])?;
    }
    if let (Some(wr), Some(er)) = (report.wait_reduction_pct, report.emissions_reduction_pct) {
        w.write_record(["reduction_pct", "", &wr.to_string(), "", "", "", "", &er.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

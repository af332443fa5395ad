//! Green-split optimization: simulated annealing over budget-preserving
//! transfers, Euclidean projection onto the feasible set, and an exhaustive
//! grid search used as a verification oracle.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    aggregate_wait, unchecked_aggregate_wait, validate_plan, Demand, IntersectionSpec, SignalPlan,
    FEASIBILITY_TOL,
};
use crate::error::{Error, Result};
use crate::par::{map_ordered, Execution};

/// Extra draws allowed when a transfer is truncated to zero by the bounds.
const PERTURB_RETRIES: usize = 8;
/// Smallest transfer drawn by [`perturb`], seconds.
const MIN_DELTA_S: f64 = 0.5;
const MAX_GRID_POINTS_PER_AXIS: f64 = 1e4;
const MAX_GRID_CANDIDATES: f64 = 5e7;

fn default_t_max() -> f64 {
    50.0
}
fn default_t_min() -> f64 {
    0.01
}
fn default_cooling() -> f64 {
    0.95
}
fn default_iters() -> usize {
    40
}
fn default_delta_max() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_cooling")]
    pub cooling: f64,
    #[serde(default = "default_iters")]
    pub iters_per_temp: usize,
    #[serde(default = "default_delta_max")]
    pub delta_max_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Optional wall-clock budget. Runs cut short by it are not reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_s: Option<f64>,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            t_max: default_t_max(),
            t_min: default_t_min(),
            cooling: default_cooling(),
            iters_per_temp: default_iters(),
            delta_max_s: default_delta_max(),
            seed: default_seed(),
            time_limit_s: None,
        }
    }
}

impl AnnealSchedule {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(format!("anneal schedule: {m}")));
        if !(self.t_min > 0.0 && self.t_max > self.t_min && self.t_max.is_finite()) {
            return bad("need t_max > t_min > 0");
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return bad("cooling must lie in (0, 1)");
        }
        if self.iters_per_temp < 1 {
            return bad("iters_per_temp must be >= 1");
        }
        if !(self.delta_max_s >= 1.0 && self.delta_max_s.is_finite()) {
            return bad("delta_max_s must be >= 1");
        }
        if let Some(t) = self.time_limit_s {
            if !(t > 0.0) {
                return bad("time_limit_s must be > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub temperature: f64,
    pub current_cost: f64,
    pub best_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_plan: SignalPlan,
    pub best_cost: f64,
    pub evaluations: usize,
    pub accepted_moves: usize,
    pub trace: Vec<TracePoint>,
}

/// Mean waiting time of a feasible plan; infeasible plans are an error.
pub fn cost(plan: &SignalPlan, demand: &Demand, spec: &IntersectionSpec) -> Result<f64> {
    aggregate_wait(plan, demand, spec)
}

/// Moves a random amount of green from one approach to another without
/// touching the budget. Returns the input unchanged when no transfer fits.
pub fn perturb<R: Rng + ?Sized>(
    plan: &SignalPlan,
    spec: &IntersectionSpec,
    rng: &mut R,
    delta_max_s: f64,
) -> SignalPlan {
    let n = plan.n();
    if n < 2 {
        return plan.clone();
    }
    let hi = delta_max_s.max(MIN_DELTA_S);
    for _ in 0..=PERTURB_RETRIES {
        let from = rng.random_range(0..n);
        let mut to = rng.random_range(0..n - 1);
        if to >= from {
            to += 1;
        }
        let drawn = rng.random_range(MIN_DELTA_S..=hi);
        if let Some(next) = transfer(plan, spec, from, to, drawn) {
            return next;
        }
    }
    plan.clone()
}

/// Shifts up to `delta` seconds of green from `from` to `to`, truncated so both
/// stay within bounds. `None` if truncation leaves nothing to move.
pub fn transfer(
    plan: &SignalPlan,
    spec: &IntersectionSpec,
    from: usize,
    to: usize,
    delta: f64,
) -> Option<SignalPlan> {
    let g = &plan.greens_s;
    let room = (g[from] - spec.green_min_s[from]).min(spec.green_max_s[to] - g[to]);
    let delta = delta.min(room);
    if !(delta > 0.0) {
        return None;
    }
    let mut next = plan.clone();
    if delta == room && room == g[from] - spec.green_min_s[from] {
        next.greens_s[from] = spec.green_min_s[from];
        next.greens_s[to] = g[to] + delta;
    } else if delta == room {
        next.greens_s[to] = spec.green_max_s[to];
        next.greens_s[from] = g[from] - delta;
    } else {
        next.greens_s[from] = g[from] - delta;
        next.greens_s[to] = g[to] + delta;
    }
    Some(next)
}

/// Euclidean projection onto `{x : Σx = C − L, min ≤ x ≤ max}`.
///
/// The projection has the form `x_i = clamp(raw_i + ν)`; `ν` is found by
/// bisection on the monotone map `ν ↦ Σ clamp(raw_i + ν)`.
pub fn project_feasible(raw: &[f64], spec: &IntersectionSpec) -> Result<SignalPlan> {
    if raw.len() != spec.n() {
        return Err(Error::Dimension {
            what: "raw greens vs intersection approaches",
            expected: spec.n(),
            got: raw.len(),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("raw greens must be finite".into()));
    }
    let budget = spec.green_budget();
    let (lo_b, hi_b) = (&spec.green_min_s, &spec.green_max_s);
    let inside = raw.iter().zip(lo_b.iter().zip(hi_b)).all(|(r, (l, h))| r >= l && r <= h);
    if inside && (raw.iter().sum::<f64>() - budget).abs() <= FEASIBILITY_TOL {
        return Ok(SignalPlan::new(raw.to_vec(), spec));
    }
    let shifted = |nu: f64| -> Vec<f64> {
        raw.iter()
            .zip(lo_b.iter().zip(hi_b))
            .map(|(&r, (&lo, &hi))| (r + nu).clamp(lo, hi))
            .collect()
    };
    let total = |x: &[f64]| x.iter().sum::<f64>();

    let mut lo = raw
        .iter()
        .zip(lo_b)
        .map(|(r, m)| m - r)
        .fold(f64::INFINITY, f64::min);
    let mut hi = raw
        .iter()
        .zip(hi_b)
        .map(|(r, m)| m - r)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut best = shifted(lo);
    if (total(&best) - budget).abs() >= FEASIBILITY_TOL {
        best = shifted(hi);
    }
    for _ in 0..200 {
        if (total(&best) - budget).abs() < FEASIBILITY_TOL * 0.1 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let x = shifted(mid);
        let s = total(&x);
        if s < budget {
            lo = mid;
        } else {
            hi = mid;
        }
        best = x;
    }
    if let Some(exact) = solve_active_set(raw, &best, budget, lo_b, hi_b) {
        best = exact;
    }
    distribute_residual(&mut best, budget, lo_b, hi_b);
    Ok(SignalPlan::new(best, spec))
}

/// Recomputes the shift in closed form once bisection has settled which
/// coordinates sit on a bound. `None` if that guess is inconsistent.
fn solve_active_set(raw: &[f64], approx: &[f64], budget: f64, lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
    let mut fixed = 0.0;
    let mut free_raw = 0.0;
    let mut free = 0usize;
    for i in 0..raw.len() {
        if approx[i] == lo[i] || approx[i] == hi[i] {
            fixed += approx[i];
        } else {
            free_raw += raw[i];
            free += 1;
        }
    }
    if free == 0 {
        return None;
    }
    let nu = (budget - fixed - free_raw) / free as f64;
    let x: Vec<f64> = (0..raw.len())
        .map(|i| {
            if approx[i] == lo[i] || approx[i] == hi[i] {
                approx[i]
            } else {
                raw[i] + nu
            }
        })
        .collect();
    let ok = x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v <= h);
    ok.then_some(x)
}

/// Absorbs any last floating-point residual of the budget into coordinates
/// with slack, keeping every bound exact.
fn distribute_residual(x: &mut [f64], budget: f64, lo: &[f64], hi: &[f64]) {
    for _ in 0..4 {
        let resid = budget - x.iter().sum::<f64>();
        if resid == 0.0 {
            return;
        }
        for i in 0..x.len() {
            let target = (x[i] + resid).clamp(lo[i], hi[i]);
            if target != x[i] {
                x[i] = target;
                break;
            }
        }
    }
}

/// Classic simulated annealing with geometric cooling.
///
/// Proposals come from [`perturb`], so every evaluated plan is feasible. A
/// move is accepted when it lowers the current cost or when `exp(−Δ/T)`
/// beats a uniform draw. The best-ever plan is returned.
pub fn anneal(
    initial: &SignalPlan,
    demand: &Demand,
    spec: &IntersectionSpec,
    schedule: &AnnealSchedule,
) -> Result<OptimizationResult> {
    spec.validate()?;
    schedule.validate()?;
    if demand.flows.len() != spec.n() {
        return Err(Error::Dimension {
            what: "flows vs intersection approaches",
            expected: spec.n(),
            got: demand.flows.len(),
        });
    }
    let start = if validate_plan(initial, spec)?.is_empty() {
        initial.clone()
    } else {
        project_feasible(&initial.greens_s, spec)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let deadline = schedule
        .time_limit_s
        .map(|s| Instant::now() + Duration::from_secs_f64(s));

    let mut current = start;
    let mut current_cost = unchecked_aggregate_wait(&current.greens_s, demand, spec);
    let mut best = current.clone();
    let mut best_cost = current_cost;
    let mut evaluations = 1;
    let mut accepted_moves = 0;
    let mut trace = Vec::new();

    let mut temperature = schedule.t_max;
    while temperature >= schedule.t_min {
        for _ in 0..schedule.iters_per_temp {
            let candidate = perturb(&current, spec, &mut rng, schedule.delta_max_s);
            let c = unchecked_aggregate_wait(&candidate.greens_s, demand, spec);
            evaluations += 1;
            let delta = c - current_cost;
            let accept = delta < 0.0 || (-delta / temperature).exp() > rng.random::<f64>();
            if accept {
                current = candidate;
                current_cost = c;
                accepted_moves += 1;
                if c < best_cost {
                    best = current.clone();
                    best_cost = c;
                }
            }
        }
        trace.push(TracePoint {
            temperature,
            current_cost,
            best_cost,
        });
        temperature *= schedule.cooling;
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
    }

    Ok(OptimizationResult {
        best_plan: best,
        best_cost,
        evaluations,
        accepted_moves,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub plan: SignalPlan,
    pub cost: f64,
    /// Number of feasible grid splits evaluated.
    pub candidates: usize,
}

/// Exhaustive search over splits on a `step_s` grid anchored at the lower
/// bounds; the last approach takes whatever completes the budget. Ties go to
/// the lexicographically smallest greens vector.
pub fn brute_force_optimum(
    demand: &Demand,
    spec: &IntersectionSpec,
    step_s: f64,
) -> Result<GridOptimum> {
    brute_force_optimum_with(demand, spec, step_s, Execution::default())
}

pub fn brute_force_optimum_with(
    demand: &Demand,
    spec: &IntersectionSpec,
    step_s: f64,
    exec: Execution,
) -> Result<GridOptimum> {
    spec.validate()?;
    let n = spec.n();
    if demand.flows.len() != n {
        return Err(Error::Dimension {
            what: "flows vs intersection approaches",
            expected: n,
            got: demand.flows.len(),
        });
    }
    if !(step_s > 0.0 && step_s.is_finite()) {
        return Err(Error::Domain(format!("grid step must be > 0, got {step_s}")));
    }
    if n > 4 {
        return Err(Error::GridTooLarge(format!("{n} approaches (limit 4)")));
    }
    let budget = spec.green_budget();
    if budget / step_s > MAX_GRID_POINTS_PER_AXIS {
        return Err(Error::GridTooLarge(format!(
            "budget/step = {} exceeds {MAX_GRID_POINTS_PER_AXIS}",
            budget / step_s
        )));
    }
    let axes: Vec<Vec<f64>> = (0..n - 1)
        .map(|i| {
            let lo = spec.green_min_s[i];
            let hi = spec.green_max_s[i].min(budget);
            let count = ((hi - lo) / step_s + 1e-9).floor() as usize + 1;
            (0..count).map(|k| lo + k as f64 * step_s).collect()
        })
        .collect();
    let total: f64 = axes.iter().map(|a| a.len() as f64).product();
    if total > MAX_GRID_CANDIDATES {
        return Err(Error::GridTooLarge(format!(
            "{total} grid points exceed {MAX_GRID_CANDIDATES}"
        )));
    }

    let last_lo = spec.green_min_s[n - 1];
    let last_hi = spec.green_max_s[n - 1];
    let partials = map_ordered(axes[0].clone(), exec, |first| {
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut count = 0usize;
        let mut greens = vec![0.0; n];
        greens[0] = first;
        let mut idx = vec![0usize; n.saturating_sub(2)];
        loop {
            for (d, &k) in idx.iter().enumerate() {
                greens[d + 1] = axes[d + 1][k];
            }
            let used: f64 = greens[..n - 1].iter().sum();
            let last = budget - used;
            if last >= last_lo - FEASIBILITY_TOL && last <= last_hi + FEASIBILITY_TOL {
                greens[n - 1] = last.clamp(last_lo, last_hi);
                count += 1;
                let c = unchecked_aggregate_wait(&greens, demand, spec);
                if best.as_ref().is_none_or(|(bc, _)| strictly_better(c, *bc)) {
                    best = Some((c, greens.clone()));
                }
            }
            // odometer over axes 1..n-1, last index fastest
            let mut d = idx.len();
            loop {
                if d == 0 {
                    return (best, count);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < axes[d + 1].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    });

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut candidates = 0;
    for (b, count) in partials {
        candidates += count;
        if let Some((c, g)) = b {
            if best.as_ref().is_none_or(|(bc, _)| strictly_better(c, *bc)) {
                best = Some((c, g));
            }
        }
    }
    let (cost, greens) =
        best.ok_or_else(|| Error::GridTooLarge("no feasible split on this grid".into()))?;
    Ok(GridOptimum {
        plan: SignalPlan::new(greens, spec),
        cost,
        candidates,
    })
}

fn strictly_better(c: f64, incumbent: f64) -> bool {
    c < incumbent - 1e-12 * incumbent.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_way(min: f64, max: f64) -> IntersectionSpec {
        IntersectionSpec::symmetric(2, 0.5, 60.0, 4.0, min, max).unwrap()
    }

    /// Exact projection by enumerating which coordinates sit at a bound.
    /// For each assignment the free coordinates share one shift; the feasible
    /// candidate closest to `raw` is the projection.
    fn active_set_projection(raw: &[f64], spec: &IntersectionSpec) -> Vec<f64> {
        let n = raw.len();
        let budget = spec.green_budget();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut state = vec![0u8; n];
            let mut c = code;
            for s in state.iter_mut() {
                *s = (c % 3) as u8;
                c /= 3;
            }
            let mut x = vec![0.0; n];
            let mut fixed_sum = 0.0;
            let mut free = Vec::new();
            for i in 0..n {
                match state[i] {
                    0 => {
                        x[i] = spec.green_min_s[i];
                        fixed_sum += x[i];
                    }
                    1 => {
                        x[i] = spec.green_max_s[i];
                        fixed_sum += x[i];
                    }
                    _ => free.push(i),
                }
            }
            if free.is_empty() {
                if (fixed_sum - budget).abs() > 1e-9 {
                    continue;
                }
            } else {
                let nu = (budget - fixed_sum - free.iter().map(|&i| raw[i]).sum::<f64>())
                    / free.len() as f64;
                for &i in &free {
                    x[i] = raw[i] + nu;
                }
            }
            let feasible = (0..n).all(|i| {
                x[i] >= spec.green_min_s[i] - 1e-12 && x[i] <= spec.green_max_s[i] + 1e-12
            });
            if !feasible {
                continue;
            }
            let d: f64 = x.iter().zip(raw).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn transfer_example() {
        let spec = IntersectionSpec::symmetric(2, 0.5, 60.0, 4.0, 7.0, 49.0).unwrap();
        let plan = SignalPlan::new(vec![28.0, 28.0], &spec);
        let next = transfer(&plan, &spec, 0, 1, 5.0).unwrap();
        assert_eq!(next.greens_s, vec![23.0, 33.0]);
    }

    #[test]
    fn perturb_replays_seeded_draws() {
        let spec = IntersectionSpec::symmetric(2, 0.5, 60.0, 4.0, 7.0, 49.0).unwrap();
        let plan = SignalPlan::new(vec![28.0, 28.0], &spec);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = perturb(&plan, &spec, &mut rng, 5.0);

            let mut replay = ChaCha8Rng::seed_from_u64(seed);
            let from = replay.random_range(0..2usize);
            let mut to = replay.random_range(0..1usize);
            if to >= from {
                to += 1;
            }
            let delta = replay.random_range(0.5..=5.0f64);
            let mut expected = vec![28.0, 28.0];
            expected[from] -= delta;
            expected[to] += delta;
            assert_eq!(got.greens_s, expected, "seed {seed}");
        }
    }

    #[test]
    fn perturb_pinned_plan_is_unchanged() {
        // both greens at their minimum and maximum simultaneously
        let spec = IntersectionSpec::new(
            "i",
            IntersectionSpec::symmetric(2, 0.5, 60.0, 0.0, 30.0, 30.0).unwrap().approaches,
            60.0,
            0.0,
            vec![30.0, 30.0],
            vec![30.0, 30.0],
        )
        .unwrap();
        let plan = SignalPlan::new(vec![30.0, 30.0], &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb(&plan, &spec, &mut rng, 5.0), plan);
    }

    #[test]
    fn perturbations_stay_feasible() {
        let spec = IntersectionSpec::new(
            "i",
            IntersectionSpec::symmetric(4, 1.0, 100.0, 16.0, 8.0, 40.0).unwrap().approaches,
            100.0,
            16.0,
            vec![8.0, 10.0, 6.0, 12.0],
            vec![40.0, 35.0, 30.0, 45.0],
        )
        .unwrap();
        let mut plan = spec.uniform_plan();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            plan = perturb(&plan, &spec, &mut rng, 5.0);
            assert!(validate_plan(&plan, &spec).unwrap().is_empty(), "{plan:?}");
        }
    }

    #[test]
    fn projection_examples() {
        let spec = IntersectionSpec::symmetric(4, 1.0, 76.0, 16.0, 5.0, 40.0).unwrap();
        let p = project_feasible(&[10.0; 4], &spec).unwrap();
        assert_eq!(p.greens_s, vec![15.0; 4]);

        let feasible = [10.0, 20.0, 12.0, 18.0];
        let p = project_feasible(&feasible, &spec).unwrap();
        for (a, b) in p.greens_s.iter().zip(feasible) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(project_feasible(&[1.0, f64::NAN, 1.0, 1.0], &spec).is_err());
        assert!(project_feasible(&[1.0; 3], &spec).is_err());
    }

    #[test]
    fn brute_force_counts_two_way_grid() {
        let spec = two_way(7.0, 49.0);
        let d = Demand::per_5min(vec![60.0, 60.0]);
        let g = brute_force_optimum(&d, &spec, 1.0).unwrap();
        assert_eq!(g.candidates, 43);
        assert_eq!(g.plan.greens_s, vec![28.0, 28.0]);
    }

    #[test]
    fn brute_force_guards() {
        let spec = IntersectionSpec::symmetric(5, 1.0, 100.0, 0.0, 5.0, 50.0).unwrap();
        let d = Demand::per_5min(vec![1.0; 5]);
        assert!(matches!(brute_force_optimum(&d, &spec, 1.0), Err(Error::GridTooLarge(_))));
        let spec = two_way(7.0, 49.0);
        let d = Demand::per_5min(vec![1.0; 2]);
        assert!(matches!(brute_force_optimum(&d, &spec, 1e-3), Err(Error::GridTooLarge(_))));
    }

    #[test]
    fn brute_force_sequential_matches_parallel() {
        let spec = IntersectionSpec::symmetric(4, 1.2, 100.0, 16.0, 8.0, 45.0).unwrap();
        let d = Demand::per_5min(vec![250.0, 120.0, 90.0, 180.0]);
        let a = brute_force_optimum_with(&d, &spec, 1.0, Execution::Sequential).unwrap();
        let b = brute_force_optimum_with(&d, &spec, 1.0, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn anneal_symmetric_two_way() {
        let spec = two_way(7.0, 49.0);
        let d = Demand::per_5min(vec![80.0, 80.0]);
        let init = SignalPlan::new(vec![10.0, 46.0], &spec);
        let r = anneal(&init, &d, &spec, &AnnealSchedule::default()).unwrap();
        for g in &r.best_plan.greens_s {
            assert!((g - 28.0).abs() <= 1.0, "{:?}", r.best_plan);
        }
        assert!(r.best_cost <= cost(&init, &d, &spec).unwrap());
        assert_eq!(r.best_cost, cost(&r.best_plan, &d, &spec).unwrap());
    }

    #[test]
    fn anneal_projects_infeasible_start() {
        let spec = two_way(7.0, 49.0);
        let d = Demand::per_5min(vec![80.0, 40.0]);
        let init = SignalPlan::new(vec![100.0, 100.0], &spec);
        let r = anneal(&init, &d, &spec, &AnnealSchedule::default()).unwrap();
        assert!(validate_plan(&r.best_plan, &spec).unwrap().is_empty());
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let spec = IntersectionSpec::symmetric(3, 0.8, 90.0, 12.0, 8.0, 60.0).unwrap();
        let d = Demand::per_5min(vec![150.0, 40.0, 70.0]);
        let sched = AnnealSchedule {
            t_max: 1e-12,
            t_min: 1e-15,
            cooling: 0.5,
            ..Default::default()
        };
        let r = anneal(&spec.uniform_plan(), &d, &spec, &sched).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].current_cost <= w[0].current_cost + 1e-9);
        }
    }

    #[test]
    fn anneal_is_reproducible() {
        let spec = IntersectionSpec::symmetric(4, 1.0, 100.0, 16.0, 8.0, 45.0).unwrap();
        let d = Demand::per_5min(vec![240.0, 180.0, 90.0, 150.0]);
        let s = AnnealSchedule::default().with_seed(99);
        let a = anneal(&spec.uniform_plan(), &d, &spec, &s).unwrap();
        let b = anneal(&spec.uniform_plan(), &d, &spec, &s).unwrap();
        assert_eq!(a, b);
        for w in a.trace.windows(2) {
            assert!(w[1].best_cost <= w[0].best_cost);
        }
    }

    #[test]
    fn schedule_validation() {
        let mut s = AnnealSchedule::default();
        assert!(s.validate().is_ok());
        s.cooling = 1.0;
        assert!(s.validate().is_err());
        let s = AnnealSchedule { t_min: 60.0, ..Default::default() };
        assert!(s.validate().is_err());
        let s = AnnealSchedule { delta_max_s: 0.5, ..Default::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn two_way_anneal_near_grid_optimum() {
        // strictly convex two-approach instances; 95 of 100 seeds within 2 s
        let spec = IntersectionSpec::symmetric(2, 0.6, 80.0, 8.0, 10.0, 62.0).unwrap();
        let d = Demand::per_5min(vec![70.0, 30.0]);
        let oracle = brute_force_optimum(&d, &spec, 1.0).unwrap();
        let close = (0..100u64)
            .filter(|&seed| {
                let r = anneal(&spec.uniform_plan(), &d, &spec, &AnnealSchedule::default().with_seed(seed))
                    .unwrap();
                r.best_plan
                    .greens_s
                    .iter()
                    .zip(&oracle.plan.greens_s)
                    .all(|(a, b)| (a - b).abs() <= 2.0)
            })
            .count();
        assert!(close >= 95, "{close}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn projection_matches_active_set_oracle(
            raw in proptest::collection::vec(-50.0f64..120.0, 4),
            mins in proptest::collection::vec(3.0f64..15.0, 4),
            spans in proptest::collection::vec(0.0f64..40.0, 4),
        ) {
            let maxs: Vec<f64> = mins.iter().zip(&spans).map(|(a, b)| a + b).collect();
            let lo: f64 = mins.iter().sum();
            let hi: f64 = maxs.iter().sum();
            let budget = lo + 0.5 * (hi - lo);
            let spec = IntersectionSpec::new(
                "i",
                IntersectionSpec::symmetric(4, 1.0, 100.0, 0.0, 1.0, 99.0).unwrap().approaches,
                budget + 12.0, 12.0, mins.clone(), maxs.clone(),
            ).unwrap();
            let p = project_feasible(&raw, &spec).unwrap();
            prop_assert!(validate_plan(&p, &spec).unwrap().is_empty());
            for i in 0..4 {
                prop_assert!(p.greens_s[i] >= mins[i] && p.greens_s[i] <= maxs[i]);
            }
            let again = project_feasible(&p.greens_s, &spec).unwrap();
            for (a, b) in again.greens_s.iter().zip(&p.greens_s) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let oracle = active_set_projection(&raw, &spec);
            for (a, b) in p.greens_s.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", p.greens_s, oracle);
            }
        }
    }
}

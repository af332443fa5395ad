//! Intersection geometry, signal plans and the analytic waiting-time model.
//!
//! Durations are seconds, flows are vehicles per counting interval (300 s by
//! default). A plan is feasible when every green lies within its bounds and the
//! greens plus the aggregate lost time fill the cycle exactly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for the cycle budget identity and green bounds.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Degree of saturation used inside the uniform-delay denominator is clamped here.
pub const SATURATION_CLAMP: f64 = 0.98;

/// Default counting interval (vehicles per 5 minutes).
pub const DEFAULT_INTERVAL_S: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachSpec {
    pub id: String,
    /// Discharge rate of the whole approach during green, vehicles per second.
    pub saturation_flow: f64,
    pub lanes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub id: String,
    pub approaches: Vec<ApproachSpec>,
    pub cycle_length_s: f64,
    pub lost_time_s: f64,
    pub green_min_s: Vec<f64>,
    pub green_max_s: Vec<f64>,
}

impl IntersectionSpec {
    /// Builds a spec and checks every structural invariant, including that the
    /// feasible region is nonempty.
    pub fn new(
        id: impl Into<String>,
        approaches: Vec<ApproachSpec>,
        cycle_length_s: f64,
        lost_time_s: f64,
        green_min_s: Vec<f64>,
        green_max_s: Vec<f64>,
    ) -> Result<Self> {
        let spec = IntersectionSpec {
            id: id.into(),
            approaches,
            cycle_length_s,
            lost_time_s,
            green_min_s,
            green_max_s,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform spec used heavily in tests: `n` identical approaches.
    pub fn symmetric(
        n: usize,
        saturation_flow: f64,
        cycle_length_s: f64,
        lost_time_s: f64,
        green_min_s: f64,
        green_max_s: f64,
    ) -> Result<Self> {
        let approaches = (0..n)
            .map(|i| ApproachSpec {
                id: format!("a{}", i + 1),
                saturation_flow,
                lanes: 1,
            })
            .collect();
        Self::new(
            "i1",
            approaches,
            cycle_length_s,
            lost_time_s,
            vec![green_min_s; n],
            vec![green_max_s; n],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.approaches.len();
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if n < 2 {
            return bad(format!("need at least 2 approaches, got {n}"));
        }
        if self.green_min_s.len() != n || self.green_max_s.len() != n {
            return bad("green bound vectors must have one entry per approach".into());
        }
        for (i, a) in self.approaches.iter().enumerate() {
            if !(a.saturation_flow.is_finite() && a.saturation_flow > 0.0) {
                return bad(format!("approach {} ({}): saturation_flow must be > 0", i, a.id));
            }
            if a.lanes < 1 {
                return bad(format!("approach {} ({}): lanes must be >= 1", i, a.id));
            }
            if self.approaches[..i].iter().any(|b| b.id == a.id) {
                return bad(format!("duplicate approach id `{}`", a.id));
            }
            let (lo, hi) = (self.green_min_s[i], self.green_max_s[i]);
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(format!(
                    "approach {} ({}): need 0 < green_min_s ({lo}) <= green_max_s ({hi})",
                    i, a.id
                ));
            }
        }
        if !(self.cycle_length_s.is_finite()
            && self.lost_time_s.is_finite()
            && self.lost_time_s >= 0.0
            && self.cycle_length_s > self.lost_time_s)
        {
            return bad(format!(
                "need cycle_length_s ({}) > lost_time_s ({}) >= 0",
                self.cycle_length_s, self.lost_time_s
            ));
        }
        let budget = self.green_budget();
        let lo: f64 = self.green_min_s.iter().sum();
        let hi: f64 = self.green_max_s.iter().sum();
        if lo > budget + FEASIBILITY_TOL || hi < budget - FEASIBILITY_TOL {
            return bad(format!(
                "empty feasible region: sum of minima {lo}, green budget {budget}, sum of maxima {hi}"
            ));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.approaches.len()
    }

    /// Seconds of green to distribute per cycle (C minus lost time).
    pub fn green_budget(&self) -> f64 {
        self.cycle_length_s - self.lost_time_s
    }

    pub fn approach_index(&self, id: &str) -> Option<usize> {
        self.approaches.iter().position(|a| a.id == id)
    }

    /// Splits the budget evenly, then projects onto the bounds if the even split violates them.
    pub fn uniform_plan(&self) -> SignalPlan {
        let n = self.n() as f64;
        let raw = vec![self.green_budget() / n; self.n()];
        crate::optimizer::project_feasible(&raw, self).expect("finite uniform split")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub greens_s: Vec<f64>,
    pub cycle_length_s: f64,
    pub lost_time_s: f64,
}

impl SignalPlan {
    pub fn new(greens_s: Vec<f64>, spec: &IntersectionSpec) -> Self {
        SignalPlan {
            greens_s,
            cycle_length_s: spec.cycle_length_s,
            lost_time_s: spec.lost_time_s,
        }
    }

    pub fn n(&self) -> usize {
        self.greens_s.len()
    }

    pub fn total_green(&self) -> f64 {
        self.greens_s.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowObservation {
    pub approach_id: String,
    pub t: i64,
    pub flow_veh_per_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousRecord {
    pub t: i64,
    pub values: Vec<f64>,
}

/// Per-approach flows together with the length of the counting interval they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Demand {
    pub flows: Vec<f64>,
    pub interval_s: f64,
}

impl Demand {
    pub fn new(flows: Vec<f64>, interval_s: f64) -> Self {
        Demand { flows, interval_s }
    }

    /// Flows in vehicles per 5 minutes.
    pub fn per_5min(flows: Vec<f64>) -> Self {
        Demand::new(flows, DEFAULT_INTERVAL_S)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    BelowMin { approach: usize, green: f64, min: f64 },
    AboveMax { approach: usize, green: f64, max: f64 },
    NonFinite { approach: usize },
    Budget { total_green: f64, budget: f64 },
    CycleMismatch { plan: f64, spec: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BelowMin { approach, green, min } => {
                write!(f, "approach {approach} green {green} below green_min={min}")
            }
            Violation::AboveMax { approach, green, max } => {
                write!(f, "approach {approach} green {green} above green_max={max}")
            }
            Violation::NonFinite { approach } => write!(f, "approach {approach} green is not finite"),
            Violation::Budget { total_green, budget } => {
                write!(f, "budget {total_green} != {budget}")
            }
            Violation::CycleMismatch { plan, spec } => {
                write!(f, "plan cycle/lost time {plan} does not match intersection {spec}")
            }
        }
    }
}

/// Checks a plan against the intersection. An empty list means feasible.
pub fn validate_plan(plan: &SignalPlan, spec: &IntersectionSpec) -> Result<Vec<Violation>> {
    if plan.n() != spec.n() {
        return Err(Error::Dimension {
            what: "plan greens vs intersection approaches",
            expected: spec.n(),
            got: plan.n(),
        });
    }
    let mut out = Vec::new();
    if (plan.cycle_length_s - spec.cycle_length_s).abs() > FEASIBILITY_TOL {
        out.push(Violation::CycleMismatch {
            plan: plan.cycle_length_s,
            spec: spec.cycle_length_s,
        });
    }
    if (plan.lost_time_s - spec.lost_time_s).abs() > FEASIBILITY_TOL {
        out.push(Violation::CycleMismatch {
            plan: plan.lost_time_s,
            spec: spec.lost_time_s,
        });
    }
    for (i, &g) in plan.greens_s.iter().enumerate() {
        if !g.is_finite() {
            out.push(Violation::NonFinite { approach: i });
        } else if g < spec.green_min_s[i] - FEASIBILITY_TOL {
            out.push(Violation::BelowMin {
                approach: i,
                green: g,
                min: spec.green_min_s[i],
            });
        } else if g > spec.green_max_s[i] + FEASIBILITY_TOL {
            out.push(Violation::AboveMax {
                approach: i,
                green: g,
                max: spec.green_max_s[i],
            });
        }
    }
    let total = plan.total_green();
    let budget = spec.green_budget();
    if !total.is_finite() || (total - budget).abs() > FEASIBILITY_TOL {
        out.push(Violation::Budget {
            total_green: total,
            budget,
        });
    }
    Ok(out)
}

/// Like [`validate_plan`] but turns violations into an error.
pub fn ensure_feasible(plan: &SignalPlan, spec: &IntersectionSpec) -> Result<()> {
    let v = validate_plan(plan, spec)?;
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InfeasiblePlan(v))
    }
}

/// Average wait per vehicle on one approach, in seconds.
///
/// Webster uniform delay `0.5·C·(1−g/C)² / (1 − min(X, 0.98)·g/C)` where
/// `X = arrival_rate / (saturation_flow·g/C)`. When `X > 1` an oversaturation
/// surcharge of `0.5·(X−1)·interval_s` is added.
pub fn approach_wait(
    flow_veh_per_interval: f64,
    green_s: f64,
    cycle_length_s: f64,
    saturation_flow: f64,
    interval_s: f64,
) -> Result<f64> {
    if !(green_s > 0.0 && green_s.is_finite()) {
        return Err(Error::Domain(format!("green must be > 0, got {green_s}")));
    }
    if !(cycle_length_s > 0.0 && cycle_length_s.is_finite()) {
        return Err(Error::Domain(format!("cycle must be > 0, got {cycle_length_s}")));
    }
    if green_s > cycle_length_s + FEASIBILITY_TOL {
        return Err(Error::Domain(format!(
            "green {green_s} exceeds cycle {cycle_length_s}"
        )));
    }
    if !(saturation_flow > 0.0 && saturation_flow.is_finite()) {
        return Err(Error::Domain(format!(
            "saturation flow must be > 0, got {saturation_flow}"
        )));
    }
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(Error::Domain(format!("interval must be > 0, got {interval_s}")));
    }
    if !(flow_veh_per_interval >= 0.0 && flow_veh_per_interval.is_finite()) {
        return Err(Error::Domain(format!(
            "flow must be finite and >= 0, got {flow_veh_per_interval}"
        )));
    }
    let green_ratio = (green_s / cycle_length_s).min(1.0);
    let arrival_rate = flow_veh_per_interval / interval_s;
    let x = arrival_rate / (saturation_flow * green_ratio);
    let uniform = 0.5 * cycle_length_s * (1.0 - green_ratio).powi(2)
        / (1.0 - x.min(SATURATION_CLAMP) * green_ratio);
    let surcharge = if x > 1.0 { 0.5 * (x - 1.0) * interval_s } else { 0.0 };
    Ok(uniform + surcharge)
}

/// Mean of the per-approach waits, `W = (1/N)·Σ w_i`.
pub fn aggregate_wait(plan: &SignalPlan, demand: &Demand, spec: &IntersectionSpec) -> Result<f64> {
    if demand.flows.len() != spec.n() {
        return Err(Error::Dimension {
            what: "flows vs intersection approaches",
            expected: spec.n(),
            got: demand.flows.len(),
        });
    }
    ensure_feasible(plan, spec)?;
    Ok(unchecked_aggregate_wait(&plan.greens_s, demand, spec))
}

/// Hot-path variant for callers that already guarantee feasibility.
pub(crate) fn unchecked_aggregate_wait(greens: &[f64], demand: &Demand, spec: &IntersectionSpec) -> f64 {
    let sum: f64 = greens
        .iter()
        .zip(&demand.flows)
        .zip(&spec.approaches)
        .map(|((&g, &flow), a)| {
            approach_wait(flow, g, spec.cycle_length_s, a.saturation_flow, demand.interval_s)
                .unwrap_or(f64::INFINITY)
        })
        .sum();
    sum / spec.n() as f64
}

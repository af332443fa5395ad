//! Per-approach ARX flow model:
//! `λ(t) = α + Σ_k β_k·λ(t−k) + Σ_j γ_j·Z_j(t)`, fitted by (ridge) least squares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{ExogenousRecord, FlowObservation};
use crate::error::{Error, Result};

/// Ridge applied automatically when the unregularized design is rank deficient.
pub const FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionModel {
    pub approach_id: String,
    pub alpha: f64,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub exog_names: Vec<String>,
}

impl PredictionModel {
    pub fn new(approach_id: impl Into<String>, alpha: f64, beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let m = PredictionModel {
            approach_id: approach_id.into(),
            alpha,
            beta,
            gamma,
            exog_names: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::Domain(format!(
                "model `{}`: at least one lag coefficient required",
                self.approach_id
            )));
        }
        let finite = std::iter::once(&self.alpha)
            .chain(&self.beta)
            .chain(&self.gamma)
            .all(|c| c.is_finite());
        if !finite {
            return Err(Error::Domain(format!(
                "model `{}`: coefficients must be finite",
                self.approach_id
            )));
        }
        if !self.exog_names.is_empty() && self.exog_names.len() != self.q() {
            return Err(Error::Dimension {
                what: "exog_names vs gamma",
                expected: self.q(),
                got: self.exog_names.len(),
            });
        }
        Ok(())
    }

    /// Euclidean norm of the full coefficient vector `(α, β, γ)`.
    pub fn coefficient_norm(&self) -> f64 {
        std::iter::once(&self.alpha)
            .chain(&self.beta)
            .chain(&self.gamma)
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt()
    }

    fn linear(&self, recent: &[f64], z_now: &[f64]) -> f64 {
        let lags: f64 = self.beta.iter().zip(recent).map(|(b, l)| b * l).sum();
        let exog: f64 = self.gamma.iter().zip(z_now).map(|(g, z)| g * z).sum();
        self.alpha + lags + exog
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub residual_rmse: f64,
    pub n_samples: usize,
    pub condition_warning: bool,
}

/// One-step forecast. `recent` holds the last `p` flows, most recent first.
/// Negative linear values are clamped to zero.
pub fn forecast_one(model: &PredictionModel, recent: &[f64], z_now: &[f64]) -> Result<f64> {
    if recent.len() != model.p() {
        return Err(Error::Dimension {
            what: "recent flows vs lag count p",
            expected: model.p(),
            got: recent.len(),
        });
    }
    if z_now.len() != model.q() {
        return Err(Error::Dimension {
            what: "exogenous values vs q",
            expected: model.q(),
            got: z_now.len(),
        });
    }
    Ok(model.linear(recent, z_now).max(0.0))
}

/// Recursive multi-step forecast: each forecast is fed back as the newest lag.
pub fn forecast_horizon(
    model: &PredictionModel,
    recent: &[f64],
    exog_future: &[Vec<f64>],
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Domain("forecast horizon must be at least one step".into()));
    }
    if exog_future.len() != steps {
        return Err(Error::Dimension {
            what: "exogenous future vs steps",
            expected: steps,
            got: exog_future.len(),
        });
    }
    let mut lags = recent.to_vec();
    let mut out = Vec::with_capacity(steps);
    for z in exog_future {
        let next = forecast_one(model, &lags, z)?;
        out.push(next);
        lags.rotate_right(1);
        lags[0] = next;
    }
    Ok(out)
}

/// Fits one approach's model on a time-ordered, gap-free history.
///
/// Minimizes `Σ (λ(t) − α − Σβ_k λ(t−k) − Σγ_j Z_j(t))² + ridge·‖(α,β,γ)‖²`.
/// A rank-deficient design with `ridge == 0` sets `condition_warning` and is
/// refitted with [`FALLBACK_RIDGE`].
pub fn fit(
    history: &[FlowObservation],
    exog: &[ExogenousRecord],
    p: usize,
    q: usize,
    ridge: f64,
) -> Result<(PredictionModel, FitReport)> {
    if p == 0 {
        return Err(Error::Domain("lag count p must be >= 1".into()));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Domain(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let needed = p + q + 5;
    if history.len() < needed {
        return Err(Error::InsufficientHistory {
            needed,
            got: history.len(),
        });
    }
    let approach_id = history[0].approach_id.clone();
    for w in history.windows(2) {
        if w[1].approach_id != approach_id {
            return Err(Error::Domain(format!(
                "history mixes approaches `{}` and `{}`",
                approach_id, w[1].approach_id
            )));
        }
        if w[1].t != w[0].t + 1 {
            return Err(Error::Domain(format!(
                "history must be contiguous and time-ordered; t={} follows t={}",
                w[1].t, w[0].t
            )));
        }
    }
    if let Some(bad) = history.iter().find(|o| !(o.flow_veh_per_interval >= 0.0)) {
        return Err(Error::Domain(format!("negative or NaN flow at t={}", bad.t)));
    }

    let mut z_by_t: BTreeMap<i64, &[f64]> = BTreeMap::new();
    for r in exog {
        if r.values.len() != q {
            return Err(Error::MisalignedExog(format!(
                "record t={} has {} values, expected q={q}",
                r.t,
                r.values.len()
            )));
        }
        z_by_t.insert(r.t, &r.values);
    }

    let k = 1 + p + q;
    let mut rows = Vec::with_capacity(history.len() - p);
    let mut y = Vec::with_capacity(history.len() - p);
    for idx in p..history.len() {
        let t = history[idx].t;
        let mut row = Vec::with_capacity(k);
        row.push(1.0);
        row.extend((1..=p).map(|lag| history[idx - lag].flow_veh_per_interval));
        if q > 0 {
            let z = z_by_t
                .get(&t)
                .ok_or_else(|| Error::MisalignedExog(format!("no exogenous record for t={t}")))?;
            row.extend_from_slice(z);
        }
        rows.push(row);
        y.push(history[idx].flow_veh_per_interval);
    }

    let (theta, warning) = match ridge_least_squares(&rows, &y, ridge) {
        Some(theta) => (theta, false),
        None => {
            let theta = ridge_least_squares(&rows, &y, ridge.max(FALLBACK_RIDGE))
                .ok_or_else(|| Error::Domain("least squares failed even with ridge fallback".into()))?;
            (theta, true)
        }
    };

    let sse: f64 = rows
        .iter()
        .zip(&y)
        .map(|(row, yi)| {
            let pred: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
            (yi - pred).powi(2)
        })
        .sum();
    let model = PredictionModel {
        approach_id,
        alpha: theta[0],
        beta: theta[1..=p].to_vec(),
        gamma: theta[p + 1..].to_vec(),
        exog_names: Vec::new(),
    };
    let report = FitReport {
        residual_rmse: (sse / y.len() as f64).sqrt(),
        n_samples: y.len(),
        condition_warning: warning,
    };
    Ok((model, report))
}

/// Solves `min ‖Aθ − y‖² + ridge·‖θ‖²` with Householder QR on the stacked
/// system `[A; √ridge·I]`. Returns `None` when the system is rank deficient.
fn ridge_least_squares(rows: &[Vec<f64>], y: &[f64], ridge: f64) -> Option<Vec<f64>> {
    let k = rows.first()?.len();
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let mut b: Vec<f64> = y.to_vec();
    if ridge > 0.0 {
        let r = ridge.sqrt();
        for j in 0..k {
            let mut row = vec![0.0; k];
            row[j] = r;
            a.push(row);
            b.push(0.0);
        }
    }
    let m = a.len();
    if m < k {
        return None;
    }
    let col_norm_max = (0..k)
        .map(|j| a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if col_norm_max == 0.0 {
        return None;
    }

    for j in 0..k {
        let norm = (j..m).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt();
        if norm <= 1e-12 * col_norm_max {
            return None;
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| a[i][j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in j..k {
            let dot: f64 = (j..m).map(|i| v[i - j] * a[i][c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                a[i][c] -= f * v[i - j];
            }
        }
        let dot: f64 = (j..m).map(|i| v[i - j] * b[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in j..m {
            b[i] -= f * v[i - j];
        }
    }

    let mut theta = vec![0.0; k];
    for j in (0..k).rev() {
        let s: f64 = (j + 1..k).map(|c| a[j][c] * theta[c]).sum();
        theta[j] = (b[j] - s) / a[j][j];
    }
    theta.iter().all(|t| t.is_finite()).then_some(theta)
}

/// On-disk model collection: a TOML document with one `[[model]]` table per approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(rename = "model")]
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub approach_id: String,
    pub p: usize,
    pub q: usize,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub exog_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<FitReport>,
}

impl ModelEntry {
    pub fn from_model(m: &PredictionModel, report: Option<FitReport>) -> Self {
        ModelEntry {
            approach_id: m.approach_id.clone(),
            p: m.p(),
            q: m.q(),
            alpha: m.alpha,
            beta: m.beta.clone(),
            gamma: m.gamma.clone(),
            exog_names: m.exog_names.clone(),
            report,
        }
    }

    pub fn into_model(self) -> Result<PredictionModel> {
        if self.beta.len() != self.p {
            return Err(Error::Dimension {
                what: "beta length vs p",
                expected: self.p,
                got: self.beta.len(),
            });
        }
        if self.gamma.len() != self.q {
            return Err(Error::Dimension {
                what: "gamma length vs q",
                expected: self.q,
                got: self.gamma.len(),
            });
        }
        let m = PredictionModel {
            approach_id: self.approach_id,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            exog_names: self.exog_names,
        };
        m.validate()?;
        Ok(m)
    }
}

impl ModelDocument {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model document serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("model", e.to_string()))
    }

    pub fn into_models(self) -> Result<Vec<PredictionModel>> {
        self.models.into_iter().map(ModelEntry::into_model).collect()
    }
}

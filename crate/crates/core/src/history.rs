//! Flow history CSV: `t,approach_id,flow,<z_1>,...,<z_q>`.
//!
//! Exogenous columns are shared by all approaches; the first row seen for a
//! given `t` defines its values.

use std::collections::BTreeMap;
use std::io::Read;

use crate::domain::{ExogenousRecord, FlowObservation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowHistory {
    pub exog_names: Vec<String>,
    /// Approaches in order of first appearance, each with a time-ordered series.
    pub series: Vec<(String, Vec<FlowObservation>)>,
    pub exog: Vec<ExogenousRecord>,
}

pub fn read_history_csv<R: Read>(input: R, expected_q: Option<usize>) -> Result<FlowHistory> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "t" || cols[1] != "approach_id" || cols[2] != "flow" {
        return Err(Error::config(
            "history.header",
            format!("expected columns t,approach_id,flow,z_1..z_q; got {}", cols.join(",")),
        ));
    }
    let exog_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    if let Some(q) = expected_q {
        if q != exog_names.len() {
            return Err(Error::config(
                "history.header",
                format!("expected q={q} exogenous columns, found {}", exog_names.len()),
            ));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_approach: BTreeMap<String, Vec<FlowObservation>> = BTreeMap::new();
    let mut exog: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let t: i64 = field(0)
            .parse()
            .map_err(|_| Error::config(format!("history[{row}].t"), "not an integer"))?;
        let id = field(1).to_string();
        let flow: f64 = field(2)
            .parse()
            .map_err(|_| Error::config(format!("history[{row}].flow"), "not a number"))?;
        let z = (3..cols.len())
            .map(|i| {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("history[{row}].{}", cols[i]), "not a number"))
            })
            .collect::<Result<Vec<_>>>()?;
        exog.entry(t).or_insert(z);
        if !by_approach.contains_key(&id) {
            order.push(id.clone());
        }
        by_approach.entry(id.clone()).or_default().push(FlowObservation {
            approach_id: id,
            t,
            flow_veh_per_interval: flow,
        });
    }

    let series = order
        .into_iter()
        .map(|id| {
            let mut s = by_approach.remove(&id).unwrap_or_default();
            s.sort_by_key(|o| o.t);
            (id, s)
        })
        .collect();
    Ok(FlowHistory {
        exog_names,
        series,
        exog: exog
            .into_iter()
            .map(|(t, values)| ExogenousRecord { t, values })
            .collect(),
    })
}

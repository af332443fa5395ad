//! Adaptive traffic signal timing.
//!
//! Flow forecasts from per-approach ARX models feed a simulated-annealing
//! search over green splits; plans are evaluated on a point-queue
//! microsimulator and can be driven through an in-process message bus.
//!
//! ```
//! use trafficopt::domain::{Demand, IntersectionSpec};
//! use trafficopt::optimizer::{anneal, AnnealSchedule};
//!
//! let spec = IntersectionSpec::symmetric(2, 0.5, 60.0, 4.0, 7.0, 49.0).unwrap();
//! let demand = Demand::per_5min(vec![60.0, 40.0]);
//! let res = anneal(&spec.uniform_plan(), &demand, &spec, &AnnealSchedule::default()).unwrap();
//! assert!(res.best_plan.greens_s[0] > res.best_plan.greens_s[1]);
//! ```

pub mod bus;
pub mod controller;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod history;
pub mod microsim;
pub mod optimizer;
pub mod par;
pub mod prediction;
pub mod scenario;

pub use error::{Error, Result};

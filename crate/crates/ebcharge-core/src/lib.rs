//! Simulation and learning for electric bus charging schedules.
//!
//! One bus alternates charging periods at a terminal station with operating
//! periods on its route, over a day of replayed electricity prices. On top of
//! the simulator sit a hierarchical double-Q learner (a high-level policy that
//! prescribes charging targets per charging period and a low-level policy that
//! sets per-step charging power), four flat/ablated baselines, and an exact
//! tabular dynamic-programming oracle that verifies on miniature instances
//! that the superimposed hierarchical optimum matches the flat optimum.

pub mod agents;
pub mod config;
pub mod env;
pub mod error;
pub mod oracle;
pub mod prices;
pub mod qnet;
pub mod replay;
pub mod schedule;
pub mod trace;

pub use error::{Error, Result};

//! Distributed identification of linear input-output maps over a
//! communication graph, with a LinDistFlow feeder case study.

pub mod cli;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod graph;
pub mod netsim;
pub mod oracle;
pub mod powerflow;
pub mod solver;

pub use error::{Error, Result};

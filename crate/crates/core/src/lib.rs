//! Multi-horizon customer lifetime value model: hypergraph-enhanced,
//! temporally encoded, mixture-of-experts.

pub mod config;
pub mod error;
pub mod experts;
pub mod featurizer;
pub mod hypergraph;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod record;
pub mod runner;
pub mod synthdata;
pub mod temporal;

pub use config::{Ablation, LossMode, RunConfig};
pub use error::{Error, Result};
pub use record::{Task, UserRecord, HORIZONS};

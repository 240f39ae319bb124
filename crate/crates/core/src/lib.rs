//! Warehouse pick-and-place benchmark: scenes, tasks, oracle planning,
//! perception, policy evaluation and dataset emission.

pub mod canon;
pub mod dataset;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod pair_select;
pub mod perception;
pub mod rng;
pub mod scene_gen;
pub mod tasks;
pub mod warehouse;

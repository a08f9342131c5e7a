//! Cluster-level exploration planning.
//!
//! The pipeline: a novelty generator proposes unseen interest clusters for a
//! cohort key, implicit feedback on served clusters is aggregated into labels,
//! an alignment scorer is trained on those labels, and best-of-n selection
//! materializes a key → clusters table that the serving path looks up.

pub mod alignment;
pub mod codec;
pub mod evals;
pub mod feedback;
pub mod novelty;
pub mod planner;
pub mod rng;
pub mod serving;
pub mod simulator;
pub mod taxonomy;

pub use taxonomy::{canonicalize, enumerate_keys, ClusterId, HistoryKey, Taxonomy};

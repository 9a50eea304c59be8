//! Scoring, verification, GRPO simulation and evaluation for table
//! reasoning traces that cite individual cells.

pub mod config;
pub mod grpo;
pub mod harness;
pub mod rewards;
pub mod scoring;
pub mod tables;
pub mod text;
pub mod traces;

pub use rewards::{RewardBreakdown, RewardWeights};
pub use scoring::{EntailmentScorer, LexicalScorer};
pub use tables::{CellRef, Table};
pub use traces::{ParseOutcome, Trace};

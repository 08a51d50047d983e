//! Semantic embedding model for query-title relevance, trained from
//! pairwise judgments mined out of search click logs.
//!
//! The pipeline: [`click_sim`] produces logs, [`log_model`] parses and
//! classifies them, [`judgments`] turns sessions into preference pairs,
//! [`train`] fits a [`model::SemModel`], and [`evaluation`] measures
//! pairwise precision per strategy.

pub mod click_sim;
pub mod error;
pub mod evaluation;
pub mod judgments;
pub mod log_model;
pub mod model;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use judgments::{CtrInputs, CtrParams, PairwiseJudgment, Source, Strategy};
pub use log_model::{CtrTable, ResultLabel, ResultRecord, SearchSession, TokenSeq};
pub use model::SemModel;
pub use train::{TrainStats, TrainingConfig};

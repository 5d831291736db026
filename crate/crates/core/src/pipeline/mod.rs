//! Corpus, features, training and reports.

pub mod corpus;
pub mod dataset;
pub mod manifest;
pub mod reports;
pub mod segments;
pub mod train;

pub use dataset::{Dataset, Wanted};
pub use manifest::{Manifest, Record, Split};
pub use train::{train_stage1, train_stage2, EpochReport, Stage1Output, Stage2Output, TrainReport};

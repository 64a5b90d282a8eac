//! Confidence calibration toolkit for black-box incident root-cause predictors.
//!
//! The pipeline: ingest an incident corpus, retrieve similar historical
//! incidents under a token budget, score each (incident, predicted root cause)
//! pair with a two-phase LLM procedure (an evidence-sufficiency vote followed
//! by a scaled quality rating), derive correctness labels, fit a threshold
//! calibration model on a validation split, and evaluate calibration with ECE
//! and reliability reports. A seeded simulator (`simbench`) exercises the full
//! pipeline without network access.

pub mod calib;
pub mod corpus;
pub mod gateway;
pub mod labels;
pub mod report;
pub mod retrieval;
pub mod scoring;
pub mod simbench;

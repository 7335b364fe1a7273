//! Post-processing of posteriors into segments and DER/SAD scoring.

pub mod der;
pub mod segments;

pub use der::{der_score, DerReport, DEFAULT_COLLAR_S};
pub use segments::{labels_to_hypothesis, posterior_to_segments, DiarizationHypothesis, Segment, DEFAULT_MEDIAN, DEFAULT_THRESHOLD};

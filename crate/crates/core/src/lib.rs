//! Toy reproduction of hallucination-aware alignment for video captioning.

pub mod corpus;
pub mod gradcheck;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod augment;
pub mod losses;
pub mod train;
#[cfg(feature = "cli")]
pub mod cli;

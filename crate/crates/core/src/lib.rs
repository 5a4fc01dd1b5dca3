//! Cross-site readmission risk modeling on claims data: synthetic site
//! generation, cohort construction, featurization, a hand-differentiated
//! sequence model, local training and soft-label transfer between sites.

pub mod claims;
pub mod cohort;
pub mod error;
pub mod features;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod synth;
pub mod transfer;

pub use error::{Error, ErrorClass, Result};

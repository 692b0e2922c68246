//! Aligned grayscale modality (AGM) learning for visible–infrared person
//! re-identification.
//!
//! The pipeline projects both modalities into a shared grayscale image space
//! (luminance conversion for visible images, a learned translation for
//! infrared images), trains a two-stream network over global and
//! head-shoulder inputs with synchronous-learning losses, and evaluates
//! cross-modality retrieval with CMC, mAP and mINP.

pub mod backbone;
pub mod ckpt;
pub mod datapipe;
pub mod error;
pub mod ganstyle;
pub mod harness;
pub mod imaging;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seed;

pub use error::{AgmError, Result};

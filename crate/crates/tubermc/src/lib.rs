//! Weakly-supervised spatio-temporal video grounding on synthetic clips.
//!
//! The crate generates toy videos of moving colored shapes with templated
//! captions, grounds captions frame-by-frame with a pluggable (noisy) oracle
//! grounder, refines the frame-wise results into a spatio-temporal tube with a
//! small transformer stack, and trains the whole thing without tube labels by
//! reconstructing masked caption tokens conditioned on Gaussian tube masks,
//! with contrastive and mutual-constraint objectives on top.
//!
//! Entry points:
//! - [`synth`]: clip generation and dataset files
//! - [`grounder`]: frame-wise grounding oracle and the zero-shot baseline
//! - [`model`]: the trainable spatio-temporal model
//! - [`train`] / [`eval`]: training loop and metric evaluation
//! - [`metrics`]: vIoU / tIoU / sIoU
//! - [`oracle`]: independent naive re-implementations used for verification

pub mod caption;
pub mod error;
pub mod eval;
pub mod geom;
pub mod graph;
pub mod grounder;
pub mod losses;
pub mod manifest;
pub mod masking;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod report;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

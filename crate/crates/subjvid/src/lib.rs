//! File formats, experiment harness and CLI around `subjvid-core`.
//!
//! Run layout:
//!
//! ```text
//! runs/<name>/frames/<tag>/frame_000.png ...
//! runs/<name>/latents/<tag>.svta
//! runs/<name>/logs/...
//! runs/<name>/metrics.csv
//! ```

pub mod ablation;
pub mod archive;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod images;
pub mod pipeline;
pub mod stats;
pub mod timing;

pub use error::{HarnessError, Result};

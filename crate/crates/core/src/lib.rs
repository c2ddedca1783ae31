//! Lung CT lesion segmentation pipeline.
//!
//! The crate covers the whole path from raw Hounsfield-unit volumes to
//! evaluated predictions:
//!
//! * [`volume_io`] loads and writes the raw bundle format and synthesizes
//!   phantom volumes with lung and lesion annotations.
//! * [`preprocess`] resizes, windows and stacks slides into 320x320x2 samples
//!   and builds class-balanced splits.
//! * [`unet`] is a 4-level encoder/decoder with its own forward and backward
//!   passes and a versioned weight file.
//! * [`training`] runs seeded minibatch training with early stopping and the
//!   continue-training (transfer) protocol.
//! * [`evaluation`] thresholds predictions, computes per-slide and pooled
//!   metrics, and scans annotations for impossible lesion marks.
//! * [`reconstruct3d`] exports `x,y,z,value` point clouds for table-to-points
//!   viewers.

pub mod error;
pub mod evaluation;
mod par;
pub mod preprocess;
pub mod reconstruct3d;
pub mod training;
pub mod unet;
pub mod volume_io;

pub use error::{Error, Result};
pub use evaluation::{ConfusionCounts, F1Formula, Metrics, MetricsReport, QaIssue, QaKind, Roi};
pub use preprocess::{DatasetSplit, SlideSample, SAMPLE_SIZE};
pub use reconstruct3d::{PointCloud, PointKind, PointRow};
pub use training::{Hyperparams, OptimizerKind, StopReason, TrainHistory};
pub use unet::{ModelState, UNetConfig};
pub use volume_io::{CtVolume, PhantomSpec, SliceStack};

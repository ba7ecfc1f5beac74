//! Training-free one-shot part segmentation from a single annotated example.
//!
//! The pipeline fuses two per-pixel feature maps, selects a channel subset per
//! part on the annotated example, transfers labels to the query by
//! similarity-weighted voting, and refines the upsampled scores with an
//! edge-aware bilateral solver.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod pipeline;
pub mod refine;
pub mod selection;
pub mod synth;
pub mod tensor_io;
pub mod transfer;

pub use error::{Error, Result};
pub use fusion::{fuse, FusedFeature, Span};
pub use pipeline::{segment_query, PipelineConfig, Reference, SegmentOutput};
pub use selection::{Metric, SelectionConfig};
pub use tensor_io::{FeatureMap, ImageRgb, PartMaskSet, Plane, SelectionRecord, Source};
pub use transfer::{LabelMap, ScoreField, TransferConfig};

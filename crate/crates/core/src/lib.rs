//! Graph mixer network for asynchronous event-camera segmentation.
//!
//! The pipeline runs from raw events to per-event class predictions:
//!
//! 1. [`event`] parses and windows event streams; [`synth`] generates
//!    labelled scenes.
//! 2. [`graph`] normalizes a window into a spatiotemporal graph; [`knn`]
//!    and [`fps`] build the neighbourhood maps and subsampling.
//! 3. [`tape`], [`nn`] and [`optim`] form a small differentiable kernel.
//! 4. [`model`] assembles CCM mixer blocks, transitions and the U-shaped
//!    encoder-decoder.
//! 5. [`train`], [`metrics`], [`ablation`] and [`bench`] train, score and
//!    time models.

pub mod ablation;
pub mod bench;
pub mod checkpoint;
pub mod csr;
pub mod error;
pub mod event;
pub mod fps;
pub mod graph;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{ErrorKind, GmnnError, Result};
pub use event::{Event, EventWindow, Polarity, SensorGeometry, WindowSpec};
pub use graph::{build_graph, EventGraph};
pub use model::{ModelConfig, ModelParams};
pub use tensor::{Matrix, Scalar};

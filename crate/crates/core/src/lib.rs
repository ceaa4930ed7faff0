//! Meta-dispatched object detection at desk scale.
//!
//! A frozen depthwise-separable extractor produces one feature map per frame.
//! A small situation classifier decides whether to stop, locate distant
//! objects on a coarse grid, or regress a box around a single close object.
//! Around that core sit a synthetic scene generator, training and evaluation
//! loops, a binary checkpoint format, and a simulated robot that requests
//! detections over a framed byte protocol.

pub mod acquisition;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scenegen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// The one generator type used for every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

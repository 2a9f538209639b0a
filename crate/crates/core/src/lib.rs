//! Incremental object detection with decoupled dual prompt pools and
//! prototype-guided pseudo-labels, at a scale that trains in seconds.

pub mod ablation;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod oracle;
pub mod pools;
pub mod selfcheck;
pub mod ppg;
pub mod world;

pub use boxes::BBox;
pub use detector::{Detection, GtObject, ToyImage};
pub use error::{PdpError, Result};
pub use matching::{hungarian, Assignment};
pub use model::{Model, ModelShape, ObjectiveConfig};
pub use numcore::Tensor;

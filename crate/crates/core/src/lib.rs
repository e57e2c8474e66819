//! Speaker diarization by proposing speech segments directly on a
//! time-frequency map, classifying and refining them, and clustering their
//! embeddings.

pub mod anchors;
pub mod features;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod proposals;
pub mod scoring;
pub mod simulate;
pub mod tensor;

pub use anchors::Interval;
pub use pipeline::{Annotation, Turn};
pub use tensor::{Graph, Tensor, Var};

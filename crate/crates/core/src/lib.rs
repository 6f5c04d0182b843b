//! End-to-end neural speaker diarization with encoder-decoder attractors,
//! regularised by a variational information bottleneck on frame embeddings
//! and attractors.

pub mod analysis_viz;
pub mod autodiff;
pub mod data_sim;
pub mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scoring;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{sample_standard_normal, SeededRng, Tensor};

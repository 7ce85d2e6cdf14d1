//! Visual spatial projector for vision-language models.
//!
//! Patch features from a vision encoder are reshaped to their 2-D grid, a
//! multi-scale pyramid (inward crops or adaptive pools) is reduced to a
//! handful of spatial tokens by full-cover convolutions, a cross-attention
//! stage injects detail from a finer stride-2 feature map, and two parallel
//! MLPs map spatial and patch features into the language model's embedding
//! space. Everything runs on a small dense tensor engine with reverse-mode
//! gradients, so each stage can be checked against finite differences.

pub mod bench;
pub mod config;
pub mod dfi;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod projector;
pub mod reference;
pub mod rng;
pub mod sfe;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vspf;

pub use config::{NormPlacement, ProjectorConfig, Variant};
pub use element::Element;
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use projector::{Projector, ProjectorError, ProjectorOutput, TokenSequence};
pub use sfe::PatchGrid;
pub use tensor::Tensor;

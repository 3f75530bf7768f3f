//! Minimal tensor and autodiff engine the models and adapters are built on.

pub mod graph;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{BatchStats, Graph, NormKind, Var};
pub use optim::{Sgd, SgdConfig};
pub use params::{tags, ParamGroupTag, ParamId, ParamStore, TagSet};
pub use tensor::{log_softmax, softmax, Tensor};

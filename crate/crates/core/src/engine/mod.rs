//! Dense `f32` tensors with a tape-based reverse-mode engine.
//!
//! Only the primitives the supernet needs are provided: grouped and depthwise
//! convolution, batch normalization, ReLU, residual add, linear, pooling,
//! channel split/concat/shuffle, simulated quantization and softmax
//! cross-entropy, plus SGD with momentum.

mod bn;
mod conv;
mod graph;
mod ops;
mod optim;
mod params;
pub(crate) mod quant;
mod tape;
mod tensor;

pub use bn::{BnMode, BnStats, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use conv::{conv_out_size, ConvParams};
pub use graph::{Eager, Graph};
pub use ops::shuffle_destination;
pub use optim::{sgd_update, OptState, SgdConfig};
pub use params::{Extent, Param, ParamId, ParamStore, PrefixView};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

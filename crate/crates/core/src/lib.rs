pub mod autograd;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod image_io;
pub mod kca;
pub mod layers;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod oracle;
pub mod partial_conv;
pub mod rfr_module;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{ParamStore, Tape, Var};
pub use error::{Result, RfrError};
pub use net::{Architecture, NetConfig, RfrNet};
pub use partial_conv::MaskMap;
pub use rfr_module::{MergeMode, ReasoningConfig, RfrModule};
pub use tensor::{Precision, Shape, Tensor};

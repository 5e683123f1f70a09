//! Power-of-two weight quantization with quantization-aware training,
//! bit-exact shift-based MAC emulation and packed weight storage.

pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod par;
pub mod qat;
pub mod qinference;
pub mod quantizers;
pub mod shift_mac;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use qinference::{LayerWeights, QuantModel};
pub use quantizers::{PruneConfig, QuantScheme, QuantizedLayer};
pub use tensor::Tensor;

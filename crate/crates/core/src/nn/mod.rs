//! Trainable noise-prediction network with hand-written reverse-mode
//! gradients, the RAdam optimizer, SWA weight averaging, and the
//! checkpoint container.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{gamma_embedding, tensor_names, Denoiser, DenoiserConfig, ForwardCache};
pub use optim::{RAdam, RAdamConfig, SwaAccumulator};
pub use tensor::{Tensor, TensorSet};

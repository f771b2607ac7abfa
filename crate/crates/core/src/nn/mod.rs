//! Dense networks with hand-written reverse-mode gradients, sized for
//! policies and critics that fit in a unit test.

mod adam;
mod embed;
mod mlp;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use embed::{embed_time, TimeEmbedding};
pub use mlp::{mish, mish_grad, polyak, sigmoid, softplus, Activation, Mlp, Tape};
pub use tensor::Tensor2;

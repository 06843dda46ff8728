//! Dense matrices, a tape-based gradient engine, MLPs and optimizers.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{Activation, BoundMlp, Dense, Head, Mlp, Parameterized};
pub use optim::{clip_global_norm, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{GradNode, Gradients, Tape, Var};
pub use tensor::{dot, log_softmax, softmax, Tensor2};

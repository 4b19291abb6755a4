//! Dense linear algebra, activations, losses, optimizers and a central-difference
//! gradient checker. Gradients elsewhere in the crate are derived by hand and
//! validated against [`finite_diff_check`].

mod activation;
mod gradcheck;
mod optim;
mod tensor;

pub use activation::{bce_loss, bce_mean, log_clamped, log_sigmoid, relu, relu_grad, sigmoid, sigmoid_clamped, PROB_EPS};
pub use gradcheck::finite_diff_check;
pub use optim::{Adam, AdamConfig, Optimizer};
pub use tensor::{concat, hadamard, Parameters, Tensor2};

//! Dense 4-D tensor engine with tape-based reverse-mode autodiff.
//!
//! Everything is laid out `(N, C, H, W)` row-major in a flat `f32` buffer.
//! Values are 32-bit; reductions accumulate in 64-bit so results are stable
//! enough for finite-difference verification. Forward passes are
//! deterministic: the same seed and inputs give bitwise-identical values on a
//! single thread.
//!
//! Ops are free functions that take the [`Tape`] they record onto. A tape
//! created with [`Tape::inference`] skips recording, which is how evaluation
//! and mapping run without autodiff overhead.

mod check;
mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_entries, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use ops::{
    add, avg_pool2d, batch_norm, bce_loss, channel_max, channel_mean, concat_channels, conv2d,
    dense, depthwise_conv2d, global_avg_pool, global_max_pool, max_pool2d, mul_broadcast,
    pointwise_conv2d, relu, sigmoid, sum_all, BCE_EPSILON,
};
pub use optim::{zero_grads, Adam, Optimizer, Sgd};
pub use param::{fan_in_uniform, he_uniform, Parameter};
pub use tape::Tape;
pub use tensor::{Shape, Tensor};

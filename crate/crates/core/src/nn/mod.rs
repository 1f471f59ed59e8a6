//! Minimal layer library with explicit forward/backward passes.
//!
//! Layers own their parameters as [`Param`]s (value plus accumulated
//! gradient). `forward` is pure and returns a cache; `backward` consumes
//! that cache, returns the input gradient and accumulates into the
//! parameter gradients. Arrays are stored `(rows, features)`.

mod activation;
mod attention;
mod init;
mod linear;
mod norm;
mod param;

pub use activation::{gelu, gelu_backward, gelu_grad};
pub use attention::{AttentionCache, MultiHeadSelfAttention};
pub use init::{trunc_normal, xavier_uniform};
pub use linear::Linear;
pub use norm::{BatchNorm, BatchNormCache, BatchStats, LayerNorm, LayerNormCache};
pub(crate) use param::join;
pub use param::{Param, ParamVisitor, Parameterized};

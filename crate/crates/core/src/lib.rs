//! Learned low-latency video compression built around the stochastic
//! temporal autoregressive transform
//! `x̂_t = h_μ(x̂_{t-1}, w_t) + h_σ(x̂_{t-1}, w_t) ⊙ g_v(v_t, w_t)`
//! and its specializations (TAT, SSF, STAT, STAT-SSF, with an optional
//! structured prior `p(w, v) = p(w) p(v | w)`).

pub mod checkpoint;
pub mod data;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod nn;
pub mod range_coder;
pub mod scale_space;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::{no_grad, Tensor, Var};

//! Coupled recurrent unit representation (CRUR) toolkit.
//!
//! Two recurrent streams, a large context state `S_t` and a small
//! structure state `p_t`, are coupled either openly (late fusion) or
//! closedly (each stream's gates read both). Words are predicted from
//! `f_t = mat(S_t) · u_t` with `u_t = σ(W_u p_t)`, a learned tensor-product
//! unbinding. The crate also carries exact Hadamard-role TPR binding,
//! beam-search decoding, teacher-forced and self-critical training, BLEU
//! and CIDEr-D style metrics, and a synthetic captioning corpus.

pub mod autodiff;
pub mod bilstm;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod session;
pub mod tensor;
pub mod tpr;
pub mod training;
pub mod vocab;

pub use autodiff::{Graph, Var};
pub use error::{CrurError, Result};
pub use tensor::Tensor;

//! Reference engine for multi-head latent attention decoding with a shared
//! prefix: naive, absorb and hybrid formulations over a paged KV cache, an
//! analytical cost model, and a continuous-batching simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod costmodel;
pub mod equivalence;
pub mod error;
pub mod hybrid;
pub mod kvcache;
pub mod mla;
pub mod numerics;
pub mod simbench;

pub use error::{Error, Result};

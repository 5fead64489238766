//! Non-exemplar class-incremental learning with a small vision transformer.
//!
//! The crate trains a ViT over a sequence of disjoint-class tasks without
//! keeping any raw sample from earlier tasks. Forgetting is countered by
//! weighted per-patch distillation against the previous model ([`pks`]) and
//! by synthesizing old-class embeddings from stored class centers plus
//! current-sample offsets ([`pr`]).

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod pks;
pub mod pr;
pub mod prototype;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};

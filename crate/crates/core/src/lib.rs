//! Knowledge-grounded dialogue generation with fast adaptation to unseen
//! knowledge graphs.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tape`]), GRU and
//! attention layers ([`layers`]), the knowledge-selecting generator
//! ([`model`]), an improved first-order MAML trainer ([`meta`]), DuConv-style
//! and synthetic corpora ([`duconv`], [`synth`]), dialogue metrics
//! ([`metrics`]) and the command-line front end ([`cli`]). See the
//! `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod config;
pub mod duconv;
pub mod error;
pub mod knowledge;
pub mod layers;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use params::{Grads, ParamStore};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

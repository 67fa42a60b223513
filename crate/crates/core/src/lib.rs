//! Joint speech translation and named-entity recognition workbench.
//!
//! Three decoder variants share one speech encoder:
//!
//! - **inline**: entity open/close tags are ordinary output tokens;
//! - **parallel**: a second head labels every emitted token with a category;
//! - **parallel_emb**: as parallel, with the previous tokens' category
//!   embeddings summed into the decoder input.
//!
//! The crate covers the synthetic task generator ([`data`]), the numerical
//! core ([`nncore`]), the models ([`model`]), training ([`train`]), offline
//! decoding ([`decode`]), wait-k simultaneous inference ([`simul`]), the
//! evaluation protocol ([`eval`]) and multi-seed comparisons ([`experiment`]).

pub mod data;
pub mod decode;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nncore;
pub mod par;
pub mod rng;
pub mod simul;
pub mod tagset;
pub mod train;

pub use model::{Model, ModelConfig, Variant};
pub use tagset::{AnnotatedText, NeCategory, NeSpan};

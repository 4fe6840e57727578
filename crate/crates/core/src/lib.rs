//! Desk-scale pipeline for text, video and audio conditioned generation of
//! discrete audio tokens.

pub mod ar;
pub mod audio;
pub mod conditioning;
pub mod error;
pub mod eval;
pub mod nar;
pub mod nn;
pub mod pipeline;
pub mod numeric;
pub mod synth;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};

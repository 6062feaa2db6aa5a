//! Tied multitask sequence-to-sequence toolkit.
//!
//! Implements attentional encoder-decoder models in four arrangements —
//! single-task, multitask, cascade/reconstruction, and triangle — together
//! with transitivity/invertibility attention regularizers, two-phase beam
//! decoding, and attention-based word discovery over unsegmented input.
//! Everything runs on a small float64 autodiff core, sized for desk-scale
//! corpora and exact gradient checking rather than GPU throughput.

pub mod attention;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod worddisc;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

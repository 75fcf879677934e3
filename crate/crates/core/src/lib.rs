//! Cross-modal patient/trial matching: criterion text encoder, taxonomy-guided
//! patient memory, attentional matcher, training and evaluation.

pub mod corpus;
pub mod ec_encoder;
pub mod ec_parser;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod matcher;
pub mod memory;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod taxonomy;
pub mod tensor;
pub mod text_encoder;
pub mod training;

pub use error::{Error, ErrorKind, Result};

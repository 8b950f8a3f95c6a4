pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod knowledge;
pub mod lexicon;
pub mod promptgen;
pub mod substrate;
pub mod synthdata;
pub mod tagger;
pub mod trainer;

pub use error::{Error, Result};

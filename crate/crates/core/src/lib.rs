//! Transformer autoencoder for continuous gene-expression profiles, with the
//! downstream evaluation pipelines built on top of it: pan-cancer style
//! classification, survival prediction through restored anchor genes, and
//! missing-value imputation.

pub mod binning;
pub mod data;
pub mod downstream;
pub mod error;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod runconfig;
pub mod synth;
pub mod tensor;

pub use error::{GexError, Result};

//! Semi-supervised learning of Markov latent-state dialog models with joint
//! stochastic approximation.

pub mod dialog;
pub mod error;
pub mod eval;
pub mod mis;
pub mod oracle;
pub mod seqmodel;
pub mod synthdata;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{TokenId, TokenSeq, Vocab};

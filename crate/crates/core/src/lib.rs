//! Speaker counting on short single-channel audio: log-mel features, a
//! convolutional network with attention or average pooling over time, a
//! synthetic overlapped-speech corpus, evaluation and streaming inference.

pub mod attention;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/features.md")]
mod book_features {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/corpus.md")]
mod book_corpus {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attention.md")]
mod book_attention {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/streaming.md")]
mod book_streaming {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}

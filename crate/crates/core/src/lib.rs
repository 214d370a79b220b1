//! Direct speech-to-speech translation over discrete acoustic units.
//!
//! The pipeline runs audio through MFCC (or log-mel) features, learns a
//! k-means codebook per language, turns utterances into unit sequences, and
//! trains a Transformer encoder-decoder that maps source units to target
//! units. A continuous-feature encoder frontend is available as the
//! spectrogram-input baseline.
//!
//! ```text
//! audio -> features -> quantizer -> seqprep -> model/train -> eval
//! ```

pub mod ablation;
pub mod audio;
mod binio;
pub mod eval;
pub mod features;
pub mod model;
pub mod quantizer;
pub mod seqprep;
pub mod synth;
pub mod train;

pub use binio::FormatError;

//! Music auto-tagging with fully convolutional networks on mel-scaled
//! spectrograms.
//!
//! The crate is organised as a pipeline: [`audio`] turns waveforms into
//! time-frequency features, [`tensor`] provides reverse-mode autodiff,
//! [`layers`] and [`model`] assemble the network architectures, [`train`]
//! fits them with Adam on binary cross-entropy, [`eval`] scores tag
//! probabilities with ROC-AUC, and [`data`] handles manifests, label
//! vocabularies, and a synthetic benchmark corpus.

pub mod audio;
pub mod data;
pub mod eval;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

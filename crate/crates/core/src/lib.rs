//! An end-to-end trainable sequence labeler for aspect term extraction.
//!
//! The model stacks three stages: a bidirectional dependency-tree LSTM
//! ([`bidtree`]) that propagates information bottom-up and top-down over a
//! dependency parse, a sequential bidirectional LSTM ([`sequence`]) over the
//! tree outputs, and a linear-chain CRF ([`crf`]) over the projected
//! per-token scores. Training runs on a small reverse-mode automatic
//! differentiation engine ([`autodiff`]) that rebuilds a computation graph
//! per sentence, so arbitrary tree shapes differentiate exactly.
//!
//! [`corpus`] handles the column-format corpus files, vocabularies and
//! pretrained word vectors; [`spans`] turns BIO label sequences into aspect
//! spans and scores them; [`pipeline`] assembles models, trains with Adam +
//! gradient clipping + early stopping, predicts and (de)serializes.

pub mod autodiff;
pub mod bidtree;
pub mod corpus;
pub mod crf;
pub mod pipeline;
pub mod sequence;
pub mod spans;
pub mod synthetic;

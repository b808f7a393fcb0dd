//! Adversarial training toolkit for discrete sequence generators.
//!
//! The crate provides, on top of a small reverse-mode autodiff engine:
//!
//! - an autoregressive GRU generator (also reused as a language model),
//! - a masked convolutional discriminator whose pre-sigmoid logit serves as
//!   the reward, with spectral-norm and embedding-norm regularizers,
//! - four generator update rules: REINFORCE, Straight-Through,
//!   Gumbel-Softmax, and a variance-reduced estimator that spreads reward
//!   credit over all single-token substitutions via a first-order Taylor
//!   expansion of the reward in embedding space,
//! - an exact-enumeration oracle that checks estimator identities on tiny
//!   sequence spaces,
//! - BLEU / Self-BLEU / language-model metrics, and
//! - a training harness with a command-line front end.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod estimators;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod runlog;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vocab;

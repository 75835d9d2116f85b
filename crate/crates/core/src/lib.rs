//! Toolkit for detecting backdoored (Trojaned) image classifiers.
//!
//! The pipeline trains a population of small CNNs - half of them poisoned so
//! that a trigger pattern flips their prediction to an attacker-chosen target
//! class - and then decides, from the weights and a small clean probe set
//! alone, which models carry the backdoor:
//!
//! 1. [`attribution`] scores every penultimate-layer neuron by its mean
//!    attribution toward each candidate target class over clean probes
//!    (counterfactual attribution, via gradient-times-activation or
//!    integrated gradients).
//! 2. [`excitation`] ranks neurons per class and incrementally overwrites
//!    their activations with a large fixed value, recording class-wise
//!    accuracy curves. Backdoored models collapse sharply; benign ones
//!    degrade gradually.
//! 3. [`detector`] feeds the curves to a permutation-invariant temporal set
//!    encoder (shared 1-D conv encoder per curve, max-pool across classes)
//!    trained to output a Trojan score.
//!
//! Everything runs on a self-contained reverse-mode [`autodiff`] engine and a
//! procedural glyph dataset from [`datagen`], so the full experiment - zoo
//! generation, feature extraction, detector training, and evaluation - runs
//! on a laptop via the `trojan-scope` CLI (see [`harness`]).

pub mod attribution;
pub mod autodiff;
pub mod datagen;
pub mod detector;
pub mod error;
pub mod excitation;
pub mod harness;
pub mod metrics;
pub mod parallel;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;

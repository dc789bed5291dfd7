//! Class-curriculum scheduling laboratory.
//!
//! A ranking policy decides, step by step, which semantic classes a toy
//! segmentation learner sees pasted from the labelled source domain into the
//! unlabelled target domain. The policy reads a compressed view of the
//! learner's per-class status (Gaussian-mixture VAE encoder followed by a
//! grouped channel-pooling network) and is trained with an α-fair
//! policy gradient over per-class rewards built from class prototypes.

pub mod diffcore;
pub mod error;
pub mod harness;
pub mod par;
pub mod policy;
pub mod reward;
pub mod segenv;
pub mod skfen;
pub mod statecodec;

pub use error::{Error, Result};

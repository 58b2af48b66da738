//! Domain adaptation for binary text classification.
//!
//! A TF-IDF vectorizer feeds a small dense encoder with hand-derived
//! gradients; on top of it sit four adaptation strategies (adversarial
//! training through a gradient reversal layer, cluster alignment with a
//! teacher ensemble, cross-domain contrastive learning, and adversarial
//! training over cluster/topic-derived domains) together with the clustering,
//! topic-modeling, augmentation and decoding machinery they rely on.

pub mod adversarial;
pub mod augment;
pub mod cat;
pub mod cdcl;
pub mod clustering;
pub mod corpus;
pub mod error;
pub mod expcli;
pub mod matrix;
pub mod nnet;
pub mod rng;
pub mod topics;
pub mod training;

pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, Matrix};

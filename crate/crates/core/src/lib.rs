//! Generative image-representation models over local descriptors and their
//! Fisher-vector encoders.
//!
//! The crate covers the iid models (multinomial bag-of-words, mixture of
//! Gaussians) and their non-iid counterparts, where per-image parameters are
//! latent and integrated out: the multivariate Pólya model, LDA, and the
//! latent mixture of Gaussians. Where the log-likelihood is intractable the
//! encoders use the gradient of the variational free energy instead.
//!
//! Module map:
//!
//! - [`specfun`]: log-gamma and digamma.
//! - [`descriptors`]: descriptor sets, PCA, descriptor/dataset files.
//! - [`gmm`]: iid MoG vocabulary, posteriors, sufficient statistics.
//! - [`count_models`]: multinomial BoW and Pólya scores, Dirichlet fitting.
//! - [`topic_models`]: PLSA and variational LDA.
//! - [`latent_mog`]: latent MoG inference, learning and Fisher vectors.
//! - [`encoder`]: whitening, power and ℓ2 normalization, spatial pyramids.
//! - [`eval`]: linear SVMs, interpolated AP, bootstrap comparisons.
//! - [`study`]: joint PCA+MoG likelihoods and synthetic corpora.
//! - [`model_io`]: JSON model files.
//! - [`reduce`]: thread-count independent sums.

pub mod count_models;
pub mod descriptors;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod latent_mog;
pub mod model_io;
pub mod reduce;
pub mod specfun;
pub mod study;
pub mod topic_models;

pub use error::{Error, Result};

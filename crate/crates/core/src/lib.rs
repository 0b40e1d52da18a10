//! Unsupervised organization of image-crop embeddings: GMM (BIC-selected) and
//! DBSCAN clustering, 1D t-SNE similarity ordering scored by run coherence, and
//! optimal-matching evaluation against labels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dbscan;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gmm;
pub mod linalg;
pub mod neighbors;
pub mod ordering;
pub mod pipeline;
pub mod store;

pub use error::{Error, Result};

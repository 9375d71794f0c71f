//! Training-free diagnosis by retrieval over a labeled embedding library.
//!
//! Queries are classified by exact cosine search against a reference
//! library ([`index`]) and a similarity-weighted vote over the neighbors'
//! labels ([`diagnosis`]). Sites adapt the engine by appending their own
//! labeled embeddings ([`augment`]). Prediction confidence comes from the
//! agreement of an ensemble of perturbed libraries, with the reliability
//! threshold chosen by Youden's index ([`confidence`]). Large unlabeled
//! stores support similar-case lookup ([`retrieval`]).

pub mod augment;
pub mod catalog;
pub mod confidence;
pub mod diagnosis;
pub mod embedding;
pub mod error;
pub mod format;
pub mod index;
pub mod library;
pub mod manifest;
pub mod retrieval;

pub use catalog::{ClassId, LabelCatalog};
pub use embedding::{normalize, Embedding};
pub use error::{Error, Result};
pub use index::{build_index, Hit, RankedHits, VectorIndex};
pub use library::{LibrarySnapshot, Provenance, ReferenceItem};

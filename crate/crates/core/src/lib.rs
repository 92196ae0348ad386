//! Retrieval-based visual memory: labeled unit embeddings classified by
//! weighted nearest-neighbor voting, with exact unlearning, pruning,
//! hierarchical prediction and analysis tools.

pub mod analysis;
pub mod classify;
pub mod error;
pub mod fixture;
pub mod index;
pub mod ks;
pub mod pack;
pub mod prune;
pub mod queries;
pub mod search;
pub mod store;
pub mod taxonomy;
pub mod vector;

pub use classify::{classify, evaluate, Prediction, Scheme, VoteConfig};
pub use error::{Error, Result};
pub use index::AnnIndex;
pub use pack::Pack;
pub use queries::QuerySet;
pub use search::{exact_search, Neighbor, NeighborSet, Retriever};
pub use store::{MemoryEntry, VisualMemory};
pub use vector::{cosine_distance, normalize, Distance, EmbeddingVector, LabelId};

//! Retrieval evaluation: embeddings, ranking, AP, CMC and the kNN probe.

mod extract;
mod knn;
mod retrieval;

pub use extract::{
    embeddings_from_checkpoint, embeddings_to_checkpoint, extract_embeddings, load_embeddings, save_embeddings, Embedder,
    ExtractMode,
};
pub use knn::{knn_neighbors, knn_probe, KnnResult};
pub use retrieval::{average_precision, evaluate_reid, EmbeddingSet, EvalReport, QueryResult, RankedResult};

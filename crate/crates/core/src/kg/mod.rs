//! Legal knowledge graph: triple store, entity linking, TransE embeddings and
//! the entity-level similarity used in retrieval fusion.

mod graph;
mod linking;
mod similarity;
mod transe;

pub use graph::{parse_tsv, IngestReport, KnowledgeGraph, Triple, TripleIds};
pub use linking::{
    extract_triples_pattern, link_entities, CaseFold, EntityLink, EntityLinkSet, Gazetteer,
    GazetteerEntry, RelationPattern,
};
pub use similarity::{kg_similarity, kg_similarity_exact, linked_entities};
pub use transe::{
    hits_at_k, train_transe, transe_score, KgEmbeddings, TrainingReport, TransEConfig,
};

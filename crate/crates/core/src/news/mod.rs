//! The shared news encoder: title embedding `h` and signature entity
//! embedding `e` per article.

mod encoder;
mod memory;

pub use encoder::{NewsBatch, NewsEmbedding, NewsEncoder, Side, ENTITY_MEMORY, TOKEN_EMBEDDING};
pub use memory::{
    import_entity_embeddings, import_token_embeddings, read_embedding_file, EmbeddingImport,
    EntityMemory,
};

//! Graph collaborative filtering with knowledge-graph side information,
//! attention-aware propagation, and a guided diffusion model that denoises
//! the knowledge graph into a contrastive training view.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kg_embed;
pub mod model;
pub mod opt;
pub mod rwr;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

// Compile the guide's code samples as doc-tests so the book cannot drift
// from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(data, "../../../book/src/data.md");
    chapter!(attention, "../../../book/src/attention.md");
    chapter!(kg_embeddings, "../../../book/src/kg-embeddings.md");
    chapter!(diffusion, "../../../book/src/diffusion.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}

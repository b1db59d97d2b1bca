//! Input-aware multi-adapter serving for multilingual NER: an adapter pool,
//! retrieval-based language routing, few-shot prompt assembly and a grouped
//! batched low-rank forward pass.

pub mod adapter;
pub mod backend;
pub mod batch;
pub mod bench;
mod codec;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod linalg;
pub mod pipeline;
pub mod prompt;
pub mod router;
pub mod synth;

pub use adapter::{AdapterPool, LoraAdapter};
pub use encoder::{Encoder, EncoderSpec, TrigramEncoder};
pub use index::{CorpusSample, ExampleIndex, RetrievalConfig};
pub use pipeline::Pipeline;
pub use router::{route, RouterConfig, RoutingDecision};

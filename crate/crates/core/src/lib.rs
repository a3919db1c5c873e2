//! Attribute-annotated agent memory: annotation grammar, LLM-driven attribute
//! mining, a JSONL memory store with an attribute index, retrieval over
//! attributes or embeddings, and evaluation pipelines.

pub mod annotation;
pub mod augment;
pub mod backend;
pub mod eval;
pub mod prompts;
pub mod retrieval;
pub mod store;
pub mod synth;

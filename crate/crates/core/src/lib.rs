//! Coherent multimodal reasoning: decompose a query into grounded
//! sub-problems, answer them sequentially in context, score the resulting
//! chain's coherence, and refine until the score clears a threshold or the
//! iteration budget runs out.
//!
//! The pipeline is model-agnostic: everything runs against a [`backend`]
//! trait object, with a deterministic scripted implementation for tests
//! and an OpenAI-style HTTP client for real models.

pub mod backend;
pub mod cam;
pub mod chain;
pub mod cie;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod prompts;
pub mod rdu;
pub mod text;

//! ClearGate core: policy-enforced retrieval and expert routing.
//!
//! This crate is the engine behind the ClearGate gateway: an inference
//! pipeline in which *every* piece of content a caller can observe —
//! retrieved context, expert answers, even error shapes — has passed a
//! role-and-clearance check first. It is built around a simple claim that
//! the test suite proves rather than asserts: a response cannot leak a
//! document the requesting subject is not cleared to read, because no code
//! path ever brings unauthorized content and a response together.
//!
//! The moving parts, bottom to top:
//!
//! * [`policy`] — the five-level clearance lattice, hierarchical roles,
//!   and [`policy::PolicySnapshot`], the one place access decisions are
//!   made;
//! * [`embedding`] — deterministic signed feature-hashing embeddings
//!   (generic over the float type; [`Embedding`] is the `f64` form used
//!   everywhere);
//! * [`store`] — the document store with security-trimmed exact search,
//!   plus a score-everything-then-filter oracle route kept publicly
//!   callable so the equivalence stays testable;
//! * [`moe`] — the per-(role, clearance) expert grid with cumulative
//!   training sets and an authorization-masked softmax gate;
//! * [`orchestrator`] — request/response types, the augmented-prompt
//!   format, and the [`orchestrator::Generator`] seam with its
//!   deterministic echo implementation;
//! * [`audit`] — the append-only JSONL trail;
//! * [`engine`] — ties the above together: one audited decision per
//!   request, immutable policy snapshots swapped on reload.
//!
//! Scale target is a desk, not a cluster: corpora of hundreds of
//! documents, exact brute-force search, experts trained in milliseconds.
//! Everything is deterministic so that independent reimplementations of
//! the math (in the tests) can demand bit-for-bit agreement.

pub mod audit;
pub mod embedding;
pub mod engine;
pub mod moe;
pub mod orchestrator;
pub mod policy;
pub mod store;

/// The embedding type used across the system: 256 `f64` components.
/// The math itself is generic; see [`embedding::DenseEmbedding`].
pub type Embedding = embedding::DenseEmbedding<f64>;

pub use audit::{AuditEntry, AuditError, AuditLog};
pub use embedding::{cosine_similarity, embed_text, tokenize, EMBEDDING_DIM};
pub use engine::{Engine, EngineConfig, EngineError, IngestOutcome};
pub use moe::{
    build_expert_grid, gate, train_experts, Expert, ExpertId, ExpertSet, GateDistribution,
    MoeError,
};
pub use orchestrator::{
    ConsultedExpert, EchoGenerator, Generator, InferenceMode, InferenceRequest,
    InferenceResponse,
};
pub use policy::{
    AccessDecision, AccessReason, ClearanceLevel, CompiledPolicy, DocumentMeta, PolicyError,
    PolicyFile, PolicySnapshot, Role, User, ValidationReport,
};
pub use store::{CorpusRecord, Document, DocumentStore, SearchHit, StoreError};

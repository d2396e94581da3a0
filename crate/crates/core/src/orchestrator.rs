//! Inference request/response shapes and the generation seam.
//!
//! Three modes share one request type:
//!
//! * `rag` — retrieve, build an augmented prompt, hand it to the
//!   [`Generator`];
//! * `moe` — route the raw prompt through the expert gate, no retrieval,
//!   no generator;
//! * `hybrid` — retrieve, then route the augmented prompt through the
//!   experts (falling back to the raw prompt when retrieval returns
//!   nothing, so an empty context degrades exactly to `moe`).
//!
//! [`Generator`] is the single seam where a real language model would sit.
//! The default [`EchoGenerator`] is a pure function over the augmented
//! prompt: deterministic, trivially inspectable, and incapable of knowing
//! anything the retrieval layer did not hand it — which is the property the
//! leakage tests lean on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::token_snippet;
use crate::moe::SNIPPET_TOKENS;

pub const DEFAULT_RETRIEVAL_K: usize = 3;
pub const DEFAULT_TOP_K_EXPERTS: usize = 2;
/// Default gate temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    #[serde(rename = "rag")]
    Rag,
    #[serde(rename = "moe")]
    Moe,
    #[serde(rename = "hybrid")]
    Hybrid,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] =
        [InferenceMode::Rag, InferenceMode::Moe, InferenceMode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Rag => "rag",
            InferenceMode::Moe => "moe",
            InferenceMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InferenceMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown inference mode {s:?} (expected rag, moe, or hybrid)"))
    }
}

/// One inference call on behalf of a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub user_id: String,
    pub prompt: String,
    pub mode: InferenceMode,
    /// Retrieval depth for `rag`/`hybrid`.
    #[serde(default = "default_k")]
    pub k: usize,
    /// How many experts to consult for `moe`/`hybrid`.
    #[serde(default = "default_top_k_experts")]
    pub top_k_experts: usize,
}

fn default_k() -> usize {
    DEFAULT_RETRIEVAL_K
}

fn default_top_k_experts() -> usize {
    DEFAULT_TOP_K_EXPERTS
}

impl InferenceRequest {
    pub fn new(
        user_id: impl Into<String>,
        prompt: impl Into<String>,
        mode: InferenceMode,
    ) -> InferenceRequest {
        InferenceRequest {
            user_id: user_id.into(),
            prompt: prompt.into(),
            mode,
            k: DEFAULT_RETRIEVAL_K,
            top_k_experts: DEFAULT_TOP_K_EXPERTS,
        }
    }

    pub fn with_k(mut self, k: usize) -> InferenceRequest {
        self.k = k;
        self
    }

    pub fn with_top_k_experts(mut self, n: usize) -> InferenceRequest {
        self.top_k_experts = n;
        self
    }
}

/// An expert that contributed to a response, with its gate probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsultedExpert {
    pub expert: String,
    pub probability: f64,
}

/// The answer handed back to the caller. Everything in here has already
/// passed the policy checks for the requesting subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub text: String,
    /// Ids of retrieved context documents in rank order; empty for `moe`.
    pub retrieved_doc_ids: Vec<String>,
    /// Experts consulted (probability descending); empty for `rag`.
    pub consulted_experts: Vec<ConsultedExpert>,
    /// Version of the policy snapshot the request was evaluated under.
    pub policy_version: u64,
}

/// Where a language model would plug in. Implementations must be pure
/// functions of the augmented prompt: no retained state, no other inputs.
pub trait Generator: Send + Sync {
    fn generate(&self, augmented_prompt: &str) -> String;
}

/// Builds the fixed augmented-prompt layout:
///
/// ```text
/// CONTEXT:
/// [doc-id] doc text
/// [doc-id] doc text
/// QUESTION:
/// the prompt
/// ```
///
/// With no context documents the `CONTEXT:` block is present but empty.
pub fn augmented_prompt<'a, I>(context: I, prompt: &str) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut out = String::from("CONTEXT:\n");
    for (doc_id, text) in context {
        out.push('[');
        out.push_str(doc_id);
        out.push_str("] ");
        out.push_str(text);
        out.push('\n');
    }
    out.push_str("QUESTION:\n");
    out.push_str(prompt);
    out
}

/// Deterministic mock generator.
///
/// Answers `ANSWER(ctx=<n> docs): <payload>` where `n` counts the context
/// lines and the payload quotes the opening tokens of the first (i.e.
/// best-ranked) context document — or echoes the question verbatim when
/// there is no context.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl Generator for EchoGenerator {
    fn generate(&self, augmented_prompt: &str) -> String {
        let parsed = augmented_prompt
            .strip_prefix("CONTEXT:\n")
            .and_then(|rest| rest.split_once("QUESTION:\n"));
        let (count, payload) = match parsed {
            Some((context, question)) => {
                let lines: Vec<&str> = context.lines().filter(|l| !l.is_empty()).collect();
                match lines.first() {
                    Some(first) => {
                        // "[doc-id] text" -> text
                        let text = first.split_once("] ").map_or(*first, |(_, t)| t);
                        (lines.len(), token_snippet(text, SNIPPET_TOKENS))
                    }
                    None => (0, question.to_owned()),
                }
            }
            // Not in the expected shape: treat the whole input as the question.
            None => (0, augmented_prompt.to_owned()),
        };
        format!("ANSWER(ctx={count} docs): {payload}")
    }
}

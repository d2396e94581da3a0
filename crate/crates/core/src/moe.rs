//! Mixture-of-experts routing under access control.
//!
//! One expert exists for every (role, clearance) cell: four roles make a
//! 4 x 5 = 20 expert grid. An expert's training set is *cumulative* — it
//! holds every document granted to its role whose clearance its own level
//! dominates — so the "HR Secret" expert knows everything "HR Restricted"
//! knows, plus the Secret material.
//!
//! Experts here are deterministic stand-ins for fine-tuned models: each one
//! is the (re-normalized) centroid of its training embeddings plus the
//! training vocabulary. That keeps training instant and, more importantly,
//! *exactly reproducible*, which lets tests prove the security properties
//! (an expert literally contains nothing outside its training set).
//!
//! The gate never scores an expert the caller is not authorized to consult:
//! the authorized set is computed first and softmax runs only over it. That
//! is numerically identical to assigning unauthorized experts a score of
//! negative infinity, but structurally stronger — there is no code path on
//! which an unauthorized expert's similarity is even computed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_traits::Float;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{cosine_similarity, embed_text, mean_normalized, token_snippet, tokenize};
use crate::policy::{ClearanceLevel, DocumentMeta, PolicySnapshot};
use crate::store::DocumentStore;
use crate::Embedding;

/// Number of document tokens an expert quotes in a response.
pub const SNIPPET_TOKENS: usize = 30;

/// Identity of one grid cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertId {
    pub role: String,
    pub clearance: ClearanceLevel,
}

impl ExpertId {
    pub fn new(role: impl Into<String>, clearance: ClearanceLevel) -> ExpertId {
        ExpertId {
            role: role.into(),
            clearance,
        }
    }

    /// Display name: role id followed by the title-case clearance, e.g.
    /// `"HR Not Classified"` or `"NormalUser Cosmic Top Secret"`.
    pub fn canonical_name(&self) -> String {
        format!("{} {}", self.role, self.clearance.canonical_name())
    }

    /// Whether a document belongs in this cell's training set: granted to
    /// the cell's role, at a clearance the cell dominates.
    pub fn covers(&self, meta: &DocumentMeta) -> bool {
        meta.granted_roles.contains(&self.role) && self.clearance.dominates(meta.clearance)
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_name())
    }
}

/// A document as an expert saw it at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDoc {
    pub doc_id: String,
    pub text: String,
    pub embedding: Embedding,
}

/// A trained grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub id: ExpertId,
    /// Unit-length centroid of the training embeddings, or the zero vector
    /// for an expert with no training documents.
    pub centroid: Embedding,
    /// Union of all tokens across training documents. An expert's output
    /// can only ever quote from here — asserted by the leakage tests.
    pub vocabulary: BTreeSet<String>,
    /// Training documents in ascending id order.
    pub training_docs: Vec<TrainingDoc>,
}

impl Expert {
    pub fn is_trained(&self) -> bool {
        !self.training_docs.is_empty()
    }

    pub fn training_doc_ids(&self) -> Vec<String> {
        self.training_docs.iter().map(|d| d.doc_id.clone()).collect()
    }
}

/// The full grid, versioned so the engine can swap retrained sets
/// atomically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertSet {
    version: u64,
    experts: BTreeMap<ExpertId, Expert>,
}

impl ExpertSet {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> ExpertSet {
        self.version = version;
        self
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn get(&self, id: &ExpertId) -> Option<&Expert> {
        self.experts.get(id)
    }

    /// Experts in ascending (role, clearance) order.
    pub fn iter(&self) -> impl Iterator<Item = &Expert> {
        self.experts.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ExpertId> {
        self.experts.keys()
    }
}

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("no roles to build an expert grid from")]
    EmptyRoleSet,
    #[error("unknown role {0:?} in expert grid request")]
    DanglingRoleRef(String),
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("no experts are authorized and trained for this subject")]
    NoAuthorizedExperts,
    #[error("expert {0:?} has no training documents")]
    UntrainedExpert(String),
}

/// Enumerates the grid: every requested role crossed with all five
/// clearance levels, in ascending (role, clearance) order. Every role must
/// exist in the policy.
pub fn build_expert_grid(
    policy: &PolicySnapshot,
    roles: &BTreeSet<String>,
) -> Result<Vec<ExpertId>, MoeError> {
    if roles.is_empty() {
        return Err(MoeError::EmptyRoleSet);
    }
    for role in roles {
        if policy.role(role).is_none() {
            return Err(MoeError::DanglingRoleRef(role.clone()));
        }
    }
    let mut grid = Vec::with_capacity(roles.len() * ClearanceLevel::ALL.len());
    for role in roles {
        for level in ClearanceLevel::ALL {
            grid.push(ExpertId::new(role.clone(), level));
        }
    }
    Ok(grid)
}

/// Builds one expert for a grid cell from the current store contents.
/// Documents are visited in ascending id order (the store's iteration
/// order), so centroid accumulation is bit-for-bit reproducible.
fn train_cell(id: &ExpertId, store: &DocumentStore) -> Expert {
    let mut training_docs = Vec::new();
    let mut vocabulary = BTreeSet::new();
    for doc in store.documents() {
        if id.covers(&doc.meta) {
            vocabulary.extend(tokenize(&doc.text));
            training_docs.push(TrainingDoc {
                doc_id: doc.meta.id.clone(),
                text: doc.text.clone(),
                embedding: doc.embedding.clone(),
            });
        }
    }
    let centroid = mean_normalized(training_docs.iter().map(|d| &d.embedding));
    Expert {
        id: id.clone(),
        centroid,
        vocabulary,
        training_docs,
    }
}

/// Trains every cell in `grid` from scratch. The returned set has version 0;
/// the engine assigns real versions when it installs the set.
pub fn train_experts(grid: &[ExpertId], store: &DocumentStore) -> ExpertSet {
    let experts = grid
        .iter()
        .map(|id| (id.clone(), train_cell(id, store)))
        .collect();
    ExpertSet {
        version: 0,
        experts,
    }
}

/// Retrains exactly the cells whose training set the changed document
/// belongs to, carrying every other expert over untouched. Returns the new
/// set plus the ids that were retrained.
///
/// A retrained cell is rebuilt from the store with the same code path as
/// [`train_experts`], so the result is bitwise identical to a full
/// from-scratch training run — not merely close.
pub fn refit_incremental(
    current: &ExpertSet,
    changed: &DocumentMeta,
    store: &DocumentStore,
) -> (ExpertSet, BTreeSet<ExpertId>) {
    let mut experts = BTreeMap::new();
    let mut retrained = BTreeSet::new();
    for (id, expert) in &current.experts {
        if id.covers(changed) {
            experts.insert(id.clone(), train_cell(id, store));
            retrained.insert(id.clone());
        } else {
            experts.insert(id.clone(), expert.clone());
        }
    }
    (
        ExpertSet {
            version: current.version,
            experts,
        },
        retrained,
    )
}

/// Numerically stable softmax: subtracts the max logit before
/// exponentiating. Expects finite logits; the output sums to 1.
pub fn softmax<F: Float>(logits: &[F]) -> Vec<F> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |acc, &l| if l > acc { l } else { acc });
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |acc, &e| acc + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Routing probabilities over the experts a subject may consult, in
/// descending probability order (ties by ascending canonical name).
#[derive(Debug, Clone, PartialEq)]
pub struct GateDistribution {
    entries: Vec<(ExpertId, f64)>,
}

impl GateDistribution {
    /// All (expert, probability) pairs, highest probability first.
    pub fn entries(&self) -> &[(ExpertId, f64)] {
        &self.entries
    }

    pub fn probability(&self, id: &ExpertId) -> Option<f64> {
        self.entries
            .iter()
            .find(|(e, _)| e == id)
            .map(|(_, p)| *p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` most probable experts (all of them if `k` exceeds the
    /// authorized count).
    pub fn top_k(&self, k: usize) -> Vec<(ExpertId, f64)> {
        self.entries.iter().take(k).cloned().collect()
    }
}

/// Computes the routing distribution for a prompt.
///
/// Authorization comes first: the candidate set is every *trained* expert
/// (nonzero centroid) the policy lets `user_id` consult. Similarities are
/// computed only for those candidates, then softmax over
/// `similarity / temperature`. Unauthorized experts are absent from the
/// result rather than carrying probability zero.
pub fn gate(
    policy: &PolicySnapshot,
    user_id: &str,
    prompt: &str,
    experts: &ExpertSet,
    temperature: f64,
) -> Result<GateDistribution, MoeError> {
    assert!(
        temperature > 0.0 && temperature.is_finite(),
        "gate temperature must be positive and finite"
    );
    if tokenize(prompt).is_empty() {
        return Err(MoeError::EmptyPrompt);
    }

    let mut authorized: Vec<&Expert> = Vec::new();
    for expert in experts.iter() {
        if expert.centroid.is_zero() {
            continue;
        }
        let decision =
            policy.can_consult_expert(user_id, &expert.id.role, expert.id.clearance);
        if decision.allowed {
            authorized.push(expert);
        }
    }
    if authorized.is_empty() {
        return Err(MoeError::NoAuthorizedExperts);
    }

    let prompt_embedding = embed_text(prompt);
    let logits: Vec<f64> = authorized
        .iter()
        .map(|e| cosine_similarity(&prompt_embedding, &e.centroid) / temperature)
        .collect();
    let probs = softmax(&logits);

    let mut entries: Vec<(ExpertId, f64)> = authorized
        .into_iter()
        .zip(probs)
        .map(|(e, p)| (e.id.clone(), p))
        .collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("softmax probabilities are finite")
            .then_with(|| a.0.canonical_name().cmp(&b.0.canonical_name()))
    });
    Ok(GateDistribution { entries })
}

/// One expert's answer to a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertResponse {
    pub expert: ExpertId,
    pub text: String,
    /// The training document the answer quotes.
    pub source_doc_id: String,
}

/// Answers a prompt from an expert's own training set: picks the training
/// document most similar to the prompt (ties broken by ascending id) and
/// quotes its opening tokens in the fixed template
/// `"According to <doc_id>: <first 30 tokens>"`.
pub fn expert_respond(expert: &Expert, prompt: &str) -> Result<ExpertResponse, MoeError> {
    if !expert.is_trained() {
        return Err(MoeError::UntrainedExpert(expert.id.canonical_name()));
    }
    let prompt_embedding = embed_text(prompt);
    // training_docs is in ascending id order; strict greater-than keeps the
    // earliest (lowest id) document on exact score ties.
    let mut best: &TrainingDoc = &expert.training_docs[0];
    let mut best_score = cosine_similarity(&prompt_embedding, &best.embedding);
    for doc in &expert.training_docs[1..] {
        let score = cosine_similarity(&prompt_embedding, &doc.embedding);
        if score > best_score {
            best = doc;
            best_score = score;
        }
    }
    Ok(ExpertResponse {
        expert: expert.id.clone(),
        text: format!(
            "According to {}: {}",
            best.doc_id,
            token_snippet(&best.text, SNIPPET_TOKENS)
        ),
        source_doc_id: best.doc_id.clone(),
    })
}

/// The blended result of consulting several experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedResponse {
    pub text: String,
    /// The winning (highest-probability) expert whose text was chosen.
    pub source_expert: ExpertId,
    /// Every consulted expert with its gate probability, highest first
    /// (ties by ascending canonical name).
    pub provenance: Vec<(ExpertId, f64)>,
}

/// Selects the highest-probability response among the consulted experts.
/// Deterministic mixing: the winner's text is returned verbatim and the
/// full consulted set is reported as provenance.
///
/// Panics if `responses` is empty — callers consult at least one expert.
pub fn mix_responses(
    distribution: &GateDistribution,
    responses: &BTreeMap<ExpertId, ExpertResponse>,
) -> MixedResponse {
    let mut provenance: Vec<(ExpertId, f64)> = responses
        .keys()
        .map(|id| (id.clone(), distribution.probability(id).unwrap_or(0.0)))
        .collect();
    provenance.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("probabilities are finite")
            .then_with(|| a.0.canonical_name().cmp(&b.0.canonical_name()))
    });
    let (winner, _) = provenance
        .first()
        .expect("mix_responses requires at least one expert response")
        .clone();
    MixedResponse {
        text: responses[&winner].text.clone(),
        source_expert: winner,
        provenance,
    }
}

/// Export row describing one trained expert.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertRegistryEntry {
    pub role: String,
    pub clearance: ClearanceLevel,
    pub canonical_name: String,
    pub training_doc_ids: Vec<String>,
    pub vocabulary_size: usize,
}

/// Registry rows for every expert, in grid order.
pub fn registry(experts: &ExpertSet) -> Vec<ExpertRegistryEntry> {
    experts
        .iter()
        .map(|e| ExpertRegistryEntry {
            role: e.id.role.clone(),
            clearance: e.id.clearance,
            canonical_name: e.id.canonical_name(),
            training_doc_ids: e.training_doc_ids(),
            vocabulary_size: e.vocabulary.len(),
        })
        .collect()
}

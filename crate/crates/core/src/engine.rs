//! The inference engine: policy-checked retrieval and routing with a
//! mandatory audit trail.
//!
//! One [`Engine`] owns the live policy, the document store, the expert
//! grid, and the audit log. Request methods (`infer`, `ingest_document`,
//! `remove_document`, `fetch_document`, `train`, `reload_policy`) each
//! write exactly one audit line, for denials as much as for successes. If
//! the audit write fails, the request fails — an unauditable request is
//! not served.
//!
//! Policy and expert set live behind `RwLock<Arc<...>>`: readers clone the
//! `Arc` and drop the lock immediately, so every request runs against one
//! immutable snapshot while reloads swap in a replacement (with a bumped
//! version) atomically. Lock guards are never held across another lock's
//! acquisition except in the documented store -> experts order.
//!
//! Provisioning (initial corpus load and first training pass in
//! [`Engine::bootstrap`]) is not audited: the trail records requests made
//! *of* the running system, not its construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::audit::{AuditEntry, AuditError, AuditLog};
use crate::embedding::tokenize;
use crate::moe::{
    build_expert_grid, expert_respond, gate, mix_responses, refit_incremental, registry,
    train_experts, ExpertId, ExpertRegistryEntry, ExpertResponse, ExpertSet, MoeError,
};
use crate::orchestrator::{
    augmented_prompt, ConsultedExpert, Generator, InferenceMode, InferenceRequest,
    InferenceResponse, DEFAULT_TEMPERATURE,
};
use crate::policy::{CompiledPolicy, PolicyError, PolicyFile};
use crate::store::{CorpusRecord, DocumentStore, FetchOutcome, StoreError};

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    /// Gate temperature; must be positive and finite.
    pub temperature: f64,
}

impl Default for EngineConfig {
    fn default() -> EngineConfig {
        EngineConfig {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl EngineError {
    /// Short reason token recorded in audit lines for denials.
    pub fn deny_reason(&self) -> String {
        match self {
            EngineError::UnknownSubject(_) => "UnknownSubject".to_owned(),
            EngineError::EmptyPrompt => "EmptyPrompt".to_owned(),
            EngineError::InvalidRequest(_) => "InvalidRequest".to_owned(),
            EngineError::Policy(_) => "PolicyInvalid".to_owned(),
            EngineError::Store(e) => match e {
                StoreError::DuplicateId(_) => "DuplicateId".to_owned(),
                StoreError::DanglingRoleRef(_) => "DanglingRoleRef".to_owned(),
                StoreError::EmptyText => "EmptyText".to_owned(),
                StoreError::UnknownSubject(_) => "UnknownSubject".to_owned(),
                StoreError::NotFoundOrDenied => "NotFoundOrDenied".to_owned(),
                StoreError::NotFound(_) => "NotFound".to_owned(),
                StoreError::Io(_) | StoreError::CorpusParse { .. } => "StorageFailure".to_owned(),
            },
            EngineError::Moe(e) => match e {
                MoeError::EmptyRoleSet => "EmptyRoleSet".to_owned(),
                MoeError::DanglingRoleRef(_) => "DanglingRoleRef".to_owned(),
                MoeError::EmptyPrompt => "EmptyPrompt".to_owned(),
                MoeError::NoAuthorizedExperts => "NoAuthorizedExperts".to_owned(),
                MoeError::UntrainedExpert(_) => "UntrainedExpert".to_owned(),
            },
            EngineError::Audit(_) => "StorageFailure".to_owned(),
        }
    }
}

/// Result of an audited ingest: the stored id plus the experts that were
/// retrained because the new document falls in their cell.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub doc_id: String,
    pub retrained: BTreeSet<ExpertId>,
}

pub struct Engine {
    config: EngineConfig,
    policy: RwLock<Arc<CompiledPolicy>>,
    store: RwLock<DocumentStore>,
    experts: RwLock<Arc<ExpertSet>>,
    audit: AuditLog,
    generator: Box<dyn Generator>,
}

impl Engine {
    pub fn new(
        policy: CompiledPolicy,
        audit: AuditLog,
        generator: Box<dyn Generator>,
        config: EngineConfig,
    ) -> Engine {
        Engine {
            config,
            policy: RwLock::new(Arc::new(policy)),
            store: RwLock::new(DocumentStore::new()),
            experts: RwLock::new(Arc::new(ExpertSet::default())),
            audit,
            generator,
        }
    }

    /// Compiles the policy at version 1, loads the corpus, and trains the
    /// full expert grid. Provisioning work; writes no audit lines.
    pub fn bootstrap(
        policy_file: &PolicyFile,
        corpus: &[CorpusRecord],
        audit_path: impl AsRef<Path>,
        generator: Box<dyn Generator>,
        config: EngineConfig,
    ) -> Result<Engine, EngineError> {
        let compiled = policy_file.compile(1)?;
        let audit = AuditLog::open(audit_path.as_ref())?;

        let mut store = DocumentStore::new();
        for record in corpus {
            store.ingest(&compiled.snapshot, record.meta(), record.text.clone())?;
        }

        let roles: BTreeSet<String> = compiled.snapshot.role_ids().map(str::to_owned).collect();
        let experts = if roles.is_empty() {
            ExpertSet::default()
        } else {
            let grid = build_expert_grid(&compiled.snapshot, &roles)?;
            train_experts(&grid, &store).with_version(1)
        };

        Ok(Engine {
            config,
            policy: RwLock::new(Arc::new(compiled)),
            store: RwLock::new(store),
            experts: RwLock::new(Arc::new(experts)),
            audit,
            generator,
        })
    }

    /// The policy snapshot requests are currently evaluated under. Clones
    /// the `Arc` and releases the lock before returning.
    pub fn current_policy(&self) -> Arc<CompiledPolicy> {
        self.policy.read().expect("policy lock poisoned").clone()
    }

    pub fn current_experts(&self) -> Arc<ExpertSet> {
        self.experts.read().expect("experts lock poisoned").clone()
    }

    pub fn policy_version(&self) -> u64 {
        self.current_policy().snapshot.version()
    }

    pub fn expert_registry(&self) -> Vec<ExpertRegistryEntry> {
        registry(&self.current_experts())
    }

    pub fn document_count(&self) -> usize {
        self.store.read().expect("store lock poisoned").len()
    }

    /// Read-path operations the store has served; lets tests prove that
    /// rejected callers never reached the store.
    pub fn store_read_ops(&self) -> u64 {
        self.store.read().expect("store lock poisoned").read_ops()
    }

    pub fn audit_tail(&self, n: usize) -> Result<Vec<AuditEntry>, EngineError> {
        Ok(self.audit.tail(n)?)
    }

    pub fn audit_line_count(&self) -> Result<usize, EngineError> {
        Ok(self.audit.line_count()?)
    }

    /// Runs one inference request. Exactly one audit line is written
    /// whether the request succeeds or fails.
    pub fn infer(&self, request: &InferenceRequest) -> Result<InferenceResponse, EngineError> {
        let policy = self.current_policy();
        let result = self.infer_inner(&policy, request);
        let entry = AuditEntry::now(&request.user_id, "query").with_mode(request.mode.as_str());
        let entry = match &result {
            Ok(response) => {
                let mut resources = response.retrieved_doc_ids.clone();
                resources.extend(response.consulted_experts.iter().map(|c| c.expert.clone()));
                entry.allowed(resources)
            }
            Err(e) => entry.denied(Vec::new(), vec![e.deny_reason()]),
        };
        self.audit.append(&entry)?;
        result
    }

    fn infer_inner(
        &self,
        policy: &CompiledPolicy,
        request: &InferenceRequest,
    ) -> Result<InferenceResponse, EngineError> {
        if policy.snapshot.user(&request.user_id).is_none() {
            return Err(EngineError::UnknownSubject(request.user_id.clone()));
        }
        if tokenize(&request.prompt).is_empty() {
            return Err(EngineError::EmptyPrompt);
        }
        let needs_retrieval =
            matches!(request.mode, InferenceMode::Rag | InferenceMode::Hybrid);
        let needs_experts =
            matches!(request.mode, InferenceMode::Moe | InferenceMode::Hybrid);
        if needs_retrieval && request.k == 0 {
            return Err(EngineError::InvalidRequest("k must be at least 1".into()));
        }
        if needs_experts && request.top_k_experts == 0 {
            return Err(EngineError::InvalidRequest(
                "top_k_experts must be at least 1".into(),
            ));
        }
        let version = policy.snapshot.version();

        match request.mode {
            InferenceMode::Rag => {
                let (doc_ids, prompt) = self.retrieve_and_augment(policy, request)?;
                let text = self.generator.generate(&prompt);
                Ok(InferenceResponse {
                    text,
                    retrieved_doc_ids: doc_ids,
                    consulted_experts: Vec::new(),
                    policy_version: version,
                })
            }
            InferenceMode::Moe => {
                let (text, consulted) = self.consult_experts(
                    policy,
                    &request.user_id,
                    &request.prompt,
                    request.top_k_experts,
                )?;
                Ok(InferenceResponse {
                    text,
                    retrieved_doc_ids: Vec::new(),
                    consulted_experts: consulted,
                    policy_version: version,
                })
            }
            InferenceMode::Hybrid => {
                let (doc_ids, augmented) = self.retrieve_and_augment(policy, request)?;
                // With no authorized context the routed prompt is the raw
                // prompt, so the behavior degrades to pure expert routing.
                let routed: &str = if doc_ids.is_empty() {
                    &request.prompt
                } else {
                    &augmented
                };
                let (text, consulted) = self.consult_experts(
                    policy,
                    &request.user_id,
                    routed,
                    request.top_k_experts,
                )?;
                Ok(InferenceResponse {
                    text,
                    retrieved_doc_ids: doc_ids,
                    consulted_experts: consulted,
                    policy_version: version,
                })
            }
        }
    }

    /// Security-trimmed retrieval plus the fixed augmented-prompt layout.
    fn retrieve_and_augment(
        &self,
        policy: &CompiledPolicy,
        request: &InferenceRequest,
    ) -> Result<(Vec<String>, String), EngineError> {
        let store = self.store.read().expect("store lock poisoned");
        let hits =
            store.search_filtered(&policy.snapshot, &request.user_id, &request.prompt, request.k)?;
        let context: Vec<(&str, &str)> = hits
            .iter()
            .map(|h| {
                let doc = store
                    .document(&h.doc_id)
                    .expect("search hit refers to a stored document");
                (h.doc_id.as_str(), doc.text.as_str())
            })
            .collect();
        let prompt = augmented_prompt(context, &request.prompt);
        Ok((hits.into_iter().map(|h| h.doc_id).collect(), prompt))
    }

    /// Gate, consult the top experts, and mix. The routed prompt is scored
    /// by the gate and answered by each consulted expert.
    fn consult_experts(
        &self,
        policy: &CompiledPolicy,
        user_id: &str,
        routed_prompt: &str,
        top_k: usize,
    ) -> Result<(String, Vec<ConsultedExpert>), EngineError> {
        let experts = self.current_experts();
        let distribution = gate(
            &policy.snapshot,
            user_id,
            routed_prompt,
            &experts,
            self.config.temperature,
        )?;
        let mut responses: BTreeMap<ExpertId, ExpertResponse> = BTreeMap::new();
        for (id, _) in distribution.top_k(top_k) {
            let expert = experts.get(&id).expect("gated expert is in the set");
            responses.insert(id.clone(), expert_respond(expert, routed_prompt)?);
        }
        let mixed = mix_responses(&distribution, &responses);
        let consulted = mixed
            .provenance
            .iter()
            .map(|(id, p)| ConsultedExpert {
                expert: id.canonical_name(),
                probability: *p,
            })
            .collect();
        Ok((mixed.text, consulted))
    }

    /// Validates, stores, and embeds a document, then retrains exactly the
    /// expert cells whose training set it joins.
    pub fn ingest_document(
        &self,
        actor: &str,
        record: &CorpusRecord,
    ) -> Result<IngestOutcome, EngineError> {
        let policy = self.current_policy();
        let result: Result<IngestOutcome, EngineError> = (|| {
            let mut store = self.store.write().expect("store lock poisoned");
            let meta = record.meta();
            store.ingest(&policy.snapshot, meta.clone(), record.text.clone())?;
            let current = self.current_experts();
            let (next, retrained) = refit_incremental(&current, &meta, &store);
            if !retrained.is_empty() {
                let version = current.version() + 1;
                *self.experts.write().expect("experts lock poisoned") =
                    Arc::new(next.with_version(version));
            }
            Ok(IngestOutcome {
                doc_id: record.id.clone(),
                retrained,
            })
        })();

        let entry = AuditEntry::now(actor, "ingest");
        let entry = match &result {
            Ok(outcome) => {
                let mut resources = vec![outcome.doc_id.clone()];
                resources.extend(outcome.retrained.iter().map(ExpertId::canonical_name));
                entry.allowed(resources)
            }
            Err(e) => entry.denied(vec![record.id.clone()], vec![e.deny_reason()]),
        };
        self.audit.append(&entry)?;
        result
    }

    /// Removes a document and retrains the cells that had trained on it.
    /// Administrative path: reports true absence.
    pub fn remove_document(
        &self,
        actor: &str,
        doc_id: &str,
    ) -> Result<BTreeSet<ExpertId>, EngineError> {
        let result: Result<BTreeSet<ExpertId>, EngineError> = (|| {
            let mut store = self.store.write().expect("store lock poisoned");
            let removed = store.remove(doc_id)?;
            let current = self.current_experts();
            let (next, retrained) = refit_incremental(&current, &removed.meta, &store);
            if !retrained.is_empty() {
                let version = current.version() + 1;
                *self.experts.write().expect("experts lock poisoned") =
                    Arc::new(next.with_version(version));
            }
            Ok(retrained)
        })();

        let entry = AuditEntry::now(actor, "remove");
        let entry = match &result {
            Ok(retrained) => {
                let mut resources = vec![doc_id.to_owned()];
                resources.extend(retrained.iter().map(ExpertId::canonical_name));
                entry.allowed(resources)
            }
            Err(e) => entry.denied(vec![doc_id.to_owned()], vec![e.deny_reason()]),
        };
        self.audit.append(&entry)?;
        result
    }

    /// Policy-checked document fetch. Denied and missing collapse to the
    /// same error; the audit line records what actually happened.
    pub fn fetch_document(
        &self,
        user_id: &str,
        doc_id: &str,
    ) -> Result<CorpusRecord, EngineError> {
        let policy = self.current_policy();
        let (result, true_reason) = {
            let store = self.store.read().expect("store lock poisoned");
            match store.fetch_outcome(&policy.snapshot, user_id, doc_id) {
                FetchOutcome::Found(doc) => (
                    Ok(CorpusRecord {
                        id: doc.meta.id.clone(),
                        clearance: doc.meta.clearance,
                        roles: doc.meta.granted_roles.clone(),
                        text: doc.text.clone(),
                    }),
                    None,
                ),
                FetchOutcome::Denied(reason) => (
                    Err(EngineError::Store(StoreError::NotFoundOrDenied)),
                    Some(format!("{reason:?}")),
                ),
                FetchOutcome::Missing => (
                    Err(EngineError::Store(StoreError::NotFoundOrDenied)),
                    Some("NotFound".to_owned()),
                ),
            }
        };

        let entry = AuditEntry::now(user_id, "fetch");
        let entry = match (&result, true_reason) {
            (Ok(_), _) => entry.allowed(vec![doc_id.to_owned()]),
            (Err(_), Some(reason)) => entry.denied(vec![doc_id.to_owned()], vec![reason]),
            (Err(e), None) => entry.denied(vec![doc_id.to_owned()], vec![e.deny_reason()]),
        };
        self.audit.append(&entry)?;
        result
    }

    /// Retrains the full grid from the current store. Returns the expert
    /// count.
    pub fn train(&self, actor: &str) -> Result<usize, EngineError> {
        let policy = self.current_policy();
        let result: Result<usize, EngineError> = (|| {
            let roles: BTreeSet<String> =
                policy.snapshot.role_ids().map(str::to_owned).collect();
            let grid = build_expert_grid(&policy.snapshot, &roles)?;
            let store = self.store.read().expect("store lock poisoned");
            let trained = train_experts(&grid, &store);
            let count = trained.len();
            let version = self.current_experts().version() + 1;
            *self.experts.write().expect("experts lock poisoned") =
                Arc::new(trained.with_version(version));
            Ok(count)
        })();

        let entry = AuditEntry::now(actor, "train");
        let entry = match &result {
            Ok(count) => entry.allowed(vec![format!("experts:{count}")]),
            Err(e) => entry.denied(Vec::new(), vec![e.deny_reason()]),
        };
        self.audit.append(&entry)?;
        result
    }

    /// Validates and installs a new policy at `current version + 1`, then
    /// retrains the grid against the new roles (when experts were trained
    /// before). Requests in flight keep their old snapshot.
    pub fn reload_policy(&self, actor: &str, file: &PolicyFile) -> Result<u64, EngineError> {
        let result: Result<u64, EngineError> = (|| {
            let current = self.current_policy();
            let next_version = current.snapshot.version() + 1;
            let compiled = file.compile(next_version)?;

            let store = self.store.read().expect("store lock poisoned");
            let had_experts = !self.current_experts().is_empty();
            let roles: BTreeSet<String> =
                compiled.snapshot.role_ids().map(str::to_owned).collect();
            let retrained = if had_experts && !roles.is_empty() {
                let grid = build_expert_grid(&compiled.snapshot, &roles)?;
                let version = self.current_experts().version() + 1;
                Some(Arc::new(train_experts(&grid, &store).with_version(version)))
            } else {
                None
            };

            *self.policy.write().expect("policy lock poisoned") = Arc::new(compiled);
            if let Some(experts) = retrained {
                *self.experts.write().expect("experts lock poisoned") = experts;
            }
            Ok(next_version)
        })();

        let entry = AuditEntry::now(actor, "policy_reload");
        let entry = match &result {
            Ok(version) => entry.allowed(vec![format!("policy_version:{version}")]),
            Err(e) => entry.denied(Vec::new(), vec![e.deny_reason()]),
        };
        self.audit.append(&entry)?;
        result
    }
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("policy_version", &self.policy_version())
            .field("documents", &self.document_count())
            .field("experts", &self.current_experts().len())
            .finish()
    }
}

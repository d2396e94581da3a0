//! In-memory document store with security-trimmed similarity search.
//!
//! Documents carry their access-control metadata ([`DocumentMeta`]) next to
//! the body and a precomputed embedding. Retrieval is exact top-k cosine
//! search over the authorized subset, never over the whole corpus blindly:
//!
//! * [`DocumentStore::search_filtered`] — the production route. Documents
//!   the caller may not read are skipped *before* any similarity math, so
//!   their scores are never even computed.
//! * [`DocumentStore::search_oracle`] — the reference route. Scores every
//!   document, then discards unauthorized ones. Same results by
//!   construction of the rules, kept as an executable cross-check (the
//!   equivalence is asserted in tests, and it exists as a public operation
//!   precisely so the two can be diffed at any time).
//!
//! `get_document` deliberately cannot distinguish "does not exist" from
//! "exists but denied": both collapse to [`StoreError::NotFoundOrDenied`],
//! so a caller cannot probe for the existence of documents above its
//! clearance.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, embed_text, tokenize};
use crate::policy::{AccessReason, DocumentMeta, PolicySnapshot};
use crate::Embedding;

/// A stored document: metadata, raw text, and its embedding (computed once
/// at ingest).
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub meta: DocumentMeta,
    pub text: String,
    pub embedding: Embedding,
}

/// One search result. `rank` is 1-based within the returned list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("document id {0:?} already exists")]
    DuplicateId(String),
    #[error("document references unknown role {0:?}")]
    DanglingRoleRef(String),
    #[error("document text has no tokens")]
    EmptyText,
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    /// Returned for a document that is missing *or* that the caller may not
    /// read. The two cases are indistinguishable by design.
    #[error("document not found")]
    NotFoundOrDenied,
    /// Administrative removal of a document that is not there. Admin paths
    /// may see true existence, so this does not go through
    /// [`StoreError::NotFoundOrDenied`].
    #[error("no document with id {0:?}")]
    NotFound(String),
    #[error("corpus file unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {source}")]
    CorpusParse {
        line: usize,
        source: serde_json::Error,
    },
}

/// Internal fetch result carrying the true reason; used by the engine for
/// audit records. Public callers only ever see the collapsed
/// [`StoreError::NotFoundOrDenied`].
#[derive(Debug)]
pub(crate) enum FetchOutcome<'a> {
    Found(&'a Document),
    Denied(AccessReason),
    Missing,
}

/// The corpus and the similarity index over it.
///
/// Keyed by document id in a `BTreeMap`, so every iteration (search,
/// training, refit) visits documents in ascending id order — that fixed
/// order is what makes floating-point accumulation reproducible.
#[derive(Debug, Default)]
pub struct DocumentStore {
    docs: BTreeMap<String, Document>,
    /// Read-path operations served so far (searches and fetches). Lets
    /// callers assert that authentication short-circuits before any store
    /// read happens.
    read_ops: AtomicU64,
}

impl DocumentStore {
    pub fn new() -> DocumentStore {
        DocumentStore::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains_key(doc_id)
    }

    /// Number of read-path operations (searches + fetches) served.
    pub fn read_ops(&self) -> u64 {
        self.read_ops.load(Ordering::Relaxed)
    }

    /// All documents in ascending id order. Used by expert training; not a
    /// policy-checked read path.
    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub(crate) fn document(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    /// Validates and stores a document, embedding it once. The id must be
    /// fresh, every granted role must exist in the policy, and the text must
    /// tokenize to at least one token.
    pub fn ingest(
        &mut self,
        policy: &PolicySnapshot,
        meta: DocumentMeta,
        text: impl Into<String>,
    ) -> Result<String, StoreError> {
        if self.docs.contains_key(&meta.id) {
            return Err(StoreError::DuplicateId(meta.id));
        }
        for role in &meta.granted_roles {
            if policy.role(role).is_none() {
                return Err(StoreError::DanglingRoleRef(role.clone()));
            }
        }
        let text = text.into();
        if tokenize(&text).is_empty() {
            return Err(StoreError::EmptyText);
        }
        let embedding = embed_text(&text);
        let id = meta.id.clone();
        self.docs.insert(
            id.clone(),
            Document {
                meta,
                text,
                embedding,
            },
        );
        Ok(id)
    }

    /// Removes and returns a document. Admin-only path: reports true
    /// existence via [`StoreError::NotFound`].
    pub fn remove(&mut self, doc_id: &str) -> Result<Document, StoreError> {
        self.docs
            .remove(doc_id)
            .ok_or_else(|| StoreError::NotFound(doc_id.to_owned()))
    }

    /// Exact top-k search over the documents `user_id` is authorized to
    /// read. The policy check runs first; unauthorized documents are never
    /// scored.
    pub fn search_filtered(
        &self,
        policy: &PolicySnapshot,
        user_id: &str,
        query: &str,
        k: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        self.read_ops.fetch_add(1, Ordering::Relaxed);
        if policy.user(user_id).is_none() {
            return Err(StoreError::UnknownSubject(user_id.to_owned()));
        }
        let query_embedding = embed_text(query);
        let mut scored: Vec<(f64, &str)> = Vec::new();
        for doc in self.docs.values() {
            if policy.can_access_document(user_id, &doc.meta).allowed {
                let score = cosine_similarity(&query_embedding, &doc.embedding);
                scored.push((score, doc.meta.id.as_str()));
            }
        }
        Ok(rank_and_truncate(scored, k))
    }

    /// Reference implementation of [`DocumentStore::search_filtered`]:
    /// scores *all* documents first, then discards unauthorized ones. Must
    /// return identical results; exists so that equivalence stays an
    /// executable fact rather than a comment.
    pub fn search_oracle(
        &self,
        policy: &PolicySnapshot,
        user_id: &str,
        query: &str,
        k: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        self.read_ops.fetch_add(1, Ordering::Relaxed);
        if policy.user(user_id).is_none() {
            return Err(StoreError::UnknownSubject(user_id.to_owned()));
        }
        let query_embedding = embed_text(query);
        let all_scored: Vec<(f64, &Document)> = self
            .docs
            .values()
            .map(|doc| (cosine_similarity(&query_embedding, &doc.embedding), doc))
            .collect();
        let authorized: Vec<(f64, &str)> = all_scored
            .into_iter()
            .filter(|(_, doc)| policy.can_access_document(user_id, &doc.meta).allowed)
            .map(|(score, doc)| (score, doc.meta.id.as_str()))
            .collect();
        Ok(rank_and_truncate(authorized, k))
    }

    /// Policy-checked single-document fetch. Missing and denied are
    /// indistinguishable to the caller.
    pub fn get_document(
        &self,
        policy: &PolicySnapshot,
        user_id: &str,
        doc_id: &str,
    ) -> Result<&Document, StoreError> {
        match self.fetch_outcome(policy, user_id, doc_id) {
            FetchOutcome::Found(doc) => Ok(doc),
            FetchOutcome::Denied(_) | FetchOutcome::Missing => {
                Err(StoreError::NotFoundOrDenied)
            }
        }
    }

    pub(crate) fn fetch_outcome(
        &self,
        policy: &PolicySnapshot,
        user_id: &str,
        doc_id: &str,
    ) -> FetchOutcome<'_> {
        self.read_ops.fetch_add(1, Ordering::Relaxed);
        let Some(doc) = self.docs.get(doc_id) else {
            return FetchOutcome::Missing;
        };
        let decision = policy.can_access_document(user_id, &doc.meta);
        if decision.allowed {
            FetchOutcome::Found(doc)
        } else {
            FetchOutcome::Denied(decision.reason)
        }
    }
}

/// Sorts by score descending, ties broken by ascending doc id, truncates to
/// `k`, and assigns 1-based ranks. Scores are finite (cosines of finite
/// vectors), so the comparison never sees a NaN.
fn rank_and_truncate(mut scored: Vec<(f64, &str)>, k: usize) -> Vec<SearchHit> {
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("similarity scores are finite")
            .then_with(|| a.1.cmp(b.1))
    });
    scored.truncate(k);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, doc_id))| SearchHit {
            doc_id: doc_id.to_owned(),
            score,
            rank: i + 1,
        })
        .collect()
}

/// One line of a corpus file: document metadata plus the body.
///
/// ```json
/// {"id": "doc-1", "clearance": "secret", "roles": ["HR"], "text": "..."}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub clearance: crate::policy::ClearanceLevel,
    #[serde(default)]
    pub roles: std::collections::BTreeSet<String>,
    pub text: String,
}

impl CorpusRecord {
    pub fn meta(&self) -> DocumentMeta {
        DocumentMeta {
            id: self.id.clone(),
            clearance: self.clearance,
            granted_roles: self.roles.clone(),
        }
    }
}

/// Reads a JSONL corpus, one [`CorpusRecord`] per non-empty line. Parse
/// errors report the 1-based line number.
pub fn read_corpus_jsonl(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, StoreError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|source| StoreError::CorpusParse {
                line: index + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ClearanceLevel, Role, User};

    fn snapshot() -> PolicySnapshot {
        PolicySnapshot::new(
            1,
            [
                Role::containing("HR", ["NormalUser"]),
                Role::new("Accounting"),
                Role::new("NormalUser"),
            ],
            [
                User::new("alice", ClearanceLevel::Secret, ["HR"]),
                User::new("bob", ClearanceLevel::Confidential, ["Accounting"]),
            ],
        )
    }

    fn store_with(policy: &PolicySnapshot, docs: &[(&str, ClearanceLevel, &[&str], &str)]) -> DocumentStore {
        let mut store = DocumentStore::new();
        for (id, clearance, roles, text) in docs {
            store
                .ingest(
                    policy,
                    DocumentMeta::new(*id, *clearance, roles.iter().copied()),
                    *text,
                )
                .unwrap();
        }
        store
    }

    #[test]
    fn ingest_rejects_duplicates_dangling_roles_empty_text() {
        let policy = snapshot();
        let mut store = DocumentStore::new();
        store
            .ingest(
                &policy,
                DocumentMeta::new("d1", ClearanceLevel::Restricted, ["HR"]),
                "leave policy",
            )
            .unwrap();

        let err = store
            .ingest(
                &policy,
                DocumentMeta::new("d1", ClearanceLevel::Restricted, ["HR"]),
                "again",
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::DuplicateId(id) if id == "d1"));

        let err = store
            .ingest(
                &policy,
                DocumentMeta::new("d2", ClearanceLevel::Restricted, ["Ghost"]),
                "text",
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::DanglingRoleRef(r) if r == "Ghost"));

        let err = store
            .ingest(
                &policy,
                DocumentMeta::new("d3", ClearanceLevel::Restricted, ["HR"]),
                "?!, --",
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::EmptyText));

        assert_eq!(store.len(), 1);
    }

    #[test]
    fn search_filtered_excludes_unauthorized() {
        let policy = snapshot();
        let store = store_with(
            &policy,
            &[
                ("d-acct", ClearanceLevel::Confidential, &["Accounting"], "invoice ledger totals"),
                ("d-hr-s", ClearanceLevel::Secret, &["HR"], "personnel review notes"),
                ("d-hr-r", ClearanceLevel::Restricted, &["HR"], "holiday schedule"),
            ],
        );

        // bob (Confidential, Accounting) sees only the accounting doc.
        let hits = store.search_filtered(&policy, "bob", "ledger", 10).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "d-acct");
        assert_eq!(hits[0].rank, 1);

        // alice (Secret, HR) sees both HR docs, never the accounting one.
        let hits = store.search_filtered(&policy, "alice", "personnel review", 10).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert!(ids.contains(&"d-hr-s"));
        assert!(ids.contains(&"d-hr-r"));
        assert!(!ids.contains(&"d-acct"));
    }

    #[test]
    fn search_unknown_subject_errors() {
        let policy = snapshot();
        let store = store_with(&policy, &[("d", ClearanceLevel::Restricted, &["HR"], "x y z")]);
        assert!(matches!(
            store.search_filtered(&policy, "mallory", "x", 3),
            Err(StoreError::UnknownSubject(_))
        ));
        assert!(matches!(
            store.search_oracle(&policy, "mallory", "x", 3),
            Err(StoreError::UnknownSubject(_))
        ));
    }

    #[test]
    fn search_orders_by_score_then_id_with_ranks() {
        let policy = snapshot();
        // Two identical documents tie exactly; tie must break by id.
        let store = store_with(
            &policy,
            &[
                ("z-doc", ClearanceLevel::Restricted, &["HR"], "budget meeting"),
                ("a-doc", ClearanceLevel::Restricted, &["HR"], "budget meeting"),
                ("m-doc", ClearanceLevel::Restricted, &["HR"], "unrelated topic entirely"),
            ],
        );
        let hits = store.search_filtered(&policy, "alice", "budget meeting", 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a-doc", "z-doc", "m-doc"]);
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!(
            hits.iter().map(|h| h.rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn search_truncates_to_k() {
        let policy = snapshot();
        let store = store_with(
            &policy,
            &[
                ("d1", ClearanceLevel::Restricted, &["HR"], "alpha beta"),
                ("d2", ClearanceLevel::Restricted, &["HR"], "alpha gamma"),
                ("d3", ClearanceLevel::Restricted, &["HR"], "alpha delta"),
            ],
        );
        let hits = store.search_filtered(&policy, "alice", "alpha", 2).unwrap();
        assert_eq!(hits.len(), 2);
        // k = 0 is a degenerate but legal request at the store layer.
        let hits = store.search_filtered(&policy, "alice", "alpha", 0).unwrap();
        assert!(hits.is_empty());
    }

    #[test]
    fn oracle_route_matches_filtered_route() {
        let policy = snapshot();
        let store = store_with(
            &policy,
            &[
                ("d1", ClearanceLevel::Restricted, &["HR"], "quarterly budget report"),
                ("d2", ClearanceLevel::Secret, &["HR"], "budget forecast draft"),
                ("d3", ClearanceLevel::Confidential, &["Accounting"], "budget ledger"),
                ("d4", ClearanceLevel::Restricted, &["NormalUser"], "cafeteria menu"),
            ],
        );
        for user in ["alice", "bob"] {
            for query in ["budget", "cafeteria menu", "zzz nothing relevant"] {
                let filtered = store.search_filtered(&policy, user, query, 3).unwrap();
                let oracle = store.search_oracle(&policy, user, query, 3).unwrap();
                assert_eq!(filtered, oracle, "user {user} query {query:?}");
            }
        }
    }

    #[test]
    fn get_document_collapses_missing_and_denied() {
        let policy = snapshot();
        let store = store_with(
            &policy,
            &[("d-secret", ClearanceLevel::Secret, &["HR"], "restricted payload")],
        );
        // bob is denied (clearance); "d-ghost" does not exist. Same error,
        // same message.
        let denied = store.get_document(&policy, "bob", "d-secret").unwrap_err();
        let missing = store.get_document(&policy, "bob", "d-ghost").unwrap_err();
        assert!(matches!(denied, StoreError::NotFoundOrDenied));
        assert!(matches!(missing, StoreError::NotFoundOrDenied));
        assert_eq!(denied.to_string(), missing.to_string());

        // alice can read it.
        let doc = store.get_document(&policy, "alice", "d-secret").unwrap();
        assert_eq!(doc.meta.id, "d-secret");
    }

    #[test]
    fn remove_reports_true_absence() {
        let policy = snapshot();
        let mut store = store_with(&policy, &[("d", ClearanceLevel::Restricted, &["HR"], "text")]);
        assert!(store.remove("d").is_ok());
        assert!(matches!(store.remove("d"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn read_ops_counts_reads_only() {
        let policy = snapshot();
        let store = store_with(&policy, &[("d", ClearanceLevel::Restricted, &["HR"], "text")]);
        assert_eq!(store.read_ops(), 0);
        let _ = store.search_filtered(&policy, "alice", "q", 1);
        let _ = store.search_oracle(&policy, "alice", "q", 1);
        let _ = store.get_document(&policy, "alice", "d");
        assert_eq!(store.read_ops(), 3);
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"d1","clearance":"secret","roles":["HR"],"text":"annual review"}"#,
                "\n\n",
                r#"{"id":"d2","clearance":"not_classified","roles":[],"text":"lunch menu"}"#,
                "\n",
            ),
        )
        .unwrap();
        let records = read_corpus_jsonl(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, "d1");
        assert_eq!(records[0].clearance, ClearanceLevel::Secret);
        assert_eq!(records[1].roles.len(), 0);

        std::fs::write(&path, "{\"id\": 42}\n").unwrap();
        match read_corpus_jsonl(&path) {
            Err(StoreError::CorpusParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

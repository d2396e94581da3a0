//! Randomized equivalence suites for retrieval: the production pre-filter
//! route against the score-everything oracle route, both against a naive
//! from-scratch ranking, plus the policy-monotonicity and non-disclosure
//! properties.

mod common;

use std::collections::BTreeSet;

use cleargate_core::embedding::{cosine_similarity, embed_text};
use cleargate_core::policy::PolicySnapshot;
use cleargate_core::store::{DocumentStore, SearchHit, StoreError};
use cleargate_core::Embedding;
use common::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn build_store(policy: &PolicySnapshot, corpus: &[cleargate_core::CorpusRecord]) -> DocumentStore {
    let mut store = DocumentStore::new();
    for record in corpus {
        store
            .ingest(policy, record.meta(), record.text.clone())
            .expect("generated corpus is ingestible");
    }
    store
}

/// Yet another ranking implementation: naive authorization, then repeated
/// selection of the best remaining (score desc, id asc) candidate.
fn naive_ranked(
    policy_file: &cleargate_core::PolicyFile,
    corpus: &[cleargate_core::CorpusRecord],
    user: &str,
    query: &str,
    k: usize,
) -> Vec<SearchHit> {
    let query_embedding: Embedding = embed_text(query);
    let mut candidates: Vec<(String, f64)> = corpus
        .iter()
        .filter(|r| naive_can_access(policy_file, user, r.clearance, &r.roles))
        .map(|r| {
            let doc_embedding: Embedding = embed_text(&r.text);
            (r.id.clone(), cosine_similarity(&query_embedding, &doc_embedding))
        })
        .collect();

    let mut hits = Vec::new();
    while hits.len() < k && !candidates.is_empty() {
        let mut best = 0;
        for i in 1..candidates.len() {
            let better = candidates[i].1 > candidates[best].1
                || (candidates[i].1 == candidates[best].1
                    && candidates[i].0 < candidates[best].0);
            if better {
                best = i;
            }
        }
        let (doc_id, score) = candidates.remove(best);
        hits.push(SearchHit {
            doc_id,
            score,
            rank: hits.len() + 1,
        });
    }
    hits
}

#[test]
fn filtered_and_oracle_routes_agree_on_random_corpora() {
    for seed in 0..60u64 {
        let mut rng = StdRng::seed_from_u64(0x5EA5_0000 + seed);
        let policy_file = random_policy(&mut rng);
        let compiled = policy_file.compile(1).unwrap();
        let count = rng.random_range(5..=60);
        let corpus = random_corpus(&mut rng, &policy_file, count);
        let store = build_store(&compiled.snapshot, &corpus);

        for user in policy_file.users.iter().map(|u| u.id.clone()) {
            for _ in 0..3 {
                let query = if rng.random_bool(0.3) {
                    // Query that exactly matches some document's text.
                    corpus[rng.random_range(0..corpus.len())].text.clone()
                } else {
                    random_text(&mut rng, 1, 6)
                };
                let k = rng.random_range(1..=10);
                let filtered = store
                    .search_filtered(&compiled.snapshot, &user, &query, k)
                    .unwrap();
                let oracle = store
                    .search_oracle(&compiled.snapshot, &user, &query, k)
                    .unwrap();
                // Identical inputs, identical per-pair math: the routes must
                // agree exactly, scores included.
                assert_eq!(filtered, oracle, "seed {seed} user {user} query {query:?}");

                let naive = naive_ranked(&policy_file, &corpus, &user, &query, k);
                assert_eq!(
                    filtered.len(),
                    naive.len(),
                    "seed {seed} user {user} query {query:?}"
                );
                for (a, b) in filtered.iter().zip(&naive) {
                    assert_eq!(a.doc_id, b.doc_id, "seed {seed}");
                    assert_eq!(a.rank, b.rank, "seed {seed}");
                    assert!(
                        (a.score - b.score).abs() < 1e-9,
                        "seed {seed}: {} vs {}",
                        a.score,
                        b.score
                    );
                }
            }
        }
    }
}

#[test]
fn effective_roles_match_fixed_point_oracle() {
    for seed in 0..200u64 {
        let mut rng = StdRng::seed_from_u64(0xC105_0000 + seed);
        let policy_file = random_policy(&mut rng);
        let compiled = policy_file.compile(1).unwrap();
        for user in &policy_file.users {
            let via_snapshot = compiled.snapshot.effective_roles(&user.id).unwrap();
            let via_oracle = naive_effective_roles(&policy_file, &user.id).unwrap();
            assert_eq!(via_snapshot, via_oracle, "seed {seed} user {}", user.id);
        }
    }
}

#[test]
fn access_decisions_match_naive_rule() {
    for seed in 0..200u64 {
        let mut rng = StdRng::seed_from_u64(0xACCE_0000 + seed);
        let policy_file = random_policy(&mut rng);
        let compiled = policy_file.compile(1).unwrap();
        let corpus = random_corpus(&mut rng, &policy_file, 20);
        for user in &policy_file.users {
            for record in &corpus {
                let decision = compiled
                    .snapshot
                    .can_access_document(&user.id, &record.meta());
                let expected = naive_can_access(&policy_file, &user.id, record.clearance, &record.roles);
                assert_eq!(
                    decision.allowed, expected,
                    "seed {seed} user {} doc {}",
                    user.id, record.id
                );
            }
        }
    }
}

#[test]
fn raising_clearance_never_shrinks_results() {
    for seed in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(0x0A15_0000 + seed);
        let policy_file = random_policy(&mut rng);
        let compiled = policy_file.compile(1).unwrap();
        let count = rng.random_range(5..=40);
        let corpus = random_corpus(&mut rng, &policy_file, count);
        let store = build_store(&compiled.snapshot, &corpus);
        let query = random_text(&mut rng, 1, 5);
        let k = store.len(); // k past the authorized set size: nothing truncated

        for user in &policy_file.users {
            if user.clearance.ordinal() == 4 {
                continue;
            }
            let before: BTreeSet<String> = store
                .search_filtered(&compiled.snapshot, &user.id, &query, k)
                .unwrap()
                .into_iter()
                .map(|h| h.doc_id)
                .collect();

            // Same user, one level higher.
            let mut raised_file = policy_file.clone();
            for u in &mut raised_file.users {
                if u.id == user.id {
                    u.clearance = level_from_ordinal(user.clearance.ordinal() + 1);
                }
            }
            let raised = raised_file.compile(2).unwrap();
            let after: BTreeSet<String> = store
                .search_filtered(&raised.snapshot, &user.id, &query, k)
                .unwrap()
                .into_iter()
                .map(|h| h.doc_id)
                .collect();

            assert!(
                before.is_subset(&after),
                "seed {seed} user {}: {:?} not subset of {:?}",
                user.id,
                before,
                after
            );
        }
    }
}

#[test]
fn search_never_returns_unauthorized_documents() {
    let mut checked = 0u64;
    for seed in 0..150u64 {
        let mut rng = StdRng::seed_from_u64(0x1EAC_0000 + seed);
        let policy_file = random_policy(&mut rng);
        let compiled = policy_file.compile(1).unwrap();
        let count = rng.random_range(5..=40);
        let corpus = random_corpus(&mut rng, &policy_file, count);
        let store = build_store(&compiled.snapshot, &corpus);

        for user in &policy_file.users {
            let query = random_text(&mut rng, 1, 6);
            let hits = store
                .search_filtered(&compiled.snapshot, &user.id, &query, store.len())
                .unwrap();
            for hit in &hits {
                let record = corpus.iter().find(|r| r.id == hit.doc_id).unwrap();
                assert!(
                    naive_can_access(&policy_file, &user.id, record.clearance, &record.roles),
                    "seed {seed}: {} returned to {}",
                    hit.doc_id,
                    user.id
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 1_000, "exercised only {checked} hits");
}

#[test]
fn fetch_error_is_byte_identical_for_missing_and_denied() {
    for seed in 0..50u64 {
        let mut rng = StdRng::seed_from_u64(0xD15C_0000 + seed);
        let policy_file = random_policy(&mut rng);
        let compiled = policy_file.compile(1).unwrap();
        let corpus = random_corpus(&mut rng, &policy_file, 15);
        let store = build_store(&compiled.snapshot, &corpus);

        for user in &policy_file.users {
            // Find a document this user cannot read, if any.
            let denied_doc = corpus
                .iter()
                .find(|r| !naive_can_access(&policy_file, &user.id, r.clearance, &r.roles));
            let Some(denied_doc) = denied_doc else { continue };

            let denied = store
                .get_document(&compiled.snapshot, &user.id, &denied_doc.id)
                .unwrap_err();
            let missing = store
                .get_document(&compiled.snapshot, &user.id, "doc-does-not-exist")
                .unwrap_err();
            assert!(matches!(denied, StoreError::NotFoundOrDenied));
            assert!(matches!(missing, StoreError::NotFoundOrDenied));
            // The complete observable payload: identical rendering, so a
            // caller cannot probe for existence.
            assert_eq!(denied.to_string(), missing.to_string());
            assert_eq!(format!("{denied:?}"), format!("{missing:?}"));
        }
    }
}

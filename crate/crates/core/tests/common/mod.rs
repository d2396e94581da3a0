//! Shared helpers for the randomized suites: policy/corpus generators and
//! naive reimplementations of the access rules used as oracles.
//!
//! The naive functions deliberately share no code with the crate under
//! test: closure by fixed-point iteration instead of DFS, access checks
//! by ordinal comparison and set intersection spelled out longhand.

// Each integration target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cleargate_core::policy::{ClearanceLevel, PolicyFile, Role, User};
use cleargate_core::store::CorpusRecord;
use rand::rngs::StdRng;
use rand::Rng;

/// Corpus vocabulary. Deliberately disjoint from the fixed response
/// template words ("according", "to", "answer", "ctx", "docs", "context",
/// "question") so leakage assertions can match on content tokens without
/// tripping over scaffolding.
pub const WORDS: &[&str] = &[
    "ledger", "invoice", "payroll", "onboarding", "handbook", "turbine", "manifest", "protocol",
    "briefing", "railway", "cipher", "antenna", "reactor", "budget", "audit", "vacation",
    "printer", "firewall", "kernel", "garden", "harbor", "falcon", "granite", "meadow",
    "copper", "violet", "summit", "lantern", "compass", "anchor", "beacon", "canyon",
    "ember", "frost", "glacier", "horizon", "island", "juniper", "krypton", "lagoon",
];

pub const ROLE_POOL: &[&str] = &[
    "Engineering",
    "Finance",
    "Legal",
    "Medical",
    "Operations",
    "Research",
];

pub fn level_from_ordinal(n: u8) -> ClearanceLevel {
    ClearanceLevel::from_ordinal(n).expect("ordinal in range")
}

pub fn random_level(rng: &mut StdRng) -> ClearanceLevel {
    level_from_ordinal(rng.random_range(0..5) as u8)
}

/// A random *valid* policy: 2..=5 roles with an acyclic containment graph
/// (edges only point from later pool entries to earlier ones) and 2..=6
/// users, each holding one or two roles.
pub fn random_policy(rng: &mut StdRng) -> PolicyFile {
    let role_count = rng.random_range(2..=5);
    let mut roles = Vec::new();
    for (i, id) in ROLE_POOL.iter().enumerate().take(role_count) {
        let contains: BTreeSet<String> = ROLE_POOL[..i]
            .iter()
            .filter(|_| rng.random_bool(0.35))
            .map(|r| (*r).to_owned())
            .collect();
        roles.push(Role {
            id: (*id).to_owned(),
            contains,
        });
    }

    let user_count = rng.random_range(2..=6);
    let mut users = Vec::new();
    for i in 0..user_count {
        let mut direct = BTreeSet::new();
        direct.insert(ROLE_POOL[rng.random_range(0..role_count)].to_owned());
        if rng.random_bool(0.4) {
            direct.insert(ROLE_POOL[rng.random_range(0..role_count)].to_owned());
        }
        users.push(User {
            id: format!("user{i}"),
            clearance: random_level(rng),
            roles: direct,
        });
    }

    PolicyFile {
        roles,
        users,
        tokens: BTreeMap::new(),
        admins: BTreeSet::new(),
    }
}

pub fn random_text(rng: &mut StdRng, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words..=max_words);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random corpus over the policy's roles. Most documents carry one or two
/// granted roles; a few carry none and are therefore readable by nobody.
pub fn random_corpus(rng: &mut StdRng, policy: &PolicyFile, count: usize) -> Vec<CorpusRecord> {
    (0..count)
        .map(|i| {
            let mut granted = BTreeSet::new();
            if !policy.roles.is_empty() && rng.random_bool(0.9) {
                granted.insert(policy.roles[rng.random_range(0..policy.roles.len())].id.clone());
                if rng.random_bool(0.3) {
                    granted
                        .insert(policy.roles[rng.random_range(0..policy.roles.len())].id.clone());
                }
            }
            CorpusRecord {
                id: format!("doc-{i:03}"),
                clearance: random_level(rng),
                roles: granted,
                text: random_text(rng, 3, 12),
            }
        })
        .collect()
}

/// Transitive role closure by fixed-point iteration over the raw lists.
pub fn naive_effective_roles(policy: &PolicyFile, user_id: &str) -> Option<BTreeSet<String>> {
    let user = policy.users.iter().find(|u| u.id == user_id)?;
    let mut closure: BTreeSet<String> = user.roles.clone();
    loop {
        let mut grew = false;
        for role in &policy.roles {
            if closure.contains(&role.id) {
                for child in &role.contains {
                    if closure.insert(child.clone()) {
                        grew = true;
                    }
                }
            }
        }
        if !grew {
            return Some(closure);
        }
    }
}

/// The document access rule, spelled out from scratch: known subject, no
/// dangling granted roles, clearance ordinal at least the document's, and
/// a non-empty intersection between effective and granted roles.
pub fn naive_can_access(
    policy: &PolicyFile,
    user_id: &str,
    doc_clearance: ClearanceLevel,
    granted_roles: &BTreeSet<String>,
) -> bool {
    let Some(user) = policy.users.iter().find(|u| u.id == user_id) else {
        return false;
    };
    for granted in granted_roles {
        if !policy.roles.iter().any(|r| &r.id == granted) {
            return false;
        }
    }
    if user.clearance.ordinal() < doc_clearance.ordinal() {
        return false;
    }
    let Some(effective) = naive_effective_roles(policy, user_id) else {
        return false;
    };
    granted_roles.iter().any(|g| effective.contains(g))
}

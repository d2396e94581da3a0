//! Clearance lattice, role hierarchy, and access decisions.
//!
//! Every authorization decision in the system is made by [`PolicySnapshot`].
//! The other modules (store, expert routing, orchestrator) call into it and
//! never re-implement the rules, so there is exactly one place where "may
//! this subject see this resource" is answered.
//!
//! The model has two independent axes:
//!
//! * a total order of five [`ClearanceLevel`]s, checked by dominance
//!   (subject level >= resource level), and
//! * a role graph where roles may contain other roles; a subject holds the
//!   transitive closure of its directly assigned roles.
//!
//! Access requires *both* axes to pass. Snapshots are immutable once built;
//! policy changes produce a new snapshot with a higher version number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five sensitivity levels, least to most sensitive.
///
/// Derived `Ord` follows declaration order, which is exactly the lattice
/// order, so `a >= b` means "a dominates b".
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ClearanceLevel {
    NotClassified,
    Restricted,
    Confidential,
    Secret,
    CosmicTopSecret,
}

impl ClearanceLevel {
    /// All levels in ascending order.
    pub const ALL: [ClearanceLevel; 5] = [
        ClearanceLevel::NotClassified,
        ClearanceLevel::Restricted,
        ClearanceLevel::Confidential,
        ClearanceLevel::Secret,
        ClearanceLevel::CosmicTopSecret,
    ];

    /// Position in the lattice, 0 (Not Classified) through 4 (Cosmic Top Secret).
    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(n: u8) -> Option<ClearanceLevel> {
        ClearanceLevel::ALL.get(n as usize).copied()
    }

    /// `true` when a subject at `self` may handle material at `other`.
    pub fn dominates(self, other: ClearanceLevel) -> bool {
        self >= other
    }

    /// Human-readable title-case name, used in expert names and output.
    pub fn canonical_name(self) -> &'static str {
        match self {
            ClearanceLevel::NotClassified => "Not Classified",
            ClearanceLevel::Restricted => "Restricted",
            ClearanceLevel::Confidential => "Confidential",
            ClearanceLevel::Secret => "Secret",
            ClearanceLevel::CosmicTopSecret => "Cosmic Top Secret",
        }
    }

    /// The lower-case token used in config files and wire formats.
    pub fn config_name(self) -> &'static str {
        match self {
            ClearanceLevel::NotClassified => "not_classified",
            ClearanceLevel::Restricted => "restricted",
            ClearanceLevel::Confidential => "confidential",
            ClearanceLevel::Secret => "secret",
            ClearanceLevel::CosmicTopSecret => "cosmic_top_secret",
        }
    }
}

impl fmt::Display for ClearanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for ClearanceLevel {
    type Err = String;

    /// Accepts the config-file token (`"secret"`, `"cosmic_top_secret"`, ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClearanceLevel::ALL
            .into_iter()
            .find(|l| l.config_name() == s)
            .ok_or_else(|| format!("unknown clearance level {s:?}"))
    }
}

/// A named role. `contains` lists roles whose grants this role inherits
/// (an HR officer *is* a normal user, etc.).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub id: String,
    #[serde(default)]
    pub contains: BTreeSet<String>,
}

impl Role {
    pub fn new(id: impl Into<String>) -> Role {
        Role {
            id: id.into(),
            contains: BTreeSet::new(),
        }
    }

    pub fn containing<I, S>(id: impl Into<String>, contains: I) -> Role
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Role {
            id: id.into(),
            contains: contains.into_iter().map(Into::into).collect(),
        }
    }
}

/// A subject: one clearance level plus directly assigned roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub clearance: ClearanceLevel,
    /// Directly assigned roles; the effective set also includes everything
    /// these roles transitively contain.
    #[serde(default)]
    pub roles: BTreeSet<String>,
}

impl User {
    pub fn new<I, S>(id: impl Into<String>, clearance: ClearanceLevel, roles: I) -> User
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        User {
            id: id.into(),
            clearance,
            roles: roles.into_iter().map(Into::into).collect(),
        }
    }
}

/// Access-control metadata attached to a document. The body lives in the
/// document store; policy decisions only ever look at this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub id: String,
    pub clearance: ClearanceLevel,
    /// Roles whose holders may read the document ("granted roles"). A
    /// subject needs at least one of these in its effective role set.
    #[serde(rename = "roles", default)]
    pub granted_roles: BTreeSet<String>,
}

impl DocumentMeta {
    pub fn new<I, S>(id: impl Into<String>, clearance: ClearanceLevel, granted_roles: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        DocumentMeta {
            id: id.into(),
            clearance,
            granted_roles: granted_roles.into_iter().map(Into::into).collect(),
        }
    }
}

/// Why an access check came out the way it did.
///
/// The order of the deny variants below is also their reporting precedence:
/// an unknown subject is reported before an unknown resource, and a
/// clearance failure before a missing role grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessReason {
    Granted,
    UnknownSubject,
    UnknownResource,
    ClearanceInsufficient,
    NoRoleGrant,
}

impl fmt::Display for AccessReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Outcome of an access check. `allowed` is true exactly when the reason is
/// [`AccessReason::Granted`]; the constructors keep the two in sync.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessDecision {
    pub allowed: bool,
    pub reason: AccessReason,
}

impl AccessDecision {
    pub fn granted() -> AccessDecision {
        AccessDecision {
            allowed: true,
            reason: AccessReason::Granted,
        }
    }

    pub fn denied(reason: AccessReason) -> AccessDecision {
        debug_assert!(reason != AccessReason::Granted, "denied with Granted reason");
        AccessDecision {
            allowed: false,
            reason,
        }
    }
}

/// A single defect found while validating a policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum PolicyViolation {
    DuplicateRoleId { id: String },
    DuplicateUserId { id: String },
    /// `referrer` names a role that does not exist.
    DanglingRoleRef { referrer: String, role: String },
    /// `referrer` (a token or admin entry) names a user that does not exist.
    DanglingUserRef { referrer: String, user: String },
    /// The role containment graph has a cycle through these roles.
    RoleCycle { members: Vec<String> },
    EmptyRoleSet { user: String },
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyViolation::DuplicateRoleId { id } => write!(f, "duplicate role id {id:?}"),
            PolicyViolation::DuplicateUserId { id } => write!(f, "duplicate user id {id:?}"),
            PolicyViolation::DanglingRoleRef { referrer, role } => {
                write!(f, "{referrer:?} references unknown role {role:?}")
            }
            PolicyViolation::DanglingUserRef { referrer, user } => {
                write!(f, "{referrer:?} references unknown user {user:?}")
            }
            PolicyViolation::RoleCycle { members } => {
                write!(f, "role containment cycle through {}", members.join(" -> "))
            }
            PolicyViolation::EmptyRoleSet { user } => {
                write!(f, "user {user:?} has no roles")
            }
        }
    }
}

/// Everything wrong with a policy, or empty if it is well-formed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<PolicyViolation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    #[error("policy invalid: {0}")]
    Invalid(ValidationReport),
    #[error("policy file unreadable: {0}")]
    Io(#[from] std::io::Error),
    /// serde_json errors carry line/column of the offending field.
    #[error("policy file malformed: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// An immutable, versioned view of roles and users.
///
/// Snapshots are cheap to share behind an `Arc`; the engine swaps in a new
/// one (with `version + 1`) on policy reload, so every request sees one
/// consistent policy from start to finish.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySnapshot {
    version: u64,
    roles: BTreeMap<String, Role>,
    users: BTreeMap<String, User>,
}

impl PolicySnapshot {
    /// Builds a snapshot without validating; call [`PolicySnapshot::validate`]
    /// (or go through [`PolicyFile::compile`]) before trusting it.
    pub fn new<R, U>(version: u64, roles: R, users: U) -> PolicySnapshot
    where
        R: IntoIterator<Item = Role>,
        U: IntoIterator<Item = User>,
    {
        PolicySnapshot {
            version,
            roles: roles.into_iter().map(|r| (r.id.clone(), r)).collect(),
            users: users.into_iter().map(|u| (u.id.clone(), u)).collect(),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> PolicySnapshot {
        self.version = version;
        self
    }

    pub fn role(&self, id: &str) -> Option<&Role> {
        self.roles.get(id)
    }

    pub fn user(&self, id: &str) -> Option<&User> {
        self.users.get(id)
    }

    /// Role ids in ascending order.
    pub fn role_ids(&self) -> impl Iterator<Item = &str> {
        self.roles.keys().map(String::as_str)
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn role_count(&self) -> usize {
        self.roles.len()
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    /// The transitive closure of the user's direct roles over `contains`
    /// edges. Fails on unknown subjects, and on policies whose role graph
    /// is broken (cycle or dangling reference reachable from this user).
    pub fn effective_roles(&self, user_id: &str) -> Result<BTreeSet<String>, PolicyError> {
        let user = self
            .users
            .get(user_id)
            .ok_or_else(|| PolicyError::UnknownSubject(user_id.to_owned()))?;

        let mut closure = BTreeSet::new();
        // Iterative DFS with an explicit in-progress set for cycle detection.
        // `path` mirrors the recursion stack so a detected cycle can name its
        // members.
        let mut in_progress: BTreeSet<&str> = BTreeSet::new();
        let mut path: Vec<&str> = Vec::new();

        fn visit<'a>(
            snapshot: &'a PolicySnapshot,
            role_id: &'a str,
            closure: &mut BTreeSet<String>,
            in_progress: &mut BTreeSet<&'a str>,
            path: &mut Vec<&'a str>,
        ) -> Result<(), ValidationReport> {
            if closure.contains(role_id) {
                return Ok(());
            }
            if in_progress.contains(role_id) {
                let start = path.iter().position(|r| *r == role_id).unwrap_or(0);
                let mut members: Vec<String> =
                    path[start..].iter().map(|r| (*r).to_owned()).collect();
                members.push(role_id.to_owned());
                return Err(ValidationReport {
                    violations: vec![PolicyViolation::RoleCycle { members }],
                });
            }
            let Some(role) = snapshot.roles.get(role_id) else {
                let referrer = path.last().map_or("<direct assignment>", |r| *r);
                return Err(ValidationReport {
                    violations: vec![PolicyViolation::DanglingRoleRef {
                        referrer: referrer.to_owned(),
                        role: role_id.to_owned(),
                    }],
                });
            };
            in_progress.insert(role_id);
            path.push(role_id);
            for child in &role.contains {
                visit(snapshot, child, closure, in_progress, path)?;
            }
            path.pop();
            in_progress.remove(role_id);
            closure.insert(role_id.to_owned());
            Ok(())
        }

        for direct in &user.roles {
            visit(self, direct, &mut closure, &mut in_progress, &mut path)
                .map_err(PolicyError::Invalid)?;
        }
        Ok(closure)
    }

    /// The two-conjunct document rule: clearance dominance AND at least one
    /// effective role among the document's granted roles. Denials report the
    /// first failing check, clearance before roles.
    pub fn can_access_document(&self, user_id: &str, doc: &DocumentMeta) -> AccessDecision {
        let Some(user) = self.users.get(user_id) else {
            return AccessDecision::denied(AccessReason::UnknownSubject);
        };
        if doc.granted_roles.iter().any(|r| !self.roles.contains_key(r)) {
            return AccessDecision::denied(AccessReason::UnknownResource);
        }
        if !user.clearance.dominates(doc.clearance) {
            return AccessDecision::denied(AccessReason::ClearanceInsufficient);
        }
        match self.effective_roles(user_id) {
            Ok(effective) => {
                if doc.granted_roles.iter().any(|r| effective.contains(r)) {
                    AccessDecision::granted()
                } else {
                    AccessDecision::denied(AccessReason::NoRoleGrant)
                }
            }
            // A broken role graph fails closed: no grant can be proven.
            Err(_) => AccessDecision::denied(AccessReason::NoRoleGrant),
        }
    }

    /// Whether the user may consult the expert for `(expert_role, expert_clearance)`:
    /// the user's clearance must dominate the expert's, and the expert's role
    /// must be in the user's effective role set.
    pub fn can_consult_expert(
        &self,
        user_id: &str,
        expert_role: &str,
        expert_clearance: ClearanceLevel,
    ) -> AccessDecision {
        let Some(user) = self.users.get(user_id) else {
            return AccessDecision::denied(AccessReason::UnknownSubject);
        };
        if !self.roles.contains_key(expert_role) {
            return AccessDecision::denied(AccessReason::UnknownResource);
        }
        if !user.clearance.dominates(expert_clearance) {
            return AccessDecision::denied(AccessReason::ClearanceInsufficient);
        }
        match self.effective_roles(user_id) {
            Ok(effective) if effective.contains(expert_role) => AccessDecision::granted(),
            _ => AccessDecision::denied(AccessReason::NoRoleGrant),
        }
    }

    /// Structural checks on the snapshot itself: dangling role references,
    /// containment cycles, users with no roles. (Duplicate ids cannot be
    /// represented in the maps; [`PolicyFile::validate`] catches those
    /// before they collapse.)
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();

        for role in self.roles.values() {
            for child in &role.contains {
                if !self.roles.contains_key(child) {
                    report.violations.push(PolicyViolation::DanglingRoleRef {
                        referrer: role.id.clone(),
                        role: child.clone(),
                    });
                }
            }
        }

        // Cycle detection over the whole graph, not just what users reach.
        let mut state: BTreeMap<&str, u8> = BTreeMap::new(); // 1 = in progress, 2 = done
        fn walk<'a>(
            roles: &'a BTreeMap<String, Role>,
            id: &'a str,
            state: &mut BTreeMap<&'a str, u8>,
            path: &mut Vec<&'a str>,
            report: &mut ValidationReport,
        ) {
            match state.get(id) {
                Some(2) => return,
                Some(1) => {
                    let start = path.iter().position(|r| *r == id).unwrap_or(0);
                    let mut members: Vec<String> =
                        path[start..].iter().map(|r| (*r).to_owned()).collect();
                    members.push(id.to_owned());
                    report.violations.push(PolicyViolation::RoleCycle { members });
                    return;
                }
                _ => {}
            }
            state.insert(id, 1);
            path.push(id);
            if let Some(role) = roles.get(id) {
                for child in &role.contains {
                    if roles.contains_key(child.as_str()) {
                        walk(roles, child, state, path, report);
                    }
                }
            }
            path.pop();
            state.insert(id, 2);
        }
        let mut path = Vec::new();
        for id in self.roles.keys() {
            walk(&self.roles, id, &mut state, &mut path, &mut report);
        }

        for user in self.users.values() {
            if user.roles.is_empty() {
                report.violations.push(PolicyViolation::EmptyRoleSet {
                    user: user.id.clone(),
                });
            }
            for role in &user.roles {
                if !self.roles.contains_key(role) {
                    report.violations.push(PolicyViolation::DanglingRoleRef {
                        referrer: user.id.clone(),
                        role: role.clone(),
                    });
                }
            }
        }

        report
    }
}

/// On-disk policy document: role and user definitions plus the gateway's
/// token table and admin list.
///
/// ```json
/// {
///   "roles": [{"id": "HR", "contains": ["NormalUser"]}],
///   "users": [{"id": "alice", "clearance": "secret", "roles": ["HR"]}],
///   "tokens": {"alice-token": "alice"},
///   "admins": ["alice"]
/// }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    #[serde(default)]
    pub roles: Vec<Role>,
    #[serde(default)]
    pub users: Vec<User>,
    /// Bearer token -> user id.
    #[serde(default)]
    pub tokens: BTreeMap<String, String>,
    /// Users allowed to call the administrative endpoints.
    #[serde(default)]
    pub admins: BTreeSet<String>,
}

impl PolicyFile {
    pub fn from_json(text: &str) -> Result<PolicyFile, PolicyError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<PolicyFile, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        PolicyFile::from_json(&text)
    }

    /// Full structural validation: duplicate ids (only visible here, before
    /// the lists collapse into maps), then everything
    /// [`PolicySnapshot::validate`] checks, then token/admin references.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();

        let mut seen_roles = BTreeSet::new();
        for role in &self.roles {
            if !seen_roles.insert(role.id.as_str()) {
                report
                    .violations
                    .push(PolicyViolation::DuplicateRoleId { id: role.id.clone() });
            }
        }
        let mut seen_users = BTreeSet::new();
        for user in &self.users {
            if !seen_users.insert(user.id.as_str()) {
                report
                    .violations
                    .push(PolicyViolation::DuplicateUserId { id: user.id.clone() });
            }
        }

        let snapshot = PolicySnapshot::new(0, self.roles.clone(), self.users.clone());
        report.violations.extend(snapshot.validate().violations);

        for (token, user) in &self.tokens {
            if !seen_users.contains(user.as_str()) {
                report.violations.push(PolicyViolation::DanglingUserRef {
                    referrer: format!("token {token:?}"),
                    user: user.clone(),
                });
            }
        }
        for admin in &self.admins {
            if !seen_users.contains(admin.as_str()) {
                report.violations.push(PolicyViolation::DanglingUserRef {
                    referrer: "admins".to_owned(),
                    user: admin.clone(),
                });
            }
        }

        report
    }

    /// Validates and, if clean, produces the runtime form.
    pub fn compile(&self, version: u64) -> Result<CompiledPolicy, PolicyError> {
        let report = self.validate();
        if !report.is_clean() {
            return Err(PolicyError::Invalid(report));
        }
        Ok(CompiledPolicy {
            snapshot: PolicySnapshot::new(version, self.roles.clone(), self.users.clone()),
            tokens: self.tokens.clone(),
            admins: self.admins.clone(),
        })
    }
}

/// A validated policy ready for serving: the snapshot plus gateway
/// authentication tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPolicy {
    pub snapshot: PolicySnapshot,
    pub tokens: BTreeMap<String, String>,
    pub admins: BTreeSet<String>,
}

impl CompiledPolicy {
    /// Resolves a bearer token to a user id, or `None` for unknown tokens.
    pub fn resolve_token(&self, token: &str) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    pub fn is_admin(&self, user_id: &str) -> bool {
        self.admins.contains(user_id)
    }
}

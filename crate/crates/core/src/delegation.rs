//! Delegation tokens as append-only attenuation chains.
//!
//! A token is a list of blocks. Block 0 is self-issued by the workflow
//! initiator; every later block is issued by the previous block's subject and
//! may only narrow the scope. Each block carries a digest over its own fields
//! and the previous block's digest, so any edit to a stored chain is visible
//! to [`verify_chain`]. There are no keys or signatures.
//!
//! Validity of a held token is tracked by a small coherence protocol: the
//! holder may rely on a cached verdict for a bounded number of operations
//! (`ExecCount`) or ticks (`WallClockTtl`) before it must consult the
//! revocation registry again.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{canonical, Digest};
use crate::model::{
    scope_intersect, scope_subset, string_id, Catalog, Grant, PrincipalId, PrincipalKind, Scope,
};
use crate::store::{AuthView, LogicalTime};

string_id!(
    /// Lineage identifier shared by a root token and everything attenuated from it.
    TokenId
);
string_id!(WorkflowId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValiditySpec {
    /// Registry consulted on every use.
    WorkflowLifetime,
    /// Cached verdict trusted until `ticks` have elapsed since the last consult.
    WallClockTtl { ticks: u64 },
    /// Cached verdict trusted for `n` operations, the consulting one included.
    ExecCount { n: u64 },
}

impl ValiditySpec {
    pub fn is_well_formed(&self) -> bool {
        match *self {
            ValiditySpec::WorkflowLifetime => true,
            ValiditySpec::WallClockTtl { ticks } => ticks > 0,
            ValiditySpec::ExecCount { n } => n >= 1,
        }
    }
}

impl fmt::Display for ValiditySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValiditySpec::WorkflowLifetime => f.write_str("workflow-lifetime"),
            ValiditySpec::WallClockTtl { ticks } => write!(f, "ttl({ticks})"),
            ValiditySpec::ExecCount { n } => write!(f, "exec-count({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttenuationBlock {
    pub seq: u32,
    pub issuer: PrincipalId,
    pub subject: PrincipalId,
    pub scope: Scope,
    pub validity: ValiditySpec,
    pub issued_at: LogicalTime,
    pub digest: Digest,
}

#[derive(Serialize)]
struct BlockContent<'a> {
    token_id: &'a TokenId,
    workflow_id: &'a WorkflowId,
    seq: u32,
    issuer: &'a PrincipalId,
    subject: &'a PrincipalId,
    scope: &'a Scope,
    validity: &'a ValiditySpec,
    issued_at: LogicalTime,
}

fn block_digest(
    token_id: &TokenId,
    workflow_id: &WorkflowId,
    prev: &Digest,
    block: &AttenuationBlock,
) -> Digest {
    let content = BlockContent {
        token_id,
        workflow_id,
        seq: block.seq,
        issuer: &block.issuer,
        subject: &block.subject,
        scope: &block.scope,
        validity: &block.validity,
        issued_at: block.issued_at,
    };
    Digest::chain(prev, &canonical(&content))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegationToken {
    pub token_id: TokenId,
    pub workflow_id: WorkflowId,
    pub blocks: Vec<AttenuationBlock>,
}

impl DelegationToken {
    pub fn root(&self) -> &AttenuationBlock {
        &self.blocks[0]
    }

    pub fn last(&self) -> &AttenuationBlock {
        self.blocks.last().expect("token has at least one block")
    }

    pub fn initiator(&self) -> &PrincipalId {
        &self.root().issuer
    }

    /// The principal currently holding the token.
    pub fn holder(&self) -> &PrincipalId {
        &self.last().subject
    }

    pub fn validity(&self) -> ValiditySpec {
        self.last().validity
    }

    /// Intersection of every block scope.
    pub fn chain_meet(&self) -> Scope {
        let mut it = self.blocks.iter();
        let first = it.next().map(|b| b.scope.clone()).unwrap_or_default();
        it.fold(first, |acc, b| scope_intersect(&acc, &b.scope))
    }

    pub fn mentions(&self, principal: &PrincipalId) -> bool {
        self.blocks
            .iter()
            .any(|b| &b.issuer == principal || &b.subject == principal)
    }

    /// Every principal named in the chain, sorted and deduplicated.
    pub fn principals(&self) -> Vec<PrincipalId> {
        let mut out: Vec<PrincipalId> = self
            .blocks
            .iter()
            .flat_map(|b| [b.issuer.clone(), b.subject.clone()])
            .collect();
        out.sort();
        out.dedup();
        out
    }

    fn seal(&mut self, seq: usize) {
        let prev = if seq == 0 {
            Digest::ZERO
        } else {
            self.blocks[seq - 1].digest
        };
        let d = block_digest(&self.token_id, &self.workflow_id, &prev, &self.blocks[seq]);
        self.blocks[seq].digest = d;
    }

    /// Recomputes every block digest in place. Used by test fixtures that
    /// build deliberately malformed chains.
    pub fn reseal(&mut self) {
        for i in 0..self.blocks.len() {
            self.seal(i);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DelegationError {
    #[error("unknown principal {0}")]
    UnknownSubject(PrincipalId),
    #[error("requested scope exceeds the initiator's authority: {offending}")]
    ScopeExceedsInitiator { offending: Scope },
    #[error("attenuation would widen the chain: {excess}")]
    ScopeEscalation { excess: Scope },
    #[error("delegation to unattested agent {0}")]
    UnattestedSubject(PrincipalId),
    #[error("malformed validity {0}")]
    InvalidValidity(ValiditySpec),
    #[error("block issued at {at} precedes its parent at {parent}")]
    IssuedBeforeParent {
        at: LogicalTime,
        parent: LogicalTime,
    },
    #[error("invalid chain at block {seq}: {violation}")]
    InvalidChain { seq: u32, violation: ChainViolation },
    #[error("{holder} does not hold token {token} (held by {expected})")]
    UnknownHolder {
        token: TokenId,
        holder: PrincipalId,
        expected: PrincipalId,
    },
    #[error("revocation at {at} is earlier than the last recorded event at {last}")]
    RevocationOutOfOrder { at: LogicalTime, last: LogicalTime },
}

/// Principal authority from its standing base scope or from the tuple store.
pub fn holds(
    catalog: &Catalog,
    view: &dyn AuthView,
    principal: &PrincipalId,
    grant: &Grant,
    t: LogicalTime,
) -> bool {
    catalog
        .principal(principal)
        .is_some_and(|p| p.base_scope.contains(grant))
        || view.allows(principal, grant.action, &grant.resource, t)
}

#[allow(clippy::too_many_arguments)]
pub fn mint_root(
    catalog: &Catalog,
    view: &dyn AuthView,
    initiator: &PrincipalId,
    token_id: TokenId,
    workflow_id: WorkflowId,
    scope: Scope,
    validity: ValiditySpec,
    t: LogicalTime,
) -> Result<DelegationToken, DelegationError> {
    if !catalog.contains_principal(initiator) {
        return Err(DelegationError::UnknownSubject(initiator.clone()));
    }
    if !validity.is_well_formed() {
        return Err(DelegationError::InvalidValidity(validity));
    }
    let offending: Scope = scope
        .iter()
        .filter(|g| !holds(catalog, view, initiator, g, t))
        .cloned()
        .collect();
    if !offending.is_empty() {
        return Err(DelegationError::ScopeExceedsInitiator { offending });
    }
    let mut token = DelegationToken {
        token_id,
        workflow_id,
        blocks: vec![AttenuationBlock {
            seq: 0,
            issuer: initiator.clone(),
            subject: initiator.clone(),
            scope,
            validity,
            issued_at: t,
            digest: Digest::ZERO,
        }],
    };
    token.seal(0);
    Ok(token)
}

/// A self-issued root for `holder` that bypasses every authority check.
/// Only the simulator's legacy mode uses this, to model a service credential
/// substituted for a delegated one.
pub(crate) fn unchecked_root(
    token_id: TokenId,
    workflow_id: WorkflowId,
    holder: &PrincipalId,
    scope: Scope,
    t: LogicalTime,
) -> DelegationToken {
    let mut token = DelegationToken {
        token_id,
        workflow_id,
        blocks: vec![AttenuationBlock {
            seq: 0,
            issuer: holder.clone(),
            subject: holder.clone(),
            scope,
            validity: ValiditySpec::WorkflowLifetime,
            issued_at: t,
            digest: Digest::ZERO,
        }],
    };
    token.seal(0);
    token
}

/// Appends a narrowing block. The input token is left untouched.
pub fn attenuate(
    token: &DelegationToken,
    catalog: &Catalog,
    new_subject: &PrincipalId,
    narrowed: Scope,
    validity: ValiditySpec,
    t: LogicalTime,
) -> Result<DelegationToken, DelegationError> {
    let subject = catalog
        .principal(new_subject)
        .ok_or_else(|| DelegationError::UnknownSubject(new_subject.clone()))?;
    let last = token.last();
    if !scope_subset(&narrowed, &last.scope) {
        return Err(DelegationError::ScopeEscalation {
            excess: narrowed.difference(&last.scope),
        });
    }
    if catalog.require_attestation() && subject.kind == PrincipalKind::Agent && !subject.attested {
        return Err(DelegationError::UnattestedSubject(new_subject.clone()));
    }
    if !validity.is_well_formed() {
        return Err(DelegationError::InvalidValidity(validity));
    }
    if t < last.issued_at {
        return Err(DelegationError::IssuedBeforeParent {
            at: t,
            parent: last.issued_at,
        });
    }
    let mut next = token.clone();
    next.blocks.push(AttenuationBlock {
        seq: token.blocks.len() as u32,
        issuer: last.subject.clone(),
        subject: new_subject.clone(),
        scope: narrowed,
        validity,
        issued_at: t,
        digest: Digest::ZERO,
    });
    let seq = next.blocks.len() - 1;
    next.seal(seq);
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainViolation {
    Empty,
    SeqGap {
        expected: u32,
        found: u32,
    },
    UnknownPrincipal(PrincipalId),
    RootNotSelfIssued,
    BrokenLinkage {
        issuer: PrincipalId,
        expected: PrincipalId,
    },
    ScopeEscalation {
        excess: Scope,
    },
    UnattestedSubject(PrincipalId),
    MalformedValidity(ValiditySpec),
    TimeRegression,
    DigestMismatch,
}

impl fmt::Display for ChainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainViolation::Empty => f.write_str("empty chain"),
            ChainViolation::SeqGap { expected, found } => {
                write!(f, "sequence gap: expected {expected}, found {found}")
            }
            ChainViolation::UnknownPrincipal(p) => write!(f, "unknown principal {p}"),
            ChainViolation::RootNotSelfIssued => f.write_str("root block is not self-issued"),
            ChainViolation::BrokenLinkage { issuer, expected } => {
                write!(f, "issuer {issuer} is not the previous subject {expected}")
            }
            ChainViolation::ScopeEscalation { excess } => write!(f, "scope escalation {excess}"),
            ChainViolation::UnattestedSubject(p) => write!(f, "unattested subject {p}"),
            ChainViolation::MalformedValidity(v) => write!(f, "malformed validity {v}"),
            ChainViolation::TimeRegression => f.write_str("block issued before its parent"),
            ChainViolation::DigestMismatch => f.write_str("block digest mismatch"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainVerdict {
    Valid,
    Invalid { seq: u32, violation: ChainViolation },
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainVerdict::Valid)
    }
}

/// Checks every block invariant and reports the first one violated.
pub fn verify_chain(token: &DelegationToken, catalog: &Catalog) -> ChainVerdict {
    let invalid = |seq: u32, violation| ChainVerdict::Invalid { seq, violation };
    if token.blocks.is_empty() {
        return invalid(0, ChainViolation::Empty);
    }
    let mut prev_digest = Digest::ZERO;
    for (k, block) in token.blocks.iter().enumerate() {
        let k32 = k as u32;
        if block.seq != k32 {
            return invalid(
                k32,
                ChainViolation::SeqGap {
                    expected: k32,
                    found: block.seq,
                },
            );
        }
        for p in [&block.issuer, &block.subject] {
            if !catalog.contains_principal(p) {
                return invalid(k32, ChainViolation::UnknownPrincipal(p.clone()));
            }
        }
        if k == 0 {
            if block.issuer != block.subject {
                return invalid(0, ChainViolation::RootNotSelfIssued);
            }
        } else {
            let parent = &token.blocks[k - 1];
            if block.issuer != parent.subject {
                return invalid(
                    k32,
                    ChainViolation::BrokenLinkage {
                        issuer: block.issuer.clone(),
                        expected: parent.subject.clone(),
                    },
                );
            }
            if !scope_subset(&block.scope, &parent.scope) {
                return invalid(
                    k32,
                    ChainViolation::ScopeEscalation {
                        excess: block.scope.difference(&parent.scope),
                    },
                );
            }
            if block.issued_at < parent.issued_at {
                return invalid(k32, ChainViolation::TimeRegression);
            }
            let subject = catalog.principal(&block.subject).expect("checked above");
            if catalog.require_attestation()
                && subject.kind == PrincipalKind::Agent
                && !subject.attested
            {
                return invalid(
                    k32,
                    ChainViolation::UnattestedSubject(block.subject.clone()),
                );
            }
        }
        if !block.validity.is_well_formed() {
            return invalid(k32, ChainViolation::MalformedValidity(block.validity));
        }
        let expected = block_digest(&token.token_id, &token.workflow_id, &prev_digest, block);
        if expected != block.digest {
            return invalid(k32, ChainViolation::DigestMismatch);
        }
        prev_digest = block.digest;
    }
    ChainVerdict::Valid
}

/// The three operands of the effective-authority meet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    pub eval_time: LogicalTime,
    /// Root scope filtered through the initiator's authority at `eval_time`.
    pub initiator_scope: Scope,
    pub chain_meet: Scope,
    /// The current subject's own authority.
    pub subject_scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveAuthority {
    pub scope: Scope,
    pub derivation: Derivation,
}

/// Initiator-derived authority ∩ chain meet ∩ current subject's authority.
///
/// A human subject's authority is its base scope plus whatever the tuple
/// store grants it; an agent's is its base scope alone.
pub fn effective_authority(
    token: &DelegationToken,
    view: &dyn AuthView,
    catalog: &Catalog,
    eval_time: LogicalTime,
) -> Result<EffectiveAuthority, DelegationError> {
    if let ChainVerdict::Invalid { seq, violation } = verify_chain(token, catalog) {
        return Err(DelegationError::InvalidChain { seq, violation });
    }
    let initiator = token.initiator();
    let initiator_scope: Scope = token
        .root()
        .scope
        .iter()
        .filter(|g| holds(catalog, view, initiator, g, eval_time))
        .cloned()
        .collect();
    let chain_meet = token.chain_meet();
    let subject = catalog
        .principal(token.holder())
        .expect("verified chain principals resolve");
    let subject_scope = match subject.kind {
        PrincipalKind::Agent => subject.base_scope.clone(),
        PrincipalKind::Human => {
            let mut s = subject.base_scope.clone();
            for g in &chain_meet {
                if view.allows(&subject.id, g.action, &g.resource, eval_time) {
                    s.insert(g.clone());
                }
            }
            s
        }
    };
    let scope = scope_intersect(
        &scope_intersect(&initiator_scope, &chain_meet),
        &subject_scope,
    );
    Ok(EffectiveAuthority {
        scope,
        derivation: Derivation {
            eval_time,
            initiator_scope,
            chain_meet,
            subject_scope,
        },
    })
}

// ---- revocation --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevocationTarget {
    Token(TokenId),
    /// Revokes every token that names the principal in any block.
    Principal(PrincipalId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RevocationEvent {
    pub target: RevocationTarget,
    pub at: LogicalTime,
}

impl RevocationEvent {
    pub fn applies_to(&self, token: &DelegationToken) -> bool {
        match &self.target {
            RevocationTarget::Token(id) => id == &token.token_id,
            RevocationTarget::Principal(p) => token.mentions(p),
        }
    }
}

/// Append-only, time-ordered revocation log. An event at `at` is effective
/// for every check at `at` or later.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationRegistry {
    events: Vec<RevocationEvent>,
}

impl RevocationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events(events: Vec<RevocationEvent>) -> Result<Self, DelegationError> {
        let mut r = Self::new();
        for e in events {
            r.revoke(e.target, e.at)?;
        }
        Ok(r)
    }

    pub fn revoke(
        &mut self,
        target: RevocationTarget,
        at: LogicalTime,
    ) -> Result<(), DelegationError> {
        if let Some(last) = self.events.last() {
            if at < last.at {
                return Err(DelegationError::RevocationOutOfOrder { at, last: last.at });
            }
        }
        self.events.push(RevocationEvent { target, at });
        Ok(())
    }

    pub fn events(&self) -> &[RevocationEvent] {
        &self.events
    }

    pub fn is_revoked(&self, token: &DelegationToken, t: LogicalTime) -> bool {
        self.events.iter().any(|e| e.at <= t && e.applies_to(token))
    }

    /// Events that bear on `token`, regardless of time.
    pub fn relevant(&self, token: &DelegationToken) -> Vec<RevocationEvent> {
        self.events
            .iter()
            .filter(|e| e.applies_to(token))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceEntry {
    pub ops_since_check: u64,
    pub last_check_at: LogicalTime,
    pub cached_valid: bool,
}

/// Per (token, holder) validity caches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoherenceState {
    entries: BTreeMap<(TokenId, PrincipalId), CoherenceEntry>,
}

impl CoherenceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(&self, token: &TokenId, holder: &PrincipalId) -> Option<CoherenceEntry> {
        self.entries.get(&(token.clone(), holder.clone())).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityStatus {
    Valid,
    Revoked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityOutcome {
    pub status: ValidityStatus,
    /// The registry was consulted for this decision.
    pub consulted: bool,
    /// A cached `valid` was used although the registry already says revoked.
    pub stale_cache_used: bool,
}

impl ValidityOutcome {
    pub fn is_valid(&self) -> bool {
        self.status == ValidityStatus::Valid
    }
}

/// One transition of the coherence protocol.
///
/// `fresh_revoked` is what a registry consult would return right now. The
/// returned entry replaces `prior`.
pub fn coherence_step(
    mode: ValiditySpec,
    prior: Option<CoherenceEntry>,
    clock: LogicalTime,
    fresh_revoked: bool,
) -> (CoherenceEntry, ValidityOutcome) {
    let must_consult = match (mode, prior) {
        (_, None) | (ValiditySpec::WorkflowLifetime, _) => true,
        (ValiditySpec::ExecCount { n }, Some(e)) => e.ops_since_check + 1 >= n,
        (ValiditySpec::WallClockTtl { ticks }, Some(e)) => {
            clock.ticks_since(e.last_check_at) >= ticks
        }
    };
    if must_consult {
        let entry = CoherenceEntry {
            ops_since_check: 0,
            last_check_at: clock,
            cached_valid: !fresh_revoked,
        };
        let status = if fresh_revoked {
            ValidityStatus::Revoked
        } else {
            ValidityStatus::Valid
        };
        return (
            entry,
            ValidityOutcome {
                status,
                consulted: true,
                stale_cache_used: false,
            },
        );
    }
    let mut entry = prior.expect("cache hit implies an entry");
    entry.ops_since_check += 1;
    let status = if entry.cached_valid {
        ValidityStatus::Valid
    } else {
        ValidityStatus::Revoked
    };
    (
        entry,
        ValidityOutcome {
            status,
            consulted: false,
            stale_cache_used: entry.cached_valid && fresh_revoked,
        },
    )
}

/// Validity of `token` for one operation by `holder` at `clock`.
pub fn check_validity(
    token: &DelegationToken,
    holder: &PrincipalId,
    clock: LogicalTime,
    registry: &RevocationRegistry,
    coherence: &mut CoherenceState,
) -> Result<ValidityOutcome, DelegationError> {
    if holder != token.holder() {
        return Err(DelegationError::UnknownHolder {
            token: token.token_id.clone(),
            holder: holder.clone(),
            expected: token.holder().clone(),
        });
    }
    let key = (token.token_id.clone(), holder.clone());
    let prior = coherence.entries.get(&key).copied();
    let fresh = registry.is_revoked(token, clock);
    let (entry, outcome) = coherence_step(token.validity(), prior, clock, fresh);
    coherence.entries.insert(key, entry);
    Ok(outcome)
}

//! Offline audit and taint analysis over trace bytes.
//!
//! The auditor never sees the originating store or catalog. It replays the
//! trace in order, rebuilding revocation state from `RevocationObserved`
//! records and the coherence caches from `ValidityChecked` records, and
//! recomputes every decision from the evidence embedded next to it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    check_combination_with, provenance_union, CombinationDecision, ProvenanceSet,
};
use crate::delegation::{
    coherence_step, effective_authority, holds, verify_chain, ChainVerdict, CoherenceEntry,
    DelegationToken, RevocationRegistry, TokenId,
};
use crate::model::{Action, Catalog, Principal, PrincipalId, ResourceId};
use crate::store::{LogicalTime, TupleId, TupleSnapshot};
use crate::trace::{
    verify_integrity, AccessRecord, AuthorityEvidence, BindingOutcome, Decision, DeliveredRecord,
    DeliveryRecord, Initiation, IntegrityVerdict, RevocationChange, SessionBinding,
    SynthesisRecord, TokenRecord, TraceError, TraceEvent, TraceHeader, TraceRecord, ValidityRecord,
    WorkflowTrace,
};
use crate::workflow::{
    delivery_check, delivery_decision, synthesis_decision, ArtifactId, DataArtifact, Delivery,
    ExecutionStatus, OnDeny, TemporalPolicy, TokenRef, VertexId, VertexKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A recorded decision differs from its recomputation.
    DecisionMismatch,
    /// Evaluated against state older than the policy's evaluation time.
    StaleAuthority,
    /// A chain was presented that the trace never records as delegated.
    UndelegatedToken,
    /// A binding reported as attenuated was exercised with its parent's chain.
    NominalDelegation,
    InvalidChain,
    ScopeEscalation,
    /// An effect without a preceding allow.
    FailOpen,
    ProvenanceUnsound,
    DisclosureMissing,
    Malformed,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::DecisionMismatch => "decision-mismatch",
            ViolationKind::StaleAuthority => "stale-authority",
            ViolationKind::UndelegatedToken => "undelegated-token",
            ViolationKind::NominalDelegation => "nominal-delegation",
            ViolationKind::InvalidChain => "invalid-chain",
            ViolationKind::ScopeEscalation => "scope-escalation",
            ViolationKind::FailOpen => "fail-open",
            ViolationKind::ProvenanceUnsound => "provenance-unsound",
            ViolationKind::DisclosureMissing => "disclosure-missing",
            ViolationKind::Malformed => "malformed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub seq: u64,
    pub vertex: Option<VertexId>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}", self.seq)?;
        if let Some(v) = &self.vertex {
            write!(f, " ({v})")?;
        }
        write!(f, ": {}: {}", self.kind, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubVerdict {
    pub violations: Vec<Violation>,
}

impl SubVerdict {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessVerdict {
    pub seq: u64,
    pub vertex: VertexId,
    pub resource: Option<ResourceId>,
    pub recorded_allow: bool,
    /// `None` when the record carries nothing to recompute from.
    pub recomputed_allow: Option<bool>,
    pub clean: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notice {
    pub seq: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Clean,
    Violations(Vec<Violation>),
}

/// What the trace says happened, rebuilt without the engine.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructedOutcome {
    pub status: Option<ExecutionStatus>,
    pub accesses: BTreeMap<VertexId, bool>,
    pub delivered: Vec<Delivery>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub accesses: Vec<AccessVerdict>,
    /// Was each access authorized at the time it occurred.
    pub access: SubVerdict,
    /// Were the delegation chains valid, current and actually delegated.
    pub chain: SubVerdict,
    /// Were provenance and combination policy respected at synthesis.
    pub aggregation: SubVerdict,
    /// Was each delivery authorized for its recipient.
    pub delivery: SubVerdict,
    pub overall: Overall,
    pub notices: Vec<Notice>,
    pub outcome: ReconstructedOutcome,
}

impl AuditVerdict {
    pub fn is_clean(&self) -> bool {
        matches!(self.overall, Overall::Clean)
    }

    pub fn violations(&self) -> &[Violation] {
        match &self.overall {
            Overall::Clean => &[],
            Overall::Violations(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("trace integrity: {0}")]
    BrokenTrace(IntegrityVerdict),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Verifies and audits a serialized trace.
pub fn audit_bytes(bytes: &[u8]) -> Result<AuditVerdict, AuditError> {
    let trace = WorkflowTrace::from_bytes(bytes).map_err(|e| match e {
        TraceError::Broken(v) => AuditError::BrokenTrace(v),
        other => AuditError::Trace(other),
    })?;
    audit(&trace)
}

pub fn audit(trace: &WorkflowTrace) -> Result<AuditVerdict, AuditError> {
    let integrity = verify_integrity(trace);
    if !integrity.is_intact() {
        return Err(AuditError::BrokenTrace(integrity));
    }
    let mut a = Auditor::new(&trace.header);
    for r in &trace.records {
        a.record(r);
    }
    Ok(a.finish())
}

#[derive(Clone, Copy)]
enum Area {
    Access,
    Chain,
    Aggregation,
    Delivery,
}

struct Auditor<'h> {
    header: &'h TraceHeader,
    init: Option<Initiation>,
    bindings: BTreeMap<TokenRef, Option<DelegationToken>>,
    registry: RevocationRegistry,
    revoked_tuples: BTreeMap<TupleId, LogicalTime>,
    coherence: BTreeMap<(TokenId, PrincipalId), CoherenceEntry>,
    valid: BTreeMap<VertexId, bool>,
    allowed: BTreeSet<VertexId>,
    access_resource: BTreeMap<VertexId, ResourceId>,
    artifacts: BTreeMap<VertexId, DataArtifact>,
    provisional: Vec<(VertexId, ResourceId)>,
    deliverable: BTreeMap<VertexId, ProvenanceSet>,
    excluded: BTreeSet<VertexId>,
    access: SubVerdict,
    chain: SubVerdict,
    aggregation: SubVerdict,
    delivery: SubVerdict,
    accesses: Vec<AccessVerdict>,
    notices: Vec<Notice>,
    outcome: ReconstructedOutcome,
}

fn catalog_of(principals: &[Principal], attestation: bool) -> Catalog {
    Catalog::new(principals.to_vec(), Vec::new()).requiring_attestation(attestation)
}

impl<'h> Auditor<'h> {
    fn new(header: &'h TraceHeader) -> Self {
        Self {
            header,
            init: None,
            bindings: BTreeMap::new(),
            registry: RevocationRegistry::new(),
            revoked_tuples: BTreeMap::new(),
            coherence: BTreeMap::new(),
            valid: BTreeMap::new(),
            allowed: BTreeSet::new(),
            access_resource: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            provisional: Vec::new(),
            deliverable: BTreeMap::new(),
            excluded: BTreeSet::new(),
            access: SubVerdict::default(),
            chain: SubVerdict::default(),
            aggregation: SubVerdict::default(),
            delivery: SubVerdict::default(),
            accesses: Vec::new(),
            notices: Vec::new(),
            outcome: ReconstructedOutcome::default(),
        }
    }

    fn flag(
        &mut self,
        area: Area,
        seq: u64,
        vertex: Option<&VertexId>,
        kind: ViolationKind,
        detail: impl Into<String>,
    ) {
        let v = Violation {
            seq,
            vertex: vertex.cloned(),
            kind,
            detail: detail.into(),
        };
        match area {
            Area::Access => self.access.violations.push(v),
            Area::Chain => self.chain.violations.push(v),
            Area::Aggregation => self.aggregation.violations.push(v),
            Area::Delivery => self.delivery.violations.push(v),
        }
    }

    fn attestation(&self) -> bool {
        self.init.as_ref().is_some_and(|i| i.attestation_required)
    }

    fn t0(&self) -> LogicalTime {
        self.init.as_ref().map_or(LogicalTime::ZERO, |i| i.t0)
    }

    fn policy(&self) -> TemporalPolicy {
        self.header.temporal_policy
    }

    /// Evaluation time the policy prescribes for an access or synthesis at `tick`.
    fn policy_time(&self, tick: LogicalTime) -> LogicalTime {
        match self.policy() {
            TemporalPolicy::AccessTime => tick,
            TemporalPolicy::InitiationTime | TemporalPolicy::CompletionTime => self.t0(),
        }
    }

    fn finish(self) -> AuditVerdict {
        let mut all = Vec::new();
        for sub in [&self.access, &self.chain, &self.aggregation, &self.delivery] {
            all.extend(sub.violations.iter().cloned());
        }
        all.sort_by_key(|v| v.seq);
        let overall = if all.is_empty() {
            Overall::Clean
        } else {
            Overall::Violations(all)
        };
        AuditVerdict {
            accesses: self.accesses,
            access: self.access,
            chain: self.chain,
            aggregation: self.aggregation,
            delivery: self.delivery,
            overall,
            notices: self.notices,
            outcome: self.outcome,
        }
    }

    fn record(&mut self, r: &TraceRecord) {
        let seq = r.seq;
        if self.init.is_none() && !matches!(r.event, TraceEvent::Initiated(_)) {
            self.flag(
                Area::Chain,
                seq,
                None,
                ViolationKind::Malformed,
                "record precedes initiation",
            );
        }
        match &r.event {
            TraceEvent::Initiated(init) => {
                if seq != 0 || self.init.is_some() {
                    self.flag(
                        Area::Chain,
                        seq,
                        None,
                        ViolationKind::Malformed,
                        "repeated initiation",
                    );
                }
                if init.graph.workflow_id != self.header.workflow_id
                    || init.graph.initiator != self.header.initiator
                {
                    self.flag(
                        Area::Chain,
                        seq,
                        None,
                        ViolationKind::Malformed,
                        "graph does not match header",
                    );
                }
                self.init = Some(init.clone());
            }
            TraceEvent::TokenMinted(rec) => self.minted(seq, rec),
            TraceEvent::Attenuated(rec) => self.attenuated(seq, rec),
            TraceEvent::ValidityChecked(rec) => self.validity(seq, r.tick, rec),
            TraceEvent::AccessDecided(rec) => self.access_decided(seq, r.tick, rec),
            TraceEvent::ArtifactProduced(rec) => self.artifact(seq, &rec.vertex, &rec.artifact),
            TraceEvent::SynthesisDecided(rec) => self.synthesis(seq, r.tick, rec),
            TraceEvent::DeliveryDecided(rec) => self.delivery_decided(seq, r.tick, rec),
            TraceEvent::Delivered(rec) => self.delivered(seq, rec),
            TraceEvent::RevocationObserved(change) => match change {
                RevocationChange::Tuple { id, at, .. } => {
                    self.revoked_tuples.insert(*id, *at);
                }
                RevocationChange::Registry(e) => {
                    if self.registry.revoke(e.target.clone(), e.at).is_err() {
                        self.flag(
                            Area::Chain,
                            seq,
                            None,
                            ViolationKind::Malformed,
                            "revocations out of order",
                        );
                    }
                }
            },
            TraceEvent::PolicyViolation(v) => self.notices.push(Notice {
                seq,
                detail: v.description.clone(),
            }),
            TraceEvent::VertexSkipped { vertex, .. } => {
                if self
                    .init
                    .as_ref()
                    .is_some_and(|i| i.on_deny != OnDeny::SkipAndMarkPartial)
                {
                    self.flag(
                        Area::Delivery,
                        seq,
                        Some(vertex),
                        ViolationKind::Malformed,
                        "skip under fail-workflow",
                    );
                }
                self.excluded.insert(vertex.clone());
            }
            TraceEvent::Finished(status) => {
                let consistent = match status {
                    ExecutionStatus::Completed => self.excluded.is_empty(),
                    ExecutionStatus::CompletedPartial { excluded } => {
                        !excluded.is_empty() && excluded == &self.excluded
                    }
                    ExecutionStatus::Denied { .. } => true,
                };
                if !consistent {
                    self.flag(
                        Area::Delivery,
                        seq,
                        None,
                        ViolationKind::DisclosureMissing,
                        "final status misstates the excluded vertices",
                    );
                }
                self.outcome.status = Some(status.clone());
            }
        }
    }

    // ---- delegation ---------------------------------------------------------

    fn chain_checks(
        &mut self,
        seq: u64,
        token: &DelegationToken,
        principals: &[Principal],
    ) -> bool {
        let catalog = catalog_of(principals, self.attestation());
        if let ChainVerdict::Invalid {
            seq: block,
            violation,
        } = verify_chain(token, &catalog)
        {
            self.flag(
                Area::Chain,
                seq,
                None,
                ViolationKind::InvalidChain,
                format!("block {block}: {violation}"),
            );
            return false;
        }
        if token.workflow_id != self.header.workflow_id
            || token.initiator() != &self.header.initiator
        {
            self.flag(
                Area::Chain,
                seq,
                None,
                ViolationKind::InvalidChain,
                "chain is not rooted in this workflow's initiator",
            );
            return false;
        }
        true
    }

    fn minted(&mut self, seq: u64, rec: &TokenRecord) {
        let token = match (&rec.outcome, &rec.token) {
            (BindingOutcome::Bound, Some(t)) => t.clone(),
            (BindingOutcome::Bound, None) => {
                self.flag(
                    Area::Chain,
                    seq,
                    None,
                    ViolationKind::Malformed,
                    "bound mint without a token",
                );
                self.bindings.insert(rec.binding.clone(), None);
                return;
            }
            _ => {
                self.bindings.insert(rec.binding.clone(), None);
                return;
            }
        };
        let ok = self.chain_checks(seq, &token, &rec.principals);
        if ok {
            if token.blocks.len() != 1
                || token.root().scope != rec.requested_scope
                || token.token_id.as_str() != rec.binding.as_str()
            {
                self.flag(
                    Area::Chain,
                    seq,
                    None,
                    ViolationKind::Malformed,
                    "minted token differs from the request",
                );
            }
            let catalog = catalog_of(&rec.principals, self.attestation());
            let slice = rec.initiator_slice.clone().unwrap_or_default();
            let t0 = token.root().issued_at;
            let unheld: Vec<String> = token
                .root()
                .scope
                .iter()
                .filter(|g| slice.at != t0 || !holds(&catalog, &slice, token.initiator(), g, t0))
                .map(|g| g.to_string())
                .collect();
            if !unheld.is_empty() {
                self.flag(
                    Area::Chain,
                    seq,
                    None,
                    ViolationKind::ScopeEscalation,
                    format!(
                        "root scope exceeds initiator authority: {}",
                        unheld.join(", ")
                    ),
                );
            }
        }
        self.bindings.insert(rec.binding.clone(), Some(token));
    }

    fn attenuated(&mut self, seq: u64, rec: &TokenRecord) {
        let token = match (&rec.outcome, &rec.token) {
            (BindingOutcome::Bound, Some(t)) => t.clone(),
            (BindingOutcome::Bound, None) => {
                self.flag(
                    Area::Chain,
                    seq,
                    None,
                    ViolationKind::Malformed,
                    "bound attenuation without a token",
                );
                self.bindings.insert(rec.binding.clone(), None);
                return;
            }
            _ => {
                self.bindings.insert(rec.binding.clone(), None);
                return;
            }
        };
        if self.chain_checks(seq, &token, &rec.principals) {
            let parent = rec
                .parent
                .as_ref()
                .and_then(|p| self.bindings.get(p).cloned().flatten());
            let extends = parent.as_ref().is_some_and(|p| {
                p.token_id == token.token_id
                    && token.blocks.len() == p.blocks.len() + 1
                    && token.blocks[..p.blocks.len()] == p.blocks[..]
            });
            if !extends {
                self.flag(
                    Area::Chain,
                    seq,
                    None,
                    ViolationKind::InvalidChain,
                    "attenuation does not extend its recorded parent",
                );
            }
            let last = token.last();
            if last.subject != rec.requested_subject || last.scope != rec.requested_scope {
                self.flag(
                    Area::Chain,
                    seq,
                    None,
                    ViolationKind::Malformed,
                    "attenuated token differs from the request",
                );
            }
        }
        self.bindings.insert(rec.binding.clone(), Some(token));
    }

    /// Compares a presented chain with what the trace recorded for its binding.
    fn presented(
        &self,
        binding: &TokenRef,
        token: &DelegationToken,
    ) -> Result<(), (ViolationKind, String)> {
        match self.bindings.get(binding) {
            None => Err((
                ViolationKind::UndelegatedToken,
                format!("binding {binding} was never delegated"),
            )),
            Some(None) => Err((
                ViolationKind::UndelegatedToken,
                format!("binding {binding} failed but a chain was presented"),
            )),
            Some(Some(recorded)) if recorded == token => Ok(()),
            Some(Some(recorded))
                if recorded.token_id == token.token_id
                    && token.blocks.len() < recorded.blocks.len()
                    && recorded.blocks[..token.blocks.len()] == token.blocks[..] =>
            {
                Err((
                    ViolationKind::NominalDelegation,
                    format!(
                        "binding {binding} was recorded as attenuated to {} but exercised with the parent chain held by {}",
                        recorded.holder(),
                        token.holder()
                    ),
                ))
            }
            Some(Some(_)) => Err((
                ViolationKind::UndelegatedToken,
                format!(
                    "binding {binding} exercised with chain {} rooted at {}, which was never delegated (scope widening)",
                    token.token_id,
                    token.initiator()
                ),
            )),
        }
    }

    fn validity(&mut self, seq: u64, tick: LogicalTime, rec: &ValidityRecord) {
        let vertex = Some(&rec.vertex);
        let token = match (&rec.session, &rec.token, &rec.outcome) {
            (SessionBinding::Failed, _, None) => {
                self.valid.insert(rec.vertex.clone(), false);
                return;
            }
            (SessionBinding::Bound, Some(t), Some(_)) => t,
            _ => {
                self.flag(
                    Area::Chain,
                    seq,
                    vertex,
                    ViolationKind::Malformed,
                    "incomplete validity record",
                );
                self.valid.insert(rec.vertex.clone(), false);
                return;
            }
        };
        let outcome = rec.outcome.expect("matched above");
        if let Err((kind, detail)) = self.presented(&rec.binding, token) {
            self.flag(Area::Chain, seq, vertex, kind, detail);
        }
        let key = (token.token_id.clone(), rec.holder.clone());
        let prior = self.coherence.get(&key).copied();
        if prior != rec.prior {
            self.flag(
                Area::Chain,
                seq,
                vertex,
                ViolationKind::DecisionMismatch,
                "recorded cache state differs from replay",
            );
        }
        let fresh = self.registry.is_revoked(token, tick);
        let effective: Vec<_> = self
            .registry
            .relevant(token)
            .into_iter()
            .filter(|e| e.at <= tick)
            .collect();
        if effective != rec.registry_events {
            self.flag(
                Area::Chain,
                seq,
                vertex,
                ViolationKind::StaleAuthority,
                "registry events omitted from validity record",
            );
        }
        let (entry, expected) = coherence_step(token.validity(), prior, tick, fresh);
        if expected != outcome {
            self.flag(
                Area::Chain,
                seq,
                vertex,
                ViolationKind::DecisionMismatch,
                format!(
                    "validity recorded {:?}, replay gives {:?}",
                    outcome.status, expected.status
                ),
            );
        }
        if expected.stale_cache_used {
            self.notices.push(Notice {
                seq,
                detail: format!(
                    "cached validity admitted {} after revocation (within protocol bound)",
                    rec.vertex
                ),
            });
        }
        self.coherence.insert(key, entry);
        self.valid.insert(rec.vertex.clone(), outcome.is_valid());
    }

    // ---- decisions ------------------------------------------------------------

    /// Staleness of an evaluation snapshot relative to the expected time.
    fn stale(
        &self,
        snapshot: &TupleSnapshot,
        eval_time: LogicalTime,
        expected: LogicalTime,
    ) -> Option<String> {
        if eval_time != expected || snapshot.at != expected {
            return Some(format!(
                "evaluated at {} against a snapshot at {}, policy requires {expected}",
                eval_time, snapshot.at
            ));
        }
        for (id, tup) in &snapshot.tuples {
            if let Some(&revoked) = self.revoked_tuples.get(id) {
                let closed = tup.valid_until.is_some_and(|u| u <= revoked);
                if revoked <= expected && !closed {
                    return Some(format!(
                        "snapshot still contains tuple {id}, revoked at {revoked}"
                    ));
                }
            }
        }
        None
    }

    fn evidence_scope(&self, ev: &AuthorityEvidence) -> Result<crate::model::Scope, String> {
        let Some(recorded) = &ev.derivation else {
            return Err("no effective-authority derivation recorded".into());
        };
        let catalog = catalog_of(&ev.principals, self.attestation());
        match effective_authority(&ev.token, &ev.snapshot, &catalog, ev.eval_time) {
            Err(e) => Err(format!("chain does not evaluate: {e}")),
            Ok(eff) if &eff.derivation != recorded => {
                Err("recorded derivation differs from recomputation".into())
            }
            Ok(eff) => Ok(eff.scope),
        }
    }

    fn access_decided(&mut self, seq: u64, tick: LogicalTime, rec: &AccessRecord) {
        let vertex = Some(&rec.vertex);
        let ev = &rec.evidence;
        let mut clean = true;
        let recorded_allow = rec.decision.is_allow();
        if recorded_allow && self.valid.get(&rec.vertex) != Some(&true) {
            clean = false;
            self.flag(
                Area::Access,
                seq,
                vertex,
                ViolationKind::FailOpen,
                "access allowed without a valid token check",
            );
        }
        if let Err((kind, detail)) = self.presented(&ev.binding, &ev.token) {
            clean = false;
            self.flag(Area::Access, seq, vertex, kind, detail);
        }
        let expected = self.policy_time(tick);
        if let Some(detail) = self.stale(&ev.snapshot, ev.eval_time, expected) {
            clean = false;
            self.flag(
                Area::Access,
                seq,
                vertex,
                ViolationKind::StaleAuthority,
                detail,
            );
        }
        if rec.provisional != (self.policy() == TemporalPolicy::CompletionTime) {
            clean = false;
            self.flag(
                Area::Access,
                seq,
                vertex,
                ViolationKind::Malformed,
                "provisional flag contradicts policy",
            );
        }
        let recomputed = match &rec.resource {
            None => Some(Decision::Deny(crate::workflow::DenyReason::UnboundResource)),
            Some(r) => match self.evidence_scope(ev) {
                Ok(scope) => Some(if scope.allows(r, rec.action) {
                    Decision::Allow
                } else {
                    Decision::Deny(crate::workflow::DenyReason::NotAuthorized {
                        resource: r.clone(),
                    })
                }),
                Err(detail) => {
                    // Only an allow needs a derivation to stand on.
                    if recorded_allow {
                        clean = false;
                        self.flag(
                            Area::Access,
                            seq,
                            vertex,
                            ViolationKind::DecisionMismatch,
                            detail,
                        );
                    }
                    None
                }
            },
        };
        if let Some(d) = &recomputed {
            if d != &rec.decision {
                clean = false;
                self.flag(
                    Area::Access,
                    seq,
                    vertex,
                    ViolationKind::DecisionMismatch,
                    format!("recorded {:?}, evidence gives {:?}", rec.decision, d),
                );
            }
        }
        self.accesses.push(AccessVerdict {
            seq,
            vertex: rec.vertex.clone(),
            resource: rec.resource.clone(),
            recorded_allow,
            recomputed_allow: recomputed.map(|d| d.is_allow()),
            clean,
        });
        self.outcome
            .accesses
            .insert(rec.vertex.clone(), recorded_allow);
        if recorded_allow {
            self.allowed.insert(rec.vertex.clone());
            if let Some(r) = &rec.resource {
                self.access_resource.insert(rec.vertex.clone(), r.clone());
                if rec.provisional {
                    self.provisional.push((rec.vertex.clone(), r.clone()));
                }
            }
        }
    }

    fn kind_of(&self, vertex: &VertexId) -> Option<VertexKind> {
        self.init
            .as_ref()?
            .graph
            .vertex(vertex)
            .map(|v| v.kind.clone())
    }

    /// Union of the artifacts produced by the vertex's predecessors.
    fn input_provenance(&self, vertex: &VertexId) -> (BTreeSet<ArtifactId>, ProvenanceSet) {
        let Some(init) = &self.init else {
            return Default::default();
        };
        let inputs: Vec<&DataArtifact> = init
            .graph
            .predecessors(vertex)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter_map(|p| self.artifacts.get(p))
            .collect();
        (
            inputs.iter().map(|a| a.id.clone()).collect(),
            provenance_union(inputs.iter().map(|a| &a.provenance)),
        )
    }

    fn artifact(&mut self, seq: u64, vertex: &VertexId, artifact: &DataArtifact) {
        let v = Some(vertex);
        if &artifact.produced_by != vertex || artifact.workflow_id != self.header.workflow_id {
            self.flag(
                Area::Aggregation,
                seq,
                v,
                ViolationKind::Malformed,
                "artifact attribution mismatch",
            );
        }
        let kind = self.kind_of(vertex);
        let permitted = match kind {
            Some(VertexKind::Retrieve { .. }) | Some(VertexKind::Synthesize) => {
                self.allowed.contains(vertex)
            }
            Some(VertexKind::Transform) => self.valid.get(vertex) == Some(&true),
            _ => false,
        };
        if !permitted {
            self.flag(
                Area::Access,
                seq,
                v,
                ViolationKind::FailOpen,
                "artifact produced without a recorded allow",
            );
        }
        let (inputs, provenance) = match kind {
            Some(VertexKind::Retrieve { .. }) => (
                BTreeSet::new(),
                self.access_resource
                    .get(vertex)
                    .cloned()
                    .map(ProvenanceSet::single)
                    .unwrap_or_default(),
            ),
            _ => self.input_provenance(vertex),
        };
        let recorded_inputs: BTreeSet<ArtifactId> = artifact.inputs.iter().cloned().collect();
        if recorded_inputs != inputs || artifact.provenance != provenance {
            self.flag(
                Area::Aggregation,
                seq,
                v,
                ViolationKind::ProvenanceUnsound,
                format!(
                    "provenance {} should be {}",
                    artifact.provenance, provenance
                ),
            );
        }
        self.artifacts.insert(vertex.clone(), artifact.clone());
    }

    fn synthesis(&mut self, seq: u64, tick: LogicalTime, rec: &SynthesisRecord) {
        let vertex = Some(&rec.vertex);
        if rec.decision.is_allow() && self.valid.get(&rec.vertex) != Some(&true) {
            self.flag(
                Area::Aggregation,
                seq,
                vertex,
                ViolationKind::FailOpen,
                "synthesis allowed without a valid token check",
            );
        }
        let (_, provenance) = self.input_provenance(&rec.vertex);
        if provenance != rec.provenance {
            self.flag(
                Area::Aggregation,
                seq,
                vertex,
                ViolationKind::ProvenanceUnsound,
                "synthesis provenance is not the union of its inputs",
            );
        }
        if rec.labels.keys().collect::<BTreeSet<_>>()
            != rec.provenance.iter().collect::<BTreeSet<_>>()
        {
            self.flag(
                Area::Aggregation,
                seq,
                vertex,
                ViolationKind::Malformed,
                "label index does not cover provenance",
            );
        }
        let ev = &rec.evidence;
        if let Err((kind, detail)) = self.presented(&ev.binding, &ev.token) {
            self.flag(Area::Aggregation, seq, vertex, kind, detail);
        }
        if let Some(detail) = self.stale(&ev.snapshot, ev.eval_time, self.policy_time(tick)) {
            self.flag(
                Area::Aggregation,
                seq,
                vertex,
                ViolationKind::StaleAuthority,
                detail,
            );
        }
        let missing: Option<BTreeSet<ResourceId>> = match self.evidence_scope(ev) {
            Ok(scope) => Some(
                rec.provenance
                    .iter()
                    .filter(|r| !scope.allows(r, Action::Read))
                    .cloned()
                    .collect(),
            ),
            Err(detail) => {
                if rec.decision.is_allow() {
                    self.flag(
                        Area::Aggregation,
                        seq,
                        vertex,
                        ViolationKind::DecisionMismatch,
                        detail,
                    );
                }
                None
            }
        };
        let Some(init) = &self.init else { return };
        let policy = &init.aggregation_policy;
        let agent_aggregation =
            check_combination_with(policy, &rec.agent, &rec.provenance, &rec.labels);
        let mut recipients_set = init.graph.downstream_recipients(&rec.vertex);
        if recipients_set.is_empty() {
            recipients_set.insert(init.graph.initiator.clone());
        }
        let recipients: BTreeMap<PrincipalId, CombinationDecision> = recipients_set
            .into_iter()
            .map(|p| {
                let d = check_combination_with(policy, &p, &rec.provenance, &rec.labels);
                (p, d)
            })
            .collect();
        if agent_aggregation != rec.agent_aggregation || recipients != rec.recipients {
            self.flag(
                Area::Aggregation,
                seq,
                vertex,
                ViolationKind::DecisionMismatch,
                "combination checks differ from recomputation",
            );
        }
        if let Some(missing) = missing {
            if missing != rec.agent_missing {
                self.flag(
                    Area::Aggregation,
                    seq,
                    vertex,
                    ViolationKind::DecisionMismatch,
                    "agent authority differs from recomputation",
                );
            }
            let decision =
                synthesis_decision(&rec.agent, &missing, &agent_aggregation, &recipients);
            if decision != rec.decision {
                self.flag(
                    Area::Aggregation,
                    seq,
                    vertex,
                    ViolationKind::DecisionMismatch,
                    format!("recorded {:?}, evidence gives {:?}", rec.decision, decision),
                );
            }
        }
        if rec.decision.is_allow() {
            self.allowed.insert(rec.vertex.clone());
        }
    }

    fn delivery_decided(&mut self, seq: u64, tick: LogicalTime, rec: &DeliveryRecord) {
        let vertex = Some(&rec.vertex);
        if rec.decision.is_allow() && self.valid.get(&rec.vertex) != Some(&true) {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::FailOpen,
                "delivery allowed without a valid token check",
            );
        }
        match self.kind_of(&rec.vertex) {
            Some(VertexKind::Return { recipient }) if recipient == rec.recipient.id => {}
            _ => self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::Malformed,
                "recipient does not match the graph",
            ),
        }
        let (_, provenance) = self.input_provenance(&rec.vertex);
        if provenance != rec.provenance {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::ProvenanceUnsound,
                "delivery provenance is not the union of its inputs",
            );
        }
        let expected = match self.policy() {
            TemporalPolicy::InitiationTime => self.t0(),
            _ => tick,
        };
        if let Some(detail) = self.stale(&rec.snapshot, rec.eval_time, expected) {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::StaleAuthority,
                detail,
            );
        }
        let Some(init) = self.init.clone() else {
            return;
        };
        let check = delivery_check(
            &rec.recipient,
            &rec.provenance,
            &rec.snapshot,
            rec.eval_time,
            &init.aggregation_policy,
            &rec.labels,
        );
        if check.missing != rec.recipient_missing || check.aggregation != rec.aggregation {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::DecisionMismatch,
                "delivery check differs from recomputation",
            );
        }
        let wanted: Vec<(VertexId, ResourceId)> = if self.policy() == TemporalPolicy::CompletionTime
        {
            let ancestors = init.graph.ancestors(&rec.vertex);
            self.provisional
                .iter()
                .filter(|(v, _)| ancestors.contains(v))
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        let got: Vec<(VertexId, ResourceId)> = rec
            .rechecks
            .iter()
            .map(|c| (c.vertex.clone(), c.resource.clone()))
            .collect();
        if wanted != got {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::StaleAuthority,
                "provisional accesses were not all re-evaluated at delivery",
            );
        }
        for c in &rec.rechecks {
            if let Some(detail) = self.stale(&c.evidence.snapshot, c.evidence.eval_time, tick) {
                self.flag(
                    Area::Delivery,
                    seq,
                    vertex,
                    ViolationKind::StaleAuthority,
                    detail,
                );
            }
            let allowed = self
                .evidence_scope(&c.evidence)
                .map(|s| s.allows(&c.resource, Action::Read))
                .unwrap_or(false);
            if allowed != c.allowed {
                self.flag(
                    Area::Delivery,
                    seq,
                    vertex,
                    ViolationKind::DecisionMismatch,
                    format!("recheck of {} differs", c.vertex),
                );
            }
        }
        let decision = delivery_decision(&check, &rec.rechecks);
        if decision != rec.decision {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::DecisionMismatch,
                format!("recorded {:?}, evidence gives {:?}", rec.decision, decision),
            );
        }
        if rec.decision.is_allow() {
            self.deliverable
                .insert(rec.vertex.clone(), rec.provenance.clone());
        }
    }

    fn delivered(&mut self, seq: u64, rec: &DeliveredRecord) {
        let vertex = Some(&rec.vertex);
        match self.deliverable.remove(&rec.vertex) {
            None => self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::FailOpen,
                "delivered without an allow decision",
            ),
            Some(p) if p != rec.artifact.provenance => self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::ProvenanceUnsound,
                "delivered provenance differs from the decision",
            ),
            Some(_) => {}
        }
        let disclosure_ok = match &rec.disclosure {
            None => self.excluded.is_empty(),
            Some(d) => d.excluded == self.excluded && !d.excluded.is_empty(),
        };
        if !disclosure_ok {
            self.flag(
                Area::Delivery,
                seq,
                vertex,
                ViolationKind::DisclosureMissing,
                "completeness disclosure does not match exclusions",
            );
        }
        self.outcome.delivered.push(Delivery {
            recipient: rec.recipient.clone(),
            artifact: rec.artifact.clone(),
            disclosure: rec.disclosure.clone(),
        });
    }
}

// ---- taint --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintReport {
    pub origin: u64,
    pub origin_vertex: VertexId,
    pub tainted_vertices: BTreeSet<VertexId>,
    pub tainted_artifacts: BTreeSet<ArtifactId>,
    /// Delivered artifacts derived from the origin, flagged for review.
    pub delivered_tainted: Vec<(PrincipalId, ArtifactId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaintError {
    #[error("record {0} is not an access decision")]
    NotAnAccessRecord(u64),
}

/// Everything derived, through recorded dataflow, from the access at `origin`.
pub fn taint(trace: &WorkflowTrace, origin: u64) -> Result<TaintReport, TaintError> {
    let origin_vertex = match trace.get(origin).map(|r| &r.event) {
        Some(TraceEvent::AccessDecided(rec)) => rec.vertex.clone(),
        _ => return Err(TaintError::NotAnAccessRecord(origin)),
    };
    let mut vertices = BTreeSet::from([origin_vertex.clone()]);
    let mut artifacts = BTreeSet::new();
    let mut delivered = Vec::new();
    for r in &trace.records[origin as usize..] {
        match &r.event {
            TraceEvent::ArtifactProduced(rec) => {
                let derived = rec.vertex == origin_vertex
                    || rec.artifact.inputs.iter().any(|i| artifacts.contains(i));
                if derived {
                    vertices.insert(rec.vertex.clone());
                    artifacts.insert(rec.artifact.id.clone());
                }
            }
            TraceEvent::Delivered(rec)
                if rec.artifact.inputs.iter().any(|i| artifacts.contains(i)) =>
            {
                vertices.insert(rec.vertex.clone());
                artifacts.insert(rec.artifact.id.clone());
                delivered.push((rec.recipient.clone(), rec.artifact.id.clone()));
            }
            _ => {}
        }
    }
    Ok(TaintReport {
        origin,
        origin_vertex,
        tainted_vertices: vertices,
        tainted_artifacts: artifacts,
        delivered_tainted: delivered,
    })
}

/// Sequence numbers of every access decision, in trace order.
pub fn access_records(trace: &WorkflowTrace) -> Vec<(u64, VertexId)> {
    trace
        .records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::AccessDecided(a) => Some((r.seq, a.vertex.clone())),
            _ => None,
        })
        .collect()
}

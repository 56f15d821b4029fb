//! Workflow-scoped, hash-chained authorization traces.
//!
//! Each record's digest is `H(prev_digest || canonical(seq, tick, event))`
//! with `prev_digest` of record 0 equal to [`Digest::ZERO`]. Decision records
//! carry everything needed to recompute the decision offline: the tuple
//! slice, the delegation chain, the catalog entries of the principals
//! involved and the effective-authority derivation.
//!
//! # File layout
//!
//! ```text
//! magic    "APTRACE1"
//! u32 LE   header length, header bytes (canonical), 32-byte header digest
//! repeat:  u8 0x01, u32 LE record length, record bytes, prev digest, digest
//! trailer: u8 0xFF, u64 LE record count, 32-byte digest of the last record
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationPolicy, CombinationDecision, LabelIndex, ProvenanceSet};
use crate::delegation::{
    CoherenceEntry, DelegationToken, Derivation, RevocationEvent, ValidityOutcome, ValiditySpec,
    WorkflowId,
};
use crate::digest::{canonical, decode_canonical, Digest, DIGEST_ALGORITHM};
use crate::model::{Action, Principal, PrincipalId, ResourceId, Scope};
use crate::store::{AuthorizationTuple, LogicalTime, TupleId, TupleSnapshot};
use crate::workflow::{
    CompletenessDisclosure, DataArtifact, DenyReason, ExecutionStatus, OnDeny, TemporalPolicy,
    TokenRef, VertexId, WorkflowGraph,
};

pub const TRACE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"APTRACE1";
const RECORD_TAG: u8 = 0x01;
const TRAILER_TAG: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub digest_algorithm: String,
    pub workflow_id: WorkflowId,
    pub initiator: PrincipalId,
    pub temporal_policy: TemporalPolicy,
    pub catalog_digest: Digest,
}

impl TraceHeader {
    pub fn new(
        workflow_id: WorkflowId,
        initiator: PrincipalId,
        temporal_policy: TemporalPolicy,
        catalog_digest: Digest,
    ) -> Self {
        Self {
            format_version: TRACE_FORMAT_VERSION,
            digest_algorithm: DIGEST_ALGORITHM.to_string(),
            workflow_id,
            initiator,
            temporal_policy,
            catalog_digest,
        }
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&canonical(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Initiation {
    pub t0: LogicalTime,
    pub on_deny: OnDeny,
    pub attestation_required: bool,
    pub depth_limit: u32,
    pub graph: WorkflowGraph,
    pub aggregation_policy: AggregationPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingOutcome {
    Bound,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub binding: TokenRef,
    pub parent: Option<TokenRef>,
    pub requested_subject: PrincipalId,
    pub requested_scope: Scope,
    pub validity: ValiditySpec,
    pub token: Option<DelegationToken>,
    /// Catalog entries of every principal the chain names.
    pub principals: Vec<Principal>,
    /// Initiator's tuples at mint time for the requested root scope.
    pub initiator_slice: Option<TupleSnapshot>,
    pub outcome: BindingOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionBinding {
    Bound,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityRecord {
    pub vertex: VertexId,
    pub binding: TokenRef,
    /// The chain actually presented, absent when the binding never resolved.
    pub token: Option<DelegationToken>,
    /// Coherence-cache key together with the token id.
    pub holder: PrincipalId,
    pub session: SessionBinding,
    pub prior: Option<CoherenceEntry>,
    /// Revocation events bearing on the token, effective at this tick.
    pub registry_events: Vec<RevocationEvent>,
    pub outcome: Option<ValidityOutcome>,
}

/// Everything needed to recompute one effective-authority decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorityEvidence {
    pub binding: TokenRef,
    pub token: DelegationToken,
    pub principals: Vec<Principal>,
    pub eval_time: LogicalTime,
    pub snapshot: TupleSnapshot,
    pub derivation: Option<Derivation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub vertex: VertexId,
    pub agent: PrincipalId,
    pub resource: Option<ResourceId>,
    pub action: Action,
    pub provisional: bool,
    pub evidence: AuthorityEvidence,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub vertex: VertexId,
    pub artifact: DataArtifact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub vertex: VertexId,
    pub agent: PrincipalId,
    pub provenance: ProvenanceSet,
    pub labels: LabelIndex,
    pub provisional: bool,
    pub evidence: AuthorityEvidence,
    /// Provenance resources the agent may not read.
    pub agent_missing: BTreeSet<ResourceId>,
    pub agent_aggregation: CombinationDecision,
    pub recipients: BTreeMap<PrincipalId, CombinationDecision>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionalRecheck {
    pub vertex: VertexId,
    pub resource: ResourceId,
    pub evidence: AuthorityEvidence,
    pub allowed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub vertex: VertexId,
    pub recipient: Principal,
    pub eval_time: LogicalTime,
    pub provenance: ProvenanceSet,
    pub labels: LabelIndex,
    pub snapshot: TupleSnapshot,
    pub recipient_missing: BTreeSet<ResourceId>,
    pub aggregation: CombinationDecision,
    pub rechecks: Vec<ProvisionalRecheck>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredRecord {
    pub vertex: VertexId,
    pub recipient: PrincipalId,
    pub artifact: DataArtifact,
    pub disclosure: Option<CompletenessDisclosure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RevocationChange {
    Tuple {
        id: TupleId,
        tuple: AuthorizationTuple,
        at: LogicalTime,
    },
    Registry(RevocationEvent),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub vertex: Option<VertexId>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Initiated(Initiation),
    TokenMinted(TokenRecord),
    Attenuated(TokenRecord),
    ValidityChecked(ValidityRecord),
    AccessDecided(AccessRecord),
    ArtifactProduced(ArtifactRecord),
    SynthesisDecided(SynthesisRecord),
    DeliveryDecided(DeliveryRecord),
    Delivered(DeliveredRecord),
    RevocationObserved(RevocationChange),
    PolicyViolation(ViolationRecord),
    VertexSkipped {
        vertex: VertexId,
        reason: DenyReason,
    },
    Finished(ExecutionStatus),
}

impl TraceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TraceEvent::Initiated(_) => "Initiated",
            TraceEvent::TokenMinted(_) => "TokenMinted",
            TraceEvent::Attenuated(_) => "Attenuated",
            TraceEvent::ValidityChecked(_) => "ValidityChecked",
            TraceEvent::AccessDecided(_) => "AccessDecided",
            TraceEvent::ArtifactProduced(_) => "ArtifactProduced",
            TraceEvent::SynthesisDecided(_) => "SynthesisDecided",
            TraceEvent::DeliveryDecided(_) => "DeliveryDecided",
            TraceEvent::Delivered(_) => "Delivered",
            TraceEvent::RevocationObserved(_) => "RevocationObserved",
            TraceEvent::PolicyViolation(_) => "PolicyViolation",
            TraceEvent::VertexSkipped { .. } => "VertexSkipped",
            TraceEvent::Finished(_) => "Finished",
        }
    }

    /// The vertex a record is about, if any.
    pub fn vertex(&self) -> Option<&VertexId> {
        match self {
            TraceEvent::ValidityChecked(r) => Some(&r.vertex),
            TraceEvent::AccessDecided(r) => Some(&r.vertex),
            TraceEvent::ArtifactProduced(r) => Some(&r.vertex),
            TraceEvent::SynthesisDecided(r) => Some(&r.vertex),
            TraceEvent::DeliveryDecided(r) => Some(&r.vertex),
            TraceEvent::Delivered(r) => Some(&r.vertex),
            TraceEvent::PolicyViolation(r) => r.vertex.as_ref(),
            TraceEvent::VertexSkipped { vertex, .. } => Some(vertex),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub tick: LogicalTime,
    pub event: TraceEvent,
    pub prev_digest: Digest,
    pub digest: Digest,
}

#[derive(Serialize)]
struct RecordBody<'a> {
    seq: u64,
    tick: LogicalTime,
    event: &'a TraceEvent,
}

#[derive(Deserialize)]
struct OwnedRecordBody {
    seq: u64,
    tick: LogicalTime,
    event: TraceEvent,
}

impl TraceRecord {
    pub fn body_bytes(&self) -> Vec<u8> {
        canonical(&RecordBody {
            seq: self.seq,
            tick: self.tick,
            event: &self.event,
        })
    }

    pub fn expected_digest(&self) -> Digest {
        Digest::chain(&self.prev_digest, &self.body_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("malformed trace at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("trace integrity broken: {0}")]
    Broken(IntegrityVerdict),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegrityVerdict {
    Intact,
    /// First position whose digest chain does not verify.
    BrokenAt(u64),
    HeaderTampered,
}

impl IntegrityVerdict {
    pub fn is_intact(&self) -> bool {
        matches!(self, IntegrityVerdict::Intact)
    }
}

impl fmt::Display for IntegrityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegrityVerdict::Intact => f.write_str("intact"),
            IntegrityVerdict::BrokenAt(seq) => write!(f, "broken at record {seq}"),
            IntegrityVerdict::HeaderTampered => f.write_str("header digest mismatch"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub header: TraceHeader,
    pub header_digest: Digest,
    pub records: Vec<TraceRecord>,
}

impl WorkflowTrace {
    pub fn new(header: TraceHeader) -> Self {
        let header_digest = header.digest();
        Self {
            header,
            header_digest,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_digest(&self) -> Digest {
        self.records.last().map_or(Digest::ZERO, |r| r.digest)
    }

    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    /// Appends a record with an explicit sequence number.
    pub fn append(
        &mut self,
        seq: u64,
        tick: LogicalTime,
        event: TraceEvent,
    ) -> Result<&TraceRecord, TraceError> {
        let expected = self.next_seq();
        if seq != expected {
            return Err(TraceError::SequenceGap { expected, got: seq });
        }
        let mut record = TraceRecord {
            seq,
            tick,
            event,
            prev_digest: self.last_digest(),
            digest: Digest::ZERO,
        };
        record.digest = record.expected_digest();
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Appends at the next sequence number and returns it.
    pub fn push(&mut self, tick: LogicalTime, event: TraceEvent) -> u64 {
        let seq = self.next_seq();
        self.append(seq, tick, event)
            .expect("next_seq is never a gap");
        seq
    }

    pub fn get(&self, seq: u64) -> Option<&TraceRecord> {
        self.records.get(seq as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = canonical(&self.header);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.header_digest.0);
        for r in &self.records {
            let body = r.body_bytes();
            out.push(RECORD_TAG);
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
            out.extend_from_slice(&r.prev_digest.0);
            out.extend_from_slice(&r.digest.0);
        }
        out.push(TRAILER_TAG);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.last_digest().0);
        out
    }

    /// Parses and verifies a trace file. Fails on malformed framing and on
    /// any digest mismatch.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        let frames = Frames::parse(bytes)?;
        let verdict = frames.verify();
        if !verdict.is_intact() {
            return Err(TraceError::Broken(verdict));
        }
        frames.decode()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "export": "lossy: canonical bytes are not reproducible from this JSON; verify the binary trace",
            "header": self.header,
            "header_digest": self.header_digest,
            "records": self.records,
        })
    }
}

/// Recomputes the header digest and every record digest.
pub fn verify_integrity(trace: &WorkflowTrace) -> IntegrityVerdict {
    if trace.header.digest() != trace.header_digest {
        return IntegrityVerdict::HeaderTampered;
    }
    let mut prev = Digest::ZERO;
    for (i, r) in trace.records.iter().enumerate() {
        if r.seq != i as u64 || r.prev_digest != prev || r.expected_digest() != r.digest {
            return IntegrityVerdict::BrokenAt(i as u64);
        }
        prev = r.digest;
    }
    IntegrityVerdict::Intact
}

/// Integrity of a serialized trace, checked on the raw frames before any
/// record is decoded.
pub fn verify_bytes(bytes: &[u8]) -> Result<IntegrityVerdict, TraceError> {
    Ok(Frames::parse(bytes)?.verify())
}

struct Frame<'a> {
    body: &'a [u8],
    prev: Digest,
    digest: Digest,
}

struct Frames<'a> {
    header: &'a [u8],
    header_digest: Digest,
    records: Vec<Frame<'a>>,
    tip: Digest,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TraceError> {
        if self.bytes.len() - self.pos < n {
            return Err(TraceError::Malformed {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, TraceError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn digest(&mut self, what: &str) -> Result<Digest, TraceError> {
        Ok(Digest(self.take(32, what)?.try_into().expect("32 bytes")))
    }
}

impl<'a> Frames<'a> {
    fn parse(bytes: &'a [u8]) -> Result<Self, TraceError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(TraceError::Malformed {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let hlen = r.u32("header length")? as usize;
        let header = r.take(hlen, "header")?;
        let header_digest = r.digest("header digest")?;
        let mut records = Vec::new();
        loop {
            let at = r.pos;
            match r.u8("record tag")? {
                RECORD_TAG => {
                    let len = r.u32("record length")? as usize;
                    let body = r.take(len, "record body")?;
                    let prev = r.digest("prev digest")?;
                    let digest = r.digest("digest")?;
                    records.push(Frame { body, prev, digest });
                }
                TRAILER_TAG => {
                    let count = r.u64("record count")?;
                    let tip = r.digest("tip digest")?;
                    if count != records.len() as u64 {
                        return Err(TraceError::Malformed {
                            offset: at,
                            reason: format!("trailer count {count} != {} records", records.len()),
                        });
                    }
                    if r.pos != bytes.len() {
                        return Err(TraceError::Malformed {
                            offset: r.pos,
                            reason: "trailing bytes".into(),
                        });
                    }
                    return Ok(Frames {
                        header,
                        header_digest,
                        records,
                        tip,
                    });
                }
                tag => {
                    return Err(TraceError::Malformed {
                        offset: at,
                        reason: format!("unknown frame tag {tag:#04x}"),
                    })
                }
            }
        }
    }

    fn verify(&self) -> IntegrityVerdict {
        if Digest::of(self.header) != self.header_digest {
            return IntegrityVerdict::HeaderTampered;
        }
        let mut prev = Digest::ZERO;
        for (i, f) in self.records.iter().enumerate() {
            if f.prev != prev || Digest::chain(&f.prev, f.body) != f.digest {
                return IntegrityVerdict::BrokenAt(i as u64);
            }
            // The sequence number is the first field of the body.
            let seq = f
                .body
                .get(..8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")));
            if seq != Some(i as u64) {
                return IntegrityVerdict::BrokenAt(i as u64);
            }
            prev = f.digest;
        }
        if self.tip != prev {
            return IntegrityVerdict::BrokenAt(self.records.len() as u64);
        }
        IntegrityVerdict::Intact
    }

    fn decode(&self) -> Result<WorkflowTrace, TraceError> {
        let malformed = |reason: String| TraceError::Malformed { offset: 0, reason };
        let header: TraceHeader =
            decode_canonical(self.header).map_err(|e| malformed(format!("header: {e}")))?;
        let mut records = Vec::with_capacity(self.records.len());
        for (i, f) in self.records.iter().enumerate() {
            let body: OwnedRecordBody =
                decode_canonical(f.body).map_err(|e| malformed(format!("record {i}: {e}")))?;
            records.push(TraceRecord {
                seq: body.seq,
                tick: body.tick,
                event: body.event,
                prev_digest: f.prev,
                digest: f.digest,
            });
        }
        Ok(WorkflowTrace {
            header,
            header_digest: self.header_digest,
            records,
        })
    }
}

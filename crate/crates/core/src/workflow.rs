//! Workflow graphs and the reference monitor that executes them.
//!
//! An [`Execution`] walks the DAG one vertex per tick. Initiation and the
//! delegation plan run at `t0`, the store clock when the execution starts;
//! vertex `k` of the schedule runs at `t0 + 1 + k`. Every decision is
//! appended to the trace before its effect.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    check_combination_with, label_index, provenance_union, AggregationPolicy, CombinationDecision,
    LabelIndex, ProvenanceSet,
};
use crate::delegation::{
    attenuate, check_validity, effective_authority, mint_root, unchecked_root, CoherenceState,
    DelegationToken, RevocationRegistry, RevocationTarget, TokenId, ValiditySpec, WorkflowId,
};
use crate::digest::{canonical, Digest};
use crate::model::{string_id, Action, Catalog, Grant, Principal, PrincipalId, ResourceId, Scope};
use crate::store::{AuthView, LogicalTime, StoreError, TupleId, TupleSnapshot, TupleStore};
use crate::trace::{
    AccessRecord, ArtifactRecord, AuthorityEvidence, BindingOutcome, Decision, DeliveredRecord,
    DeliveryRecord, Initiation, ProvisionalRecheck, RevocationChange, SessionBinding,
    SynthesisRecord, TokenRecord, TraceEvent, TraceHeader, ValidityRecord, ViolationRecord,
    WorkflowTrace,
};

string_id!(VertexId);
string_id!(ArtifactId);
string_id!(
    /// Name under which the delegation plan binds a token.
    TokenRef
);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexKind {
    /// `resource` may be left unset and bound later by a scripted event.
    Retrieve {
        resource: Option<ResourceId>,
    },
    Transform,
    Synthesize,
    Return {
        recipient: PrincipalId,
    },
}

impl VertexKind {
    pub fn name(&self) -> &'static str {
        match self {
            VertexKind::Retrieve { .. } => "retrieve",
            VertexKind::Transform => "transform",
            VertexKind::Synthesize => "synthesize",
            VertexKind::Return { .. } => "return",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVertex {
    pub id: VertexId,
    pub kind: VertexKind,
    pub agent: PrincipalId,
    pub token: TokenRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub workflow_id: WorkflowId,
    pub initiator: PrincipalId,
    pub vertices: Vec<ActionVertex>,
    pub edges: Vec<(VertexId, VertexId)>,
}

impl WorkflowGraph {
    pub fn vertex(&self, id: &VertexId) -> Option<&ActionVertex> {
        self.vertices.iter().find(|v| &v.id == id)
    }

    pub fn predecessors<'a>(&'a self, id: &'a VertexId) -> impl Iterator<Item = &'a VertexId> + 'a {
        self.edges
            .iter()
            .filter(move |(_, to)| to == id)
            .map(|(from, _)| from)
    }

    pub fn successors<'a>(&'a self, id: &'a VertexId) -> impl Iterator<Item = &'a VertexId> + 'a {
        self.edges
            .iter()
            .filter(move |(from, _)| from == id)
            .map(|(_, to)| to)
    }

    /// Vertices reachable from `id` along dataflow edges, including `id`.
    pub fn reachable_from(&self, id: &VertexId) -> BTreeSet<VertexId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.clone()];
        while let Some(v) = stack.pop() {
            if seen.insert(v.clone()) {
                stack.extend(self.successors(&v).cloned());
            }
        }
        seen
    }

    /// Vertices from which `id` is reachable, excluding `id`.
    pub fn ancestors(&self, id: &VertexId) -> BTreeSet<VertexId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<VertexId> = self.predecessors(id).cloned().collect();
        while let Some(v) = stack.pop() {
            if seen.insert(v.clone()) {
                stack.extend(self.predecessors(&v).cloned());
            }
        }
        seen
    }

    /// Recipients of the Return vertices reachable from `id`.
    pub fn downstream_recipients(&self, id: &VertexId) -> BTreeSet<PrincipalId> {
        self.reachable_from(id)
            .iter()
            .filter_map(|v| match &self.vertex(v)?.kind {
                VertexKind::Return { recipient } => Some(recipient.clone()),
                _ => None,
            })
            .collect()
    }

    /// Execution order: topological, Return vertices after every other
    /// vertex, ties broken by ascending id. `None` if the graph has a cycle.
    pub fn schedule(&self) -> Option<Vec<VertexId>> {
        let mut indegree: BTreeMap<&VertexId, usize> =
            self.vertices.iter().map(|v| (&v.id, 0)).collect();
        let edges: BTreeSet<(&VertexId, &VertexId)> =
            self.edges.iter().map(|(a, b)| (a, b)).collect();
        for (_, to) in &edges {
            *indegree.get_mut(to)? += 1;
        }
        let key = |id: &VertexId| {
            let is_return = matches!(
                self.vertex(id).map(|v| &v.kind),
                Some(VertexKind::Return { .. })
            );
            (is_return, id.clone())
        };
        let mut ready: BTreeSet<(bool, VertexId)> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| key(id))
            .collect();
        let mut order = Vec::with_capacity(self.vertices.len());
        while let Some(next) = ready.pop_first() {
            let id = next.1;
            for (from, to) in &edges {
                if *from == &id {
                    let d = indegree.get_mut(to).expect("validated endpoint");
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(key(to));
                    }
                }
            }
            order.push(id);
        }
        (order.len() == indegree.len()).then_some(order)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum DagViolation {
    DuplicateVertex {
        vertex: VertexId,
    },
    DanglingEdge {
        from: VertexId,
        to: VertexId,
    },
    /// Vertices left unscheduled because they sit on or behind a cycle.
    Cycle {
        vertices: Vec<VertexId>,
    },
    RetrieveHasInput {
        vertex: VertexId,
    },
    ReturnHasOutput {
        vertex: VertexId,
    },
    NoReturn,
}

impl fmt::Display for DagViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DagViolation::DuplicateVertex { vertex } => write!(f, "duplicate vertex {vertex}"),
            DagViolation::DanglingEdge { from, to } => {
                write!(f, "edge {from} -> {to} names a missing vertex")
            }
            DagViolation::Cycle { vertices } => {
                let names: Vec<&str> = vertices.iter().map(|v| v.as_str()).collect();
                write!(f, "cycle through {}", names.join(", "))
            }
            DagViolation::RetrieveHasInput { vertex } => {
                write!(f, "retrieve vertex {vertex} has an incoming edge")
            }
            DagViolation::ReturnHasOutput { vertex } => {
                write!(f, "return vertex {vertex} has an outgoing edge")
            }
            DagViolation::NoReturn => f.write_str("graph has no return vertex"),
        }
    }
}

pub fn validate_dag(graph: &WorkflowGraph) -> Vec<DagViolation> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for v in &graph.vertices {
        if !ids.insert(&v.id) {
            out.push(DagViolation::DuplicateVertex {
                vertex: v.id.clone(),
            });
        }
    }
    let mut dangling = false;
    for (from, to) in &graph.edges {
        if !ids.contains(from) || !ids.contains(to) {
            dangling = true;
            out.push(DagViolation::DanglingEdge {
                from: from.clone(),
                to: to.clone(),
            });
            continue;
        }
        if let Some(VertexKind::Retrieve { .. }) = graph.vertex(to).map(|v| &v.kind) {
            out.push(DagViolation::RetrieveHasInput { vertex: to.clone() });
        }
        if let Some(VertexKind::Return { .. }) = graph.vertex(from).map(|v| &v.kind) {
            out.push(DagViolation::ReturnHasOutput {
                vertex: from.clone(),
            });
        }
    }
    if !dangling
        && out
            .iter()
            .all(|v| !matches!(v, DagViolation::DuplicateVertex { .. }))
    {
        let scheduled: BTreeSet<VertexId> = kahn_leftover(graph);
        if !scheduled.is_empty() {
            out.push(DagViolation::Cycle {
                vertices: scheduled.into_iter().collect(),
            });
        }
    }
    if !graph
        .vertices
        .iter()
        .any(|v| matches!(v.kind, VertexKind::Return { .. }))
    {
        out.push(DagViolation::NoReturn);
    }
    out.sort();
    out.dedup();
    out
}

fn kahn_leftover(graph: &WorkflowGraph) -> BTreeSet<VertexId> {
    let mut indegree: BTreeMap<&VertexId, usize> =
        graph.vertices.iter().map(|v| (&v.id, 0)).collect();
    let edges: BTreeSet<(&VertexId, &VertexId)> = graph.edges.iter().map(|(a, b)| (a, b)).collect();
    for (_, to) in &edges {
        *indegree.get_mut(to).expect("endpoints checked") += 1;
    }
    let mut ready: Vec<&VertexId> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(v, _)| *v)
        .collect();
    let mut done = BTreeSet::new();
    while let Some(v) = ready.pop() {
        done.insert(v.clone());
        for (from, to) in &edges {
            if *from == v {
                let d = indegree.get_mut(to).expect("endpoints checked");
                *d -= 1;
                if *d == 0 {
                    ready.push(to);
                }
            }
        }
    }
    graph
        .vertices
        .iter()
        .map(|v| v.id.clone())
        .filter(|v| !done.contains(v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPolicy {
    InitiationTime,
    AccessTime,
    CompletionTime,
}

impl fmt::Display for TemporalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalPolicy::InitiationTime => "initiation",
            TemporalPolicy::AccessTime => "access",
            TemporalPolicy::CompletionTime => "completion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnDeny {
    FailWorkflow,
    SkipAndMarkPartial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionConfig {
    pub temporal_policy: TemporalPolicy,
    pub on_deny: OnDeny,
}

/// One step of the delegation plan, run at initiation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStep {
    /// Root token held by the initiator. Its lineage id is the binding name.
    Mint {
        bind: TokenRef,
        scope: Scope,
        validity: ValiditySpec,
    },
    Attenuate {
        bind: TokenRef,
        from: TokenRef,
        subject: PrincipalId,
        scope: Scope,
        validity: ValiditySpec,
    },
}

impl PlanStep {
    pub fn bind(&self) -> &TokenRef {
        match self {
            PlanStep::Mint { bind, .. } | PlanStep::Attenuate { bind, .. } => bind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataArtifact {
    pub id: ArtifactId,
    pub workflow_id: WorkflowId,
    pub produced_by: VertexId,
    pub produced_at: LogicalTime,
    pub provenance: ProvenanceSet,
    pub inputs: Vec<ArtifactId>,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    DelegationFailed {
        binding: TokenRef,
    },
    HolderMismatch {
        binding: TokenRef,
        agent: PrincipalId,
    },
    SessionBindingFailed {
        binding: TokenRef,
    },
    TokenRevoked {
        binding: TokenRef,
    },
    InvalidChain {
        binding: TokenRef,
    },
    UnboundResource,
    NotAuthorized {
        resource: ResourceId,
    },
    AgentLacksAuthority {
        missing: BTreeSet<ResourceId>,
    },
    AggregationViolation {
        principal: PrincipalId,
        rule_id: String,
    },
    RecipientNotAuthorized {
        recipient: PrincipalId,
        missing: BTreeSet<ResourceId>,
    },
    ProvisionalAccessRevoked {
        vertex: VertexId,
        resource: ResourceId,
    },
    InputsExcluded,
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::DelegationFailed { binding } => {
                write!(f, "delegation for {binding} failed")
            }
            DenyReason::HolderMismatch { binding, agent } => {
                write!(f, "token {binding} is not held by {agent}")
            }
            DenyReason::SessionBindingFailed { binding } => {
                write!(f, "session binding for {binding} failed (fail-closed)")
            }
            DenyReason::TokenRevoked { binding } => write!(f, "token {binding} revoked"),
            DenyReason::InvalidChain { binding } => {
                write!(f, "token {binding} has an invalid chain")
            }
            DenyReason::UnboundResource => f.write_str("retrieval resource was never bound"),
            DenyReason::NotAuthorized { resource } => write!(f, "no authority to read {resource}"),
            DenyReason::AgentLacksAuthority { missing } => {
                write!(f, "agent lacks authority over {}", join(missing))
            }
            DenyReason::AggregationViolation { principal, rule_id } => {
                write!(f, "combination forbidden for {principal} by rule {rule_id}")
            }
            DenyReason::RecipientNotAuthorized { recipient, missing } => {
                write!(f, "{recipient} may not receive {}", join(missing))
            }
            DenyReason::ProvisionalAccessRevoked { vertex, resource } => {
                write!(
                    f,
                    "provisional access to {resource} at {vertex} no longer authorized"
                )
            }
            DenyReason::InputsExcluded => f.write_str("every input was excluded"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Completed,
    CompletedPartial { excluded: BTreeSet<VertexId> },
    Denied { at: VertexId, reason: DenyReason },
}

impl fmt::Display for ExecutionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionStatus::Completed => f.write_str("completed"),
            ExecutionStatus::CompletedPartial { excluded } => {
                write!(f, "completed partial (excluded: {})", join(excluded))
            }
            ExecutionStatus::Denied { at, reason } => write!(f, "denied at {at}: {reason}"),
        }
    }
}

/// Attached to every delivery of a run that excluded anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletenessDisclosure {
    /// Every vertex excluded from the run.
    pub excluded: BTreeSet<VertexId>,
    /// The excluded vertices upstream of this delivery.
    pub upstream: BTreeSet<VertexId>,
    /// Resources of excluded retrievals upstream of this delivery.
    pub withheld_resources: BTreeSet<ResourceId>,
}

impl fmt::Display for CompletenessDisclosure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "partial result; excluded upstream: [{}]",
            join(&self.upstream)
        )?;
        if !self.withheld_resources.is_empty() {
            write!(
                f,
                "; withheld sources: [{}]",
                join(&self.withheld_resources)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub recipient: PrincipalId,
    pub artifact: DataArtifact,
    pub disclosure: Option<CompletenessDisclosure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    pub delivered: Vec<Delivery>,
    /// Recorded access decision of every Retrieve vertex that reached one.
    pub accesses: BTreeMap<VertexId, bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutionError {
    #[error("invalid graph: {}", join(.0))]
    InvalidGraph(Vec<DagViolation>),
    #[error("token reference {0} is not bound by the delegation plan")]
    UnboundToken(TokenRef),
    #[error("invalid delegation plan: {0}")]
    InvalidPlan(String),
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("execution is terminal")]
    Terminal,
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Injected failure modes. Only the simulator sets these.
#[derive(Debug, Clone, Default)]
pub(crate) struct Faults {
    pub legacy: bool,
    /// Bindings whose session binding fails when a vertex presents them.
    pub session_failures: BTreeSet<TokenRef>,
    /// Attenuations whose session binding fails at plan time.
    pub nominal: BTreeSet<TokenRef>,
    /// Legacy mode reuses earlier authorization results for repeat accesses.
    pub stale_reuse: bool,
}

#[derive(Debug, Clone)]
enum Binding {
    Bound(DelegationToken),
    Failed,
    /// Legacy only: the token actually presented differs from the one the
    /// trace says was bound.
    Substituted(DelegationToken),
}

#[derive(Debug, Clone, Copy)]
enum EvalPoint {
    /// Against the snapshot frozen at `t0`.
    Frozen,
    Live(LogicalTime),
}

/// A workflow in progress.
#[derive(Debug, Clone)]
pub struct Execution {
    catalog: Catalog,
    graph: WorkflowGraph,
    config: ExecutionConfig,
    aggregation: AggregationPolicy,
    store: TupleStore,
    registry: RevocationRegistry,
    coherence: CoherenceState,
    t0: LogicalTime,
    frozen: TupleSnapshot,
    order: Vec<VertexId>,
    cursor: usize,
    bindings: BTreeMap<TokenRef, Binding>,
    resources: BTreeMap<VertexId, ResourceId>,
    artifacts: BTreeMap<VertexId, DataArtifact>,
    excluded: BTreeSet<VertexId>,
    provisional: Vec<(VertexId, ResourceId)>,
    accesses: BTreeMap<VertexId, bool>,
    delivered: Vec<Delivery>,
    status: Option<ExecutionStatus>,
    stale: BTreeMap<(PrincipalId, ResourceId), AuthorityEvidence>,
    trace: WorkflowTrace,
    pub(crate) faults: Faults,
}

fn merge_slices(slices: impl IntoIterator<Item = TupleSnapshot>) -> TupleSnapshot {
    let mut at = LogicalTime::ZERO;
    let mut depth_limit = 0;
    let mut tuples = BTreeMap::new();
    for s in slices {
        at = s.at;
        depth_limit = s.depth_limit;
        tuples.extend(s.tuples);
    }
    TupleSnapshot {
        at,
        depth_limit,
        tuples: tuples.into_iter().collect(),
    }
}

pub fn catalog_digest(catalog: &Catalog) -> Digest {
    Digest::of(&canonical(catalog))
}

impl Execution {
    /// Validates the inputs, records initiation and runs the delegation plan
    /// at the store's current clock.
    pub fn start(
        catalog: &Catalog,
        graph: &WorkflowGraph,
        config: ExecutionConfig,
        aggregation: &AggregationPolicy,
        store: TupleStore,
        plan: &[PlanStep],
        registry: RevocationRegistry,
    ) -> Result<Self, ExecutionError> {
        Self::start_with(
            catalog,
            graph,
            config,
            aggregation,
            store,
            plan,
            registry,
            Faults::default(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn start_with(
        catalog: &Catalog,
        graph: &WorkflowGraph,
        config: ExecutionConfig,
        aggregation: &AggregationPolicy,
        store: TupleStore,
        plan: &[PlanStep],
        registry: RevocationRegistry,
        faults: Faults,
    ) -> Result<Self, ExecutionError> {
        let violations = validate_dag(graph);
        if !violations.is_empty() {
            return Err(ExecutionError::InvalidGraph(violations));
        }
        check_references(catalog, graph, plan)?;
        aggregation
            .validate()
            .map_err(|e| ExecutionError::InvalidPlan(e.to_string()))?;
        let t0 = store.clock();
        let frozen = store.snapshot_at(t0)?;
        let header = TraceHeader::new(
            graph.workflow_id.clone(),
            graph.initiator.clone(),
            config.temporal_policy,
            catalog_digest(catalog),
        );
        let mut exec = Execution {
            catalog: catalog.clone(),
            graph: graph.clone(),
            config,
            aggregation: aggregation.clone(),
            registry,
            coherence: CoherenceState::new(),
            t0,
            frozen,
            order: graph.schedule().expect("validated acyclic"),
            cursor: 0,
            bindings: BTreeMap::new(),
            resources: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            excluded: BTreeSet::new(),
            provisional: Vec::new(),
            accesses: BTreeMap::new(),
            delivered: Vec::new(),
            status: None,
            stale: BTreeMap::new(),
            trace: WorkflowTrace::new(header),
            faults,
            store,
        };
        exec.trace.push(
            t0,
            TraceEvent::Initiated(Initiation {
                t0,
                on_deny: config.on_deny,
                attestation_required: catalog.require_attestation(),
                depth_limit: exec.store.depth_limit(),
                graph: graph.clone(),
                aggregation_policy: aggregation.clone(),
            }),
        );
        for step in plan {
            exec.run_plan_step(step);
        }
        Ok(exec)
    }

    pub fn t0(&self) -> LogicalTime {
        self.t0
    }

    pub fn trace(&self) -> &WorkflowTrace {
        &self.trace
    }

    pub fn store(&self) -> &TupleStore {
        &self.store
    }

    pub fn graph(&self) -> &WorkflowGraph {
        &self.graph
    }

    pub fn schedule(&self) -> &[VertexId] {
        &self.order
    }

    pub fn artifacts(&self) -> &BTreeMap<VertexId, DataArtifact> {
        &self.artifacts
    }

    pub fn is_terminal(&self) -> bool {
        self.status.is_some()
    }

    /// Tick at which the next vertex will be evaluated.
    pub fn next_tick(&self) -> LogicalTime {
        LogicalTime(self.t0.0 + 1 + self.cursor as u64)
    }

    pub fn result(&self) -> Option<ExecutionResult> {
        Some(ExecutionResult {
            status: self.status.clone()?,
            delivered: self.delivered.clone(),
            accesses: self.accesses.clone(),
        })
    }

    pub fn into_parts(self) -> (Option<ExecutionResult>, WorkflowTrace) {
        let result = self.result();
        (result, self.trace)
    }

    fn event_tick(&self, at: LogicalTime) -> Result<(), ExecutionError> {
        if at <= self.t0 || at < self.store.clock() {
            return Err(ExecutionError::InvalidEvent(format!(
                "event at {at} is not after the last evaluated tick {}",
                self.store.clock()
            )));
        }
        Ok(())
    }

    /// Closes a tuple's validity at `at`. Takes effect for the vertex
    /// evaluated at `at`.
    pub fn revoke_tuple(&mut self, id: TupleId, at: LogicalTime) -> Result<(), ExecutionError> {
        self.event_tick(at)?;
        self.store.revoke_tuple(id, at)?;
        let tuple = self.store.get(id).expect("just revoked").clone();
        self.trace.push(
            at,
            TraceEvent::RevocationObserved(RevocationChange::Tuple { id, tuple, at }),
        );
        Ok(())
    }

    pub fn revoke_token(
        &mut self,
        target: RevocationTarget,
        at: LogicalTime,
    ) -> Result<(), ExecutionError> {
        self.event_tick(at)?;
        self.registry
            .revoke(target.clone(), at)
            .map_err(|e| ExecutionError::InvalidEvent(e.to_string()))?;
        let event = self.registry.events().last().expect("just revoked").clone();
        self.trace.push(
            at,
            TraceEvent::RevocationObserved(RevocationChange::Registry(event)),
        );
        Ok(())
    }

    /// Late binding of a Retrieve vertex's resource.
    pub fn bind_resource(
        &mut self,
        vertex: &VertexId,
        resource: ResourceId,
    ) -> Result<(), ExecutionError> {
        let v = self
            .graph
            .vertex(vertex)
            .ok_or_else(|| ExecutionError::InvalidEvent(format!("unknown vertex {vertex}")))?;
        if !matches!(v.kind, VertexKind::Retrieve { resource: None }) {
            return Err(ExecutionError::InvalidEvent(format!(
                "{vertex} is not an unbound retrieval"
            )));
        }
        if self.order[..self.cursor].contains(vertex) {
            return Err(ExecutionError::InvalidEvent(format!(
                "{vertex} already evaluated"
            )));
        }
        if !self.catalog.contains_resource(&resource) {
            return Err(ExecutionError::UnknownResource(resource));
        }
        self.resources.insert(vertex.clone(), resource);
        Ok(())
    }

    /// Evaluates exactly one vertex.
    pub fn step(&mut self) -> Result<(), ExecutionError> {
        if self.is_terminal() {
            return Err(ExecutionError::Terminal);
        }
        let tick = self.next_tick();
        self.store.advance_to(tick)?;
        let id = self.order[self.cursor].clone();
        self.cursor += 1;
        if let Err(reason) = self.evaluate(&id, tick) {
            match self.config.on_deny {
                OnDeny::FailWorkflow => {
                    let status = ExecutionStatus::Denied { at: id, reason };
                    self.finish(tick, status);
                    return Ok(());
                }
                OnDeny::SkipAndMarkPartial => {
                    self.excluded.insert(id.clone());
                    self.trace
                        .push(tick, TraceEvent::VertexSkipped { vertex: id, reason });
                }
            }
        }
        if self.cursor == self.order.len() {
            let status = if self.excluded.is_empty() {
                ExecutionStatus::Completed
            } else {
                ExecutionStatus::CompletedPartial {
                    excluded: self.excluded.clone(),
                }
            };
            self.finish(tick, status);
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<ExecutionResult, ExecutionError> {
        while !self.is_terminal() {
            self.step()?;
        }
        Ok(self.result().expect("terminal"))
    }

    fn finish(&mut self, tick: LogicalTime, status: ExecutionStatus) {
        self.trace.push(tick, TraceEvent::Finished(status.clone()));
        self.status = Some(status);
    }

    fn principals_of(&self, token: &DelegationToken) -> Vec<Principal> {
        token
            .principals()
            .iter()
            .filter_map(|p| self.catalog.principal(p).cloned())
            .collect()
    }

    // ---- delegation plan ---------------------------------------------------

    fn run_plan_step(&mut self, step: &PlanStep) {
        let t0 = self.t0;
        let (record, binding, failure) = match step {
            PlanStep::Mint {
                bind,
                scope,
                validity,
            } => {
                let initiator = self.graph.initiator.clone();
                let resources = scope.resources();
                let slice = self.store.slice_at(t0, &initiator, &resources);
                let minted = mint_root(
                    &self.catalog,
                    &self.store,
                    &initiator,
                    TokenId::new(bind.as_str()),
                    self.graph.workflow_id.clone(),
                    scope.clone(),
                    *validity,
                    t0,
                );
                let (token, outcome, failure) = match minted {
                    Ok(t) => (Some(t), BindingOutcome::Bound, None),
                    Err(e) => (
                        None,
                        BindingOutcome::Failed(e.to_string()),
                        Some(e.to_string()),
                    ),
                };
                let principals = self
                    .catalog
                    .principal(&initiator)
                    .cloned()
                    .into_iter()
                    .collect();
                let binding = token.clone().map_or(Binding::Failed, Binding::Bound);
                let record = TokenRecord {
                    binding: bind.clone(),
                    parent: None,
                    requested_subject: initiator,
                    requested_scope: scope.clone(),
                    validity: *validity,
                    token,
                    principals,
                    initiator_slice: Some(slice),
                    outcome,
                };
                (TraceEvent::TokenMinted(record), binding, failure)
            }
            PlanStep::Attenuate {
                bind,
                from,
                subject,
                scope,
                validity,
            } => {
                let parent = match self.bindings.get(from) {
                    Some(Binding::Bound(t)) | Some(Binding::Substituted(t)) => Some(t.clone()),
                    _ => None,
                };
                let attempt = match &parent {
                    None => Err(format!("parent binding {from} is not bound")),
                    Some(p) => attenuate(p, &self.catalog, subject, scope.clone(), *validity, t0)
                        .map_err(|e| e.to_string()),
                };
                let nominal = self.faults.nominal.contains(bind);
                let (token, outcome, binding, failure) = match attempt {
                    Err(e) => (
                        None,
                        BindingOutcome::Failed(e.clone()),
                        Binding::Failed,
                        Some(e),
                    ),
                    Ok(t) if nominal && !self.faults.legacy => {
                        let msg = format!("session binding for {subject} failed");
                        let _ = t;
                        (None, BindingOutcome::Failed(msg), Binding::Failed, None)
                    }
                    Ok(t) if nominal => {
                        // Reported as bound, but the holder keeps the parent's chain.
                        let actual = parent.clone().expect("attenuation succeeded");
                        (
                            Some(t),
                            BindingOutcome::Bound,
                            Binding::Substituted(actual),
                            None,
                        )
                    }
                    Ok(t) => (
                        Some(t.clone()),
                        BindingOutcome::Bound,
                        Binding::Bound(t),
                        None,
                    ),
                };
                let principals = match (&token, &parent) {
                    (Some(t), _) => self.principals_of(t),
                    (None, Some(p)) => {
                        let mut ps = self.principals_of(p);
                        if let Some(s) = self.catalog.principal(subject) {
                            if !ps.contains(s) {
                                ps.push(s.clone());
                            }
                        }
                        ps
                    }
                    (None, None) => self
                        .catalog
                        .principal(subject)
                        .cloned()
                        .into_iter()
                        .collect(),
                };
                let record = TokenRecord {
                    binding: bind.clone(),
                    parent: Some(from.clone()),
                    requested_subject: subject.clone(),
                    requested_scope: scope.clone(),
                    validity: *validity,
                    token,
                    principals,
                    initiator_slice: None,
                    outcome,
                };
                (TraceEvent::Attenuated(record), binding, failure)
            }
        };
        self.trace.push(t0, record);
        if let Some(description) = failure {
            self.trace.push(
                t0,
                TraceEvent::PolicyViolation(ViolationRecord {
                    vertex: None,
                    description: format!("delegation {} refused: {description}", step.bind()),
                }),
            );
        }
        self.bindings.insert(step.bind().clone(), binding);
    }

    // ---- vertex evaluation -------------------------------------------------

    fn evaluate(&mut self, id: &VertexId, tick: LogicalTime) -> Result<(), DenyReason> {
        let vertex = self
            .graph
            .vertex(id)
            .expect("scheduled vertex exists")
            .clone();
        let preds: BTreeSet<VertexId> = self.graph.predecessors(id).cloned().collect();
        let inputs: Vec<DataArtifact> = preds
            .iter()
            .filter_map(|p| self.artifacts.get(p).cloned())
            .collect();
        if !preds.is_empty() && inputs.is_empty() {
            return Err(DenyReason::InputsExcluded);
        }
        let token = self.present_token(&vertex, tick)?;
        match &vertex.kind {
            VertexKind::Retrieve { resource } => {
                let resource = resource.clone().or_else(|| self.resources.get(id).cloned());
                self.retrieve(&vertex, resource, token, tick)
            }
            VertexKind::Transform => {
                self.produce(&vertex, tick, &inputs);
                Ok(())
            }
            VertexKind::Synthesize => self.synthesize(&vertex, token, tick, &inputs),
            VertexKind::Return { recipient } => self.deliver(&vertex, recipient, tick, &inputs),
        }
    }

    /// Resolves the vertex's binding, checks its session and validity and
    /// records the outcome. Returns the token to evaluate under.
    fn present_token(
        &mut self,
        vertex: &ActionVertex,
        tick: LogicalTime,
    ) -> Result<(DelegationToken, bool), DenyReason> {
        let binding = vertex.token.clone();
        let mut legacy_unscoped = false;
        let token = match self.bindings.get(&binding).cloned() {
            Some(Binding::Bound(t)) => t,
            Some(Binding::Substituted(t)) => {
                legacy_unscoped = true;
                t
            }
            Some(Binding::Failed) | None => {
                self.trace.push(
                    tick,
                    TraceEvent::ValidityChecked(ValidityRecord {
                        vertex: vertex.id.clone(),
                        binding: binding.clone(),
                        token: None,
                        holder: vertex.agent.clone(),
                        session: SessionBinding::Failed,
                        prior: None,
                        registry_events: Vec::new(),
                        outcome: None,
                    }),
                );
                return Err(DenyReason::DelegationFailed { binding });
            }
        };
        if !legacy_unscoped && token.holder() != &vertex.agent {
            return Err(DenyReason::HolderMismatch {
                binding,
                agent: vertex.agent.clone(),
            });
        }
        let token = if self.faults.session_failures.contains(&binding) {
            if !self.faults.legacy {
                self.trace.push(
                    tick,
                    TraceEvent::ValidityChecked(ValidityRecord {
                        vertex: vertex.id.clone(),
                        binding: binding.clone(),
                        token: Some(token),
                        holder: vertex.agent.clone(),
                        session: SessionBinding::Failed,
                        prior: None,
                        registry_events: Vec::new(),
                        outcome: None,
                    }),
                );
                return Err(DenyReason::SessionBindingFailed { binding });
            }
            // Falls back to a service credential covering the whole catalog.
            legacy_unscoped = true;
            let scope: Scope = self
                .catalog
                .resources()
                .iter()
                .map(|r| Grant::read(r.id.clone()))
                .collect();
            let global = unchecked_root(
                TokenId::new(format!("service-credential:{}", vertex.agent)),
                self.graph.workflow_id.clone(),
                &vertex.agent,
                scope,
                self.t0,
            );
            self.bindings
                .insert(binding.clone(), Binding::Substituted(global.clone()));
            self.faults.session_failures.remove(&binding);
            global
        } else {
            token
        };
        let holder = token.holder().clone();
        let prior = self.coherence.entry(&token.token_id, &holder);
        let registry_events = self
            .registry
            .relevant(&token)
            .into_iter()
            .filter(|e| e.at <= tick)
            .collect();
        let outcome = check_validity(&token, &holder, tick, &self.registry, &mut self.coherence)
            .expect("holder taken from the token");
        self.trace.push(
            tick,
            TraceEvent::ValidityChecked(ValidityRecord {
                vertex: vertex.id.clone(),
                binding: binding.clone(),
                token: Some(token.clone()),
                holder,
                session: SessionBinding::Bound,
                prior,
                registry_events,
                outcome: Some(outcome),
            }),
        );
        if !outcome.is_valid() {
            return Err(DenyReason::TokenRevoked { binding });
        }
        Ok((token, legacy_unscoped))
    }

    fn policy_point(&self, tick: LogicalTime) -> (EvalPoint, LogicalTime, bool) {
        match self.config.temporal_policy {
            TemporalPolicy::InitiationTime => (EvalPoint::Frozen, self.t0, false),
            TemporalPolicy::AccessTime => (EvalPoint::Live(tick), tick, false),
            TemporalPolicy::CompletionTime => (EvalPoint::Frozen, self.t0, true),
        }
    }

    fn slice(
        &self,
        point: EvalPoint,
        subjects: &[&PrincipalId],
        resources: &BTreeSet<ResourceId>,
    ) -> TupleSnapshot {
        merge_slices(subjects.iter().map(|s| match point {
            EvalPoint::Frozen => self.frozen.slice(s, resources),
            EvalPoint::Live(t) => self.store.slice_at(t, s, resources),
        }))
    }

    /// Effective authority of `token` over `resources`, with its evidence.
    fn authority(
        &self,
        binding: &TokenRef,
        token: &DelegationToken,
        point: EvalPoint,
        eval_time: LogicalTime,
        resources: &BTreeSet<ResourceId>,
    ) -> (AuthorityEvidence, Option<Scope>) {
        let snapshot = self.slice(point, &[token.initiator(), token.holder()], resources);
        let eff = effective_authority(token, &snapshot, &self.catalog, eval_time).ok();
        let evidence = AuthorityEvidence {
            binding: binding.clone(),
            token: token.clone(),
            principals: self.principals_of(token),
            eval_time,
            snapshot,
            derivation: eff.as_ref().map(|e| e.derivation.clone()),
        };
        (evidence, eff.map(|e| e.scope))
    }

    fn retrieve(
        &mut self,
        vertex: &ActionVertex,
        resource: Option<ResourceId>,
        (token, unscoped): (DelegationToken, bool),
        tick: LogicalTime,
    ) -> Result<(), DenyReason> {
        let (point, eval_time, provisional) = self.policy_point(tick);
        let resources: BTreeSet<ResourceId> = resource.iter().cloned().collect();
        let stale_key = resource.clone().map(|r| (vertex.agent.clone(), r));
        let reused = match &stale_key {
            Some(k) if self.faults.legacy && self.faults.stale_reuse => self.stale.get(k).cloned(),
            _ => None,
        };
        let (evidence, decision) = if let Some(evidence) = reused {
            (evidence, Decision::Allow)
        } else {
            let (mut evidence, scope) =
                self.authority(&vertex.token, &token, point, eval_time, &resources);
            let decision = match (&resource, scope) {
                (None, _) => Decision::Deny(DenyReason::UnboundResource),
                (Some(r), _) if unscoped => {
                    evidence.derivation = None;
                    if token.last().scope.allows(r, Action::Read) {
                        Decision::Allow
                    } else {
                        Decision::Deny(DenyReason::NotAuthorized {
                            resource: r.clone(),
                        })
                    }
                }
                (Some(r), None) => {
                    let _ = r;
                    Decision::Deny(DenyReason::InvalidChain {
                        binding: vertex.token.clone(),
                    })
                }
                (Some(r), Some(scope)) => {
                    if scope.allows(r, Action::Read) {
                        Decision::Allow
                    } else {
                        Decision::Deny(DenyReason::NotAuthorized {
                            resource: r.clone(),
                        })
                    }
                }
            };
            (evidence, decision)
        };
        let allowed = decision.is_allow();
        self.accesses.insert(vertex.id.clone(), allowed);
        self.trace.push(
            tick,
            TraceEvent::AccessDecided(AccessRecord {
                vertex: vertex.id.clone(),
                agent: vertex.agent.clone(),
                resource: resource.clone(),
                action: Action::Read,
                provisional,
                evidence: evidence.clone(),
                decision: decision.clone(),
            }),
        );
        if let Decision::Deny(reason) = decision {
            return Err(reason);
        }
        let resource = resource.expect("allowed access has a resource");
        if self.faults.stale_reuse {
            if let Some(k) = stale_key {
                self.stale.entry(k).or_insert(evidence);
            }
        }
        if provisional {
            self.provisional.push((vertex.id.clone(), resource.clone()));
        }
        let artifact = DataArtifact {
            id: ArtifactId::new(format!("{}#{}", self.graph.workflow_id, vertex.id)),
            workflow_id: self.graph.workflow_id.clone(),
            produced_by: vertex.id.clone(),
            produced_at: tick,
            payload: format!("read({resource})"),
            provenance: ProvenanceSet::single(resource),
            inputs: Vec::new(),
        };
        self.record_artifact(vertex, tick, artifact);
        Ok(())
    }

    fn produce(&mut self, vertex: &ActionVertex, tick: LogicalTime, inputs: &[DataArtifact]) {
        let artifact = DataArtifact {
            id: ArtifactId::new(format!("{}#{}", self.graph.workflow_id, vertex.id)),
            workflow_id: self.graph.workflow_id.clone(),
            produced_by: vertex.id.clone(),
            produced_at: tick,
            provenance: provenance_union(inputs.iter().map(|a| &a.provenance)),
            inputs: inputs.iter().map(|a| a.id.clone()).collect(),
            payload: format!(
                "{}({})",
                vertex.kind.name(),
                join(inputs.iter().map(|a| &a.id))
            ),
        };
        self.record_artifact(vertex, tick, artifact);
    }

    fn record_artifact(
        &mut self,
        vertex: &ActionVertex,
        tick: LogicalTime,
        artifact: DataArtifact,
    ) {
        self.trace.push(
            tick,
            TraceEvent::ArtifactProduced(ArtifactRecord {
                vertex: vertex.id.clone(),
                artifact: artifact.clone(),
            }),
        );
        self.artifacts.insert(vertex.id.clone(), artifact);
    }

    fn labels(&self, provenance: &ProvenanceSet) -> LabelIndex {
        label_index(&self.catalog, provenance).expect("provenance resources come from the catalog")
    }

    fn synthesize(
        &mut self,
        vertex: &ActionVertex,
        (token, unscoped): (DelegationToken, bool),
        tick: LogicalTime,
        inputs: &[DataArtifact],
    ) -> Result<(), DenyReason> {
        let provenance = provenance_union(inputs.iter().map(|a| &a.provenance));
        let labels = self.labels(&provenance);
        let (point, eval_time, provisional) = self.policy_point(tick);
        let (mut evidence, scope) =
            self.authority(&vertex.token, &token, point, eval_time, provenance.as_set());
        let agent_missing: BTreeSet<ResourceId> = if unscoped {
            evidence.derivation = None;
            BTreeSet::new()
        } else {
            let scope = scope.unwrap_or_default();
            provenance
                .iter()
                .filter(|r| !scope.allows(r, Action::Read))
                .cloned()
                .collect()
        };
        let agent_aggregation =
            check_combination_with(&self.aggregation, &vertex.agent, &provenance, &labels);
        let mut recipients_set = self.graph.downstream_recipients(&vertex.id);
        if recipients_set.is_empty() {
            recipients_set.insert(self.graph.initiator.clone());
        }
        let recipients: BTreeMap<PrincipalId, CombinationDecision> = recipients_set
            .into_iter()
            .map(|p| {
                let d = check_combination_with(&self.aggregation, &p, &provenance, &labels);
                (p, d)
            })
            .collect();
        let decision = synthesis_decision(
            &vertex.agent,
            &agent_missing,
            &agent_aggregation,
            &recipients,
        );
        self.trace.push(
            tick,
            TraceEvent::SynthesisDecided(SynthesisRecord {
                vertex: vertex.id.clone(),
                agent: vertex.agent.clone(),
                provenance,
                labels,
                provisional,
                evidence,
                agent_missing,
                agent_aggregation,
                recipients,
                decision: decision.clone(),
            }),
        );
        if let Decision::Deny(reason) = decision {
            return Err(reason);
        }
        self.produce(vertex, tick, inputs);
        Ok(())
    }

    fn deliver(
        &mut self,
        vertex: &ActionVertex,
        recipient: &PrincipalId,
        tick: LogicalTime,
        inputs: &[DataArtifact],
    ) -> Result<(), DenyReason> {
        let provenance = provenance_union(inputs.iter().map(|a| &a.provenance));
        let labels = self.labels(&provenance);
        let (point, eval_time) = match self.config.temporal_policy {
            TemporalPolicy::InitiationTime => (EvalPoint::Frozen, self.t0),
            _ => (EvalPoint::Live(tick), tick),
        };
        let principal = self
            .catalog
            .principal(recipient)
            .expect("recipients validated against the catalog")
            .clone();
        let snapshot = self.slice(point, &[recipient], provenance.as_set());
        let check = delivery_check(
            &principal,
            &provenance,
            &snapshot,
            eval_time,
            &self.aggregation,
            &labels,
        );
        let mut rechecks = Vec::new();
        if self.config.temporal_policy == TemporalPolicy::CompletionTime {
            let ancestors = self.graph.ancestors(&vertex.id);
            for (v, r) in self.provisional.clone() {
                if !ancestors.contains(&v) {
                    continue;
                }
                let retriever = self
                    .graph
                    .vertex(&v)
                    .expect("provisional vertex exists")
                    .clone();
                let token = match self.bindings.get(&retriever.token) {
                    Some(Binding::Bound(t)) | Some(Binding::Substituted(t)) => t.clone(),
                    _ => continue,
                };
                let resources = BTreeSet::from([r.clone()]);
                let (evidence, scope) = self.authority(
                    &retriever.token,
                    &token,
                    EvalPoint::Live(tick),
                    tick,
                    &resources,
                );
                let allowed = scope.is_some_and(|s| s.allows(&r, Action::Read));
                rechecks.push(ProvisionalRecheck {
                    vertex: v,
                    resource: r,
                    evidence,
                    allowed,
                });
            }
        }
        let decision = delivery_decision(&check, &rechecks);
        self.trace.push(
            tick,
            TraceEvent::DeliveryDecided(DeliveryRecord {
                vertex: vertex.id.clone(),
                recipient: principal,
                eval_time,
                provenance: provenance.clone(),
                labels,
                snapshot,
                recipient_missing: check.missing,
                aggregation: check.aggregation,
                rechecks,
                decision: decision.clone(),
            }),
        );
        if let Decision::Deny(reason) = decision {
            return Err(reason);
        }
        let artifact = DataArtifact {
            id: ArtifactId::new(format!("{}#{}", self.graph.workflow_id, vertex.id)),
            workflow_id: self.graph.workflow_id.clone(),
            produced_by: vertex.id.clone(),
            produced_at: tick,
            provenance,
            inputs: inputs.iter().map(|a| a.id.clone()).collect(),
            payload: format!("deliver({})", join(inputs.iter().map(|a| &a.id))),
        };
        let disclosure = self.disclosure(&vertex.id);
        self.trace.push(
            tick,
            TraceEvent::Delivered(DeliveredRecord {
                vertex: vertex.id.clone(),
                recipient: recipient.clone(),
                artifact: artifact.clone(),
                disclosure: disclosure.clone(),
            }),
        );
        self.delivered.push(Delivery {
            recipient: recipient.clone(),
            artifact,
            disclosure,
        });
        Ok(())
    }

    fn disclosure(&self, vertex: &VertexId) -> Option<CompletenessDisclosure> {
        if self.excluded.is_empty() {
            return None;
        }
        let ancestors = self.graph.ancestors(vertex);
        let upstream: BTreeSet<VertexId> =
            self.excluded.intersection(&ancestors).cloned().collect();
        let withheld_resources = upstream
            .iter()
            .filter_map(|v| match &self.graph.vertex(v)?.kind {
                VertexKind::Retrieve { resource } => {
                    resource.clone().or_else(|| self.resources.get(v).cloned())
                }
                _ => None,
            })
            .collect();
        Some(CompletenessDisclosure {
            excluded: self.excluded.clone(),
            upstream,
            withheld_resources,
        })
    }
}

pub(crate) fn check_references(
    catalog: &Catalog,
    graph: &WorkflowGraph,
    plan: &[PlanStep],
) -> Result<(), ExecutionError> {
    if !catalog.contains_principal(&graph.initiator) {
        return Err(ExecutionError::UnknownPrincipal(graph.initiator.clone()));
    }
    let mut bound = BTreeSet::new();
    for step in plan {
        match step {
            PlanStep::Mint { scope, .. } => {
                for g in scope {
                    if !catalog.contains_resource(&g.resource) {
                        return Err(ExecutionError::UnknownResource(g.resource.clone()));
                    }
                }
            }
            PlanStep::Attenuate { from, subject, .. } => {
                if !bound.contains(from) {
                    return Err(ExecutionError::InvalidPlan(format!(
                        "{} attenuates {from}, which is not bound earlier",
                        step.bind()
                    )));
                }
                if !catalog.contains_principal(subject) {
                    return Err(ExecutionError::UnknownPrincipal(subject.clone()));
                }
            }
        }
        if !bound.insert(step.bind().clone()) {
            return Err(ExecutionError::InvalidPlan(format!(
                "{} bound twice",
                step.bind()
            )));
        }
    }
    for v in &graph.vertices {
        if !catalog.contains_principal(&v.agent) {
            return Err(ExecutionError::UnknownPrincipal(v.agent.clone()));
        }
        if !bound.contains(&v.token) {
            return Err(ExecutionError::UnboundToken(v.token.clone()));
        }
        match &v.kind {
            VertexKind::Retrieve { resource: Some(r) } if !catalog.contains_resource(r) => {
                return Err(ExecutionError::UnknownResource(r.clone()));
            }
            VertexKind::Return { recipient } if !catalog.contains_principal(recipient) => {
                return Err(ExecutionError::UnknownPrincipal(recipient.clone()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Synthesis verdict from its operands: the agent's authority first, then
/// aggregation for the agent, then for each provisional recipient.
pub fn synthesis_decision(
    agent: &PrincipalId,
    agent_missing: &BTreeSet<ResourceId>,
    agent_aggregation: &CombinationDecision,
    recipients: &BTreeMap<PrincipalId, CombinationDecision>,
) -> Decision {
    if !agent_missing.is_empty() {
        return Decision::Deny(DenyReason::AgentLacksAuthority {
            missing: agent_missing.clone(),
        });
    }
    let operands = std::iter::once((agent, agent_aggregation)).chain(recipients.iter());
    for (p, d) in operands {
        if let CombinationDecision::Deny { rule_id, .. } = d {
            return Decision::Deny(DenyReason::AggregationViolation {
                principal: p.clone(),
                rule_id: rule_id.clone(),
            });
        }
    }
    Decision::Allow
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryCheck {
    pub missing: BTreeSet<ResourceId>,
    pub aggregation: CombinationDecision,
    pub decision: Decision,
}

/// Allow iff `recipient` may read every provenance resource at `eval_time`
/// and the combination is permitted for it. Empty provenance is allowed.
pub fn delivery_check(
    recipient: &Principal,
    provenance: &ProvenanceSet,
    view: &dyn AuthView,
    eval_time: LogicalTime,
    policy: &AggregationPolicy,
    labels: &LabelIndex,
) -> DeliveryCheck {
    let missing: BTreeSet<ResourceId> = provenance
        .iter()
        .filter(|r| {
            !recipient.base_scope.allows(r, Action::Read)
                && !view.allows(&recipient.id, Action::Read, r, eval_time)
        })
        .cloned()
        .collect();
    let aggregation = check_combination_with(policy, &recipient.id, provenance, labels);
    let decision = if !missing.is_empty() {
        Decision::Deny(DenyReason::RecipientNotAuthorized {
            recipient: recipient.id.clone(),
            missing: missing.clone(),
        })
    } else if let CombinationDecision::Deny { rule_id, .. } = &aggregation {
        Decision::Deny(DenyReason::AggregationViolation {
            principal: recipient.id.clone(),
            rule_id: rule_id.clone(),
        })
    } else {
        Decision::Allow
    };
    DeliveryCheck {
        missing,
        aggregation,
        decision,
    }
}

/// Combines a delivery check with the provisional rechecks.
pub fn delivery_decision(check: &DeliveryCheck, rechecks: &[ProvisionalRecheck]) -> Decision {
    if !check.decision.is_allow() {
        return check.decision.clone();
    }
    match rechecks.iter().find(|r| !r.allowed) {
        Some(r) => Decision::Deny(DenyReason::ProvisionalAccessRevoked {
            vertex: r.vertex.clone(),
            resource: r.resource.clone(),
        }),
        None => Decision::Allow,
    }
}

/// Runs a workflow to completion with no scripted events.
pub fn execute(
    catalog: &Catalog,
    graph: &WorkflowGraph,
    config: ExecutionConfig,
    aggregation: &AggregationPolicy,
    store: TupleStore,
    plan: &[PlanStep],
    registry: RevocationRegistry,
) -> Result<(ExecutionResult, WorkflowTrace), ExecutionError> {
    let mut exec = Execution::start(catalog, graph, config, aggregation, store, plan, registry)?;
    let result = exec.run_to_end()?;
    Ok((result, exec.trace))
}

//! Deterministic scenario runner, fault injection and the revocation race.
//!
//! Scripted events stamped at tick `t` are applied before the vertex
//! evaluated at `t`. Legacy mode exists only here: it reproduces the
//! fail-open behaviors that compliant mode refuses, so that their traces can
//! be audited.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregationPolicy;
use crate::delegation::{
    attenuate, coherence_step, mint_root, CoherenceEntry, RevocationRegistry, RevocationTarget,
    TokenId, ValiditySpec,
};
use crate::model::{
    catalog_validate, Catalog, Principal, PrincipalId, Resource, ResourceId, Scope,
};
use crate::store::{AuthorizationTuple, LogicalTime, TupleId, TupleStore};
use crate::trace::WorkflowTrace;
use crate::workflow::{
    check_references, validate_dag, Execution, ExecutionConfig, ExecutionError, ExecutionResult,
    ExecutionStatus, Faults, OnDeny, PlanStep, TemporalPolicy, TokenRef, VertexId, VertexKind,
    WorkflowGraph,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedTuple {
    /// Handle for scripted events.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub tuple: AuthorizationTuple,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Left unset in scenario families run under every policy.
    #[serde(default)]
    pub temporal_policy: Option<TemporalPolicy>,
    pub on_deny: OnDeny,
    #[serde(default)]
    pub depth_limit: Option<u32>,
    #[serde(default)]
    pub start_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultInjection {
    /// The binding's session fails when a vertex presents it; legacy mode
    /// falls back to a catalog-wide service credential.
    ScopeWideningFallback { binding: TokenRef },
    /// The attenuation's session binding fails; legacy mode reports success
    /// and keeps using the parent chain.
    NominalDelegation { binding: TokenRef },
    /// Revokes the named tuple at the event tick; legacy mode keeps using
    /// authorization results cached from earlier accesses.
    StaleTupleRace { tuple: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioEvent {
    RevokeTuple {
        tuple: String,
    },
    RevokeToken {
        target: RevocationTarget,
    },
    BindResource {
        vertex: VertexId,
        resource: ResourceId,
    },
    Fault(FaultInjection),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub tick: u64,
    pub event: ScenarioEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub catalog: Catalog,
    #[serde(default)]
    pub tuples: Vec<NamedTuple>,
    /// The delegation plan.
    pub tokens: Vec<PlanStep>,
    pub graph: WorkflowGraph,
    pub config: ScenarioConfig,
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
    #[serde(default)]
    pub aggregation_policy: AggregationPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Compliant,
    LegacyBuggy,
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineMode::Compliant => "compliant",
            EngineMode::LegacyBuggy => "legacy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),
    #[error("scenario does not fix a temporal policy; one must be chosen explicitly")]
    MissingPolicy,
    #[error("invalid race configuration: {0}")]
    InvalidRace(String),
    #[error(transparent)]
    Execution(#[from] ExecutionError),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| SimError::InvalidScenario(vec![e.to_string()]))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(SimError::InvalidScenario(vec![format!(
                    "unsupported schema_version {v} (expected {SCHEMA_VERSION})"
                )]))
            }
            None => {
                return Err(SimError::InvalidScenario(vec![
                    "missing schema_version".into()
                ]))
            }
        }
        serde_json::from_value(value).map_err(|e| SimError::InvalidScenario(vec![e.to_string()]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn tuple_ids(&self) -> BTreeMap<&str, TupleId> {
        self.tuples
            .iter()
            .enumerate()
            .filter_map(|(i, t)| Some((t.name.as_deref()?, TupleId(i as u64))))
            .collect()
    }

    fn build_store(&self) -> Result<TupleStore, String> {
        let mut store = TupleStore::new(&self.catalog);
        if let Some(d) = self.config.depth_limit {
            store = store.with_depth_limit(d);
        }
        for (i, t) in self.tuples.iter().enumerate() {
            store
                .add_tuple(t.tuple.clone())
                .map_err(|e| format!("tuple {i}: {e}"))?;
        }
        store
            .advance_to(LogicalTime(self.config.start_tick))
            .map_err(|e| e.to_string())?;
        Ok(store)
    }

    /// Every problem found, as human-readable diagnostics. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "unsupported schema_version {}",
                self.schema_version
            ));
        }
        out.extend(
            catalog_validate(&self.catalog)
                .iter()
                .map(|v| format!("catalog: {v}")),
        );
        out.extend(
            validate_dag(&self.graph)
                .iter()
                .map(|v| format!("graph: {v}")),
        );
        if let Err(e) = self.aggregation_policy.validate() {
            out.push(format!("aggregation policy: {e}"));
        }
        if let Err(e) = check_references(&self.catalog, &self.graph, &self.tokens) {
            out.push(format!("references: {e}"));
        }
        if let Err(e) = self.build_store() {
            out.push(format!("tuples: {e}"));
        }
        let mut names = BTreeSet::new();
        for t in &self.tuples {
            if let Some(n) = &t.name {
                if !names.insert(n.as_str()) {
                    out.push(format!("tuples: duplicate name {n}"));
                }
            }
        }
        for step in &self.tokens {
            let (scope, validity) = match step {
                PlanStep::Mint {
                    scope, validity, ..
                }
                | PlanStep::Attenuate {
                    scope, validity, ..
                } => (scope, validity),
            };
            if !validity.is_well_formed() {
                out.push(format!(
                    "tokens: {} has malformed validity {validity}",
                    step.bind()
                ));
            }
            for g in scope {
                if !self.catalog.contains_resource(&g.resource) {
                    out.push(format!(
                        "tokens: {} names unknown resource {}",
                        step.bind(),
                        g.resource
                    ));
                }
            }
        }
        let holders: BTreeMap<&TokenRef, &PrincipalId> = self
            .tokens
            .iter()
            .map(|s| match s {
                PlanStep::Mint { bind, .. } => (bind, &self.graph.initiator),
                PlanStep::Attenuate { bind, subject, .. } => (bind, subject),
            })
            .collect();
        for v in &self.graph.vertices {
            if let Some(h) = holders.get(&v.token) {
                if *h != &v.agent {
                    out.push(format!(
                        "graph: vertex {} is assigned to {} but token {} is delegated to {h}",
                        v.id, v.agent, v.token
                    ));
                }
            }
        }
        out.extend(self.validate_events());
        out
    }

    fn validate_events(&self) -> Vec<String> {
        let mut out = Vec::new();
        let start = self.config.start_tick;
        let tuples = self.tuple_ids();
        let bindings: BTreeSet<&TokenRef> = self.tokens.iter().map(|s| s.bind()).collect();
        let evaluated_at: BTreeMap<VertexId, u64> = self
            .graph
            .schedule()
            .unwrap_or_default()
            .into_iter()
            .enumerate()
            .map(|(k, v)| (v, start + 1 + k as u64))
            .collect();
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            let at = format!("events[{i}]");
            if e.tick < last {
                out.push(format!("{at}: ticks must be non-decreasing"));
            }
            last = e.tick;
            let after_start = |out: &mut Vec<String>| {
                if e.tick <= start {
                    out.push(format!(
                        "{at}: tick {} must be after start tick {start}",
                        e.tick
                    ));
                }
            };
            match &e.event {
                ScenarioEvent::RevokeTuple { tuple }
                | ScenarioEvent::Fault(FaultInjection::StaleTupleRace { tuple }) => {
                    after_start(&mut out);
                    if !tuples.contains_key(tuple.as_str()) {
                        out.push(format!("{at}: unknown tuple {tuple}"));
                    }
                }
                ScenarioEvent::RevokeToken { target } => {
                    after_start(&mut out);
                    match target {
                        RevocationTarget::Token(t)
                            if !bindings.contains(&TokenRef::new(t.as_str())) =>
                        {
                            out.push(format!("{at}: unknown token {t}"));
                        }
                        RevocationTarget::Principal(p) if !self.catalog.contains_principal(p) => {
                            out.push(format!("{at}: unknown principal {p}"));
                        }
                        _ => {}
                    }
                }
                ScenarioEvent::BindResource { vertex, resource } => {
                    after_start(&mut out);
                    match self.graph.vertex(vertex).map(|v| &v.kind) {
                        Some(VertexKind::Retrieve { resource: None }) => {}
                        _ => out.push(format!("{at}: {vertex} is not an unbound retrieval")),
                    }
                    if let Some(t) = evaluated_at.get(vertex).filter(|t| e.tick > **t) {
                        out.push(format!(
                            "{at}: binds {vertex} at tick {} but it is evaluated at tick {t}",
                            e.tick
                        ));
                    }
                    if !self.catalog.contains_resource(resource) {
                        out.push(format!("{at}: unknown resource {resource}"));
                    }
                }
                ScenarioEvent::Fault(FaultInjection::ScopeWideningFallback { binding }) => {
                    if !bindings.contains(binding) {
                        out.push(format!("{at}: unknown binding {binding}"));
                    }
                }
                ScenarioEvent::Fault(FaultInjection::NominalDelegation { binding }) => {
                    if e.tick != start {
                        out.push(format!(
                            "{at}: delegation faults act at the start tick {start}"
                        ));
                    }
                    let attenuates = self
                        .tokens
                        .iter()
                        .any(|s| matches!(s, PlanStep::Attenuate { bind, .. } if bind == binding));
                    if !attenuates {
                        out.push(format!("{at}: {binding} is not an attenuation"));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: usize,
    pub final_tick: u64,
    pub accesses_allowed: usize,
    pub accesses_denied: usize,
    pub deliveries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub result: ExecutionResult,
    pub trace: WorkflowTrace,
    pub metrics: RunMetrics,
}

/// Runs a scenario under its own temporal policy.
pub fn run_scenario(scenario: &Scenario, mode: EngineMode) -> Result<RunOutput, SimError> {
    let policy = scenario
        .config
        .temporal_policy
        .ok_or(SimError::MissingPolicy)?;
    run_scenario_with_policy(scenario, mode, policy)
}

pub fn run_scenario_with_policy(
    scenario: &Scenario,
    mode: EngineMode,
    policy: TemporalPolicy,
) -> Result<RunOutput, SimError> {
    let diagnostics = scenario.validate();
    if !diagnostics.is_empty() {
        return Err(SimError::InvalidScenario(diagnostics));
    }
    let store = scenario
        .build_store()
        .map_err(|e| SimError::InvalidScenario(vec![e]))?;
    let start = scenario.config.start_tick;
    let tuples = scenario.tuple_ids();
    let mut faults = Faults {
        legacy: mode == EngineMode::LegacyBuggy,
        ..Faults::default()
    };
    let mut pending: Vec<&ScheduledEvent> = Vec::new();
    for e in &scenario.events {
        match &e.event {
            ScenarioEvent::Fault(FaultInjection::NominalDelegation { binding }) => {
                faults.nominal.insert(binding.clone());
            }
            ScenarioEvent::Fault(FaultInjection::ScopeWideningFallback { binding })
                if e.tick <= start =>
            {
                faults.session_failures.insert(binding.clone());
            }
            ScenarioEvent::Fault(FaultInjection::StaleTupleRace { .. }) => {
                faults.stale_reuse = true;
                pending.push(e);
            }
            _ => pending.push(e),
        }
    }
    let config = ExecutionConfig {
        temporal_policy: policy,
        on_deny: scenario.config.on_deny,
    };
    let mut exec = Execution::start_with(
        &scenario.catalog,
        &scenario.graph,
        config,
        &scenario.aggregation_policy,
        store,
        &scenario.tokens,
        RevocationRegistry::new(),
        faults,
    )?;
    let mut pending = pending.into_iter().peekable();
    while !exec.is_terminal() {
        let tick = exec.next_tick();
        while let Some(e) = pending.next_if(|e| e.tick <= tick.0) {
            let at = LogicalTime(e.tick);
            match &e.event {
                ScenarioEvent::RevokeTuple { tuple }
                | ScenarioEvent::Fault(FaultInjection::StaleTupleRace { tuple }) => {
                    exec.revoke_tuple(tuples[tuple.as_str()], at)?;
                }
                ScenarioEvent::RevokeToken { target } => exec.revoke_token(target.clone(), at)?,
                ScenarioEvent::BindResource { vertex, resource } => {
                    exec.bind_resource(vertex, resource.clone())?
                }
                ScenarioEvent::Fault(FaultInjection::ScopeWideningFallback { binding }) => {
                    exec.faults.session_failures.insert(binding.clone());
                }
                ScenarioEvent::Fault(FaultInjection::NominalDelegation { .. }) => {}
            }
        }
        exec.step()?;
    }
    let final_tick = exec.store().clock().0;
    let (result, trace) = exec.into_parts();
    let result = result.expect("terminal execution has a result");
    let metrics = RunMetrics {
        records: trace.len(),
        final_tick,
        accesses_allowed: result.accesses.values().filter(|a| **a).count(),
        accesses_denied: result.accesses.values().filter(|a| !**a).count(),
        deliveries: result.delivered.len(),
    };
    Ok(RunOutput {
        result,
        trace,
        metrics,
    })
}

/// Outcome class of a run, for exit codes and summaries.
pub fn is_denied(status: &ExecutionStatus) -> bool {
    matches!(status, ExecutionStatus::Denied { .. })
}

// ---- revocation race ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceConfig {
    /// Operations per tick.
    pub velocity: u64,
    pub ttl: u64,
    pub exec_count: u64,
    pub revoke_at: u64,
    pub horizon: u64,
}

impl RaceConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidRace(m.into()));
        if self.velocity == 0 || self.ttl == 0 || self.exec_count == 0 || self.horizon == 0 {
            return bad("velocity, ttl, exec_count and horizon must be positive");
        }
        if self.revoke_at == 0 {
            return bad("revoke_at must be positive (the first consult happens at tick 0)");
        }
        if self.revoke_at >= self.horizon {
            return bad("revoke_at must be before the horizon");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceMetrics {
    pub config: RaceConfig,
    pub unauthorized_ops_ttl: u64,
    pub unauthorized_ops_exec: u64,
    /// `ttl / exec`; `None` when exec-count admitted nothing.
    pub ratio: Option<f64>,
}

/// One agent issuing `velocity` operations per tick against a token revoked
/// at `revoke_at`, once under a TTL cache and once under an execution-count
/// cache. Counts operations admitted at or after the revocation.
pub fn revocation_race(config: RaceConfig) -> Result<RaceMetrics, SimError> {
    config.validate()?;
    let catalog = Catalog::new(
        vec![
            Principal::human("initiator"),
            Principal::agent("agent", Scope::reads(["data"])),
        ],
        vec![Resource::new("data")],
    );
    let mut store = TupleStore::new(&catalog);
    store
        .add_tuple(AuthorizationTuple::grant(
            "initiator",
            crate::model::Action::Read,
            "data",
            LogicalTime::ZERO,
        ))
        .expect("fixed universe");
    let token = |validity| {
        let root = mint_root(
            &catalog,
            &store,
            &"initiator".into(),
            TokenId::new("race"),
            "race".into(),
            Scope::reads(["data"]),
            ValiditySpec::WorkflowLifetime,
            LogicalTime::ZERO,
        )
        .expect("fixed universe");
        attenuate(
            &root,
            &catalog,
            &"agent".into(),
            Scope::reads(["data"]),
            validity,
            LogicalTime::ZERO,
        )
        .expect("fixed universe")
    };
    let ttl_token = token(ValiditySpec::WallClockTtl { ticks: config.ttl });
    let exec_token = token(ValiditySpec::ExecCount {
        n: config.exec_count,
    });
    let mut registry = RevocationRegistry::new();
    registry
        .revoke(
            RevocationTarget::Token(TokenId::new("race")),
            LogicalTime(config.revoke_at),
        )
        .expect("single event");

    let mut lanes = [
        (ttl_token, None::<CoherenceEntry>, 0u64),
        (exec_token, None::<CoherenceEntry>, 0u64),
    ];
    for tick in 0..config.horizon {
        let clock = LogicalTime(tick);
        let mut settled = true;
        for (token, entry, admitted) in lanes.iter_mut() {
            if entry.is_some_and(|e| !e.cached_valid) {
                continue;
            }
            settled = false;
            let fresh = registry.is_revoked(token, clock);
            for _ in 0..config.velocity {
                let (next, outcome) = coherence_step(token.validity(), *entry, clock, fresh);
                *entry = Some(next);
                if !outcome.is_valid() {
                    break;
                }
                if tick >= config.revoke_at {
                    *admitted += 1;
                }
            }
        }
        if settled {
            break;
        }
    }
    let ttl = lanes[0].2;
    let exec = lanes[1].2;
    Ok(RaceMetrics {
        config,
        unauthorized_ops_ttl: ttl,
        unauthorized_ops_exec: exec,
        ratio: (exec > 0).then(|| ttl as f64 / exec as f64),
    })
}

pub fn sweep(grid: &[RaceConfig]) -> Result<Vec<RaceMetrics>, SimError> {
    grid.iter().map(|c| revocation_race(*c)).collect()
}

pub const RACE_CSV_HEADER: &str =
    "velocity,ttl,exec_count,revoke_at,horizon,unauthorized_ops_ttl,unauthorized_ops_exec,ratio";

impl RaceMetrics {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{}",
            c.velocity,
            c.ttl,
            c.exec_count,
            c.revoke_at,
            c.horizon,
            self.unauthorized_ops_ttl,
            self.unauthorized_ops_exec,
            self.ratio
                .map_or_else(|| "inf".to_string(), |r| format!("{r:.4}"))
        )
    }
}

//! Provenance tracking and label-combination policy.
//!
//! A synthesized artifact is judged only by its footprint: the set of source
//! resources that flowed into it. Policy rules forbid a principal from
//! receiving any footprint whose labels cover a forbidden combination.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Catalog, PrincipalId, ResourceId};
use crate::store::LogicalTime;
use crate::workflow::{DataArtifact, VertexId, VertexKind, WorkflowGraph};

pub type LabelIndex = BTreeMap<ResourceId, BTreeSet<String>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProvenanceSet(BTreeSet<ResourceId>);

impl ProvenanceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(resource: ResourceId) -> Self {
        Self(BTreeSet::from([resource]))
    }

    pub fn contains(&self, r: &ResourceId) -> bool {
        self.0.contains(r)
    }

    pub fn insert(&mut self, r: ResourceId) -> bool {
        self.0.insert(r)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ResourceId> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_set(&self) -> &BTreeSet<ResourceId> {
        &self.0
    }
}

impl FromIterator<ResourceId> for ProvenanceSet {
    fn from_iter<T: IntoIterator<Item = ResourceId>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for ProvenanceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.0.iter().map(|r| r.as_str()).collect();
        write!(f, "{{{}}}", ids.join(", "))
    }
}

pub fn provenance_union<'a>(inputs: impl IntoIterator<Item = &'a ProvenanceSet>) -> ProvenanceSet {
    ProvenanceSet(
        inputs
            .into_iter()
            .flat_map(|p| p.0.iter().cloned())
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSubject {
    Any,
    Principal(PrincipalId),
}

impl RuleSubject {
    pub fn matches(&self, p: &PrincipalId) -> bool {
        match self {
            RuleSubject::Any => true,
            RuleSubject::Principal(q) => q == p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenyCombinationRule {
    pub rule_id: String,
    pub applies_to: RuleSubject,
    pub forbidden_labels: BTreeSet<String>,
}

/// Combination rules over an allow-by-default baseline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    #[serde(default)]
    pub rules: Vec<DenyCombinationRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregationError {
    #[error("provenance names uncataloged resource {0}")]
    UnknownResource(ResourceId),
    #[error("rule {0} must forbid at least two labels")]
    TrivialRule(String),
    #[error("duplicate rule id {0}")]
    DuplicateRule(String),
    #[error("artifact {artifact} was not produced by workflow {workflow}")]
    ForeignArtifact { artifact: String, workflow: String },
}

impl AggregationPolicy {
    pub fn new(rules: Vec<DenyCombinationRule>) -> Result<Self, AggregationError> {
        let p = Self { rules };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let mut ids = BTreeSet::new();
        for r in &self.rules {
            if r.forbidden_labels.len() < 2 {
                return Err(AggregationError::TrivialRule(r.rule_id.clone()));
            }
            if !ids.insert(&r.rule_id) {
                return Err(AggregationError::DuplicateRule(r.rule_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationDecision {
    Allow,
    Deny {
        rule_id: String,
        /// Each forbidden label mapped to a provenance resource carrying it.
        witness: BTreeMap<String, ResourceId>,
    },
}

impl CombinationDecision {
    pub fn is_allow(&self) -> bool {
        matches!(self, CombinationDecision::Allow)
    }
}

/// Labels of every resource in `provenance`, taken from the catalog.
pub fn label_index(
    catalog: &Catalog,
    provenance: &ProvenanceSet,
) -> Result<LabelIndex, AggregationError> {
    provenance
        .iter()
        .map(|r| {
            catalog
                .labels(r)
                .map(|l| (r.clone(), l.clone()))
                .ok_or_else(|| AggregationError::UnknownResource(r.clone()))
        })
        .collect()
}

pub fn check_combination(
    policy: &AggregationPolicy,
    principal: &PrincipalId,
    provenance: &ProvenanceSet,
    catalog: &Catalog,
) -> Result<CombinationDecision, AggregationError> {
    let labels = label_index(catalog, provenance)?;
    Ok(check_combination_with(
        policy, principal, provenance, &labels,
    ))
}

/// [`check_combination`] against an explicit label index. Resources missing
/// from the index are treated as unlabeled.
pub fn check_combination_with(
    policy: &AggregationPolicy,
    principal: &PrincipalId,
    provenance: &ProvenanceSet,
    labels: &LabelIndex,
) -> CombinationDecision {
    // label -> lowest covering resource
    let mut cover: BTreeMap<&str, &ResourceId> = BTreeMap::new();
    for r in provenance.iter() {
        for l in labels.get(r).into_iter().flatten() {
            cover.entry(l.as_str()).or_insert(r);
        }
    }
    let mut rules: Vec<&DenyCombinationRule> = policy
        .rules
        .iter()
        .filter(|rule| rule.applies_to.matches(principal))
        .filter(|rule| {
            rule.forbidden_labels
                .iter()
                .all(|l| cover.contains_key(l.as_str()))
        })
        .collect();
    rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
    match rules.first() {
        None => CombinationDecision::Allow,
        Some(rule) => CombinationDecision::Deny {
            rule_id: rule.rule_id.clone(),
            witness: rule
                .forbidden_labels
                .iter()
                .map(|l| (l.clone(), cover[l.as_str()].clone()))
                .collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contribution {
    pub resource: ResourceId,
    pub vertex: VertexId,
    pub tick: LogicalTime,
}

/// The retrievals that fed `artifact`, ordered by tick then vertex id.
///
/// `produced` holds every artifact of the execution keyed by producing vertex.
pub fn inspect_contributions(
    artifact: &DataArtifact,
    graph: &WorkflowGraph,
    produced: &BTreeMap<VertexId, DataArtifact>,
) -> Result<Vec<Contribution>, AggregationError> {
    let foreign = || AggregationError::ForeignArtifact {
        artifact: artifact.id.to_string(),
        workflow: graph.workflow_id.to_string(),
    };
    if artifact.workflow_id != graph.workflow_id || graph.vertex(&artifact.produced_by).is_none() {
        return Err(foreign());
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![artifact.produced_by.clone()];
    while let Some(v) = stack.pop() {
        if !seen.insert(v.clone()) {
            continue;
        }
        let Some(vertex) = graph.vertex(&v) else {
            continue;
        };
        if let VertexKind::Retrieve { .. } = vertex.kind {
            if let Some(a) = produced.get(&v) {
                for r in a.provenance.iter() {
                    out.push(Contribution {
                        resource: r.clone(),
                        vertex: v.clone(),
                        tick: a.produced_at,
                    });
                }
            }
        }
        for p in graph.predecessors(&v) {
            if produced.contains_key(p) {
                stack.push(p.clone());
            }
        }
    }
    out.sort_by(|a, b| (a.tick, &a.vertex).cmp(&(b.tick, &b.vertex)));
    Ok(out)
}

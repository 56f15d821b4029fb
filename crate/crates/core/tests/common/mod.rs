#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use authprop::aggregation::{AggregationPolicy, DenyCombinationRule, RuleSubject};
use authprop::delegation::{RevocationTarget, TokenId, ValiditySpec};
use authprop::model::{Action, Catalog, Grant, Principal, Resource, ResourceId, Scope};
use authprop::simulator::{NamedTuple, Scenario, ScenarioConfig, ScenarioEvent, ScheduledEvent};
use authprop::store::{AuthorizationTuple, LogicalTime, Subject};
use authprop::trace::{TraceEvent, WorkflowTrace};
use authprop::workflow::{
    ActionVertex, OnDeny, PlanStep, TemporalPolicy, VertexId, VertexKind, WorkflowGraph,
};
use rand::seq::SliceRandom;
use rand::Rng;

pub const POLICIES: [TemporalPolicy; 3] = [
    TemporalPolicy::InitiationTime,
    TemporalPolicy::AccessTime,
    TemporalPolicy::CompletionTime,
];

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn load(name: &str) -> Scenario {
    let text = std::fs::read_to_string(scenario_dir().join(name)).unwrap();
    Scenario::from_json(&text).unwrap()
}

/// Every bundled scenario, by file name.
pub fn corpus() -> Vec<(String, Scenario)> {
    let mut names: Vec<String> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), load(&n))).collect()
}

/// The policies a scenario is meant to run under.
pub fn policies_for(s: &Scenario) -> Vec<TemporalPolicy> {
    match s.config.temporal_policy {
        Some(p) => vec![p],
        None => POLICIES.to_vec(),
    }
}

fn reads(rs: &[ResourceId]) -> Scope {
    rs.iter()
        .map(|r| Grant::new(r.clone(), Action::Read))
        .collect()
}

fn subset<T: Clone>(rng: &mut impl Rng, items: &[T], p: f64) -> Vec<T> {
    items.iter().filter(|_| rng.gen_bool(p)).cloned().collect()
}

/// A random valid scenario with at most `max_vertices` vertices.
///
/// `permissive` scenarios grant everything to everyone and script no
/// events, so every vertex runs.
pub fn random_scenario(rng: &mut impl Rng, max_vertices: usize, permissive: bool) -> Scenario {
    let max_vertices = max_vertices.max(3);
    let n_res = rng.gen_range(2..=6);
    let labels = ["l0", "l1", "l2", "l3"];
    let resources: Vec<Resource> = (0..n_res)
        .map(|i| {
            let ls: Vec<&str> = labels
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(0.3))
                .collect();
            Resource::labeled(format!("r{i}"), ls)
        })
        .collect();
    let rids: Vec<ResourceId> = resources.iter().map(|r| r.id.clone()).collect();

    let n_agents = rng.gen_range(1..=3);
    let require_attestation = !permissive && rng.gen_bool(0.2);
    let mut principals = vec![Principal::human("h"), Principal::human("h2")];
    for i in 0..n_agents {
        let base = if permissive {
            rids.clone()
        } else {
            subset(rng, &rids, 0.8)
        };
        let attested = permissive || rng.gen_bool(0.85);
        principals.push(Principal::agent(format!("a{i}"), reads(&base)).with_attested(attested));
    }
    let catalog = Catalog::new(principals, resources).requiring_attestation(require_attestation);

    let mut tuples = Vec::new();
    let mut named = Vec::new();
    let mut push = |tuples: &mut Vec<NamedTuple>, tuple: AuthorizationTuple| {
        let name = format!("t{}", tuples.len());
        named.push(name.clone());
        tuples.push(NamedTuple {
            name: Some(name),
            tuple,
        });
    };
    let mut grouped = false;
    let mut held = Vec::new();
    for r in &rids {
        for who in ["h", "h2"] {
            let roll: f64 = rng.gen();
            if permissive || roll < 0.6 {
                push(
                    &mut tuples,
                    AuthorizationTuple::grant(who, Action::Read, r.clone(), LogicalTime(0)),
                );
            } else if roll < 0.85 {
                if !grouped {
                    push(
                        &mut tuples,
                        AuthorizationTuple::member_of(
                            Subject::Principal("h".into()),
                            "g",
                            LogicalTime(0),
                        ),
                    );
                    grouped = true;
                }
                if who == "h" {
                    push(
                        &mut tuples,
                        AuthorizationTuple::group_grant(
                            "g",
                            Action::Read,
                            r.clone(),
                            LogicalTime(0),
                        ),
                    );
                }
            } else {
                continue;
            }
            if who == "h" {
                held.push(r.clone());
            }
        }
    }

    let validity = |rng: &mut dyn rand::RngCore| -> ValiditySpec {
        if permissive {
            return ValiditySpec::WorkflowLifetime;
        }
        match rng.gen_range(0..3) {
            0 => ValiditySpec::WorkflowLifetime,
            1 => ValiditySpec::WallClockTtl {
                ticks: rng.gen_range(1..=8),
            },
            _ => ValiditySpec::ExecCount {
                n: rng.gen_range(1..=6),
            },
        }
    };
    let mut root_scope = if permissive {
        rids.clone()
    } else {
        held.clone()
    };
    if !permissive && rng.gen_bool(0.1) {
        root_scope.push(rids.choose(rng).unwrap().clone());
    }
    root_scope.sort();
    root_scope.dedup();
    let mut tokens = vec![PlanStep::Mint {
        bind: "root".into(),
        scope: reads(&root_scope),
        validity: ValiditySpec::WorkflowLifetime,
    }];
    let mut token_scope: BTreeMap<String, Vec<ResourceId>> = BTreeMap::new();
    token_scope.insert("root".into(), root_scope);
    for i in 0..n_agents {
        let from = if i > 0 && rng.gen_bool(0.3) {
            format!("tok{}", rng.gen_range(0..i))
        } else {
            "root".to_string()
        };
        let parent = token_scope[&from].clone();
        let scope = if permissive {
            parent
        } else {
            subset(rng, &parent, 0.8)
        };
        let bind = format!("tok{i}");
        tokens.push(PlanStep::Attenuate {
            bind: bind.as_str().into(),
            from: from.as_str().into(),
            subject: format!("a{i}").into(),
            scope: reads(&scope),
            validity: validity(rng),
        });
        token_scope.insert(bind, scope);
    }

    let n = rng.gen_range(3..=max_vertices);
    let n_ret = rng.gen_range(1..=2.min(n - 2));
    let n_retrieve = rng.gen_range(1..=((n - n_ret) / 2).max(1));
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    let mut late = Vec::new();
    for k in 0..n {
        let id = format!("v{k:02}");
        let agent = rng.gen_range(0..n_agents);
        let kind = if k < n_retrieve {
            if !permissive && rng.gen_bool(0.1) {
                late.push((k, id.clone()));
                VertexKind::Retrieve { resource: None }
            } else {
                VertexKind::Retrieve {
                    resource: Some(rids.choose(rng).unwrap().clone()),
                }
            }
        } else if k < n - n_ret {
            let fan_in = rng.gen_range(1..=3.min(k));
            let mut inputs: Vec<usize> = (0..k).collect();
            inputs.shuffle(rng);
            for i in inputs.into_iter().take(fan_in) {
                edges.push((VertexId::new(format!("v{i:02}")), VertexId::new(id.clone())));
            }
            if rng.gen_bool(0.5) {
                VertexKind::Synthesize
            } else {
                VertexKind::Transform
            }
        } else {
            let from = rng.gen_range(0..n - n_ret);
            edges.push((
                VertexId::new(format!("v{from:02}")),
                VertexId::new(id.clone()),
            ));
            VertexKind::Return {
                recipient: if rng.gen_bool(0.7) { "h" } else { "h2" }.into(),
            }
        };
        vertices.push(ActionVertex {
            id: id.as_str().into(),
            kind,
            agent: format!("a{agent}").into(),
            token: format!("tok{agent}").as_str().into(),
        });
    }

    let mut events = Vec::new();
    if !permissive {
        for (k, id) in late {
            if rng.gen_bool(0.8) {
                events.push(ScheduledEvent {
                    tick: rng.gen_range(1..=k as u64 + 1),
                    event: ScenarioEvent::BindResource {
                        vertex: id.as_str().into(),
                        resource: rids.choose(rng).unwrap().clone(),
                    },
                });
            }
        }
        if rng.gen_bool(0.5) {
            events.push(ScheduledEvent {
                tick: rng.gen_range(1..=n as u64 + 1),
                event: ScenarioEvent::RevokeTuple {
                    tuple: named.choose(rng).unwrap().clone(),
                },
            });
        }
        if rng.gen_bool(0.2) {
            let target = if rng.gen_bool(0.5) {
                RevocationTarget::Token(TokenId::new(format!("tok{}", rng.gen_range(0..n_agents))))
            } else {
                RevocationTarget::Principal(format!("a{}", rng.gen_range(0..n_agents)).into())
            };
            events.push(ScheduledEvent {
                tick: rng.gen_range(1..=n as u64 + 1),
                event: ScenarioEvent::RevokeToken { target },
            });
        }
        events.sort_by_key(|e| e.tick);
    }

    let mut rules = Vec::new();
    for i in 0..rng.gen_range(0..=2) {
        let mut ls: Vec<&str> = labels.to_vec();
        ls.shuffle(rng);
        let k = rng.gen_range(2..=3);
        rules.push(DenyCombinationRule {
            rule_id: format!("rule{i}"),
            applies_to: if rng.gen_bool(0.7) {
                RuleSubject::Any
            } else {
                RuleSubject::Principal(["h", "h2", "a0"].choose(rng).unwrap().to_string().into())
            },
            forbidden_labels: ls[..k].iter().map(|s| s.to_string()).collect(),
        });
    }

    let scenario = Scenario {
        schema_version: authprop::simulator::SCHEMA_VERSION,
        name: "random".into(),
        description: String::new(),
        catalog,
        tuples,
        tokens,
        graph: WorkflowGraph {
            workflow_id: "wf-random".into(),
            initiator: "h".into(),
            vertices,
            edges,
        },
        config: ScenarioConfig {
            temporal_policy: Some(*POLICIES.choose(rng).unwrap()),
            on_deny: if rng.gen_bool(0.5) {
                OnDeny::FailWorkflow
            } else {
                OnDeny::SkipAndMarkPartial
            },
            depth_limit: None,
            start_tick: 0,
        },
        events,
        aggregation_policy: AggregationPolicy::new(rules).unwrap(),
    };
    let problems = scenario.validate();
    assert!(
        problems.is_empty(),
        "generator produced an invalid scenario: {problems:?}"
    );
    scenario
}

/// Vertices that produced an artifact or a delivery in `trace`.
pub fn executed(trace: &WorkflowTrace) -> BTreeSet<VertexId> {
    trace
        .records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::ArtifactProduced(a) => Some(a.vertex.clone()),
            TraceEvent::Delivered(d) => Some(d.vertex.clone()),
            _ => None,
        })
        .collect()
}

/// Forward reachability from `origin` over the edges between executed
/// vertices, by fixpoint iteration over the edge list.
pub fn brute_force_reach(
    graph: &WorkflowGraph,
    executed: &BTreeSet<VertexId>,
    origin: &VertexId,
) -> BTreeSet<VertexId> {
    let mut reach = BTreeSet::from([origin.clone()]);
    if !executed.contains(origin) {
        return reach;
    }
    loop {
        let before = reach.len();
        for (a, b) in &graph.edges {
            if reach.contains(a) && executed.contains(a) && executed.contains(b) {
                reach.insert(b.clone());
            }
        }
        if reach.len() == before {
            return reach;
        }
    }
}

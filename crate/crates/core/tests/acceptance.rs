//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use authprop::aggregation::{
    check_combination, AggregationPolicy, CombinationDecision, DenyCombinationRule, ProvenanceSet,
    RuleSubject,
};
use authprop::audit::{access_records, audit, audit_bytes, taint};
use authprop::delegation::{
    attenuate, effective_authority, mint_root, verify_chain, DelegationToken, TokenId, ValiditySpec,
};
use authprop::digest::Digest;
use authprop::model::{
    Action, Catalog, Grant, Principal, PrincipalId, Resource, ResourceId, Scope,
};
use authprop::simulator::{
    revocation_race, run_scenario_with_policy, EngineMode, RaceConfig, RunOutput,
};
use authprop::store::{AuthorizationTuple, LogicalTime, TupleStore};
use authprop::trace::{verify_bytes, TraceEvent, WorkflowTrace};
use authprop::workflow::{DenyReason, ExecutionStatus, TemporalPolicy, VertexId, VertexKind};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(u32, &str, Check, Option<Duration>); 9] = [
        (
            1,
            "no privilege escalation through delegation",
            no_escalation,
            Some(Duration::from_secs(10)),
        ),
        (
            2,
            "temporal-policy matrix on the revocation-race family",
            policy_matrix,
            None,
        ),
        (
            3,
            "revocation scaling, TTL vs execution count",
            revocation_scaling,
            Some(Duration::from_secs(5)),
        ),
        (4, "aggregation enforcement", aggregation_enforcement, None),
        (
            5,
            "offline audit equivalence and tamper evidence",
            offline_audit,
            None,
        ),
        (
            6,
            "taint equals forward reachability",
            taint_reachability,
            None,
        ),
        (
            7,
            "failure replay: fallback widening and nominal delegation",
            failure_replay,
            None,
        ),
        (
            8,
            "due-diligence chain completes partial with disclosure",
            due_diligence,
            None,
        ),
        (9, "deterministic traces", determinism, None),
    ];
    let mut failed = 0;
    for (n, name, check, limit) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn run(file: &str, mode: EngineMode, policy: TemporalPolicy) -> RunOutput {
    run_scenario_with_policy(&load(file), mode, policy).unwrap()
}

// ---- 1 ----------------------------------------------------------------------

fn chain_world(rng: &mut ChaCha8Rng) -> (Catalog, TupleStore) {
    let resources: Vec<Resource> = (0..12).map(|i| Resource::new(format!("r{i:02}"))).collect();
    let all: Vec<String> = (0..12).map(|i| format!("r{i:02}")).collect();
    let mut principals = vec![Principal::human("init")];
    for i in 0..7 {
        let base: Vec<&str> = all
            .iter()
            .filter(|_| rng.gen_bool(0.7))
            .map(|s| s.as_str())
            .collect();
        principals.push(Principal::agent(format!("p{i}"), Scope::reads(base)).with_attested(true));
    }
    let catalog = Catalog::new(principals, resources);
    let mut store = TupleStore::new(&catalog);
    for r in &all {
        if rng.gen_bool(0.8) {
            store
                .add_tuple(AuthorizationTuple::grant(
                    "init",
                    Action::Read,
                    r.as_str(),
                    LogicalTime(0),
                ))
                .unwrap();
        }
    }
    (catalog, store)
}

fn narrow(rng: &mut ChaCha8Rng, s: &Scope) -> Scope {
    s.iter().filter(|_| rng.gen_bool(0.75)).cloned().collect()
}

fn random_validity(rng: &mut ChaCha8Rng) -> ValiditySpec {
    match rng.gen_range(0..3) {
        0 => ValiditySpec::WorkflowLifetime,
        1 => ValiditySpec::WallClockTtl {
            ticks: rng.gen_range(1..20),
        },
        _ => ValiditySpec::ExecCount {
            n: rng.gen_range(1..20),
        },
    }
}

/// Every way of changing exactly one field of `token`.
fn corruptions(token: &DelegationToken, catalog: &Catalog) -> Vec<(String, DelegationToken)> {
    let mut out = Vec::new();
    let mut push = |what: String, f: &dyn Fn(&mut DelegationToken)| {
        let mut t = token.clone();
        f(&mut t);
        assert_ne!(&t, token, "corruption {what} changed nothing");
        out.push((what, t));
    };
    push("token_id".into(), &|t| {
        t.token_id = TokenId::new(format!("{}x", t.token_id))
    });
    push("workflow_id".into(), &|t| {
        t.workflow_id = format!("{}x", t.workflow_id).into()
    });
    let other = |p: &PrincipalId| -> PrincipalId {
        catalog
            .principals()
            .iter()
            .map(|q| q.id.clone())
            .find(|q| q != p)
            .unwrap()
    };
    for k in 0..token.blocks.len() {
        let b = &token.blocks[k];
        let (issuer, subject) = (other(&b.issuer), other(&b.subject));
        push(format!("block {k} seq"), &|t| t.blocks[k].seq += 1);
        push(format!("block {k} issuer"), &|t| {
            t.blocks[k].issuer = issuer.clone()
        });
        push(format!("block {k} subject"), &|t| {
            t.blocks[k].subject = subject.clone()
        });
        let extra = (0..13)
            .map(|i| Grant::read(format!("r{i:02}")))
            .find(|g| !b.scope.contains(g))
            .unwrap();
        push(format!("block {k} scope widened"), &|t| {
            t.blocks[k].scope.insert(extra.clone());
        });
        if let Some(g) = b.scope.iter().next().cloned() {
            push(format!("block {k} scope narrowed"), &|t| {
                t.blocks[k].scope = t.blocks[k]
                    .scope
                    .iter()
                    .filter(|x| **x != g)
                    .cloned()
                    .collect()
            });
        }
        let validity = match b.validity {
            ValiditySpec::WorkflowLifetime => ValiditySpec::ExecCount { n: 1 },
            ValiditySpec::WallClockTtl { ticks } => ValiditySpec::WallClockTtl { ticks: ticks + 1 },
            ValiditySpec::ExecCount { n } => ValiditySpec::ExecCount { n: n + 1 },
        };
        push(format!("block {k} validity"), &|t| {
            t.blocks[k].validity = validity
        });
        push(format!("block {k} issued_at"), &|t| {
            t.blocks[k].issued_at = LogicalTime(t.blocks[k].issued_at.0 + 1)
        });
        push(format!("block {k} digest"), &|t| {
            t.blocks[k].digest = Digest::of(b"forged")
        });
    }
    out
}

fn no_escalation() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1A1);
    let mut corrupted = 0usize;
    let mut chains = 0usize;
    let mut max_depth = 0;
    while chains < 1000 {
        let (catalog, store) = chain_world(&mut rng);
        let held: Scope = (0..12)
            .map(|i| Grant::read(format!("r{i:02}")))
            .filter(|g| {
                store
                    .auth_check(&"init".into(), g.action, &g.resource, LogicalTime(0))
                    .unwrap_or(false)
            })
            .collect();
        let root_scope = narrow(&mut rng, &held);
        let t0 = LogicalTime(rng.gen_range(0..5));
        let mut token = mint_root(
            &catalog,
            &store,
            &"init".into(),
            TokenId::new(format!("c{chains}")),
            "wf".into(),
            root_scope,
            random_validity(&mut rng),
            t0,
        )
        .map_err(|e| format!("mint: {e}"))?;
        let depth = rng.gen_range(1..=6);
        let mut t = t0;
        while token.blocks.len() < depth {
            t = LogicalTime(t.0 + rng.gen_range(0..3));
            let subject: PrincipalId = format!("p{}", rng.gen_range(0..7)).into();
            let scope = narrow(&mut rng, &token.last().scope);
            token = attenuate(
                &token,
                &catalog,
                &subject,
                scope,
                random_validity(&mut rng),
                t,
            )
            .map_err(|e| format!("attenuate: {e}"))?;
        }
        max_depth = max_depth.max(token.blocks.len());
        ensure!(
            verify_chain(&token, &catalog).is_valid(),
            "fresh chain {chains} rejected"
        );

        let eval = LogicalTime(t.0 + 1);
        let eff = effective_authority(&token, &store, &catalog, eval).map_err(|e| e.to_string())?;
        let root = &token.blocks[0].scope;
        for b in &token.blocks {
            ensure!(
                eff.scope.is_subset(&b.scope),
                "chain {chains}: effective authority exceeds block {}",
                b.seq
            );
            ensure!(
                b.scope.is_subset(root),
                "chain {chains}: block {} exceeds the root",
                b.seq
            );
        }
        // Independent meet: root grants the initiator still holds, every
        // block, and the holder's base scope.
        let holder = catalog.principal(token.holder()).unwrap();
        let expected: BTreeSet<Grant> = root
            .iter()
            .filter(|g| {
                store
                    .auth_check(&"init".into(), g.action, &g.resource, eval)
                    .unwrap_or(false)
            })
            .filter(|g| token.blocks.iter().all(|b| b.scope.contains(g)))
            .filter(|g| token.blocks.len() == 1 || holder.base_scope.contains(g))
            .cloned()
            .collect();
        let got: BTreeSet<Grant> = eff.scope.iter().cloned().collect();
        ensure!(
            got == expected,
            "chain {chains}: effective authority {got:?} != oracle {expected:?}"
        );

        // Escalation through the API is refused outright.
        if let Some(extra) = (0..12)
            .map(|i| Grant::read(format!("r{i:02}")))
            .find(|g| !token.last().scope.contains(g))
        {
            let mut wider = token.last().scope.clone();
            wider.insert(extra);
            ensure!(
                attenuate(
                    &token,
                    &catalog,
                    &"p0".into(),
                    wider,
                    ValiditySpec::WorkflowLifetime,
                    t
                )
                .is_err(),
                "chain {chains}: widening attenuation accepted"
            );
        }

        for (what, bad) in corruptions(&token, &catalog) {
            ensure!(
                !verify_chain(&bad, &catalog).is_valid(),
                "chain {chains}: corruption of {what} accepted"
            );
            corrupted += 1;
        }
        chains += 1;
    }
    Ok(format!(
        "{chains} chains (depth <= {max_depth}), {corrupted} single-field corruptions all rejected"
    ))
}

// ---- 2 ----------------------------------------------------------------------

#[derive(Debug, PartialEq, Eq)]
struct Row {
    access: bool,
    provisional: bool,
    delivered: bool,
    denied_at: Option<&'static str>,
}

fn observed(out: &RunOutput) -> Row {
    let access = out
        .result
        .accesses
        .get(&VertexId::new("open-room"))
        .copied()
        .unwrap_or(false);
    let provisional = out
        .trace
        .records
        .iter()
        .any(|r| matches!(&r.event, TraceEvent::AccessDecided(a) if a.provisional));
    let denied_at = match &out.result.status {
        ExecutionStatus::Denied { at, .. } => Some(match at.as_str() {
            "open-room" => "open-room",
            "digest" => "digest",
            "hand-back" => "hand-back",
            _ => "other",
        }),
        _ => None,
    };
    Row {
        access,
        provisional,
        delivered: !out.result.delivered.is_empty(),
        denied_at,
    }
}

fn policy_matrix() -> Result<String, String> {
    use TemporalPolicy::*;
    let row = |access, provisional, delivered, denied_at| Row {
        access,
        provisional,
        delivered,
        denied_at,
    };
    // Hand-traced: t0 = 0, open-room at 1, digest at 2, hand-back at 3.
    let oracle = [
        (
            "race_before_access.json",
            InitiationTime,
            row(true, false, true, None),
        ),
        (
            "race_before_access.json",
            AccessTime,
            row(false, false, false, Some("open-room")),
        ),
        (
            "race_before_access.json",
            CompletionTime,
            row(true, true, false, Some("hand-back")),
        ),
        (
            "race_after_access.json",
            InitiationTime,
            row(true, false, true, None),
        ),
        (
            "race_after_access.json",
            AccessTime,
            row(true, false, false, Some("digest")),
        ),
        (
            "race_after_access.json",
            CompletionTime,
            row(true, true, false, Some("hand-back")),
        ),
    ];
    for (file, policy, want) in &oracle {
        let out = run(file, EngineMode::Compliant, *policy);
        let got = observed(&out);
        ensure!(
            &got == want,
            "{file} under {policy}: got {got:?}, hand trace says {want:?}"
        );
        if *policy == CompletionTime {
            let reason = match &out.result.status {
                ExecutionStatus::Denied { reason, .. } => reason.clone(),
                _ => unreachable!(),
            };
            ensure!(
                matches!(
                    reason,
                    DenyReason::RecipientNotAuthorized { .. }
                        | DenyReason::ProvisionalAccessRevoked { .. }
                ),
                "{file}: completion-time delivery denied for {reason}"
            );
        }
    }
    // Initiation allows ⊇ completion delivers ⊆ access allows, per scenario.
    for file in ["race_before_access.json", "race_after_access.json"] {
        let init = observed(&run(file, EngineMode::Compliant, InitiationTime));
        let acc = observed(&run(file, EngineMode::Compliant, AccessTime));
        let comp = observed(&run(file, EngineMode::Compliant, CompletionTime));
        ensure!(
            !comp.delivered || init.access,
            "{file}: ordering broken on the initiation side"
        );
        ensure!(
            !comp.delivered || acc.access,
            "{file}: ordering broken on the access side"
        );
    }
    Ok("6/6 policy runs match the hand-trace matrix; revocation before access: initiation delivers, access denies at the retrieval, completion admits then denies delivery".into())
}

// ---- 3 ----------------------------------------------------------------------

/// Closed forms. TTL consults at multiples of `ttl`; exec-count consults at
/// every `n`-th operation, counting from the first.
fn ttl_oracle(v: u64, ttl: u64, r: u64) -> u64 {
    v * (r.div_ceil(ttl) * ttl - r)
}

fn exec_oracle(v: u64, n: u64, r: u64) -> u64 {
    (v * r).div_ceil(n) * n - v * r
}

fn revocation_scaling() -> Result<String, String> {
    let (ttl, n, r) = (10, 5, 1);
    let mut rows = Vec::new();
    for v in [1, 10, 100, 1000] {
        let m = revocation_race(RaceConfig {
            velocity: v,
            ttl,
            exec_count: n,
            revoke_at: r,
            horizon: 100,
        })
        .map_err(|e| e.to_string())?;
        ensure!(
            m.unauthorized_ops_exec <= n,
            "v={v}: exec-count admitted {} > n={n}",
            m.unauthorized_ops_exec
        );
        ensure!(
            m.unauthorized_ops_ttl == ttl_oracle(v, ttl, r),
            "v={v}: ttl admitted {}",
            m.unauthorized_ops_ttl
        );
        ensure!(
            m.unauthorized_ops_exec == exec_oracle(v, n, r),
            "v={v}: exec admitted {}",
            m.unauthorized_ops_exec
        );
        rows.push(m);
    }
    let base = rows[0].unauthorized_ops_ttl;
    for m in &rows {
        ensure!(
            m.unauthorized_ops_ttl == m.config.velocity * base,
            "ttl admissions not linear in v at v={}",
            m.config.velocity
        );
    }
    // v * ttl = 120 * n
    let (v, ttl, n) = (120, 119, 119);
    let m = revocation_race(RaceConfig {
        velocity: v,
        ttl,
        exec_count: n,
        revoke_at: r,
        horizon: 1000,
    })
    .map_err(|e| e.to_string())?;
    let ratio = m
        .ratio
        .ok_or("exec-count admitted nothing at the operating point")?;
    ensure!(
        (ratio - 120.0).abs() <= 12.0,
        "operating point ratio {ratio}"
    );
    ensure!(
        m.unauthorized_ops_ttl == ttl_oracle(v, ttl, r)
            && m.unauthorized_ops_exec == exec_oracle(v, n, r),
        "operating point counts {} / {} disagree with the closed form",
        m.unauthorized_ops_ttl,
        m.unauthorized_ops_exec
    );
    let ttl_col: Vec<u64> = rows.iter().map(|m| m.unauthorized_ops_ttl).collect();
    let exec_col: Vec<u64> = rows.iter().map(|m| m.unauthorized_ops_exec).collect();
    Ok(format!(
        "v in [1, 10, 100, 1000] at ttl=10 n=5: ttl column {ttl_col:?}, exec column {exec_col:?}; operating point v=120 ttl=119 n=119: {}/{} = {ratio:.1}",
        m.unauthorized_ops_ttl, m.unauthorized_ops_exec
    ))
}

// ---- 4 ----------------------------------------------------------------------

fn witness_valid(
    catalog: &Catalog,
    provenance: &ProvenanceSet,
    witness: &BTreeMap<String, ResourceId>,
) -> bool {
    witness
        .iter()
        .all(|(l, r)| provenance.contains(r) && catalog.labels(r).is_some_and(|ls| ls.contains(l)))
}

fn brute_force_combination(
    rules: &[DenyCombinationRule],
    principal: &PrincipalId,
    provenance: &BTreeSet<ResourceId>,
    catalog: &Catalog,
) -> CombinationDecision {
    let mut violated: Vec<&DenyCombinationRule> = Vec::new();
    for rule in rules {
        let applies = match &rule.applies_to {
            RuleSubject::Any => true,
            RuleSubject::Principal(p) => p == principal,
        };
        let covered = rule.forbidden_labels.iter().all(|l| {
            provenance
                .iter()
                .any(|r| catalog.labels(r).unwrap().contains(l))
        });
        if applies && covered {
            violated.push(rule);
        }
    }
    match violated.iter().min_by(|a, b| a.rule_id.cmp(&b.rule_id)) {
        None => CombinationDecision::Allow,
        Some(rule) => CombinationDecision::Deny {
            rule_id: rule.rule_id.clone(),
            witness: rule
                .forbidden_labels
                .iter()
                .map(|l| {
                    let r = provenance
                        .iter()
                        .filter(|r| catalog.labels(r).unwrap().contains(l))
                        .min()
                        .unwrap();
                    (l.clone(), r.clone())
                })
                .collect(),
        },
    }
}

fn aggregation_enforcement() -> Result<String, String> {
    let scenario = load("xy_aggregation.json");
    let out =
        run_scenario_with_policy(&scenario, EngineMode::Compliant, TemporalPolicy::AccessTime)
            .map_err(|e| e.to_string())?;
    for v in ["fetch-a", "fetch-b", "fetch-c"] {
        ensure!(
            out.result.accesses.get(&VertexId::new(v)) == Some(&true),
            "retrieval {v} not allowed"
        );
    }
    ensure!(
        out.result.delivered.is_empty(),
        "combined answer was delivered"
    );
    let synth = out
        .trace
        .records
        .iter()
        .find_map(|r| match &r.event {
            TraceEvent::SynthesisDecided(s) => Some(s.clone()),
            _ => None,
        })
        .ok_or("no synthesis record")?;
    ensure!(!synth.decision.is_allow(), "synthesis allowed");
    let CombinationDecision::Deny { rule_id, witness } = &synth.agent_aggregation else {
        return Err("agent aggregation check allowed the combination".into());
    };
    ensure!(rule_id == "acquisition-mosaic", "wrong rule {rule_id}");
    ensure!(
        witness_valid(&scenario.catalog, &synth.provenance, witness),
        "invalid witness {witness:?}"
    );
    ensure!(
        witness.keys().cloned().collect::<BTreeSet<_>>()
            == BTreeSet::from([
                "revenue-forecast".to_string(),
                "supplier-identity".to_string()
            ]),
        "witness labels {witness:?}"
    );
    ensure!(
        matches!(&out.result.status, ExecutionStatus::Denied { at, reason: DenyReason::AggregationViolation { .. } } if at.as_str() == "answer"),
        "status {}",
        out.result.status
    );
    // Recipient side: delivering the combination to the analyst is also refused.
    let analyst = scenario.catalog.principal(&"analyst".into()).unwrap();
    let check = authprop::workflow::delivery_check(
        analyst,
        &synth.provenance,
        &TupleStore::new(&scenario.catalog),
        LogicalTime(0),
        &scenario.aggregation_policy,
        &synth.labels,
    );
    ensure!(
        !check.decision.is_allow(),
        "delivery of the combination would be allowed"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0xA661);
    let labels = ["l0", "l1", "l2", "l3", "l4", "l5"];
    let mut denies = 0;
    for i in 0..500 {
        let n_res = rng.gen_range(1..=10);
        let resources: Vec<Resource> = (0..n_res)
            .map(|k| {
                Resource::labeled(
                    format!("r{k}"),
                    labels.iter().copied().filter(|_| rng.gen_bool(0.25)),
                )
            })
            .collect();
        let catalog = Catalog::new(
            vec![Principal::human("p"), Principal::human("q")],
            resources,
        );
        let mut rules = Vec::new();
        for k in 0..rng.gen_range(0..=10) {
            let mut ls = labels.to_vec();
            ls.shuffle(&mut rng);
            rules.push(DenyCombinationRule {
                rule_id: format!("rule{k:02}"),
                applies_to: if rng.gen_bool(0.6) {
                    RuleSubject::Any
                } else {
                    RuleSubject::Principal(if rng.gen_bool(0.5) { "p" } else { "q" }.into())
                },
                forbidden_labels: ls[..rng.gen_range(2..=3)]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            });
        }
        let policy = AggregationPolicy::new(rules.clone()).map_err(|e| e.to_string())?;
        let provenance: BTreeSet<ResourceId> = (0..n_res)
            .filter(|_| rng.gen_bool(0.5))
            .map(|k| ResourceId::new(format!("r{k}")))
            .collect();
        let mut pset = ProvenanceSet::new();
        for r in &provenance {
            pset.insert(r.clone());
        }
        let principal: PrincipalId = if rng.gen_bool(0.5) { "p" } else { "q" }.into();
        let got =
            check_combination(&policy, &principal, &pset, &catalog).map_err(|e| e.to_string())?;
        let want = brute_force_combination(&rules, &principal, &provenance, &catalog);
        ensure!(got == want, "instance {i}: {got:?} != brute force {want:?}");
        if let CombinationDecision::Deny { witness, .. } = &got {
            ensure!(
                witness_valid(&catalog, &pset, witness),
                "instance {i}: invalid witness"
            );
            denies += 1;
        }
    }
    Ok(format!("X/Y retrievals allowed, synthesis and delivery denied by {rule_id} with witness {witness:?}; 500 random instances ({denies} denials) match brute force"))
}

// ---- 5 ----------------------------------------------------------------------

fn offline_audit() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0FF1);
    let mut denied = 0;
    let mut partial = 0;
    let mut accesses = 0;
    for i in 0..100 {
        let scenario = random_scenario(&mut rng, 12, false);
        let policy = scenario.config.temporal_policy.unwrap();
        let out = run_scenario_with_policy(&scenario, EngineMode::Compliant, policy)
            .map_err(|e| format!("scenario {i}: {e}"))?;
        let verdict =
            audit_bytes(&out.trace.to_bytes()).map_err(|e| format!("scenario {i}: {e}"))?;
        ensure!(
            verdict.is_clean(),
            "scenario {i}: compliant run audited dirty: {:?}",
            verdict.violations()
        );
        ensure!(
            verdict.outcome.status.as_ref() == Some(&out.result.status),
            "scenario {i}: status differs"
        );
        ensure!(
            verdict.outcome.accesses == out.result.accesses,
            "scenario {i}: access outcomes differ"
        );
        ensure!(
            verdict.outcome.delivered == out.result.delivered,
            "scenario {i}: deliveries differ"
        );
        for a in &verdict.accesses {
            ensure!(
                a.recomputed_allow == Some(a.recorded_allow),
                "scenario {i}: record {} recomputed {:?} vs recorded {}",
                a.seq,
                a.recomputed_allow,
                a.recorded_allow
            );
        }
        accesses += verdict.accesses.len();
        match out.result.status {
            ExecutionStatus::Denied { .. } => denied += 1,
            ExecutionStatus::CompletedPartial { .. } => partial += 1,
            ExecutionStatus::Completed => {}
        }
    }

    let sample = loop {
        let s = random_scenario(&mut rng, 30, true);
        let out = run_scenario_with_policy(&s, EngineMode::Compliant, TemporalPolicy::AccessTime)
            .map_err(|e| e.to_string())?;
        if out.trace.len() >= 50 {
            break out.trace;
        }
    };
    let mut trace = WorkflowTrace::new(sample.header.clone());
    for r in &sample.records[..50] {
        trace.push(r.tick, r.event.clone());
    }
    let bytes = trace.to_bytes();
    ensure!(
        verify_bytes(&bytes).map(|v| v.is_intact()) == Ok(true),
        "sample trace not intact"
    );
    let mut misses = Vec::new();
    let mut mutated = bytes.clone();
    let mut mutations = 0;
    for i in 0..bytes.len() {
        let random = loop {
            let b: u8 = rng.gen();
            if b != bytes[i] {
                break b;
            }
        };
        for value in [bytes[i] ^ 0x01, random] {
            mutated[i] = value;
            mutations += 1;
            if matches!(verify_bytes(&mutated), Ok(v) if v.is_intact()) {
                misses.push(i);
            }
        }
        mutated[i] = bytes[i];
    }
    ensure!(
        misses.is_empty(),
        "{} undetected mutations, first at byte {}",
        misses.len(),
        misses[0]
    );
    Ok(format!(
        "100 random scenarios ({denied} denied, {partial} partial, {accesses} accesses) audit clean with matching outcomes; {mutations} single-byte mutations of a 50-record, {}-byte trace all detected",
        bytes.len()
    ))
}

// ---- 6 ----------------------------------------------------------------------

fn check_taint(
    label: &str,
    graph: &authprop::workflow::WorkflowGraph,
    trace: &WorkflowTrace,
) -> Result<usize, String> {
    let ran = executed(trace);
    let wf = &graph.workflow_id;
    let mut checked = 0;
    for (seq, vertex) in access_records(trace) {
        let report = taint(trace, seq).map_err(|e| e.to_string())?;
        let reach = brute_force_reach(graph, &ran, &vertex);
        ensure!(
            report.tainted_vertices == reach,
            "{label} origin #{seq}: taint {:?} != reach {reach:?}",
            report.tainted_vertices
        );
        let artifacts: BTreeSet<String> = reach
            .iter()
            .filter(|v| ran.contains(*v))
            .map(|v| format!("{wf}#{v}"))
            .collect();
        let got: BTreeSet<String> = report
            .tainted_artifacts
            .iter()
            .map(|a| a.to_string())
            .collect();
        ensure!(
            got == artifacts,
            "{label} origin #{seq}: artifacts {got:?} != {artifacts:?}"
        );
        let flagged: BTreeSet<(String, String)> = graph
            .vertices
            .iter()
            .filter(|v| reach.contains(&v.id) && ran.contains(&v.id))
            .filter_map(|v| match &v.kind {
                VertexKind::Return { recipient } => {
                    Some((recipient.to_string(), format!("{wf}#{}", v.id)))
                }
                _ => None,
            })
            .collect();
        let got: BTreeSet<(String, String)> = report
            .delivered_tainted
            .iter()
            .map(|(p, a)| (p.to_string(), a.to_string()))
            .collect();
        ensure!(
            got == flagged,
            "{label} origin #{seq}: delivered flags {got:?} != {flagged:?}"
        );
        checked += 1;
    }
    Ok(checked)
}

fn taint_reachability() -> Result<String, String> {
    let mut origins = 0;
    let mut runs = 0;
    for (name, scenario) in corpus() {
        for policy in policies_for(&scenario) {
            for mode in [EngineMode::Compliant, EngineMode::LegacyBuggy] {
                let out =
                    run_scenario_with_policy(&scenario, mode, policy).map_err(|e| e.to_string())?;
                origins += check_taint(
                    &format!("{name} {policy} {mode}"),
                    &scenario.graph,
                    &out.trace,
                )?;
                runs += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7A17);
    let mut random_origins = 0;
    let mut vertices = 0;
    for i in 0..200 {
        let scenario = random_scenario(&mut rng, 30, true);
        vertices += scenario.graph.vertices.len();
        let policy = scenario.config.temporal_policy.unwrap();
        let out = run_scenario_with_policy(&scenario, EngineMode::Compliant, policy)
            .map_err(|e| e.to_string())?;
        random_origins += check_taint(&format!("random DAG {i}"), &scenario.graph, &out.trace)?;
    }
    Ok(format!(
        "{runs} corpus runs ({origins} origins) and 200 random DAGs ({vertices} vertices, {random_origins} origins) match brute-force reachability"
    ))
}

// ---- 7 ----------------------------------------------------------------------

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_authprop"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

fn access_seq(trace: &WorkflowTrace, vertex: &str) -> Option<u64> {
    access_records(trace)
        .into_iter()
        .find(|(_, v)| v.as_str() == vertex)
        .map(|(s, _)| s)
}

fn failure_replay() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = [
        (
            "fallback_scope_widening.json",
            "read-payroll",
            DenyReason::SessionBindingFailed {
                binding: "support".into(),
            },
            "read-payroll",
            4,
            "undelegated-token",
        ),
        (
            "nominal_delegation.json",
            "read-crm",
            DenyReason::DelegationFailed {
                binding: "crm-only".into(),
            },
            "read-ledger",
            8,
            "nominal-delegation",
        ),
    ];
    let mut summary = Vec::new();
    for (file, denied_at, reason, bad_vertex, bad_seq, kind) in fixtures {
        let compliant = run(file, EngineMode::Compliant, TemporalPolicy::AccessTime);
        let want = ExecutionStatus::Denied {
            at: denied_at.into(),
            reason: reason.clone(),
        };
        ensure!(
            compliant.result.status == want,
            "{file} compliant: {}",
            compliant.result.status
        );
        ensure!(
            audit(&compliant.trace).map(|v| v.is_clean()) == Ok(true),
            "{file}: compliant trace not clean"
        );

        let legacy = run(file, EngineMode::LegacyBuggy, TemporalPolicy::AccessTime);
        ensure!(
            legacy.result.status == ExecutionStatus::Completed,
            "{file} legacy: {}",
            legacy.result.status
        );
        ensure!(
            legacy.result.accesses.get(&VertexId::new(bad_vertex)) == Some(&true),
            "{file} legacy: {bad_vertex} was not admitted"
        );
        ensure!(
            access_seq(&legacy.trace, bad_vertex) == Some(bad_seq),
            "{file}: {bad_vertex} is not record {bad_seq}"
        );

        let path = dir.path().join(format!("{file}.trace"));
        std::fs::write(&path, legacy.trace.to_bytes()).map_err(|e| e.to_string())?;
        let (code, stdout) = cli(&["audit", path.to_str().unwrap()]);
        ensure!(code == 4, "{file}: audit exited {code}");
        let marker = format!("record {bad_seq} ({bad_vertex}): {kind}");
        ensure!(
            stdout.contains(&marker),
            "{file}: audit output lacks `{marker}`:\n{stdout}"
        );

        let (code, _) = cli(&[
            "run",
            &format!("{}/{file}", scenario_dir().display()),
            "--mode",
            "compliant",
            "--policy",
            "access",
        ]);
        ensure!(code == 1, "{file}: compliant cli run exited {code}");
        summary.push(format!("{file}: compliant denied at {denied_at}, legacy audit exit 4 at record {bad_seq} ({kind})"));
    }
    Ok(summary.join("; "))
}

// ---- 8 ----------------------------------------------------------------------

fn due_diligence() -> Result<String, String> {
    for policy in POLICIES {
        let out = run("due_diligence.json", EngineMode::Compliant, policy);
        let memo = VertexId::new("get-memo");
        ensure!(
            out.result.status
                == ExecutionStatus::CompletedPartial {
                    excluded: BTreeSet::from([memo.clone()])
                },
            "{policy}: status {}",
            out.result.status
        );
        ensure!(
            out.result.accesses.get(&memo) == Some(&false),
            "{policy}: memo access not denied"
        );
        ensure!(
            out.result.delivered.len() == 1,
            "{policy}: {} deliveries",
            out.result.delivered.len()
        );
        let d = &out.result.delivered[0];
        ensure!(
            d.recipient.as_str() == "analyst",
            "{policy}: delivered to {}",
            d.recipient
        );
        let disclosure = d
            .disclosure
            .as_ref()
            .ok_or(format!("{policy}: no disclosure"))?;
        ensure!(
            disclosure.upstream.contains(&memo),
            "{policy}: disclosure omits the memo vertex"
        );
        ensure!(
            disclosure
                .withheld_resources
                .contains(&ResourceId::new("committee-memo")),
            "{policy}: disclosure omits the memo source"
        );
        let provenance: BTreeSet<&str> = d.artifact.provenance.iter().map(|r| r.as_str()).collect();
        ensure!(
            provenance == BTreeSet::from(["filings", "contracts"]),
            "{policy}: provenance {provenance:?}"
        );
    }
    let (code, stdout) = cli(&[
        "run",
        &format!("{}/due_diligence.json", scenario_dir().display()),
        "--policy",
        "access",
    ]);
    ensure!(code == 0, "cli run exited {code}");
    ensure!(
        stdout.contains("completed partial (excluded: get-memo)"),
        "cli summary:\n{stdout}"
    );
    Ok("partial under all three policies; memo retrieval excluded, disclosure attached, provenance {contracts, filings}".into())
}

// ---- 9 ----------------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let mut runs = 0;
    for (name, scenario) in corpus() {
        for policy in policies_for(&scenario) {
            for mode in [EngineMode::Compliant, EngineMode::LegacyBuggy] {
                let first = run_scenario_with_policy(&scenario, mode, policy)
                    .map_err(|e| e.to_string())?
                    .trace
                    .to_bytes();
                for _ in 0..2 {
                    let again = run_scenario_with_policy(&scenario, mode, policy)
                        .map_err(|e| e.to_string())?
                        .trace
                        .to_bytes();
                    ensure!(
                        again == first,
                        "{name} {policy} {mode}: traces differ between runs"
                    );
                }
                runs += 1;
            }
        }
    }
    Ok(format!(
        "{runs} scenario/policy/mode combinations byte-identical across 3 runs"
    ))
}

//! Time-versioned relationship tuples and the point-in-time authorization check.
//!
//! Every tuple is valid on the half-open interval `[valid_from, valid_until)`,
//! so a revocation at tick `t` already denies queries at `t`. Group
//! membership is expanded breadth-first, one edge per level, and each edge is
//! judged valid or not independently at query time.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, Catalog, GroupId, PrincipalId, ResourceId};

pub const DEFAULT_DEPTH_LIMIT: u32 = 8;

/// Monotone logical clock value.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct LogicalTime(pub u64);

impl LogicalTime {
    pub const ZERO: LogicalTime = LogicalTime(0);

    pub fn next(self) -> LogicalTime {
        LogicalTime(self.0 + 1)
    }

    pub fn ticks_since(self, earlier: LogicalTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for LogicalTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl From<u64> for LogicalTime {
    fn from(t: u64) -> Self {
        LogicalTime(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Principal(PrincipalId),
    Group(GroupId),
}

/// What a tuple asserts about its subject.
///
/// A `Grant` whose subject is a group is a group grant: it applies to every
/// principal whose membership path reaches that group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    MemberOf {
        group: GroupId,
    },
    Grant {
        action: Action,
        resource: ResourceId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AuthorizationTuple {
    pub subject: Subject,
    pub relation: Relation,
    #[serde(default)]
    pub valid_from: LogicalTime,
    #[serde(default)]
    pub valid_until: Option<LogicalTime>,
}

impl AuthorizationTuple {
    pub fn grant(
        principal: impl Into<PrincipalId>,
        action: Action,
        resource: impl Into<ResourceId>,
        valid_from: LogicalTime,
    ) -> Self {
        Self {
            subject: Subject::Principal(principal.into()),
            relation: Relation::Grant {
                action,
                resource: resource.into(),
            },
            valid_from,
            valid_until: None,
        }
    }

    pub fn group_grant(
        group: impl Into<GroupId>,
        action: Action,
        resource: impl Into<ResourceId>,
        valid_from: LogicalTime,
    ) -> Self {
        Self {
            subject: Subject::Group(group.into()),
            relation: Relation::Grant {
                action,
                resource: resource.into(),
            },
            valid_from,
            valid_until: None,
        }
    }

    pub fn member_of(subject: Subject, group: impl Into<GroupId>, valid_from: LogicalTime) -> Self {
        Self {
            subject,
            relation: Relation::MemberOf {
                group: group.into(),
            },
            valid_from,
            valid_until: None,
        }
    }

    pub fn until(mut self, t: LogicalTime) -> Self {
        self.valid_until = Some(t);
        self
    }

    pub fn valid_at(&self, t: LogicalTime) -> bool {
        self.valid_from <= t && self.valid_until.is_none_or(|u| t < u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TupleId(pub u64);

impl fmt::Display for TupleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("time {requested} is before the store clock {clock}")]
    ClockRegression {
        requested: LogicalTime,
        clock: LogicalTime,
    },
    #[error("validity interval is empty: [{from}, {until})")]
    InvalidInterval {
        from: LogicalTime,
        until: LogicalTime,
    },
    #[error("tuple {0} already revoked")]
    AlreadyRevoked(TupleId),
    #[error("unknown tuple {0}")]
    UnknownTuple(TupleId),
    #[error("revocation at {at} precedes validity start {from}")]
    RevokeBeforeValid { at: LogicalTime, from: LogicalTime },
    #[error("unknown subject {0}")]
    UnknownSubject(PrincipalId),
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("snapshot time {requested} is ahead of the store clock {clock}")]
    FutureTime {
        requested: LogicalTime,
        clock: LogicalTime,
    },
}

/// Anything that can answer a point-in-time authorization query.
pub trait AuthView {
    fn allows(
        &self,
        subject: &PrincipalId,
        action: Action,
        resource: &ResourceId,
        t: LogicalTime,
    ) -> bool;
}

/// Append-only tuple store with a single writer.
#[derive(Debug, Clone)]
pub struct TupleStore {
    tuples: Vec<AuthorizationTuple>,
    clock: LogicalTime,
    depth_limit: u32,
    principals: BTreeSet<PrincipalId>,
    resources: BTreeSet<ResourceId>,
}

impl TupleStore {
    pub fn new(catalog: &Catalog) -> Self {
        Self {
            tuples: Vec::new(),
            clock: LogicalTime::ZERO,
            depth_limit: DEFAULT_DEPTH_LIMIT,
            principals: catalog.principals().iter().map(|p| p.id.clone()).collect(),
            resources: catalog.resources().iter().map(|r| r.id.clone()).collect(),
        }
    }

    pub fn with_depth_limit(mut self, limit: u32) -> Self {
        self.depth_limit = limit;
        self
    }

    pub fn depth_limit(&self) -> u32 {
        self.depth_limit
    }

    pub fn clock(&self) -> LogicalTime {
        self.clock
    }

    pub fn tuples(&self) -> impl Iterator<Item = (TupleId, &AuthorizationTuple)> {
        self.tuples
            .iter()
            .enumerate()
            .map(|(i, t)| (TupleId(i as u64), t))
    }

    pub fn get(&self, id: TupleId) -> Option<&AuthorizationTuple> {
        self.tuples.get(id.0 as usize)
    }

    /// Moves the clock forward. Moving it backwards is an error.
    pub fn advance_to(&mut self, t: LogicalTime) -> Result<(), StoreError> {
        if t < self.clock {
            return Err(StoreError::ClockRegression {
                requested: t,
                clock: self.clock,
            });
        }
        self.clock = t;
        Ok(())
    }

    pub fn add_tuple(&mut self, tuple: AuthorizationTuple) -> Result<TupleId, StoreError> {
        if tuple.valid_from < self.clock {
            return Err(StoreError::ClockRegression {
                requested: tuple.valid_from,
                clock: self.clock,
            });
        }
        if let Some(until) = tuple.valid_until {
            if until <= tuple.valid_from {
                return Err(StoreError::InvalidInterval {
                    from: tuple.valid_from,
                    until,
                });
            }
        }
        if let Subject::Principal(p) = &tuple.subject {
            if !self.principals.contains(p) {
                return Err(StoreError::UnknownSubject(p.clone()));
            }
        }
        if let Relation::Grant { resource, .. } = &tuple.relation {
            if !self.resources.contains(resource) {
                return Err(StoreError::UnknownResource(resource.clone()));
            }
        }
        self.tuples.push(tuple);
        Ok(TupleId(self.tuples.len() as u64 - 1))
    }

    /// Closes the validity interval of a tuple at `t`. Queries at `t` and
    /// later deny; earlier queries are unaffected.
    pub fn revoke_tuple(&mut self, id: TupleId, t: LogicalTime) -> Result<(), StoreError> {
        let clock = self.clock;
        let tuple = self
            .tuples
            .get_mut(id.0 as usize)
            .ok_or(StoreError::UnknownTuple(id))?;
        if tuple.valid_until.is_some() {
            return Err(StoreError::AlreadyRevoked(id));
        }
        if t < tuple.valid_from {
            return Err(StoreError::RevokeBeforeValid {
                at: t,
                from: tuple.valid_from,
            });
        }
        if t < clock {
            return Err(StoreError::ClockRegression {
                requested: t,
                clock,
            });
        }
        tuple.valid_until = Some(t);
        Ok(())
    }

    pub fn auth_check(
        &self,
        subject: &PrincipalId,
        action: Action,
        resource: &ResourceId,
        t: LogicalTime,
    ) -> Result<bool, StoreError> {
        if !self.principals.contains(subject) {
            return Err(StoreError::UnknownSubject(subject.clone()));
        }
        if !self.resources.contains(resource) {
            return Err(StoreError::UnknownResource(resource.clone()));
        }
        Ok(evaluate(
            self.tuples.iter(),
            subject,
            action,
            resource,
            t,
            self.depth_limit,
        ))
    }

    /// Every tuple valid at `t`. Evaluating any query at `t` against the
    /// snapshot gives the same answer as the store.
    pub fn snapshot_at(&self, t: LogicalTime) -> Result<TupleSnapshot, StoreError> {
        if t > self.clock {
            return Err(StoreError::FutureTime {
                requested: t,
                clock: self.clock,
            });
        }
        Ok(TupleSnapshot {
            at: t,
            depth_limit: self.depth_limit,
            tuples: self
                .tuples()
                .filter(|(_, tup)| tup.valid_at(t))
                .map(|(id, tup)| (id, tup.clone()))
                .collect(),
        })
    }

    /// The tuples needed to answer queries by `subject` on `resources` at `t`:
    /// the subject's membership cone plus grants on those resources.
    pub fn slice_at(
        &self,
        t: LogicalTime,
        subject: &PrincipalId,
        resources: &BTreeSet<ResourceId>,
    ) -> TupleSnapshot {
        slice(
            self.tuples
                .iter()
                .enumerate()
                .map(|(i, tup)| (TupleId(i as u64), tup)),
            t,
            self.depth_limit,
            subject,
            resources,
        )
    }
}

impl AuthView for TupleStore {
    fn allows(
        &self,
        subject: &PrincipalId,
        action: Action,
        resource: &ResourceId,
        t: LogicalTime,
    ) -> bool {
        self.auth_check(subject, action, resource, t)
            .unwrap_or(false)
    }
}

/// Tuples valid at one instant, detached from the store that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleSnapshot {
    pub at: LogicalTime,
    pub depth_limit: u32,
    pub tuples: Vec<(TupleId, AuthorizationTuple)>,
}

impl TupleSnapshot {
    pub fn check(&self, subject: &PrincipalId, action: Action, resource: &ResourceId) -> bool {
        evaluate(
            self.tuples.iter().map(|(_, t)| t),
            subject,
            action,
            resource,
            self.at,
            self.depth_limit,
        )
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Narrows this snapshot to one subject and resource set.
    pub fn slice(&self, subject: &PrincipalId, resources: &BTreeSet<ResourceId>) -> TupleSnapshot {
        slice(
            self.tuples.iter().map(|(id, t)| (*id, t)),
            self.at,
            self.depth_limit,
            subject,
            resources,
        )
    }
}

impl AuthView for TupleSnapshot {
    fn allows(
        &self,
        subject: &PrincipalId,
        action: Action,
        resource: &ResourceId,
        t: LogicalTime,
    ) -> bool {
        t == self.at && self.check(subject, action, resource)
    }
}

/// Groups reachable from `subject` through membership edges valid at `t`,
/// keyed by their BFS depth (1 = direct membership).
fn membership_cone<'a>(
    tuples: impl Iterator<Item = &'a AuthorizationTuple>,
    subject: &PrincipalId,
    t: LogicalTime,
    depth_limit: u32,
) -> BTreeMap<GroupId, u32> {
    let mut edges: BTreeMap<&Subject, Vec<&GroupId>> = BTreeMap::new();
    for tup in tuples {
        if let Relation::MemberOf { group } = &tup.relation {
            if tup.valid_at(t) {
                edges.entry(&tup.subject).or_default().push(group);
            }
        }
    }
    let mut depth: BTreeMap<GroupId, u32> = BTreeMap::new();
    let start = Subject::Principal(subject.clone());
    let mut queue: VecDeque<(Subject, u32)> = VecDeque::from([(start, 0)]);
    while let Some((node, d)) = queue.pop_front() {
        if d >= depth_limit {
            continue;
        }
        for &g in edges.get(&node).map(Vec::as_slice).unwrap_or(&[]) {
            if !depth.contains_key(g) {
                depth.insert(g.clone(), d + 1);
                queue.push_back((Subject::Group(g.clone()), d + 1));
            }
        }
    }
    depth
}

fn evaluate<'a>(
    tuples: impl Iterator<Item = &'a AuthorizationTuple> + Clone,
    subject: &PrincipalId,
    action: Action,
    resource: &ResourceId,
    t: LogicalTime,
    depth_limit: u32,
) -> bool {
    let grants_here = |s: &Subject| {
        tuples.clone().any(|tup| {
            tup.valid_at(t)
                && &tup.subject == s
                && matches!(&tup.relation, Relation::Grant { action: a, resource: r } if *a == action && r == resource)
        })
    };
    if grants_here(&Subject::Principal(subject.clone())) {
        return true;
    }
    let cone = membership_cone(tuples.clone(), subject, t, depth_limit);
    cone.keys().any(|g| grants_here(&Subject::Group(g.clone())))
}

fn slice<'a>(
    tuples: impl Iterator<Item = (TupleId, &'a AuthorizationTuple)> + Clone,
    t: LogicalTime,
    depth_limit: u32,
    subject: &PrincipalId,
    resources: &BTreeSet<ResourceId>,
) -> TupleSnapshot {
    let cone = membership_cone(tuples.clone().map(|(_, t)| t), subject, t, depth_limit);
    let in_cone = |s: &Subject| match s {
        Subject::Principal(p) => p == subject,
        Subject::Group(g) => cone.contains_key(g),
    };
    // Membership edges are only needed from nodes that BFS still expands.
    let expands = |s: &Subject| match s {
        Subject::Principal(p) => p == subject && depth_limit > 0,
        Subject::Group(g) => cone.get(g).is_some_and(|d| *d < depth_limit),
    };
    let kept = tuples
        .filter(|(_, tup)| tup.valid_at(t))
        .filter(|(_, tup)| match &tup.relation {
            Relation::MemberOf { .. } => expands(&tup.subject),
            Relation::Grant { resource, .. } => {
                resources.contains(resource) && in_cone(&tup.subject)
            }
        })
        .map(|(id, tup)| (id, tup.clone()))
        .collect();
    TupleSnapshot {
        at: t,
        depth_limit,
        tuples: kept,
    }
}

//! Domain vocabulary: principals, resources, actions and the scope lattice.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

pub(crate) use string_id;

string_id!(
    /// Human or agent subject identifier.
    PrincipalId
);
string_id!(
    /// Data resource identifier.
    ResourceId
);
string_id!(
    /// Group identifier; lives in its own namespace, separate from resources.
    GroupId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrincipalKind {
    Human,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Read,
    Write,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Read => f.write_str("read"),
            Action::Write => f.write_str("write"),
        }
    }
}

/// A single permission: one action on one resource.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Grant {
    pub resource: ResourceId,
    pub action: Action,
}

impl Grant {
    pub fn new(resource: impl Into<ResourceId>, action: Action) -> Self {
        Self {
            resource: resource.into(),
            action,
        }
    }

    pub fn read(resource: impl Into<ResourceId>) -> Self {
        Self::new(resource, Action::Read)
    }
}

impl fmt::Display for Grant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.action, self.resource)
    }
}

/// An explicit, finite set of grants.
///
/// Scopes form a lattice under set inclusion. Attenuation checks are plain
/// subset tests and the effective-authority meet is plain intersection.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scope(BTreeSet<Grant>);

impl Scope {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_grants(grants: impl IntoIterator<Item = Grant>) -> Self {
        Self(grants.into_iter().collect())
    }

    /// Convenience for scopes that only carry reads.
    pub fn reads<I, R>(resources: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<ResourceId>,
    {
        Self(resources.into_iter().map(Grant::read).collect())
    }

    pub fn contains(&self, grant: &Grant) -> bool {
        self.0.contains(grant)
    }

    pub fn allows(&self, resource: &ResourceId, action: Action) -> bool {
        self.0.contains(&Grant {
            resource: resource.clone(),
            action,
        })
    }

    pub fn insert(&mut self, grant: Grant) -> bool {
        self.0.insert(grant)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Grant> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &Scope) -> bool {
        scope_subset(self, other)
    }

    pub fn intersect(&self, other: &Scope) -> Scope {
        scope_intersect(self, other)
    }

    pub fn resources(&self) -> BTreeSet<ResourceId> {
        self.0.iter().map(|g| g.resource.clone()).collect()
    }

    /// Grants in `self` that are not in `other`.
    pub fn difference(&self, other: &Scope) -> Scope {
        Scope(self.0.difference(&other.0).cloned().collect())
    }
}

impl FromIterator<Grant> for Scope {
    fn from_iter<T: IntoIterator<Item = Grant>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a Scope {
    type Item = &'a Grant;
    type IntoIter = std::collections::btree_set::Iter<'a, Grant>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, g) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{g}")?;
        }
        f.write_str("}")
    }
}

/// True iff every grant in `a` is also in `b`.
pub fn scope_subset(a: &Scope, b: &Scope) -> bool {
    a.0.is_subset(&b.0)
}

/// Grants present in both scopes.
pub fn scope_intersect(a: &Scope, b: &Scope) -> Scope {
    Scope(a.0.intersection(&b.0).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: PrincipalId,
    pub kind: PrincipalKind,
    #[serde(default)]
    pub base_scope: Scope,
    /// Whether the agent runs from an attested build. Ignored for humans.
    #[serde(default)]
    pub attested: bool,
}

impl Principal {
    pub fn human(id: impl Into<PrincipalId>) -> Self {
        Self {
            id: id.into(),
            kind: PrincipalKind::Human,
            base_scope: Scope::empty(),
            attested: false,
        }
    }

    pub fn agent(id: impl Into<PrincipalId>, base_scope: Scope) -> Self {
        Self {
            id: id.into(),
            kind: PrincipalKind::Agent,
            base_scope,
            attested: true,
        }
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.base_scope = scope;
        self
    }

    pub fn with_attested(mut self, attested: bool) -> Self {
        self.attested = attested;
        self
    }

    pub fn is_agent(&self) -> bool {
        self.kind == PrincipalKind::Agent
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

impl Resource {
    pub fn new(id: impl Into<ResourceId>) -> Self {
        Self {
            id: id.into(),
            labels: BTreeSet::new(),
        }
    }

    pub fn labeled<I, S>(id: impl Into<ResourceId>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            id: id.into(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }
}

/// Every principal and resource of a universe.
///
/// Entries are kept in insertion order so that duplicate ids survive
/// deserialization and can be reported by [`catalog_validate`]; lookups
/// resolve to the first entry with a given id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "CatalogRepr", into = "CatalogRepr")]
pub struct Catalog {
    principals: Vec<Principal>,
    resources: Vec<Resource>,
    require_attestation: bool,
    principal_index: BTreeMap<PrincipalId, usize>,
    resource_index: BTreeMap<ResourceId, usize>,
}

#[derive(Serialize, Deserialize)]
struct CatalogRepr {
    #[serde(default)]
    principals: Vec<Principal>,
    #[serde(default)]
    resources: Vec<Resource>,
    #[serde(default)]
    require_attestation: bool,
}

impl From<CatalogRepr> for Catalog {
    fn from(r: CatalogRepr) -> Self {
        Catalog::new(r.principals, r.resources).requiring_attestation(r.require_attestation)
    }
}

impl From<Catalog> for CatalogRepr {
    fn from(c: Catalog) -> Self {
        CatalogRepr {
            principals: c.principals,
            resources: c.resources,
            require_attestation: c.require_attestation,
        }
    }
}

impl Catalog {
    pub fn new(principals: Vec<Principal>, resources: Vec<Resource>) -> Self {
        let mut principal_index = BTreeMap::new();
        for (i, p) in principals.iter().enumerate() {
            principal_index.entry(p.id.clone()).or_insert(i);
        }
        let mut resource_index = BTreeMap::new();
        for (i, r) in resources.iter().enumerate() {
            resource_index.entry(r.id.clone()).or_insert(i);
        }
        Self {
            principals,
            resources,
            require_attestation: false,
            principal_index,
            resource_index,
        }
    }

    /// Delegation to unattested agents is refused when set.
    pub fn requiring_attestation(mut self, required: bool) -> Self {
        self.require_attestation = required;
        self
    }

    pub fn require_attestation(&self) -> bool {
        self.require_attestation
    }

    pub fn principal(&self, id: &PrincipalId) -> Option<&Principal> {
        self.principal_index.get(id).map(|&i| &self.principals[i])
    }

    pub fn resource(&self, id: &ResourceId) -> Option<&Resource> {
        self.resource_index.get(id).map(|&i| &self.resources[i])
    }

    pub fn principals(&self) -> &[Principal] {
        &self.principals
    }

    pub fn resources(&self) -> &[Resource] {
        &self.resources
    }

    pub fn contains_principal(&self, id: &PrincipalId) -> bool {
        self.principal_index.contains_key(id)
    }

    pub fn contains_resource(&self, id: &ResourceId) -> bool {
        self.resource_index.contains_key(id)
    }

    pub fn labels(&self, id: &ResourceId) -> Option<&BTreeSet<String>> {
        self.resource(id).map(|r| &r.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CatalogViolation {
    DanglingResource {
        principal: PrincipalId,
        resource: ResourceId,
    },
    DuplicatePrincipal {
        id: PrincipalId,
    },
    DuplicateResource {
        id: ResourceId,
    },
    EmptyId,
}

impl fmt::Display for CatalogViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CatalogViolation::DanglingResource {
                principal,
                resource,
            } => write!(
                f,
                "principal {principal} is granted uncataloged resource {resource}"
            ),
            CatalogViolation::DuplicatePrincipal { id } => write!(f, "duplicate principal id {id}"),
            CatalogViolation::DuplicateResource { id } => write!(f, "duplicate resource id {id}"),
            CatalogViolation::EmptyId => f.write_str("empty identifier"),
        }
    }
}

/// Structural problems in a catalog. An empty list means the catalog is sound.
pub fn catalog_validate(catalog: &Catalog) -> Vec<CatalogViolation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for p in &catalog.principals {
        if p.id.0.is_empty() {
            out.push(CatalogViolation::EmptyId);
        }
        if !seen.insert(&p.id) {
            out.push(CatalogViolation::DuplicatePrincipal { id: p.id.clone() });
        }
    }
    let mut seen = BTreeSet::new();
    for r in &catalog.resources {
        if r.id.0.is_empty() {
            out.push(CatalogViolation::EmptyId);
        }
        if !seen.insert(&r.id) {
            out.push(CatalogViolation::DuplicateResource { id: r.id.clone() });
        }
    }
    for p in &catalog.principals {
        for g in &p.base_scope {
            if !catalog.contains_resource(&g.resource) {
                out.push(CatalogViolation::DanglingResource {
                    principal: p.id.clone(),
                    resource: g.resource.clone(),
                });
            }
        }
    }
    out
}

//! Route records, primary/backup selection, and the per-node route cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::engine::SimTime;
use crate::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("route is empty")]
    Empty,
    #[error("node {0} appears twice in route")]
    Duplicate(NodeId),
}

/// Ordered, duplicate-free list of nodes from a source to a target.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RouteRecord(Vec<NodeId>);

impl RouteRecord {
    pub fn new(nodes: Vec<NodeId>) -> Result<Self, RouteError> {
        if nodes.is_empty() {
            return Err(RouteError::Empty);
        }
        let mut seen = BTreeSet::new();
        for &n in &nodes {
            if !seen.insert(n) {
                return Err(RouteError::Duplicate(n));
            }
        }
        Ok(RouteRecord(nodes))
    }

    pub fn from_source(src: NodeId) -> Self {
        RouteRecord(vec![src])
    }

    /// Appends `n`, failing if it is already on the route.
    pub fn push(&self, n: NodeId) -> Result<Self, RouteError> {
        if self.contains(n) {
            return Err(RouteError::Duplicate(n));
        }
        let mut v = self.0.clone();
        v.push(n);
        Ok(RouteRecord(v))
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn hops(&self) -> usize {
        self.0.len() - 1
    }

    pub fn source(&self) -> NodeId {
        self.0[0]
    }

    pub fn target(&self) -> NodeId {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.0.contains(&n)
    }

    pub fn position(&self, n: NodeId) -> Option<usize> {
        self.0.iter().position(|&m| m == n)
    }

    pub fn intermediates(&self) -> &[NodeId] {
        if self.0.len() < 3 {
            &[]
        } else {
            &self.0[1..self.0.len() - 1]
        }
    }

    /// Whether consecutive nodes `a`, `b` (either order) appear on the route.
    pub fn uses_link(&self, a: NodeId, b: NodeId) -> bool {
        self.0.windows(2).any(|w| (w[0] == a && w[1] == b) || (w[0] == b && w[1] == a))
    }

    pub fn reversed(&self) -> Self {
        RouteRecord(self.0.iter().rev().copied().collect())
    }

    /// The part of the route from `n` to the target, if `n` is on it and not last.
    pub fn suffix_from(&self, n: NodeId) -> Option<Self> {
        let i = self.position(n)?;
        (i + 1 < self.0.len()).then(|| RouteRecord(self.0[i..].to_vec()))
    }

    /// The part of the route from the source to `n`, if `n` is on it and not first.
    pub fn prefix_to(&self, n: NodeId) -> Option<Self> {
        let i = self.position(n)?;
        (i > 0).then(|| RouteRecord(self.0[..=i].to_vec()))
    }

    pub fn shared_intermediates(&self, other: &RouteRecord) -> usize {
        let mine: BTreeSet<NodeId> = self.intermediates().iter().copied().collect();
        other.intermediates().iter().filter(|n| mine.contains(n)).count()
    }
}

impl fmt::Display for RouteRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

/// Picks the primary (fewest hops, then lexicographic) and, if another
/// candidate exists, the backup sharing the fewest intermediates with it
/// (then fewest hops, then lexicographic).
pub fn select_routes(candidates: &[RouteRecord]) -> Option<(RouteRecord, Option<RouteRecord>)> {
    let primary = candidates.iter().min_by(|a, b| (a.hops(), a).cmp(&(b.hops(), b)))?.clone();
    let backup = candidates
        .iter()
        .filter(|c| **c != primary)
        .min_by(|a, b| {
            (a.shared_intermediates(&primary), a.hops(), *a).cmp(&(b.shared_intermediates(&primary), b.hops(), *b))
        })
        .cloned();
    Some((primary, backup))
}

/// Routes gathered at the destination for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectionWindow {
    pub src: NodeId,
    pub req_id: u64,
    pub opened: SimTime,
    pub deadline: SimTime,
    pub candidates: Vec<RouteRecord>,
    pub closed: bool,
}

/// Known routes from the owning node, keyed by target.
#[derive(Clone, Debug)]
pub struct RouteCache {
    owner: NodeId,
    per_target: usize,
    routes: BTreeMap<NodeId, BTreeSet<RouteRecord>>,
}

impl RouteCache {
    pub fn new(owner: NodeId, per_target: usize) -> Self {
        RouteCache { owner, per_target: per_target.max(1), routes: BTreeMap::new() }
    }

    /// Stores a route that starts at the owner. Keeps the shortest routes when
    /// a target has more than the per-target limit.
    pub fn insert(&mut self, route: &RouteRecord) {
        if route.len() < 2 || route.source() != self.owner {
            return;
        }
        let set = self.routes.entry(route.target()).or_default();
        set.insert(route.clone());
        while set.len() > self.per_target {
            let worst = set.iter().max_by(|a, b| (a.hops(), *a).cmp(&(b.hops(), *b))).cloned().expect("non-empty");
            set.remove(&worst);
        }
    }

    pub fn remove(&mut self, route: &RouteRecord) {
        if let Some(set) = self.routes.get_mut(&route.target()) {
            set.remove(route);
        }
    }

    /// Drops every route through link `a`-`b`; returns how many were removed.
    pub fn purge_link(&mut self, a: NodeId, b: NodeId) -> usize {
        let mut removed = 0;
        for set in self.routes.values_mut() {
            let before = set.len();
            set.retain(|r| !r.uses_link(a, b));
            removed += before - set.len();
        }
        self.routes.retain(|_, s| !s.is_empty());
        removed
    }

    pub fn best(&self, target: NodeId) -> Option<&RouteRecord> {
        self.best_where(target, |_| true)
    }

    pub fn best_where(&self, target: NodeId, ok: impl Fn(&RouteRecord) -> bool) -> Option<&RouteRecord> {
        self.routes.get(&target)?.iter().filter(|r| ok(r)).min_by(|a, b| (a.hops(), *a).cmp(&(b.hops(), *b)))
    }

    pub fn routes(&self, target: NodeId) -> impl Iterator<Item = &RouteRecord> {
        self.routes.get(&target).into_iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.routes.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

//! Temporally-ordered routing: per-destination heights, link reversal,
//! reflection-based partition detection, and height-based data forwarding.
//!
//! [`ToraNode`] is a pure state machine: every handler takes the current time
//! and pushes the messages it wants broadcast, plus trace-worthy events, into
//! an [`Outbox`]. [`ToraRouter`] wires the nodes to the simulator.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::engine::SimTime;
use crate::medium::{Body, DataPacket, FrameKind};
use crate::metrics::DropSite;
use crate::sim::Ctx;
use crate::NodeId;

/// `(tau, oid, r)`: when and by whom a reference level was created, and
/// whether it has been reflected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RefLevel {
    pub tau: SimTime,
    pub oid: NodeId,
    pub reflected: bool,
}

impl RefLevel {
    pub const ZERO: RefLevel = RefLevel { tau: SimTime::ZERO, oid: 0, reflected: false };

    fn same_origin(&self, other: &RefLevel) -> bool {
        self.tau == other.tau && self.oid == other.oid
    }
}

/// Lexicographically ordered five-tuple; lower means closer to the destination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Height {
    pub level: RefLevel,
    pub delta: i64,
    pub id: NodeId,
}

impl Height {
    pub fn new(tau: SimTime, oid: NodeId, reflected: bool, delta: i64, id: NodeId) -> Self {
        Height { level: RefLevel { tau, oid, reflected }, delta, id }
    }

    /// The destination's own height.
    pub fn zero(dest: NodeId) -> Self {
        Height { level: RefLevel::ZERO, delta: 0, id: dest }
    }
}

impl fmt::Display for Height {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{},{})", self.level.tau, self.level.oid, self.level.reflected as u8, self.delta, self.id)
    }
}

/// Formats an optional height, `NULL` for none.
pub fn show(h: Option<Height>) -> String {
    h.map_or_else(|| "NULL".to_string(), |h| h.to_string())
}

/// Total order with NULL above every defined height.
pub fn compare(a: Option<Height>, b: Option<Height>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Greater,
        (Some(_), None) => Ordering::Less,
        (Some(x), Some(y)) => x.cmp(&y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Neighbour is lower: traffic may flow to it.
    Downstream,
    Upstream,
    Undirected,
}

impl Direction {
    pub fn of(mine: Option<Height>, theirs: Option<Height>) -> Direction {
        match (mine, theirs) {
            (Some(m), Some(t)) if t < m => Direction::Downstream,
            (Some(m), Some(t)) if t > m => Direction::Upstream,
            _ => Direction::Undirected,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Downstream => "down",
            Direction::Upstream => "up",
            Direction::Undirected => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ToraMsg {
    Qry { dest: NodeId, origin: NodeId, epoch: u64 },
    Upd { dest: NodeId, height: Option<Height> },
    Clr { dest: NodeId, level: RefLevel },
}

impl ToraMsg {
    pub fn kind(&self) -> FrameKind {
        match self {
            ToraMsg::Qry { .. } => FrameKind::Qry,
            ToraMsg::Upd { .. } => FrameKind::Upd,
            ToraMsg::Clr { .. } => FrameKind::Clr,
        }
    }

    pub fn dest(&self) -> NodeId {
        match *self {
            ToraMsg::Qry { dest, .. } | ToraMsg::Upd { dest, .. } | ToraMsg::Clr { dest, .. } => dest,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ToraEvent {
    Height { dest: NodeId, old: Option<Height>, new: Option<Height>, cause: &'static str },
    Direction { dest: NodeId, neighbor: NodeId, dir: Direction },
    Partition { dest: NodeId, level: RefLevel },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outbox {
    pub sends: Vec<ToraMsg>,
    pub events: Vec<ToraEvent>,
}

/// State for one destination at one node.
#[derive(Clone, Debug)]
pub struct ToraInstance {
    height: Option<Height>,
    /// Known non-NULL neighbour heights; a missing entry means NULL.
    heights: BTreeMap<NodeId, Height>,
    route_required: bool,
    seen_qry: BTreeSet<(NodeId, u64)>,
    seen_clr: BTreeSet<(SimTime, NodeId)>,
}

impl ToraInstance {
    fn new(dest: NodeId, own: NodeId) -> Self {
        ToraInstance {
            height: (dest == own).then(|| Height::zero(dest)),
            heights: BTreeMap::new(),
            route_required: false,
            seen_qry: BTreeSet::new(),
            seen_clr: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToraNode {
    id: NodeId,
    links: BTreeSet<NodeId>,
    instances: BTreeMap<NodeId, ToraInstance>,
    epoch: u64,
}

type Snapshot = Vec<(NodeId, Direction)>;

impl ToraNode {
    pub fn new(id: NodeId) -> Self {
        ToraNode { id, links: BTreeSet::new(), instances: BTreeMap::new(), epoch: 0 }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn links(&self) -> &BTreeSet<NodeId> {
        &self.links
    }

    /// Installs a link without any protocol reaction (initial topology).
    pub fn add_link_silently(&mut self, n: NodeId) {
        self.links.insert(n);
    }

    pub fn dests(&self) -> Vec<NodeId> {
        self.instances.keys().copied().collect()
    }

    pub fn height(&self, dest: NodeId) -> Option<Height> {
        if dest == self.id {
            return Some(Height::zero(dest));
        }
        self.instances.get(&dest).and_then(|i| i.height)
    }

    pub fn neighbor_height(&self, dest: NodeId, n: NodeId) -> Option<Height> {
        self.instances.get(&dest).and_then(|i| i.heights.get(&n).copied())
    }

    pub fn route_required(&self, dest: NodeId) -> bool {
        self.instances.get(&dest).is_some_and(|i| i.route_required)
    }

    pub fn direction(&self, dest: NodeId, n: NodeId) -> Direction {
        Direction::of(self.height(dest), self.neighbor_height(dest, n))
    }

    pub fn downstream(&self, dest: NodeId) -> Vec<NodeId> {
        self.links.iter().copied().filter(|&n| self.direction(dest, n) == Direction::Downstream).collect()
    }

    fn has_downstream(&self, dest: NodeId) -> bool {
        self.links.iter().any(|&n| self.direction(dest, n) == Direction::Downstream)
    }

    /// Lowest downstream neighbour.
    pub fn next_hop(&self, dest: NodeId) -> Option<NodeId> {
        if dest == self.id {
            return None;
        }
        let me = self.height(dest)?;
        let inst = self.instances.get(&dest)?;
        self.links
            .iter()
            .filter_map(|n| inst.heights.get(n).map(|h| (*h, *n)))
            .filter(|(h, _)| *h < me)
            .min()
            .map(|(_, n)| n)
    }

    /// Neighbours at this node's own reflected level.
    pub fn reflections(&self, dest: NodeId) -> BTreeSet<NodeId> {
        match (self.height(dest), self.instances.get(&dest)) {
            (Some(me), Some(inst)) if me.level.reflected => {
                inst.heights.iter().filter(|(_, h)| h.level == me.level).map(|(n, _)| *n).collect()
            }
            _ => BTreeSet::new(),
        }
    }

    /// Overwrites state for `dest`, for constructing specific configurations.
    pub fn preset(&mut self, dest: NodeId, own: Option<Height>, neighbors: &[(NodeId, Option<Height>)]) {
        let id = self.id;
        let inst = self.instances.entry(dest).or_insert_with(|| ToraInstance::new(dest, id));
        if dest != id {
            inst.height = own;
        }
        for &(n, h) in neighbors {
            match h {
                Some(h) => inst.heights.insert(n, h),
                None => inst.heights.remove(&n),
            };
        }
    }

    fn inst(&mut self, dest: NodeId) -> &mut ToraInstance {
        let id = self.id;
        self.instances.entry(dest).or_insert_with(|| ToraInstance::new(dest, id))
    }

    fn snapshot(&self, dest: NodeId) -> Snapshot {
        self.links.iter().map(|&n| (n, self.direction(dest, n))).collect()
    }

    fn diff(&self, dest: NodeId, before: Snapshot, out: &mut Outbox) {
        let before: BTreeMap<NodeId, Direction> = before.into_iter().collect();
        for (n, dir) in self.snapshot(dest) {
            let old = before.get(&n).copied().unwrap_or(Direction::Undirected);
            if old != dir {
                out.events.push(ToraEvent::Direction { dest, neighbor: n, dir });
            }
        }
        for (&n, &old) in &before {
            if !self.links.contains(&n) && old != Direction::Undirected {
                out.events.push(ToraEvent::Direction { dest, neighbor: n, dir: Direction::Undirected });
            }
        }
    }

    fn set_height(&mut self, dest: NodeId, new: Option<Height>, cause: &'static str, out: &mut Outbox) -> bool {
        let inst = self.inst(dest);
        let old = inst.height;
        if old == new {
            return false;
        }
        inst.height = new;
        out.events.push(ToraEvent::Height { dest, old, new, cause });
        true
    }

    fn set_and_announce(&mut self, dest: NodeId, new: Option<Height>, cause: &'static str, out: &mut Outbox) {
        if self.set_height(dest, new, cause, out) {
            out.sends.push(ToraMsg::Upd { dest, height: new });
        }
    }

    /// Starts route creation if the node has no height and no query pending.
    pub fn originate_query(&mut self, dest: NodeId, _now: SimTime, out: &mut Outbox) -> bool {
        if dest == self.id || self.height(dest).is_some() || self.route_required(dest) {
            return false;
        }
        self.epoch += 1;
        let (id, epoch) = (self.id, self.epoch);
        let inst = self.inst(dest);
        inst.route_required = true;
        inst.seen_qry.insert((id, epoch));
        out.sends.push(ToraMsg::Qry { dest, origin: id, epoch });
        true
    }

    pub fn handle(&mut self, from: NodeId, msg: &ToraMsg, now: SimTime, out: &mut Outbox) {
        match *msg {
            ToraMsg::Qry { dest, origin, epoch } => self.handle_qry(from, dest, origin, epoch, now, out),
            ToraMsg::Upd { dest, height } => self.handle_upd(from, dest, height, now, out),
            ToraMsg::Clr { dest, level } => self.handle_clr(from, dest, level, now, out),
        }
    }

    pub fn handle_qry(
        &mut self,
        from: NodeId,
        dest: NodeId,
        origin: NodeId,
        epoch: u64,
        _now: SimTime,
        out: &mut Outbox,
    ) {
        if !self.links.contains(&from) || !self.inst(dest).seen_qry.insert((origin, epoch)) {
            return;
        }
        let before = self.snapshot(dest);
        if let Some(h) = self.height(dest) {
            out.sends.push(ToraMsg::Upd { dest, height: Some(h) });
        } else if let Some(min) = self.min_neighbor(dest) {
            let id = self.id;
            self.inst(dest).route_required = false;
            self.set_and_announce(dest, Some(Height { delta: min.delta + 1, id, ..min }), "adopt", out);
        } else if !self.inst(dest).route_required {
            self.inst(dest).route_required = true;
            out.sends.push(ToraMsg::Qry { dest, origin, epoch });
        }
        self.diff(dest, before, out);
    }

    pub fn handle_upd(&mut self, from: NodeId, dest: NodeId, height: Option<Height>, now: SimTime, out: &mut Outbox) {
        if !self.links.contains(&from) {
            return;
        }
        let before = self.snapshot(dest);
        let was_down = self.direction(dest, from) == Direction::Downstream;
        let inst = self.inst(dest);
        match height {
            Some(h) => inst.heights.insert(from, h),
            None => inst.heights.remove(&from),
        };
        if dest != self.id {
            match self.height(dest) {
                None => {
                    if self.inst(dest).route_required {
                        if let Some(min) = self.min_neighbor(dest) {
                            let id = self.id;
                            self.inst(dest).route_required = false;
                            self.set_and_announce(dest, Some(Height { delta: min.delta + 1, id, ..min }), "adopt", out);
                        }
                    }
                }
                Some(_) if !self.has_downstream(dest) => {
                    if height.is_none() && was_down {
                        self.lost_last_downstream(dest, now, out);
                    } else {
                        self.react(dest, now, out);
                    }
                }
                Some(_) => {}
            }
        }
        self.diff(dest, before, out);
    }

    pub fn handle_clr(&mut self, from: NodeId, dest: NodeId, level: RefLevel, now: SimTime, out: &mut Outbox) {
        if !self.links.contains(&from) {
            return;
        }
        let before = self.snapshot(dest);
        let was_down = self.direction(dest, from) == Direction::Downstream;
        let inst = self.inst(dest);
        inst.heights.remove(&from);
        inst.heights.retain(|_, h| !h.level.same_origin(&level));
        let mine = self.height(dest);
        if dest == self.id {
            // The destination never clears.
        } else if mine.is_some_and(|h| h.level.same_origin(&level)) {
            if self.inst(dest).seen_clr.insert((level.tau, level.oid)) {
                self.set_height(dest, None, "clear", out);
                out.sends.push(ToraMsg::Clr { dest, level });
            }
        } else if mine.is_some() && !self.has_downstream(dest) {
            if was_down {
                self.lost_last_downstream(dest, now, out);
            } else {
                self.react(dest, now, out);
            }
        }
        self.diff(dest, before, out);
    }

    pub fn on_link_down(&mut self, n: NodeId, now: SimTime, out: &mut Outbox) {
        if !self.links.contains(&n) {
            return;
        }
        let dests = self.dests();
        let befores: Vec<(NodeId, Snapshot, bool)> =
            dests.iter().map(|&d| (d, self.snapshot(d), self.direction(d, n) == Direction::Downstream)).collect();
        self.links.remove(&n);
        for inst in self.instances.values_mut() {
            inst.heights.remove(&n);
        }
        for (dest, before, was_down) in befores {
            if dest != self.id && self.height(dest).is_some() && !self.has_downstream(dest) {
                if self.links.is_empty() {
                    self.set_height(dest, None, "isolated", out);
                } else if was_down {
                    self.lost_last_downstream(dest, now, out);
                } else {
                    self.react(dest, now, out);
                }
            }
            self.diff(dest, before, out);
        }
    }

    pub fn on_link_up(&mut self, n: NodeId, _now: SimTime, out: &mut Outbox) {
        if !self.links.insert(n) {
            return;
        }
        for dest in self.dests() {
            if let Some(h) = self.height(dest) {
                out.sends.push(ToraMsg::Upd { dest, height: Some(h) });
            } else if self.route_required(dest) {
                self.epoch += 1;
                let (id, epoch) = (self.id, self.epoch);
                self.inst(dest).seen_qry.insert((id, epoch));
                out.sends.push(ToraMsg::Qry { dest, origin: id, epoch });
            }
        }
    }

    fn min_neighbor(&self, dest: NodeId) -> Option<Height> {
        let inst = self.instances.get(&dest)?;
        self.links.iter().filter_map(|n| inst.heights.get(n).copied()).min()
    }

    fn known(&self, dest: NodeId) -> Vec<Height> {
        match self.instances.get(&dest) {
            Some(inst) => self.links.iter().filter_map(|n| inst.heights.get(n).copied()).collect(),
            None => Vec::new(),
        }
    }

    /// The last downstream link went away (failure or neighbour erased).
    fn lost_last_downstream(&mut self, dest: NodeId, now: SimTime, out: &mut Outbox) {
        if self.known(dest).is_empty() {
            self.set_and_announce(dest, None, "no-neighbors", out);
        } else {
            self.generate(dest, now, None, out);
        }
    }

    fn generate(&mut self, dest: NodeId, now: SimTime, above: Option<RefLevel>, out: &mut Outbox) {
        let mut level = RefLevel { tau: now, oid: self.id, reflected: false };
        if let Some(a) = above {
            if level <= a {
                level.tau = a.tau + SimTime::from_micros(1);
            }
        }
        let id = self.id;
        self.set_and_announce(dest, Some(Height { level, delta: 0, id }), "generate", out);
    }

    /// Restores a downstream link after neighbours' heights changed.
    fn react(&mut self, dest: NodeId, now: SimTime, out: &mut Outbox) {
        if dest == self.id || self.height(dest).is_none() || self.has_downstream(dest) {
            return;
        }
        let known = self.known(dest);
        let Some(top) = known.iter().map(|h| h.level).max() else {
            self.set_and_announce(dest, None, "no-neighbors", out);
            return;
        };
        let id = self.id;
        if known.iter().any(|h| h.level != top) {
            let delta = known.iter().filter(|h| h.level == top).map(|h| h.delta).min().expect("top present") - 1;
            self.set_and_announce(dest, Some(Height { level: top, delta, id }), "propagate", out);
        } else if !top.reflected {
            let level = RefLevel { reflected: true, ..top };
            self.set_and_announce(dest, Some(Height { level, delta: 0, id }), "reflect", out);
        } else if top.oid == id {
            let inst = self.inst(dest);
            inst.seen_clr.insert((top.tau, top.oid));
            inst.heights.retain(|_, h| !h.level.same_origin(&top));
            self.set_height(dest, None, "partition", out);
            out.events.push(ToraEvent::Partition { dest, level: top });
            out.sends.push(ToraMsg::Clr { dest, level: top });
        } else {
            self.generate(dest, now, Some(top), out);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ToraStats {
    /// Time from query origination to the first downstream link at the source.
    pub route_latencies: Vec<SimTime>,
    /// `(time, node, dest)` for every partition detection.
    pub partitions: Vec<(SimTime, NodeId, NodeId)>,
    pub forward_steps: u64,
    /// Forwarding steps whose stamp was not strictly below the previous one.
    pub order_violations: u64,
    pub stale_drops: u64,
}

const MAX_RETRIES: u8 = 3;

/// Drives one [`ToraNode`] per network node and forwards data by height.
#[derive(Clone, Debug)]
pub struct ToraRouter {
    nodes: Vec<ToraNode>,
    buffers: Vec<BTreeMap<NodeId, VecDeque<DataPacket>>>,
    buffer_cap: usize,
    creating: BTreeMap<(NodeId, NodeId), SimTime>,
    stats: ToraStats,
}

impl ToraRouter {
    pub fn new(nodes: usize, links: &[(NodeId, NodeId)], buffer_cap: usize) -> Self {
        let mut ns: Vec<ToraNode> = (0..nodes).map(ToraNode::new).collect();
        for &(a, b) in links {
            ns[a].add_link_silently(b);
            ns[b].add_link_silently(a);
        }
        ToraRouter {
            nodes: ns,
            buffers: vec![BTreeMap::new(); nodes],
            buffer_cap: buffer_cap.max(1),
            creating: BTreeMap::new(),
            stats: ToraStats::default(),
        }
    }

    pub fn node(&self, id: NodeId) -> &ToraNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut ToraNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[ToraNode] {
        &self.nodes
    }

    pub fn stats(&self) -> &ToraStats {
        &self.stats
    }

    pub fn originate(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        let src = pkt.src;
        self.route(ctx, src, pkt, false);
    }

    pub fn on_frame(&mut self, ctx: &mut Ctx, node: NodeId, from: NodeId, body: Body) {
        match body {
            Body::Data(pkt) => self.route(ctx, node, pkt, true),
            Body::Tora(msg) => {
                let mut out = Outbox::default();
                self.nodes[node].handle(from, &msg, ctx.now(), &mut out);
                self.apply(ctx, node, out);
                self.after_change(ctx, node);
            }
            Body::Pdsr(_) => {}
        }
    }

    pub fn on_link(&mut self, ctx: &mut Ctx, a: NodeId, b: NodeId, up: bool) {
        for (n, other) in [(a, b), (b, a)] {
            let mut out = Outbox::default();
            if up {
                self.nodes[n].on_link_up(other, ctx.now(), &mut out);
            } else {
                self.nodes[n].on_link_down(other, ctx.now(), &mut out);
            }
            self.apply(ctx, n, out);
        }
        self.after_change(ctx, a);
        self.after_change(ctx, b);
    }

    pub fn on_unicast_failure(&mut self, ctx: &mut Ctx, node: NodeId, _next_hop: NodeId, body: Body) {
        if let Body::Data(mut pkt) = body {
            pkt.retries += 1;
            if pkt.trail.last() == Some(&node) {
                pkt.trail.pop();
            }
            if pkt.retries > MAX_RETRIES {
                let site = if node == pkt.src { DropSite::Source } else { DropSite::Transit };
                ctx.drop_copy(node, &pkt, site, "retries");
                return;
            }
            self.route(ctx, node, pkt, false);
        }
    }

    /// Removes and returns everything still buffered at sources.
    pub fn drain(&mut self) -> Vec<DataPacket> {
        let mut out = Vec::new();
        for buf in &mut self.buffers {
            for (_, q) in std::mem::take(buf) {
                out.extend(q);
            }
        }
        out
    }

    fn route(&mut self, ctx: &mut Ctx, node: NodeId, mut pkt: DataPacket, arrived: bool) {
        let dest = pkt.dst;
        if node == dest {
            ctx.deliver(node, &pkt);
            return;
        }
        let mine = self.nodes[node].height(dest);
        if arrived {
            let ok = match (mine, pkt.stamp) {
                (Some(m), Some(s)) => m < s,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if !ok {
                self.stats.stale_drops += 1;
                ctx.drop_copy(node, &pkt, DropSite::Transit, "stale");
                return;
            }
        }
        if let Some(nh) = self.nodes[node].next_hop(dest) {
            let mine = mine.expect("next hop implies a height");
            self.stats.forward_steps += 1;
            if arrived && pkt.stamp.is_some_and(|s| mine >= s) {
                self.stats.order_violations += 1;
            }
            pkt.stamp = Some(mine);
            pkt.trail.push(node);
            ctx.unicast(node, nh, Body::Data(pkt));
            return;
        }
        if node != pkt.src {
            ctx.drop_copy(node, &pkt, DropSite::Transit, "no-route");
            return;
        }
        if mine.is_some() {
            ctx.drop_copy(node, &pkt, DropSite::Source, "no-route");
            return;
        }
        self.query(ctx, node, dest);
        let q = self.buffers[node].entry(dest).or_default();
        if q.len() >= self.buffer_cap {
            let old = q.pop_front().expect("full buffer is non-empty");
            ctx.drop_copy(node, &old, DropSite::Source, "buffer-full");
        }
        self.buffers[node].entry(dest).or_default().push_back(pkt);
    }

    fn query(&mut self, ctx: &mut Ctx, node: NodeId, dest: NodeId) {
        let mut out = Outbox::default();
        if self.nodes[node].originate_query(dest, ctx.now(), &mut out) {
            self.creating.entry((node, dest)).or_insert(ctx.now());
            self.apply(ctx, node, out);
        }
    }

    fn after_change(&mut self, ctx: &mut Ctx, node: NodeId) {
        let pending: Vec<NodeId> = self.creating.range((node, 0)..=(node, NodeId::MAX)).map(|(&(_, d), _)| d).collect();
        for dest in pending {
            if self.nodes[node].next_hop(dest).is_some() {
                let start = self.creating.remove(&(node, dest)).expect("pending entry");
                let latency = ctx.now() - start;
                self.stats.route_latencies.push(latency);
                ctx.trace(Some(node), "route", || format!("dest={dest} latency={latency}"));
            }
        }
        let dests: Vec<NodeId> = self.buffers[node].iter().filter(|(_, q)| !q.is_empty()).map(|(&d, _)| d).collect();
        for dest in dests {
            if self.nodes[node].next_hop(dest).is_some() {
                let q = self.buffers[node].remove(&dest).unwrap_or_default();
                for pkt in q {
                    self.route(ctx, node, pkt, false);
                }
            } else if self.nodes[node].height(dest).is_none() {
                self.query(ctx, node, dest);
            } else {
                let q = self.buffers[node].remove(&dest).unwrap_or_default();
                for pkt in q {
                    ctx.drop_copy(node, &pkt, DropSite::Source, "no-route");
                }
            }
        }
    }

    fn apply(&mut self, ctx: &mut Ctx, node: NodeId, out: Outbox) {
        for ev in out.events {
            match ev {
                ToraEvent::Height { dest, old, new, cause } => {
                    ctx.trace(Some(node), "height", || {
                        format!("dest={dest} old={} new={} cause={cause}", show(old), show(new))
                    });
                }
                ToraEvent::Direction { dest, neighbor, dir } => {
                    ctx.trace(Some(node), "dir", || format!("dest={dest} nbr={neighbor} dir={}", dir.as_str()));
                }
                ToraEvent::Partition { dest, level } => {
                    self.stats.partitions.push((ctx.now(), node, dest));
                    ctx.trace(Some(node), "partition", || format!("dest={dest} tau={} oid={}", level.tau, level.oid));
                }
            }
        }
        for msg in out.sends {
            ctx.broadcast(node, Body::Tora(msg));
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    /// Delivers broadcasts FIFO over a fixed link set until quiet.
    pub(crate) struct Pump {
        pub nodes: Vec<ToraNode>,
        pub now: SimTime,
        pub sent: Vec<(NodeId, ToraMsg)>,
        queue: VecDeque<(NodeId, ToraMsg)>,
    }

    impl Pump {
        pub fn new(n: usize, links: &[(NodeId, NodeId)]) -> Self {
            let mut nodes: Vec<ToraNode> = (0..n).map(ToraNode::new).collect();
            for &(a, b) in links {
                nodes[a].add_link_silently(b);
                nodes[b].add_link_silently(a);
            }
            Pump { nodes, now: SimTime::ZERO, sent: Vec::new(), queue: VecDeque::new() }
        }

        fn push(&mut self, from: NodeId, out: Outbox) {
            for m in out.sends {
                self.sent.push((from, m.clone()));
                self.queue.push_back((from, m));
            }
        }

        pub fn query(&mut self, src: NodeId, dest: NodeId) {
            let mut out = Outbox::default();
            self.nodes[src].originate_query(dest, self.now, &mut out);
            self.push(src, out);
            self.settle();
        }

        pub fn cut(&mut self, a: NodeId, b: NodeId) {
            self.now = self.now + ms(1000);
            for (x, y) in [(a, b), (b, a)] {
                let mut out = Outbox::default();
                self.nodes[x].on_link_down(y, self.now, &mut out);
                self.push(x, out);
            }
            self.settle();
        }

        pub fn join(&mut self, a: NodeId, b: NodeId) {
            self.now = self.now + ms(1000);
            for (x, y) in [(a, b), (b, a)] {
                let mut out = Outbox::default();
                self.nodes[x].on_link_up(y, self.now, &mut out);
                self.push(x, out);
            }
            self.settle();
        }

        pub fn settle(&mut self) {
            let mut steps = 0;
            while let Some((from, msg)) = self.queue.pop_front() {
                steps += 1;
                assert!(steps < 1_000_000, "no quiescence");
                self.now = self.now + SimTime::from_micros(1);
                let receivers: Vec<NodeId> = self.nodes[from].links().iter().copied().collect();
                for r in receivers {
                    let mut out = Outbox::default();
                    self.nodes[r].handle(from, &msg, self.now, &mut out);
                    self.push(r, out);
                }
            }
        }
    }

    #[test]
    fn height_order_examples() {
        let a = Height::new(ms(5), 3, false, 2, 0);
        let b = Height::new(ms(5), 3, true, 0, 1);
        assert_eq!(compare(Some(a), Some(b)), Ordering::Less);
        assert_eq!(compare(None, Some(a)), Ordering::Greater);
        assert_eq!(compare(None, None), Ordering::Equal);
        assert!(Height::zero(4) < Height::new(SimTime::ZERO, 0, false, 1, 0));
    }

    #[test]
    fn query_only_once_while_pending() {
        let mut n = ToraNode::new(1);
        n.add_link_silently(0);
        let mut out = Outbox::default();
        assert!(n.originate_query(0, SimTime::ZERO, &mut out));
        assert!(n.route_required(0));
        assert_eq!(out.sends.len(), 1);
        assert!(!n.originate_query(0, SimTime::ZERO, &mut out));
        assert_eq!(out.sends.len(), 1);
    }

    #[test]
    fn destination_answers_query_with_zero() {
        let mut d = ToraNode::new(0);
        d.add_link_silently(1);
        let mut out = Outbox::default();
        d.handle_qry(1, 0, 1, 1, SimTime::ZERO, &mut out);
        assert_eq!(out.sends, vec![ToraMsg::Upd { dest: 0, height: Some(Height::zero(0)) }]);
    }

    #[test]
    fn null_node_with_pending_query_adopts_one_above_sender() {
        let mut n = ToraNode::new(5);
        n.add_link_silently(2);
        let mut out = Outbox::default();
        n.originate_query(0, SimTime::ZERO, &mut out);
        let sender = Height::new(SimTime::ZERO, 0, false, 3, 2);
        let mut out = Outbox::default();
        n.handle_upd(2, 0, Some(sender), ms(1), &mut out);
        assert_eq!(n.height(0), Some(Height::new(SimTime::ZERO, 0, false, 4, 5)));
        assert!(!n.route_required(0));
        assert_eq!(out.sends.len(), 1);
        assert_eq!(n.next_hop(0), Some(2));
    }

    #[test]
    fn query_flood_builds_a_dag() {
        // chain 3-2-1-0
        let mut p = Pump::new(4, &[(0, 1), (1, 2), (2, 3)]);
        p.query(3, 0);
        assert_eq!(p.nodes[3].height(0).map(|h| h.delta), Some(3));
        assert_eq!(p.nodes[3].next_hop(0), Some(2));
        assert_eq!(p.nodes[1].next_hop(0), Some(0));
    }

    const A: NodeId = 0;
    const B: NodeId = 1;
    const C: NodeId = 2;
    const D: NodeId = 3;
    const E: NodeId = 4;
    const F: NodeId = 5;
    pub(crate) const FIG_LINKS: [(NodeId, NodeId); 6] = [(A, B), (B, C), (B, E), (C, D), (D, F), (E, F)];
    pub(crate) const FIG_DELTAS: [(NodeId, i64); 6] = [(A, 0), (B, 1), (C, 2), (E, 2), (F, 3), (D, 4)];

    fn fig_pump() -> Pump {
        let mut p = Pump::new(6, &FIG_LINKS);
        let h = |n: NodeId| {
            FIG_DELTAS.iter().find(|(m, _)| *m == n).map(|&(_, d)| Height::new(SimTime::ZERO, 0, false, d, n))
        };
        for n in 0..6 {
            let nbrs: Vec<(NodeId, Option<Height>)> = p.nodes[n].links().iter().map(|&m| (m, h(m))).collect();
            p.nodes[n].preset(A, h(n), &nbrs);
        }
        p
    }

    #[test]
    fn single_failure_generates_new_level_without_ripple() {
        let mut p = fig_pump();
        p.cut(F, E);
        let hf = p.nodes[F].height(A).unwrap();
        assert_eq!(hf.level.oid, F);
        assert!(!hf.level.reflected);
        assert_eq!(hf.delta, 0);
        assert_eq!(p.nodes[D].height(A), Some(Height::new(SimTime::ZERO, 0, false, 4, D)));
        assert_eq!(p.nodes[F].next_hop(A), Some(D));
        let upd = p.sent.iter().filter(|(_, m)| matches!(m, ToraMsg::Upd { .. })).count();
        assert_eq!(upd, 1);
    }

    #[test]
    fn partition_is_detected_and_cleared() {
        let mut p = fig_pump();
        p.cut(A, B);
        let clr_origin: Vec<_> = p.sent.iter().filter(|(n, m)| *n == B && matches!(m, ToraMsg::Clr { .. })).collect();
        assert_eq!(clr_origin.len(), 1);
        for n in [B, C, D, E, F] {
            assert_eq!(p.nodes[n].height(A), None, "node {n}");
            assert!(p.nodes[n].downstream(A).is_empty());
        }
        // D reflected on the way.
        assert!(p
            .sent
            .iter()
            .any(|(n, m)| *n == D && matches!(m, ToraMsg::Upd { height: Some(h), .. } if h.level.reflected)));
    }

    #[test]
    fn healed_partition_answers_a_new_query() {
        let mut p = fig_pump();
        p.cut(A, B);
        p.join(A, B);
        assert_eq!(p.nodes[B].neighbor_height(A, A), Some(Height::zero(A)));
        p.query(F, A);
        let mut cur = F;
        for _ in 0..6 {
            if cur == A {
                break;
            }
            cur = p.nodes[cur].next_hop(A).expect("route after healing");
        }
        assert_eq!(cur, A);
    }

    fn arb_graph() -> impl Strategy<Value = (usize, Vec<(NodeId, NodeId)>)> {
        (4usize..10).prop_flat_map(|n| {
            let pairs: Vec<(NodeId, NodeId)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
            let m = pairs.len();
            (Just(n), proptest::sample::subsequence(pairs, 0..=m))
        })
    }

    fn check_quiescent(p: &Pump, dest: NodeId, links: &BTreeSet<(NodeId, NodeId)>) -> Result<(), TestCaseError> {
        let n = p.nodes.len();
        let topo = crate::medium::Topology::with_links(n, &links.iter().copied().collect::<Vec<_>>());
        for i in 0..n {
            if i == dest {
                continue;
            }
            let h = p.nodes[i].height(dest);
            if !topo.reachable(i, dest) {
                prop_assert!(h.is_none(), "partitioned node {} holds height {}", i, show(h));
            }
            if h.is_some() {
                // Follow next hops: strictly decreasing true heights, ends at dest.
                let mut cur = i;
                let mut guard = 0;
                while cur != dest {
                    let nh = p.nodes[cur].next_hop(dest);
                    prop_assert!(nh.is_some(), "node {} (from {}) has a height but no downstream", cur, i);
                    let nh = nh.unwrap();
                    prop_assert!(compare(p.nodes[nh].height(dest), p.nodes[cur].height(dest)) == Ordering::Less);
                    cur = nh;
                    guard += 1;
                    prop_assert!(guard <= n);
                }
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn sequential_failures_keep_routes_sound(
            (n, links) in arb_graph(),
            cuts in proptest::collection::vec(any::<proptest::sample::Index>(), 0..6),
            src_idx in any::<proptest::sample::Index>(),
        ) {
            let dest = 0;
            let mut p = Pump::new(n, &links);
            let src = 1 + src_idx.index(n - 1);
            p.query(src, dest);
            let mut live: BTreeSet<(NodeId, NodeId)> = links.iter().copied().collect();
            check_quiescent(&p, dest, &live)?;
            for c in cuts {
                if live.is_empty() { break; }
                let l = *live.iter().nth(c.index(live.len())).unwrap();
                live.remove(&l);
                p.cut(l.0, l.1);
                check_quiescent(&p, dest, &live)?;
            }
        }
    }
}

//! Shared wireless channel: link state, frame sizes, contention and delivery.
//!
//! Two transmitters conflict when they are the same node, are in range of each
//! other, or have a common neighbour. Requests wait in one FIFO queue; a
//! request is granted once it conflicts with neither an active transmission nor
//! any earlier request that is still waiting. Receivers are evaluated against
//! the link state at the instant a transmission completes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::SimTime;
use crate::mobility::Position;
use crate::pdsr::{PdsrMsg, SourceRoute};
use crate::tora::{Height, ToraMsg};
use crate::NodeId;

/// Inclusive range test: nodes exactly `range` apart can hear each other.
pub fn in_range(a: Position, b: Position, range: f64) -> bool {
    a.distance_sq(b) <= range * range
}

#[derive(Debug, Error, PartialEq)]
pub enum MediumError {
    #[error("signal strength undefined at zero distance")]
    ZeroDistance,
}

/// Received strength relative to the edge of range: `(range / d)^2`, so 1.0 at
/// the boundary and growing as nodes approach.
pub fn signal_strength(a: Position, b: Position, range: f64) -> Result<f64, MediumError> {
    let d2 = a.distance_sq(b);
    if d2 == 0.0 {
        return Err(MediumError::ZeroDistance);
    }
    Ok(range * range / d2)
}

/// Airtime of `bytes` at `bandwidth_bps`, rounded up to the microsecond.
pub fn tx_time(bytes: u32, bandwidth_bps: u64) -> SimTime {
    let bits_us = bytes as u64 * 8 * 1_000_000;
    SimTime::from_micros(bits_us.div_ceil(bandwidth_bps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrameKind {
    Data,
    Rreq,
    Rrep,
    Rerr,
    Warning,
    Ack,
    Qry,
    Upd,
    Clr,
}

impl FrameKind {
    pub const ALL: [FrameKind; 9] = [
        FrameKind::Data,
        FrameKind::Rreq,
        FrameKind::Rrep,
        FrameKind::Rerr,
        FrameKind::Warning,
        FrameKind::Ack,
        FrameKind::Qry,
        FrameKind::Upd,
        FrameKind::Clr,
    ];

    pub fn is_control(self) -> bool {
        self != FrameKind::Data
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Data => "DATA",
            FrameKind::Rreq => "RREQ",
            FrameKind::Rrep => "RREP",
            FrameKind::Rerr => "RERR",
            FrameKind::Warning => "WARN",
            FrameKind::Ack => "ACK",
            FrameKind::Qry => "QRY",
            FrameKind::Upd => "UPD",
            FrameKind::Clr => "CLR",
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FrameKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown frame kind '{s}'"))
    }
}

/// An application packet (or one copy of it) in flight.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPacket {
    pub uid: u64,
    pub flow: usize,
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: u32,
    pub created: SimTime,
    /// Source route, for source-routed protocols.
    pub route: Option<SourceRoute>,
    /// Height of the last forwarder, for height-based forwarding.
    pub stamp: Option<Height>,
    /// Nodes that have transmitted this copy, in order.
    pub trail: Vec<NodeId>,
    pub retries: u8,
}

impl DataPacket {
    pub fn new(uid: u64, flow: usize, src: NodeId, dst: NodeId, payload: u32, created: SimTime) -> Self {
        DataPacket { uid, flow, src, dst, payload, created, route: None, stamp: None, trail: Vec::new(), retries: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Data(DataPacket),
    Tora(ToraMsg),
    Pdsr(PdsrMsg),
}

impl Body {
    pub fn kind(&self) -> FrameKind {
        match self {
            Body::Data(_) => FrameKind::Data,
            Body::Tora(m) => m.kind(),
            Body::Pdsr(m) => m.kind(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dest {
    Broadcast,
    Unicast(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub uid: u64,
    pub sender: NodeId,
    pub dest: Dest,
    pub size: u32,
    pub body: Body,
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        self.body.kind()
    }
}

/// On-air sizes in bytes. Variable-length frames add `addr` bytes per carried address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSizes {
    pub data_header: u32,
    pub addr: u32,
    pub rreq: u32,
    pub rrep: u32,
    pub rerr: u32,
    pub warning: u32,
    pub ack: u32,
    pub qry: u32,
    pub upd: u32,
    pub clr: u32,
}

impl Default for FrameSizes {
    fn default() -> Self {
        FrameSizes {
            data_header: 12,
            addr: 4,
            rreq: 24,
            rrep: 24,
            rerr: 20,
            warning: 20,
            ack: 14,
            qry: 20,
            upd: 28,
            clr: 24,
        }
    }
}

impl FrameSizes {
    pub fn size_of(&self, body: &Body) -> u32 {
        match body {
            Body::Data(p) => {
                let hops = p.route.as_ref().map_or(0, |r| r.path.len() as u32);
                p.payload + self.data_header + self.addr * hops
            }
            Body::Tora(ToraMsg::Qry { .. }) => self.qry,
            Body::Tora(ToraMsg::Upd { .. }) => self.upd,
            Body::Tora(ToraMsg::Clr { .. }) => self.clr,
            Body::Pdsr(PdsrMsg::Rreq { record, .. }) => self.rreq + self.addr * record.len() as u32,
            Body::Pdsr(PdsrMsg::Rrep { primary, backup, .. }) => {
                let n = primary.len() + backup.as_ref().map_or(0, |b| b.len());
                self.rrep + self.addr * n as u32
            }
            Body::Pdsr(PdsrMsg::Rerr { .. }) => self.rerr,
            Body::Pdsr(PdsrMsg::Warning { .. }) => self.warning,
            Body::Pdsr(PdsrMsg::Ack { .. }) => self.ack,
        }
    }
}

/// Undirected link state.
#[derive(Clone, Debug, Default)]
pub struct Topology {
    adj: Vec<BTreeSet<NodeId>>,
}

impl Topology {
    pub fn new(nodes: usize) -> Self {
        Topology { adj: vec![BTreeSet::new(); nodes] }
    }

    pub fn with_links(nodes: usize, links: &[(NodeId, NodeId)]) -> Self {
        let mut t = Topology::new(nodes);
        for &(a, b) in links {
            t.set(a, b, true);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Returns whether the state changed.
    pub fn set(&mut self, a: NodeId, b: NodeId, up: bool) -> bool {
        assert_ne!(a, b, "self links are not allowed");
        if up {
            self.adj[a].insert(b) & self.adj[b].insert(a)
        } else {
            self.adj[a].remove(&b) & self.adj[b].remove(&a)
        }
    }

    pub fn linked(&self, a: NodeId, b: NodeId) -> bool {
        self.adj[a].contains(&b)
    }

    pub fn neighbors(&self, a: NodeId) -> &BTreeSet<NodeId> {
        &self.adj[a]
    }

    pub fn links(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (a, set) in self.adj.iter().enumerate() {
            out.extend(set.range(a + 1..).map(|&b| (a, b)));
        }
        out
    }

    /// Whether transmissions by `x` and `y` would collide at some receiver.
    pub fn conflicts(&self, x: NodeId, y: NodeId) -> bool {
        if x == y || self.linked(x, y) {
            return true;
        }
        let (small, other) = if self.adj[x].len() <= self.adj[y].len() { (x, y) } else { (y, x) };
        self.adj[small].iter().any(|&n| self.adj[other].contains(&n))
    }

    pub fn reachable(&self, from: NodeId, to: NodeId) -> bool {
        self.component(from).contains(&to)
    }

    pub fn component(&self, from: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([from]);
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            for &m in &self.adj[n] {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub sender: NodeId,
    pub start: SimTime,
    pub finish: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Completion {
    Broadcast { frame: Frame, receivers: Vec<NodeId> },
    Delivered { frame: Frame, to: NodeId },
    Failed { frame: Frame, next_hop: NodeId },
}

#[derive(Clone, Debug)]
struct Active {
    frame: Frame,
    finish: SimTime,
}

#[derive(Clone, Debug)]
pub struct Medium {
    topo: Topology,
    bandwidth_bps: u64,
    queue: VecDeque<Frame>,
    active: BTreeMap<NodeId, Active>,
}

impl Medium {
    pub fn new(topo: Topology, bandwidth_bps: u64) -> Self {
        assert!(bandwidth_bps > 0, "bandwidth must be positive");
        Medium { topo, bandwidth_bps, queue: VecDeque::new(), active: BTreeMap::new() }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn bandwidth_bps(&self) -> u64 {
        self.bandwidth_bps
    }

    pub fn tx_time(&self, bytes: u32) -> SimTime {
        tx_time(bytes, self.bandwidth_bps)
    }

    pub fn is_transmitting(&self, node: NodeId) -> bool {
        self.active.contains_key(&node)
    }

    pub fn active_senders(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.active.keys().copied()
    }

    pub fn waiting(&self) -> usize {
        self.queue.len()
    }

    /// Queues a frame and grants whatever can start now.
    pub fn submit(&mut self, frame: Frame, now: SimTime) -> Vec<Grant> {
        self.queue.push_back(frame);
        self.try_grant(now)
    }

    /// Applies a link change. Conflicts depend on links, so waiting requests
    /// are re-examined.
    pub fn set_link(&mut self, a: NodeId, b: NodeId, up: bool, now: SimTime) -> Vec<Grant> {
        if self.topo.set(a, b, up) {
            self.try_grant(now)
        } else {
            Vec::new()
        }
    }

    pub fn try_grant(&mut self, now: SimTime) -> Vec<Grant> {
        let mut grants = Vec::new();
        let mut blocked: Vec<NodeId> = Vec::new();
        let mut i = 0;
        while i < self.queue.len() {
            let s = self.queue[i].sender;
            let free = self.active.keys().all(|&a| !self.topo.conflicts(a, s))
                && blocked.iter().all(|&b| !self.topo.conflicts(b, s));
            if free {
                let frame = self.queue.remove(i).expect("index in bounds");
                let finish = now + self.tx_time(frame.size);
                grants.push(Grant { sender: s, start: now, finish });
                self.active.insert(s, Active { frame, finish });
            } else {
                blocked.push(s);
                i += 1;
            }
        }
        grants
    }

    /// Ends `sender`'s transmission, resolves its receivers and grants any
    /// requests that were waiting on it.
    pub fn complete(&mut self, sender: NodeId, now: SimTime) -> (Completion, Vec<Grant>) {
        let Active { frame, finish } = self.active.remove(&sender).expect("sender is transmitting");
        debug_assert_eq!(finish, now, "completion at scheduled finish time");
        let outcome = match frame.dest {
            Dest::Broadcast => {
                let receivers = self.topo.neighbors(sender).iter().copied().collect();
                Completion::Broadcast { frame, receivers }
            }
            Dest::Unicast(to) if self.topo.linked(sender, to) => Completion::Delivered { frame, to },
            Dest::Unicast(next_hop) => Completion::Failed { frame, next_hop },
        };
        let grants = self.try_grant(now);
        (outcome, grants)
    }

    /// Removes every queued and in-flight frame, in-flight first.
    pub fn drain(&mut self) -> Vec<Frame> {
        let mut out: Vec<Frame> = std::mem::take(&mut self.active).into_values().map(|a| a.frame).collect();
        out.extend(self.queue.drain(..));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn upd(sender: NodeId, uid: u64) -> Frame {
        let body = Body::Tora(ToraMsg::Upd { dest: 0, height: None });
        Frame { uid, sender, dest: Dest::Broadcast, size: 28, body }
    }

    #[test]
    fn boundary_is_inclusive() {
        assert!(in_range(Position::new(0.0, 0.0), Position::new(150.0, 200.0), 250.0));
        assert!(!in_range(Position::new(0.0, 0.0), Position::new(150.0, 200.1), 250.0));
    }

    #[test]
    fn strength_values() {
        let o = Position::new(0.0, 0.0);
        assert_eq!(signal_strength(o, Position::new(125.0, 0.0), 250.0), Ok(4.0));
        assert_eq!(signal_strength(o, Position::new(250.0, 0.0), 250.0), Ok(1.0));
        let s = signal_strength(o, Position::new(204.1, 0.0), 250.0).unwrap();
        assert!((s - 1.5).abs() < 1e-3, "{s}");
        assert_eq!(signal_strength(o, o, 250.0), Err(MediumError::ZeroDistance));
    }

    #[test]
    fn airtime() {
        assert_eq!(tx_time(1000, 2_000_000), SimTime::from_millis(4));
        assert_eq!(tx_time(536, 2_000_000), SimTime::from_micros(2144));
        assert_eq!(tx_time(1, 3_000_000), SimTime::from_micros(3));
    }

    #[test]
    fn data_frame_size_counts_route_addresses() {
        let mut p = DataPacket::new(1, 0, 0, 2, 512, SimTime::ZERO);
        let sizes = FrameSizes::default();
        assert_eq!(sizes.size_of(&Body::Data(p.clone())), 524);
        p.route = Some(SourceRoute::new(vec![0, 1, 2]));
        assert_eq!(sizes.size_of(&Body::Data(p)), 536);
    }

    #[test]
    fn frame_kind_round_trip() {
        for k in FrameKind::ALL {
            assert_eq!(k.as_str().parse::<FrameKind>(), Ok(k));
        }
    }

    #[test]
    fn hidden_terminals_serialize() {
        // A at the centre, B, D and E all mutually in range. After A's
        // broadcast each of D, E, B requests in that order; they must take
        // turns, so B starts only after D and E have finished.
        let (a, b, d, e) = (0, 1, 2, 3);
        let topo = Topology::with_links(4, &[(a, b), (a, d), (a, e), (b, d), (b, e), (d, e)]);
        let mut m = Medium::new(topo, 2_000_000);
        let tx = m.tx_time(28);
        let g = m.submit(upd(a, 1), SimTime::ZERO);
        assert_eq!(g.len(), 1);
        let t1 = g[0].finish;
        let (c, _) = m.complete(a, t1);
        match c {
            Completion::Broadcast { receivers, .. } => assert_eq!(receivers, vec![b, d, e]),
            other => panic!("{other:?}"),
        }
        let gd = m.submit(upd(d, 2), t1);
        assert_eq!(gd.len(), 1);
        assert!(m.submit(upd(e, 3), t1).is_empty());
        assert!(m.submit(upd(b, 4), t1).is_empty());
        let (_, g2) = m.complete(d, t1 + tx);
        assert_eq!(g2, vec![Grant { sender: e, start: t1 + tx, finish: t1 + tx + tx }]);
        let (_, g3) = m.complete(e, t1 + tx + tx);
        assert_eq!(g3[0].sender, b);
        assert_eq!(g3[0].finish, t1 + tx + tx + tx);
    }

    #[test]
    fn two_hop_neighbours_conflict_but_distant_nodes_do_not() {
        // chain 0-1-2-3-4: 0 and 2 share neighbour 1; 0 and 3 share nothing.
        let topo = Topology::with_links(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert!(topo.conflicts(0, 2));
        assert!(!topo.conflicts(0, 3));
        let mut m = Medium::new(topo, 2_000_000);
        assert_eq!(m.submit(upd(0, 1), SimTime::ZERO).len(), 1);
        assert_eq!(m.submit(upd(3, 2), SimTime::ZERO).len(), 1);
        assert!(m.submit(upd(2, 3), SimTime::ZERO).is_empty());
    }

    #[test]
    fn fifo_blocks_later_conflicting_requests() {
        // 0 active; 1 waits on 0; 2 conflicts only with 1, so it must wait too.
        let topo = Topology::with_links(4, &[(0, 1), (1, 2)]);
        let mut m = Medium::new(topo, 2_000_000);
        m.submit(upd(0, 1), SimTime::ZERO);
        assert!(m.submit(upd(1, 2), SimTime::ZERO).is_empty());
        assert!(m.submit(upd(2, 3), SimTime::ZERO).is_empty());
        assert_eq!(m.waiting(), 2);
    }

    #[test]
    fn unicast_fails_if_link_drops_mid_flight() {
        let topo = Topology::with_links(2, &[(0, 1)]);
        let mut m = Medium::new(topo, 2_000_000);
        let mut f = upd(0, 1);
        f.dest = Dest::Unicast(1);
        let g = m.submit(f, SimTime::ZERO);
        m.set_link(0, 1, false, SimTime::from_micros(10));
        let (c, _) = m.complete(0, g[0].finish);
        assert!(matches!(c, Completion::Failed { next_hop: 1, .. }));
    }

    proptest! {
        #[test]
        fn active_transmitters_never_conflict(
            links in proptest::collection::vec((0usize..8, 0usize..8), 0..20),
            ops in proptest::collection::vec((0usize..8, any::<bool>()), 1..60),
        ) {
            let links: Vec<_> = links.into_iter().filter(|(a, b)| a != b).collect();
            let mut m = Medium::new(Topology::with_links(8, &links), 2_000_000);
            let mut now = SimTime::ZERO;
            let mut finishing: Vec<(SimTime, NodeId)> = Vec::new();
            let mut uid = 0;
            let check = |m: &Medium| {
                let act: Vec<_> = m.active_senders().collect();
                for i in 0..act.len() {
                    for j in i + 1..act.len() {
                        assert!(!m.topology().conflicts(act[i], act[j]));
                    }
                }
            };
            for (node, finish_first) in ops {
                if finish_first && !finishing.is_empty() {
                    finishing.sort();
                    let (t, s) = finishing.remove(0);
                    now = now.max(t);
                    let (_, g) = m.complete(s, t);
                    finishing.extend(g.iter().map(|g| (g.finish, g.sender)));
                } else {
                    uid += 1;
                    let g = m.submit(upd(node, uid), now);
                    finishing.extend(g.iter().map(|g| (g.finish, g.sender)));
                }
                check(&m);
            }
            // Everything eventually drains.
            while !finishing.is_empty() {
                finishing.sort();
                let (t, s) = finishing.remove(0);
                let (_, g) = m.complete(s, t);
                finishing.extend(g.iter().map(|g| (g.finish, g.sender)));
                check(&m);
            }
            prop_assert_eq!(m.waiting(), 0);
        }
    }
}

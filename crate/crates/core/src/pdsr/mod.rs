//! Source routing with route discovery, plus the preemptive extension:
//! the destination gathers several route records per request and returns a
//! primary and a low-overlap backup; nodes on the primary watch their upstream
//! link strength and warn the source, which then sends on both routes and
//! switches to the backup once the destination acknowledges it.
//!
//! With `preemptive` off the router behaves as plain on-demand source routing:
//! the destination answers the first request copy at once and no link is watched.

mod monitor;
mod routes;

pub use monitor::{SignalMonitor, DEFAULT_REARM_FACTOR};
pub use routes::{select_routes, CollectionWindow, RouteCache, RouteError, RouteRecord};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::engine::{EventHandle, SimTime};
use crate::medium::{Body, DataPacket, FrameKind};
use crate::metrics::DropSite;
use crate::sim::Ctx;
use crate::NodeId;

/// Route carried in a data packet; `path[idx]` is the current holder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceRoute {
    pub path: Vec<NodeId>,
    pub idx: usize,
    pub salvaged: bool,
    /// This copy travels on the backup route.
    pub backup: bool,
    pub ack_request: bool,
}

impl SourceRoute {
    pub fn new(path: Vec<NodeId>) -> Self {
        SourceRoute { path, idx: 0, salvaged: false, backup: false, ack_request: false }
    }
}

/// Control messages. Routed messages carry their full path and the index of
/// the node currently holding them.
#[derive(Clone, Debug, PartialEq)]
pub enum PdsrMsg {
    Rreq {
        src: NodeId,
        dst: NodeId,
        req_id: u64,
        record: Vec<NodeId>,
    },
    Rrep {
        src: NodeId,
        dst: NodeId,
        req_id: u64,
        primary: Vec<NodeId>,
        backup: Option<Vec<NodeId>>,
        path: Vec<NodeId>,
        idx: usize,
    },
    Rerr {
        from: NodeId,
        to: NodeId,
        path: Vec<NodeId>,
        idx: usize,
    },
    Warning {
        dst: NodeId,
        link: (NodeId, NodeId),
        path: Vec<NodeId>,
        idx: usize,
    },
    Ack {
        dst: NodeId,
        uid: u64,
        path: Vec<NodeId>,
        idx: usize,
    },
}

impl PdsrMsg {
    pub fn kind(&self) -> FrameKind {
        match self {
            PdsrMsg::Rreq { .. } => FrameKind::Rreq,
            PdsrMsg::Rrep { .. } => FrameKind::Rrep,
            PdsrMsg::Rerr { .. } => FrameKind::Rerr,
            PdsrMsg::Warning { .. } => FrameKind::Warning,
            PdsrMsg::Ack { .. } => FrameKind::Ack,
        }
    }

    fn routing(&mut self) -> Option<(&mut Vec<NodeId>, &mut usize)> {
        match self {
            PdsrMsg::Rreq { .. } => None,
            PdsrMsg::Rrep { path, idx, .. }
            | PdsrMsg::Rerr { path, idx, .. }
            | PdsrMsg::Warning { path, idx, .. }
            | PdsrMsg::Ack { path, idx, .. } => Some((path, idx)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdsrTimer {
    Window { src: NodeId, req_id: u64 },
    Retry { dst: NodeId, req_id: u64 },
    Ack { dst: NodeId },
    Probe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdsrConfig {
    pub preemptive: bool,
    /// Route collection window at the destination.
    pub q: SimTime,
    pub threshold: f64,
    pub rearm_factor: f64,
    pub ack_timeout_factor: f64,
    pub ack_floor: SimTime,
    pub buffer_cap: usize,
    pub rreq_initial: SimTime,
    pub rreq_cap: SimTime,
    /// Total request transmissions before giving up.
    pub rreq_sends: u32,
    pub probe_interval: SimTime,
    /// A watched route counts as active while data was seen this recently.
    pub active_window: SimTime,
    pub cache_per_target: usize,
}

impl PdsrConfig {
    pub fn preemptive(q: SimTime, threshold: f64) -> Self {
        PdsrConfig {
            preemptive: true,
            q,
            threshold,
            rearm_factor: DEFAULT_REARM_FACTOR,
            ack_timeout_factor: 3.0,
            ack_floor: SimTime::from_millis(50),
            buffer_cap: 64,
            rreq_initial: SimTime::from_millis(500),
            rreq_cap: SimTime::from_secs_f64(8.0),
            rreq_sends: 10,
            probe_interval: SimTime::from_millis(200),
            active_window: SimTime::from_secs_f64(1.0),
            cache_per_target: 8,
        }
    }

    pub fn plain() -> Self {
        PdsrConfig { preemptive: false, q: SimTime::ZERO, ..Self::preemptive(SimTime::ZERO, 1.5) }
    }

    /// Wait after the `n`-th request transmission (1-based).
    pub fn retry_wait(&self, n: u32) -> SimTime {
        let shift = n.saturating_sub(1).min(40);
        let us = self.rreq_initial.as_micros().saturating_mul(1u64 << shift);
        SimTime::from_micros(us.min(self.rreq_cap.as_micros()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActiveMode {
    PrimaryOnly,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualRoute {
    pub primary: RouteRecord,
    pub backup: Option<RouteRecord>,
    pub mode: ActiveMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AckState {
    Idle,
    /// Next backup copy asks for an acknowledgement.
    Wanted,
    Waiting(EventHandle),
    TimedOut,
}

#[derive(Clone, Debug)]
struct Discovery {
    req_id: u64,
    sends: u32,
    started: SimTime,
    timer: EventHandle,
}

#[derive(Clone, Debug)]
struct SourceState {
    dual: Option<DualRoute>,
    discovery: Option<Discovery>,
    buffer: VecDeque<DataPacket>,
    ack: AckState,
}

impl Default for SourceState {
    fn default() -> Self {
        SourceState { dual: None, discovery: None, buffer: VecDeque::new(), ack: AckState::Idle }
    }
}

#[derive(Clone, Debug)]
struct Watch {
    /// This node back to the source.
    back: Vec<NodeId>,
    monitor: SignalMonitor,
    last_data: SimTime,
}

#[derive(Clone, Debug)]
struct PdsrNode {
    next_req: u64,
    seen: BTreeSet<(NodeId, u64)>,
    cache: RouteCache,
    windows: BTreeMap<(NodeId, u64), CollectionWindow>,
    sources: BTreeMap<NodeId, SourceState>,
    /// Keyed by (source, destination, watched neighbour).
    watches: BTreeMap<(NodeId, NodeId, NodeId), Watch>,
    probe: Option<EventHandle>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PdsrStats {
    /// Time from the first request of a discovery to the reply at the source.
    pub route_latencies: Vec<SimTime>,
    pub rreq_sent: u64,
    pub replies: u64,
    pub warnings: Vec<(SimTime, NodeId, NodeId, NodeId)>,
    pub both_mode: Vec<(SimTime, NodeId, NodeId)>,
    pub switches: Vec<(SimTime, NodeId, NodeId)>,
    pub ack_timeouts: u64,
    pub salvages: u64,
    pub given_up: u64,
    /// Transmissions of request `(src, req_id)`: (time, src, dst, send number).
    pub rreq_log: Vec<(SimTime, NodeId, NodeId, u32)>,
}

#[derive(Clone, Debug)]
pub struct PdsrRouter {
    cfg: PdsrConfig,
    nodes: Vec<PdsrNode>,
    stats: PdsrStats,
}

impl PdsrRouter {
    pub fn new(nodes: usize, cfg: PdsrConfig) -> Self {
        let ns = (0..nodes)
            .map(|id| PdsrNode {
                next_req: 0,
                seen: BTreeSet::new(),
                cache: RouteCache::new(id, cfg.cache_per_target),
                windows: BTreeMap::new(),
                sources: BTreeMap::new(),
                watches: BTreeMap::new(),
                probe: None,
            })
            .collect();
        PdsrRouter { cfg, nodes: ns, stats: PdsrStats::default() }
    }

    pub fn config(&self) -> &PdsrConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &PdsrStats {
        &self.stats
    }

    pub fn routes(&self, src: NodeId, dst: NodeId) -> Option<&DualRoute> {
        self.nodes[src].sources.get(&dst)?.dual.as_ref()
    }

    pub fn cache(&self, node: NodeId) -> &RouteCache {
        &self.nodes[node].cache
    }

    pub fn originate(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        let src = pkt.src;
        self.send_from_source(ctx, src, pkt);
    }

    pub fn on_link(&mut self, _ctx: &mut Ctx, _a: NodeId, _b: NodeId, _up: bool) {
        // Breaks are learned from failed transmissions, not link sensing.
    }

    pub fn on_frame(&mut self, ctx: &mut Ctx, node: NodeId, from: NodeId, body: Body) {
        match body {
            Body::Data(pkt) => self.on_data(ctx, node, from, pkt),
            Body::Pdsr(PdsrMsg::Rreq { src, dst, req_id, record }) => self.on_rreq(ctx, node, src, dst, req_id, record),
            Body::Pdsr(mut msg) => {
                let (path, idx) = msg.routing().expect("routed message");
                *idx += 1;
                debug_assert_eq!(path[*idx], node);
                let arrived = *idx + 1 == path.len();
                self.on_routed(ctx, node, &msg, arrived);
                if !arrived {
                    let (path, idx) = msg.routing().expect("routed message");
                    let next = path[*idx + 1];
                    ctx.unicast(node, next, Body::Pdsr(msg));
                }
            }
            Body::Tora(_) => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, node: NodeId, timer: PdsrTimer) {
        match timer {
            PdsrTimer::Window { src, req_id } => self.close_window(ctx, node, src, req_id),
            PdsrTimer::Retry { dst, req_id } => {
                let st = self.nodes[node].sources.entry(dst).or_default();
                let Some(d) = st.discovery.clone().filter(|d| d.req_id == req_id) else { return };
                if d.sends >= self.cfg.rreq_sends {
                    st.discovery = None;
                    self.stats.given_up += 1;
                    let dropped: Vec<DataPacket> = st.buffer.drain(..).collect();
                    ctx.trace(Some(node), "giveup", || format!("dst={dst} sends={}", d.sends));
                    for p in dropped {
                        ctx.drop_copy(node, &p, DropSite::Source, "no-route");
                    }
                } else {
                    self.send_rreq(ctx, node, dst, d.sends + 1, d.started);
                }
            }
            PdsrTimer::Ack { dst } => {
                let st = self.nodes[node].sources.entry(dst).or_default();
                if matches!(st.ack, AckState::Waiting(_)) {
                    st.ack = AckState::TimedOut;
                    self.stats.ack_timeouts += 1;
                    ctx.trace(Some(node), "ack_timeout", || format!("dst={dst}"));
                    self.start_discovery(ctx, node, dst);
                }
            }
            PdsrTimer::Probe => {
                self.nodes[node].probe = None;
                let now = ctx.now();
                let window = self.cfg.active_window;
                self.nodes[node].watches.retain(|_, w| now.saturating_sub(w.last_data) <= window);
                let keys: Vec<_> = self.nodes[node].watches.keys().copied().collect();
                for key in keys {
                    self.sample(ctx, node, key);
                }
                self.ensure_probe(ctx, node);
            }
        }
    }

    pub fn on_unicast_failure(&mut self, ctx: &mut Ctx, node: NodeId, next_hop: NodeId, body: Body) {
        let purged = self.nodes[node].cache.purge_link(node, next_hop);
        ctx.trace(Some(node), "link_fail", || format!("nbr={next_hop} purged={purged}"));
        match body {
            Body::Data(mut pkt) => {
                let Some(mut r) = pkt.route.take() else {
                    ctx.drop_copy(node, &pkt, DropSite::Transit, "unrouted");
                    return;
                };
                if pkt.trail.last() == Some(&node) {
                    pkt.trail.pop();
                }
                if r.idx == 0 {
                    self.broken_at_source(ctx, node, node, next_hop);
                    pkt.retries += 1;
                    if r.backup || pkt.retries > 3 {
                        ctx.drop_copy(node, &pkt, DropSite::Source, "link-failure");
                    } else {
                        self.send_from_source(ctx, node, pkt);
                    }
                    return;
                }
                let back: Vec<NodeId> = r.path[..=r.idx].iter().rev().copied().collect();
                self.send_routed(ctx, node, PdsrMsg::Rerr { from: node, to: next_hop, path: back, idx: 0 });
                let prefix = &r.path[..r.idx];
                let alt = (!r.salvaged)
                    .then(|| {
                        self.nodes[node].cache.best_where(pkt.dst, |c| {
                            !c.uses_link(node, next_hop) && c.nodes()[1..].iter().all(|n| !prefix.contains(n))
                        })
                    })
                    .flatten()
                    .cloned();
                match alt {
                    Some(alt) => {
                        self.stats.salvages += 1;
                        let mut path = prefix.to_vec();
                        path.extend_from_slice(alt.nodes());
                        ctx.trace(Some(node), "salvage", || format!("uid={} route={}", pkt.uid, alt));
                        r.path = path;
                        r.salvaged = true;
                        let next = r.path[r.idx + 1];
                        pkt.route = Some(r);
                        pkt.trail.push(node);
                        ctx.unicast(node, next, Body::Data(pkt));
                    }
                    None => ctx.drop_copy(node, &pkt, DropSite::Transit, "link-failure"),
                }
            }
            Body::Pdsr(msg) => {
                ctx.trace(Some(node), "ctrl_lost", || format!("kind={}", msg.kind()));
            }
            Body::Tora(_) => {}
        }
    }

    /// Removes and returns everything still buffered at sources.
    pub fn drain(&mut self) -> Vec<DataPacket> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            for st in n.sources.values_mut() {
                out.extend(st.buffer.drain(..));
            }
        }
        out
    }

    fn send_from_source(&mut self, ctx: &mut Ctx, s: NodeId, pkt: DataPacket) {
        let dst = pkt.dst;
        let st = self.nodes[s].sources.entry(dst).or_default();
        let Some(dual) = st.dual.clone() else {
            if st.buffer.len() >= self.cfg.buffer_cap {
                let old = st.buffer.pop_front().expect("full buffer is non-empty");
                ctx.drop_copy(s, &old, DropSite::Source, "buffer-full");
            }
            self.nodes[s].sources.get_mut(&dst).expect("entry").buffer.push_back(pkt);
            self.start_discovery(ctx, s, dst);
            return;
        };
        let want_ack = st.ack == AckState::Wanted;
        let uid = pkt.uid;
        if let (ActiveMode::Both, Some(b)) = (dual.mode, &dual.backup) {
            ctx.add_copy(uid);
            let mut copy = pkt.clone();
            copy.route =
                Some(SourceRoute { backup: true, ack_request: want_ack, ..SourceRoute::new(b.nodes().to_vec()) });
            if want_ack {
                let size = ctx.frame_size(&Body::Data(copy.clone()));
                let per_hop = ctx.tx_time(size).as_micros() as f64;
                let t = (self.cfg.ack_timeout_factor * b.hops() as f64 * per_hop).round() as u64;
                let timeout = SimTime::from_micros(t).max(self.cfg.ack_floor);
                let h = ctx.set_timer(s, timeout, PdsrTimer::Ack { dst });
                self.nodes[s].sources.get_mut(&dst).expect("entry").ack = AckState::Waiting(h);
                ctx.trace(Some(s), "ack_req", || format!("dst={dst} uid={uid} timeout={timeout}"));
            }
            self.transmit(ctx, s, copy);
        }
        let mut p = pkt;
        p.route = Some(SourceRoute::new(dual.primary.nodes().to_vec()));
        self.transmit(ctx, s, p);
        if self.cfg.preemptive {
            let first = dual.primary.nodes()[1];
            self.watch(ctx, s, (s, dst, first), vec![s]);
        }
    }

    fn transmit(&mut self, ctx: &mut Ctx, node: NodeId, mut pkt: DataPacket) {
        let r = pkt.route.as_ref().expect("routed");
        let next = r.path[r.idx + 1];
        pkt.trail.push(node);
        ctx.unicast(node, next, Body::Data(pkt));
    }

    fn on_data(&mut self, ctx: &mut Ctx, node: NodeId, from: NodeId, mut pkt: DataPacket) {
        let Some(mut r) = pkt.route.take() else { return };
        r.idx += 1;
        debug_assert_eq!(r.path[r.idx], node);
        if let Ok(back) = RouteRecord::new(r.path[..=r.idx].iter().rev().copied().collect()) {
            self.nodes[node].cache.insert(&back);
        }
        if node == pkt.dst {
            if self.cfg.preemptive && !r.backup {
                let back: Vec<NodeId> = r.path.iter().rev().copied().collect();
                self.watch(ctx, node, (pkt.src, pkt.dst, from), back);
            }
            if r.ack_request {
                let back: Vec<NodeId> = r.path.iter().rev().copied().collect();
                let (uid, src) = (pkt.uid, pkt.src);
                ctx.trace(Some(node), "ack_send", || format!("src={src} uid={uid}"));
                self.send_routed(ctx, node, PdsrMsg::Ack { dst: node, uid, path: back, idx: 0 });
            }
            ctx.deliver(node, &pkt);
            return;
        }
        if let Ok(fwd) = RouteRecord::new(r.path[r.idx..].to_vec()) {
            self.nodes[node].cache.insert(&fwd);
        }
        if self.cfg.preemptive && !r.backup {
            let back: Vec<NodeId> = r.path[..=r.idx].iter().rev().copied().collect();
            self.watch(ctx, node, (pkt.src, pkt.dst, from), back);
        }
        pkt.route = Some(r);
        self.transmit(ctx, node, pkt);
    }

    fn watch(&mut self, ctx: &mut Ctx, node: NodeId, key: (NodeId, NodeId, NodeId), back: Vec<NodeId>) {
        let now = ctx.now();
        let threshold = self.cfg.threshold;
        let rearm = self.cfg.rearm_factor;
        let w = self.nodes[node].watches.entry(key).or_insert_with(|| Watch {
            back: back.clone(),
            monitor: SignalMonitor::with_rearm(threshold, rearm),
            last_data: now,
        });
        w.back = back;
        w.last_data = now;
        self.sample(ctx, node, key);
        self.ensure_probe(ctx, node);
    }

    /// A fresh reply re-arms the pair's monitors, so a link that warned
    /// while no route was in use can warn again for the new one.
    fn rearm(&mut self, node: NodeId, src: NodeId, dst: NodeId) {
        self.nodes[node].watches.retain(|&(s, d, _), _| (s, d) != (src, dst));
    }

    fn ensure_probe(&mut self, ctx: &mut Ctx, node: NodeId) {
        let n = &mut self.nodes[node];
        if n.probe.is_none() && !n.watches.is_empty() {
            n.probe = Some(ctx.set_timer(node, self.cfg.probe_interval, PdsrTimer::Probe));
        }
    }

    fn sample(&mut self, ctx: &mut Ctx, node: NodeId, key: (NodeId, NodeId, NodeId)) {
        let (src, dst, peer) = key;
        let Some(s) = ctx.strength(node, peer) else { return };
        let Some(w) = self.nodes[node].watches.get_mut(&key) else { return };
        if !w.monitor.sample(s) {
            return;
        }
        let back = w.back.clone();
        let link = if node == src { (node, peer) } else { (peer, node) };
        self.stats.warnings.push((ctx.now(), node, src, dst));
        ctx.trace(Some(node), "warn", || format!("src={src} dst={dst} nbr={peer} strength={s:.4}"));
        if back.len() == 1 {
            self.on_warning(ctx, node, dst, link);
        } else {
            self.send_routed(ctx, node, PdsrMsg::Warning { dst, link, path: back, idx: 0 });
        }
    }

    fn send_routed(&mut self, ctx: &mut Ctx, node: NodeId, msg: PdsrMsg) {
        let next = match &msg {
            PdsrMsg::Rrep { path, .. }
            | PdsrMsg::Rerr { path, .. }
            | PdsrMsg::Warning { path, .. }
            | PdsrMsg::Ack { path, .. } => path[1],
            PdsrMsg::Rreq { .. } => unreachable!("requests are broadcast"),
        };
        ctx.unicast(node, next, Body::Pdsr(msg));
    }

    fn on_routed(&mut self, ctx: &mut Ctx, node: NodeId, msg: &PdsrMsg, arrived: bool) {
        match msg {
            PdsrMsg::Rrep { src, dst, req_id, primary, backup, .. } => {
                self.rearm(node, *src, *dst);
                let p = RouteRecord::new(primary.clone()).ok();
                let b = backup.clone().and_then(|b| RouteRecord::new(b).ok());
                for r in [&p, &b].into_iter().flatten() {
                    if let Some(sfx) = r.suffix_from(node) {
                        self.nodes[node].cache.insert(&sfx);
                    }
                }
                if arrived {
                    if let Some(p) = p {
                        self.install(ctx, node, *dst, *req_id, p, b);
                    }
                } else if let Some(back) = p.as_ref().and_then(|p| p.prefix_to(node)) {
                    debug_assert_eq!(back.source(), *src);
                    self.nodes[node].cache.insert(&back.reversed());
                }
            }
            PdsrMsg::Rerr { from, to, .. } => {
                self.nodes[node].cache.purge_link(*from, *to);
                if arrived {
                    self.broken_at_source(ctx, node, *from, *to);
                }
            }
            PdsrMsg::Warning { dst, link, .. } => {
                if arrived {
                    self.on_warning(ctx, node, *dst, *link);
                }
            }
            PdsrMsg::Ack { dst, uid, .. } => {
                if arrived {
                    self.on_ack(ctx, node, *dst, *uid);
                }
            }
            PdsrMsg::Rreq { .. } => {}
        }
    }

    fn start_discovery(&mut self, ctx: &mut Ctx, s: NodeId, dst: NodeId) {
        if self.nodes[s].sources.entry(dst).or_default().discovery.is_none() {
            self.send_rreq(ctx, s, dst, 1, ctx.now());
        }
    }

    fn send_rreq(&mut self, ctx: &mut Ctx, s: NodeId, dst: NodeId, sends: u32, started: SimTime) {
        let n = &mut self.nodes[s];
        n.next_req += 1;
        let req_id = n.next_req;
        n.seen.insert((s, req_id));
        let timer = ctx.set_timer(s, self.cfg.retry_wait(sends), PdsrTimer::Retry { dst, req_id });
        n.sources.entry(dst).or_default().discovery = Some(Discovery { req_id, sends, started, timer });
        self.stats.rreq_sent += 1;
        self.stats.rreq_log.push((ctx.now(), s, dst, sends));
        ctx.trace(Some(s), "rreq", || format!("dst={dst} req={req_id} send={sends}"));
        ctx.broadcast(s, Body::Pdsr(PdsrMsg::Rreq { src: s, dst, req_id, record: vec![s] }));
    }

    fn on_rreq(&mut self, ctx: &mut Ctx, node: NodeId, src: NodeId, dst: NodeId, req_id: u64, record: Vec<NodeId>) {
        if node == src || record.contains(&node) {
            return;
        }
        let mut record = record;
        record.push(node);
        if node == dst {
            let Ok(route) = RouteRecord::new(record) else { return };
            let now = ctx.now();
            let q = self.cfg.q;
            let n = &mut self.nodes[node];
            match n.windows.get_mut(&(src, req_id)) {
                Some(w) if !w.closed => w.candidates.push(route),
                Some(_) => {}
                None => {
                    n.windows.insert(
                        (src, req_id),
                        CollectionWindow {
                            src,
                            req_id,
                            opened: now,
                            deadline: now + q,
                            candidates: vec![route],
                            closed: false,
                        },
                    );
                    if q == SimTime::ZERO {
                        self.close_window(ctx, node, src, req_id);
                    } else {
                        ctx.set_timer(node, q, PdsrTimer::Window { src, req_id });
                    }
                }
            }
            return;
        }
        if !self.nodes[node].seen.insert((src, req_id)) {
            return;
        }
        ctx.broadcast(node, Body::Pdsr(PdsrMsg::Rreq { src, dst, req_id, record }));
    }

    fn close_window(&mut self, ctx: &mut Ctx, node: NodeId, src: NodeId, req_id: u64) {
        let Some(w) = self.nodes[node].windows.get_mut(&(src, req_id)) else { return };
        if w.closed {
            return;
        }
        w.closed = true;
        let cands = std::mem::take(&mut w.candidates);
        let count = cands.len();
        let Some((primary, backup)) =
            (if self.cfg.preemptive { select_routes(&cands) } else { cands.first().map(|p| (p.clone(), None)) })
        else {
            return;
        };
        self.stats.replies += 1;
        self.rearm(node, src, node);
        self.nodes[node].cache.insert(&primary.reversed());
        if let Some(b) = &backup {
            self.nodes[node].cache.insert(&b.reversed());
        }
        ctx.trace(Some(node), "rrep", || {
            format!(
                "src={src} req={req_id} candidates={count} primary={primary} backup={}",
                backup.as_ref().map_or_else(|| "-".to_string(), |b| b.to_string())
            )
        });
        let path: Vec<NodeId> = primary.reversed().nodes().to_vec();
        let msg = PdsrMsg::Rrep {
            src,
            dst: node,
            req_id,
            primary: primary.nodes().to_vec(),
            backup: backup.map(|b| b.nodes().to_vec()),
            path,
            idx: 0,
        };
        self.send_routed(ctx, node, msg);
    }

    fn install(
        &mut self,
        ctx: &mut Ctx,
        s: NodeId,
        dst: NodeId,
        req_id: u64,
        primary: RouteRecord,
        backup: Option<RouteRecord>,
    ) {
        let now = ctx.now();
        let n = &mut self.nodes[s];
        n.cache.insert(&primary);
        if let Some(b) = &backup {
            n.cache.insert(b);
        }
        let st = n.sources.entry(dst).or_default();
        let Some(d) = st.discovery.take() else {
            if st.dual.is_none() {
                st.dual = Some(DualRoute { primary, backup, mode: ActiveMode::PrimaryOnly });
            }
            return self.flush(ctx, s, dst);
        };
        ctx.cancel(d.timer);
        if let AckState::Waiting(h) = st.ack {
            ctx.cancel(h);
        }
        st.ack = AckState::Idle;
        if let Some(old) = st.dual.take() {
            n.cache.insert(&old.primary);
        }
        let latency = now - d.started;
        self.stats.route_latencies.push(latency);
        ctx.trace(Some(s), "route", || format!("dst={dst} req={req_id} latency={latency} primary={primary}"));
        self.nodes[s].sources.get_mut(&dst).expect("entry").dual =
            Some(DualRoute { primary, backup, mode: ActiveMode::PrimaryOnly });
        self.flush(ctx, s, dst);
    }

    fn flush(&mut self, ctx: &mut Ctx, s: NodeId, dst: NodeId) {
        let buffered: Vec<DataPacket> =
            self.nodes[s].sources.get_mut(&dst).map(|st| st.buffer.drain(..).collect()).unwrap_or_default();
        for p in buffered {
            self.send_from_source(ctx, s, p);
        }
    }

    fn on_warning(&mut self, ctx: &mut Ctx, s: NodeId, dst: NodeId, link: (NodeId, NodeId)) {
        let st = self.nodes[s].sources.entry(dst).or_default();
        let Some(dual) = st.dual.as_mut() else { return };
        if !dual.primary.uses_link(link.0, link.1) {
            return;
        }
        if dual.backup.is_some() {
            if dual.mode == ActiveMode::PrimaryOnly {
                dual.mode = ActiveMode::Both;
                st.ack = AckState::Wanted;
                self.stats.both_mode.push((ctx.now(), s, dst));
                ctx.trace(Some(s), "both", || format!("dst={dst} link={}-{}", link.0, link.1));
            }
        } else {
            ctx.trace(Some(s), "rediscover", || format!("dst={dst} link={}-{}", link.0, link.1));
            self.start_discovery(ctx, s, dst);
        }
    }

    fn on_ack(&mut self, ctx: &mut Ctx, s: NodeId, dst: NodeId, uid: u64) {
        let n = &mut self.nodes[s];
        let st = n.sources.entry(dst).or_default();
        let AckState::Waiting(h) = st.ack else {
            ctx.trace(Some(s), "ack_ignored", || format!("dst={dst} uid={uid}"));
            return;
        };
        let Some(dual) = st.dual.as_mut().filter(|d| d.mode == ActiveMode::Both && d.backup.is_some()) else {
            return;
        };
        ctx.cancel(h);
        st.ack = AckState::Idle;
        let new_primary = dual.backup.take().expect("checked");
        let old = std::mem::replace(&mut dual.primary, new_primary);
        dual.mode = ActiveMode::PrimaryOnly;
        let now_primary = dual.primary.clone();
        n.cache.insert(&old);
        self.stats.switches.push((ctx.now(), s, dst));
        ctx.trace(Some(s), "switch", || format!("dst={dst} uid={uid} primary={now_primary}"));
    }

    /// Reacts at a source to a broken link `a`-`b`.
    fn broken_at_source(&mut self, ctx: &mut Ctx, s: NodeId, a: NodeId, b: NodeId) {
        let n = &mut self.nodes[s];
        n.cache.purge_link(a, b);
        let dsts: Vec<NodeId> = n.sources.keys().copied().collect();
        let mut rediscover = Vec::new();
        for dst in dsts {
            let n = &mut self.nodes[s];
            let cached = n.cache.best(dst).cloned();
            let st = n.sources.get_mut(&dst).expect("key");
            let Some(dual) = st.dual.as_mut() else { continue };
            let mut reset_ack = false;
            if dual.backup.as_ref().is_some_and(|r| r.uses_link(a, b)) {
                dual.backup = None;
                dual.mode = ActiveMode::PrimaryOnly;
                reset_ack = true;
            }
            if dual.primary.uses_link(a, b) {
                reset_ack = true;
                if let Some(bk) = dual.backup.take() {
                    dual.primary = bk;
                    dual.mode = ActiveMode::PrimaryOnly;
                } else if let Some(c) = cached {
                    dual.primary = c;
                } else {
                    st.dual = None;
                    rediscover.push(dst);
                }
            }
            if reset_ack {
                if let AckState::Waiting(h) = st.ack {
                    ctx.cancel(h);
                }
                st.ack = AckState::Idle;
            }
        }
        for dst in rediscover {
            self.start_discovery(ctx, s, dst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_schedule() {
        // Waits double from 0.5 s and cap at 8 s; ten sends in total.
        let cfg = PdsrConfig::preemptive(SimTime::from_millis(100), 1.5);
        let mut t = 0.0;
        let mut sends = vec![];
        for n in 1..=cfg.rreq_sends {
            sends.push(t);
            t += cfg.retry_wait(n).as_secs_f64();
        }
        assert_eq!(sends, vec![0.0, 0.5, 1.5, 3.5, 7.5, 15.5, 23.5, 31.5, 39.5, 47.5]);
        assert_eq!(t, 55.5);
    }

    #[test]
    fn plain_mode_has_no_window() {
        let cfg = PdsrConfig::plain();
        assert!(!cfg.preemptive);
        assert_eq!(cfg.q, SimTime::ZERO);
    }
}

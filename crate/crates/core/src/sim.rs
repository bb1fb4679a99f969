//! One simulation run: event dispatch between mobility, the medium, the
//! routing protocol, CBR sources and the packet ledger.

use std::collections::HashMap;
use std::io;

use thiserror::Error;

use crate::engine::{EventHandle, RngStream, Scheduler, SimTime};
use crate::medium::{signal_strength, Body, Completion, DataPacket, Dest, Frame, FrameSizes, Grant, Medium, Topology};
use crate::metrics::{Accountant, AuditError, DropSite, LedgerEvent, RunEcho, RunResult};
use crate::mobility::{link_events, links_at, Field, SpeedRange, Trajectory};
use crate::pdsr::{PdsrConfig, PdsrRouter, PdsrStats, PdsrTimer};
use crate::scenario::{FlowSpec, Placement, Protocol, Scenario, ScenarioError};
use crate::tora::{ToraRouter, ToraStats};
use crate::trace::{format_line, TraceSink};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Link { a: NodeId, b: NodeId, up: bool },
    TxDone { sender: NodeId },
    Cbr { flow: usize, k: u64 },
    Timer { node: NodeId, timer: PdsrTimer },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid mobility parameters: {0}")]
    Mobility(String),
    #[error("trace output failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug)]
struct Copies {
    live: u32,
    done: bool,
    flow: usize,
}

/// Everything a router may touch while handling an event.
pub struct Ctx {
    sched: Scheduler<Event>,
    medium: Medium,
    sizes: FrameSizes,
    trajectories: Option<Vec<Trajectory>>,
    range: f64,
    acct: Accountant,
    copies: HashMap<u64, Copies>,
    sink: TraceSink,
    io_error: Option<io::Error>,
    next_frame: u64,
}

impl Ctx {
    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn topology(&self) -> &Topology {
        self.medium.topology()
    }

    pub fn frame_size(&self, body: &Body) -> u32 {
        self.sizes.size_of(body)
    }

    pub fn tx_time(&self, bytes: u32) -> SimTime {
        self.medium.tx_time(bytes)
    }

    pub fn broadcast(&mut self, node: NodeId, body: Body) {
        self.submit(node, Dest::Broadcast, body);
    }

    pub fn unicast(&mut self, node: NodeId, next_hop: NodeId, body: Body) {
        self.submit(node, Dest::Unicast(next_hop), body);
    }

    fn submit(&mut self, sender: NodeId, dest: Dest, body: Body) {
        self.next_frame += 1;
        let size = self.sizes.size_of(&body);
        let frame = Frame { uid: self.next_frame, sender, dest, size, body };
        let now = self.now();
        let grants = self.medium.submit(frame, now);
        self.schedule_grants(grants);
    }

    fn schedule_grants(&mut self, grants: Vec<Grant>) {
        for g in grants {
            self.sched.schedule(g.finish, Event::TxDone { sender: g.sender }).expect("grant ends in the future");
        }
    }

    pub fn set_timer(&mut self, node: NodeId, delay: SimTime, timer: PdsrTimer) -> EventHandle {
        self.sched.schedule_in(delay, Event::Timer { node, timer })
    }

    pub fn cancel(&mut self, h: EventHandle) {
        self.sched.cancel(h);
    }

    /// Current link strength between two nodes, if node positions are modelled.
    pub fn strength(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let tr = self.trajectories.as_ref()?;
        let now = self.now();
        let s = signal_strength(tr[a].position_at(now), tr[b].position_at(now), self.range);
        Some(s.unwrap_or(f64::INFINITY))
    }

    /// Registers an extra in-flight copy of a packet.
    pub fn add_copy(&mut self, uid: u64) {
        if let Some(c) = self.copies.get_mut(&uid) {
            c.live += 1;
        }
    }

    /// Hands a copy to the application; returns whether it was the first.
    pub fn deliver(&mut self, node: NodeId, pkt: &DataPacket) -> bool {
        let Some(c) = self.copies.get_mut(&pkt.uid) else { return false };
        c.live = c.live.saturating_sub(1);
        if c.done {
            self.trace(Some(node), "dup", || format!("uid={}", pkt.uid));
            return false;
        }
        c.done = true;
        let ev = LedgerEvent::Deliver { t: self.now(), uid: pkt.uid, flow: pkt.flow, node };
        self.record(ev);
        true
    }

    /// Discards one copy. The packet counts as dropped once its last copy is
    /// gone without any having been delivered.
    pub fn drop_copy(&mut self, node: NodeId, pkt: &DataPacket, site: DropSite, reason: &str) {
        let Some(c) = self.copies.get_mut(&pkt.uid) else { return };
        c.live = c.live.saturating_sub(1);
        if c.done || c.live > 0 {
            let r = reason.to_string();
            self.trace(Some(node), "discard", || format!("uid={} reason={r}", pkt.uid));
            return;
        }
        c.done = true;
        let flow = c.flow;
        let ev = LedgerEvent::Drop { t: self.now(), uid: pkt.uid, flow, node, site, reason: reason.to_string() };
        self.record(ev);
    }

    pub fn tracing(&self) -> bool {
        self.sink.enabled()
    }

    pub fn trace(&mut self, node: Option<NodeId>, ev: &str, detail: impl FnOnce() -> String) {
        if self.sink.enabled() {
            let line = format_line(self.now(), node, ev, &detail());
            self.emit(line);
        }
    }

    fn emit(&mut self, line: String) {
        if let Err(e) = self.sink.emit(line) {
            self.io_error.get_or_insert(e);
        }
    }

    fn record(&mut self, ev: LedgerEvent) {
        self.record_with(ev, "");
    }

    fn record_with(&mut self, ev: LedgerEvent, extra: &str) {
        if self.sink.enabled() {
            let (name, mut detail) = ev.trace_parts();
            if !extra.is_empty() {
                detail.push(' ');
                detail.push_str(extra);
            }
            let line = format_line(ev.time(), Some(ev.node()), name, &detail);
            self.emit(line);
        }
        self.acct.record(&ev);
    }
}

pub enum Router {
    Tora(ToraRouter),
    Pdsr(PdsrRouter),
}

impl Router {
    fn originate(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        match self {
            Router::Tora(r) => r.originate(ctx, pkt),
            Router::Pdsr(r) => r.originate(ctx, pkt),
        }
    }

    fn on_frame(&mut self, ctx: &mut Ctx, node: NodeId, from: NodeId, body: Body) {
        match self {
            Router::Tora(r) => r.on_frame(ctx, node, from, body),
            Router::Pdsr(r) => r.on_frame(ctx, node, from, body),
        }
    }

    fn on_link(&mut self, ctx: &mut Ctx, a: NodeId, b: NodeId, up: bool) {
        match self {
            Router::Tora(r) => r.on_link(ctx, a, b, up),
            Router::Pdsr(r) => r.on_link(ctx, a, b, up),
        }
    }

    fn on_unicast_failure(&mut self, ctx: &mut Ctx, node: NodeId, next_hop: NodeId, body: Body) {
        match self {
            Router::Tora(r) => r.on_unicast_failure(ctx, node, next_hop, body),
            Router::Pdsr(r) => r.on_unicast_failure(ctx, node, next_hop, body),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, node: NodeId, timer: PdsrTimer) {
        if let Router::Pdsr(r) = self {
            r.on_timer(ctx, node, timer);
        }
    }

    fn drain(&mut self) -> Vec<DataPacket> {
        match self {
            Router::Tora(r) => r.drain(),
            Router::Pdsr(r) => r.drain(),
        }
    }

    pub fn route_latencies(&self) -> Vec<SimTime> {
        match self {
            Router::Tora(r) => r.stats().route_latencies.clone(),
            Router::Pdsr(r) => r.stats().route_latencies.clone(),
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct Outcome {
    pub result: RunResult,
    pub audit: Result<(), AuditError>,
    pub route_latencies: Vec<SimTime>,
    pub tora: Option<ToraStats>,
    pub pdsr: Option<PdsrStats>,
    /// Trace lines, when tracing to memory.
    pub trace: Vec<String>,
}

impl Outcome {
    /// Median route-creation latency, if any route was created.
    pub fn median_latency(&self) -> Option<SimTime> {
        let mut v = self.route_latencies.clone();
        v.sort();
        (!v.is_empty()).then(|| v[(v.len() - 1) / 2])
    }
}

pub struct Simulation {
    scenario: Scenario,
    ctx: Ctx,
    router: Router,
    flows: Vec<FlowSpec>,
    next_uid: u64,
    end: SimTime,
    started: bool,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let n = scenario.nodes;
        let end = SimTime::from_secs_f64(scenario.duration_s);
        let rng = RngStream::new(scenario.seed);
        let trajectories: Option<Vec<Trajectory>> = match &scenario.placement {
            Placement::RandomWaypoint => {
                let field = Field { width: scenario.area_x, height: scenario.area_y };
                let speed = SpeedRange::new(scenario.speed_min, scenario.speed_max)
                    .map_err(|e| SimError::Mobility(e.to_string()))?;
                Some(
                    (0..n)
                        .map(|i| {
                            let mut r = rng.substream(&format!("mobility/{i}"));
                            Trajectory::random_waypoint(&mut r, field, speed, scenario.pause_s, scenario.duration_s)
                        })
                        .collect(),
                )
            }
            Placement::Static(ps) => Some(ps.iter().map(|&p| Trajectory::stationary(p)).collect()),
            Placement::Scripted(ts) => Some(ts.clone()),
            Placement::Explicit { .. } => None,
        };
        let trajectories = match (trajectories, scenario.freeze_at) {
            (Some(ts), Some(f)) => Some(ts.iter().map(|t| t.frozen_after(f)).collect()),
            (ts, _) => ts,
        };

        let mut sched = Scheduler::new();
        let initial = match (&trajectories, &scenario.placement) {
            (Some(ts), _) => {
                for e in link_events(ts, scenario.range_m, end) {
                    sched.schedule(e.time, Event::Link { a: e.a, b: e.b, up: e.up }).expect("future link event");
                }
                links_at(ts, scenario.range_m, 0.0)
            }
            (None, Placement::Explicit { initial, changes }) => {
                let mut ch = changes.clone();
                ch.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
                for (t, a, b, up) in ch {
                    let at = SimTime::from_secs_f64(t);
                    if at <= end {
                        sched.schedule(at, Event::Link { a, b, up }).expect("future link event");
                    }
                }
                initial.clone()
            }
            (None, _) => unreachable!("only explicit placement lacks trajectories"),
        };

        let router = match scenario.protocol {
            Protocol::Tora => Router::Tora(ToraRouter::new(n, &initial, scenario.buffer_packets)),
            Protocol::Pdsr | Protocol::Dsr => {
                let mut cfg = if scenario.protocol == Protocol::Pdsr {
                    PdsrConfig::preemptive(SimTime::from_secs_f64(scenario.pdsr_q_s), scenario.pdsr_t)
                } else {
                    PdsrConfig::plain()
                };
                cfg.ack_timeout_factor = scenario.ack_timeout_factor;
                cfg.buffer_cap = scenario.buffer_packets;
                Router::Pdsr(PdsrRouter::new(n, cfg))
            }
        };

        let flows = scenario.flow_specs();
        for (i, f) in flows.iter().enumerate() {
            let at = SimTime::from_secs_f64(f.start);
            if f.start < f.stop && at < end {
                sched.schedule(at, Event::Cbr { flow: i, k: 0 }).expect("future flow start");
            }
        }

        let ctx = Ctx {
            sched,
            medium: Medium::new(Topology::with_links(n, &initial), scenario.bandwidth_bps),
            sizes: scenario.frame_sizes,
            trajectories,
            range: scenario.range_m,
            acct: Accountant::new(),
            copies: HashMap::new(),
            sink: TraceSink::Off,
            io_error: None,
            next_frame: 0,
        };
        Ok(Simulation { scenario, ctx, router, flows, next_uid: 0, end, started: false })
    }

    pub fn with_trace(mut self, sink: TraceSink) -> Self {
        self.ctx.sink = sink;
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> SimTime {
        self.ctx.now()
    }

    pub fn topology(&self) -> &Topology {
        self.ctx.topology()
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn tora(&self) -> Option<&ToraRouter> {
        match &self.router {
            Router::Tora(r) => Some(r),
            Router::Pdsr(_) => None,
        }
    }

    pub fn tora_mut(&mut self) -> Option<&mut ToraRouter> {
        match &mut self.router {
            Router::Tora(r) => Some(r),
            Router::Pdsr(_) => None,
        }
    }

    pub fn pdsr(&self) -> Option<&PdsrRouter> {
        match &self.router {
            Router::Pdsr(r) => Some(r),
            Router::Tora(_) => None,
        }
    }

    pub fn echo(&self) -> RunEcho {
        let s = &self.scenario;
        RunEcho {
            protocol: s.protocol.to_string(),
            nodes: s.nodes,
            speed_class: s.speed_class().as_str().to_string(),
            pause_s: s.pause_s,
            seed: s.seed,
            duration: self.end,
        }
    }

    fn header(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let e = self.echo();
        self.ctx.trace(None, "scenario", || {
            format!(
                "protocol={} nodes={} speed_class={} pause_s={} seed={} duration={}",
                e.protocol, e.nodes, e.speed_class, e.pause_s, e.seed, e.duration
            )
        });
        let flows = self.flows.clone();
        for (i, f) in flows.iter().enumerate() {
            self.ctx.trace(None, "flow", || {
                format!("id={i} src={} dst={} start={} stop={}", f.src, f.dst, f.start, f.stop)
            });
        }
    }

    /// Processes every event up to and including `t` (capped at the run end).
    pub fn run_until(&mut self, t: SimTime) {
        self.header();
        let t = t.min(self.end);
        while let Some((_, ev)) = self.ctx.sched.pop_until(t) {
            self.dispatch(ev);
        }
        let _ = self.ctx.sched.advance_to(t);
    }

    /// Runs to the end and settles every outstanding packet.
    pub fn run(mut self) -> Result<Outcome, SimError> {
        self.run_until(self.end);
        self.finish()
    }

    fn finish(mut self) -> Result<Outcome, SimError> {
        let echo = self.echo();
        let ctx = &mut self.ctx;
        for pkt in self.router.drain() {
            ctx.drop_copy(pkt.src, &pkt, DropSite::Source, "end");
        }
        for frame in ctx.medium.drain() {
            if let Body::Data(pkt) = frame.body {
                ctx.drop_copy(frame.sender, &pkt, DropSite::Transit, "end");
            }
        }
        ctx.trace(None, "end", String::new);
        ctx.sink.flush()?;
        if let Some(e) = ctx.io_error.take() {
            return Err(SimError::Io(e));
        }
        let ledger = ctx.acct.ledger();
        let result = RunResult { echo, summary: ledger.summary(self.end), ctrl_by_kind: ledger.ctrl_by_kind().clone() };
        let audit = ledger.audit();
        let trace = std::mem::replace(&mut self.ctx.sink, TraceSink::Off);
        let (tora, pdsr) = match &self.router {
            Router::Tora(r) => (Some(r.stats().clone()), None),
            Router::Pdsr(r) => (None, Some(r.stats().clone())),
        };
        Ok(Outcome {
            result,
            audit,
            route_latencies: self.router.route_latencies(),
            tora,
            pdsr,
            trace: match trace {
                TraceSink::Memory(v) => v,
                _ => Vec::new(),
            },
        })
    }

    fn dispatch(&mut self, ev: Event) {
        let ctx = &mut self.ctx;
        let now = ctx.now();
        match ev {
            Event::Link { a, b, up } => {
                let grants = ctx.medium.set_link(a, b, up, now);
                ctx.schedule_grants(grants);
                ctx.trace(None, "link", || format!("a={a} b={b} up={}", up as u8));
                self.router.on_link(ctx, a, b, up);
            }
            Event::TxDone { sender } => {
                let (completion, grants) = ctx.medium.complete(sender, now);
                ctx.schedule_grants(grants);
                match completion {
                    Completion::Broadcast { frame, receivers } => {
                        let ev = LedgerEvent::Tx {
                            t: now,
                            node: sender,
                            kind: frame.kind(),
                            bytes: frame.size,
                            ok: !receivers.is_empty(),
                            receivers: receivers.len(),
                        };
                        ctx.record_with(ev, &format!("to=* frame={}", frame.uid));
                        for &r in &receivers {
                            ctx.record(LedgerEvent::Rx { t: now, node: r, kind: frame.kind(), bytes: frame.size });
                        }
                        for r in receivers {
                            self.router.on_frame(ctx, r, sender, frame.body.clone());
                        }
                    }
                    Completion::Delivered { frame, to } => {
                        let ev = LedgerEvent::Tx {
                            t: now,
                            node: sender,
                            kind: frame.kind(),
                            bytes: frame.size,
                            ok: true,
                            receivers: 1,
                        };
                        ctx.record_with(ev, &format!("to={to} frame={}", frame.uid));
                        ctx.record(LedgerEvent::Rx { t: now, node: to, kind: frame.kind(), bytes: frame.size });
                        self.router.on_frame(ctx, to, sender, frame.body);
                    }
                    Completion::Failed { frame, next_hop } => {
                        let ev = LedgerEvent::Tx {
                            t: now,
                            node: sender,
                            kind: frame.kind(),
                            bytes: frame.size,
                            ok: false,
                            receivers: 0,
                        };
                        ctx.record_with(ev, &format!("to={next_hop} frame={}", frame.uid));
                        self.router.on_unicast_failure(ctx, sender, next_hop, frame.body);
                    }
                }
            }
            Event::Cbr { flow, k } => {
                let f = self.flows[flow];
                self.next_uid += 1;
                let uid = self.next_uid;
                let payload = self.scenario.cbr_payload_bytes;
                ctx.copies.insert(uid, Copies { live: 1, done: false, flow });
                ctx.record(LedgerEvent::Gen { t: now, uid, flow, node: f.src, dst: f.dst, bytes: payload });
                let pkt = DataPacket::new(uid, flow, f.src, f.dst, payload, now);
                let next = f.start + (k + 1) as f64 * self.scenario.cbr_interval_s;
                let at = SimTime::from_secs_f64(next);
                if next < f.stop && at < self.end {
                    ctx.sched.schedule(at, Event::Cbr { flow, k: k + 1 }).expect("cbr moves forward");
                }
                self.router.originate(ctx, pkt);
            }
            Event::Timer { node, timer } => self.router.on_timer(ctx, node, timer),
        }
    }
}

/// Convenience: builds, runs and returns the outcome of a scenario.
pub fn run_scenario(scenario: Scenario) -> Result<Outcome, SimError> {
    Simulation::new(scenario)?.run()
}

/// Same, with an in-memory trace.
pub fn run_traced(scenario: Scenario) -> Result<Outcome, SimError> {
    Simulation::new(scenario)?.with_trace(TraceSink::Memory(Vec::new())).run()
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("trace has no scenario header")]
    NoHeader,
    #[error("scenario header field '{0}' is missing or malformed")]
    Header(&'static str),
}

/// Recomputes a run's metrics from its trace alone.
pub fn replay(lines: &[crate::trace::TraceLine]) -> Result<RunResult, ReplayError> {
    let head = lines.iter().find(|l| l.node.is_none() && l.ev == "scenario").ok_or(ReplayError::NoHeader)?;
    let echo = RunEcho {
        protocol: head.get("protocol").ok_or(ReplayError::Header("protocol"))?.to_string(),
        nodes: head.parse_field("nodes").ok_or(ReplayError::Header("nodes"))?,
        speed_class: head.get("speed_class").ok_or(ReplayError::Header("speed_class"))?.to_string(),
        pause_s: head.parse_field("pause_s").ok_or(ReplayError::Header("pause_s"))?,
        seed: head.parse_field("seed").ok_or(ReplayError::Header("seed"))?,
        duration: head.get("duration").and_then(SimTime::parse).ok_or(ReplayError::Header("duration"))?,
    };
    let mut acct = Accountant::new();
    for ev in lines.iter().filter_map(LedgerEvent::from_trace) {
        acct.record(&ev);
    }
    let ledger = acct.ledger();
    Ok(RunResult { summary: ledger.summary(echo.duration), ctrl_by_kind: ledger.ctrl_by_kind().clone(), echo })
}

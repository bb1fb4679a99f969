//! Packet ledger and the derived run metrics.
//!
//! Every quantity reported for a run is a pure function of the stream of
//! [`LedgerEvent`]s, which is also what the trace records, so a trace can be
//! replayed into an identical result row.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::engine::SimTime;
use crate::medium::FrameKind;
use crate::trace::TraceLine;
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropSite {
    /// The source never had a usable route.
    Source,
    /// Lost after leaving the source.
    Transit,
}

impl DropSite {
    pub fn as_str(self) -> &'static str {
        match self {
            DropSite::Source => "source",
            DropSite::Transit => "transit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LedgerEvent {
    Gen {
        t: SimTime,
        uid: u64,
        flow: usize,
        node: NodeId,
        dst: NodeId,
        bytes: u32,
    },
    Deliver {
        t: SimTime,
        uid: u64,
        flow: usize,
        node: NodeId,
    },
    Drop {
        t: SimTime,
        uid: u64,
        flow: usize,
        node: NodeId,
        site: DropSite,
        reason: String,
    },
    /// `ok`: a broadcast with at least one receiver, or a unicast that reached its next hop.
    Tx {
        t: SimTime,
        node: NodeId,
        kind: FrameKind,
        bytes: u32,
        ok: bool,
        receivers: usize,
    },
    Rx {
        t: SimTime,
        node: NodeId,
        kind: FrameKind,
        bytes: u32,
    },
}

impl LedgerEvent {
    pub fn time(&self) -> SimTime {
        match *self {
            LedgerEvent::Gen { t, .. }
            | LedgerEvent::Deliver { t, .. }
            | LedgerEvent::Drop { t, .. }
            | LedgerEvent::Tx { t, .. }
            | LedgerEvent::Rx { t, .. } => t,
        }
    }

    pub fn node(&self) -> NodeId {
        match *self {
            LedgerEvent::Gen { node, .. }
            | LedgerEvent::Deliver { node, .. }
            | LedgerEvent::Drop { node, .. }
            | LedgerEvent::Tx { node, .. }
            | LedgerEvent::Rx { node, .. } => node,
        }
    }

    /// `(ev, detail)` as written to the trace.
    pub fn trace_parts(&self) -> (&'static str, String) {
        match self {
            LedgerEvent::Gen { uid, flow, dst, bytes, .. } => {
                ("gen", format!("uid={uid} flow={flow} dst={dst} bytes={bytes}"))
            }
            LedgerEvent::Deliver { uid, flow, .. } => ("deliver", format!("uid={uid} flow={flow}")),
            LedgerEvent::Drop { uid, flow, site, reason, .. } => {
                ("drop", format!("uid={uid} flow={flow} site={} reason={reason}", site.as_str()))
            }
            LedgerEvent::Tx { kind, bytes, ok, receivers, .. } => {
                ("tx", format!("kind={kind} bytes={bytes} ok={} rcv={receivers}", *ok as u8))
            }
            LedgerEvent::Rx { kind, bytes, .. } => ("rx", format!("kind={kind} bytes={bytes}")),
        }
    }

    /// Recovers a ledger event from a trace line; `None` for other line kinds.
    pub fn from_trace(l: &TraceLine) -> Option<LedgerEvent> {
        let t = l.t;
        let node = l.node?;
        Some(match l.ev.as_str() {
            "gen" => LedgerEvent::Gen {
                t,
                uid: l.parse_field("uid")?,
                flow: l.parse_field("flow")?,
                node,
                dst: l.parse_field("dst")?,
                bytes: l.parse_field("bytes")?,
            },
            "deliver" => LedgerEvent::Deliver { t, uid: l.parse_field("uid")?, flow: l.parse_field("flow")?, node },
            "drop" => LedgerEvent::Drop {
                t,
                uid: l.parse_field("uid")?,
                flow: l.parse_field("flow")?,
                node,
                site: match l.get("site")? {
                    "source" => DropSite::Source,
                    "transit" => DropSite::Transit,
                    _ => return None,
                },
                reason: l.get("reason")?.to_string(),
            },
            "tx" => LedgerEvent::Tx {
                t,
                node,
                kind: l.get("kind")?.parse().ok()?,
                bytes: l.parse_field("bytes")?,
                ok: l.get("ok")? == "1",
                receivers: l.parse_field("rcv")?,
            },
            "rx" => LedgerEvent::Rx { t, node, kind: l.get("kind")?.parse().ok()?, bytes: l.parse_field("bytes")? },
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowStats {
    pub src: NodeId,
    pub dst: NodeId,
    pub sent: u64,
    pub delivered: u64,
    pub delay_sum: SimTime,
    pub bytes_delivered: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeCounters {
    pub data_tx_ok: u64,
    pub ctrl_tx_ok: u64,
    pub data_rx: u64,
    pub ctrl_rx: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fate {
    Pending,
    Delivered,
    Dropped(DropSite),
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("packet {0} disposed more than once")]
    Twice(u64),
    #[error("packet {0} disposed but never generated")]
    Unknown(u64),
    #[error("{0} packets have no disposition")]
    Unresolved(usize),
}

#[derive(Clone, Debug, Default)]
pub struct MetricLedger {
    flows: BTreeMap<usize, FlowStats>,
    nodes: BTreeMap<NodeId, NodeCounters>,
    fates: HashMap<u64, (usize, Fate)>,
    ctrl_by_kind: BTreeMap<FrameKind, (u64, u64)>,
    drop_source: u64,
    drop_transit: u64,
    errors: Vec<AuditError>,
}

impl MetricLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ev: &LedgerEvent) {
        match *ev {
            LedgerEvent::Gen { uid, flow, node, dst, .. } => {
                let f = self.flows.entry(flow).or_insert_with(|| FlowStats { src: node, dst, ..Default::default() });
                f.sent += 1;
                self.fates.insert(uid, (flow, Fate::Pending));
            }
            LedgerEvent::Deliver { uid, flow, .. } => {
                if self.settle(uid, Fate::Delivered) {
                    self.flows.entry(flow).or_default().delivered += 1;
                }
            }
            LedgerEvent::Drop { uid, site, .. } => {
                if self.settle(uid, Fate::Dropped(site)) {
                    match site {
                        DropSite::Source => self.drop_source += 1,
                        DropSite::Transit => self.drop_transit += 1,
                    }
                }
            }
            LedgerEvent::Tx { node, kind, bytes, ok, .. } => {
                let c = self.nodes.entry(node).or_default();
                if kind.is_control() {
                    let k = self.ctrl_by_kind.entry(kind).or_default();
                    k.0 += 1;
                    k.1 += bytes as u64;
                    if ok {
                        c.ctrl_tx_ok += 1;
                    }
                } else if ok {
                    c.data_tx_ok += 1;
                }
            }
            LedgerEvent::Rx { node, kind, .. } => {
                let c = self.nodes.entry(node).or_default();
                if kind.is_control() {
                    c.ctrl_rx += 1;
                } else {
                    c.data_rx += 1;
                }
            }
        }
    }

    /// Marks a packet's final fate; false if it was unknown or already settled.
    fn settle(&mut self, uid: u64, fate: Fate) -> bool {
        match self.fates.get_mut(&uid) {
            None => {
                self.errors.push(AuditError::Unknown(uid));
                false
            }
            Some((_, f)) if *f != Fate::Pending => {
                self.errors.push(AuditError::Twice(uid));
                false
            }
            Some((_, f)) => {
                *f = fate;
                true
            }
        }
    }

    pub fn flows(&self) -> &BTreeMap<usize, FlowStats> {
        &self.flows
    }

    pub fn node(&self, n: NodeId) -> NodeCounters {
        self.nodes.get(&n).copied().unwrap_or_default()
    }

    pub fn ctrl_by_kind(&self) -> &BTreeMap<FrameKind, (u64, u64)> {
        &self.ctrl_by_kind
    }

    pub fn audit(&self) -> Result<(), AuditError> {
        if let Some(e) = self.errors.first() {
            return Err(e.clone());
        }
        let open = self.fates.values().filter(|(_, f)| *f == Fate::Pending).count();
        if open > 0 {
            return Err(AuditError::Unresolved(open));
        }
        Ok(())
    }

    pub fn summary(&self, duration: SimTime) -> Summary {
        let sinks: std::collections::BTreeSet<NodeId> = self.flows.values().map(|f| f.dst).collect();
        let sources: std::collections::BTreeSet<NodeId> = self.flows.values().map(|f| f.src).collect();
        let (mut rd, mut rc) = (0, 0);
        for &n in &sinks {
            let c = self.node(n);
            rd += c.data_rx;
            rc += c.ctrl_rx;
        }
        let (mut sd, mut sc) = (0, 0);
        for &n in &sources {
            let c = self.node(n);
            sd += c.data_tx_ok;
            sc += c.ctrl_tx_ok;
        }
        let fd: u64 = self.nodes.values().map(|c| c.data_tx_ok).sum();
        let fc: u64 = self.nodes.values().map(|c| c.ctrl_tx_ok).sum();
        let sent: u64 = self.flows.values().map(|f| f.sent).sum();
        let delivered: u64 = self.flows.values().map(|f| f.delivered).sum();
        let bytes: u64 = self.flows.values().map(|f| f.bytes_delivered).sum();
        let delay_us: u64 = self.flows.values().map(|f| f.delay_sum.as_micros()).sum();
        let (ctrl_pkts, ctrl_bytes) = self.ctrl_by_kind.values().fold((0, 0), |a, v| (a.0 + v.0, a.1 + v.1));
        Summary {
            throughput_kbps: throughput_kbps(bytes, duration),
            pct_delivered: (sent > 0).then(|| 100.0 * delivered as f64 / sent as f64),
            pdf: pdf(self.flows.values().map(|f| (f.sent, f.delivered))),
            avg_delay_ms: (delivered > 0).then(|| delay_us as f64 / delivered as f64 / 1000.0),
            recv_eff: efficiency(rd, rc),
            send_eff: efficiency(sd, sc),
            fwd_eff: efficiency(fd, fc),
            ctrl_pkts,
            ctrl_bytes,
            data_sent: sent,
            data_delivered: delivered,
            drop_source: self.drop_source,
            drop_transit: self.drop_transit,
        }
    }
}

/// Ledger plus creation times, so deliveries can be timed.
#[derive(Clone, Debug, Default)]
pub struct Accountant {
    ledger: MetricLedger,
    created: HashMap<u64, (SimTime, u32)>,
}

impl Accountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ev: &LedgerEvent) {
        let before = self.ledger.flows.get(&flow_of(ev)).map_or(0, |f| f.delivered);
        self.ledger.record(ev);
        match *ev {
            LedgerEvent::Gen { t, uid, bytes, .. } => {
                self.created.insert(uid, (t, bytes));
            }
            LedgerEvent::Deliver { t, uid, flow, .. } => {
                let f = self.ledger.flows.entry(flow).or_default();
                if f.delivered > before {
                    if let Some(&(c, b)) = self.created.get(&uid) {
                        f.delay_sum = f.delay_sum + (t - c);
                        f.bytes_delivered += b as u64;
                    }
                }
            }
            _ => {}
        }
    }

    pub fn ledger(&self) -> &MetricLedger {
        &self.ledger
    }
}

fn flow_of(ev: &LedgerEvent) -> usize {
    match *ev {
        LedgerEvent::Gen { flow, .. } | LedgerEvent::Deliver { flow, .. } | LedgerEvent::Drop { flow, .. } => flow,
        _ => usize::MAX,
    }
}

/// Unweighted mean of per-flow delivery ratios over flows that sent anything.
pub fn pdf(flows: impl IntoIterator<Item = (u64, u64)>) -> Option<f64> {
    let ratios: Vec<f64> = flows.into_iter().filter(|(s, _)| *s > 0).map(|(s, d)| d as f64 / s as f64).collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// `100 * data / (data + ctrl)`, undefined when both are zero.
pub fn efficiency(data: u64, ctrl: u64) -> Option<f64> {
    let total = data + ctrl;
    (total > 0).then(|| 100.0 * data as f64 / total as f64)
}

/// Delivered payload in kilobytes per second.
pub fn throughput_kbps(bytes: u64, duration: SimTime) -> f64 {
    let secs = duration.as_secs_f64();
    if secs == 0.0 {
        0.0
    } else {
        bytes as f64 / secs / 1000.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub throughput_kbps: f64,
    pub pct_delivered: Option<f64>,
    pub pdf: Option<f64>,
    pub avg_delay_ms: Option<f64>,
    pub recv_eff: Option<f64>,
    pub send_eff: Option<f64>,
    pub fwd_eff: Option<f64>,
    pub ctrl_pkts: u64,
    pub ctrl_bytes: u64,
    pub data_sent: u64,
    pub data_delivered: u64,
    pub drop_source: u64,
    pub drop_transit: u64,
}

/// Scenario identity echoed in every result row.
#[derive(Clone, Debug, PartialEq)]
pub struct RunEcho {
    pub protocol: String,
    pub nodes: usize,
    pub speed_class: String,
    pub pause_s: f64,
    pub seed: u64,
    pub duration: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub echo: RunEcho,
    pub summary: Summary,
    pub ctrl_by_kind: BTreeMap<FrameKind, (u64, u64)>,
}

pub const CSV_HEADER: &str = "protocol,nodes,speed_class,pause_s,seed,throughput_kBps,pct_delivered,pdf,avg_delay_ms,recv_eff,send_eff,fwd_eff,ctrl_pkts,ctrl_bytes,data_sent,data_delivered,drop_source,drop_transit";

/// A metric that may be not meaningful.
pub struct Nm(pub Option<f64>);

impl fmt::Display for Nm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.6}"),
            None => f.write_str("NM"),
        }
    }
}

impl RunResult {
    pub fn csv_row(&self) -> String {
        let e = &self.echo;
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{:.6},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.protocol,
            e.nodes,
            e.speed_class,
            e.pause_s,
            e.seed,
            s.throughput_kbps,
            Nm(s.pct_delivered),
            Nm(s.pdf),
            Nm(s.avg_delay_ms),
            Nm(s.recv_eff),
            Nm(s.send_eff),
            Nm(s.fwd_eff),
            s.ctrl_pkts,
            s.ctrl_bytes,
            s.data_sent,
            s.data_delivered,
            s.drop_source,
            s.drop_transit
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    #[test]
    fn pdf_is_unweighted_over_active_flows() {
        // 10 of 20 on one flow, 0 of 0 on another: only the first counts.
        assert_eq!(pdf([(20, 10), (0, 0)]), Some(0.5));
        assert_eq!(pdf([(4, 4), (100, 0)]), Some(0.5));
        assert_eq!(pdf([(0, 0)]), None);
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(efficiency(10, 30), Some(25.0));
        assert_eq!(efficiency(0, 0), None);
        assert_eq!(efficiency(0, 5), Some(0.0));
    }

    #[test]
    fn throughput_example() {
        // 800 packets of 512 B over 200 s.
        assert_eq!(throughput_kbps(800 * 512, t(200.0)), 2.048);
    }

    #[test]
    fn ledger_end_to_end() {
        let mut a = Accountant::new();
        let evs = [
            LedgerEvent::Gen { t: t(0.0), uid: 1, flow: 0, node: 1, dst: 0, bytes: 512 },
            LedgerEvent::Gen { t: t(0.25), uid: 2, flow: 0, node: 1, dst: 0, bytes: 512 },
            LedgerEvent::Tx { t: t(0.01), node: 1, kind: FrameKind::Data, bytes: 524, ok: true, receivers: 1 },
            LedgerEvent::Rx { t: t(0.01), node: 0, kind: FrameKind::Data, bytes: 524 },
            LedgerEvent::Deliver { t: t(0.01), uid: 1, flow: 0, node: 0 },
            LedgerEvent::Tx { t: t(0.3), node: 1, kind: FrameKind::Qry, bytes: 20, ok: false, receivers: 0 },
            LedgerEvent::Drop { t: t(0.3), uid: 2, flow: 0, node: 1, site: DropSite::Source, reason: "x".into() },
        ];
        for e in &evs {
            a.record(e);
        }
        let s = a.ledger().summary(t(1.0));
        assert_eq!(s.data_sent, 2);
        assert_eq!(s.data_delivered, 1);
        assert_eq!(s.pct_delivered, Some(50.0));
        assert_eq!(s.avg_delay_ms, Some(10.0));
        assert_eq!(s.throughput_kbps, 0.512);
        assert_eq!(s.recv_eff, Some(100.0));
        // The QRY had no receiver, so it does not count as sent.
        assert_eq!(s.send_eff, Some(100.0));
        assert_eq!((s.ctrl_pkts, s.ctrl_bytes), (1, 20));
        assert_eq!((s.drop_source, s.drop_transit), (1, 0));
        assert!(a.ledger().audit().is_ok());
    }

    #[test]
    fn audit_catches_double_disposition() {
        let mut a = Accountant::new();
        a.record(&LedgerEvent::Gen { t: t(0.0), uid: 7, flow: 0, node: 1, dst: 0, bytes: 1 });
        a.record(&LedgerEvent::Deliver { t: t(0.1), uid: 7, flow: 0, node: 0 });
        a.record(&LedgerEvent::Drop {
            t: t(0.2),
            uid: 7,
            flow: 0,
            node: 2,
            site: DropSite::Transit,
            reason: "x".into(),
        });
        assert_eq!(a.ledger().audit(), Err(AuditError::Twice(7)));
        let mut b = Accountant::new();
        b.record(&LedgerEvent::Gen { t: t(0.0), uid: 8, flow: 0, node: 1, dst: 0, bytes: 1 });
        assert_eq!(b.ledger().audit(), Err(AuditError::Unresolved(1)));
    }

    #[test]
    fn nm_formatting() {
        assert_eq!(Nm(None).to_string(), "NM");
        assert_eq!(Nm(Some(2.0)).to_string(), "2.000000");
    }

    #[test]
    fn ledger_events_round_trip_through_trace() {
        use crate::trace::{format_line, TraceLine};
        let evs = [
            LedgerEvent::Gen { t: t(1.0), uid: 3, flow: 2, node: 4, dst: 0, bytes: 512 },
            LedgerEvent::Deliver { t: t(1.5), uid: 3, flow: 2, node: 0 },
            LedgerEvent::Drop { t: t(2.0), uid: 4, flow: 2, node: 5, site: DropSite::Transit, reason: "stale".into() },
            LedgerEvent::Tx { t: t(2.5), node: 1, kind: FrameKind::Upd, bytes: 28, ok: true, receivers: 3 },
            LedgerEvent::Rx { t: t(2.5), node: 2, kind: FrameKind::Upd, bytes: 28 },
        ];
        for e in evs {
            let (ev, detail) = e.trace_parts();
            let line = TraceLine::parse(&format_line(e.time(), Some(e.node()), ev, &detail)).unwrap();
            assert_eq!(LedgerEvent::from_trace(&line), Some(e));
        }
    }
}

//! Scenario description, `key = value` file format, and traffic flow planning.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::engine::RngStream;
use crate::medium::FrameSizes;
use crate::mobility::{Position, Trajectory};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    Tora,
    Pdsr,
    /// Source routing without the preemptive extension.
    Dsr,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tora => "tora",
            Protocol::Pdsr => "pdsr",
            Protocol::Dsr => "dsr",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tora" => Ok(Protocol::Tora),
            "pdsr" => Ok(Protocol::Pdsr),
            "dsr" => Ok(Protocol::Dsr),
            _ => Err(format!("unknown protocol '{s}' (expected tora, pdsr or dsr)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpeedClass {
    Slow,
    Fast,
    Custom,
}

impl SpeedClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeedClass::Slow => "slow",
            SpeedClass::Fast => "fast",
            SpeedClass::Custom => "custom",
        }
    }

    /// Speed range in m/s for the named classes.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            SpeedClass::Slow => Some((1.0, 5.0)),
            SpeedClass::Fast => Some((10.0, 20.0)),
            SpeedClass::Custom => None,
        }
    }

    pub fn classify(min: f64, max: f64) -> SpeedClass {
        [SpeedClass::Slow, SpeedClass::Fast]
            .into_iter()
            .find(|c| c.range() == Some((min, max)))
            .unwrap_or(SpeedClass::Custom)
    }
}

impl FromStr for SpeedClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "slow" => Ok(SpeedClass::Slow),
            "fast" => Ok(SpeedClass::Fast),
            _ => Err(format!("unknown speed class '{s}' (expected slow or fast)")),
        }
    }
}

/// Node placement and movement. Only random waypoint is expressible in a
/// scenario file; the other forms are for programmatic construction.
#[derive(Clone, Debug, PartialEq)]
pub enum Placement {
    RandomWaypoint,
    Static(Vec<Position>),
    Scripted(Vec<Trajectory>),
    /// Links given directly; no geometry, so link strength is unavailable.
    Explicit {
        initial: Vec<(NodeId, NodeId)>,
        changes: Vec<(f64, NodeId, NodeId, bool)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSpec {
    pub src: NodeId,
    pub dst: NodeId,
    /// First packet time, seconds.
    pub start: f64,
    /// No packets at or after this time, seconds.
    pub stop: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub protocol: Protocol,
    pub nodes: usize,
    pub area_x: f64,
    pub area_y: f64,
    pub range_m: f64,
    pub bandwidth_bps: u64,
    pub duration_s: f64,
    pub seed: u64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_s: f64,
    pub flows: usize,
    pub flow_src: Option<Vec<NodeId>>,
    pub flow_dst: Option<Vec<NodeId>>,
    pub cbr_payload_bytes: u32,
    pub cbr_interval_s: f64,
    pub pdsr_q_s: f64,
    pub pdsr_t: f64,
    pub ack_timeout_factor: f64,
    pub buffer_packets: usize,
    pub frame_sizes: FrameSizes,
    pub placement: Placement,
    /// Mobility stops at this time (seconds), if set.
    pub freeze_at: Option<f64>,
    /// Replaces the flows derived from `flows`/`flow_src`/`flow_dst`.
    pub flow_plan: Option<Vec<FlowSpec>>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            protocol: Protocol::Tora,
            nodes: 10,
            area_x: 500.0,
            area_y: 500.0,
            range_m: 250.0,
            bandwidth_bps: 2_000_000,
            duration_s: 200.0,
            seed: 1,
            speed_min: 1.0,
            speed_max: 5.0,
            pause_s: 0.0,
            flows: 1,
            flow_src: None,
            flow_dst: None,
            cbr_payload_bytes: 512,
            cbr_interval_s: 0.25,
            pdsr_q_s: 0.1,
            pdsr_t: 1.5,
            ack_timeout_factor: 3.0,
            buffer_packets: 64,
            frame_sizes: FrameSizes::default(),
            placement: Placement::RandomWaypoint,
            freeze_at: None,
            flow_plan: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("unknown key '{key}' at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("expected 'key = value' at line {line}")]
    Syntax { line: usize },
    #[error("duplicate key '{key}' at line {line}")]
    Duplicate { key: String, line: usize },
    #[error("invalid value '{value}' for key '{key}' at line {line}: {msg}")]
    Value { key: String, value: String, line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

const KEYS: &[&str] = &[
    "protocol",
    "nodes",
    "area_x",
    "area_y",
    "range_m",
    "bandwidth_bps",
    "duration_s",
    "seed",
    "speed_min",
    "speed_max",
    "pause_s",
    "flows",
    "flow_src",
    "flow_dst",
    "cbr_payload_bytes",
    "cbr_interval_s",
    "pdsr_q_s",
    "pdsr_T",
    "ack_timeout_factor",
    "buffer_packets",
    "data_header_bytes",
    "addr_bytes",
    "rreq_bytes",
    "rrep_bytes",
    "rerr_bytes",
    "warning_bytes",
    "ack_bytes",
    "qry_bytes",
    "upd_bytes",
    "clr_bytes",
];

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, ScenarioError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ScenarioError::Value {
        key: key.to_string(),
        value: value.to_string(),
        line,
        msg: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<NodeId>, ScenarioError> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_value(key, s, line)).collect()
}

impl Scenario {
    /// Parses and validates a scenario file.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ScenarioError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ScenarioError::UnknownKey { key: key.to_string(), line });
            }
            if !seen.insert(key.to_string()) {
                return Err(ScenarioError::Duplicate { key: key.to_string(), line });
            }
            sc.set(key, value, line)?;
        }
        sc.validate()?;
        Ok(sc)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<(), ScenarioError> {
        let fs = &mut self.frame_sizes;
        match key {
            "protocol" => self.protocol = parse_value(key, v, line)?,
            "nodes" => self.nodes = parse_value(key, v, line)?,
            "area_x" => self.area_x = parse_value(key, v, line)?,
            "area_y" => self.area_y = parse_value(key, v, line)?,
            "range_m" => self.range_m = parse_value(key, v, line)?,
            "bandwidth_bps" => self.bandwidth_bps = parse_value(key, v, line)?,
            "duration_s" => self.duration_s = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "speed_min" => self.speed_min = parse_value(key, v, line)?,
            "speed_max" => self.speed_max = parse_value(key, v, line)?,
            "pause_s" => self.pause_s = parse_value(key, v, line)?,
            "flows" => self.flows = parse_value(key, v, line)?,
            "flow_src" => self.flow_src = Some(parse_list(key, v, line)?),
            "flow_dst" => self.flow_dst = Some(parse_list(key, v, line)?),
            "cbr_payload_bytes" => self.cbr_payload_bytes = parse_value(key, v, line)?,
            "cbr_interval_s" => self.cbr_interval_s = parse_value(key, v, line)?,
            "pdsr_q_s" => self.pdsr_q_s = parse_value(key, v, line)?,
            "pdsr_T" => self.pdsr_t = parse_value(key, v, line)?,
            "ack_timeout_factor" => self.ack_timeout_factor = parse_value(key, v, line)?,
            "buffer_packets" => self.buffer_packets = parse_value(key, v, line)?,
            "data_header_bytes" => fs.data_header = parse_value(key, v, line)?,
            "addr_bytes" => fs.addr = parse_value(key, v, line)?,
            "rreq_bytes" => fs.rreq = parse_value(key, v, line)?,
            "rrep_bytes" => fs.rrep = parse_value(key, v, line)?,
            "rerr_bytes" => fs.rerr = parse_value(key, v, line)?,
            "warning_bytes" => fs.warning = parse_value(key, v, line)?,
            "ack_bytes" => fs.ack = parse_value(key, v, line)?,
            "qry_bytes" => fs.qry = parse_value(key, v, line)?,
            "upd_bytes" => fs.upd = parse_value(key, v, line)?,
            "clr_bytes" => fs.clr = parse_value(key, v, line)?,
            _ => return Err(ScenarioError::UnknownKey { key: key.to_string(), line }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let pos = |name: &str, v: f64| -> Result<(), ScenarioError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        pos("area_x", self.area_x)?;
        pos("area_y", self.area_y)?;
        pos("range_m", self.range_m)?;
        pos("duration_s", self.duration_s)?;
        pos("speed_min", self.speed_min)?;
        pos("cbr_interval_s", self.cbr_interval_s)?;
        pos("pdsr_T", self.pdsr_t)?;
        pos("ack_timeout_factor", self.ack_timeout_factor)?;
        if self.bandwidth_bps == 0 {
            return bad("bandwidth_bps must be positive".into());
        }
        if self.speed_max < self.speed_min || !self.speed_max.is_finite() {
            return bad(format!("speed_max {} is below speed_min {}", self.speed_max, self.speed_min));
        }
        if self.pause_s < 0.0 || self.pdsr_q_s < 0.0 {
            return bad("pause_s and pdsr_q_s must not be negative".into());
        }
        if self.cbr_payload_bytes == 0 || self.buffer_packets == 0 {
            return bad("cbr_payload_bytes and buffer_packets must be positive".into());
        }
        if self.flows > 0 && self.nodes < 2 {
            return bad("flows need at least 2 nodes".into());
        }
        for (name, list) in [("flow_src", &self.flow_src), ("flow_dst", &self.flow_dst)] {
            if let Some(l) = list {
                if l.len() != self.flows {
                    return bad(format!("{name} has {} entries but flows = {}", l.len(), self.flows));
                }
                if let Some(&n) = l.iter().find(|&&n| n >= self.nodes) {
                    return bad(format!("{name} references node {n} but nodes = {}", self.nodes));
                }
            }
        }
        if self.flow_src.is_some() != self.flow_dst.is_some() {
            return bad("flow_src and flow_dst must be given together".into());
        }
        if let (Some(s), Some(d)) = (&self.flow_src, &self.flow_dst) {
            if let Some(i) = (0..s.len()).find(|&i| s[i] == d[i]) {
                return bad(format!("flow {i} has the same source and destination"));
            }
        }
        if let Some(plan) = &self.flow_plan {
            for f in plan {
                if f.src >= self.nodes || f.dst >= self.nodes || f.src == f.dst {
                    return bad(format!("flow {} -> {} is invalid for {} nodes", f.src, f.dst, self.nodes));
                }
            }
        }
        match &self.placement {
            Placement::Static(p) if p.len() != self.nodes => bad("static placement length differs from nodes".into()),
            Placement::Scripted(t) if t.len() != self.nodes => {
                bad("scripted placement length differs from nodes".into())
            }
            Placement::Explicit { initial, changes } => {
                let ids = initial.iter().map(|&(a, b)| (a, b)).chain(changes.iter().map(|&(_, a, b, _)| (a, b)));
                for (a, b) in ids {
                    if a >= self.nodes || b >= self.nodes || a == b {
                        return bad(format!("link {a}-{b} is invalid for {} nodes", self.nodes));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Serializes the file-expressible part of the scenario.
    pub fn emit(&self) -> String {
        let fs = &self.frame_sizes;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("protocol", self.protocol.to_string());
        kv("nodes", self.nodes.to_string());
        kv("area_x", self.area_x.to_string());
        kv("area_y", self.area_y.to_string());
        kv("range_m", self.range_m.to_string());
        kv("bandwidth_bps", self.bandwidth_bps.to_string());
        kv("duration_s", self.duration_s.to_string());
        kv("seed", self.seed.to_string());
        kv("speed_min", self.speed_min.to_string());
        kv("speed_max", self.speed_max.to_string());
        kv("pause_s", self.pause_s.to_string());
        kv("flows", self.flows.to_string());
        let join = |l: &Vec<NodeId>| l.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ");
        if let Some(l) = &self.flow_src {
            kv("flow_src", join(l));
        }
        if let Some(l) = &self.flow_dst {
            kv("flow_dst", join(l));
        }
        kv("cbr_payload_bytes", self.cbr_payload_bytes.to_string());
        kv("cbr_interval_s", self.cbr_interval_s.to_string());
        kv("pdsr_q_s", self.pdsr_q_s.to_string());
        kv("pdsr_T", self.pdsr_t.to_string());
        kv("ack_timeout_factor", self.ack_timeout_factor.to_string());
        kv("buffer_packets", self.buffer_packets.to_string());
        kv("data_header_bytes", fs.data_header.to_string());
        kv("addr_bytes", fs.addr.to_string());
        kv("rreq_bytes", fs.rreq.to_string());
        kv("rrep_bytes", fs.rrep.to_string());
        kv("rerr_bytes", fs.rerr.to_string());
        kv("warning_bytes", fs.warning.to_string());
        kv("ack_bytes", fs.ack.to_string());
        kv("qry_bytes", fs.qry.to_string());
        kv("upd_bytes", fs.upd.to_string());
        kv("clr_bytes", fs.clr.to_string());
        out
    }

    pub fn speed_class(&self) -> SpeedClass {
        SpeedClass::classify(self.speed_min, self.speed_max)
    }

    pub fn set_speed_class(&mut self, c: SpeedClass) {
        if let Some((lo, hi)) = c.range() {
            self.speed_min = lo;
            self.speed_max = hi;
        }
    }

    /// Traffic stops this long before the end so in-flight packets can land.
    pub fn drain_margin(&self) -> f64 {
        (self.duration_s / 2.0).min(1.0)
    }

    /// Resolves the flow list. Random pairs come from the `flows` substream of
    /// the scenario seed, so they do not depend on any other draw.
    pub fn flow_specs(&self) -> Vec<FlowSpec> {
        if let Some(plan) = &self.flow_plan {
            return plan.clone();
        }
        let stop = self.duration_s - self.drain_margin();
        if let (Some(s), Some(d)) = (&self.flow_src, &self.flow_dst) {
            return s.iter().zip(d).map(|(&src, &dst)| FlowSpec { src, dst, start: 0.0, stop }).collect();
        }
        match self.flows {
            0 => Vec::new(),
            1 => vec![FlowSpec { src: 1, dst: 0, start: 0.0, stop }],
            k => {
                let mut rng = RngStream::new(self.seed).substream("flows");
                (0..k)
                    .map(|_| {
                        let src = rng.gen_range(0..self.nodes);
                        let mut dst = rng.gen_range(0..self.nodes - 1);
                        if dst >= src {
                            dst += 1;
                        }
                        let start = rng.gen::<f64>() * self.cbr_interval_s;
                        FlowSpec { src, dst, start, stop }
                    })
                    .collect()
            }
        }
    }

    /// Small-network preset: one flow from node 1 to node 0.
    pub fn single_flow(protocol: Protocol, nodes: usize, speed: SpeedClass, seed: u64) -> Scenario {
        let mut s = Scenario { protocol, nodes, seed, ..Scenario::default() };
        s.set_speed_class(speed);
        s
    }

    /// Larger preset: 50 nodes and 10 random flows, swept over pause time.
    pub fn pause_sweep(protocol: Protocol, pause_s: f64, seed: u64) -> Scenario {
        Scenario { protocol, nodes: 50, flows: 10, pause_s, seed, ..Scenario::default() }
    }
}

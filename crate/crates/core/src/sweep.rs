//! Parameter sweeps over protocol, node count, speed class, pause time and seed.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{Nm, RunResult, Summary, CSV_HEADER};
use crate::scenario::{Protocol, Scenario, SpeedClass};
use crate::sim::run_scenario;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub protocols: Vec<Protocol>,
    pub nodes: Vec<usize>,
    pub speeds: Vec<SpeedClass>,
    pub pauses: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Grid {
    /// A one-point grid taken from `base`, to be widened field by field.
    pub fn around(base: &Scenario) -> Grid {
        Grid {
            protocols: vec![base.protocol],
            nodes: vec![base.nodes],
            speeds: vec![base.speed_class()],
            pauses: vec![base.pause_s],
            seeds: vec![base.seed],
        }
    }

    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::new();
        for &protocol in &self.protocols {
            for &nodes in &self.nodes {
                for &speed in &self.speeds {
                    for &pause_s in &self.pauses {
                        for &seed in &self.seeds {
                            out.push(Point { protocol, nodes, speed, pause_s, seed });
                        }
                    }
                }
            }
        }
        out
    }

    /// The axis used for plot files: the first of pause, nodes, speed that
    /// takes more than one value.
    pub fn x_axis(&self) -> Axis {
        if self.pauses.len() > 1 {
            Axis::Pause
        } else if self.nodes.len() > 1 {
            Axis::Nodes
        } else if self.speeds.len() > 1 {
            Axis::Speed
        } else {
            Axis::Pause
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Pause,
    Nodes,
    Speed,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Pause => "pause_s",
            Axis::Nodes => "nodes",
            Axis::Speed => "speed_class",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub protocol: Protocol,
    pub nodes: usize,
    pub speed: SpeedClass,
    pub pause_s: f64,
    pub seed: u64,
}

impl Point {
    pub fn apply(&self, base: &Scenario) -> Scenario {
        let mut s = base.clone();
        s.protocol = self.protocol;
        s.nodes = self.nodes;
        s.set_speed_class(self.speed);
        s.pause_s = self.pause_s;
        s.seed = self.seed;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub point: Point,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep grid has no {0}")]
    EmptyAxis(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Mean, min and max of one metric over the seeds of a grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Stat { mean, min, max })
    }
}

pub const METRICS: [&str; 9] = [
    "throughput_kBps",
    "pct_delivered",
    "pdf",
    "avg_delay_ms",
    "recv_eff",
    "send_eff",
    "fwd_eff",
    "ctrl_pkts",
    "ctrl_bytes",
];

pub fn metric_values(s: &Summary) -> [Option<f64>; 9] {
    [
        Some(s.throughput_kbps),
        s.pct_delivered,
        s.pdf,
        s.avg_delay_ms,
        s.recv_eff,
        s.send_eff,
        s.fwd_eff,
        Some(s.ctrl_pkts as f64),
        Some(s.ctrl_bytes as f64),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub protocol: String,
    pub nodes: usize,
    pub speed_class: String,
    pub pause_s: f64,
    pub runs: usize,
    pub stats: [Option<Stat>; 9],
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub axis: Axis,
    /// Sorted by (protocol, nodes, speed class, pause, seed).
    pub rows: Vec<RunResult>,
    pub failures: Vec<Failure>,
}

fn row_key(a: &RunResult, b: &RunResult) -> Ordering {
    let (x, y) = (&a.echo, &b.echo);
    (&x.protocol, x.nodes, &x.speed_class)
        .cmp(&(&y.protocol, y.nodes, &y.speed_class))
        .then(x.pause_s.total_cmp(&y.pause_s))
        .then(x.seed.cmp(&y.seed))
}

/// Runs every grid point in parallel with the default runner.
pub fn sweep(base: &Scenario, grid: &Grid) -> Result<SweepReport, SweepError> {
    sweep_with(base, grid, |s| run_scenario(s).map(|o| o.result).map_err(|e| e.to_string()))
}

/// Like [`sweep`] with a custom runner; a runner error or panic becomes a
/// recorded failure for that point.
pub fn sweep_with<F>(base: &Scenario, grid: &Grid, runner: F) -> Result<SweepReport, SweepError>
where
    F: Fn(Scenario) -> Result<RunResult, String> + Sync,
{
    for (name, empty) in [
        ("protocols", grid.protocols.is_empty()),
        ("node counts", grid.nodes.is_empty()),
        ("speed classes", grid.speeds.is_empty()),
        ("pause times", grid.pauses.is_empty()),
        ("seeds", grid.seeds.is_empty()),
    ] {
        if empty {
            return Err(SweepError::EmptyAxis(name));
        }
    }
    let outcomes: Vec<(Point, Result<RunResult, String>)> = grid
        .points()
        .into_par_iter()
        .map(|p| {
            let sc = p.apply(base);
            let r = catch_unwind(AssertUnwindSafe(|| runner(sc))).unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                Err(format!("panicked: {msg}"))
            });
            (p, r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (point, r) in outcomes {
        match r {
            Ok(row) => rows.push(row),
            Err(message) => failures.push(Failure { point, message }),
        }
    }
    rows.sort_by(row_key);
    Ok(SweepReport { axis: grid.x_axis(), rows, failures })
}

impl SweepReport {
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out: Vec<Aggregate> = Vec::new();
        let mut group: Vec<&RunResult> = Vec::new();
        let flush = |group: &mut Vec<&RunResult>, out: &mut Vec<Aggregate>| {
            let Some(first) = group.first() else { return };
            let e = &first.echo;
            let mut stats = [None; 9];
            for (i, st) in stats.iter_mut().enumerate() {
                let vals: Vec<f64> = group.iter().filter_map(|r| metric_values(&r.summary)[i]).collect();
                *st = Stat::of(&vals);
            }
            out.push(Aggregate {
                protocol: e.protocol.clone(),
                nodes: e.nodes,
                speed_class: e.speed_class.clone(),
                pause_s: e.pause_s,
                runs: group.len(),
                stats,
            });
            group.clear();
        };
        for r in &self.rows {
            if let Some(prev) = group.last() {
                let (a, b) = (&prev.echo, &r.echo);
                if (&a.protocol, a.nodes, &a.speed_class, a.pause_s.to_bits())
                    != (&b.protocol, b.nodes, &b.speed_class, b.pause_s.to_bits())
                {
                    flush(&mut group, &mut out);
                }
            }
            group.push(r);
        }
        flush(&mut group, &mut out);
        out
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("protocol,nodes,speed_class,pause_s,runs");
        for m in METRICS {
            let _ = write!(s, ",{m}_mean,{m}_min,{m}_max");
        }
        s.push('\n');
        for a in self.aggregates() {
            let _ = write!(s, "{},{},{},{},{}", a.protocol, a.nodes, a.speed_class, a.pause_s, a.runs);
            for st in a.stats {
                let (mean, min, max) = match st {
                    Some(st) => (Some(st.mean), Some(st.min), Some(st.max)),
                    None => (None, None, None),
                };
                let _ = write!(s, ",{},{},{}", Nm(mean), Nm(min), Nm(max));
            }
            s.push('\n');
        }
        s
    }

    pub fn failures_csv(&self) -> String {
        let mut s = String::from("protocol,nodes,speed_class,pause_s,seed,error\n");
        for f in &self.failures {
            let p = &f.point;
            let msg = f.message.replace([',', '\n'], ";");
            let _ = writeln!(s, "{},{},{},{},{},{}", p.protocol, p.nodes, p.speed.as_str(), p.pause_s, p.seed, msg);
        }
        s
    }

    /// Plot data for one metric: x on the sweep axis, one mean column per
    /// series. Series are the remaining grid coordinates, protocol first.
    pub fn plot_dat(&self, metric: usize) -> String {
        let aggs = self.aggregates();
        let x_of = |a: &Aggregate| match self.axis {
            Axis::Pause => a.pause_s.to_string(),
            Axis::Nodes => a.nodes.to_string(),
            Axis::Speed => a.speed_class.clone(),
        };
        let series_of = |a: &Aggregate| match self.axis {
            Axis::Pause => format!("{}/{}/{}", a.protocol, a.nodes, a.speed_class),
            Axis::Nodes => format!("{}/{}/{}", a.protocol, a.speed_class, a.pause_s),
            Axis::Speed => format!("{}/{}/{}", a.protocol, a.nodes, a.pause_s),
        };
        let mut series: Vec<String> = Vec::new();
        let mut xs: Vec<(f64, String)> = Vec::new();
        for a in &aggs {
            let s = series_of(a);
            if !series.contains(&s) {
                series.push(s);
            }
            let x = x_of(a);
            let order = match self.axis {
                Axis::Pause => a.pause_s,
                Axis::Nodes => a.nodes as f64,
                Axis::Speed => 0.0,
            };
            if !xs.iter().any(|(_, v)| *v == x) {
                xs.push((order, x));
            }
        }
        xs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let mut out = format!("# {} {}\n", METRICS[metric], self.axis.as_str());
        let _ = writeln!(out, "# columns: {} {}", self.axis.as_str(), series.join(" "));
        for (_, x) in xs {
            out.push_str(&x);
            for s in &series {
                let v = aggs
                    .iter()
                    .find(|a| x_of(a) == x && series_of(a) == *s)
                    .and_then(|a| a.stats[metric])
                    .map(|st| st.mean);
                let _ = write!(out, " {}", Nm(v));
            }
            out.push('\n');
        }
        out
    }

    /// Writes results.csv, summary.csv, failures.csv and one
    /// plot_<metric>.dat per metric into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SweepError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), self.results_csv())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("failures.csv"), self.failures_csv())?;
        for (i, m) in METRICS.iter().enumerate() {
            fs::write(dir.join(format!("plot_{m}.dat")), self.plot_dat(i))?;
        }
        Ok(())
    }
}

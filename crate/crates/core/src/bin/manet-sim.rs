use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use manet_sim::metrics::CSV_HEADER;
use manet_sim::sim::{replay, Simulation};
use manet_sim::sweep::{sweep, Grid};
use manet_sim::trace::{read_trace, TraceSink};
use manet_sim::{Protocol, Scenario, SpeedClass};

#[derive(Parser)]
#[command(name = "manet-sim", version, about = "Ad hoc network routing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and print its CSV row.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of scenarios and write CSV and plot tables.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        speed: Vec<SpeedClass>,
        #[arg(long, value_delimiter = ',')]
        pause: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Defaults to the scenario's protocol.
        #[arg(long, value_delimiter = ',')]
        protocols: Vec<Protocol>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the metrics of a recorded trace.
    Replay { trace: PathBuf },
}

fn load(path: &PathBuf) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_csv(out: Option<&PathBuf>, body: &str) -> io::Result<()> {
    match out {
        Some(p) => fs::write(p, body),
        None => io::stdout().write_all(body.as_bytes()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Run { scenario, seed, trace, out } => {
            let mut sc = load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let mut sim = Simulation::new(sc).map_err(|e| e.to_string())?;
            if let Some(p) = &trace {
                let f = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
                sim = sim.with_trace(TraceSink::Writer(Box::new(BufWriter::new(f))));
            }
            let o = sim.run().map_err(|e| e.to_string())?;
            if let Err(e) = &o.audit {
                return Err(format!("packet audit failed: {e}"));
            }
            write_csv(out.as_ref(), &format!("{CSV_HEADER}\n{}\n", o.result.csv_row())).map_err(|e| e.to_string())
        }
        Cmd::Sweep { scenario, nodes, speed, pause, seeds, protocols, out } => {
            let base = load(&scenario)?;
            let mut grid = Grid::around(&base);
            grid.seeds = seeds;
            if !nodes.is_empty() {
                grid.nodes = nodes;
            }
            if !speed.is_empty() {
                grid.speeds = speed;
            }
            if !pause.is_empty() {
                grid.pauses = pause;
            }
            if !protocols.is_empty() {
                grid.protocols = protocols;
            }
            let report = sweep(&base, &grid).map_err(|e| e.to_string())?;
            report.write_to(&out).map_err(|e| e.to_string())?;
            eprintln!("{} rows, {} failures, written to {}", report.rows.len(), report.failures.len(), out.display());
            for f in &report.failures {
                eprintln!("failed: {:?}: {}", f.point, f.message);
            }
            Ok(())
        }
        Cmd::Replay { trace } => {
            let f = File::open(&trace).map_err(|e| format!("{}: {e}", trace.display()))?;
            let lines = read_trace(BufReader::new(f)).map_err(|e| e.to_string())?;
            let r = replay(&lines).map_err(|e| e.to_string())?;
            write_csv(None, &format!("{CSV_HEADER}\n{}\n", r.csv_row())).map_err(|e| e.to_string())
        }
    }
}

//! Writes a run's trace to disk, reads it back and recomputes the metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use manet_sim::sim::{replay, Simulation};
use manet_sim::trace::{read_trace, TraceSink};
use manet_sim::{Protocol, Scenario, SpeedClass};

fn main() {
    let path = std::env::temp_dir().join("manet-sim-replay.trace");
    let sc = Scenario::single_flow(Protocol::Pdsr, 30, SpeedClass::Fast, 5);
    let sink = TraceSink::Writer(Box::new(BufWriter::new(File::create(&path).unwrap())));
    let out = Simulation::new(sc).unwrap().with_trace(sink).run().unwrap();

    let lines = read_trace(BufReader::new(File::open(&path).unwrap())).unwrap();
    let again = replay(&lines).unwrap();
    println!("trace: {} ({} lines)", path.display(), lines.len());
    println!("live:   {}", out.result.csv_row());
    println!("replay: {}", again.csv_row());
    println!("identical: {}", again.csv_row() == out.result.csv_row());
    for (kind, (pkts, bytes)) in &again.ctrl_by_kind {
        println!("  {kind:5} {pkts:6} frames {bytes:8} bytes");
    }
}

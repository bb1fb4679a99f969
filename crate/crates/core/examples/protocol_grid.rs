//! The eight-row grid: {TORA, PDSR} x {10, 30 nodes} x {slow, fast}.
//! Pass a directory to also write results, summary and plot files.

use manet_sim::metrics::CSV_HEADER;
use manet_sim::sweep::{sweep, Grid};
use manet_sim::{Protocol, Scenario, SpeedClass};

fn main() {
    let base = Scenario::single_flow(Protocol::Tora, 10, SpeedClass::Slow, 1);
    let grid = Grid {
        protocols: vec![Protocol::Tora, Protocol::Pdsr],
        nodes: vec![10, 30],
        speeds: vec![SpeedClass::Slow, SpeedClass::Fast],
        pauses: vec![0.0],
        seeds: vec![1],
    };
    let report = sweep(&base, &grid).expect("non-empty grid");
    println!("{CSV_HEADER}");
    for r in &report.rows {
        println!("{}", r.csv_row());
    }
    if let Some(dir) = std::env::args().nth(1) {
        report.write_to(dir.as_ref()).expect("writable output directory");
        eprintln!("wrote {dir}");
    }
}

//! Link reversal on a six-node DAG: a single failure re-orients one node,
//! a failure that cuts the destination off ends in a clear.

use manet_sim::engine::SimTime;
use manet_sim::scenario::Placement;
use manet_sim::sim::Simulation;
use manet_sim::tora::{show, Height};
use manet_sim::trace::TraceSink;
use manet_sim::{Protocol, Scenario};

const LINKS: [(usize, usize); 6] = [(0, 1), (1, 2), (1, 4), (2, 3), (3, 5), (4, 5)];
const DELTAS: [i64; 6] = [0, 1, 2, 4, 2, 3];
const NAMES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

fn scenario(cut: (usize, usize)) -> Simulation {
    let sc = Scenario {
        protocol: Protocol::Tora,
        nodes: 6,
        flows: 0,
        duration_s: 2.0,
        placement: Placement::Explicit { initial: LINKS.to_vec(), changes: vec![(1.0, cut.0, cut.1, false)] },
        ..Scenario::default()
    };
    let mut sim = Simulation::new(sc).unwrap().with_trace(TraceSink::Memory(Vec::new()));
    let r = sim.tora_mut().unwrap();
    let h = |n: usize| Height::new(SimTime::ZERO, 0, false, DELTAS[n], n);
    for n in 0..6 {
        let nbrs: Vec<_> = r.node(n).links().iter().map(|&m| (m, Some(h(m)))).collect();
        r.node_mut(n).preset(0, Some(h(n)), &nbrs);
    }
    sim
}

fn run(title: &str, cut: (usize, usize)) {
    println!("== {title}: cut {}-{} at t=1", NAMES[cut.0], NAMES[cut.1]);
    let mut sim = scenario(cut);
    sim.run_until(SimTime::from_secs_f64(2.0));
    for (n, name) in NAMES.iter().enumerate() {
        let node = sim.tora().unwrap().node(n);
        let down: Vec<&str> = node.downstream(0).iter().map(|&m| NAMES[m]).collect();
        println!("  {name} height {} downstream {:?}", show(node.height(0)), down);
    }
    let out = sim.run().unwrap();
    for l in out.trace.iter().filter(|l| l.contains("kind=UPD") || l.contains("kind=CLR") || l.contains("ev=partition"))
    {
        if l.contains("ev=tx") || l.contains("ev=partition") {
            println!("  {l}");
        }
    }
}

fn main() {
    run("single failure", (5, 4));
    run("partition", (0, 1));
}

//! Preemptive source routing: an intermediate node drifts out of range,
//! the weakening link triggers a warning, the source duplicates onto the
//! backup and switches once the destination acknowledges it.

use manet_sim::mobility::{Position, Trajectory};
use manet_sim::scenario::Placement;
use manet_sim::sim::run_traced;
use manet_sim::{Protocol, Scenario};

fn scenario(threshold: f64) -> Scenario {
    let p = |x: f64, y: f64| Position::new(50.0 + x, 150.0 + y);
    // D=0, S=1, M=2 (drifts up at 2 m/s), N=3 (backup relay)
    let trajs = vec![
        Trajectory::stationary(p(300.0, 0.0)),
        Trajectory::stationary(p(0.0, 0.0)),
        Trajectory::starting_at(p(130.0, 100.0)).then(p(130.0, 340.0), 2.0, f64::INFINITY),
        Trajectory::stationary(p(150.0, -120.0)),
    ];
    Scenario {
        protocol: Protocol::Pdsr,
        nodes: 4,
        duration_s: 60.0,
        pdsr_t: threshold,
        placement: Placement::Scripted(trajs),
        ..Scenario::default()
    }
}

fn main() {
    let keep = [
        "ev=rrep",
        "ev=route",
        "ev=warn",
        "ev=both",
        "ev=ack_req",
        "ev=ack_send",
        "ev=switch",
        "ev=drop",
        "ev=link a=0 b=2",
        "ev=link a=1 b=2",
    ];
    for t in [1.5, 0.9] {
        let out = run_traced(scenario(t)).unwrap();
        println!("== threshold {t}");
        for l in out.trace.iter().filter(|l| keep.iter().any(|k| l.contains(k))) {
            println!("  {l}");
        }
        let s = &out.result.summary;
        println!("  delivered {}/{}, dropped in transit {}", s.data_delivered, s.data_sent, s.drop_transit);
    }
}

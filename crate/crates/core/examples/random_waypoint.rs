//! Random-waypoint trajectories and the exact link up/down events they imply.

use manet_sim::engine::{RngStream, SimTime};
use manet_sim::mobility::{link_events, links_at, Field, SpeedRange, Trajectory};

fn main() {
    let field = Field { width: 500.0, height: 500.0 };
    let speed = SpeedRange::new(10.0, 20.0).unwrap();
    let root = RngStream::new(7);
    let trajs: Vec<Trajectory> = (0..8)
        .map(|i| Trajectory::random_waypoint(&mut root.substream(&format!("mobility/{i}")), field, speed, 2.0, 60.0))
        .collect();

    for (i, t) in trajs.iter().enumerate() {
        let p = t.position_at_secs(30.0);
        println!(
            "node {i}: {} legs, at t=30 ({:.1}, {:.1}) moving {:.2} m/s",
            t.legs().len(),
            p.x,
            p.y,
            t.speed_at_secs(30.0)
        );
    }

    let range = 250.0;
    println!("links at t=0: {:?}", links_at(&trajs, range, 0.0));
    let events = link_events(&trajs, range, SimTime::from_secs_f64(60.0));
    println!("{} link changes in 60 s; first ten:", events.len());
    for e in events.iter().take(10) {
        println!("  {}  {}-{} {}", e.time, e.a, e.b, if e.up { "up" } else { "down" });
    }
}

//! The event kernel: time-ordered dispatch, FIFO ties, cancellation and
//! named random sub-streams.

use manet_sim::engine::{RngStream, Scheduler, SimTime};
use rand::Rng;

fn main() {
    let mut s: Scheduler<&str> = Scheduler::new();
    s.schedule(SimTime::from_millis(20), "late").unwrap();
    s.schedule(SimTime::from_millis(10), "first tie").unwrap();
    s.schedule(SimTime::from_millis(10), "second tie").unwrap();
    let doomed = s.schedule_in(SimTime::from_millis(15), "cancelled");
    s.cancel(doomed);

    while let Some((t, e)) = s.pop_until(SimTime::from_secs_f64(1.0)) {
        println!("{t}  {e}");
    }
    println!("pending after run: {}", s.pending());

    // Sub-streams depend only on the seed and the label.
    let root = RngStream::new(42);
    let a: u32 = root.substream("mobility/0").gen();
    let b: u32 = RngStream::new(42).substream("mobility/0").gen();
    let c: u32 = root.substream("flows").gen();
    println!("mobility/0 -> {a} (again {b}), flows -> {c}");
}

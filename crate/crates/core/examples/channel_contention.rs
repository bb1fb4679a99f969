//! The shared medium: nodes that share a neighbour take turns, distant
//! nodes transmit at once, and a unicast fails if its link drops mid-frame.

use manet_sim::engine::SimTime;
use manet_sim::medium::{Body, Completion, DataPacket, Dest, Frame, FrameSizes, Medium, Topology};

fn data(uid: u64, sender: usize, to: usize) -> Frame {
    let body = Body::Data(DataPacket::new(uid, 0, sender, to, 512, SimTime::ZERO));
    Frame { uid, sender, dest: Dest::Unicast(to), size: FrameSizes::default().size_of(&body), body }
}

fn main() {
    // Chain 0-1-2-3-4: 0 and 2 share neighbour 1, 0 and 3 share nothing.
    let topo = Topology::with_links(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
    let mut m = Medium::new(topo, 2_000_000);
    let t0 = SimTime::ZERO;
    for (uid, (s, d)) in [(0, 1), (3, 4), (2, 1)].into_iter().enumerate() {
        let grants = m.submit(data(uid as u64, s, d), t0);
        println!("node {s} asks to send to {d}: {grants:?}");
    }
    println!("airtime of a 524-byte frame: {}", m.tx_time(524));

    let first_done = t0 + m.tx_time(524);
    for s in [0, 3] {
        let (c, next) = m.complete(s, first_done);
        if let Completion::Delivered { to, .. } = c {
            println!("{first_done}: node {s} delivered to {to}; now granted {next:?}");
        }
    }
    // Node 2's link to 1 drops while it is on the air.
    m.set_link(1, 2, false, first_done + SimTime::from_micros(100));
    let (c, _) = m.complete(2, first_done + m.tx_time(524));
    if let Completion::Failed { next_hop, .. } = c {
        println!("node 2's frame to {next_hop} failed: link went down mid-frame");
    }
}

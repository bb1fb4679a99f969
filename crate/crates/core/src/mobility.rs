//! Random-waypoint movement and exact link up/down event extraction.
//!
//! A [`Trajectory`] is a list of legs. Each leg starts at a position and time,
//! travels in a straight line to its waypoint at constant speed and then rests
//! for the waypoint's pause. Because every leg is linear in time, the distance
//! between two nodes on a common time slice is the norm of a linear function,
//! and range crossings are the roots of a quadratic.

use rand::Rng;
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance_sq(self, other: Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn distance(self, other: Position) -> f64 {
        self.distance_sq(other).sqrt()
    }
}

/// Rectangular simulation area anchored at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Field {
    pub width: f64,
    pub height: f64,
}

impl Field {
    pub fn contains(&self, p: Position) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedRange {
    min: f64,
    max: f64,
}

impl SpeedRange {
    pub fn new(min: f64, max: f64) -> Result<Self, MobilityError> {
        if min <= 0.0 || !min.is_finite() {
            return Err(MobilityError::NonPositiveSpeed(min));
        }
        if max < min || !max.is_finite() {
            return Err(MobilityError::InvertedSpeedRange { min, max });
        }
        Ok(SpeedRange { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MobilityError {
    #[error("speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("speed range max {max} is below min {min}")]
    InvertedSpeedRange { min: f64, max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub destination: Position,
    /// Meters per second, always positive.
    pub speed: f64,
    /// Rest time at the destination in seconds; may be infinite.
    pub pause: f64,
}

/// Draws the next random-waypoint target: uniform destination over the
/// field, uniform speed over the range, fixed pause.
pub fn next_waypoint<R: Rng + ?Sized>(rng: &mut R, field: Field, speed: SpeedRange, pause: f64) -> Waypoint {
    let destination = Position::new(rng.gen::<f64>() * field.width, rng.gen::<f64>() * field.height);
    let speed = if speed.max > speed.min { rng.gen_range(speed.min..=speed.max) } else { speed.min };
    Waypoint { destination, speed, pause: pause.max(0.0) }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leg {
    pub start: Position,
    /// Seconds.
    pub start_time: f64,
    pub waypoint: Waypoint,
}

impl Leg {
    pub fn travel_time(&self) -> f64 {
        self.start.distance(self.waypoint.destination) / self.waypoint.speed
    }

    pub fn arrival(&self) -> f64 {
        self.start_time + self.travel_time()
    }

    pub fn end(&self) -> f64 {
        self.arrival() + self.waypoint.pause
    }

    fn velocity(&self) -> (f64, f64) {
        let d = self.start.distance(self.waypoint.destination);
        if d == 0.0 {
            return (0.0, 0.0);
        }
        let k = self.waypoint.speed / d;
        ((self.waypoint.destination.x - self.start.x) * k, (self.waypoint.destination.y - self.start.y) * k)
    }
}

/// One linear piece of a trajectory: position `origin + velocity * (t - t0)`
/// for `t` in `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub origin: Position,
    pub velocity: (f64, f64),
}

impl Segment {
    fn at(&self, t: f64) -> Position {
        let dt = t - self.t0;
        Position::new(self.origin.x + self.velocity.0 * dt, self.origin.y + self.velocity.1 * dt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    legs: Vec<Leg>,
}

impl Trajectory {
    /// A node that never moves.
    pub fn stationary(at: Position) -> Self {
        Trajectory {
            legs: vec![Leg {
                start: at,
                start_time: 0.0,
                waypoint: Waypoint { destination: at, speed: 1.0, pause: f64::INFINITY },
            }],
        }
    }

    /// Starts a scripted trajectory at `at` (time zero); extend with [`Trajectory::then`].
    pub fn starting_at(at: Position) -> Self {
        Trajectory { legs: vec![] }.with_anchor(at)
    }

    fn with_anchor(mut self, at: Position) -> Self {
        self.legs.push(Leg {
            start: at,
            start_time: 0.0,
            waypoint: Waypoint { destination: at, speed: 1.0, pause: 0.0 },
        });
        self
    }

    /// Rests where the trajectory currently ends for `secs` seconds.
    pub fn rest(mut self, secs: f64) -> Self {
        let last = *self.legs.last().expect("trajectory has at least one leg");
        let at = last.waypoint.destination;
        self.legs.push(Leg {
            start: at,
            start_time: last.end(),
            waypoint: Waypoint { destination: at, speed: 1.0, pause: secs },
        });
        self
    }

    /// Appends a straight move to `dest` at `speed`, followed by `pause` seconds of rest.
    pub fn then(mut self, dest: Position, speed: f64, pause: f64) -> Self {
        assert!(speed > 0.0, "leg speed must be positive");
        let last = *self.legs.last().expect("trajectory has at least one leg");
        self.legs.push(Leg {
            start: last.waypoint.destination,
            start_time: last.end(),
            waypoint: Waypoint { destination: dest, speed, pause },
        });
        self
    }

    /// Random-waypoint trajectory covering `[0, horizon]`: uniform start
    /// position, movement begins at time zero with no initial pause.
    pub fn random_waypoint(rng: &mut RngStream, field: Field, speed: SpeedRange, pause: f64, horizon: f64) -> Self {
        let mut at = Position::new(rng.gen::<f64>() * field.width, rng.gen::<f64>() * field.height);
        let mut t = 0.0;
        let mut legs = Vec::new();
        loop {
            let waypoint = next_waypoint(rng, field, speed, pause);
            let leg = Leg { start: at, start_time: t, waypoint };
            legs.push(leg);
            t = leg.end();
            at = waypoint.destination;
            if t > horizon {
                break;
            }
        }
        Trajectory { legs }
    }

    pub fn legs(&self) -> &[Leg] {
        &self.legs
    }

    /// Stops all movement at `t`; the node stays where it was at that instant.
    pub fn frozen_after(&self, t: f64) -> Self {
        let at = self.position_at_secs(t);
        let mut legs: Vec<Leg> = self.legs.iter().copied().filter(|l| l.start_time < t).collect();
        match legs.last_mut() {
            None => return Trajectory::stationary(at),
            Some(last) => {
                if last.arrival() > t {
                    last.waypoint.destination = at;
                }
                last.waypoint.pause = f64::INFINITY;
            }
        }
        Trajectory { legs }
    }

    pub fn position_at(&self, t: SimTime) -> Position {
        self.position_at_secs(t.as_secs_f64())
    }

    pub fn position_at_secs(&self, t: f64) -> Position {
        let idx = match self.legs.iter().rposition(|l| l.start_time <= t) {
            Some(i) => i,
            None => return self.legs[0].start,
        };
        position_on_leg(&self.legs[idx], t)
    }

    /// Current speed; zero while resting.
    pub fn speed_at_secs(&self, t: f64) -> f64 {
        match self.legs.iter().rposition(|l| l.start_time <= t) {
            Some(i) => {
                let leg = &self.legs[i];
                if t < leg.arrival() && leg.travel_time() > 0.0 {
                    leg.waypoint.speed
                } else {
                    0.0
                }
            }
            None => 0.0,
        }
    }

    /// Piecewise-linear decomposition over `[0, horizon]`.
    pub fn segments(&self, horizon: f64) -> Vec<Segment> {
        let mut out = Vec::new();
        for (i, leg) in self.legs.iter().enumerate() {
            if leg.start_time > horizon {
                break;
            }
            let next_start = self.legs.get(i + 1).map_or(f64::INFINITY, |l| l.start_time);
            let arrival = leg.arrival().min(next_start);
            if arrival > leg.start_time {
                out.push(Segment {
                    t0: leg.start_time,
                    t1: arrival.min(horizon),
                    origin: leg.start,
                    velocity: leg.velocity(),
                });
            }
            let rest_end = leg.end().min(next_start).min(horizon);
            if rest_end > arrival && arrival < horizon {
                out.push(Segment {
                    t0: arrival,
                    t1: rest_end,
                    origin: position_on_leg(leg, arrival),
                    velocity: (0.0, 0.0),
                });
            }
        }
        if out.is_empty() {
            out.push(Segment { t0: 0.0, t1: horizon, origin: self.legs[0].start, velocity: (0.0, 0.0) });
        }
        // Cover the tail if the last leg ends before the horizon.
        let last = *out.last().unwrap();
        if last.t1 < horizon {
            out.push(Segment { t0: last.t1, t1: horizon, origin: last.at(last.t1), velocity: (0.0, 0.0) });
        }
        out
    }
}

fn position_on_leg(leg: &Leg, t: f64) -> Position {
    let travel = leg.travel_time();
    let dt = t - leg.start_time;
    if dt >= travel || travel == 0.0 {
        return leg.waypoint.destination;
    }
    let frac = dt / travel;
    Position::new(
        leg.start.x + (leg.waypoint.destination.x - leg.start.x) * frac,
        leg.start.y + (leg.waypoint.destination.y - leg.start.y) * frac,
    )
}

/// A change of the in-range predicate for an unordered node pair (`a < b`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LinkEvent {
    pub time: SimTime,
    pub a: NodeId,
    pub b: NodeId,
    pub up: bool,
}

/// Pairs in range at time `t` (inclusive boundary), each with `a < b`.
pub fn links_at(trajectories: &[Trajectory], range: f64, t: f64) -> Vec<(NodeId, NodeId)> {
    let positions: Vec<Position> = trajectories.iter().map(|tr| tr.position_at_secs(t)).collect();
    let r2 = range * range;
    let mut out = Vec::new();
    for a in 0..positions.len() {
        for b in a + 1..positions.len() {
            if positions[a].distance_sq(positions[b]) <= r2 {
                out.push((a, b));
            }
        }
    }
    out
}

// Crossings closer than this (seconds) to a segment boundary are snapped to it.
const SNAP: f64 = 1e-9;

/// Exact range-crossing events over `(0, horizon]`, sorted by time then pair.
///
/// The state at time zero is given by [`links_at`]; an event is emitted only
/// when the in-range predicate actually changes, after rounding to the
/// microsecond grid.
pub fn link_events(trajectories: &[Trajectory], range: f64, horizon: SimTime) -> Vec<LinkEvent> {
    assert!(range > 0.0, "range must be positive");
    let horizon_s = horizon.as_secs_f64();
    let segments: Vec<Vec<Segment>> = trajectories.iter().map(|t| t.segments(horizon_s)).collect();
    let mut events = Vec::new();
    for a in 0..trajectories.len() {
        for b in a + 1..trajectories.len() {
            pair_events(&segments[a], &segments[b], a, b, range, horizon_s, &mut events);
        }
    }
    events.sort();
    events
}

fn pair_events(
    sa: &[Segment],
    sb: &[Segment],
    a: NodeId,
    b: NodeId,
    range: f64,
    horizon: f64,
    out: &mut Vec<LinkEvent>,
) {
    let r2 = range * range;
    let mut raw: Vec<(f64, bool)> = Vec::new();
    let start_gap = sa[0].at(0.0);
    let other = sb[0].at(0.0);
    let mut up = start_gap.distance_sq(other) <= r2;
    let initial = up;

    let (mut i, mut j) = (0, 0);
    let mut t = 0.0;
    while i < sa.len() && j < sb.len() && t < horizon {
        let end = sa[i].t1.min(sb[j].t1).min(horizon);
        if end > t {
            let pa = sa[i].at(t);
            let pb = sb[j].at(t);
            let d = (pa.x - pb.x, pa.y - pb.y);
            let w = (sa[i].velocity.0 - sb[j].velocity.0, sa[i].velocity.1 - sb[j].velocity.1);
            let len = end - t;
            let ww = w.0 * w.0 + w.1 * w.1;
            let dw = d.0 * w.0 + d.1 * w.1;
            let dd = d.0 * d.0 + d.1 * d.1;
            // In-range sub-interval [lo, hi] relative to t, or None.
            let inside = if ww == 0.0 {
                if dd <= r2 {
                    Some((f64::NEG_INFINITY, f64::INFINITY))
                } else {
                    None
                }
            } else {
                let disc = dw * dw - ww * (dd - r2);
                if disc < 0.0 {
                    None
                } else {
                    let sq = disc.sqrt();
                    Some(((-dw - sq) / ww, (-dw + sq) / ww))
                }
            };
            match inside {
                Some((lo, hi)) if hi >= -SNAP && lo <= len + SNAP && hi - lo > SNAP => {
                    let lo_c = lo.max(0.0);
                    if lo_c > SNAP {
                        if up {
                            raw.push((t, false));
                        }
                        raw.push((t + lo_c, true));
                        up = true;
                    } else if !up {
                        raw.push((t, true));
                        up = true;
                    }
                    if hi < len - SNAP {
                        raw.push((t + hi, false));
                        up = false;
                    }
                }
                _ => {
                    if up {
                        raw.push((t, false));
                        up = false;
                    }
                }
            }
        }
        t = end;
        if sa[i].t1 <= end {
            i += 1;
        }
        if sb[j].t1 <= end {
            j += 1;
        }
    }

    // Round to microseconds and collapse flaps that vanish on the grid.
    let mut state = initial;
    let mut pending: Vec<(SimTime, bool)> = Vec::new();
    for (time, new_up) in raw {
        let time = SimTime::from_secs_f64(time);
        if let Some(&(last_t, _)) = pending.last() {
            if last_t == time {
                pending.pop();
                state = !state;
            }
        }
        if new_up != state {
            if time > SimTime::ZERO {
                pending.push((time, new_up));
            }
            state = new_up;
        }
    }
    out.extend(pending.into_iter().map(|(time, up)| LinkEvent { time, a, b, up }));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn secs(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    #[test]
    fn degenerate_speed_range_is_exact() {
        let mut rng = RngStream::new(7);
        let field = Field { width: 500.0, height: 500.0 };
        let range = SpeedRange::new(5.0, 5.0).unwrap();
        for _ in 0..20 {
            assert_eq!(next_waypoint(&mut rng, field, range, 0.0).speed, 5.0);
        }
    }

    #[test]
    fn inverted_speed_range_rejected() {
        assert_eq!(SpeedRange::new(5.0, 1.0), Err(MobilityError::InvertedSpeedRange { min: 5.0, max: 1.0 }));
        assert!(SpeedRange::new(0.0, 1.0).is_err());
    }

    #[test]
    fn destination_mean_is_field_centre() {
        // Uniform on [0, 500]: sd = 500 / sqrt(12); standard error of the mean
        // over n draws is sd / sqrt(n).
        let n = 10_000;
        let mut rng = RngStream::new(11);
        let field = Field { width: 500.0, height: 500.0 };
        let speed = SpeedRange::new(1.0, 5.0).unwrap();
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let w = next_waypoint(&mut rng, field, speed, 0.0);
            assert!(field.contains(w.destination));
            sx += w.destination.x;
            sy += w.destination.y;
        }
        let se = 500.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((sx / n as f64 - 250.0).abs() < 3.0 * se);
        assert!((sy / n as f64 - 250.0).abs() < 3.0 * se);
    }

    #[test]
    fn zero_pause_never_rests() {
        let mut rng = RngStream::new(3);
        let field = Field { width: 500.0, height: 500.0 };
        let tr = Trajectory::random_waypoint(&mut rng, field, SpeedRange::new(1.0, 5.0).unwrap(), 0.0, 200.0);
        for leg in tr.legs() {
            assert_eq!(leg.waypoint.pause, 0.0);
        }
        for k in 0..200 {
            let t = k as f64 + 0.5;
            assert!(tr.speed_at_secs(t) > 0.0);
        }
    }

    #[test]
    fn interpolation_midpoint_and_pause_clamp() {
        let tr = Trajectory::starting_at(Position::new(0.0, 0.0)).then(Position::new(100.0, 0.0), 10.0, 4.0);
        assert_eq!(tr.position_at(secs(5.0)), Position::new(50.0, 0.0));
        // travel 10 s, pause 4 s: mid-pause
        assert_eq!(tr.position_at(secs(12.0)), Position::new(100.0, 0.0));
        assert_eq!(tr.speed_at_secs(12.0), 0.0);
    }

    #[test]
    fn interpolation_three_four_five() {
        let tr = Trajectory::starting_at(Position::new(0.0, 0.0)).then(Position::new(30.0, 40.0), 5.0, 0.0);
        let p = tr.position_at(secs(5.0));
        assert!((p.x - 15.0).abs() < 1e-12 && (p.y - 20.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_pair_has_no_events() {
        let trs =
            vec![Trajectory::stationary(Position::new(0.0, 0.0)), Trajectory::stationary(Position::new(100.0, 0.0))];
        assert!(link_events(&trs, 250.0, secs(100.0)).is_empty());
        assert_eq!(links_at(&trs, 250.0, 0.0), vec![(0, 1)]);
    }

    #[test]
    fn receding_node_goes_down_then_up_on_return() {
        // |x_B(t)| = 200 + 10 t = 250  =>  t = 5 s; return leg starts at 10 s
        // from x = 300 heading back: 300 - 10 (t - 10) = 250  =>  t = 15 s.
        let trs = vec![
            Trajectory::stationary(Position::new(0.0, 0.0)),
            Trajectory::starting_at(Position::new(200.0, 0.0)).then(Position::new(300.0, 0.0), 10.0, 0.0).then(
                Position::new(200.0, 0.0),
                10.0,
                f64::INFINITY,
            ),
        ];
        let ev = link_events(&trs, 250.0, secs(100.0));
        assert_eq!(
            ev,
            vec![
                LinkEvent { time: secs(5.0), a: 0, b: 1, up: false },
                LinkEvent { time: secs(15.0), a: 0, b: 1, up: true },
            ]
        );
    }

    #[test]
    fn frozen_trajectory_stops() {
        let tr = Trajectory::starting_at(Position::new(0.0, 0.0)).then(Position::new(100.0, 0.0), 10.0, 0.0);
        let fz = tr.frozen_after(3.0);
        assert_eq!(fz.position_at_secs(3.0), Position::new(30.0, 0.0));
        assert_eq!(fz.position_at_secs(50.0), Position::new(30.0, 0.0));
        assert_eq!(fz.speed_at_secs(5.0), 0.0);
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        (any::<u64>(), 0.0f64..20.0).prop_map(|(seed, pause)| {
            let mut rng = RngStream::new(seed);
            let field = Field { width: 500.0, height: 500.0 };
            Trajectory::random_waypoint(&mut rng, field, SpeedRange::new(1.0, 20.0).unwrap(), pause, 60.0)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn predicate_constant_between_events(
            trs in proptest::collection::vec(arb_trajectory(), 2..5),
            probes in proptest::collection::vec(0.0f64..60.0, 30),
        ) {
            let horizon = secs(60.0);
            let events = link_events(&trs, 250.0, horizon);
            for w in events.windows(2) {
                prop_assert!(w[0].time <= w[1].time);
            }
            let initial = links_at(&trs, 250.0, 0.0);
            for t in probes {
                let tt = SimTime::from_secs_f64(t);
                // Skip probes within 2 us of an event on the same pair.
                for a in 0..trs.len() {
                    for b in a + 1..trs.len() {
                        let near = events.iter().any(|e| e.a == a && e.b == b
                            && e.time.as_micros().abs_diff(tt.as_micros()) <= 2);
                        if near { continue; }
                        let mut up = initial.contains(&(a, b));
                        for e in events.iter().filter(|e| e.a == a && e.b == b && e.time <= tt) {
                            prop_assert_ne!(e.up, up, "event must flip the predicate");
                            up = e.up;
                        }
                        let d2 = trs[a].position_at_secs(t).distance_sq(trs[b].position_at_secs(t));
                        prop_assert_eq!(up, d2 <= 250.0 * 250.0, "pair ({}, {}) at {}", a, b, t);
                    }
                }
            }
        }

        #[test]
        fn positions_stay_in_field(tr in arb_trajectory(), t in 0.0f64..60.0) {
            let p = tr.position_at_secs(t);
            prop_assert!(p.x >= -1e-9 && p.x <= 500.0 + 1e-9 && p.y >= -1e-9 && p.y <= 500.0 + 1e-9);
        }
    }
}

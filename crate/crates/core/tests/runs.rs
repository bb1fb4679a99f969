use manet_sim::mobility::Position;
use manet_sim::scenario::Placement;
use manet_sim::sim::{run_scenario, run_traced};
use manet_sim::{Protocol, Scenario, SpeedClass};
use proptest::prelude::*;

fn two_nodes(protocol: Protocol, gap: f64) -> Scenario {
    Scenario {
        protocol,
        nodes: 2,
        duration_s: 20.0,
        placement: Placement::Static(vec![Position::new(10.0, 10.0), Position::new(10.0 + gap, 10.0)]),
        area_x: 1000.0,
        ..Scenario::default()
    }
}

#[test]
fn static_pair_in_range_delivers_everything() {
    for p in [Protocol::Pdsr, Protocol::Dsr, Protocol::Tora] {
        let o = run_scenario(two_nodes(p, 100.0)).unwrap();
        assert_eq!(o.result.summary.pdf, Some(1.0), "{p}");
        assert!(o.audit.is_ok());
    }
}

#[test]
fn static_pair_out_of_range_delivers_nothing() {
    let o = run_scenario(two_nodes(Protocol::Pdsr, 600.0)).unwrap();
    let s = &o.result.summary;
    assert_eq!(s.pdf, Some(0.0));
    assert_eq!(s.avg_delay_ms, None);
    assert_eq!(s.data_delivered, 0);
    assert_eq!(s.drop_source, s.data_sent);
    assert!(o.audit.is_ok());
}

#[test]
fn pdsr_gives_up_after_ten_requests() {
    let o = run_scenario(Scenario { duration_s: 80.0, ..two_nodes(Protocol::Pdsr, 600.0) }).unwrap();
    let st = o.pdsr.unwrap();
    let sends: Vec<u32> = st.rreq_log.iter().map(|r| r.3).collect();
    assert_eq!(sends[..10], (1..=10).collect::<Vec<_>>()[..]);
    assert_eq!(st.given_up, 1);
    // a packet generated after giving up starts a fresh discovery
    assert_eq!(sends[10], 1);
    assert!(st.rreq_log[10].0.as_secs_f64() >= 55.5);
}

#[test]
fn plain_dsr_never_warns_or_keeps_backups() {
    let o = run_scenario(Scenario::single_flow(Protocol::Dsr, 30, SpeedClass::Fast, 2)).unwrap();
    let st = o.pdsr.unwrap();
    assert!(st.warnings.is_empty());
    assert!(st.switches.is_empty());
    assert!(o.result.ctrl_by_kind.keys().all(|k| !matches!(k.as_str(), "WARN" | "ACK")));
}

#[test]
fn shipped_scenarios_parse() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios");
    for name in ["single_flow.scn", "pause_sweep.scn"] {
        let text = std::fs::read_to_string(format!("{root}/{name}")).unwrap();
        let sc = Scenario::parse(&text).unwrap();
        assert_eq!(Scenario::parse(&sc.emit()).unwrap(), sc, "{name}");
    }
}

#[test]
fn multi_flow_runs_account_for_every_packet() {
    let o = run_scenario(Scenario { duration_s: 30.0, ..Scenario::pause_sweep(Protocol::Tora, 0.0, 3) }).unwrap();
    let s = &o.result.summary;
    assert!(o.audit.is_ok());
    assert_eq!(s.data_delivered + s.drop_source + s.drop_transit, s.data_sent);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn runs_conserve_packets_and_repeat_exactly(
        seed in 0u64..1000,
        nodes in 3usize..12,
        proto in prop::sample::select(vec![Protocol::Tora, Protocol::Pdsr, Protocol::Dsr]),
        fast in any::<bool>(),
    ) {
        let mut sc = Scenario { protocol: proto, nodes, seed, duration_s: 15.0, ..Scenario::default() };
        sc.set_speed_class(if fast { SpeedClass::Fast } else { SpeedClass::Slow });
        let a = run_traced(sc.clone()).unwrap();
        let b = run_traced(sc).unwrap();
        prop_assert!(a.audit.is_ok(), "{:?}", a.audit);
        let s = &a.result.summary;
        prop_assert_eq!(s.data_delivered + s.drop_source + s.drop_transit, s.data_sent);
        prop_assert_eq!(a.trace, b.trace);
    }
}

use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_manet-sim");

fn scenario(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("s.scn");
    std::fs::write(&p, "protocol = pdsr\nnodes = 8\nduration_s = 20\nspeed_min = 10\nspeed_max = 20\n").unwrap();
    p
}

#[test]
fn run_then_replay_prints_the_same_row() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path());
    let trace = dir.path().join("run.trace");
    let out = dir.path().join("run.csv");
    let st = Command::new(BIN)
        .args([
            "run",
            sc.to_str().unwrap(),
            "--seed",
            "9",
            "--trace",
            trace.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("pdsr,8,fast,0,9,"));
    let replayed = Command::new(BIN).args(["replay", trace.to_str().unwrap()]).output().unwrap();
    assert!(replayed.status.success());
    assert_eq!(String::from_utf8(replayed.stdout).unwrap(), csv);
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path());
    let out = dir.path().join("sweep");
    let st = Command::new(BIN)
        .args([
            "sweep",
            sc.to_str().unwrap(),
            "--nodes",
            "6,8",
            "--speed",
            "slow,fast",
            "--pause",
            "0",
            "--seeds",
            "1,2",
        ])
        .args(["--protocols", "tora,pdsr", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let rows = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 16);
    let plot = std::fs::read_to_string(out.join("plot_pdf.dat")).unwrap();
    assert_eq!(plot.lines().count(), 2 + 2);
}

#[test]
fn bad_scenario_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.scn");
    std::fs::write(&p, "protocl = tora\n").unwrap();
    let o = Command::new(BIN).args(["run", p.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'protocl' at line 1"));
}

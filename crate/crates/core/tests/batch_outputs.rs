use std::fs;
use std::path::PathBuf;

use netlab_core::harness::{self, RunConfig};
use netlab_core::trace::{count_lines, TraceRecord};

fn cfg(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(name: &str, debug: u8, dir: &std::path::Path) -> harness::RunReport {
    let mut rc = RunConfig::new(cfg(name), dir);
    rc.stop = 60.0;
    rc.debug = debug;
    harness::run(&rc).unwrap()
}

#[test]
fn every_output_file_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run("lab7_tcp.cfg", 1, tmp.path());
    assert!(report.events > 0);
    for f in ["trace.log", "stats.txt", "plots/cwnd.csv", "plots/sent_seq.csv", "plots/ack_seq.csv",
              "plots/recv_seq.csv", "plots/cwnd.svg", "plots/sequence.svg", "plots/spacetime.svg"] {
        let p = tmp.path().join(f);
        assert!(p.is_file(), "{f} missing");
    }
    let svg = fs::read_to_string(tmp.path().join("plots/cwnd.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn plot_csvs_hold_every_plotted_point() {
    let tmp = tempfile::tempdir().unwrap();
    run("lab7_tcp.cfg", 3, tmp.path());
    let trace = fs::read_to_string(tmp.path().join("trace.log")).unwrap();
    let recs: Vec<TraceRecord> = trace.lines().map(|l| TraceRecord::parse(l).expect("parses")).collect();
    for series in ["cwnd", "sent_seq", "ack_seq", "recv_seq"] {
        let want: Vec<(f64, f64)> = recs
            .iter()
            .filter(|r| r.kind == "plot" && r.get("series") == Some(series))
            .map(|r| (r.t, r.get_f64("value").unwrap()))
            .collect();
        let csv = fs::read_to_string(tmp.path().join(format!("plots/{series}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("time,value"));
        let got: Vec<(f64, f64)> = lines
            .map(|l| {
                let (t, v) = l.split_once(',').unwrap();
                (t.parse().unwrap(), v.parse().unwrap())
            })
            .collect();
        assert!(!got.is_empty(), "{series} empty");
        assert_eq!(got.len(), want.len(), "{series}");
        for (g, w) in got.iter().zip(&want) {
            assert!((g.0 - w.0).abs() < 1e-9 && g.1 == w.1, "{series}: {g:?} vs {w:?}");
        }
    }
}

#[test]
fn lower_debug_levels_are_filtered_views() {
    let hi = tempfile::tempdir().unwrap();
    let lo = tempfile::tempdir().unwrap();
    run("lab2_gbn.cfg", 3, hi.path());
    run("lab2_gbn.cfg", 0, lo.path());
    let hi = fs::read_to_string(hi.path().join("trace.log")).unwrap();
    let lo = fs::read_to_string(lo.path().join("trace.log")).unwrap();
    let filtered: Vec<&str> = hi
        .lines()
        .filter(|l| TraceRecord::parse(l).unwrap().level == 0)
        .collect();
    assert!(!filtered.is_empty());
    assert_eq!(lo.lines().collect::<Vec<_>>(), filtered);
}

#[test]
fn stats_counters_agree_with_the_full_trace() {
    let tmp = tempfile::tempdir().unwrap();
    run("lab2_gbn.cfg", 3, tmp.path());
    let trace = fs::read_to_string(tmp.path().join("trace.log")).unwrap();
    let counts = count_lines(&trace);
    let stats = fs::read_to_string(tmp.path().join("stats.txt")).unwrap();
    let section: Vec<&str> = stats
        .lines()
        .skip_while(|l| *l != "[counters]")
        .skip(1)
        .take_while(|l| !l.is_empty() && !l.starts_with('['))
        .collect();
    let mut n = 0;
    for line in section {
        let mut w = line.split_whitespace();
        let (comp, kind, v) = (w.next().unwrap(), w.next().unwrap(), w.next().unwrap());
        assert_eq!(counts[comp][kind], v.parse::<u64>().unwrap(), "{line}");
        n += 1;
    }
    let total: usize = counts.values().map(|m| m.len()).sum();
    assert_eq!(n, total);
    assert!(stats.contains("[links]"));
    assert!(stats.lines().any(|l| l.starts_with("a-b ") && l.contains("loss_rate")));
}

#[test]
fn a_script_file_drives_a_batch_run() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("cmds.jsonl");
    fs::write(
        &script,
        "{\"at_event\":40,\"type\":\"fail_link\",\"link\":\"a-b\"}\n\
         {\"at_event\":90,\"type\":\"repair_link\",\"link\":\"a-b\"}\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let mut rc = RunConfig::new(cfg("lab2_gbn.cfg"), &out);
    rc.stop = 60.0;
    rc.script = Some(script);
    harness::run(&rc).unwrap();
    let trace = fs::read_to_string(out.join("trace.log")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.contains("link_state")).count(), 2);
    assert!(trace.lines().any(|l| l.contains("comp=b.app kind=sdu_in") && l.contains("total=200000")));
}

#[test]
fn a_broken_config_is_reported_with_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "node a app\nnode b app\nlink a b bw=1e6\n").unwrap();
    let err = harness::run(&RunConfig::new(&bad, tmp.path().join("o"))).unwrap_err();
    assert!(err.contains('3') && err.contains("delay"), "{err}");
}

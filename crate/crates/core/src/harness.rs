//! Batch runs: trace, statistics and plot files.
//!
//! Output layout under the chosen directory:
//!
//! ```text
//! trace.log            records at or below the debug level
//! stats.txt            per-component counters and link metrics
//! plots/<series>.csv   one per plotted series (cwnd, sent_seq, ack_seq, recv_seq always)
//! plots/cwnd.svg       congestion window against time
//! plots/sequence.svg   sent / ack / recv sequence numbers against time
//! plots/spacetime.svg  one line per link transmission
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::control::{parse_script, Session};
use crate::kernel::Kernel;
use crate::trace::TraceRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub config: PathBuf,
    pub seed: u64,
    pub stop: f64,
    pub debug: u8,
    /// Wall-clock milliseconds between dispatched events.
    pub delay_ms: f64,
    pub out: PathBuf,
    pub script: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(config: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            config: config.into(),
            seed: 1,
            stop: 100.0,
            debug: 1,
            delay_ms: 0.0,
            out: out.into(),
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub events: u64,
    pub sim_time: f64,
    pub records: usize,
}

/// Runs a configuration to its stop time and writes every output file.
pub fn run(rc: &RunConfig) -> Result<RunReport, String> {
    let mut s = Session::default();
    s.apply(crate::control::Command::SetDebug { level: rc.debug })?;
    s.apply(crate::control::Command::SetStopTime { t: rc.stop })?;
    s.load_path(&rc.config, rc.seed)?;
    if let Some(p) = &rc.script {
        let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let script = parse_script(&text)?;
        s.run_script(&script)?;
    } else {
        let pause = (rc.delay_ms > 0.0).then(|| Duration::from_secs_f64(rc.delay_ms / 1000.0));
        while s.dispatch_one()? {
            if let Some(d) = pause {
                std::thread::sleep(d);
            }
        }
    }
    let k = s.kernel().ok_or("no kernel")?;
    write_outputs(k, &rc.out).map_err(|e| format!("{}: {e}", rc.out.display()))?;
    Ok(RunReport {
        events: k.dispatched(),
        sim_time: k.now(),
        records: k.trace().len(),
    })
}

pub fn write_outputs(k: &Kernel, out: &Path) -> std::io::Result<()> {
    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;
    fs::write(out.join("trace.log"), k.trace().render())?;
    fs::write(out.join("stats.txt"), stats_report(k))?;
    let recs = k.trace().records();
    let series = plot_series(recs);
    for (name, pts) in &series {
        fs::write(plots.join(format!("{name}.csv")), series_csv(pts))?;
    }
    fs::write(plots.join("cwnd.svg"), cwnd_svg(&series))?;
    fs::write(plots.join("sequence.svg"), sequence_svg(&series))?;
    fs::write(plots.join("spacetime.svg"), spacetime_svg(recs))?;
    Ok(())
}

/// Per-series (time, value) points from `plot` records, with the four
/// standard series always present.
pub fn plot_series(recs: &[TraceRecord]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for s in ["cwnd", "sent_seq", "ack_seq", "recv_seq"] {
        out.insert(s.to_string(), Vec::new());
    }
    for r in recs.iter().filter(|r| r.kind == "plot") {
        if let (Some(s), Some(v)) = (r.get("series"), r.get_f64("value")) {
            out.entry(s.to_string()).or_default().push((r.t, v));
        }
    }
    out
}

pub fn series_csv(pts: &[(f64, f64)]) -> String {
    let mut s = String::from("time,value\n");
    for (t, v) in pts {
        let _ = writeln!(s, "{t:.9},{v}");
    }
    s
}

/// Link metrics derived from `tx` and `drop` records of one link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkStats {
    pub frames: u64,
    pub lost: u64,
    pub dropped: u64,
    pub busy: f64,
}

pub fn link_stats(recs: &[TraceRecord]) -> BTreeMap<String, LinkStats> {
    let mut out: BTreeMap<String, LinkStats> = BTreeMap::new();
    for r in recs {
        match r.kind.as_str() {
            "tx" if r.get("txtime").is_some() => {
                let e = out.entry(r.comp.clone()).or_default();
                e.frames += 1;
                e.busy += r.get_f64("txtime").unwrap_or(0.0);
                if r.get("lost") == Some("1") {
                    e.lost += 1;
                }
            }
            "drop" if out.contains_key(&r.comp) => {
                out.get_mut(&r.comp).expect("present").dropped += 1;
            }
            _ => {}
        }
    }
    out
}

pub fn stats_report(k: &Kernel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}", k.seed());
    let _ = writeln!(s, "sim_time {:.9}", k.now());
    let _ = writeln!(s, "events {}", k.dispatched());
    let _ = writeln!(s, "records {}", k.trace().len());
    let _ = writeln!(s, "\n[counters]");
    for (comp, kinds) in k.trace().counters() {
        for (kind, n) in kinds {
            let _ = writeln!(s, "{comp} {kind} {n}");
        }
    }
    let links = link_stats(k.trace().records());
    if !links.is_empty() {
        let _ = writeln!(s, "\n[links]");
        let span = k.now().max(f64::MIN_POSITIVE);
        for (name, l) in &links {
            let loss = if l.frames == 0 { 0.0 } else { l.lost as f64 / l.frames as f64 };
            let _ = writeln!(
                s,
                "{name} frames={} lost={} dropped={} utilization={:.6} loss_rate={:.6}",
                l.frames,
                l.lost,
                l.dropped,
                l.busy / span,
                loss
            );
        }
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 40.0;

struct Frame {
    t0: f64,
    t1: f64,
    v0: f64,
    v1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut f = Frame {
            t0: f64::INFINITY,
            t1: f64::NEG_INFINITY,
            v0: 0.0,
            v1: f64::NEG_INFINITY,
        };
        for (t, v) in pts {
            f.t0 = f.t0.min(*t);
            f.t1 = f.t1.max(*t);
            f.v0 = f.v0.min(*v);
            f.v1 = f.v1.max(*v);
        }
        if !f.t0.is_finite() {
            f.t0 = 0.0;
            f.t1 = 1.0;
            f.v1 = 1.0;
        }
        if f.t1 <= f.t0 {
            f.t1 = f.t0 + 1.0;
        }
        if f.v1 <= f.v0 {
            f.v1 = f.v0 + 1.0;
        }
        f
    }

    fn x(&self, t: f64) -> f64 {
        M + (t - self.t0) / (self.t1 - self.t0) * (W - 2.0 * M)
    }

    fn y(&self, v: f64) -> f64 {
        H - M - (v - self.v0) / (self.v1 - self.v0) * (H - 2.0 * M)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{M}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = H - M,
        x = W - M,
    )
}

pub fn cwnd_svg(series: &BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let pts = series.get("cwnd").map(Vec::as_slice).unwrap_or(&[]);
    let f = Frame::fit(pts.iter());
    let mut s = svg_open("congestion window");
    if !pts.is_empty() {
        let path: Vec<String> = pts
            .iter()
            .map(|(t, v)| format!("{:.2},{:.2}", f.x(*t), f.y(*v)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"steelblue\" points=\"{}\"/>",
            path.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn sequence_svg(series: &BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let names = ["sent_seq", "ack_seq", "recv_seq"];
    let all = names
        .iter()
        .filter_map(|n| series.get(*n))
        .flat_map(|v| v.iter());
    let f = Frame::fit(all);
    let mut s = svg_open("sequence numbers");
    for n in names {
        let color = crate::labs::tcp::series_color(n);
        for (t, v) in series.get(n).into_iter().flatten() {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{color}\"/>",
                f.x(*t),
                f.y(*v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Space-time diagram: endpoints on the vertical axis, one line per
/// transmission from its start to its arrival.
pub fn spacetime_svg(recs: &[TraceRecord]) -> String {
    let tx: Vec<&TraceRecord> = recs
        .iter()
        .filter(|r| r.kind == "tx" && r.get("arrive").is_some())
        .collect();
    let mut ends: Vec<String> = Vec::new();
    for r in &tx {
        for key in ["from", "to"] {
            if let Some(e) = r.get(key) {
                if !ends.iter().any(|x| x == e) {
                    ends.push(e.to_string());
                }
            }
        }
    }
    let times: Vec<(f64, f64)> = tx
        .iter()
        .flat_map(|r| {
            [
                (r.get_f64("start").unwrap_or(r.t), 0.0),
                (r.get_f64("arrive").unwrap_or(r.t), ends.len().max(1) as f64),
            ]
        })
        .collect();
    let f = Frame::fit(times.iter());
    let mut s = svg_open("space-time");
    // time runs downward, one column per endpoint
    let col = |name: &str| {
        let i = ends.iter().position(|e| e == name).unwrap_or(0) as f64;
        M + (i + 0.5) / ends.len().max(1) as f64 * (W - 2.0 * M)
    };
    let row = |t: f64| M + (t - f.t0) / (f.t1 - f.t0) * (H - 2.0 * M);
    for e in &ends {
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{M}\" x2=\"{x:.2}\" y2=\"{y}\" stroke=\"gray\"/>",
            x = col(e),
            y = H - M
        );
    }
    for r in &tx {
        let (Some(a), Some(b)) = (r.get("from"), r.get("to")) else {
            continue;
        };
        let stroke = match r.get("color") {
            Some("ack") => "goldenrod",
            Some("corrupted") => "red",
            Some("retransmitted") => "purple",
            Some("control") => "gray",
            _ => "steelblue",
        };
        let dash = if r.get("lost") == Some("1") { " stroke-dasharray=\"4,3\"" } else { "" };
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{stroke}\"{dash}/>",
            col(a),
            row(r.get_f64("start").unwrap_or(r.t)),
            col(b),
            row(r.get_f64("arrive").unwrap_or(r.t)),
        );
    }
    s.push_str("</svg>\n");
    s
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every expected value is computed here, from first
//! principles, without calling the code under test.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use netlab_core::control::{parse_script, render_script, replay, Command, Session};
use netlab_core::harness::{self, RunConfig};
use netlab_core::kernel::{EventHandle, HandlerResult};
use netlab_core::labs::bridge::{Bridge, Nic, PortState, Role};
use netlab_core::labs::gcra::Gcra;
use netlab_core::labs::ipfrag::{fragment, Datagram, Reassembler};
use netlab_core::labs::pnni::{PnniNode, PtseContent};
use netlab_core::labs::token_ring::RingStation;
use netlab_core::netbase::app::App;
use netlab_core::{build, Component, Ctx, Kernel, Message, TraceRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lab(name: &str) -> String {
    fs::read_to_string(configs().join(name)).expect("shipped config")
}

fn of<'a>(k: &'a Kernel, comp: &'a str, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> {
    k.trace()
        .records()
        .iter()
        .filter(move |r| r.comp == comp && r.kind == kind)
}

// 1 ----------------------------------------------------------------------

struct Sink;

impl Component for Sink {
    fn kind(&self) -> &'static str {
        "sink"
    }
    fn handle(&mut self, _: &mut Ctx<'_>, _: Message) -> HandlerResult {
        Ok(())
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

fn kernel_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut k = Kernel::new(1);
    let ids: Vec<_> = (0..4).map(|i| k.add_component(&format!("s{i}"), Box::new(Sink))).collect();
    k.set_stop_time(1e12).map_err(|e| e.to_string())?;

    // oracle: every live event keyed by (fire time, seq); non-negative f64
    // bit patterns sort like the values
    let mut live: BTreeSet<(u64, u64)> = BTreeSet::new();
    let mut handles: Vec<(EventHandle, u64)> = Vec::new();
    let mut scheduled = 0u64;
    let mut dispatched = 0u64;
    let mut violations = 0u64;

    for round in 0..10 {
        for _ in 0..10_000 {
            let delay = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0..400) as f64 * 0.25e-3 };
            let target = ids[rng.gen_range(0..ids.len())];
            let h = k.schedule(target, delay, Message::Timer(round)).map_err(|e| e.to_string())?;
            let t = if delay == 0.0 { k.now() } else { k.now() + delay };
            live.insert((t.to_bits(), h.seq()));
            handles.push((h, t.to_bits()));
            scheduled += 1;
        }
        for _ in 0..300 {
            let (h, t) = handles[rng.gen_range(0..handles.len())];
            let was_live = live.remove(&(t, h.seq()));
            if k.cancel(h) != was_live {
                violations += 1;
            }
        }
        let steps = if round == 9 { usize::MAX } else { 7_000 };
        for _ in 0..steps {
            let expect = live.pop_first();
            let got = k.step().map_err(|e| e.to_string())?;
            match (expect, got) {
                (None, None) => break,
                (Some((t, seq)), Some(ev)) => {
                    dispatched += 1;
                    if ev.fire_time.to_bits() != t || ev.seq != seq {
                        violations += 1;
                    }
                }
                _ => {
                    violations += 1;
                    break;
                }
            }
        }
    }
    ensure!(scheduled >= 100_000, "only {scheduled} events scheduled");
    ensure!(violations == 0, "{violations} ordering violations");
    ensure!(live.is_empty(), "{} events never dispatched", live.len());
    Ok(format!("{scheduled} scheduled, {dispatched} dispatched, 0 violations"))
}

// 2 ----------------------------------------------------------------------

fn stop_for(name: &str) -> f64 {
    // the ring circulates its token every few microseconds
    if name.contains("token_ring") {
        0.05
    } else {
        60.0
    }
}

fn determinism() -> Outcome {
    let mut names: Vec<String> = fs::read_dir(configs())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".cfg"))
        .collect();
    names.sort();
    ensure!(names.len() >= 9, "only {} configs shipped", names.len());
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut total = 0usize;
    for name in &names {
        let run = |tag: &str, delay: f64| -> Result<(Vec<u8>, Vec<u8>), String> {
            let out = tmp.path().join(format!("{name}-{tag}"));
            let mut rc = RunConfig::new(configs().join(name), &out);
            rc.seed = 7;
            rc.stop = stop_for(name);
            rc.debug = 3;
            rc.delay_ms = delay;
            harness::run(&rc)?;
            let trace = fs::read(out.join("trace.log")).map_err(|e| e.to_string())?;
            let stats = fs::read(out.join("stats.txt")).map_err(|e| e.to_string())?;
            Ok((trace, stats))
        };
        let a = run("a", 0.0)?;
        let b = run("b", 0.0)?;
        let c = run("paced", 0.001)?;
        ensure!(!a.0.is_empty(), "{name}: empty trace");
        ensure!(a == b, "{name}: two runs with the same seed differ");
        ensure!(a == c, "{name}: pacing changed the trace");
        total += a.0.len();
    }
    Ok(format!("{} configs, {total} trace bytes each matched twice", names.len()))
}

// 3 ----------------------------------------------------------------------

const GBN_HEADER_BYTES: f64 = 8.0;

fn gbn() -> Outcome {
    let bits = (1000.0 + GBN_HEADER_BYTES) * 8.0;
    // per-frame corruption probability 1 - (1 - ber)^bits = 0.05
    let ber = 1.0 - 0.95f64.powf(1.0 / bits);
    let text = format!(
        "node a app+gbn pattern=bulk size=1000 count=1000\n\
         node b app+gbn\n\
         param a.gbn window=4\n\
         param b.gbn window=4\n\
         link a b bw=1e6 delay=0.01 loss=0.1 ber={ber}\n"
    );
    let mut k = build(&text, 3)?;
    k.run_until(1e4).map_err(|e| e.to_string())?;
    let sent = k.component_by_name::<App>("a.app").ok_or("no a.app")?;
    let got = k.component_by_name::<App>("b.app").ok_or("no b.app")?;
    ensure!(sent.sdus_generated() == 1000, "generated {}", sent.sdus_generated());
    ensure!(got.received() == sent.generated(), "receiver stream differs from sender stream");
    ensure!(of(&k, "b.app", "sdu_in").count() == 1000, "sdus delivered more or less than once");
    let stats = harness::link_stats(k.trace().records());
    let link = stats.get("a-b").ok_or("no link stats")?;
    let loss = link.lost as f64 / link.frames as f64;
    let corrupt = of(&k, "b.gbn", "drop").count() as f64
        / (of(&k, "b.gbn", "drop").count() + of(&k, "b.gbn", "recv").count()) as f64;
    ensure!((0.07..0.13).contains(&loss), "link loss rate {loss}");
    ensure!((0.03..0.07).contains(&corrupt), "corruption rate {corrupt}");

    let (bw, tp) = (1e6, 0.01);
    let tf = bits / bw;
    let mut worst = 0f64;
    for w in [1u32, 2, 4, 8] {
        let text = format!(
            "node a app+gbn pattern=bulk size=1000 count=200\n\
             node b app+gbn\n\
             param a.gbn window={w}\n\
             param b.gbn window={w}\n\
             link a b bw={bw} delay={tp}\n"
        );
        let mut k = build(&text, 1)?;
        k.run_until(1e3).map_err(|e| e.to_string())?;
        let recv: Vec<f64> = of(&k, "b.gbn", "recv").map(|r| r.t).collect();
        ensure!(recv.len() == 200, "W={w}: {} frames received on a clean link", recv.len());
        let measured = 200.0 * tf / recv[recv.len() - 1];
        let expect = (w as f64 * tf / (tf + 2.0 * tp)).min(1.0);
        let err = (measured - expect).abs() / expect;
        ensure!(err <= 0.05, "W={w}: utilization {measured:.4} vs {expect:.4}");
        worst = worst.max(err);
    }
    Ok(format!(
        "1000 SDUs intact (loss {loss:.3}, corruption {corrupt:.3}); utilization within {:.2}%",
        worst * 100.0
    ))
}

// 4 ----------------------------------------------------------------------

fn successful_overlaps(k: &Kernel) -> usize {
    let mut spans: Vec<(f64, f64)> = k
        .trace()
        .records()
        .iter()
        .filter(|r| r.kind == "bus_end" && r.get("aborted") == Some("0"))
        .map(|r| (r.get_f64("start").unwrap_or(f64::NAN), r.get_f64("end").unwrap_or(f64::NAN)))
        .collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    spans.windows(2).filter(|w| !(w[1].0 >= w[0].1)).count()
}

fn csma() -> Outcome {
    // second attempt: each station draws uniformly from {0, 1} slots and
    // the pair collides exactly when the draws agree
    let slots = [0u32, 1];
    let pairs: Vec<(u32, u32)> = slots.iter().flat_map(|&a| slots.iter().map(move |&b| (a, b))).collect();
    let oracle = pairs.iter().filter(|(a, b)| a == b).count() as f64 / pairs.len() as f64;

    let text = "node bus bus\n\
                node s1 csma frames=1 frame_bytes=512\n\
                node s2 csma frames=1 frame_bytes=512\n\
                link s1 bus bw=10e6 delay=0\n\
                link s2 bus bw=10e6 delay=5e-6\n";
    let trials = 10_000u64;
    let mut second = 0u64;
    let mut overlaps = 0usize;
    for seed in 0..trials {
        let mut k = build(text, seed)?;
        k.run_until(1.0).map_err(|e| e.to_string())?;
        let at = |n: u64| {
            k.trace()
                .records()
                .iter()
                .filter(|r| r.kind == "collision" && r.get_u64("attempt") == Some(n))
                .map(|r| r.comp.clone())
                .collect::<BTreeSet<_>>()
        };
        ensure!(at(1).len() == 2, "seed {seed}: both stations must collide on attempt 1");
        if !at(2).is_empty() {
            second += 1;
        }
        overlaps += successful_overlaps(&k);
    }
    let p = second as f64 / trials as f64;
    ensure!((p - oracle).abs() <= 0.02, "P(collision on attempt 2) = {p} vs {oracle}");

    let mut busy = String::from("node bus bus\n");
    for i in 0..8 {
        busy += &format!("node s{i} csma frames=40 frame_bytes=200 interval=2e-4\n");
        busy += &format!("link s{i} bus bw=10e6 delay={}\n", i as f64 * 1.5e-6);
    }
    for (text, seed) in [(lab("lab3_csma.cfg"), 1), (busy.clone(), 2), (busy, 3)] {
        let mut k = build(&text, seed)?;
        k.run_until(10.0).map_err(|e| e.to_string())?;
        ensure!(of(&k, "bus", "bus_end").count() > 20, "no traffic on the bus");
        overlaps += successful_overlaps(&k);
    }
    ensure!(overlaps == 0, "{overlaps} overlapping successful transmissions");
    Ok(format!("attempt-1 collision in all {trials} trials; P(attempt 2) = {p:.4}, oracle {oracle}"))
}

// 5 ----------------------------------------------------------------------

fn token_ring() -> Outcome {
    let text = lab("lab4_token_ring.cfg");
    let mut k = build(&text, 1)?;
    k.set_stop_time(0.2).map_err(|e| e.to_string())?;
    let stations: Vec<String> = text
        .lines()
        .filter_map(|l| l.strip_prefix("node "))
        .map(|l| l.split_whitespace().next().unwrap_or_default().to_string())
        .collect();
    let (mut issued, mut regen, mut captured, mut lost, mut dup) = (0i64, 0i64, 0i64, 0i64, 0i64);
    let mut seen = 0;
    let mut checked = 0u64;
    let mut skipped = 0u64;
    let mut bad = Vec::new();
    while k.step().map_err(|e| e.to_string())?.is_some() {
        for r in &k.trace().records()[seen..] {
            match (r.kind.as_str(), r.get("reason")) {
                ("token_issue", _) => issued += 1,
                ("token_regen", _) => regen += 1,
                ("token_capture", _) => captured += 1,
                ("token_lost", _) => lost += 1,
                ("violation", Some("duplicate_token")) => dup += 1,
                _ => {}
            }
        }
        seen = k.trace().len();
        let in_flight = issued + regen - captured - lost - dup;
        let holders = stations
            .iter()
            .filter(|s| k.component_by_name::<RingStation>(s).is_some_and(|r| r.is_holding()))
            .count() as i64;
        if lost > regen {
            skipped += 1;
            continue;
        }
        checked += 1;
        if in_flight + holders != 1 && bad.len() < 5 {
            bad.push(format!("t={} in_flight={in_flight} holders={holders}", k.now()));
        }
    }
    ensure!(bad.is_empty(), "single-token invariant broken: {}", bad.join("; "));
    ensure!(checked >= 10_000, "only {checked} dispatches checked");
    ensure!(lost >= 1 && regen >= 1, "the run never lost and regenerated a token");
    ensure!(
        k.trace().records().iter().all(|r| r.kind != "violation"),
        "protocol violations recorded"
    );
    let mut pushes = 0;
    for s in &stations {
        let c = k.trace().counters().get(s.as_str()).cloned().unwrap_or_default();
        let n = |kind: &str| c.get(kind).copied().unwrap_or(0);
        ensure!(
            n("stack_push") == n("stack_pop") + n("stack_purge"),
            "{s}: {} pushes, {} pops, {} purges",
            n("stack_push"),
            n("stack_pop"),
            n("stack_purge")
        );
        let st = k.component_by_name::<RingStation>(s).ok_or("missing station")?;
        ensure!(st.stack().is_empty(), "{s}: stack not empty at the end");
        pushes += n("stack_push");
    }
    ensure!(pushes > 0, "no priority was ever raised");
    Ok(format!(
        "{checked} dispatches hold one token ({skipped} inside regeneration windows); {pushes} pushes balanced"
    ))
}

// 6 ----------------------------------------------------------------------

fn forwarding(k: &Kernel, bridges: &[&str]) -> Result<(usize, usize), String> {
    let mut fwd = 0;
    let mut blocked = 0;
    for b in bridges {
        let br = k.component_by_name::<Bridge>(b).ok_or("missing bridge")?;
        fwd += br.states().iter().filter(|s| **s == PortState::Forwarding).count();
        blocked += br.roles().iter().filter(|r| **r == Role::Blocked).count();
    }
    Ok((fwd, blocked))
}

fn duplicates(k: &Kernel, hosts: &[&str]) -> Result<usize, String> {
    let mut dups = 0;
    for h in hosts {
        let nic = k.component_by_name::<Nic>(h).ok_or("missing host")?;
        let distinct: BTreeSet<_> = nic.received().iter().collect();
        dups += nic.received().len() - distinct.len();
    }
    Ok(dups)
}

fn bridging() -> Outcome {
    let base = lab("lab5_bridges.cfg");
    let bridges = ["b1", "b2", "b3"];
    let hosts = ["h1", "h2", "h3"];
    let lans = base.lines().filter(|l| l.starts_with("node ") && l.ends_with(" lan")).count();
    let expect = lans + bridges.len() - 1;

    let mut k = build(&base, 1)?;
    k.run_until(39.9).map_err(|e| e.to_string())?;
    let (fwd, blocked) = forwarding(&k, &bridges)?;
    ensure!(fwd == expect && blocked == 1, "{fwd} forwarding ports, {blocked} blocked; want {expect} and 1");
    let converged = fwd;
    k.run_until(100.0).map_err(|e| e.to_string())?;
    let dups = duplicates(&k, &hosts)?;
    ensure!(dups == 0, "{dups} duplicated frames");
    for h in hosts {
        let n = k.component_by_name::<Nic>(h).ok_or("missing host")?.received().len();
        ensure!(n == 20, "{h} received {n} of 20 frames");
    }

    // root fails at t = 60 while hosts keep sending until t = 120
    let failing: String = base
        .lines()
        .map(|l| {
            let l = l.replace("frames=20", "frames=80");
            if l.starts_with("link b1 ") {
                format!("{l} fail_at=60\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let mut k = build(&failing, 1)?;
    k.run_until(59.9).map_err(|e| e.to_string())?;
    let old_root = k.component_by_name::<Bridge>("b2").ok_or("b2")?.root();
    k.run_until(200.0).map_err(|e| e.to_string())?;
    let ids: BTreeMap<&str, _> = bridges
        .iter()
        .map(|b| (*b, k.component_by_name::<Bridge>(b).expect("bridge").id()))
        .collect();
    let next = ids.iter().filter(|(b, _)| **b != "b1").map(|(_, id)| *id).min().ok_or("no bridges")?;
    for b in ["b2", "b3"] {
        let root = k.component_by_name::<Bridge>(b).ok_or("bridge")?.root();
        ensure!(root == next, "{b} believes {root} is root, want {next}");
    }
    let (fwd, blocked) = forwarding(&k, &["b2", "b3"])?;
    ensure!(fwd == lans + 2 - 1 && blocked == 0, "after failure {fwd} forwarding, {blocked} blocked");
    let dups = duplicates(&k, &hosts)?;
    ensure!(dups == 0, "{dups} duplicated frames around the failure");
    // every frame sent well after reconvergence arrives
    for (src, dst) in [("h1", "h3"), ("h2", "h1"), ("h3", "h2")] {
        let got: BTreeSet<u64> = k
            .component_by_name::<Nic>(dst)
            .ok_or("host")?
            .received()
            .iter()
            .filter(|(s, _)| s == src)
            .map(|(_, id)| *id)
            .collect();
        ensure!((70..80).all(|i| got.contains(&i)), "{src}->{dst} lost frames after reconvergence");
    }
    Ok(format!(
        "{converged} forwarding adjacencies, 1 blocked; root {old_root} replaced by {next} ({fwd} after); no duplicates"
    ))
}

// 7 ----------------------------------------------------------------------

fn fragment_count(payload: usize, mtu: usize) -> usize {
    if payload + 20 <= mtu {
        1
    } else {
        let per = (mtu - 20) / 8 * 8;
        payload.div_ceil(per)
    }
}

fn ip_fragmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf7a9);
    for case in 0..1000 {
        let len = rng.gen_range(0..20_000);
        let mtu = rng.gen_range(28..4000);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let d = Datagram::new(case as u16, "s", "d", payload.clone(), 0.0);
        let mut frags = fragment(&d, mtu).map_err(|e| e.to_string())?;
        ensure!(
            frags.len() == fragment_count(len, mtu),
            "case {case}: {} fragments for {len} B at MTU {mtu}",
            frags.len()
        );
        ensure!(frags.iter().all(|f| f.total_len <= mtu), "case {case}: oversize fragment");
        // half the cases cross a second, smaller MTU on the way
        if case % 2 == 1 {
            let mtu2 = rng.gen_range(28..=mtu.max(28));
            let mut again = Vec::new();
            for f in &frags {
                again.extend(fragment(f, mtu2).map_err(|e| e.to_string())?);
            }
            frags = again;
        }
        frags.shuffle(&mut rng);
        let mut r = Reassembler::new(30.0);
        let mut out = None;
        for (i, f) in frags.into_iter().enumerate() {
            if let Some(done) = r.accept(f, i as f64 * 1e-3) {
                ensure!(out.is_none(), "case {case}: reassembled twice");
                out = Some(done.datagram);
            }
        }
        let out = out.ok_or(format!("case {case}: never reassembled"))?;
        ensure!(out.payload == payload && out.id == case as u16, "case {case}: payload differs");
    }
    let frags = fragment(&Datagram::new(1, "s", "d", vec![0; 4000], 0.0), 1500).map_err(|e| e.to_string())?;
    let shape: Vec<(usize, u16)> = frags.iter().map(|f| (f.payload.len(), f.offset)).collect();
    ensure!(shape == vec![(1480, 0), (1480, 185), (1040, 370)], "4000 B payload at MTU 1500 gave {shape:?}");
    Ok("1000 random cases reassemble exactly; 1480/1480/1040 at 0/185/370".into())
}

// 8 ----------------------------------------------------------------------

/// Reno cwnd after each ACK, recomputed from the ACK numbers and segment
/// boundaries the sender saw, in trace order.
struct RenoOracle {
    mss: u64,
    cwnd: u64,
    ssthresh: u64,
    una: u64,
    max: u64,
    dups: u32,
    recovery: bool,
}

enum Seen {
    Cwnd(u64),
    FastRetransmit,
    Nothing,
}

impl RenoOracle {
    fn ack(&mut self, ack: u64) -> Seen {
        if ack < self.una || ack > self.max {
            return Seen::Nothing;
        }
        if ack > self.una {
            self.una = ack;
            self.dups = 0;
            if self.recovery {
                self.recovery = false;
                self.cwnd = self.ssthresh;
            } else if self.cwnd < self.ssthresh {
                self.cwnd += self.mss;
            } else {
                self.cwnd += (self.mss * self.mss / self.cwnd).max(1);
            }
            return Seen::Cwnd(self.cwnd);
        }
        if self.una == self.max {
            return Seen::Nothing;
        }
        self.dups += 1;
        if self.recovery {
            self.cwnd += self.mss;
        } else if self.dups == 3 {
            self.ssthresh = ((self.max - self.una) / 2).max(2 * self.mss);
            self.cwnd = self.ssthresh + 3 * self.mss;
            self.recovery = true;
            return Seen::FastRetransmit;
        }
        Seen::Cwnd(self.cwnd)
    }
}

fn tcp_scenario(cloud: &str, extra: &str, seed: u64) -> Result<Kernel, String> {
    let text = format!(
        "node a app+tcp pattern=file bytes=200000 size=1000\n\
         node b app+tcp\n\
         node net cloud {cloud}\n\
         link a net bw=1e6 delay=0.05 {extra}\n\
         link net b bw=1e6 delay=0.05 {extra}\n"
    );
    let mut k = build(&text, seed)?;
    k.run_until(2000.0).map_err(|e| e.to_string())?;
    Ok(k)
}

fn stream_intact(k: &Kernel) -> Result<(), String> {
    let a = k.component_by_name::<App>("a.app").ok_or("a.app")?;
    let b = k.component_by_name::<App>("b.app").ok_or("b.app")?;
    if a.generated().len() != 200_000 || b.received() != a.generated() {
        return Err(format!("received {} of {} bytes intact", b.received().len(), a.generated().len()));
    }
    Ok(())
}

fn tcp() -> Outcome {
    let k = build(&lab("lab7_tcp.cfg"), 1).and_then(|mut k| {
        k.run_until(2000.0).map_err(|e| e.to_string())?;
        Ok(k)
    })?;
    stream_intact(&k)?;
    let mss = 1000;
    let mut o = RenoOracle {
        mss,
        cwnd: mss,
        ssthresh: 64 * mss,
        una: 0,
        max: 0,
        dups: 0,
        recovery: false,
    };
    let recs: Vec<&TraceRecord> = k.trace().records().iter().filter(|r| r.comp == "a.tcp").collect();
    ensure!(recs.iter().all(|r| r.kind != "timeout"), "single-loss run hit a timeout");
    let cwnd_plots: Vec<u64> = recs
        .iter()
        .filter(|r| r.kind == "plot" && r.get("series") == Some("cwnd"))
        .filter_map(|r| r.get_u64("value"))
        .collect();
    let mut expect = vec![mss];
    let mut fast = 0;
    let mut deflated = false;
    // rounds: segments sent in reaction to ACKs of round r belong to r + 1
    let mut round_of: HashMap<u64, usize> = HashMap::new();
    let mut rounds = vec![0usize; 64];
    let mut current = 0usize;
    let mut loss_seen = false;
    let mut i = 0;
    while i < recs.len() {
        let r = recs[i];
        match (r.kind.as_str(), r.get("series")) {
            ("seg_out", _) => {
                let seq = r.get_u64("seq").ok_or("seg_out seq")?;
                let len = r.get_u64("len").ok_or("seg_out len")?;
                o.max = o.max.max(seq + len);
                if !loss_seen && !round_of.contains_key(&seq) {
                    round_of.insert(seq, current);
                    rounds[current] += 1;
                }
            }
            ("plot", Some("ack_seq")) => {
                let ack = r.get_u64("value").ok_or("ack value")?;
                if ack == o.una && o.max > o.una {
                    loss_seen = true;
                }
                if !loss_seen {
                    if let Some(&acked) = ack.checked_sub(mss).and_then(|s| round_of.get(&s)) {
                        current = acked + 1;
                    }
                }
                let recovering = o.recovery;
                match o.ack(ack) {
                    Seen::Cwnd(c) => {
                        if recovering && !o.recovery {
                            ensure!(c == o.ssthresh, "deflate to {c}, ssthresh {}", o.ssthresh);
                            deflated = true;
                        }
                        expect.push(c)
                    }
                    Seen::FastRetransmit => {
                        fast += 1;
                        let next = recs.get(i + 1).map(|r| r.kind.as_str());
                        ensure!(next == Some("fast_retransmit"), "3rd duplicate ACK not followed by fast retransmit");
                        ensure!(o.cwnd == o.ssthresh + 3 * mss, "inflated window");
                        expect.push(o.cwnd);
                    }
                    Seen::Nothing => {}
                }
            }
            _ => {}
        }
        i += 1;
    }
    ensure!(fast == 1 && deflated, "{fast} fast retransmits, deflated={deflated}");
    ensure!(cwnd_plots == expect, "cwnd series differs from the Reno oracle ({} vs {} points)", cwnd_plots.len(), expect.len());
    let doubling: Vec<usize> = rounds.iter().take(5).copied().collect();
    ensure!(doubling == vec![1, 2, 4, 8, 16], "slow-start rounds sent {doubling:?} segments");

    let scripts = [
        ("drop=1", ""),
        ("drop=20", ""),
        ("drop=5,6,7", ""),
        ("drop=50,51,52,53", ""),
        ("drop=10,30,60,90,120,150", ""),
        ("loss=0.05", ""),
        ("loss=0.2", ""),
        ("", "loss=0.05"),
    ];
    for (seed, (cloud, link)) in scripts.iter().enumerate() {
        let k = tcp_scenario(cloud, link, seed as u64 + 1)?;
        stream_intact(&k).map_err(|e| format!("script `{cloud}{link}`: {e}"))?;
    }
    Ok(format!(
        "{} cwnd points match the oracle; rounds 1,2,4,8,16; {} loss scripts intact",
        expect.len(),
        scripts.len() + 1
    ))
}

// 9 ----------------------------------------------------------------------

/// Continuous-state leaky bucket on integer ticks.
struct Bucket {
    i: i64,
    l: i64,
    x: i64,
    lct: i64,
}

impl Bucket {
    fn arrival(&mut self, t: i64) -> bool {
        let drained = (self.x - (t - self.lct)).max(0);
        if drained > self.l {
            return false;
        }
        self.x = drained + self.i;
        self.lct = t;
        true
    }
}

// times are whole ticks of 2^-20 s so float arithmetic is exact
const TICK: f64 = 1.0 / 1_048_576.0;

fn gcra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c7a);
    let mut verdicts = 0u64;
    let mut nonconforming = 0u64;
    for pair in 0..20 {
        let i = rng.gen_range(16..2048i64);
        let l = rng.gen_range(0..8 * i);
        let mut g = Gcra::new(i as f64 * TICK, l as f64 * TICK).map_err(|e| e.to_string())?;
        let mut b = Bucket { i, l, x: 0, lct: 0 };
        let mut t = 0i64;
        for n in 0..5_000 {
            t += rng.gen_range(0..2 * i);
            let got = g.arrival(t as f64 * TICK).map_err(|e| e.to_string())?;
            let want = b.arrival(t);
            ensure!(got == want, "pair {pair} (I={i}, L={l}) arrival {n}: gcra {got}, bucket {want}");
            verdicts += 1;
            nonconforming += !want as u64;
        }
    }
    ensure!(verdicts == 100_000, "{verdicts} verdicts");
    ensure!(nonconforming > 1000, "too few non-conforming cells to be meaningful");

    let mut sweep = 0;
    for i in [64i64, 100, 256, 1000] {
        for l in [0i64, 1, 37, 255, 1000, 5000] {
            for delta in [0i64, 1, i / 4, i / 2 + 1, i - 1] {
                let expect = 1 + l / (i - delta);
                let mut g = Gcra::new(i as f64 * TICK, l as f64 * TICK).map_err(|e| e.to_string())?;
                let mut burst = 0i64;
                for n in 0..(expect + 5) {
                    if !g.arrival((n * delta) as f64 * TICK).map_err(|e| e.to_string())? {
                        break;
                    }
                    burst += 1;
                }
                ensure!(burst == expect, "I={i} L={l} delta={delta}: burst {burst}, want {expect}");
                sweep += 1;
            }
        }
    }
    Ok(format!("{verdicts} verdicts identical ({nonconforming} non-conforming); {sweep} burst cases"))
}

// 10 ---------------------------------------------------------------------

fn pnni() -> Outcome {
    let text = lab("lab9_pnni.cfg");
    let mut k = build(&text, 1)?;
    k.run_until(60.0).map_err(|e| e.to_string())?;

    // oracle inputs straight from the config text
    struct Decl {
        pg: String,
        priority: u32,
        index: u64,
    }
    let mut decls: BTreeMap<String, Decl> = BTreeMap::new();
    let mut edges: Vec<(String, String, u32)> = Vec::new();
    let mut index = 0;
    for line in text.lines() {
        let mut w = line.split_whitespace();
        match w.next() {
            Some("node") => {
                let name = w.next().unwrap_or_default().to_string();
                let kv: BTreeMap<&str, &str> = w.filter_map(|t| t.split_once('=')).collect();
                index += 1;
                decls.insert(
                    name,
                    Decl {
                        pg: kv.get("pg").copied().unwrap_or_default().to_string(),
                        priority: kv.get("priority").and_then(|p| p.parse().ok()).unwrap_or(0),
                        index,
                    },
                );
            }
            Some("link") => {
                let a = w.next().unwrap_or_default().to_string();
                let b = w.next().unwrap_or_default().to_string();
                let kv: BTreeMap<&str, &str> = w.filter_map(|t| t.split_once('=')).collect();
                let m = kv.get("metric").and_then(|m| m.parse().ok()).unwrap_or(1);
                edges.push((a, b, m));
            }
            _ => {}
        }
    }
    ensure!(decls.len() == 8, "{} nodes", decls.len());
    let groups: BTreeSet<String> = decls.values().map(|d| d.pg.clone()).collect();
    ensure!(groups.len() == 2, "{} peer groups", groups.len());

    let mut leaders = BTreeMap::new();
    for pg in &groups {
        let members: Vec<String> = decls.iter().filter(|(_, d)| &d.pg == pg).map(|(n, _)| n.clone()).collect();
        let want = members
            .iter()
            .max_by_key(|n| (decls[*n].priority, decls[*n].index))
            .map(|n| format!("{pg}.{}", decls[n].index))
            .ok_or("empty group")?;
        let mut level0 = None;
        for m in &members {
            let node = k.component_by_name::<PnniNode>(m).ok_or("pnni node")?;
            let leader = node.leader().map(|l| l.to_string());
            ensure!(leader.as_deref() == Some(want.as_str()), "{m} elects {leader:?}, want {want}");
            let own: Vec<_> = node.db().values().filter(|p| p.level == 0).cloned().collect();
            ensure!(own.iter().all(|p| &p.origin.pg == pg), "{m} holds another group's internal PTSE");
            match &level0 {
                None => level0 = Some(own),
                Some(first) => ensure!(first == &own, "{m} database differs from {}", members[0]),
            }
            let (nodes, links) = netlab_core::labs::pnni::parent_view(node.db());
            ensure!(nodes.len() == 2 && links.len() == 1, "{m} sees {nodes:?} / {links:?} at the parent level");
        }
        leaders.insert(pg.clone(), want);
    }

    // logical link metric: leader to border by shortest path, plus the border link
    let dist = |from: &str, to: &str, pg: &str| -> u32 {
        let mut d: BTreeMap<&str, u32> = decls.keys().map(|n| (n.as_str(), u32::MAX)).collect();
        d.insert(from, 0);
        for _ in 0..decls.len() {
            for (a, b, m) in &edges {
                if decls[a].pg != pg || decls[b].pg != pg {
                    continue;
                }
                for (x, y) in [(a, b), (b, a)] {
                    let via = d[x.as_str()].saturating_add(*m);
                    if via < d[y.as_str()] {
                        d.insert(y.as_str(), via);
                    }
                }
            }
        }
        d[to]
    };
    let (ba, bb, bm) = edges
        .iter()
        .find(|(a, b, _)| decls[a].pg != decls[b].pg)
        .cloned()
        .ok_or("no border link")?;
    let mut metrics = BTreeMap::new();
    for (pg, border) in [(decls[&ba].pg.clone(), &ba), (decls[&bb].pg.clone(), &bb)] {
        let leader = decls
            .iter()
            .find(|(_, d)| d.pg == pg && leaders[&pg] == format!("{pg}.{}", d.index))
            .map(|(n, _)| n.clone())
            .ok_or("leader name")?;
        metrics.insert(pg, dist(&leader, border, &decls[border].pg) + bm);
    }
    let node = k.component_by_name::<PnniNode>("a1").ok_or("a1")?;
    for p in node.db().values() {
        if let PtseContent::LogicalLink { from_pg, metric, withdrawn: false, .. } = &p.content {
            ensure!(metrics.get(from_pg) == Some(metric), "logical link from {from_pg} has metric {metric}, want {:?}", metrics.get(from_pg));
        }
    }

    let mut sends: HashMap<(String, String, String, String), u32> = HashMap::new();
    let mut border_leaks = 0;
    for r in k.trace().records() {
        if r.kind == "ptsp_tx" || r.kind == "ptsp_retx" {
            let key = (
                r.comp.clone(),
                r.get("port").unwrap_or_default().to_string(),
                r.get("key").unwrap_or_default().to_string(),
                r.get("seq").unwrap_or_default().to_string(),
            );
            *sends.entry(key).or_default() += 1;
        }
        if r.kind == "violation" {
            border_leaks += 1;
        }
    }
    let twice = sends.values().filter(|n| **n > 1).count();
    ensure!(twice == 0, "{twice} PTSE instances sent twice on one link");
    ensure!(border_leaks == 0, "{border_leaks} violations recorded");
    Ok(format!(
        "leaders {}; databases identical; parent level 2 nodes / 1 link; {} PTSP sends, none repeated",
        leaders.values().cloned().collect::<Vec<_>>().join(" "),
        sends.len()
    ))
}

// 11 ---------------------------------------------------------------------

fn command_replay() -> Outcome {
    let text = lab("lab7_tcp.cfg");
    let mut s = Session::default();
    s.apply(Command::SetDebug { level: 3 })?;
    s.apply(Command::SetStopTime { t: 30.0 })?;
    s.load_text("lab7_tcp.cfg", &text, 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    s.apply(Command::Pause)?;
    for step in 0..40 {
        let n = rng.gen_range(1..120);
        for _ in 0..n {
            if !s.dispatch_one()? {
                break;
            }
        }
        let cmd = match step % 8 {
            0 => Command::InjectSend { component: "a.app".into(), payload: format!("hello {step}") },
            1 => Command::Step { count: Some(rng.gen_range(1..20)) },
            2 => Command::SetDelay { ms: 0.0 },
            3 if step == 11 => Command::FailLink { link: "net-b".into() },
            3 if step == 27 => Command::RepairLink { link: "net-b".into() },
            4 => Command::Snapshot,
            5 => Command::SetDebug { level: rng.gen_range(0..4) },
            6 => Command::InjectSend { component: "b.app".into(), payload: "reply".into() },
            _ => Command::Resume,
        };
        s.apply(cmd)?;
        s.apply(Command::Pause)?;
    }
    s.apply(Command::SetStopTime { t: 60.0 })?;
    while s.dispatch_one()? {}
    let k = s.kernel().ok_or("kernel")?;
    let original: Vec<String> = k.trace().records().iter().map(|r| r.to_string()).collect();

    let script = parse_script(&render_script(s.log()))?;
    ensure!(script == s.log(), "script did not round-trip through text");
    let replayed = replay(&text, 9, 30.0, &script)?;
    let again: Vec<String> = replayed.trace().records().iter().map(|r| r.to_string()).collect();
    ensure!(original.len() > 1000, "too little happened ({} records)", original.len());
    ensure!(again == original, "replayed trace differs ({} vs {} records)", again.len(), original.len());
    ensure!(replayed.now() == k.now() && replayed.dispatched() == k.dispatched(), "replay ended elsewhere");
    Ok(format!("{} commands, {} records replayed identically", script.len(), original.len()))
}

// ------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("kernel ordering", kernel_ordering),
        ("determinism", determinism),
        ("go-back-n", gbn),
        ("csma/cd", csma),
        ("token ring", token_ring),
        ("bridging", bridging),
        ("ip fragmentation", ip_fragmentation),
        ("tcp reno", tcp),
        ("gcra", gcra),
        ("pnni", pnni),
        ("command replay", command_replay),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}) [{secs:.1}s]", n + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

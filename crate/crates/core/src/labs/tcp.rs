//! TCP window flow control and congestion control (Reno, optionally Tahoe).

use std::any::Any;
use std::collections::BTreeMap;

use serde_json::json;

use crate::kernel::{Component, Ctx, EventHandle, HandlerResult, Message, Port};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

/// TCP plus IP header bytes on every segment.
pub const HEADER_BYTES: u64 = 40;
pub const RTO_MAX: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub seq: u64,
    /// Next byte expected by the sender of this segment.
    pub ack: u64,
    pub data: Vec<u8>,
}

impl Segment {
    pub fn size_bits(&self) -> u64 {
        (self.data.len() as u64 + HEADER_BYTES) * 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SlowStart,
    CongestionAvoidance,
    FastRecovery,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SlowStart => "slow_start",
            Mode::CongestionAvoidance => "congestion_avoidance",
            Mode::FastRecovery => "fast_recovery",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Reno,
    Tahoe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcpConfig {
    pub mss: u64,
    pub rwnd: u64,
    /// Initial window in bytes.
    pub init_cwnd: u64,
    pub ssthresh: u64,
    pub rto: f64,
    pub variant: Variant,
    /// Jacobson/Karels RTT estimation instead of a fixed RTO.
    pub estimate_rtt: bool,
}

impl TcpConfig {
    pub fn new(mss: u64) -> Self {
        TcpConfig {
            mss,
            rwnd: u64::MAX / 4,
            init_cwnd: mss,
            ssthresh: 64 * mss,
            rto: 1.0,
            variant: Variant::Reno,
            estimate_rtt: false,
        }
    }
}

/// What the sender did in reaction to an ACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckOutcome {
    /// Outside [snd_una, snd_max]; ignored.
    Invalid,
    NewData,
    Duplicate,
    /// Third duplicate: the segment at snd_una must be resent.
    FastRetransmit,
    /// Nothing outstanding; no effect.
    Stale,
}

/// Sender state. Sequence numbers are byte offsets into the stream.
#[derive(Debug, Clone)]
pub struct TcpSender {
    cfg: TcpConfig,
    cwnd: u64,
    ssthresh: u64,
    snd_una: u64,
    snd_nxt: u64,
    snd_max: u64,
    dup_acks: u32,
    mode: Mode,
    rto: f64,
    srtt: Option<f64>,
    rttvar: f64,
    /// Segment being timed: (seq, send time). Cleared on retransmission.
    timing: Option<(u64, f64)>,
    stream: Vec<u8>,
}

impl TcpSender {
    pub fn new(cfg: TcpConfig) -> Self {
        let mode = if cfg.init_cwnd < cfg.ssthresh {
            Mode::SlowStart
        } else {
            Mode::CongestionAvoidance
        };
        TcpSender {
            cwnd: cfg.init_cwnd,
            ssthresh: cfg.ssthresh,
            snd_una: 0,
            snd_nxt: 0,
            snd_max: 0,
            dup_acks: 0,
            mode,
            rto: cfg.rto,
            srtt: None,
            rttvar: 0.0,
            timing: None,
            stream: Vec::new(),
            cfg,
        }
    }

    pub fn cwnd(&self) -> u64 {
        self.cwnd
    }

    pub fn ssthresh(&self) -> u64 {
        self.ssthresh
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn snd_una(&self) -> u64 {
        self.snd_una
    }

    pub fn snd_nxt(&self) -> u64 {
        self.snd_nxt
    }

    pub fn snd_max(&self) -> u64 {
        self.snd_max
    }

    pub fn rto(&self) -> f64 {
        self.rto
    }

    pub fn dup_acks(&self) -> u32 {
        self.dup_acks
    }

    pub fn mss(&self) -> u64 {
        self.cfg.mss
    }

    pub fn outstanding(&self) -> u64 {
        self.snd_nxt - self.snd_una
    }

    pub fn buffered(&self) -> u64 {
        self.stream.len() as u64
    }

    pub fn has_unacked(&self) -> bool {
        self.snd_max > self.snd_una
    }

    /// Appends application bytes to the send stream.
    pub fn write(&mut self, data: &[u8]) {
        self.stream.extend_from_slice(data);
    }

    fn window(&self) -> u64 {
        self.cwnd.min(self.cfg.rwnd)
    }

    fn segment_at(&self, seq: u64) -> Segment {
        let end = (seq + self.cfg.mss).min(self.stream.len() as u64);
        Segment {
            seq,
            ack: 0,
            data: self.stream[seq as usize..end as usize].to_vec(),
        }
    }

    /// Next segment the window allows, if any. Segments below snd_max are
    /// retransmissions.
    pub fn next_segment(&mut self, now: f64) -> Option<Segment> {
        if self.snd_nxt >= self.stream.len() as u64 {
            return None;
        }
        let seg = self.segment_at(self.snd_nxt);
        let len = seg.data.len() as u64;
        if self.outstanding() + len > self.window() {
            return None;
        }
        if self.snd_nxt >= self.snd_max && self.timing.is_none() {
            self.timing = Some((seg.seq, now));
        }
        self.snd_nxt += len;
        self.snd_max = self.snd_max.max(self.snd_nxt);
        Some(seg)
    }

    /// Segment at snd_una for a fast retransmit.
    pub fn retransmit_head(&mut self) -> Segment {
        self.timing = None;
        self.segment_at(self.snd_una)
    }

    fn grow(&mut self) {
        let mss = self.cfg.mss;
        if self.cwnd < self.ssthresh {
            self.cwnd += mss;
        } else {
            self.cwnd += (mss * mss / self.cwnd).max(1);
        }
        self.mode = if self.cwnd < self.ssthresh {
            Mode::SlowStart
        } else {
            Mode::CongestionAvoidance
        };
    }

    fn halve(&self) -> u64 {
        let flight = self.snd_max - self.snd_una;
        (flight / 2).max(2 * self.cfg.mss)
    }

    pub fn on_ack(&mut self, ackno: u64, now: f64) -> AckOutcome {
        if ackno < self.snd_una || ackno > self.snd_max {
            return AckOutcome::Invalid;
        }
        if ackno > self.snd_una {
            if let Some((seq, sent)) = self.timing {
                if ackno > seq {
                    self.sample_rtt(now - sent);
                    self.timing = None;
                }
            }
            self.snd_una = ackno;
            self.snd_nxt = self.snd_nxt.max(ackno);
            self.dup_acks = 0;
            if self.mode == Mode::FastRecovery {
                self.cwnd = self.ssthresh;
                self.mode = Mode::CongestionAvoidance;
            } else {
                self.grow();
            }
            if !self.cfg.estimate_rtt {
                self.rto = self.cfg.rto;
            }
            return AckOutcome::NewData;
        }
        if !self.has_unacked() {
            return AckOutcome::Stale;
        }
        self.dup_acks += 1;
        let mss = self.cfg.mss;
        if self.mode == Mode::FastRecovery {
            self.cwnd += mss;
            return AckOutcome::Duplicate;
        }
        if self.dup_acks == 3 {
            self.ssthresh = self.halve();
            match self.cfg.variant {
                Variant::Reno => {
                    self.cwnd = self.ssthresh + 3 * mss;
                    self.mode = Mode::FastRecovery;
                }
                Variant::Tahoe => {
                    self.cwnd = mss;
                    self.mode = Mode::SlowStart;
                    self.snd_nxt = self.snd_una + (self.stream.len() as u64 - self.snd_una).min(mss);
                }
            }
            return AckOutcome::FastRetransmit;
        }
        AckOutcome::Duplicate
    }

    /// Retransmission timeout: back to slow start from snd_una.
    pub fn on_rto(&mut self) {
        self.ssthresh = self.halve();
        self.cwnd = self.cfg.mss;
        self.mode = Mode::SlowStart;
        self.snd_nxt = self.snd_una;
        self.dup_acks = 0;
        self.timing = None;
        self.rto = (self.rto * 2.0).min(RTO_MAX);
    }

    fn sample_rtt(&mut self, r: f64) {
        if !self.cfg.estimate_rtt {
            return;
        }
        match self.srtt {
            None => {
                self.srtt = Some(r);
                self.rttvar = r / 2.0;
            }
            Some(s) => {
                self.rttvar = 0.75 * self.rttvar + 0.25 * (s - r).abs();
                self.srtt = Some(0.875 * s + 0.125 * r);
            }
        }
        let srtt = self.srtt.unwrap_or(r);
        self.rto = (srtt + 4.0 * self.rttvar).clamp(0.2, RTO_MAX);
    }
}

/// Receiver: buffers out-of-order segments and acknowledges every segment
/// with the next byte expected.
#[derive(Debug, Clone, Default)]
pub struct TcpReceiver {
    rcv_nxt: u64,
    out_of_order: BTreeMap<u64, Vec<u8>>,
}

impl TcpReceiver {
    pub fn rcv_nxt(&self) -> u64 {
        self.rcv_nxt
    }

    /// Returns the in-order bytes released by this segment.
    pub fn on_segment(&mut self, seq: u64, data: Vec<u8>) -> Vec<u8> {
        let end = seq + data.len() as u64;
        if end <= self.rcv_nxt {
            return Vec::new();
        }
        if seq > self.rcv_nxt {
            self.out_of_order.entry(seq).or_insert(data);
            return Vec::new();
        }
        let mut out = data[(self.rcv_nxt - seq) as usize..].to_vec();
        self.rcv_nxt = end;
        while let Some((&s, _)) = self.out_of_order.first_key_value() {
            if s > self.rcv_nxt {
                break;
            }
            let (s, d) = self.out_of_order.pop_first().unwrap_or_default();
            let e = s + d.len() as u64;
            if e > self.rcv_nxt {
                out.extend_from_slice(&d[(self.rcv_nxt - s) as usize..]);
                self.rcv_nxt = e;
            }
        }
        out
    }
}

/// Colors of the sequence plot series.
pub fn series_color(series: &str) -> &'static str {
    match series {
        "sent_seq" => "red",
        "ack_seq" => "gold",
        "recv_seq" => "darkbrown",
        _ => "black",
    }
}

/// Transport layer holding both a sender and a receiver; the connection
/// exists from t=0.
pub struct TcpLayer {
    sender: TcpSender,
    receiver: TcpReceiver,
    timer: Option<EventHandle>,
    segments_sent: u64,
    retransmits: u64,
    timeouts: u64,
    fast_retransmits: u64,
}

impl TcpLayer {
    pub fn new(cfg: TcpConfig) -> Self {
        TcpLayer {
            sender: TcpSender::new(cfg),
            receiver: TcpReceiver::default(),
            timer: None,
            segments_sent: 0,
            retransmits: 0,
            timeouts: 0,
            fast_retransmits: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let mss = spec.u64("mss", 1000)?;
        if mss == 0 {
            return Err(spec.bad("mss", "0"));
        }
        let mut cfg = TcpConfig::new(mss);
        cfg.rwnd = spec.u64("rwnd", cfg.rwnd)?;
        cfg.init_cwnd = spec.u64("init_cwnd", 1)? * mss;
        cfg.ssthresh = spec.u64("ssthresh", cfg.ssthresh)?;
        cfg.rto = spec.positive("rto", 1.0)?;
        cfg.variant = match spec.str("variant", "reno") {
            "reno" => Variant::Reno,
            "tahoe" => Variant::Tahoe,
            other => return Err(spec.bad("variant", other)),
        };
        cfg.estimate_rtt = spec.bool("rtt_estimation", false)?;
        Ok(TcpLayer::new(cfg))
    }

    pub fn sender(&self) -> &TcpSender {
        &self.sender
    }

    pub fn receiver(&self) -> &TcpReceiver {
        &self.receiver
    }

    fn plot(ctx: &mut Ctx<'_>, series: &str, value: u64) {
        ctx.emit(
            TraceRecord::new(2, "plot")
                .with("series", series)
                .with("value", value)
                .with("color", series_color(series)),
        );
    }

    fn plot_cwnd(&self, ctx: &mut Ctx<'_>) {
        ctx.emit(
            TraceRecord::new(2, "plot")
                .with("series", "cwnd")
                .with("value", self.sender.cwnd())
                .with("ssthresh", self.sender.ssthresh())
                .with("mode", self.sender.mode().as_str()),
        );
    }

    fn transmit(&mut self, ctx: &mut Ctx<'_>, mut seg: Segment, retx: bool) -> HandlerResult {
        seg.ack = self.receiver.rcv_nxt();
        self.segments_sent += 1;
        let color = if retx {
            self.retransmits += 1;
            Color::Retransmitted
        } else {
            Color::Data
        };
        Self::plot(ctx, "sent_seq", seg.seq);
        ctx.emit(
            TraceRecord::new(1, "seg_out")
                .with("seq", seg.seq)
                .with("len", seg.data.len())
                .with("color", color),
        );
        let bits = seg.size_bits();
        ctx.send(Port::Net(0), Pdu::new(Body::Tcp(seg), bits, color))
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>, restart: bool) -> HandlerResult {
        if restart || !self.sender.has_unacked() {
            if let Some(h) = self.timer.take() {
                ctx.cancel(h);
            }
        }
        if self.sender.has_unacked() && self.timer.is_none() {
            self.timer = Some(ctx.timer(self.sender.rto(), 0)?);
        }
        Ok(())
    }

    fn pump(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        let now = ctx.now();
        loop {
            let max = self.sender.snd_max();
            let Some(seg) = self.sender.next_segment(now) else {
                break;
            };
            let retx = seg.seq < max;
            self.transmit(ctx, seg, retx)?;
        }
        self.arm(ctx, false)
    }

    fn on_segment(&mut self, ctx: &mut Ctx<'_>, pdu: Pdu) -> HandlerResult {
        let Body::Tcp(seg) = pdu.body else {
            return Err(ctx.fault(format!("tcp cannot consume {}", pdu.body.label())));
        };
        if pdu.corrupted {
            ctx.emit(TraceRecord::new(0, "drop").with("reason", "corrupted").with("seq", seg.seq));
            return Ok(());
        }
        if !seg.data.is_empty() {
            Self::plot(ctx, "recv_seq", seg.seq);
            let released = self.receiver.on_segment(seg.seq, seg.data);
            if !released.is_empty() && ctx.is_wired(Port::Up) {
                ctx.send(Port::Up, Pdu::sdu(released))?;
            }
            let ack = Segment {
                seq: self.sender.snd_nxt(),
                ack: self.receiver.rcv_nxt(),
                data: Vec::new(),
            };
            ctx.emit(TraceRecord::new(2, "ack_out").with("ack", ack.ack));
            let bits = ack.size_bits();
            return ctx.send(Port::Net(0), Pdu::new(Body::Tcp(ack), bits, Color::Ack));
        }

        Self::plot(ctx, "ack_seq", seg.ack);
        match self.sender.on_ack(seg.ack, ctx.now()) {
            AckOutcome::Invalid => {
                ctx.emit(
                    TraceRecord::new(2, "ack_ignored")
                        .with("ack", seg.ack)
                        .with("snd_una", self.sender.snd_una())
                        .with("snd_max", self.sender.snd_max()),
                );
                return Ok(());
            }
            AckOutcome::Stale => return Ok(()),
            AckOutcome::NewData => {
                self.plot_cwnd(ctx);
                self.arm(ctx, true)?;
            }
            AckOutcome::Duplicate => self.plot_cwnd(ctx),
            AckOutcome::FastRetransmit => {
                self.fast_retransmits += 1;
                ctx.emit(
                    TraceRecord::new(0, "fast_retransmit")
                        .with("seq", self.sender.snd_una())
                        .with("ssthresh", self.sender.ssthresh()),
                );
                self.plot_cwnd(ctx);
                let head = self.sender.retransmit_head();
                self.transmit(ctx, head, true)?;
                self.arm(ctx, true)?;
            }
        }
        self.pump(ctx)
    }
}

impl Component for TcpLayer {
    fn kind(&self) -> &'static str {
        "tcp"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                self.plot_cwnd(ctx);
                Ok(())
            }
            Message::Timer(_) => {
                self.timer = None;
                if !self.sender.has_unacked() {
                    return Ok(());
                }
                self.timeouts += 1;
                self.sender.on_rto();
                ctx.emit(
                    TraceRecord::new(0, "timeout")
                        .with("snd_una", self.sender.snd_una())
                        .with("rto", self.sender.rto()),
                );
                self.plot_cwnd(ctx);
                self.pump(ctx)
            }
            Message::Deliver { port: Port::Up, pdu } => match pdu.body {
                Body::Bytes(data) => {
                    self.sender.write(&data);
                    self.pump(ctx)
                }
                Body::Flow(_) => Ok(()),
                other => Err(ctx.fault(format!("tcp cannot send {}", other.label()))),
            },
            Message::Deliver { pdu, .. } => self.on_segment(ctx, pdu),
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        let s = &self.sender;
        json!({
            "kind": "tcp",
            "cwnd": s.cwnd(),
            "ssthresh": s.ssthresh(),
            "mode": s.mode().as_str(),
            "snd_una": s.snd_una(),
            "snd_nxt": s.snd_nxt(),
            "snd_max": s.snd_max(),
            "rto": s.rto(),
            "rcv_nxt": self.receiver.rcv_nxt(),
            "segments_sent": self.segments_sent,
            "retransmits": self.retransmits,
            "timeouts": self.timeouts,
            "fast_retransmits": self.fast_retransmits,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

//! CSMA/CD on a shared bus.

use std::any::Any;
use std::collections::{BTreeMap, HashMap, VecDeque};

use serde_json::json;
use thiserror::Error;

use crate::kernel::{Attachment, Component, Ctx, EventHandle, HandlerResult, Message, Port};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

pub const SLOT_BITS: u64 = 512;
pub const JAM_BITS: u64 = 32;
pub const IFG_BITS: u64 = 96;
pub const ATTEMPT_LIMIT: u32 = 16;
pub const BACKOFF_CAP: u32 = 10;
pub const HEADER_BYTES: usize = 18;
pub const MIN_FRAME_BYTES: usize = 64;
pub const BROADCAST: &str = "*";

#[derive(Debug, Clone, PartialEq)]
pub struct MacFrame {
    pub src: String,
    pub dst: String,
    pub id: u64,
    pub data: Vec<u8>,
}

impl MacFrame {
    pub fn size_bits(&self) -> u64 {
        ((self.data.len() + HEADER_BYTES).max(MIN_FRAME_BYTES) * 8) as u64
    }
}

/// Signals between stations and the bus.
#[derive(Debug, Clone, PartialEq)]
pub enum BusSignal {
    /// Station starts putting bits on the wire.
    TxStart(MacFrame),
    /// Station stops; `aborted` after a collision and jam.
    TxEnd { aborted: bool },
    /// Leading edge of someone's signal reached this station.
    CarrierOn,
    /// Trailing edge passed.
    CarrierOff,
    /// A complete, clean frame reached this station.
    Frame(MacFrame),
}

impl BusSignal {
    pub fn label(&self) -> String {
        match self {
            BusSignal::TxStart(f) => format!("txstart:{}#{}", f.src, f.id),
            BusSignal::TxEnd { aborted } => format!("txend:{}", *aborted as u8),
            BusSignal::CarrierOn => "carrier_on".into(),
            BusSignal::CarrierOff => "carrier_off".into(),
            BusSignal::Frame(f) => format!("frame:{}#{}", f.src, f.id),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("attempt {0} outside 1..=16")]
pub struct AttemptOutOfRange(pub u32);

/// Truncated binary exponential backoff: floor(r * 2^min(attempt, 10)).
pub fn backoff_slots(attempt: u32, r: f64) -> Result<u64, AttemptOutOfRange> {
    if !(1..=ATTEMPT_LIMIT).contains(&attempt) {
        return Err(AttemptOutOfRange(attempt));
    }
    let range = 1u64 << attempt.min(BACKOFF_CAP);
    Ok(((r * range as f64).floor() as u64).min(range - 1))
}

fn bus_pdu(sig: BusSignal) -> Pdu {
    let (bits, color) = match &sig {
        BusSignal::TxStart(f) | BusSignal::Frame(f) => (f.size_bits(), Color::Data),
        _ => (1, Color::Control),
    };
    Pdu::new(Body::Bus(sig), bits, color)
}

#[derive(Debug, Clone)]
struct Transmission {
    port: u16,
    start: f64,
    end: Option<f64>,
    frame: MacFrame,
    aborted: bool,
}

/// The shared medium. Each attached station sits at a position given by the
/// propagation delay of its attachment; signals between two stations take
/// the difference of their positions.
#[derive(Default)]
pub struct Bus {
    positions: BTreeMap<u16, f64>,
    txs: BTreeMap<u64, Transmission>,
    next_tx: u64,
    active: HashMap<u16, u64>,
    /// Delivery checks pending: timer tag -> (transmission, receiver).
    checks: HashMap<u64, (u64, u16)>,
    next_tag: u64,
    delivered: u64,
    garbled: u64,
}

impl Bus {
    pub fn from_spec(_spec: &Spec<'_>) -> Result<Self, BuildError> {
        Ok(Bus::default())
    }

    fn delay(&self, a: u16, b: u16) -> f64 {
        (self.positions[&a] - self.positions[&b]).abs()
    }

    fn overlaps_at(&self, idx: u64, rx: u16) -> bool {
        let t = &self.txs[&idx];
        let d = self.delay(t.port, rx);
        let (a0, a1) = (t.start + d, t.end.unwrap_or(f64::INFINITY) + d);
        self.txs.iter().any(|(&j, o)| {
            if j == idx {
                return false;
            }
            let dj = self.delay(o.port, rx);
            let (b0, b1) = (o.start + dj, o.end.unwrap_or(f64::INFINITY) + dj);
            b0 < a1 && a0 < b1
        })
    }

    fn prune(&mut self, now: f64) {
        // forget transmissions whose signal has left the whole bus, unless a
        // check still refers to them
        let span = self.positions.values().fold(0.0f64, |m, &p| m.max(p))
            - self.positions.values().fold(f64::INFINITY, |m, &p| m.min(p));
        let referenced: std::collections::HashSet<u64> = self.checks.values().map(|c| c.0).collect();
        self.txs.retain(|id, t| {
            referenced.contains(id) || t.end.is_none_or(|e| e + 2.0 * span >= now)
        });
    }
}

impl Component for Bus {
    fn kind(&self) -> &'static str {
        "bus"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if let Some(Port::Net(p)) = at.port {
            self.positions.insert(p, at.link.delay);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver {
                port: Port::Net(p),
                pdu,
            } => {
                let Body::Bus(sig) = pdu.body else {
                    return Err(ctx.fault(format!("bus cannot carry {}", pdu.body.label())));
                };
                let now = ctx.now();
                let others: Vec<u16> = self.positions.keys().copied().filter(|&q| q != p).collect();
                match sig {
                    BusSignal::TxStart(frame) => {
                        self.prune(now);
                        let id = self.next_tx;
                        self.next_tx += 1;
                        self.txs.insert(
                            id,
                            Transmission {
                                port: p,
                                start: now,
                                end: None,
                                frame,
                                aborted: false,
                            },
                        );
                        self.active.insert(p, id);
                        for q in others {
                            ctx.send_after(Port::Net(q), self.delay(p, q), bus_pdu(BusSignal::CarrierOn))?;
                        }
                        Ok(())
                    }
                    BusSignal::TxEnd { aborted } => {
                        let Some(idx) = self.active.remove(&p) else {
                            return Err(ctx.fault(format!("end of transmission on idle port {p}")));
                        };
                        let t = self.txs.get_mut(&idx).expect("active transmission");
                        t.end = Some(now);
                        t.aborted = aborted;
                        let t = &self.txs[&idx];
                        ctx.emit(
                            TraceRecord::new(1, "bus_end")
                                .with("from", &t.frame.src)
                                .with("id", t.frame.id)
                                .with("start", t.start)
                                .with("end", now)
                                .with("aborted", aborted as u8),
                        );
                        for q in others {
                            let d = self.delay(p, q);
                            ctx.send_after(Port::Net(q), d, bus_pdu(BusSignal::CarrierOff))?;
                            if !aborted {
                                let tag = self.next_tag;
                                self.next_tag += 1;
                                self.checks.insert(tag, (idx, q));
                                ctx.timer(d, tag)?;
                            }
                        }
                        Ok(())
                    }
                    other => Err(ctx.fault(format!("station sent {}", other.label()))),
                }
            }
            Message::Timer(tag) => {
                let Some((idx, q)) = self.checks.remove(&tag) else {
                    return Ok(());
                };
                if self.overlaps_at(idx, q) {
                    self.garbled += 1;
                    ctx.emit(
                        TraceRecord::new(2, "garbled")
                            .with("id", self.txs[&idx].frame.id)
                            .with("from", &self.txs[&idx].frame.src)
                            .with("at", q),
                    );
                    return Ok(());
                }
                self.delivered += 1;
                let frame = self.txs[&idx].frame.clone();
                ctx.send(Port::Net(q), bus_pdu(BusSignal::Frame(frame)))
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "bus",
            "stations": self.positions.len(),
            "active": self.active.len(),
            "delivered": self.delivered,
            "garbled": self.garbled,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Idle,
    /// Carrier sensed; waiting for the medium to go quiet.
    Deferring,
    /// Waiting out the interframe gap.
    Gap,
    Transmitting,
    Jamming,
    Backoff,
}

const T_GAP: u64 = 1;
const T_TX_END: u64 = 2;
const T_JAM_END: u64 = 3;
const T_BACKOFF: u64 = 4;
const T_GENERATE: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CsmaParams {
    pub slot_bits: u64,
    pub jam_bits: u64,
    pub ifg_bits: u64,
    pub attempt_limit: u32,
}

impl Default for CsmaParams {
    fn default() -> Self {
        CsmaParams {
            slot_bits: SLOT_BITS,
            jam_bits: JAM_BITS,
            ifg_bits: IFG_BITS,
            attempt_limit: ATTEMPT_LIMIT,
        }
    }
}

/// 1-persistent CSMA/CD station. Frames come from the layer above, or from
/// a built-in generator (`frames=n` queued at `start`).
pub struct CsmaStation {
    addr: String,
    dst: String,
    params: CsmaParams,
    bit_time: f64,
    queue: VecDeque<MacFrame>,
    next_id: u64,
    state: State,
    carrier: u32,
    idle_since: f64,
    attempts: u32,
    timer: Option<EventHandle>,
    start: f64,
    frames: u64,
    frame_bytes: usize,
    sent: u64,
    collisions: u64,
    dropped: u64,
    received: u64,
}

impl CsmaStation {
    pub fn new(addr: &str, dst: &str, params: CsmaParams) -> Self {
        CsmaStation {
            addr: addr.to_string(),
            dst: dst.to_string(),
            params,
            bit_time: 1e-7,
            queue: VecDeque::new(),
            next_id: 0,
            state: State::Idle,
            carrier: 0,
            idle_since: f64::NEG_INFINITY,
            attempts: 0,
            timer: None,
            start: 0.0,
            frames: 0,
            frame_bytes: 64,
            sent: 0,
            collisions: 0,
            dropped: 0,
            received: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let params = CsmaParams {
            slot_bits: spec.u64("slot", SLOT_BITS)?,
            jam_bits: spec.u64("jam", JAM_BITS)?,
            ifg_bits: spec.u64("ifg", IFG_BITS)?,
            attempt_limit: spec.u64("attempt_limit", ATTEMPT_LIMIT as u64)?.clamp(1, 16) as u32,
        };
        let mut s = CsmaStation::new(spec.str("addr", spec.node), spec.str("dst", BROADCAST), params);
        s.start = spec.non_negative("start", 0.0)?;
        s.frames = spec.u64("frames", 0)?;
        s.frame_bytes = spec.u64("frame_bytes", 64)? as usize;
        Ok(s)
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn collisions(&self) -> u64 {
        self.collisions
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    fn bits(&self, n: u64) -> f64 {
        n as f64 * self.bit_time
    }

    fn enqueue(&mut self, data: Vec<u8>) {
        self.queue.push_back(MacFrame {
            src: self.addr.clone(),
            dst: self.dst.clone(),
            id: self.next_id,
            data,
        });
        self.next_id += 1;
    }

    fn set_timer(&mut self, ctx: &mut Ctx<'_>, delay: f64, tag: u64) -> HandlerResult {
        if let Some(h) = self.timer.take() {
            ctx.cancel(h);
        }
        self.timer = Some(ctx.timer(delay, tag)?);
        Ok(())
    }

    /// Called whenever the station may be able to start sending.
    fn try_send(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        if self.state != State::Idle || self.queue.is_empty() {
            return Ok(());
        }
        if self.carrier > 0 {
            self.state = State::Deferring;
            ctx.emit(TraceRecord::new(3, "defer"));
            return Ok(());
        }
        let ready_at = self.idle_since + self.bits(self.params.ifg_bits);
        if ready_at > ctx.now() {
            self.state = State::Gap;
            return self.set_timer(ctx, ready_at - ctx.now(), T_GAP);
        }
        self.transmit(ctx)
    }

    fn transmit(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        let Some(frame) = self.queue.front().cloned() else {
            self.state = State::Idle;
            return Ok(());
        };
        self.state = State::Transmitting;
        let bits = frame.size_bits();
        ctx.emit(
            TraceRecord::new(1, "tx_start")
                .with("id", frame.id)
                .with("attempt", self.attempts + 1)
                .with("color", if self.attempts > 0 { Color::Retransmitted } else { Color::Data }),
        );
        ctx.send(Port::Net(0), bus_pdu(BusSignal::TxStart(frame)))?;
        let t = self.bits(bits);
        self.set_timer(ctx, t, T_TX_END)
    }

    fn collide(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        self.collisions += 1;
        self.state = State::Jamming;
        let id = self.queue.front().map(|f| f.id).unwrap_or(0);
        ctx.emit(
            TraceRecord::new(0, "collision")
                .with("id", id)
                .with("attempt", self.attempts + 1),
        );
        ctx.emit(TraceRecord::new(1, "jam").with("bits", self.params.jam_bits));
        let t = self.bits(self.params.jam_bits);
        self.set_timer(ctx, t, T_JAM_END)
    }

    fn after_jam(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        ctx.send(Port::Net(0), bus_pdu(BusSignal::TxEnd { aborted: true }))?;
        self.attempts += 1;
        if self.attempts >= self.params.attempt_limit {
            let f = self.queue.pop_front();
            self.dropped += 1;
            ctx.emit(
                TraceRecord::new(0, "drop")
                    .with("reason", "attempts")
                    .with("id", f.map(|f| f.id).unwrap_or(0))
                    .with("attempts", self.attempts),
            );
            self.attempts = 0;
            self.state = State::Idle;
            self.idle_since = ctx.now();
            return self.try_send(ctx);
        }
        let r = ctx.rand();
        let k = backoff_slots(self.attempts, r).map_err(|e| ctx.fault(e.to_string()))?;
        ctx.emit(
            TraceRecord::new(1, "backoff")
                .with("attempt", self.attempts)
                .with("slots", k),
        );
        self.state = State::Backoff;
        let t = self.bits(k * self.params.slot_bits);
        self.set_timer(ctx, t, T_BACKOFF)
    }

    fn finished(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        ctx.send(Port::Net(0), bus_pdu(BusSignal::TxEnd { aborted: false }))?;
        let f = self.queue.pop_front();
        self.sent += 1;
        ctx.emit(
            TraceRecord::new(0, "tx_ok")
                .with("id", f.map(|f| f.id).unwrap_or(0))
                .with("attempts", self.attempts + 1),
        );
        self.attempts = 0;
        self.state = State::Idle;
        self.idle_since = ctx.now();
        self.try_send(ctx)
    }

    fn on_bus(&mut self, ctx: &mut Ctx<'_>, sig: BusSignal) -> HandlerResult {
        match sig {
            BusSignal::CarrierOn => {
                self.carrier += 1;
                if self.state == State::Transmitting {
                    self.collide(ctx)?;
                }
                Ok(())
            }
            BusSignal::CarrierOff => {
                self.carrier = self.carrier.saturating_sub(1);
                if self.carrier == 0 {
                    self.idle_since = ctx.now();
                    if self.state == State::Deferring {
                        self.state = State::Idle;
                        self.try_send(ctx)?;
                    }
                }
                Ok(())
            }
            BusSignal::Frame(f) => {
                if f.dst == self.addr || f.dst == BROADCAST {
                    self.received += 1;
                    ctx.emit(TraceRecord::new(1, "rx").with("src", &f.src).with("id", f.id));
                    if ctx.is_wired(Port::Up) {
                        ctx.send(Port::Up, Pdu::sdu(f.data))?;
                    }
                }
                Ok(())
            }
            other => Err(ctx.fault(format!("bus sent {}", other.label()))),
        }
    }
}

impl Component for CsmaStation {
    fn kind(&self) -> &'static str {
        "csma"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if at.port.is_some() {
            self.bit_time = 1.0 / at.link.bw;
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                if self.frames > 0 {
                    ctx.schedule_at(self.start.max(ctx.now()), Message::Timer(T_GENERATE))?;
                }
                Ok(())
            }
            Message::Timer(tag) => {
                if tag != T_GENERATE {
                    self.timer = None;
                }
                match tag {
                    T_GENERATE => {
                        for _ in 0..self.frames {
                            let data = vec![0u8; self.frame_bytes.saturating_sub(HEADER_BYTES)];
                            self.enqueue(data);
                        }
                        self.try_send(ctx)
                    }
                    T_GAP => {
                        self.state = State::Idle;
                        if self.carrier > 0 {
                            self.state = State::Deferring;
                            return Ok(());
                        }
                        self.transmit(ctx)
                    }
                    T_TX_END => self.finished(ctx),
                    T_JAM_END => self.after_jam(ctx),
                    T_BACKOFF => {
                        self.state = State::Idle;
                        self.try_send(ctx)
                    }
                    _ => Ok(()),
                }
            }
            Message::Deliver { port: Port::Up, pdu } => match pdu.body {
                Body::Bytes(data) => {
                    self.enqueue(data);
                    self.try_send(ctx)
                }
                other => Err(ctx.fault(format!("csma cannot send {}", other.label()))),
            },
            Message::Deliver { pdu, .. } => match pdu.body {
                Body::Bus(sig) => self.on_bus(ctx, sig),
                other => Err(ctx.fault(format!("csma cannot consume {}", other.label()))),
            },
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "csma",
            "addr": self.addr,
            "queue": self.queue.len(),
            "attempts": self.attempts,
            "sent": self.sent,
            "collisions": self.collisions,
            "dropped": self.dropped,
            "received": self.received,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

//! Token ring with one-bit station delay, 802.5 priority reservation and
//! stacking, and a monitor station that regenerates lost tokens.

use std::any::Any;
use std::collections::VecDeque;

use serde_json::json;

use crate::kernel::{Attachment, Component, Ctx, HandlerResult, Message, Port, Side};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

pub const TOKEN_BITS: u64 = 24;
pub const HEADER_BYTES: usize = 21;
pub const BROADCAST: &str = "*";

#[derive(Debug, Clone, PartialEq)]
pub enum RingPdu {
    Token {
        priority: u8,
        reservation: u8,
    },
    Frame {
        src: String,
        dst: String,
        id: u64,
        priority: u8,
        reservation: u8,
        data: Vec<u8>,
    },
}

impl RingPdu {
    pub fn label(&self) -> String {
        match self {
            RingPdu::Token {
                priority,
                reservation,
            } => format!("token:{priority}/{reservation}"),
            RingPdu::Frame { src, id, .. } => format!("frame:{src}#{id}"),
        }
    }

    pub fn size_bits(&self) -> u64 {
        match self {
            RingPdu::Token { .. } => TOKEN_BITS,
            RingPdu::Frame { data, .. } => ((data.len() + HEADER_BYTES) * 8) as u64,
        }
    }
}

fn ring_pdu(p: RingPdu) -> Pdu {
    let bits = p.size_bits();
    let color = match p {
        RingPdu::Token { .. } => Color::Control,
        RingPdu::Frame { .. } => Color::Data,
    };
    Pdu::new(Body::Ring(p), bits, color)
}

/// Outcome of the 802.5 token-issue rule for a station that has just
/// finished transmitting: the new token and whether it pushed its stack.
pub fn issue_rule(captured: u8, reservation: u8) -> (u8, u8, bool) {
    if reservation > captured {
        (reservation, 0, true)
    } else {
        (captured, reservation, false)
    }
}

const T_TX_END: u64 = 1;
const T_GENERATE: u64 = 2;
const T_WATCHDOG: u64 = 3;

#[derive(Debug, Clone)]
struct Pending {
    dst: String,
    id: u64,
    data: Vec<u8>,
}

pub struct RingStation {
    addr: String,
    dst: String,
    priority: u8,
    monitor: bool,
    rotation: f64,
    lose_token_at: Option<f64>,
    bit_time: f64,
    downstream: Option<Port>,
    queue: VecDeque<Pending>,
    next_id: u64,
    frames: u64,
    interval: f64,
    start: f64,
    frame_bytes: usize,
    generated: u64,
    /// (old priority, raised priority) pairs, innermost last.
    stack: Vec<(u8, u8)>,
    holding: bool,
    captured: u8,
    returned_reservation: u8,
    tx_done: bool,
    head_back: bool,
    last_activity: f64,
    pushes: u64,
    pops: u64,
    sent: u64,
    received: u64,
}

impl RingStation {
    pub fn new(addr: &str) -> Self {
        RingStation {
            addr: addr.to_string(),
            dst: BROADCAST.to_string(),
            priority: 0,
            monitor: false,
            rotation: 1e-3,
            lose_token_at: None,
            bit_time: 1e-6,
            downstream: None,
            queue: VecDeque::new(),
            next_id: 0,
            frames: 0,
            interval: 0.0,
            start: 0.0,
            frame_bytes: 100,
            generated: 0,
            stack: Vec::new(),
            holding: false,
            captured: 0,
            returned_reservation: 0,
            tx_done: false,
            head_back: false,
            last_activity: 0.0,
            pushes: 0,
            pops: 0,
            sent: 0,
            received: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let mut s = RingStation::new(spec.str("addr", spec.node));
        s.dst = spec.str("dst", BROADCAST).to_string();
        let p = spec.u64("priority", 0)?;
        if p > 7 {
            return Err(spec.bad("priority", &p.to_string()));
        }
        s.priority = p as u8;
        s.monitor = spec.bool("monitor", false)?;
        s.rotation = spec.positive("rotation", 1e-3)?;
        s.lose_token_at = spec.opt_f64("lose_token_at")?;
        s.frames = spec.u64("frames", 0)?;
        s.interval = spec.non_negative("interval", 0.0)?;
        s.start = spec.non_negative("start", 0.0)?;
        s.frame_bytes = spec.u64("frame_bytes", 100)? as usize;
        Ok(s)
    }

    pub fn stack(&self) -> &[(u8, u8)] {
        &self.stack
    }

    pub fn is_holding(&self) -> bool {
        self.holding
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn backlog(&self) -> usize {
        self.queue.len()
    }

    fn downstream(&self, ctx: &Ctx<'_>) -> Result<Port, crate::kernel::KernelError> {
        self.downstream
            .ok_or_else(|| ctx.fault("ring station has no downstream link"))
    }

    /// Repeats a PDU downstream after the one-bit station delay.
    fn repeat(&self, ctx: &mut Ctx<'_>, p: RingPdu) -> HandlerResult {
        let port = self.downstream(ctx)?;
        ctx.send_after(port, self.bit_time, ring_pdu(p))
    }

    fn put_token(&mut self, ctx: &mut Ctx<'_>, priority: u8, reservation: u8) -> HandlerResult {
        let port = self.downstream(ctx)?;
        ctx.send(port, ring_pdu(RingPdu::Token { priority, reservation }))
    }

    fn enqueue(&mut self, data: Vec<u8>) {
        self.queue.push_back(Pending {
            dst: self.dst.clone(),
            id: self.next_id,
            data,
        });
        self.next_id += 1;
    }

    fn on_token(&mut self, ctx: &mut Ctx<'_>, p: u8, mut r: u8) -> HandlerResult {
        self.last_activity = ctx.now();
        ctx.emit(TraceRecord::new(3, "token_pass").with("p", p).with("r", r));
        if let Some(t) = self.lose_token_at {
            if ctx.now() >= t {
                self.lose_token_at = None;
                ctx.emit(TraceRecord::new(0, "token_lost").with("p", p));
                return Ok(());
            }
        }
        if self.holding {
            ctx.emit(TraceRecord::new(0, "violation").with("reason", "duplicate_token"));
            return Ok(());
        }
        // a regenerated token can leave raised entries stranded
        while let Some(&(old, raised)) = self.stack.last() {
            if raised <= p {
                break;
            }
            self.stack.pop();
            ctx.emit(TraceRecord::new(0, "stack_purge").with("old", old).with("raised", raised));
        }
        if let Some(&(old, raised)) = self.stack.last() {
            if raised == p {
                if r > old {
                    *self.stack.last_mut().expect("nonempty") = (old, r);
                    ctx.emit(
                        TraceRecord::new(1, "stack_replace")
                            .with("old", old)
                            .with("raised", r),
                    );
                    return self.repeat(ctx, RingPdu::Token { priority: r, reservation: 0 });
                }
                self.stack.pop();
                self.pops += 1;
                ctx.emit(TraceRecord::new(1, "stack_pop").with("old", old).with("raised", raised));
                return self.repeat(ctx, RingPdu::Token { priority: old, reservation: r });
            }
        }
        if !self.queue.is_empty() && self.priority >= p {
            return self.capture(ctx, p, r);
        }
        if !self.queue.is_empty() && self.priority > r {
            r = self.priority;
            ctx.emit(TraceRecord::new(2, "reserve").with("r", r).with("on", "token"));
        }
        self.repeat(ctx, RingPdu::Token { priority: p, reservation: r })
    }

    fn capture(&mut self, ctx: &mut Ctx<'_>, p: u8, r: u8) -> HandlerResult {
        let Some(f) = self.queue.pop_front() else {
            return Ok(());
        };
        self.holding = true;
        self.captured = p;
        self.returned_reservation = 0;
        self.tx_done = false;
        self.head_back = false;
        ctx.emit(
            TraceRecord::new(0, "token_capture")
                .with("p", p)
                .with("r", r)
                .with("id", f.id),
        );
        let frame = RingPdu::Frame {
            src: self.addr.clone(),
            dst: f.dst,
            id: f.id,
            priority: self.priority,
            reservation: r,
            data: f.data,
        };
        let tx = frame.size_bits() as f64 * self.bit_time;
        self.sent += 1;
        let port = self.downstream(ctx)?;
        ctx.send(port, ring_pdu(frame))?;
        ctx.timer(tx, T_TX_END)?;
        Ok(())
    }

    fn maybe_issue(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        if !(self.holding && self.tx_done && self.head_back) {
            return Ok(());
        }
        self.holding = false;
        let (p, r, push) = issue_rule(self.captured, self.returned_reservation);
        if push {
            self.stack.push((self.captured, p));
            self.pushes += 1;
            ctx.emit(
                TraceRecord::new(1, "stack_push")
                    .with("old", self.captured)
                    .with("raised", p),
            );
        }
        ctx.emit(TraceRecord::new(0, "token_issue").with("p", p).with("r", r));
        self.put_token(ctx, p, r)
    }

    fn on_frame(&mut self, ctx: &mut Ctx<'_>, frame: RingPdu) -> HandlerResult {
        self.last_activity = ctx.now();
        let RingPdu::Frame {
            src,
            dst,
            id,
            priority,
            mut reservation,
            data,
        } = frame
        else {
            return Ok(());
        };
        if src == self.addr {
            if !self.holding {
                ctx.emit(TraceRecord::new(0, "violation").with("reason", "orphan_frame").with("id", id));
                return Ok(());
            }
            self.head_back = true;
            self.returned_reservation = reservation;
            ctx.emit(TraceRecord::new(2, "strip").with("id", id).with("r", reservation));
            return self.maybe_issue(ctx);
        }
        if dst == self.addr || dst == BROADCAST {
            self.received += 1;
            ctx.emit(TraceRecord::new(1, "rx").with("src", &src).with("id", id));
            if ctx.is_wired(Port::Up) {
                ctx.send(Port::Up, Pdu::sdu(data.clone()))?;
            }
        }
        if !self.queue.is_empty() && self.priority > reservation {
            reservation = self.priority;
            ctx.emit(TraceRecord::new(2, "reserve").with("r", reservation).with("on", "frame"));
        }
        self.repeat(
            ctx,
            RingPdu::Frame {
                src,
                dst,
                id,
                priority,
                reservation,
                data,
            },
        )
    }
}

impl Component for RingStation {
    fn kind(&self) -> &'static str {
        "ring"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if let Some(port) = at.port {
            self.bit_time = 1.0 / at.link.bw;
            if at.side == Side::A {
                self.downstream = Some(port);
            }
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                if self.frames > 0 {
                    ctx.schedule_at(self.start.max(ctx.now()), Message::Timer(T_GENERATE))?;
                }
                if self.monitor {
                    ctx.emit(TraceRecord::new(0, "token_issue").with("p", 0).with("r", 0).with("initial", 1));
                    self.put_token(ctx, 0, 0)?;
                    self.last_activity = ctx.now();
                    ctx.timer(self.rotation, T_WATCHDOG)?;
                }
                Ok(())
            }
            Message::Timer(T_TX_END) => {
                self.tx_done = true;
                self.maybe_issue(ctx)
            }
            Message::Timer(T_GENERATE) => {
                let burst = if self.interval > 0.0 { 1 } else { self.frames };
                for _ in 0..burst {
                    if self.generated < self.frames {
                        self.generated += 1;
                        self.enqueue(vec![0u8; self.frame_bytes.saturating_sub(HEADER_BYTES)]);
                    }
                }
                if self.generated < self.frames && self.interval > 0.0 {
                    ctx.timer(self.interval, T_GENERATE)?;
                }
                Ok(())
            }
            Message::Timer(T_WATCHDOG) => {
                if !self.holding && ctx.now() - self.last_activity >= 2.0 * self.rotation {
                    ctx.emit(TraceRecord::new(0, "token_regen").with("silence", ctx.now() - self.last_activity));
                    self.last_activity = ctx.now();
                    self.put_token(ctx, 0, 0)?;
                }
                ctx.timer(self.rotation, T_WATCHDOG)?;
                Ok(())
            }
            Message::Timer(_) => Ok(()),
            Message::Deliver { port: Port::Up, pdu } => match pdu.body {
                Body::Bytes(data) => {
                    self.enqueue(data);
                    Ok(())
                }
                other => Err(ctx.fault(format!("ring cannot send {}", other.label()))),
            },
            Message::Deliver { pdu, .. } => match pdu.body {
                Body::Ring(RingPdu::Token {
                    priority,
                    reservation,
                }) => self.on_token(ctx, priority, reservation),
                Body::Ring(frame) => self.on_frame(ctx, frame),
                other => Err(ctx.fault(format!("ring cannot consume {}", other.label()))),
            },
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "ring",
            "addr": self.addr,
            "priority": self.priority,
            "monitor": self.monitor,
            "holding": self.holding,
            "stack": self.stack,
            "queue": self.queue.len(),
            "sent": self.sent,
            "received": self.received,
            "pushes": self.pushes,
            "pops": self.pops,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

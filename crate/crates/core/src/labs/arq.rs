//! Sliding-window flow control with Go-Back-N error control.

use std::any::Any;
use std::collections::VecDeque;

use serde_json::json;

use crate::kernel::{Attachment, Component, Ctx, EventHandle, HandlerResult, Message, Port};
use crate::netbase::{Body, Color, FlowSignal, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

/// Header bytes on every data and ACK frame.
pub const FRAME_HEADER_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum ArqFrame {
    Data { seq: u32, data: Vec<u8> },
    /// Cumulative: every frame up to and including `ackno` arrived.
    Ack { ackno: u32 },
}

impl ArqFrame {
    pub fn size_bits(&self) -> u64 {
        match self {
            ArqFrame::Data { data, .. } => (data.len() as u64 + FRAME_HEADER_BYTES) * 8,
            ArqFrame::Ack { .. } => FRAME_HEADER_BYTES * 8,
        }
    }
}

/// Sender half. Sequence numbers live in `0..modulus`.
#[derive(Debug, Clone)]
pub struct GbnSender {
    window: u32,
    modulus: u32,
    base: u32,
    next_seq: u32,
    buffer: VecDeque<Vec<u8>>,
}

impl GbnSender {
    pub fn new(window: u32, modulus: u32) -> Self {
        assert!(window >= 1 && modulus >= 2, "window {window} modulus {modulus}");
        GbnSender {
            window,
            modulus,
            base: 0,
            next_seq: 0,
            buffer: VecDeque::new(),
        }
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    pub fn next_seq(&self) -> u32 {
        self.next_seq
    }

    pub fn outstanding(&self) -> u32 {
        self.buffer.len() as u32
    }

    pub fn window_full(&self) -> bool {
        self.outstanding() >= self.window
    }

    /// Accepts an SDU if the window has room and returns the frame to put on
    /// the wire.
    pub fn send(&mut self, data: Vec<u8>) -> Option<ArqFrame> {
        if self.window_full() {
            return None;
        }
        let seq = self.next_seq;
        self.buffer.push_back(data.clone());
        self.next_seq = (self.next_seq + 1) % self.modulus;
        Some(ArqFrame::Data { seq, data })
    }

    /// Applies a cumulative ACK. Returns how many frames it released; ACKs
    /// outside the outstanding range release nothing.
    pub fn on_ack(&mut self, ackno: u32) -> u32 {
        if ackno >= self.modulus {
            return 0;
        }
        let dist = (ackno + self.modulus - self.base) % self.modulus;
        if dist >= self.outstanding() {
            return 0;
        }
        let released = dist + 1;
        for _ in 0..released {
            self.buffer.pop_front();
        }
        self.base = (ackno + 1) % self.modulus;
        released
    }

    /// Every outstanding frame, oldest first, for retransmission.
    pub fn on_timeout(&self) -> Vec<ArqFrame> {
        self.buffer
            .iter()
            .enumerate()
            .map(|(i, d)| ArqFrame::Data {
                seq: (self.base + i as u32) % self.modulus,
                data: d.clone(),
            })
            .collect()
    }
}

/// Receiver half: accepts only the expected frame.
#[derive(Debug, Clone)]
pub struct GbnReceiver {
    expected: u32,
    modulus: u32,
}

impl GbnReceiver {
    pub fn new(modulus: u32) -> Self {
        GbnReceiver {
            expected: 0,
            modulus,
        }
    }

    pub fn expected(&self) -> u32 {
        self.expected
    }

    /// Returns whether the frame is delivered upward, and the ACK to send.
    pub fn on_frame(&mut self, seq: u32) -> (bool, u32) {
        let deliver = seq == self.expected;
        if deliver {
            self.expected = (self.expected + 1) % self.modulus;
        }
        let ackno = (self.expected + self.modulus - 1) % self.modulus;
        (deliver, ackno)
    }
}

/// Link utilization of a saturated Go-Back-N sender on a clean link.
pub fn gbn_utilization(window: u32, frame_time: f64, prop_delay: f64) -> f64 {
    (window as f64 * frame_time / (frame_time + 2.0 * prop_delay)).min(1.0)
}

/// Data link layer component running both halves.
pub struct GbnLayer {
    sender: GbnSender,
    receiver: GbnReceiver,
    timeout: Option<f64>,
    frame_bytes: u64,
    link: Option<(f64, f64)>,
    timer: Option<EventHandle>,
    owe_ready: bool,
    delivered: u64,
    retransmissions: u64,
}

impl GbnLayer {
    pub fn new(window: u32, modulus: u32, timeout: Option<f64>, frame_bytes: u64) -> Self {
        GbnLayer {
            sender: GbnSender::new(window, modulus),
            receiver: GbnReceiver::new(modulus),
            timeout,
            frame_bytes,
            link: None,
            timer: None,
            owe_ready: false,
            delivered: 0,
            retransmissions: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let window = spec.u64("window", 4)?;
        if window == 0 {
            return Err(spec.bad("window", "0"));
        }
        let modulus = spec.u64("modulus", (window + 1).max(8))?;
        if modulus < 2 {
            return Err(spec.bad("modulus", &modulus.to_string()));
        }
        let timeout = match spec.opt_f64("timeout")? {
            Some(t) if t <= 0.0 => return Err(spec.bad("timeout", &t.to_string())),
            t => t,
        };
        let frame_bytes = spec.u64("size", 1000)? + FRAME_HEADER_BYTES;
        Ok(GbnLayer::new(window as u32, modulus as u32, timeout, frame_bytes))
    }

    pub fn sender(&self) -> &GbnSender {
        &self.sender
    }

    pub fn receiver(&self) -> &GbnReceiver {
        &self.receiver
    }

    pub fn retransmissions(&self) -> u64 {
        self.retransmissions
    }

    /// Configured timeout, else 1.5 x twice the clean round trip
    /// `Tf + 2 Tp` of the attached link, else one second.
    pub fn timeout(&self) -> f64 {
        if let Some(t) = self.timeout {
            return t;
        }
        match self.link {
            Some((bw, delay)) => {
                let tf = (self.frame_bytes * 8) as f64 / bw;
                2.0 * (tf + 2.0 * delay) * 1.5
            }
            None => 1.0,
        }
    }

    fn transmit(&mut self, ctx: &mut Ctx<'_>, frame: ArqFrame, color: Color) -> HandlerResult {
        let bits = frame.size_bits();
        ctx.send(Port::Net(0), Pdu::new(Body::Arq(frame), bits, color))
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        if let Some(h) = self.timer.take() {
            ctx.cancel(h);
        }
        if self.sender.outstanding() > 0 {
            let t = self.timeout();
            self.timer = Some(ctx.timer(t, 0)?);
        }
        Ok(())
    }

    fn from_above(&mut self, ctx: &mut Ctx<'_>, data: Vec<u8>) -> HandlerResult {
        let idle = self.sender.outstanding() == 0;
        if self.sender.window_full() {
            ctx.emit(TraceRecord::new(2, "refuse").with("outstanding", self.sender.outstanding()));
            self.owe_ready = true;
            return ctx.send(Port::Up, Pdu::flow(FlowSignal::Refused(data)));
        }
        match self.sender.send(data) {
            Some(frame) => {
                if let ArqFrame::Data { seq, .. } = &frame {
                    ctx.emit(TraceRecord::new(1, "send").with("seq", seq).with("color", Color::Data));
                }
                self.transmit(ctx, frame, Color::Data)?;
                if idle {
                    self.arm(ctx)?;
                }
                Ok(())
            }
            None => Ok(()),
        }
    }

    fn from_below(&mut self, ctx: &mut Ctx<'_>, pdu: Pdu) -> HandlerResult {
        let Body::Arq(frame) = pdu.body else {
            return Err(ctx.fault(format!("gbn cannot consume {}", pdu.body.label())));
        };
        match frame {
            ArqFrame::Data { seq, data } => {
                if pdu.corrupted {
                    ctx.emit(
                        TraceRecord::new(0, "drop")
                            .with("reason", "corrupted")
                            .with("seq", seq)
                            .with("color", Color::Corrupted),
                    );
                    return Ok(());
                }
                let (deliver, ackno) = self.receiver.on_frame(seq);
                ctx.emit(
                    TraceRecord::new(1, "recv")
                        .with("seq", seq)
                        .with("accepted", deliver as u8)
                        .with("color", pdu.color),
                );
                if deliver {
                    self.delivered += 1;
                    ctx.send(Port::Up, Pdu::sdu(data))?;
                }
                ctx.emit(TraceRecord::new(1, "send_ack").with("ackno", ackno).with("color", Color::Ack));
                self.transmit(ctx, ArqFrame::Ack { ackno }, Color::Ack)
            }
            ArqFrame::Ack { ackno } => {
                if pdu.corrupted {
                    ctx.emit(
                        TraceRecord::new(0, "drop")
                            .with("reason", "corrupted_ack")
                            .with("ackno", ackno)
                            .with("color", Color::Corrupted),
                    );
                    return Ok(());
                }
                let released = self.sender.on_ack(ackno);
                ctx.emit(
                    TraceRecord::new(1, "ack")
                        .with("ackno", ackno)
                        .with("released", released)
                        .with("base", self.sender.base()),
                );
                if released > 0 {
                    self.arm(ctx)?;
                    // once refused, the layer above paces itself on these
                    if self.owe_ready && !self.sender.window_full() {
                        let free = self.sender.window() - self.sender.outstanding();
                        ctx.send(Port::Up, Pdu::flow(FlowSignal::Ready(free as u64)))?;
                    }
                }
                Ok(())
            }
        }
    }

    fn on_timeout(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        self.timer = None;
        let frames = self.sender.on_timeout();
        ctx.emit(TraceRecord::new(0, "timeout").with("frames", frames.len()).with("base", self.sender.base()));
        for frame in frames {
            if let ArqFrame::Data { seq, .. } = &frame {
                ctx.emit(
                    TraceRecord::new(1, "retx")
                        .with("seq", seq)
                        .with("color", Color::Retransmitted),
                );
            }
            self.retransmissions += 1;
            self.transmit(ctx, frame, Color::Retransmitted)?;
        }
        self.arm(ctx)
    }
}

impl Component for GbnLayer {
    fn kind(&self) -> &'static str {
        "gbn"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        self.link = Some((at.link.bw, at.link.delay));
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Timer(_) => self.on_timeout(ctx),
            Message::Deliver { port: Port::Up, pdu } => match pdu.body {
                Body::Bytes(data) => self.from_above(ctx, data),
                other => Err(ctx.fault(format!("gbn cannot send {}", other.label()))),
            },
            Message::Deliver { pdu, .. } => self.from_below(ctx, pdu),
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "gbn",
            "base": self.sender.base,
            "next_seq": self.sender.next_seq,
            "outstanding": self.sender.outstanding(),
            "expected": self.receiver.expected,
            "delivered": self.delivered,
            "retransmissions": self.retransmissions,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_of_one() {
        let mut s = GbnSender::new(1, 2);
        assert_eq!(
            s.send(vec![1]),
            Some(ArqFrame::Data {
                seq: 0,
                data: vec![1]
            })
        );
        assert_eq!(s.send(vec![2]), None);
    }

    #[test]
    fn cumulative_ack_slides_base() {
        let mut s = GbnSender::new(4, 8);
        for i in 0..4 {
            s.send(vec![i]).unwrap();
        }
        assert_eq!(s.on_ack(2), 3);
        assert_eq!(s.base(), 3);
        assert_eq!(s.outstanding(), 1);
        // duplicate
        assert_eq!(s.on_ack(2), 0);
        assert_eq!(s.base(), 3);
    }

    #[test]
    fn timeout_resends_outstanding_in_order() {
        let mut s = GbnSender::new(4, 8);
        for i in 0..3 {
            s.send(vec![i]).unwrap();
        }
        let seqs: Vec<u32> = s
            .on_timeout()
            .iter()
            .map(|f| match f {
                ArqFrame::Data { seq, .. } => *seq,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(seqs, vec![0, 1, 2]);
    }

    #[test]
    fn sequence_numbers_wrap() {
        let mut s = GbnSender::new(3, 4);
        let mut r = GbnReceiver::new(4);
        for round in 0..10u32 {
            let f = s.send(vec![round as u8]).unwrap();
            let ArqFrame::Data { seq, .. } = f else { unreachable!() };
            assert_eq!(seq, round % 4);
            let (ok, ack) = r.on_frame(seq);
            assert!(ok);
            assert_eq!(s.on_ack(ack), 1);
        }
    }

    #[test]
    fn receiver_discards_out_of_order_and_reacks() {
        let mut r = GbnReceiver::new(8);
        assert_eq!(r.on_frame(1), (false, 7));
        assert_eq!(r.on_frame(0), (true, 0));
        assert_eq!(r.on_frame(0), (false, 0));
    }

    /// With modulus == window, a full window delivered whose ACKs are all
    /// lost makes the retransmitted frame 0 look new: a duplicate.
    #[test]
    fn modulus_equal_to_window_is_ambiguous() {
        let w = 4;
        let deliveries = |m: u32| {
            let mut s = GbnSender::new(w, m);
            let mut r = GbnReceiver::new(m);
            let mut delivered = Vec::new();
            for i in 0..w {
                let ArqFrame::Data { seq, data } = s.send(vec![i as u8]).unwrap() else {
                    unreachable!()
                };
                if r.on_frame(seq).0 {
                    delivered.push(data[0]);
                }
            }
            // every ACK lost; timeout resends frame 0 first
            let ArqFrame::Data { seq, data } = s.on_timeout().remove(0) else {
                unreachable!()
            };
            if r.on_frame(seq).0 {
                delivered.push(data[0]);
            }
            delivered
        };
        assert_eq!(deliveries(w), vec![0, 1, 2, 3, 0]);
        assert_eq!(deliveries(w + 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn utilization_formula() {
        assert_eq!(gbn_utilization(4, 1e-3, 1e-3), 1.0);
        assert!((gbn_utilization(1, 1e-3, 1e-3) - 1.0 / 3.0).abs() < 1e-12);
    }
}

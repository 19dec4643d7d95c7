//! Application-layer traffic source and sink.

use std::any::Any;
use std::collections::VecDeque;

use serde_json::json;

use crate::kernel::{Component, Ctx, HandlerResult, Injection, Message, Port};
use crate::netbase::{Body, FlowSignal, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

const GENERATE: u64 = 1;
const POISSON_BEGIN: u64 = 2;

/// Byte at position `i` of the synthetic application stream. Position
/// dependent, so reordering or duplication shows up in comparisons.
pub fn stream_byte(i: u64) -> u8 {
    (i.wrapping_mul(0x9E37_79B1).rotate_right(13) ^ (i >> 8)) as u8
}

pub fn stream_bytes(offset: u64, len: usize) -> Vec<u8> {
    (offset..offset + len as u64).map(stream_byte).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    None,
    /// One SDU every 1/rate seconds starting at `start`.
    Periodic { rate: f64 },
    /// Exponential interarrivals with mean 1/rate.
    Poisson { rate: f64 },
    /// `count` SDUs queued at `start`.
    Bulk,
    /// A byte stream (an "image") cut into `chunk`-sized SDUs at `start`.
    File { data: Vec<u8> },
}

pub struct App {
    pattern: Pattern,
    size: usize,
    start: f64,
    count: Option<u64>,
    generated_sdus: u64,
    generated: Vec<u8>,
    backlog: VecDeque<Vec<u8>>,
    refused: Vec<Vec<u8>>,
    blocked: bool,
    /// SDUs the layer below will still take; unlimited until the first refusal.
    credit: Option<u64>,
    sent: u64,
    received: Vec<u8>,
    received_sdus: u64,
}

impl App {
    pub fn new(pattern: Pattern, size: usize, start: f64, count: Option<u64>) -> Self {
        App {
            pattern,
            size: size.max(1),
            start,
            count,
            generated_sdus: 0,
            generated: Vec::new(),
            backlog: VecDeque::new(),
            refused: Vec::new(),
            blocked: false,
            credit: None,
            sent: 0,
            received: Vec::new(),
            received_sdus: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let size = spec.u64("size", 1000)? as usize;
        let start = spec.f64("start", 0.0)?;
        let count = spec.opt_u64("count")?;
        let pattern = match spec.str("pattern", "none") {
            "none" => Pattern::None,
            "periodic" => Pattern::Periodic {
                rate: spec.positive("rate", 1.0)?,
            },
            "poisson" => Pattern::Poisson {
                rate: spec.positive("rate", 1.0)?,
            },
            "bulk" => Pattern::Bulk,
            "file" => {
                let data = match spec.opt_str("file") {
                    Some(path) => std::fs::read(path).map_err(|e| BuildError::Invalid {
                        component: spec.name.to_string(),
                        message: format!("cannot read {path}: {e}"),
                    })?,
                    None => stream_bytes(0, spec.u64("bytes", 20_000)? as usize),
                };
                Pattern::File { data }
            }
            other => return Err(spec.bad("pattern", other)),
        };
        Ok(App::new(pattern, size, start, count))
    }

    /// Every byte generated so far, in generation order.
    pub fn generated(&self) -> &[u8] {
        &self.generated
    }

    pub fn received(&self) -> &[u8] {
        &self.received
    }

    pub fn sdus_generated(&self) -> u64 {
        self.generated_sdus
    }

    pub fn sdus_received(&self) -> u64 {
        self.received_sdus
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.len() + self.refused.len()
    }

    fn exhausted(&self) -> bool {
        self.count.is_some_and(|c| self.generated_sdus >= c)
    }

    fn enqueue(&mut self, sdu: Vec<u8>) {
        self.generated.extend_from_slice(&sdu);
        self.generated_sdus += 1;
        self.backlog.push_back(sdu);
    }

    fn next_sdu(&mut self) {
        let sdu = stream_bytes(self.generated.len() as u64, self.size);
        self.enqueue(sdu);
    }

    fn enqueue_chunks(&mut self, data: &[u8]) {
        for chunk in data.chunks(self.size) {
            self.enqueue(chunk.to_vec());
        }
    }

    fn flush(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        while !self.blocked && !self.backlog.is_empty() {
            match self.credit {
                Some(0) => break,
                Some(c) => self.credit = Some(c - 1),
                None => {}
            }
            let Some(sdu) = self.backlog.pop_front() else { break };
            self.sent += 1;
            ctx.emit(TraceRecord::new(2, "sdu_out").with("len", sdu.len()));
            ctx.send(Port::Net(0), Pdu::sdu(sdu))?;
        }
        Ok(())
    }

    fn arm_next(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        if self.exhausted() {
            return Ok(());
        }
        match self.pattern {
            Pattern::Periodic { rate } => {
                let t = self.start + self.generated_sdus as f64 / rate;
                ctx.schedule_at(t.max(ctx.now()), Message::Timer(GENERATE))?;
            }
            Pattern::Poisson { rate } => {
                let u = ctx.rand();
                let gap = -(1.0 - u).ln() / rate;
                ctx.timer(gap, GENERATE)?;
            }
            _ => {}
        }
        Ok(())
    }
}

impl Component for App {
    fn kind(&self) -> &'static str {
        "app"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => match &self.pattern {
                Pattern::None => Ok(()),
                Pattern::Periodic { .. } | Pattern::Bulk | Pattern::File { .. } => {
                    ctx.schedule_at(self.start.max(ctx.now()), Message::Timer(GENERATE))?;
                    Ok(())
                }
                Pattern::Poisson { .. } => {
                    if self.start > ctx.now() {
                        ctx.schedule_at(self.start, Message::Timer(POISSON_BEGIN))?;
                        Ok(())
                    } else {
                        self.arm_next(ctx)
                    }
                }
            },
            // Poisson process begins at `start` with its first gap.
            Message::Timer(POISSON_BEGIN) => self.arm_next(ctx),
            Message::Timer(GENERATE) => {
                match self.pattern.clone() {
                    Pattern::Bulk => {
                        let n = self.count.unwrap_or(100);
                        for _ in 0..n {
                            self.next_sdu();
                        }
                    }
                    Pattern::File { data } => self.enqueue_chunks(&data),
                    Pattern::None => {}
                    Pattern::Periodic { .. } | Pattern::Poisson { .. } => {
                        self.next_sdu();
                        self.arm_next(ctx)?;
                    }
                }
                ctx.emit(
                    TraceRecord::new(2, "generate")
                        .with("sdus", self.generated_sdus)
                        .with("bytes", self.generated.len()),
                );
                self.flush(ctx)
            }
            Message::Inject(Injection::Send(data)) => {
                ctx.emit(TraceRecord::new(0, "inject_send").with("bytes", data.len()));
                self.enqueue_chunks(&data);
                self.flush(ctx)
            }
            Message::Deliver { pdu, .. } => match pdu.body {
                Body::Bytes(bytes) => {
                    self.received_sdus += 1;
                    self.received.extend_from_slice(&bytes);
                    ctx.emit(
                        TraceRecord::new(1, "sdu_in")
                            .with("len", bytes.len())
                            .with("total", self.received.len()),
                    );
                    Ok(())
                }
                Body::Flow(FlowSignal::Refused(sdu)) => {
                    self.sent -= 1;
                    self.blocked = true;
                    self.refused.push(sdu);
                    Ok(())
                }
                Body::Flow(FlowSignal::Ready(n)) => {
                    self.blocked = false;
                    self.credit = Some(n);
                    for sdu in self.refused.drain(..).rev() {
                        self.backlog.push_front(sdu);
                    }
                    self.flush(ctx)
                }
                other => Err(ctx.fault(format!("app cannot consume {}", other.label()))),
            },
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "app",
            "generated_sdus": self.generated_sdus,
            "generated_bytes": self.generated.len(),
            "sent": self.sent,
            "backlog": self.backlog_len(),
            "received_sdus": self.received_sdus,
            "received_bytes": self.received.len(),
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
    use crate::kernel::Kernel;
    use crate::netbase::layers::Recorder;

    fn run(app: App, stop: f64, seed: u64) -> Vec<(f64, Pdu)> {
        let mut k = Kernel::new(seed);
        let a = k.add_component("a", Box::new(app));
        let r = k.add_component("r", Box::new(Recorder::default()));
        k.connect((a, Port::Net(0)), (r, Port::Up)).unwrap();
        k.start();
        k.run_until(stop).unwrap();
        k.component::<Recorder>(r).unwrap().got.clone()
    }

    #[test]
    fn periodic_fencepost() {
        let got = run(App::new(Pattern::Periodic { rate: 10.0 }, 100, 0.0, None), 1.0, 1);
        assert_eq!(got.len(), 11);
        assert_eq!(got.last().unwrap().0, 1.0);
    }

    #[test]
    fn file_is_cut_into_chunks() {
        let data = stream_bytes(0, 2500);
        let got = run(App::new(Pattern::File { data: data.clone() }, 1000, 0.0, None), 1.0, 1);
        let lens: Vec<usize> = got
            .iter()
            .map(|(_, p)| match &p.body {
                Body::Bytes(b) => b.len(),
                _ => 0,
            })
            .collect();
        assert_eq!(lens, vec![1000, 1000, 500]);
        let joined: Vec<u8> = got
            .iter()
            .flat_map(|(_, p)| match &p.body {
                Body::Bytes(b) => b.clone(),
                _ => vec![],
            })
            .collect();
        assert_eq!(joined, data);
    }

    #[test]
    fn poisson_rate_within_three_sigma() {
        let rate = 50.0;
        let horizon = 400.0;
        let got = run(App::new(Pattern::Poisson { rate }, 10, 0.0, None), horizon, 9);
        let n = got.len() as f64;
        let mean = rate * horizon;
        assert!((n - mean).abs() < 3.0 * mean.sqrt(), "n={n}");
    }
}

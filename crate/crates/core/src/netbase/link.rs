use std::any::Any;
use std::collections::VecDeque;

use serde_json::json;

use crate::config::LinkDecl;
use crate::kernel::{Component, Ctx, HandlerResult, Injection, Message, Port};
use crate::netbase::{Color, Pdu};
use crate::registry::BuildError;
use crate::trace::TraceRecord;

const FAIL_TIMER: u64 = 1;
const REPAIR_TIMER: u64 = 2;

/// How a link moves PDUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMode {
    /// Store and forward: a PDU occupies the link for size/bandwidth.
    Store,
    /// Bit pipe: only propagation delay; the sender accounts for
    /// serialization itself (token ring).
    Pipe,
}

#[derive(Debug, Clone)]
pub struct LinkParams {
    pub bw: f64,
    pub delay: f64,
    pub ber: f64,
    /// Per-PDU loss probability.
    pub loss: f64,
    /// Per-PDU corruption probability, on top of `ber`.
    pub pcorrupt: f64,
    /// Maximum PDUs waiting per direction (not counting the one on the wire).
    pub queue: Option<usize>,
    pub half_duplex: bool,
    pub mode: LinkMode,
    pub fail_at: Vec<f64>,
    pub repair_at: Vec<f64>,
}

fn list(v: Option<&String>) -> Result<Vec<f64>, String> {
    match v {
        None => Ok(Vec::new()),
        Some(s) => s
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|_| s.clone()))
            .collect(),
    }
}

impl LinkParams {
    pub fn from_decl(l: &LinkDecl) -> Result<Self, BuildError> {
        let bad = |key: &str, value: &str| BuildError::BadParam {
            component: l.id.clone(),
            key: key.to_string(),
            value: value.to_string(),
        };
        let num = |key: &str, default: f64| -> Result<f64, BuildError> {
            match l.params.get(key) {
                None => Ok(default),
                Some(v) => v.parse::<f64>().map_err(|_| bad(key, v)),
            }
        };
        let loss = num("loss", 0.0)?;
        let pcorrupt = num("pcorrupt", 0.0)?;
        if !(0.0..=1.0).contains(&loss) {
            return Err(bad("loss", &loss.to_string()));
        }
        if !(0.0..=1.0).contains(&pcorrupt) {
            return Err(bad("pcorrupt", &pcorrupt.to_string()));
        }
        let queue = match l.params.get("queue") {
            None => None,
            Some(v) => Some(v.parse::<usize>().map_err(|_| bad("queue", v))?),
        };
        let half_duplex = match l.params.get("duplex").map(String::as_str) {
            None | Some("full") => false,
            Some("half") => true,
            Some(v) => return Err(bad("duplex", v)),
        };
        let mode = match l.params.get("mode").map(String::as_str) {
            None | Some("store") => LinkMode::Store,
            Some("pipe") => LinkMode::Pipe,
            Some(v) => return Err(bad("mode", v)),
        };
        let fail_at = list(l.params.get("fail_at")).map_err(|v| bad("fail_at", &v))?;
        let repair_at = list(l.params.get("repair_at")).map_err(|v| bad("repair_at", &v))?;
        Ok(LinkParams {
            bw: l.bw,
            delay: l.delay,
            ber: l.ber,
            loss,
            pcorrupt,
            queue,
            half_duplex,
            mode,
            fail_at,
            repair_at,
        })
    }

    pub fn simple(bw: f64, delay: f64, ber: f64) -> Self {
        LinkParams {
            bw,
            delay,
            ber,
            loss: 0.0,
            pcorrupt: 0.0,
            queue: None,
            half_duplex: false,
            mode: LinkMode::Store,
            fail_at: Vec::new(),
            repair_at: Vec::new(),
        }
    }

    pub fn transmission_time(&self, size_bits: u64) -> f64 {
        match self.mode {
            LinkMode::Store => size_bits as f64 / self.bw,
            LinkMode::Pipe => 0.0,
        }
    }

    /// Probability that a PDU of `size_bits` arrives with at least one bit
    /// error: 1 - (1 - pcorrupt)(1 - ber)^size.
    pub fn corruption_probability(&self, size_bits: u64) -> f64 {
        let clean = (1.0 - self.pcorrupt) * (1.0 - self.ber).powf(size_bits as f64);
        1.0 - clean
    }
}

/// Point-to-point link with a FIFO output queue per direction.
pub struct Link {
    params: LinkParams,
    ends: [String; 2],
    up: bool,
    busy_until: [f64; 2],
    waiting: [VecDeque<f64>; 2],
    sent: u64,
    dropped: u64,
    corrupted: u64,
    busy_time: f64,
}

impl Link {
    pub fn new(params: LinkParams, ends: [String; 2]) -> Self {
        Link {
            params,
            ends,
            up: true,
            busy_until: [0.0; 2],
            waiting: [VecDeque::new(), VecDeque::new()],
            sent: 0,
            dropped: 0,
            corrupted: 0,
            busy_time: 0.0,
        }
    }

    pub fn params(&self) -> &LinkParams {
        &self.params
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    /// Affects only transmissions handed over after this point; PDUs
    /// already in flight still arrive.
    pub fn set_link_state(&mut self, up: bool) -> bool {
        let changed = self.up != up;
        self.up = up;
        changed
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn lane(&self, dir: usize) -> usize {
        if self.params.half_duplex {
            0
        } else {
            dir
        }
    }

    fn drop(&mut self, ctx: &mut Ctx<'_>, dir: usize, pdu: &Pdu, reason: &str) {
        self.dropped += 1;
        ctx.emit(
            TraceRecord::new(0, "drop")
                .with("reason", reason)
                .with("from", &self.ends[dir])
                .with("to", &self.ends[1 - dir])
                .with("pdu", pdu.body.label())
                .with("color", pdu.color),
        );
    }

    fn transmit(&mut self, ctx: &mut Ctx<'_>, dir: usize, mut pdu: Pdu) -> HandlerResult {
        if !self.up {
            self.drop(ctx, dir, &pdu, "link_down");
            return Ok(());
        }
        let now = ctx.now();
        let lane = self.lane(dir);
        while self.waiting[lane].front().is_some_and(|&s| s <= now) {
            self.waiting[lane].pop_front();
        }
        let start = self.busy_until[lane].max(now);
        if start > now {
            if let Some(cap) = self.params.queue {
                if self.waiting[lane].len() >= cap {
                    self.drop(ctx, dir, &pdu, "queue_full");
                    return Ok(());
                }
            }
            self.waiting[lane].push_back(start);
        }
        let tx = self.params.transmission_time(pdu.size_bits);
        self.busy_until[lane] = start + tx;
        self.busy_time += tx;
        self.sent += 1;
        let arrive = start + tx + self.params.delay;

        if self.params.loss > 0.0 && ctx.rand() < self.params.loss {
            ctx.emit(
                TraceRecord::new(1, "tx")
                    .with("from", &self.ends[dir])
                    .with("to", &self.ends[1 - dir])
                    .with("start", start)
                    .with("arrive", arrive)
                    .with("txtime", tx)
                    .with("pdu", pdu.body.label())
                    .with("color", pdu.color)
                    .with("lost", 1),
            );
            self.drop(ctx, dir, &pdu, "loss");
            return Ok(());
        }
        let p = self.params.corruption_probability(pdu.size_bits);
        if p > 0.0 && ctx.rand() < p {
            pdu.corrupted = true;
            pdu.color = Color::Corrupted;
            self.corrupted += 1;
        }
        ctx.emit(
            TraceRecord::new(1, "tx")
                .with("from", &self.ends[dir])
                .with("to", &self.ends[1 - dir])
                .with("start", start)
                .with("arrive", arrive)
                .with("txtime", tx)
                .with("pdu", pdu.body.label())
                .with("color", pdu.color)
                .with("lost", 0),
        );
        ctx.send_after(Port::Net(1 - dir as u16), arrive - now, pdu)
    }

    fn change_state(&mut self, ctx: &mut Ctx<'_>, up: bool) {
        if self.set_link_state(up) {
            ctx.emit(TraceRecord::new(0, "link_state").with("up", up as u8));
        }
    }
}

impl Component for Link {
    fn kind(&self) -> &'static str {
        "link"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                for &t in &self.params.fail_at {
                    ctx.schedule_at(t, Message::Timer(FAIL_TIMER))?;
                }
                for &t in &self.params.repair_at {
                    ctx.schedule_at(t, Message::Timer(REPAIR_TIMER))?;
                }
                Ok(())
            }
            Message::Timer(FAIL_TIMER) => {
                self.change_state(ctx, false);
                Ok(())
            }
            Message::Timer(REPAIR_TIMER) => {
                self.change_state(ctx, true);
                Ok(())
            }
            Message::Inject(Injection::LinkState(up)) => {
                self.change_state(ctx, up);
                Ok(())
            }
            Message::Deliver {
                port: Port::Net(dir @ (0 | 1)),
                pdu,
            } => self.transmit(ctx, dir as usize, pdu),
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "link",
            "ends": self.ends,
            "up": self.up,
            "bw": self.params.bw,
            "delay": self.params.delay,
            "ber": self.params.ber,
            "sent": self.sent,
            "dropped": self.dropped,
            "corrupted": self.corrupted,
            "busy_time": self.busy_time,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

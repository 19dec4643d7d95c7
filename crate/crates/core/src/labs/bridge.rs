//! Transparent learning bridges running a spanning tree, and the host
//! interfaces that hang off the LANs between them.

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;

use serde_json::json;

use crate::kernel::{Attachment, Component, Ctx, HandlerResult, Injection, Message, Port};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

pub const BROADCAST: &str = "*";
pub const HEADER_BYTES: usize = 18;
pub const BPDU_BYTES: usize = 35;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BridgeId {
    pub priority: u16,
    pub id: u64,
}

impl fmt::Display for BridgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.priority, self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bpdu {
    pub root: BridgeId,
    pub cost: u32,
    pub sender: BridgeId,
    pub port: u16,
    /// Seconds since the root originated this information.
    pub age: f64,
}

impl Bpdu {
    /// Priority vector; smaller is better.
    pub fn vector(&self) -> (BridgeId, u32, BridgeId, u16) {
        (self.root, self.cost, self.sender, self.port)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EtherPayload {
    Data { id: u64, bytes: Vec<u8> },
    Bpdu(Bpdu),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtherFrame {
    pub src: String,
    pub dst: String,
    pub payload: EtherPayload,
}

impl EtherFrame {
    pub fn label(&self) -> String {
        match &self.payload {
            EtherPayload::Data { id, .. } => format!("eth:{}>{}#{id}", self.src, self.dst),
            EtherPayload::Bpdu(b) => format!("bpdu:{}/{}", b.root, b.cost),
        }
    }

    fn into_pdu(self) -> Pdu {
        let (bytes, color) = match &self.payload {
            EtherPayload::Data { bytes, .. } => (bytes.len() + HEADER_BYTES, Color::Data),
            EtherPayload::Bpdu(_) => (BPDU_BYTES, Color::Control),
        };
        Pdu::new(Body::Ether(self), bytes as u64 * 8, color)
    }
}

const T_GENERATE: u64 = 1;

/// Host interface on a LAN; drops frames addressed elsewhere.
pub struct Nic {
    addr: String,
    dst: String,
    frames: u64,
    interval: f64,
    start: f64,
    frame_bytes: usize,
    sent: u64,
    received: Vec<(String, u64)>,
    port: Option<Port>,
}

impl Nic {
    pub fn new(addr: &str) -> Self {
        Nic {
            addr: addr.to_string(),
            dst: BROADCAST.to_string(),
            frames: 0,
            interval: 1.0,
            start: 0.0,
            frame_bytes: 64,
            sent: 0,
            received: Vec::new(),
            port: None,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let mut n = Nic::new(spec.str("addr", spec.node));
        n.dst = spec.str("dst", BROADCAST).to_string();
        n.frames = spec.u64("frames", 0)?;
        n.interval = spec.positive("interval", 1.0)?;
        n.start = spec.non_negative("start", 0.0)?;
        n.frame_bytes = spec.u64("frame_bytes", 64)? as usize;
        Ok(n)
    }

    /// (source, id) of every data frame accepted, in arrival order.
    pub fn received(&self) -> &[(String, u64)] {
        &self.received
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    fn transmit(&mut self, ctx: &mut Ctx<'_>, dst: String, bytes: Vec<u8>) -> HandlerResult {
        let port = self
            .port
            .ok_or_else(|| ctx.fault("nic is not attached to a LAN"))?;
        let id = self.sent;
        self.sent += 1;
        ctx.emit(TraceRecord::new(1, "tx").with("dst", &dst).with("id", id));
        let frame = EtherFrame {
            src: self.addr.clone(),
            dst,
            payload: EtherPayload::Data { id, bytes },
        };
        ctx.send(port, frame.into_pdu())
    }
}

impl Component for Nic {
    fn kind(&self) -> &'static str {
        "nic"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if at.port.is_some() {
            self.port = at.port;
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
            Message::Timer(T_GENERATE) => {
                let payload = vec![0u8; self.frame_bytes.saturating_sub(HEADER_BYTES)];
                self.transmit(ctx, self.dst.clone(), payload)?;
                if self.sent < self.frames {
                    ctx.timer(self.interval, T_GENERATE)?;
                }
                Ok(())
            }
            Message::Timer(_) => Ok(()),
            Message::Inject(Injection::Send(bytes)) => self.transmit(ctx, self.dst.clone(), bytes),
            Message::Deliver { port: Port::Up, pdu } => match pdu.body {
                Body::Bytes(bytes) => self.transmit(ctx, self.dst.clone(), bytes),
                _ => Ok(()),
            },
            Message::Deliver { pdu, .. } => {
                if pdu.corrupted {
                    ctx.emit(TraceRecord::new(1, "drop").with("reason", "corrupted"));
                    return Ok(());
                }
                let Body::Ether(f) = pdu.body else {
                    return Err(ctx.fault("nic expects ethernet frames"));
                };
                let EtherPayload::Data { id, bytes } = f.payload else {
                    return Ok(());
                };
                if f.dst != self.addr && f.dst != BROADCAST {
                    return Ok(());
                }
                ctx.emit(TraceRecord::new(1, "rx").with("src", &f.src).with("id", id));
                self.received.push((f.src, id));
                if ctx.is_wired(Port::Up) {
                    ctx.send(Port::Up, Pdu::sdu(bytes))?;
                }
                Ok(())
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "nic",
            "addr": self.addr,
            "sent": self.sent,
            "received": self.received.len(),
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
pub enum Role {
    Root,
    Designated,
    Blocked,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Root => "root",
            Role::Designated => "designated",
            Role::Blocked => "blocked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortState {
    Blocking,
    Listening,
    Forwarding,
}

impl PortState {
    pub fn as_str(self) -> &'static str {
        match self {
            PortState::Blocking => "blocking",
            PortState::Listening => "listening",
            PortState::Forwarding => "forwarding",
        }
    }
}

#[derive(Debug, Clone)]
struct PortInfo {
    port: Port,
    cost: u32,
    role: Role,
    state: PortState,
    since: f64,
    /// Best BPDU heard on this port and when it arrived.
    heard: Option<(Bpdu, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StpTimers {
    pub hello: f64,
    pub max_age: f64,
    pub fwd_delay: f64,
    pub aging: f64,
    pub age_increment: f64,
}

impl Default for StpTimers {
    fn default() -> Self {
        StpTimers {
            hello: 2.0,
            max_age: 20.0,
            fwd_delay: 15.0,
            aging: 300.0,
            age_increment: 1.0,
        }
    }
}

const T_HELLO: u64 = 1;
const T_TICK: u64 = 2;

pub struct Bridge {
    id: BridgeId,
    timers: StpTimers,
    ports: Vec<PortInfo>,
    root: BridgeId,
    root_cost: u32,
    root_port: Option<usize>,
    fdb: BTreeMap<String, (usize, f64)>,
    forwarded: u64,
    filtered: u64,
}

impl Bridge {
    pub fn new(id: BridgeId, timers: StpTimers) -> Self {
        Bridge {
            id,
            timers,
            ports: Vec::new(),
            root: id,
            root_cost: 0,
            root_port: None,
            fdb: BTreeMap::new(),
            forwarded: 0,
            filtered: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let priority = spec.u64("priority", 32768)?;
        if priority > u16::MAX as u64 {
            return Err(spec.bad("priority", &priority.to_string()));
        }
        let id = BridgeId {
            priority: priority as u16,
            id: spec.u64("id", spec.node_index as u64 + 1)?,
        };
        let d = StpTimers::default();
        let timers = StpTimers {
            hello: spec.positive("hello", d.hello)?,
            max_age: spec.positive("max_age", d.max_age)?,
            fwd_delay: spec.non_negative("fwd_delay", d.fwd_delay)?,
            aging: spec.positive("aging", d.aging)?,
            age_increment: spec.non_negative("age_increment", d.age_increment)?,
        };
        Ok(Bridge::new(id, timers))
    }

    pub fn id(&self) -> BridgeId {
        self.id
    }

    pub fn root(&self) -> BridgeId {
        self.root
    }

    pub fn root_cost(&self) -> u32 {
        self.root_cost
    }

    pub fn roles(&self) -> Vec<Role> {
        self.ports.iter().map(|p| p.role).collect()
    }

    pub fn states(&self) -> Vec<PortState> {
        self.ports.iter().map(|p| p.state).collect()
    }

    /// Station address to port index.
    pub fn fdb(&self) -> BTreeMap<String, usize> {
        self.fdb.iter().map(|(a, (p, _))| (a.clone(), *p)).collect()
    }

    fn index_of(&self, port: Port) -> Option<usize> {
        self.ports.iter().position(|p| p.port == port)
    }

    fn info_age(&self, heard: &(Bpdu, f64), now: f64) -> f64 {
        heard.0.age + (now - heard.1)
    }

    fn own_bpdu(&self, i: usize, now: f64) -> Bpdu {
        let age = match self.root_port {
            None => 0.0,
            Some(r) => self.ports[r]
                .heard
                .as_ref()
                .map(|h| self.info_age(h, now) + self.timers.age_increment)
                .unwrap_or(0.0),
        };
        Bpdu {
            root: self.root,
            cost: self.root_cost,
            sender: self.id,
            port: i as u16,
            age,
        }
    }

    fn send_bpdu(&self, ctx: &mut Ctx<'_>, i: usize) -> HandlerResult {
        let b = self.own_bpdu(i, ctx.now());
        let frame = EtherFrame {
            src: format!("br{}", self.id),
            dst: "stp".into(),
            payload: EtherPayload::Bpdu(b),
        };
        ctx.send(self.ports[i].port, frame.into_pdu())
    }

    fn send_config(&self, ctx: &mut Ctx<'_>) -> HandlerResult {
        for i in 0..self.ports.len() {
            if self.ports[i].role == Role::Designated {
                self.send_bpdu(ctx, i)?;
            }
        }
        Ok(())
    }

    /// Drops heard information that has exceeded the maximum age.
    fn expire(&mut self, now: f64) -> bool {
        let max_age = self.timers.max_age;
        let mut changed = false;
        for p in &mut self.ports {
            if let Some(h) = &p.heard {
                if h.0.age + (now - h.1) >= max_age - EPS {
                    p.heard = None;
                    changed = true;
                }
            }
        }
        changed
    }

    /// Recomputes the root, root port and port roles from heard information.
    fn recompute(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        let now = ctx.now();
        let mut best: Option<((BridgeId, u32, BridgeId, u16, u16), usize)> = None;
        for (i, p) in self.ports.iter().enumerate() {
            if let Some((b, _)) = &p.heard {
                let v = (b.root, b.cost + p.cost, b.sender, b.port, i as u16);
                if best.as_ref().map_or(true, |(bv, _)| v < *bv) {
                    best = Some((v, i));
                }
            }
        }
        let (root, cost, root_port) = match best {
            Some((v, i)) if v.0 < self.id => (v.0, v.1, Some(i)),
            _ => (self.id, 0, None),
        };
        let root_changed = root != self.root;
        if root_changed || cost != self.root_cost || root_port != self.root_port {
            ctx.emit(
                TraceRecord::new(1, "stp_root")
                    .with("root", root)
                    .with("cost", cost)
                    .with("root_port", root_port.map_or("-".to_string(), |p| p.to_string())),
            );
        }
        let mut topology_changed = root_changed || root_port != self.root_port;
        self.root = root;
        self.root_cost = cost;
        self.root_port = root_port;

        for i in 0..self.ports.len() {
            let role = if Some(i) == root_port {
                Role::Root
            } else {
                let mine = (root, cost, self.id, i as u16);
                match &self.ports[i].heard {
                    Some((b, _)) if b.vector() < mine => Role::Blocked,
                    _ => Role::Designated,
                }
            };
            let p = &mut self.ports[i];
            if role == p.role {
                continue;
            }
            let state = match role {
                Role::Blocked => PortState::Blocking,
                _ if p.state == PortState::Forwarding => PortState::Forwarding,
                _ if self.timers.fwd_delay <= 0.0 => PortState::Forwarding,
                _ => PortState::Listening,
            };
            if state != p.state {
                p.since = now;
            }
            p.role = role;
            p.state = state;
            topology_changed = true;
            ctx.emit(
                TraceRecord::new(1, "port_role")
                    .with("port", i)
                    .with("role", role.as_str())
                    .with("state", state.as_str()),
            );
            if role == Role::Blocked {
                self.flush_port(ctx, i);
            }
        }
        // learned locations may now point the wrong way
        if topology_changed && !self.fdb.is_empty() {
            self.fdb.clear();
            ctx.emit(TraceRecord::new(1, "fdb_flush"));
            self.emit_fdb(ctx);
        }
        Ok(())
    }

    fn flush_port(&mut self, ctx: &mut Ctx<'_>, port: usize) {
        let before = self.fdb.len();
        self.fdb.retain(|_, (p, _)| *p != port);
        if self.fdb.len() != before {
            self.emit_fdb(ctx);
        }
    }

    fn emit_fdb(&self, ctx: &mut Ctx<'_>) {
        let entries = self
            .fdb
            .iter()
            .map(|(a, (p, _))| format!("{a}@{p}"))
            .collect::<Vec<_>>()
            .join(",");
        let entries = if entries.is_empty() { "-".to_string() } else { entries };
        ctx.emit(TraceRecord::new(1, "fdb").with("entries", entries));
    }

    fn advance_states(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        for (i, p) in self.ports.iter_mut().enumerate() {
            if p.state == PortState::Listening && now - p.since >= self.timers.fwd_delay - EPS {
                p.state = PortState::Forwarding;
                p.since = now;
                ctx.emit(
                    TraceRecord::new(1, "port_role")
                        .with("port", i)
                        .with("role", p.role.as_str())
                        .with("state", p.state.as_str()),
                );
            }
        }
    }

    fn age_fdb(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        let aging = self.timers.aging;
        let stale: Vec<String> = self
            .fdb
            .iter()
            .filter(|(_, (_, t))| now - t >= aging - EPS)
            .map(|(a, _)| a.clone())
            .collect();
        for a in &stale {
            self.fdb.remove(a);
            ctx.emit(TraceRecord::new(1, "fdb_age").with("addr", a));
        }
        if !stale.is_empty() {
            self.emit_fdb(ctx);
        }
    }

    fn on_bpdu(&mut self, ctx: &mut Ctx<'_>, i: usize, b: Bpdu) -> HandlerResult {
        let now = ctx.now();
        if b.age >= self.timers.max_age - EPS {
            return Ok(());
        }
        let replace = match &self.ports[i].heard {
            None => true,
            Some((old, _)) => {
                // fresher copy from the same sender always replaces
                b.vector() <= old.vector() || (old.sender == b.sender && old.port == b.port)
            }
        };
        if !replace {
            // an inferior BPDU on a designated port gets a corrective reply
            if self.ports[i].role == Role::Designated {
                self.send_bpdu(ctx, i)?;
            }
            return Ok(());
        }
        self.ports[i].heard = Some((b, now));
        let before = (self.root, self.root_cost, self.root_port, self.roles());
        self.recompute(ctx)?;
        let after = (self.root, self.root_cost, self.root_port, self.roles());
        if before != after || Some(i) == self.root_port {
            self.send_config(ctx)?;
        } else if self.ports[i].role == Role::Designated {
            self.send_bpdu(ctx, i)?;
        }
        Ok(())
    }

    fn on_data(&mut self, ctx: &mut Ctx<'_>, i: usize, frame: EtherFrame) -> HandlerResult {
        if self.ports[i].state != PortState::Forwarding {
            return Ok(());
        }
        let now = ctx.now();
        let learned = self.fdb.insert(frame.src.clone(), (i, now));
        if learned.map(|(p, _)| p) != Some(i) {
            ctx.emit(TraceRecord::new(1, "fdb_learn").with("addr", &frame.src).with("port", i));
            self.emit_fdb(ctx);
        }
        let out: Vec<usize> = match self.fdb.get(&frame.dst) {
            Some(&(p, _)) if frame.dst != BROADCAST => {
                if p == i {
                    self.filtered += 1;
                    ctx.emit(TraceRecord::new(2, "filter").with("dst", &frame.dst).with("port", i));
                    return Ok(());
                }
                if self.ports[p].state == PortState::Forwarding {
                    vec![p]
                } else {
                    vec![]
                }
            }
            _ => (0..self.ports.len())
                .filter(|&p| p != i && self.ports[p].state == PortState::Forwarding)
                .collect(),
        };
        for p in out {
            self.forwarded += 1;
            ctx.emit(TraceRecord::new(2, "forward").with("dst", &frame.dst).with("port", p));
            ctx.send(self.ports[p].port, frame.clone().into_pdu())?;
        }
        Ok(())
    }
}

impl Component for Bridge {
    fn kind(&self) -> &'static str {
        "bridge"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if let Some(port) = at.port {
            let cost = at.link.param_f64("cost").map_or(1, |c| c.max(1.0) as u32);
            self.ports.push(PortInfo {
                port,
                cost,
                role: Role::Designated,
                state: PortState::Listening,
                since: 0.0,
                heard: None,
            });
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                let now = ctx.now();
                for (i, p) in self.ports.iter_mut().enumerate() {
                    p.since = now;
                    if self.timers.fwd_delay <= 0.0 {
                        p.state = PortState::Forwarding;
                    }
                    ctx.emit(
                        TraceRecord::new(1, "port_role")
                            .with("port", i)
                            .with("role", p.role.as_str())
                            .with("state", p.state.as_str()),
                    );
                }
                self.send_config(ctx)?;
                ctx.timer(self.timers.hello, T_HELLO)?;
                ctx.timer(self.timers.hello, T_TICK)?;
                Ok(())
            }
            Message::Timer(T_HELLO) => {
                if self.root_port.is_none() {
                    self.send_config(ctx)?;
                }
                ctx.timer(self.timers.hello, T_HELLO)?;
                Ok(())
            }
            Message::Timer(T_TICK) => {
                if self.expire(ctx.now()) {
                    let was_root = self.root_port.is_none();
                    self.recompute(ctx)?;
                    if !was_root || self.root_port.is_some() {
                        self.send_config(ctx)?;
                    }
                }
                self.advance_states(ctx);
                self.age_fdb(ctx);
                ctx.timer(self.timers.hello, T_TICK)?;
                Ok(())
            }
            Message::Timer(_) => Ok(()),
            Message::Deliver { port, pdu } => {
                let Some(i) = self.index_of(port) else {
                    return Err(ctx.fault(format!("bridge has no port {port}")));
                };
                if pdu.corrupted {
                    ctx.emit(TraceRecord::new(1, "drop").with("reason", "corrupted"));
                    return Ok(());
                }
                match pdu.body {
                    Body::Ether(EtherFrame {
                        payload: EtherPayload::Bpdu(b),
                        ..
                    }) => self.on_bpdu(ctx, i, b),
                    Body::Ether(f) => self.on_data(ctx, i, f),
                    other => Err(ctx.fault(format!("bridge cannot consume {}", other.label()))),
                }
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        let ports: Vec<_> = self
            .ports
            .iter()
            .enumerate()
            .map(|(i, p)| {
                json!({
                    "port": i,
                    "role": p.role.as_str(),
                    "state": p.state.as_str(),
                    "cost": p.cost,
                })
            })
            .collect();
        json!({
            "kind": "bridge",
            "id": self.id.to_string(),
            "root": self.root.to_string(),
            "root_cost": self.root_cost,
            "ports": ports,
            "fdb": self.fdb(),
            "forwarded": self.forwarded,
            "filtered": self.filtered,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

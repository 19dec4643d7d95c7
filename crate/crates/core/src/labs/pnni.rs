//! Simplified two-level PNNI: Hellos, PTSE flooding with acknowledgement,
//! peer group leader election and simple-node aggregation.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;

use serde_json::json;

use crate::kernel::{Attachment, Component, Ctx, HandlerResult, Message, Port};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

const EPS: f64 = 1e-9;
const HELLO_BYTES: u64 = 64;
const PTSP_BYTES: u64 = 128;
const ACK_BYTES: u64 = 32;
const NODAL_ID: u32 = 0;
const LGN_ID: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub pg: String,
    pub id: u64,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.pg, self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PtseContent {
    Nodal {
        priority: u32,
    },
    Link {
        remote: NodeId,
        metric: u32,
        outside: bool,
        withdrawn: bool,
    },
    LogicalNode {
        pg: String,
        withdrawn: bool,
    },
    LogicalLink {
        from_pg: String,
        to_pg: String,
        metric: u32,
        withdrawn: bool,
    },
}

impl PtseContent {
    pub fn withdrawn(&self) -> bool {
        match self {
            PtseContent::Nodal { .. } => false,
            PtseContent::Link { withdrawn, .. }
            | PtseContent::LogicalNode { withdrawn, .. }
            | PtseContent::LogicalLink { withdrawn, .. } => *withdrawn,
        }
    }

    fn withdraw(&mut self) {
        match self {
            PtseContent::Nodal { .. } => {}
            PtseContent::Link { withdrawn, .. }
            | PtseContent::LogicalNode { withdrawn, .. }
            | PtseContent::LogicalLink { withdrawn, .. } => *withdrawn = true,
        }
    }
}

pub type PtseKey = (NodeId, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct Ptse {
    /// 0 for the physical peer group, 1 for the parent level.
    pub level: u8,
    pub origin: NodeId,
    pub ptse_id: u32,
    pub seq: u64,
    pub content: PtseContent,
}

impl Ptse {
    pub fn key(&self) -> PtseKey {
        (self.origin.clone(), self.ptse_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PnniPacket {
    Hello {
        from: NodeId,
        port: u16,
        heard: Option<NodeId>,
    },
    Ptsp(Ptse),
    Ack {
        origin: NodeId,
        ptse_id: u32,
        seq: u64,
    },
}

impl PnniPacket {
    pub fn label(&self) -> String {
        match self {
            PnniPacket::Hello { from, .. } => format!("hello:{from}"),
            PnniPacket::Ptsp(p) => format!("ptsp:{}/{}#{}", p.origin, p.ptse_id, p.seq),
            PnniPacket::Ack {
                origin,
                ptse_id,
                seq,
            } => format!("ack:{origin}/{ptse_id}#{seq}"),
        }
    }

    fn into_pdu(self) -> Pdu {
        let (bytes, color) = match &self {
            PnniPacket::Hello { .. } => (HELLO_BYTES, Color::Control),
            PnniPacket::Ptsp(_) => (PTSP_BYTES, Color::Data),
            PnniPacket::Ack { .. } => (ACK_BYTES, Color::Ack),
        };
        Pdu::new(Body::Pnni(self), bytes * 8, color)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HelloState {
    Down,
    OneWay,
    TwoWay,
}

impl HelloState {
    pub fn as_str(self) -> &'static str {
        match self {
            HelloState::Down => "down",
            HelloState::OneWay => "one_way",
            HelloState::TwoWay => "two_way",
        }
    }
}

#[derive(Debug, Clone)]
struct Neighbor {
    port: Port,
    metric: u32,
    state: HelloState,
    remote: Option<NodeId>,
    last_heard: f64,
    /// Remote end belongs to another peer group.
    outside: bool,
    /// Highest instance the neighbor is known to hold, per key.
    known: HashMap<PtseKey, u64>,
}

impl Neighbor {
    fn floods(&self, level: u8) -> bool {
        self.state == HelloState::TwoWay && (level == 1 || !self.outside)
    }
}

/// Undirected inside adjacency of a peer group as seen in a database:
/// a link counts only if both ends advertise it.
pub fn inside_graph(db: &BTreeMap<PtseKey, Ptse>, pg: &str) -> BTreeMap<NodeId, Vec<(NodeId, u32)>> {
    let mut half: BTreeMap<(NodeId, NodeId), u32> = BTreeMap::new();
    for p in db.values() {
        if p.level != 0 || p.origin.pg != pg {
            continue;
        }
        if let PtseContent::Link {
            remote,
            metric,
            outside: false,
            withdrawn: false,
        } = &p.content
        {
            let e = half.entry((p.origin.clone(), remote.clone())).or_insert(*metric);
            *e = (*e).min(*metric);
        }
    }
    let mut g: BTreeMap<NodeId, Vec<(NodeId, u32)>> = BTreeMap::new();
    for ((a, b), m) in &half {
        if let Some(back) = half.get(&(b.clone(), a.clone())) {
            g.entry(a.clone()).or_default().push((b.clone(), (*m).max(*back)));
        }
    }
    g
}

/// Shortest inside path costs from `src`.
pub fn shortest_paths(
    g: &BTreeMap<NodeId, Vec<(NodeId, u32)>>,
    src: &NodeId,
) -> BTreeMap<NodeId, u64> {
    let mut dist: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(src.clone(), 0);
    heap.push(Reverse((0u64, src.clone())));
    while let Some(Reverse((d, n))) = heap.pop() {
        if dist.get(&n).is_some_and(|&best| d > best) {
            continue;
        }
        for (m, w) in g.get(&n).into_iter().flatten() {
            let nd = d + *w as u64;
            if dist.get(m).map_or(true, |&cur| nd < cur) {
                dist.insert(m.clone(), nd);
                heap.push(Reverse((nd, m.clone())));
            }
        }
    }
    dist
}

/// Leader among the members reachable from `me`: highest (priority, id).
pub fn elect(db: &BTreeMap<PtseKey, Ptse>, me: &NodeId) -> Option<NodeId> {
    let g = inside_graph(db, &me.pg);
    let reach = shortest_paths(&g, me);
    reach
        .keys()
        .filter_map(|n| {
            db.get(&(n.clone(), NODAL_ID)).and_then(|p| match p.content {
                PtseContent::Nodal { priority } => Some((priority, n.clone())),
                _ => None,
            })
        })
        .max()
        .map(|(_, n)| n)
}

/// Parent-level view: logical group nodes and logical links, each link
/// named once by its unordered pair of peer groups.
pub fn parent_view(db: &BTreeMap<PtseKey, Ptse>) -> (BTreeSet<String>, BTreeSet<(String, String)>) {
    let mut nodes = BTreeSet::new();
    let mut links = BTreeSet::new();
    for p in db.values().filter(|p| p.level == 1) {
        match &p.content {
            PtseContent::LogicalNode { pg, withdrawn: false } => {
                nodes.insert(pg.clone());
            }
            PtseContent::LogicalLink {
                from_pg,
                to_pg,
                withdrawn: false,
                ..
            } => {
                let pair = if from_pg <= to_pg {
                    (from_pg.clone(), to_pg.clone())
                } else {
                    (to_pg.clone(), from_pg.clone())
                };
                links.insert(pair);
            }
            _ => {}
        }
    }
    (nodes, links)
}

const T_TICK: u64 = 1;

pub struct PnniNode {
    me: NodeId,
    priority: u32,
    hello: f64,
    inactivity: f64,
    retx: f64,
    hold: f64,
    ports: Vec<Neighbor>,
    db: BTreeMap<PtseKey, Ptse>,
    own_seq: HashMap<u32, u64>,
    /// (port index, key) -> (seq, last sent)
    pending: BTreeMap<(usize, PtseKey), (u64, f64)>,
    last_change: f64,
    leader: Option<NodeId>,
    /// Parent-level PTSEs this node originated as leader, by ptse id.
    logical: BTreeMap<u32, PtseContent>,
    logical_ids: BTreeMap<String, u32>,
}

impl PnniNode {
    pub fn new(me: NodeId, priority: u32) -> Self {
        PnniNode {
            me,
            priority,
            hello: 1.0,
            inactivity: 3.0,
            retx: 2.0,
            hold: 3.0,
            ports: Vec::new(),
            db: BTreeMap::new(),
            own_seq: HashMap::new(),
            pending: BTreeMap::new(),
            last_change: 0.0,
            leader: None,
            logical: BTreeMap::new(),
            logical_ids: BTreeMap::new(),
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let me = NodeId {
            pg: spec.str("pg", "0").to_string(),
            id: spec.u64("id", spec.node_index as u64 + 1)?,
        };
        let mut n = PnniNode::new(me, spec.u64("priority", 0)? as u32);
        n.hello = spec.positive("hello", 1.0)?;
        n.inactivity = spec.positive("inactivity", 3.0)?;
        n.retx = spec.positive("retx", 2.0)?;
        n.hold = spec.positive("hold", 3.0)?;
        Ok(n)
    }

    pub fn id(&self) -> &NodeId {
        &self.me
    }

    pub fn leader(&self) -> Option<&NodeId> {
        self.leader.as_ref()
    }

    pub fn db(&self) -> &BTreeMap<PtseKey, Ptse> {
        &self.db
    }

    pub fn hello_states(&self) -> Vec<HelloState> {
        self.ports.iter().map(|p| p.state).collect()
    }

    pub fn is_border(&self) -> bool {
        self.ports.iter().any(|p| p.outside && p.state == HelloState::TwoWay)
    }

    fn next_seq(&mut self, ptse_id: u32) -> u64 {
        let s = self.own_seq.entry(ptse_id).or_insert(0);
        *s += 1;
        *s
    }

    fn originate(&mut self, ctx: &mut Ctx<'_>, level: u8, ptse_id: u32, content: PtseContent) -> HandlerResult {
        let seq = self.next_seq(ptse_id);
        let p = Ptse {
            level,
            origin: self.me.clone(),
            ptse_id,
            seq,
            content,
        };
        ctx.emit(
            TraceRecord::new(1, "ptse_originate")
                .with("level", level)
                .with("key", key_label(&p.key()))
                .with("seq", seq)
                .with("withdrawn", p.content.withdrawn() as u8),
        );
        self.install(ctx, p, None)
    }

    /// Installs a newer instance and floods it; returns whether it was new.
    fn install(&mut self, ctx: &mut Ctx<'_>, p: Ptse, from: Option<usize>) -> HandlerResult {
        let key = p.key();
        if let Some(i) = from {
            let k = self.ports[i].known.entry(key.clone()).or_insert(0);
            *k = (*k).max(p.seq);
            self.send(
                ctx,
                i,
                PnniPacket::Ack {
                    origin: p.origin.clone(),
                    ptse_id: p.ptse_id,
                    seq: p.seq,
                },
            )?;
        }
        if self.db.get(&key).is_some_and(|old| old.seq >= p.seq) {
            return Ok(());
        }
        if p.level == 0 && p.origin.pg != self.me.pg {
            ctx.emit(TraceRecord::new(0, "violation").with("reason", "foreign_ptse").with("key", key_label(&key)));
            return Ok(());
        }
        ctx.emit(
            TraceRecord::new(2, "ptse_install")
                .with("level", p.level)
                .with("key", key_label(&key))
                .with("seq", p.seq),
        );
        if p.level == 0 {
            self.last_change = ctx.now();
        }
        let level = p.level;
        self.db.insert(key.clone(), p);
        for i in 0..self.ports.len() {
            if Some(i) != from && self.ports[i].floods(level) {
                self.offer(ctx, i, &key, false)?;
            }
        }
        if level == 1 {
            let (nodes, links) = parent_view(&self.db);
            let links: Vec<String> = links.iter().map(|(a, b)| format!("{a}-{b}")).collect();
            ctx.emit(
                TraceRecord::new(1, "hierarchy")
                    .with("nodes", join_or_dash(nodes.iter().cloned()))
                    .with("links", join_or_dash(links.into_iter())),
            );
        }
        Ok(())
    }

    /// Sends the current instance of `key` on port `i` unless the neighbor
    /// already holds it.
    fn offer(&mut self, ctx: &mut Ctx<'_>, i: usize, key: &PtseKey, retx: bool) -> HandlerResult {
        let Some(p) = self.db.get(key).cloned() else {
            return Ok(());
        };
        if !retx && self.ports[i].known.get(key).is_some_and(|&s| s >= p.seq) {
            return Ok(());
        }
        self.ports[i].known.insert(key.clone(), p.seq);
        self.pending.insert((i, key.clone()), (p.seq, ctx.now()));
        ctx.emit(
            TraceRecord::new(2, if retx { "ptsp_retx" } else { "ptsp_tx" })
                .with("port", i)
                .with("level", p.level)
                .with("key", key_label(key))
                .with("seq", p.seq),
        );
        self.send(ctx, i, PnniPacket::Ptsp(p))
    }

    fn send(&self, ctx: &mut Ctx<'_>, i: usize, pkt: PnniPacket) -> HandlerResult {
        ctx.send(self.ports[i].port, pkt.into_pdu())
    }

    fn sync(&mut self, ctx: &mut Ctx<'_>, i: usize) -> HandlerResult {
        let keys: Vec<PtseKey> = self
            .db
            .iter()
            .filter(|(_, p)| self.ports[i].floods(p.level))
            .map(|(k, _)| k.clone())
            .collect();
        for k in keys {
            self.offer(ctx, i, &k, false)?;
        }
        Ok(())
    }

    fn set_state(&mut self, ctx: &mut Ctx<'_>, i: usize, state: HelloState) -> HandlerResult {
        let old = self.ports[i].state;
        if old == state {
            return Ok(());
        }
        self.ports[i].state = state;
        let remote = self.ports[i].remote.as_ref().map_or("-".to_string(), |r| r.to_string());
        ctx.emit(
            TraceRecord::new(1, "hello_state")
                .with("port", i)
                .with("state", state.as_str())
                .with("remote", remote)
                .with("outside", self.ports[i].outside as u8),
        );
        let link_content = |n: &Neighbor, withdrawn: bool| PtseContent::Link {
            remote: n.remote.clone().expect("heard neighbor"),
            metric: n.metric,
            outside: n.outside,
            withdrawn,
        };
        if state == HelloState::TwoWay {
            let c = link_content(&self.ports[i], false);
            self.originate(ctx, 0, 1 + i as u32, c)?;
            self.sync(ctx, i)?;
        } else if old == HelloState::TwoWay {
            let c = link_content(&self.ports[i], true);
            self.originate(ctx, 0, 1 + i as u32, c)?;
        }
        if state == HelloState::Down {
            self.ports[i].known.clear();
            self.pending.retain(|(p, _), _| *p != i);
        }
        Ok(())
    }

    fn on_hello(&mut self, ctx: &mut Ctx<'_>, i: usize, from: NodeId, heard: Option<NodeId>) -> HandlerResult {
        let n = &mut self.ports[i];
        n.last_heard = ctx.now();
        if n.remote.as_ref() != Some(&from) {
            if n.state == HelloState::TwoWay {
                self.set_state(ctx, i, HelloState::Down)?;
            }
            let n = &mut self.ports[i];
            n.outside = from.pg != self.me.pg;
            n.remote = Some(from);
        }
        let state = if heard.as_ref() == Some(&self.me) {
            HelloState::TwoWay
        } else {
            HelloState::OneWay
        };
        self.set_state(ctx, i, state)
    }

    fn tick(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        let now = ctx.now();
        for i in 0..self.ports.len() {
            let n = &self.ports[i];
            if n.state != HelloState::Down && now - n.last_heard > self.inactivity * self.hello + EPS {
                self.set_state(ctx, i, HelloState::Down)?;
            }
            let n = &self.ports[i];
            let hello = PnniPacket::Hello {
                from: self.me.clone(),
                port: i as u16,
                heard: if n.state == HelloState::Down { None } else { n.remote.clone() },
            };
            ctx.emit(TraceRecord::new(3, "hello_tx").with("port", i));
            self.send(ctx, i, hello)?;
        }
        let due: Vec<(usize, PtseKey)> = self
            .pending
            .iter()
            .filter(|(_, (_, t))| now - t >= self.retx - EPS)
            .map(|(k, _)| k.clone())
            .collect();
        for (i, key) in due {
            self.offer(ctx, i, &key, true)?;
        }
        if now - self.last_change >= self.hold * self.hello - EPS {
            let leader = elect(&self.db, &self.me);
            if leader != self.leader {
                ctx.emit(
                    TraceRecord::new(0, "leader")
                        .with("pg", &self.me.pg)
                        .with("leader", leader.as_ref().map_or("-".to_string(), |l| l.to_string())),
                );
                self.leader = leader;
            }
        }
        self.aggregate(ctx)
    }

    /// Keeps this node's parent-level PTSEs in line with its leadership
    /// and the group's current border links.
    fn aggregate(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        let mut want: BTreeMap<u32, PtseContent> = BTreeMap::new();
        if self.leader.as_ref() == Some(&self.me) {
            want.insert(
                LGN_ID,
                PtseContent::LogicalNode {
                    pg: self.me.pg.clone(),
                    withdrawn: false,
                },
            );
            let g = inside_graph(&self.db, &self.me.pg);
            let dist = shortest_paths(&g, &self.me);
            let mut best: BTreeMap<String, u64> = BTreeMap::new();
            for p in self.db.values() {
                if p.level != 0 || p.origin.pg != self.me.pg {
                    continue;
                }
                if let PtseContent::Link {
                    remote,
                    metric,
                    outside: true,
                    withdrawn: false,
                } = &p.content
                {
                    if let Some(d) = dist.get(&p.origin) {
                        let m = d + *metric as u64;
                        let e = best.entry(remote.pg.clone()).or_insert(m);
                        *e = (*e).min(m);
                    }
                }
            }
            for (pg, metric) in best {
                let next = LGN_ID + 1 + self.logical_ids.len() as u32;
                let id = *self.logical_ids.entry(pg.clone()).or_insert(next);
                want.insert(
                    id,
                    PtseContent::LogicalLink {
                        from_pg: self.me.pg.clone(),
                        to_pg: pg,
                        metric: metric.min(u32::MAX as u64) as u32,
                        withdrawn: false,
                    },
                );
            }
        }
        let ids: BTreeSet<u32> = want.keys().chain(self.logical.keys()).copied().collect();
        for id in ids {
            let target = match (want.get(&id), self.logical.get(&id)) {
                (Some(w), Some(have)) if w == have => continue,
                (Some(w), _) => w.clone(),
                (None, Some(have)) if have.withdrawn() => continue,
                (None, Some(have)) => {
                    let mut c = have.clone();
                    c.withdraw();
                    c
                }
                (None, None) => continue,
            };
            self.logical.insert(id, target.clone());
            self.originate(ctx, 1, id, target)?;
        }
        Ok(())
    }
}

fn key_label(k: &PtseKey) -> String {
    format!("{}/{}", k.0, k.1)
}

fn join_or_dash(it: impl Iterator<Item = String>) -> String {
    let v: Vec<String> = it.collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(",")
    }
}

impl Component for PnniNode {
    fn kind(&self) -> &'static str {
        "pnni"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if let Some(port) = at.port {
            let metric = at.link.param_f64("metric").map_or(1, |m| m.max(1.0) as u32);
            self.ports.push(Neighbor {
                port,
                metric,
                state: HelloState::Down,
                remote: None,
                last_heard: 0.0,
                outside: false,
                known: HashMap::new(),
            });
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                self.originate(ctx, 0, NODAL_ID, PtseContent::Nodal { priority: self.priority })?;
                self.tick(ctx)?;
                ctx.timer(self.hello, T_TICK)?;
                Ok(())
            }
            Message::Timer(T_TICK) => {
                self.tick(ctx)?;
                ctx.timer(self.hello, T_TICK)?;
                Ok(())
            }
            Message::Timer(_) => Ok(()),
            Message::Deliver { port, pdu } => {
                let Some(i) = self.ports.iter().position(|n| n.port == port) else {
                    return Err(ctx.fault(format!("pnni node has no port {port}")));
                };
                if pdu.corrupted {
                    ctx.emit(TraceRecord::new(1, "drop").with("reason", "corrupted"));
                    return Ok(());
                }
                let Body::Pnni(pkt) = pdu.body else {
                    return Err(ctx.fault("pnni node expects pnni packets"));
                };
                match pkt {
                    PnniPacket::Hello { from, heard, .. } => self.on_hello(ctx, i, from, heard),
                    PnniPacket::Ptsp(p) => {
                        if self.ports[i].state != HelloState::TwoWay {
                            return Ok(());
                        }
                        if !self.ports[i].floods(p.level) {
                            ctx.emit(TraceRecord::new(0, "violation").with("reason", "ptse_on_border").with("key", key_label(&p.key())));
                            return Ok(());
                        }
                        self.install(ctx, p, Some(i))
                    }
                    PnniPacket::Ack {
                        origin,
                        ptse_id,
                        seq,
                    } => {
                        let key = (origin, ptse_id);
                        if self.pending.get(&(i, key.clone())).is_some_and(|(s, _)| *s <= seq) {
                            self.pending.remove(&(i, key));
                        }
                        Ok(())
                    }
                }
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        let (nodes, links) = parent_view(&self.db);
        let neighbors: Vec<_> = self
            .ports
            .iter()
            .enumerate()
            .map(|(i, n)| {
                json!({
                    "port": i,
                    "state": n.state.as_str(),
                    "remote": n.remote.as_ref().map(|r| r.to_string()),
                    "outside": n.outside,
                })
            })
            .collect();
        json!({
            "kind": "pnni",
            "id": self.me.to_string(),
            "leader": self.leader.as_ref().map(|l| l.to_string()),
            "neighbors": neighbors,
            "db_size": self.db.len(),
            "logical_nodes": nodes,
            "logical_links": links.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>(),
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

//! Event-heap scheduler, simulation clock and component registry.
//!
//! Components never touch one another directly. A handler receives its own
//! state plus a [`Ctx`] through which it can schedule events, send PDUs out
//! of its ports, draw from its private random stream and emit trace records.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::LinkDecl;
use crate::netbase::Pdu;
use crate::trace::{TraceLog, TraceRecord};

/// Delays smaller than this are treated as zero, and time comparisons in
/// protocol code use it as tolerance.
pub const TIME_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId(pub u32);

impl ComponentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Handle returned by scheduling; permits cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RngStreamId(pub u64);

impl RngStreamId {
    /// Stream derived from a component name (64-bit FNV-1a), so that adding
    /// components never shifts the streams of existing ones.
    pub fn for_name(name: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        RngStreamId(h)
    }
}

/// Attachment point on a component. `Up` faces the layer above, `Net(n)`
/// faces the layer below or the n-th attached link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Port {
    Up,
    Net(u16),
}

impl std::fmt::Display for Port {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Port::Up => write!(f, "up"),
            Port::Net(n) => write!(f, "{n}"),
        }
    }
}

/// External stimulus delivered to a component as an ordinary event.
#[derive(Debug, Clone, PartialEq)]
pub enum Injection {
    /// Application payload handed to a traffic source.
    Send(Vec<u8>),
    /// Link failure (`false`) or repair (`true`).
    LinkState(bool),
}

#[derive(Debug, Clone)]
pub enum Message {
    /// Delivered once to every component when the run starts.
    Start,
    /// Component-defined timer tag.
    Timer(u64),
    Deliver { port: Port, pdu: Pdu },
    Inject(Injection),
}

impl Message {
    pub fn label(&self) -> &'static str {
        match self {
            Message::Start => "start",
            Message::Timer(_) => "timer",
            Message::Deliver { .. } => "deliver",
            Message::Inject(_) => "inject",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("unknown component {0:?}")]
    UnknownTarget(ComponentId),
    #[error("negative delay {0}")]
    NegativeDelay(f64),
    #[error("stop time {stop} precedes current time {now}")]
    StopBeforeNow { stop: f64, now: f64 },
    #[error("component {component} has nothing wired to port {port}")]
    Unwired { component: String, port: Port },
    #[error("port {0}:{1} is already wired")]
    AlreadyWired(String, Port),
    #[error("handler fault in component {component}: {message}")]
    Fault { component: String, message: String },
}

pub type HandlerResult = Result<(), KernelError>;

/// Which end of a link declaration a component sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Told to every component of a node when one of its links is wired.
/// `port` is set only for the component the link attaches to directly;
/// the layers stacked above it see `None`.
#[derive(Debug, Clone, Copy)]
pub struct Attachment<'a> {
    pub port: Option<Port>,
    pub side: Side,
    pub link: &'a LinkDecl,
}

/// A protocol entity: layer instance, link, bridge, switch.
pub trait Component: Any {
    fn kind(&self) -> &'static str;

    fn attach(&mut self, _at: &Attachment<'_>) {}

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult;

    /// Summary state for rendering from scratch. Must not mutate.
    fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Information about a dispatched event, returned by [`Kernel::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchedEvent {
    pub fire_time: f64,
    pub seq: u64,
    pub target: ComponentId,
    pub label: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub events: u64,
    pub clock: f64,
    pub counters: BTreeMap<String, BTreeMap<String, u64>>,
}

struct Scheduled {
    time: f64,
    seq: u64,
    target: ComponentId,
    msg: Message,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Scheduler {
    now: f64,
    stop_time: f64,
    next_seq: u64,
    heap: BinaryHeap<Scheduled>,
    live: HashSet<u64>,
}

impl Scheduler {
    fn push(&mut self, target: ComponentId, time: f64, msg: Message) -> EventHandle {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.heap.push(Scheduled {
            time,
            seq,
            target,
            msg,
        });
        EventHandle(seq)
    }

    fn fire_time(&self, delay: f64) -> Result<f64, KernelError> {
        if delay.is_nan() || delay < 0.0 {
            return Err(KernelError::NegativeDelay(delay));
        }
        if delay < TIME_EPSILON {
            Ok(self.now)
        } else {
            Ok(self.now + delay)
        }
    }

    fn cancel(&mut self, h: EventHandle) -> bool {
        self.live.remove(&h.0)
    }

    /// Drops cancelled entries from the top of the heap.
    fn prune(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.live.contains(&top.seq) {
                break;
            }
            self.heap.pop();
        }
    }
}

struct Slot {
    name: String,
    stream: RngStreamId,
    component: Option<Box<dyn Component>>,
}

struct RngBank {
    seed: u64,
    streams: HashMap<RngStreamId, ChaCha8Rng>,
}

impl RngBank {
    fn stream(&mut self, id: RngStreamId) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams.entry(id).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id.0);
            rng
        })
    }
}

/// Handler-side view of the kernel, scoped to one component.
pub struct Ctx<'a> {
    id: ComponentId,
    name: &'a str,
    sched: &'a mut Scheduler,
    wires: &'a HashMap<(ComponentId, Port), (ComponentId, Port)>,
    rng: &'a mut ChaCha8Rng,
    trace: &'a mut TraceLog,
}

impl Ctx<'_> {
    pub fn now(&self) -> f64 {
        self.sched.now
    }

    pub fn id(&self) -> ComponentId {
        self.id
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn schedule(&mut self, delay: f64, msg: Message) -> Result<EventHandle, KernelError> {
        let t = self.sched.fire_time(delay)?;
        Ok(self.sched.push(self.id, t, msg))
    }

    /// Schedules at an absolute time, which must not precede now.
    pub fn schedule_at(&mut self, time: f64, msg: Message) -> Result<EventHandle, KernelError> {
        if time < self.sched.now {
            return Err(KernelError::NegativeDelay(time - self.sched.now));
        }
        Ok(self.sched.push(self.id, time, msg))
    }

    pub fn timer(&mut self, delay: f64, tag: u64) -> Result<EventHandle, KernelError> {
        self.schedule(delay, Message::Timer(tag))
    }

    pub fn cancel(&mut self, h: EventHandle) -> bool {
        self.sched.cancel(h)
    }

    pub fn is_wired(&self, port: Port) -> bool {
        self.wires.contains_key(&(self.id, port))
    }

    /// Hands `pdu` to whatever is wired to `port`, after `delay`.
    pub fn send_after(&mut self, port: Port, delay: f64, pdu: Pdu) -> HandlerResult {
        let &(peer, peer_port) =
            self.wires
                .get(&(self.id, port))
                .ok_or_else(|| KernelError::Unwired {
                    component: self.name.to_string(),
                    port,
                })?;
        let t = self.sched.fire_time(delay)?;
        self.sched.push(
            peer,
            t,
            Message::Deliver {
                port: peer_port,
                pdu,
            },
        );
        Ok(())
    }

    pub fn send(&mut self, port: Port, pdu: Pdu) -> HandlerResult {
        self.send_after(port, 0.0, pdu)
    }

    /// Uniform draw in [0, 1) from this component's private stream.
    pub fn rand(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn emit(&mut self, mut rec: TraceRecord) {
        rec.t = self.sched.now;
        rec.comp = self.name.to_string();
        self.trace.push(rec);
    }

    pub fn fault(&self, message: impl Into<String>) -> KernelError {
        KernelError::Fault {
            component: self.name.to_string(),
            message: message.into(),
        }
    }
}

pub struct Kernel {
    sched: Scheduler,
    slots: Vec<Slot>,
    names: HashMap<String, ComponentId>,
    wires: HashMap<(ComponentId, Port), (ComponentId, Port)>,
    rngs: RngBank,
    trace: TraceLog,
    dispatched: u64,
}

impl Kernel {
    pub fn new(seed: u64) -> Self {
        Kernel {
            sched: Scheduler {
                now: 0.0,
                stop_time: f64::INFINITY,
                next_seq: 0,
                heap: BinaryHeap::new(),
                live: HashSet::new(),
            },
            slots: Vec::new(),
            names: HashMap::new(),
            wires: HashMap::new(),
            rngs: RngBank {
                seed,
                streams: HashMap::new(),
            },
            trace: TraceLog::new(crate::trace::MAX_DEBUG_LEVEL),
            dispatched: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.rngs.seed
    }

    pub fn add_component(&mut self, name: &str, component: Box<dyn Component>) -> ComponentId {
        let id = ComponentId(self.slots.len() as u32);
        self.slots.push(Slot {
            name: name.to_string(),
            stream: RngStreamId::for_name(name),
            component: Some(component),
        });
        self.names.insert(name.to_string(), id);
        id
    }

    /// Wires two ports to each other in both directions.
    pub fn connect(
        &mut self,
        a: (ComponentId, Port),
        b: (ComponentId, Port),
    ) -> Result<(), KernelError> {
        for &(c, _) in [&a, &b] {
            if c.index() >= self.slots.len() {
                return Err(KernelError::UnknownTarget(c));
            }
        }
        for &(c, p) in [&a, &b] {
            if self.wires.contains_key(&(c, p)) {
                return Err(KernelError::AlreadyWired(self.slots[c.index()].name.clone(), p));
            }
        }
        self.wires.insert(a, b);
        self.wires.insert(b, a);
        Ok(())
    }

    pub fn peer(&self, id: ComponentId, port: Port) -> Option<(ComponentId, Port)> {
        self.wires.get(&(id, port)).copied()
    }

    /// Schedules a `Start` event for every component, in registration order.
    pub fn start(&mut self) {
        for i in 0..self.slots.len() {
            let now = self.sched.now;
            self.sched.push(ComponentId(i as u32), now, Message::Start);
        }
    }

    pub fn now(&self) -> f64 {
        self.sched.now
    }

    pub fn stop_time(&self) -> f64 {
        self.sched.stop_time
    }

    pub fn set_stop_time(&mut self, stop: f64) -> Result<(), KernelError> {
        if stop < self.sched.now {
            return Err(KernelError::StopBeforeNow {
                stop,
                now: self.sched.now,
            });
        }
        self.sched.stop_time = stop;
        Ok(())
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending(&self) -> usize {
        self.sched.live.len()
    }

    pub fn schedule(
        &mut self,
        target: ComponentId,
        delay: f64,
        msg: Message,
    ) -> Result<EventHandle, KernelError> {
        if target.index() >= self.slots.len() {
            return Err(KernelError::UnknownTarget(target));
        }
        let t = self.sched.fire_time(delay)?;
        Ok(self.sched.push(target, t, msg))
    }

    /// Marks a live event inert. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, h: EventHandle) -> bool {
        self.sched.cancel(h)
    }

    /// Fire time of the next live event, if any.
    pub fn peek_time(&mut self) -> Option<f64> {
        self.sched.prune();
        self.sched.heap.peek().map(|e| e.time)
    }

    /// Dispatches the earliest live event unless the heap is empty or the
    /// event lies beyond the stop time.
    pub fn step(&mut self) -> Result<Option<DispatchedEvent>, KernelError> {
        self.sched.prune();
        match self.sched.heap.peek() {
            None => return Ok(None),
            Some(top) if top.time > self.sched.stop_time => return Ok(None),
            Some(_) => {}
        }
        let ev = self.sched.heap.pop().expect("peeked");
        self.sched.live.remove(&ev.seq);
        self.sched.now = ev.time;
        self.dispatched += 1;
        let label = ev.msg.label();
        let idx = ev.target.index();
        let slot = self
            .slots
            .get_mut(idx)
            .ok_or(KernelError::UnknownTarget(ev.target))?;
        let mut comp = slot.component.take().expect("component re-entered");
        let stream = slot.stream;
        let result = {
            let mut ctx = Ctx {
                id: ev.target,
                name: &slot.name,
                sched: &mut self.sched,
                wires: &self.wires,
                rng: self.rngs.stream(stream),
                trace: &mut self.trace,
            };
            comp.handle(&mut ctx, ev.msg)
        };
        self.slots[idx].component = Some(comp);
        result.map_err(|e| match e {
            e @ KernelError::Fault { .. } => e,
            other => KernelError::Fault {
                component: self.slots[idx].name.clone(),
                message: other.to_string(),
            },
        })?;
        Ok(Some(DispatchedEvent {
            fire_time: ev.time,
            seq: ev.seq,
            target: ev.target,
            label,
        }))
    }

    pub fn run_until(&mut self, stop_time: f64) -> Result<RunSummary, KernelError> {
        self.set_stop_time(stop_time)?;
        let mut events = 0;
        while self.step()?.is_some() {
            events += 1;
        }
        Ok(RunSummary {
            events,
            clock: self.sched.now,
            counters: self.trace.counters().clone(),
        })
    }

    /// Uniform draw in [0, 1) from `stream`. Depends only on the master seed,
    /// the stream id and the number of earlier draws from that stream.
    pub fn rand_next(&mut self, stream: RngStreamId) -> f64 {
        self.rngs.stream(stream).gen::<f64>()
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceLog {
        &mut self.trace
    }

    /// Emits a record outside any handler, attributed to `comp`.
    pub fn emit(&mut self, comp: ComponentId, mut rec: TraceRecord) {
        rec.t = self.sched.now;
        rec.comp = self.name(comp).unwrap_or("kernel").to_string();
        self.trace.push(rec);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ComponentId> {
        (0..self.slots.len() as u32).map(ComponentId)
    }

    pub fn id_of(&self, name: &str) -> Option<ComponentId> {
        self.names.get(name).copied()
    }

    pub fn name(&self, id: ComponentId) -> Option<&str> {
        self.slots.get(id.index()).map(|s| s.name.as_str())
    }

    pub fn kind(&self, id: ComponentId) -> Option<&'static str> {
        self.slots
            .get(id.index())
            .and_then(|s| s.component.as_ref())
            .map(|c| c.kind())
    }

    pub fn component<T: Component>(&self, id: ComponentId) -> Option<&T> {
        self.slots
            .get(id.index())?
            .component
            .as_ref()?
            .as_any()
            .downcast_ref()
    }

    pub fn component_mut<T: Component>(&mut self, id: ComponentId) -> Option<&mut T> {
        self.slots
            .get_mut(id.index())?
            .component
            .as_mut()?
            .as_any_mut()
            .downcast_mut()
    }

    pub fn component_by_name<T: Component>(&self, name: &str) -> Option<&T> {
        self.component(self.id_of(name)?)
    }

    pub fn attach(&mut self, id: ComponentId, at: &Attachment<'_>) {
        if let Some(c) = self
            .slots
            .get_mut(id.index())
            .and_then(|s| s.component.as_mut())
        {
            c.attach(at);
        }
    }

    pub fn snapshot_of(&self, id: ComponentId) -> serde_json::Value {
        self.slots
            .get(id.index())
            .and_then(|s| s.component.as_ref())
            .map(|c| c.snapshot())
            .unwrap_or(serde_json::Value::Null)
    }

    /// Wired port pairs, each pair listed once, sorted.
    pub fn wiring(&self) -> Vec<((ComponentId, Port), (ComponentId, Port))> {
        let mut out: Vec<_> = self
            .wires
            .iter()
            .filter(|(a, b)| a < b)
            .map(|(a, b)| (*a, *b))
            .collect();
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Records every dispatch; optionally re-arms itself.
    struct Probe {
        seen: Vec<(f64, u64)>,
        period: Option<f64>,
    }

    impl Component for Probe {
        fn kind(&self) -> &'static str {
            "probe"
        }
        fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
            let tag = match msg {
                Message::Timer(t) => t,
                _ => u64::MAX,
            };
            self.seen.push((ctx.now(), tag));
            if let Some(p) = self.period {
                ctx.timer(p, tag)?;
            }
            Ok(())
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    struct Faulty;

    impl Component for Faulty {
        fn kind(&self) -> &'static str {
            "faulty"
        }
        fn handle(&mut self, ctx: &mut Ctx<'_>, _msg: Message) -> HandlerResult {
            Err(ctx.fault("boom"))
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn probe(k: &mut Kernel, name: &str, period: Option<f64>) -> ComponentId {
        k.add_component(
            name,
            Box::new(Probe {
                seen: Vec::new(),
                period,
            }),
        )
    }

    fn seen(k: &Kernel, id: ComponentId) -> Vec<(f64, u64)> {
        k.component::<Probe>(id).unwrap().seen.clone()
    }

    #[test]
    fn empty_heap_steps_to_nothing() {
        let mut k = Kernel::new(1);
        assert_eq!(k.step().unwrap(), None);
        assert_eq!(k.now(), 0.0);
        let s = k.run_until(5.0).unwrap();
        assert_eq!(s.events, 0);
        assert_eq!(s.clock, 0.0);
    }

    #[test]
    fn equal_times_dispatch_fifo() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", None);
        k.schedule(c, 5.0, Message::Timer(0)).unwrap();
        k.run_until(5.0).unwrap();
        assert_eq!(k.now(), 5.0);
        k.schedule(c, 0.0, Message::Timer(1)).unwrap();
        k.schedule(c, 0.0, Message::Timer(2)).unwrap();
        k.run_until(10.0).unwrap();
        assert_eq!(seen(&k, c), vec![(5.0, 0), (5.0, 1), (5.0, 2)]);
    }

    #[test]
    fn heap_orders_by_time() {
        let mut k = Kernel::new(1);
        let c1 = probe(&mut k, "c1", None);
        let c2 = probe(&mut k, "c2", None);
        k.schedule(c1, 2.0, Message::Timer(0)).unwrap();
        k.schedule(c2, 1.0, Message::Timer(0)).unwrap();
        let first = k.step().unwrap().unwrap();
        let second = k.step().unwrap().unwrap();
        assert_eq!((first.target, second.target), (c2, c1));
    }

    #[test]
    fn abc_example_dispatches_c_a_b() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", None);
        k.schedule(c, 1.0, Message::Timer(b'A' as u64)).unwrap();
        k.schedule(c, 1.0, Message::Timer(b'B' as u64)).unwrap();
        k.schedule(c, 0.5, Message::Timer(b'C' as u64)).unwrap();
        k.run_until(2.0).unwrap();
        let tags: Vec<u8> = seen(&k, c).iter().map(|&(_, t)| t as u8).collect();
        assert_eq!(tags, b"CAB");
    }

    #[test]
    fn stop_time_gates_dispatch() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", None);
        k.schedule(c, 3.0, Message::Timer(0)).unwrap();
        k.set_stop_time(2.0).unwrap();
        assert_eq!(k.step().unwrap(), None);
        assert_eq!(k.now(), 0.0);
    }

    #[test]
    fn periodic_timer_dispatches_eleven_times() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", Some(1.0));
        k.schedule(c, 0.0, Message::Timer(0)).unwrap();
        let s = k.run_until(10.0).unwrap();
        assert_eq!(s.events, 11);
        assert_eq!(s.clock, 10.0);
    }

    #[test]
    fn cancel_semantics() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", None);
        let h = k.schedule(c, 1.0, Message::Timer(7)).unwrap();
        let h2 = k.schedule(c, 2.0, Message::Timer(8)).unwrap();
        assert!(k.cancel(h));
        assert!(!k.cancel(h));
        k.run_until(5.0).unwrap();
        assert_eq!(seen(&k, c), vec![(2.0, 8)]);
        assert!(!k.cancel(h2));
    }

    #[test]
    fn scheduling_errors() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", None);
        assert!(matches!(
            k.schedule(ComponentId(9), 1.0, Message::Start),
            Err(KernelError::UnknownTarget(_))
        ));
        assert!(matches!(
            k.schedule(c, -1.0, Message::Start),
            Err(KernelError::NegativeDelay(_))
        ));
    }

    #[test]
    fn tiny_delay_collapses_to_now() {
        let mut k = Kernel::new(1);
        let c = probe(&mut k, "c", None);
        k.schedule(c, 1e-13, Message::Timer(0)).unwrap();
        k.run_until(1.0).unwrap();
        assert_eq!(seen(&k, c), vec![(0.0, 0)]);
    }

    #[test]
    fn handler_fault_names_component() {
        let mut k = Kernel::new(1);
        let f = k.add_component("bad", Box::new(Faulty));
        k.schedule(f, 0.0, Message::Start).unwrap();
        let err = k.step().unwrap_err();
        assert_eq!(
            err,
            KernelError::Fault {
                component: "bad".into(),
                message: "boom".into()
            }
        );
    }

    #[test]
    fn rng_streams() {
        let mut a = Kernel::new(42);
        let mut b = Kernel::new(42);
        let s1 = RngStreamId(1);
        let s2 = RngStreamId(2);
        let xa: Vec<f64> = (0..5).map(|_| a.rand_next(s1)).collect();
        let xb: Vec<f64> = (0..5).map(|_| b.rand_next(s1)).collect();
        assert_eq!(xa, xb);
        let ya: Vec<f64> = (0..5).map(|_| a.rand_next(s2)).collect();
        assert_ne!(xa, ya);
        assert!(xa.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn rng_mean_is_one_half() {
        let mut k = Kernel::new(7);
        let s = RngStreamId::for_name("x");
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| k.rand_next(s)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}

//! Generic Cell Rate Algorithm policing.

use std::any::Any;

use serde_json::json;
use thiserror::Error;

use crate::kernel::{Component, Ctx, HandlerResult, Message, Port, TIME_EPSILON};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

/// 53-byte cell.
pub const CELL_BITS: u64 = 53 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub seq: u64,
    /// Cell loss priority; set when a policer tags the cell.
    pub clp: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GcraError {
    #[error("arrival at {t} precedes previous arrival at {last}")]
    TimeRegression { t: f64, last: f64 },
    #[error("invalid parameters I={increment} L={limit}")]
    BadParams { increment: f64, limit: f64 },
}

/// Virtual-scheduling GCRA(I, L).
#[derive(Debug, Clone, PartialEq)]
pub struct Gcra {
    increment: f64,
    limit: f64,
    tat: Option<f64>,
    last: Option<f64>,
}

impl Gcra {
    pub fn new(increment: f64, limit: f64) -> Result<Self, GcraError> {
        if !(increment > 0.0 && limit >= 0.0) {
            return Err(GcraError::BadParams { increment, limit });
        }
        Ok(Gcra {
            increment,
            limit,
            tat: None,
            last: None,
        })
    }

    pub fn increment(&self) -> f64 {
        self.increment
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    /// Theoretical arrival time; unset until the first cell.
    pub fn tat(&self) -> Option<f64> {
        self.tat
    }

    /// Conformance verdict for a cell arriving at `t`. Nonconforming cells
    /// leave the state untouched.
    pub fn arrival(&mut self, t: f64) -> Result<bool, GcraError> {
        if let Some(last) = self.last {
            if t < last {
                return Err(GcraError::TimeRegression { t, last });
            }
        }
        self.last = Some(t);
        let tat = self.tat.unwrap_or(t);
        if t < tat - self.limit - TIME_EPSILON {
            return Ok(false);
        }
        self.tat = Some(tat.max(t) + self.increment);
        Ok(true)
    }
}

/// Longest run of conforming cells spaced `delta < I` apart from a fresh
/// state.
pub fn burst_tolerance(increment: f64, limit: f64, delta: f64) -> u64 {
    1 + (limit / (increment - delta) + TIME_EPSILON).floor() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellPattern {
    /// One cell every `interval`.
    Periodic { interval: f64 },
    /// `size` cells spaced `spacing` apart, repeated every `period`.
    Burst { size: u64, spacing: f64, period: f64 },
    Poisson { rate: f64 },
    /// Cells every `interval` for `on` seconds, then silent for `off`.
    OnOff { interval: f64, on: f64, off: f64 },
}

/// Cell generator.
pub struct CellSource {
    pattern: CellPattern,
    start: f64,
    count: Option<u64>,
    sent: u64,
}

impl CellSource {
    pub fn new(pattern: CellPattern, start: f64, count: Option<u64>) -> Self {
        CellSource {
            pattern,
            start,
            count,
            sent: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let pattern = match spec.str("pattern", "periodic") {
            "periodic" => CellPattern::Periodic {
                interval: spec.positive("interval", 1e-3)?,
            },
            "burst" => CellPattern::Burst {
                size: spec.u64("burst", 5)?,
                spacing: spec.non_negative("spacing", 1e-4)?,
                period: spec.positive("period", 1e-2)?,
            },
            "poisson" => CellPattern::Poisson {
                rate: spec.positive("rate", 1000.0)?,
            },
            "onoff" => CellPattern::OnOff {
                interval: spec.positive("interval", 1e-3)?,
                on: spec.positive("on", 0.05)?,
                off: spec.positive("off", 0.05)?,
            },
            other => return Err(spec.bad("pattern", other)),
        };
        Ok(CellSource::new(
            pattern,
            spec.non_negative("start", 0.0)?,
            spec.opt_u64("count")?,
        ))
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    /// Gap from cell number `n` (0-based) to cell `n + 1`.
    fn gap(&self, n: u64, ctx: &mut Ctx<'_>) -> f64 {
        match self.pattern {
            CellPattern::Periodic { interval } => interval,
            CellPattern::Burst {
                size,
                spacing,
                period,
            } => {
                let size = size.max(1);
                if (n + 1) % size == 0 {
                    period - spacing * (size - 1) as f64
                } else {
                    spacing
                }
            }
            CellPattern::Poisson { rate } => -(1.0 - ctx.rand()).ln() / rate,
            CellPattern::OnOff { interval, on, off } => {
                let per_on = ((on / interval).floor() as u64).max(1);
                if (n + 1) % per_on == 0 {
                    interval + off
                } else {
                    interval
                }
            }
        }
    }
}

impl Component for CellSource {
    fn kind(&self) -> &'static str {
        "cellsrc"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => {
                ctx.schedule_at(self.start.max(ctx.now()), Message::Timer(0))?;
                Ok(())
            }
            Message::Timer(_) => {
                if self.count.is_some_and(|c| self.sent >= c) {
                    return Ok(());
                }
                let cell = Cell {
                    seq: self.sent,
                    clp: false,
                };
                ctx.emit(TraceRecord::new(2, "cell_out").with("seq", self.sent));
                ctx.send(Port::Net(0), Pdu::new(Body::Cell(cell), CELL_BITS, Color::Data))?;
                let gap = self.gap(self.sent, ctx);
                self.sent += 1;
                ctx.timer(gap.max(0.0), 0)?;
                Ok(())
            }
            Message::Deliver { .. } => Ok(()),
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({"kind": "cellsrc", "sent": self.sent})
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoliceAction {
    Drop,
    Tag,
}

/// Decides what happens to one cell.
pub fn police(mut cell: Cell, conforming: bool, action: PoliceAction) -> Option<Cell> {
    match (conforming, action) {
        (true, _) => Some(cell),
        (false, PoliceAction::Drop) => None,
        (false, PoliceAction::Tag) => {
            cell.clp = true;
            Some(cell)
        }
    }
}

/// Ingress policer: cells arrive on port 0 and leave on port 1.
pub struct Policer {
    gcra: Gcra,
    action: PoliceAction,
    conform: u64,
    nonconform: u64,
}

impl Policer {
    pub fn new(gcra: Gcra, action: PoliceAction) -> Self {
        Policer {
            gcra,
            action,
            conform: 0,
            nonconform: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let i = spec.positive("I", 1e-3)?;
        let l = spec.non_negative("L", 0.0)?;
        let action = match spec.str("action", "drop") {
            "drop" => PoliceAction::Drop,
            "tag" => PoliceAction::Tag,
            other => return Err(spec.bad("action", other)),
        };
        let gcra = Gcra::new(i, l).map_err(|e| BuildError::Invalid {
            component: spec.name.to_string(),
            message: e.to_string(),
        })?;
        Ok(Policer::new(gcra, action))
    }

    pub fn gcra(&self) -> &Gcra {
        &self.gcra
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.conform, self.nonconform)
    }
}

impl Component for Policer {
    fn kind(&self) -> &'static str {
        "policer"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver {
                port: Port::Net(0),
                pdu,
            } => {
                let Body::Cell(cell) = pdu.body else {
                    return Err(ctx.fault(format!("policer cannot consume {}", pdu.body.label())));
                };
                if pdu.corrupted {
                    ctx.emit(TraceRecord::new(0, "drop").with("reason", "corrupted").with("seq", cell.seq));
                    return Ok(());
                }
                let ok = self.gcra.arrival(ctx.now()).map_err(|e| ctx.fault(e.to_string()))?;
                if ok {
                    self.conform += 1;
                } else {
                    self.nonconform += 1;
                }
                ctx.emit(
                    TraceRecord::new(1, "verdict")
                        .with("seq", cell.seq)
                        .with("conform", ok as u8)
                        .with("tat", self.gcra.tat().unwrap_or(0.0)),
                );
                let seq = cell.seq;
                match police(cell, ok, self.action) {
                    Some(c) => {
                        let color = if c.clp { Color::Control } else { Color::Data };
                        ctx.send(Port::Net(1), Pdu::new(Body::Cell(c), CELL_BITS, color))
                    }
                    None => {
                        ctx.emit(TraceRecord::new(0, "drop").with("reason", "nonconforming").with("seq", seq));
                        Ok(())
                    }
                }
            }
            Message::Deliver { .. } => Ok(()),
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "policer",
            "I": self.gcra.increment(),
            "L": self.gcra.limit(),
            "tat": self.gcra.tat(),
            "conform": self.conform,
            "nonconform": self.nonconform,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Default)]
pub struct CellSink {
    received: u64,
    tagged: u64,
}

impl CellSink {
    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn tagged(&self) -> u64 {
        self.tagged
    }
}

impl Component for CellSink {
    fn kind(&self) -> &'static str {
        "cellsink"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver { pdu, .. } => {
                if let Body::Cell(c) = pdu.body {
                    self.received += 1;
                    self.tagged += c.clp as u64;
                    ctx.emit(TraceRecord::new(2, "cell_in").with("seq", c.seq).with("clp", c.clp as u8));
                }
                Ok(())
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({"kind": "cellsink", "received": self.received, "tagged": self.tagged})
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

    /// Continuous-state leaky bucket: content drains at rate 1, each
    /// conforming cell adds I, capacity L + I.
    struct Bucket {
        i: f64,
        l: f64,
        x: f64,
        lct: Option<f64>,
    }

    impl Bucket {
        fn arrive(&mut self, t: f64) -> bool {
            let x = match self.lct {
                None => 0.0,
                Some(lct) => (self.x - (t - lct)).max(0.0),
            };
            if x > self.l {
                return false;
            }
            self.x = x + self.i;
            self.lct = Some(t);
            true
        }
    }

    #[test]
    fn first_cell_conforms() {
        let mut g = Gcra::new(10.0, 5.0).unwrap();
        assert!(g.arrival(0.0).unwrap());
        assert_eq!(g.tat(), Some(10.0));
    }

    #[test]
    fn worked_example() {
        let mut g = Gcra::new(10.0, 5.0).unwrap();
        let v: Vec<bool> = [0.0, 5.0, 10.0].iter().map(|&t| g.arrival(t).unwrap()).collect();
        assert_eq!(v, vec![true, true, false]);
        let mut b = Bucket {
            i: 10.0,
            l: 5.0,
            x: 0.0,
            lct: None,
        };
        let o: Vec<bool> = [0.0, 5.0, 10.0].iter().map(|&t| b.arrive(t)).collect();
        assert_eq!(v, o);
    }

    #[test]
    fn exact_spacing_always_conforms() {
        let mut g = Gcra::new(0.25, 0.0).unwrap();
        for k in 0..10_000 {
            assert!(g.arrival(k as f64 * 0.25).unwrap());
        }
    }

    #[test]
    fn time_regression_is_an_error() {
        let mut g = Gcra::new(1.0, 0.0).unwrap();
        g.arrival(2.0).unwrap();
        assert!(matches!(g.arrival(1.0), Err(GcraError::TimeRegression { .. })));
        assert!(Gcra::new(0.0, 1.0).is_err());
    }

    #[test]
    fn policing_actions() {
        let c = Cell { seq: 1, clp: false };
        assert_eq!(police(c.clone(), true, PoliceAction::Drop), Some(c.clone()));
        assert_eq!(police(c.clone(), false, PoliceAction::Drop), None);
        assert_eq!(police(c, false, PoliceAction::Tag), Some(Cell { seq: 1, clp: true }));
    }

    #[test]
    fn burst_formula_matches_simulation() {
        for (i, l, d) in [(10.0, 5.0, 1.0), (4.0, 12.0, 1.0), (1.0, 0.0, 0.5), (8.0, 16.0, 0.0)] {
            let mut g = Gcra::new(i, l).unwrap();
            let mut n = 0;
            while g.arrival(n as f64 * d).unwrap() {
                n += 1;
            }
            assert_eq!(n, burst_tolerance(i, l, d), "I={i} L={l} d={d}");
        }
    }
}

//! Pass-through layers and simple forwarding elements.

use std::any::Any;

use serde_json::json;

use crate::kernel::{Component, Ctx, HandlerResult, Message, Port};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

/// Physical layer: relays between the layer above and the attached link.
#[derive(Default)]
pub struct Physical {
    up: u64,
    down: u64,
}

impl Component for Physical {
    fn kind(&self) -> &'static str {
        "physical"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver { port: Port::Up, pdu } => {
                self.down += 1;
                ctx.send(Port::Net(0), pdu)
            }
            Message::Deliver { pdu, .. } => {
                self.up += 1;
                ctx.send(Port::Up, pdu)
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({"kind": "physical", "up": self.up, "down": self.down})
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Framing-only data link: discards corrupted frames, relays the rest.
#[derive(Default)]
pub struct Datalink {
    discarded: u64,
}

impl Component for Datalink {
    fn kind(&self) -> &'static str {
        "datalink"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver { port: Port::Up, pdu } => ctx.send(Port::Net(0), pdu),
            Message::Deliver { pdu, .. } => {
                if pdu.corrupted {
                    self.discarded += 1;
                    ctx.emit(
                        TraceRecord::new(0, "drop")
                            .with("reason", "corrupted")
                            .with("pdu", pdu.body.label())
                            .with("color", pdu.color),
                    );
                    return Ok(());
                }
                ctx.send(Port::Up, pdu)
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({"kind": "datalink", "discarded": self.discarded})
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// LAN segment: repeats every frame to all other attached ports.
#[derive(Default)]
pub struct Hub {
    ports: Vec<Port>,
}

impl Component for Hub {
    fn kind(&self) -> &'static str {
        "lan"
    }

    fn attach(&mut self, at: &crate::kernel::Attachment<'_>) {
        if let Some(p) = at.port {
            self.ports.push(p);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver { port, pdu } => {
                ctx.emit(
                    TraceRecord::new(3, "repeat")
                        .with("in", port)
                        .with("pdu", pdu.body.label()),
                );
                for &p in &self.ports {
                    if p != port {
                        ctx.send(p, pdu.clone())?;
                    }
                }
                Ok(())
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({"kind": "lan", "ports": self.ports.len()})
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Two-port network cloud between end systems. Drops packets entering on
/// port 0 at random (`loss`) or by ordinal (`drop=3,17`, 1-based).
pub struct Cloud {
    loss: f64,
    script: Vec<u64>,
    forwarded: [u64; 2],
    arrivals: u64,
}

impl Cloud {
    pub fn new(loss: f64, script: Vec<u64>) -> Self {
        Cloud {
            loss,
            script,
            forwarded: [0; 2],
            arrivals: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        let loss = spec.probability("loss", 0.0)?;
        let script = spec.list_u64("drop")?;
        Ok(Cloud::new(loss, script))
    }
}

impl Component for Cloud {
    fn kind(&self) -> &'static str {
        "cloud"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Deliver {
                port: Port::Net(dir @ (0 | 1)),
                pdu,
            } => {
                if dir == 0 {
                    self.arrivals += 1;
                    let scripted = self.script.contains(&self.arrivals);
                    let random = self.loss > 0.0 && ctx.rand() < self.loss;
                    if scripted || random {
                        ctx.emit(
                            TraceRecord::new(0, "drop")
                                .with("reason", if scripted { "script" } else { "loss" })
                                .with("ordinal", self.arrivals)
                                .with("pdu", pdu.body.label())
                                .with("color", pdu.color),
                        );
                        return Ok(());
                    }
                }
                self.forwarded[dir as usize] += 1;
                ctx.send(Port::Net(1 - dir), pdu)
            }
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({"kind": "cloud", "forwarded": self.forwarded, "arrivals": self.arrivals})
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Test sink recording every delivered PDU with its arrival time.
#[cfg(test)]
#[derive(Default)]
pub struct Recorder {
    pub got: Vec<(f64, crate::netbase::Pdu)>,
}

#[cfg(test)]
impl Component for Recorder {
    fn kind(&self) -> &'static str {
        "recorder"
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        if let Message::Deliver { pdu, .. } = msg {
            self.got.push((ctx.now(), pdu));
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

use std::fmt;

use serde::Serialize;

use crate::labs::arq::ArqFrame;
use crate::labs::bridge::EtherFrame;
use crate::labs::csma::BusSignal;
use crate::labs::gcra::Cell;
use crate::labs::ipfrag::Datagram;
use crate::labs::pnni::PnniPacket;
use crate::labs::tcp::Segment;
use crate::labs::token_ring::RingPdu;

/// Display class of a PDU, used for trace coloring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Data,
    Ack,
    Corrupted,
    Retransmitted,
    Control,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Data => "data",
            Color::Ack => "ack",
            Color::Corrupted => "corrupted",
            Color::Retransmitted => "retransmitted",
            Color::Control => "control",
        })
    }
}

/// Flow-control signals from a layer to the one above it.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowSignal {
    /// The SDU was not accepted and is handed back.
    Refused(Vec<u8>),
    /// Space is available again for this many SDUs.
    Ready(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Bytes(Vec<u8>),
    Flow(FlowSignal),
    Arq(ArqFrame),
    Bus(BusSignal),
    Ring(RingPdu),
    Ether(EtherFrame),
    Ip(Datagram),
    Tcp(Segment),
    Cell(Cell),
    Pnni(PnniPacket),
}

impl Body {
    /// Short, whitespace-free description for trace records.
    pub fn label(&self) -> String {
        match self {
            Body::Bytes(b) => format!("sdu:{}", b.len()),
            Body::Flow(FlowSignal::Refused(_)) => "refused".into(),
            Body::Flow(FlowSignal::Ready(n)) => format!("ready:{n}"),
            Body::Arq(ArqFrame::Data { seq, .. }) => format!("D{seq}"),
            Body::Arq(ArqFrame::Ack { ackno }) => format!("A{ackno}"),
            Body::Bus(s) => s.label(),
            Body::Ring(r) => r.label(),
            Body::Ether(e) => e.label(),
            Body::Ip(d) => format!("ip:{}@{}", d.id, d.offset),
            Body::Tcp(s) if s.data.is_empty() => format!("ack:{}", s.ack),
            Body::Tcp(s) => format!("seq:{}", s.seq),
            Body::Cell(c) => format!("cell:{}", c.seq),
            Body::Pnni(p) => p.label(),
        }
    }
}

/// Protocol data unit carried by a `Deliver` event.
#[derive(Debug, Clone, PartialEq)]
pub struct Pdu {
    pub size_bits: u64,
    /// Set by links on a bit error; receivers check it in place of a checksum.
    pub corrupted: bool,
    pub color: Color,
    pub body: Body,
}

impl Pdu {
    pub fn new(body: Body, size_bits: u64, color: Color) -> Self {
        Pdu {
            size_bits: size_bits.max(1),
            corrupted: false,
            color,
            body,
        }
    }

    /// Zero-cost interlayer handoff of an SDU.
    pub fn sdu(bytes: Vec<u8>) -> Self {
        let bits = bytes.len() as u64 * 8;
        Pdu::new(Body::Bytes(bytes), bits, Color::Data)
    }

    pub fn flow(signal: FlowSignal) -> Self {
        Pdu::new(Body::Flow(signal), 1, Color::Control)
    }
}

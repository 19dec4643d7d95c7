//! IP fragmentation and reassembly.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};

use serde_json::json;
use thiserror::Error;

use crate::kernel::{Attachment, Component, Ctx, HandlerResult, Message, Port};
use crate::netbase::{Body, Color, Pdu};
use crate::registry::{BuildError, Spec};
use crate::trace::TraceRecord;

pub const HEADER_BYTES: usize = 20;
pub const MAX_DATAGRAM: usize = 65535;
pub const DEFAULT_MTU: usize = 1500;

#[derive(Debug, Clone, PartialEq)]
pub struct Datagram {
    pub id: u16,
    pub src: String,
    pub dst: String,
    /// Header plus payload, bytes.
    pub total_len: usize,
    /// Payload offset in 8-byte units.
    pub offset: u16,
    pub more_fragments: bool,
    pub payload: Vec<u8>,
    /// Time the original datagram was sent; copied into every fragment.
    pub born: f64,
}

impl Datagram {
    pub fn new(id: u16, src: &str, dst: &str, payload: Vec<u8>, born: f64) -> Self {
        Datagram {
            id,
            src: src.to_string(),
            dst: dst.to_string(),
            total_len: HEADER_BYTES + payload.len(),
            offset: 0,
            more_fragments: false,
            payload,
            born,
        }
    }

    pub fn byte_offset(&self) -> usize {
        self.offset as usize * 8
    }

    pub fn is_fragment(&self) -> bool {
        self.offset != 0 || self.more_fragments
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FragError {
    #[error("mtu {0} leaves no room for an 8-byte fragment")]
    MtuTooSmall(usize),
    #[error("datagram of {0} bytes exceeds the IP maximum")]
    TooLarge(usize),
}

/// Payload bytes carried by every non-final fragment at this MTU.
pub fn fragment_payload(mtu: usize) -> usize {
    (mtu.saturating_sub(HEADER_BYTES)) / 8 * 8
}

/// Splits `d` so that every piece fits in `mtu`. Works on fragments too:
/// offsets compose with the incoming offset.
pub fn fragment(d: &Datagram, mtu: usize) -> Result<Vec<Datagram>, FragError> {
    if mtu < HEADER_BYTES + 8 {
        return Err(FragError::MtuTooSmall(mtu));
    }
    if d.byte_offset() + d.payload.len() > MAX_DATAGRAM - HEADER_BYTES {
        return Err(FragError::TooLarge(d.byte_offset() + d.payload.len()));
    }
    if d.total_len <= mtu {
        return Ok(vec![d.clone()]);
    }
    let per = fragment_payload(mtu);
    let chunks: Vec<&[u8]> = d.payload.chunks(per).collect();
    let n = chunks.len();
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| Datagram {
            id: d.id,
            src: d.src.clone(),
            dst: d.dst.clone(),
            total_len: HEADER_BYTES + c.len(),
            offset: d.offset + (i * per / 8) as u16,
            more_fragments: i + 1 < n || d.more_fragments,
            payload: c.to_vec(),
            born: d.born,
        })
        .collect())
}

pub type ReassemblyKey = (String, String, u16);

#[derive(Debug, Clone)]
struct Buffer {
    pieces: BTreeMap<usize, Vec<u8>>,
    total: Option<usize>,
    deadline: f64,
    fragments: u64,
}

impl Buffer {
    fn covered(&self) -> bool {
        let Some(total) = self.total else {
            return false;
        };
        let mut end = 0;
        for (&off, data) in &self.pieces {
            if off > end {
                return false;
            }
            end = end.max(off + data.len());
        }
        end >= total
    }

    fn assemble(&self) -> Vec<u8> {
        let total = self.total.unwrap_or(0);
        let mut out = vec![0u8; total];
        for (&off, data) in &self.pieces {
            let end = (off + data.len()).min(total);
            out[off..end].copy_from_slice(&data[..end - off]);
        }
        out
    }
}

/// Reassembly buffers keyed by (src, dst, id).
#[derive(Debug, Clone, Default)]
pub struct Reassembler {
    buffers: HashMap<ReassemblyKey, Buffer>,
    /// Recently completed datagrams, so late duplicates are ignored.
    done: HashMap<ReassemblyKey, f64>,
    timeout: f64,
}

/// A reassembled datagram plus how many fragments made it up.
#[derive(Debug, Clone, PartialEq)]
pub struct Reassembled {
    pub datagram: Datagram,
    pub fragments: u64,
}

impl Reassembler {
    pub fn new(timeout: f64) -> Self {
        Reassembler {
            buffers: HashMap::new(),
            done: HashMap::new(),
            timeout,
        }
    }

    pub fn pending(&self) -> usize {
        self.buffers.len()
    }

    /// Records a fragment arriving at `now`. Returns the datagram once the
    /// received ranges cover it. Duplicates and overlaps are harmless.
    pub fn accept(&mut self, frag: Datagram, now: f64) -> Option<Reassembled> {
        if !frag.is_fragment() {
            return Some(Reassembled {
                datagram: frag,
                fragments: 1,
            });
        }
        let key = (frag.src.clone(), frag.dst.clone(), frag.id);
        if self.done.get(&key).is_some_and(|&until| until > now) {
            return None;
        }
        let buf = self.buffers.entry(key.clone()).or_insert_with(|| Buffer {
            pieces: BTreeMap::new(),
            total: None,
            deadline: now + self.timeout,
            fragments: 0,
        });
        buf.fragments += 1;
        let off = frag.byte_offset();
        if !frag.more_fragments {
            buf.total = Some(off + frag.payload.len());
        }
        let keep = buf.pieces.get(&off).is_none_or(|p| p.len() < frag.payload.len());
        if keep {
            buf.pieces.insert(off, frag.payload.clone());
        }
        if !buf.covered() {
            return None;
        }
        let buf = self.buffers.remove(&key)?;
        self.done.insert(key, now + self.timeout);
        let payload = buf.assemble();
        Some(Reassembled {
            datagram: Datagram {
                id: frag.id,
                src: frag.src,
                dst: frag.dst,
                total_len: HEADER_BYTES + payload.len(),
                offset: 0,
                more_fragments: false,
                payload,
                born: frag.born,
            },
            fragments: buf.fragments,
        })
    }

    pub fn deadline(&self, key: &ReassemblyKey) -> Option<f64> {
        self.buffers.get(key).map(|b| b.deadline)
    }

    /// Discards every buffer whose timer has run out.
    pub fn expire(&mut self, now: f64) -> Vec<ReassemblyKey> {
        let mut gone: Vec<ReassemblyKey> = self
            .buffers
            .iter()
            .filter(|(_, b)| b.deadline <= now)
            .map(|(k, _)| k.clone())
            .collect();
        gone.sort();
        self.done.retain(|_, until| *until > now);
        for k in &gone {
            self.buffers.remove(k);
        }
        gone
    }
}

/// IP end system or router. Hosts take SDUs from above and address them to
/// `dst`; anything not addressed to this node is forwarded out the other
/// port, fragmented to that port's MTU.
pub struct IpNode {
    addr: String,
    dst: Option<String>,
    mtu: BTreeMap<u16, usize>,
    next_id: u16,
    reasm: Reassembler,
    sent: u64,
    delivered: u64,
    lost: u64,
    forwarded: u64,
}

impl IpNode {
    pub fn new(addr: &str, dst: Option<&str>, timeout: f64) -> Self {
        IpNode {
            addr: addr.to_string(),
            dst: dst.map(str::to_string),
            mtu: BTreeMap::new(),
            next_id: 0,
            reasm: Reassembler::new(timeout),
            sent: 0,
            delivered: 0,
            lost: 0,
            forwarded: 0,
        }
    }

    pub fn from_spec(spec: &Spec<'_>) -> Result<Self, BuildError> {
        Ok(IpNode::new(
            spec.str("addr", spec.node),
            spec.opt_str("dst"),
            spec.positive("reasm_timeout", 15.0)?,
        ))
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn mtu_of(&self, port: u16) -> usize {
        self.mtu.get(&port).copied().unwrap_or(DEFAULT_MTU)
    }

    fn out_port(&self, inp: u16) -> u16 {
        let n = self.mtu.len().max(1) as u16;
        if n <= 1 {
            0
        } else {
            (inp + 1) % n
        }
    }

    fn emit_frags(&mut self, ctx: &mut Ctx<'_>, d: &Datagram, port: u16) -> Result<usize, FragError> {
        let frags = fragment(d, self.mtu_of(port))?;
        let n = frags.len();
        for f in frags {
            let bits = f.total_len as u64 * 8;
            let _ = ctx.send(Port::Net(port), Pdu::new(Body::Ip(f), bits, Color::Data));
        }
        Ok(n)
    }

    fn from_above(&mut self, ctx: &mut Ctx<'_>, data: Vec<u8>) -> HandlerResult {
        let Some(dst) = self.dst.clone() else {
            return Err(ctx.fault("no dst configured for outgoing datagrams"));
        };
        let d = Datagram::new(self.next_id, &self.addr, &dst, data, ctx.now());
        self.next_id = self.next_id.wrapping_add(1);
        match self.emit_frags(ctx, &d, 0) {
            Ok(n) => {
                self.sent += 1;
                ctx.emit(
                    TraceRecord::new(1, "dgram_sent")
                        .with("id", d.id)
                        .with("len", d.total_len)
                        .with("frags", n),
                );
            }
            Err(e) => ctx.emit(
                TraceRecord::new(0, "drop")
                    .with("reason", "mtu")
                    .with("id", d.id)
                    .with("error", e),
            ),
        }
        Ok(())
    }

    fn from_below(&mut self, ctx: &mut Ctx<'_>, port: u16, pdu: Pdu) -> HandlerResult {
        let Body::Ip(frag) = pdu.body else {
            return Err(ctx.fault(format!("ip cannot consume {}", pdu.body.label())));
        };
        if pdu.corrupted {
            ctx.emit(
                TraceRecord::new(0, "drop")
                    .with("reason", "corrupted")
                    .with("id", frag.id)
                    .with("offset", frag.offset)
                    .with("color", Color::Corrupted),
            );
            return Ok(());
        }
        if frag.dst != self.addr {
            let out = self.out_port(port);
            self.forwarded += 1;
            let id = frag.id;
            if let Err(e) = self.emit_frags(ctx, &frag, out) {
                ctx.emit(
                    TraceRecord::new(0, "drop")
                        .with("reason", "mtu")
                        .with("id", id)
                        .with("error", e),
                );
            }
            return Ok(());
        }
        ctx.emit(
            TraceRecord::new(2, "frag_in")
                .with("id", frag.id)
                .with("offset", frag.offset)
                .with("len", frag.payload.len())
                .with("mf", frag.more_fragments as u8),
        );
        let key = (frag.src.clone(), frag.dst.clone(), frag.id);
        let fresh = self.reasm.deadline(&key).is_none();
        match self.reasm.accept(frag, ctx.now()) {
            Some(r) => {
                self.delivered += 1;
                ctx.emit(
                    TraceRecord::new(1, "dgram_done")
                        .with("src", &r.datagram.src)
                        .with("id", r.datagram.id)
                        .with("frags", r.fragments)
                        .with("latency", ctx.now() - r.datagram.born),
                );
                if ctx.is_wired(Port::Up) {
                    ctx.send(Port::Up, Pdu::sdu(r.datagram.payload))?;
                }
            }
            None if fresh => {
                if let Some(deadline) = self.reasm.deadline(&key) {
                    ctx.schedule_at(deadline, Message::Timer(0))?;
                }
            }
            None => {}
        }
        Ok(())
    }
}

impl Component for IpNode {
    fn kind(&self) -> &'static str {
        "ip"
    }

    fn attach(&mut self, at: &Attachment<'_>) {
        if let Some(Port::Net(p)) = at.port {
            let mtu = at
                .link
                .params
                .get("mtu")
                .and_then(|v| v.parse().ok())
                .unwrap_or(DEFAULT_MTU);
            self.mtu.insert(p, mtu);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Message) -> HandlerResult {
        match msg {
            Message::Start => Ok(()),
            Message::Timer(_) => {
                for (src, _, id) in self.reasm.expire(ctx.now()) {
                    self.lost += 1;
                    ctx.emit(TraceRecord::new(0, "dgram_lost").with("src", src).with("id", id));
                }
                Ok(())
            }
            Message::Deliver { port: Port::Up, pdu } => match pdu.body {
                Body::Bytes(data) => self.from_above(ctx, data),
                other => Err(ctx.fault(format!("ip cannot send {}", other.label()))),
            },
            Message::Deliver {
                port: Port::Net(p),
                pdu,
            } => self.from_below(ctx, p, pdu),
            other => Err(ctx.fault(format!("unexpected {}", other.label()))),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "kind": "ip",
            "addr": self.addr,
            "mtu": self.mtu.values().collect::<Vec<_>>(),
            "sent": self.sent,
            "delivered": self.delivered,
            "lost": self.lost,
            "forwarded": self.forwarded,
            "reassembling": self.reasm.pending(),
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

    fn dgram(len: usize) -> Datagram {
        Datagram::new(7, "a", "b", (0..len).map(|i| (i % 251) as u8).collect(), 0.0)
    }

    #[test]
    fn four_thousand_bytes_over_1500() {
        let frags = fragment(&dgram(4000), 1500).unwrap();
        let lens: Vec<usize> = frags.iter().map(|f| f.payload.len()).collect();
        let offs: Vec<u16> = frags.iter().map(|f| f.offset).collect();
        let mf: Vec<bool> = frags.iter().map(|f| f.more_fragments).collect();
        assert_eq!(lens, vec![1480, 1480, 1040]);
        assert_eq!(offs, vec![0, 185, 370]);
        assert_eq!(mf, vec![true, true, false]);
        assert_eq!(frags[2].total_len, 1060);
    }

    #[test]
    fn small_datagram_is_unchanged() {
        let mut d = dgram(100);
        d.more_fragments = true;
        assert_eq!(fragment(&d, 576).unwrap(), vec![d]);
    }

    #[test]
    fn tiny_mtu_is_rejected() {
        assert_eq!(fragment(&dgram(100), 27), Err(FragError::MtuTooSmall(27)));
    }

    #[test]
    fn refragmenting_composes_offsets() {
        let d = dgram(4000);
        let two: Vec<(usize, usize)> = fragment(&d, 1500)
            .unwrap()
            .iter()
            .flat_map(|f| fragment(f, 576).unwrap())
            .map(|f| (f.byte_offset(), f.payload.len()))
            .collect();
        // byte ranges must tile [0, 4000) without gaps
        let mut end = 0;
        for &(off, len) in &two {
            assert_eq!(off, end);
            end = off + len;
        }
        assert_eq!(end, 4000);
    }

    #[test]
    fn reverse_order_and_duplicates() {
        let d = dgram(3000);
        let mut frags = fragment(&d, 576).unwrap();
        frags.reverse();
        let mut r = Reassembler::new(15.0);
        let mut out = None;
        for f in frags.iter().chain(frags.iter().take(2)) {
            if let Some(x) = r.accept(f.clone(), 0.0) {
                assert!(out.is_none());
                out = Some(x);
            }
        }
        assert_eq!(out.unwrap().datagram, d);
        assert_eq!(r.pending(), 0);
    }

    #[test]
    fn lost_fragment_expires() {
        let frags = fragment(&dgram(3000), 1500).unwrap();
        let mut r = Reassembler::new(15.0);
        assert!(r.accept(frags[0].clone(), 1.0).is_none());
        assert!(r.expire(15.9).is_empty());
        assert_eq!(r.expire(16.0).len(), 1);
        assert_eq!(r.pending(), 0);
    }
}

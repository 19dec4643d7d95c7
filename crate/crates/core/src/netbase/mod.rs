//! Shared substrate under every lab: PDUs, links, traffic sources and
//! pass-through layers.

pub mod app;
pub mod layers;
pub mod link;
mod pdu;

pub use app::App;
pub use link::{Link, LinkMode, LinkParams};
pub use pdu::{Body, Color, FlowSignal, Pdu};

//! Reference implementations of the laboratory protocols.

pub mod arq;
pub mod bridge;
pub mod csma;
pub mod gcra;
pub mod ipfrag;
pub mod pnni;
pub mod tcp;
pub mod token_ring;

//! Deterministic discrete-event network simulator.
//!
//! A [`kernel::Kernel`] owns an event heap and a set of components wired
//! port to port. Topologies come from a small line-oriented config format
//! ([`config`]) and are turned into kernels by [`registry::Registry`].
//! The protocol labs live under [`labs`]; batch runs and plot output are in
//! [`harness`], live steering in [`control`].

pub mod config;
pub mod control;
pub mod harness;
pub mod kernel;
pub mod labs;
pub mod netbase;
pub mod registry;
pub mod trace;

pub use config::{parse, Topology};
pub use kernel::{Component, ComponentId, Ctx, Kernel, KernelError, Message, Port};
pub use registry::{build, Registry};
pub use trace::{TraceLog, TraceRecord};

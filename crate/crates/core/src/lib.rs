//! Line-rate flow classification with batched accelerator inference.
//!
//! Packets are grouped into flows by a bucketed flow table. Once a flow has
//! `K` packets its signed lengths form a series, which is queued on a ring,
//! filtered through a prefix cache, batched and sent to an accelerator model.
//! Returned labels are written back to the table and used to tag later
//! packets of the flow.

pub mod accelerator;
pub mod batching;
pub mod benchmark;
pub mod cache;
pub mod flowtable;
pub mod model;
pub mod prefixlab;
pub mod ring;
pub mod scenario;
pub mod sim;
pub mod traffic;

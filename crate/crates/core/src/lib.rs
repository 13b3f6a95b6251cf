//! Shared data loading for collocated training processes.
//!
//! One producer prepares every batch exactly once, writes it into a named
//! shared-memory segment and announces the handle to all connected consumers.
//! Consumers acknowledge each batch as they fetch it; a batch is released once
//! every admitted consumer has acknowledged it (or been evicted), which bounds
//! how far consumers can drift apart.

pub mod pipeline;
pub mod consumer;
pub mod harness;
pub mod metrics;
pub mod payload;
pub mod producer;
pub mod transport;
pub mod wire;

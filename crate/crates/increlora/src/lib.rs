//! Incremental rank allocation for low-rank adapters on a small dense
//! training stack.
//!
//! Every weight update is factored as a sum of rank-1 components
//! `lambda_i * b_i * a_i`. Training starts each adapter at rank 1 and an
//! allocator periodically grants extra rank to whichever modules matter
//! most, measured by a smoothed sensitivity score of the adapter update.
//! Each adapter also carries one "reserve" component whose scale is pinned
//! to a tiny constant: it barely perturbs the forward pass but its vectors
//! receive real gradients, so by the time a module wins rank the new
//! component is already partly trained.
//!
//! The crate is self-contained: dense f64 kernels, a small MLP backbone,
//! AdamW with per-group restarting warmup schedules, synthetic low-rank
//! tasks, and a CLI that trains, verifies gradients, replays logged runs,
//! and compares allocation strategies.

pub mod adapter;
pub mod allocator;
pub mod cli;
pub mod gradcheck;
pub mod netgraph;
pub mod numkernel;
pub mod optimsched;
pub mod scoring;
pub mod trainer;

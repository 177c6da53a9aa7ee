//! Meta-learned construction heuristics for vehicle routing.
//!
//! The crate trains a small attention-based construction policy on a diverse
//! set of TSP/CVRP tasks (size x node distribution) so that the resulting
//! initialization generalizes zero-shot and adapts in a few gradient steps.
//!
//! Layout:
//! - [`tape`]: reverse-mode autodiff whose backward pass emits graph nodes,
//!   so gradients are themselves differentiable (needed for exact
//!   second-order meta-gradients).
//! - [`instances`]: synthetic generators (uniform / gaussian mixture /
//!   rotation / explosion), CVRP demand scheme, task sets, instance files,
//!   TSPLIB/CVRPLIB parsing.
//! - [`env`]: the multi-start construction MDP, feasibility masks, costs,
//!   validation and the x8 dihedral augmentation.
//! - [`policy`]: encoder-decoder attention policy over flat parameters.
//! - [`reinforce`]: multi-start REINFORCE with a shared per-instance
//!   baseline, plus an exact-expectation enumeration oracle.
//! - [`meta`]: inner/outer loop training with second-order, first-order
//!   (FOMAML), Reptile and switch update rules, gradient-direction
//!   diagnostics, few-shot adaptation.
//! - [`scheduler`]: linear size curriculum and hardness-weighted task
//!   sampling against a frozen oracle pool.
//! - [`solvers`]: Held-Karp, 2-opt/Or-opt local search, CVRP local search,
//!   relative gaps, external solver adapter.
//! - [`config`], [`checkpoint`], [`report`]: run configuration, exact
//!   parameter persistence, CSV/Markdown result tables.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod instances;
pub mod meta;
pub mod policy;
pub mod reinforce;
pub mod report;
pub mod rng;
pub mod scheduler;
pub mod solvers;
pub mod tape;

pub use error::{Error, Result};

//! Numerical toolkit for the delay/power tradeoff of a slotted fading link.
//!
//! A queue receives random batches of packets each slot, observes an i.i.d.
//! fade state, and chooses how many packets to transmit at a convex power
//! cost. The crate computes the minimum-power curve, solves the Lagrangian
//! MDP over a range of multipliers, verifies the structural bounds on the
//! resulting policies, and classifies how average delay scales as the power
//! margin shrinks.

pub mod asymptotics;
pub mod bounds;
pub mod chain;
pub mod config;
pub mod error;
pub mod io;
pub mod mdp;
pub mod mincost;
pub mod model;
pub mod numeric;
pub mod sim;
pub mod suite;

pub use error::{Error, Result};
pub use model::{Lattice, ModelSpec};

//! Impulsive control systems: flows, feasible and equilibrium sets, zone
//! MPC on the impulse-to-impulse map, and stability checks for the closed
//! loop.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod analysis;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod geometry;
pub mod hull;
pub mod impulsive;
pub mod linalg;
pub mod lp;
pub mod models;
pub mod mpc;
pub mod serde_nalgebra;

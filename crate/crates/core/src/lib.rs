//! Tube-based robust nonlinear MPC for tracking piece-wise constant setpoints.
//!
//! The pipeline runs bottom-up: a [`model::Plant`] and an
//! [`policy::AffinePolicy`] define the prediction model, [`lipschitz`]
//! certifies component-wise Lipschitz constants, [`tubes`] turns them into
//! box tubes and tightened constraints, [`terminal`] sizes the terminal
//! ingredients, [`equilibria`] builds the admissible setpoint region and
//! [`ocp`] solves the tracking problem online. [`sim`] closes the loop.

pub mod config;
pub mod design;
pub mod equilibria;
pub mod fourtank;
pub mod error;
pub mod hyperbox;
pub mod io;
pub mod linalg;
pub mod lipschitz;
pub mod model;
pub mod ocp;
pub mod policy;
pub mod qp;
pub mod sim;
pub mod svg;
pub mod terminal;
pub mod tubes;

pub use error::{MpcError, Result};
pub use hyperbox::Hyperbox;

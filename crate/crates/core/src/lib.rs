//! Software twin of a fiber polarization switch and stabilizer.
//!
//! - [`polarization`]: Stokes vectors, rotations and the retarder solver
//! - [`pcm`]: multi-stage phase-compensator voltages, plant model, calibration
//! - [`polarimeter`]: detector front end, ADC and display projection
//! - [`driver`]: DAC and slew-limited high-voltage driver
//! - [`control`]: the closed-loop simulator
//! - [`exec`]: sequential or rayon execution for batch work

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod batch;
pub mod control;
pub mod driver;
pub mod exec;
pub mod pcm;
pub mod polarimeter;
pub mod polarization;

pub use exec::Exec;
pub use polarization::{misalignment, rotate, solve_retarder, LinearRetarder, RotationQ, Sop, StokesVector};

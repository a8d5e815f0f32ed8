//! Equitable dynamic nodal pricing for EV charging stations.
//!
//! The crate is organised bottom-up: [`grid`] holds the network and
//! station data, [`power_flow`] the AC solver and its linearisation,
//! [`dispatch`] the station operators' battery problem, [`equity`] the
//! burden metrics, and [`icd`] / [`sdid`] the two price-setting loops.
//! [`harness`] wires them into scenario runs.

pub mod grid;
pub mod power_flow;
pub mod linalg;
pub mod qp;
pub mod dispatch;
pub mod equity;
pub mod market;
pub mod icd;
pub mod sdid;
pub mod harness;

//! Policy-evaluation laboratory for finite Markov decision processes with
//! linear function approximation: exact fixed-point analysis, emphatic and
//! off-policy temporal-difference simulators, and ensemble statistics.

pub mod analysis;
pub mod config;
pub mod error;
pub mod mdp;
pub mod sim;
pub mod stats;
pub mod testutil;

pub use error::{EtdError, Result};

//! Finite-ε covariation, window-process χ-covariation, Fukushima
//! decompositions and representation of path-dependent functionals.

pub mod chi_window;
pub mod cli;
pub mod covariation;
pub mod error;
pub mod flow;
pub mod functionals;
pub mod fukushima;
pub mod maps;
pub mod measures;
pub mod paths;
pub mod pde_chain;
pub mod representation;
pub mod rng;

pub use error::{Error, Result};

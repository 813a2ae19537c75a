//! Circuit-theory transition structure for hidden Markov models of
//! spatiotemporal count data.
//!
//! The pipeline runs: [`graph`] (spatial graph, battery/ground terminals)
//! → [`circuit`] (voltages, resistance distances, currents matrix)
//! → [`transition`] (time-varying transition matrices)
//! → [`hmm`] (Poisson–Gamma generative model)
//! → [`sampler`] (MCMC) → [`summary`] (intervals, coverage, flow labels).

pub mod circuit;
pub mod cli;
pub mod error;
pub mod graph;
pub mod hmm;
pub mod ingest;
pub mod sampler;
pub mod summary;
pub mod transition;

pub use error::{Error, ErrorKind, Result};

//! Self-evolving embodied agent training at desk scale.
//!
//! A tiny token policy explores a text household ([`env`]) with Monte Carlo
//! tree search ([`mcts`]). Tree Q-values become process rewards for
//! group-relative policy optimization ([`optim`]), and a three-way outcome
//! classifier ([`mgrm`]) can stand in for the environment reward. [`evolve`]
//! closes the loop.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod evolve;
pub mod error;
pub mod mcts;
pub mod mgrm;
pub mod optim;
pub mod params;
pub mod policy;
pub mod vocab;

pub use error::{Error, Result};

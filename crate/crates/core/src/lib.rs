//! Sparrow Mahjong laboratory: a seedable rules engine, recurrent discard
//! policies, CMA-ES and PPO trainers, and a parallel evaluation harness.

pub mod agents;
pub mod app;
pub mod cmaes;
pub mod encoding;
pub mod engine;
pub mod harness;
pub mod net;
pub mod ppo;
pub mod rng;
pub mod stats;

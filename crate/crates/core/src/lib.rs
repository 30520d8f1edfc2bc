pub mod actor;
pub mod agent;
pub mod config;
pub mod critic;
pub mod data;
pub mod env;
pub mod error;
pub mod flops;
pub mod flow;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod theory;
pub mod trainer;

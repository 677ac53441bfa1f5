//! Learned safety filters over multi-camera perception: differentiable
//! graph engine, network zoo, learned dynamics, barrier and hyperplane
//! training, a QP safety filter, a synthetic collision world and metrics.

pub mod config;
pub mod dataworld;
pub mod diffgraph;
pub mod dynamics;
pub mod evalreport;
pub mod filter;
pub mod model;
pub mod nets;
pub mod seeds;
pub mod training;

//! Hierarchical neuro-symbolic decision transformer.
//!
//! A breadth-first symbolic planner decomposes a grid-world task into
//! grounded operators; each operator is turned into a sub-goal token that
//! conditions a small decoder-only transformer producing primitive actions.
//! The crate also carries the comparison policies, exact MDP tooling used to
//! check the hierarchical regret and PAC sub-goal bounds, and the dataset and
//! evaluation pipeline.

pub mod baselines;
pub mod dt;
pub mod experiments;
pub mod gridworld;
pub mod hierarchy;
pub mod neural;
pub mod symbolic;
pub mod theory;

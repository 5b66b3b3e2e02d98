//! Subgoal discovery from demonstrations and hierarchical reinforcement learning
//! over the discovered subgoals.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`demos`]: load or generate demonstration trajectories.
//! 2. [`factors`] and [`segmentation`]: split the features into covarying
//!    factors and detect switches in each factor's dynamics with a Gaussian
//!    mixture over stacked `[x_t; x_{t+1} - x_t]` transition vectors.
//! 3. [`tsc`]: propagate switch times across factors, cluster switch states
//!    and emit one set of subgoals per factor.
//! 4. [`hrl`], [`learners`] and [`train`]: build the abstract MDP over subgoal
//!    options and train the meta-controller jointly with the option policies
//!    on the bundled [`envs`].

pub mod config;
pub mod demos;
pub mod envs;
pub mod error;
pub mod factors;
pub mod hrl;
pub mod learners;
pub mod rng;
pub mod segmentation;
pub mod testkit;
pub mod train;
pub mod tsc;

pub use error::{Error, ErrorKind, Result};

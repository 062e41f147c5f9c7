//! Gaussian belief propagation on arbitrary factor graphs.
//!
//! - [`gaussian`]: canonical and moments form algebra.
//! - [`factors`]: measurement models, linearization, Huber covariance scaling.
//! - [`factor_graph`]: graph storage and the three message-passing operations.
//! - [`schedules`]: synchronous, random, sweep, round-robin, residual and attention schedules.
//! - [`oracle`]: dense exact solvers plus Gauss-Newton and Jacobi baselines.
//! - [`problems`]: line fitting, grid denoising with multiscale, robot/landmark simulation.
//! - [`json`], [`pgm`]: graph/result JSON and graymap image I/O.
//! - [`session`]: the stateful command/event protocol behind the interactive playground.

pub mod error;
pub mod exec;
pub mod factor_graph;
pub mod factors;
pub mod gaussian;
pub mod json;
pub mod oracle;
pub mod pgm;
pub mod problems;
pub mod schedules;
pub mod session;

pub use error::{GbpError, Result};
pub use factor_graph::{FactorGraph, FactorId, GraphConfig, NodeRef, VarId};
pub use gaussian::{GaussianCanonical, GaussianMoments};
pub use schedules::{SchedulePolicy, ScheduleKind, Scheduler};

//! Non-uniform time-step scheduling for flow-matching samplers.
//!
//! The crate covers the whole loop needed to study pruned step schedules at
//! desk scale:
//!
//! - [`schedule`]: uniform grids, the sway warp and the pruned-step presets.
//! - [`oracle`]: an analytic Gaussian-mixture flow with a closed-form velocity.
//! - [`model`]: a small MLP vector field trained with the conditional
//!   flow-matching loss.
//! - [`solver`]: Euler and midpoint integration, guidance and evaluation
//!   accounting.
//! - [`diagnostics`]: PCA, curvature profiles, endpoint and distribution errors.
//! - [`pruner`]: greedy and exhaustive search for low-NFE schedules.
//! - [`bench`]: wall-clock cost of sampling runs.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and sequentially otherwise.

pub mod bench;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod io;
pub mod model;
pub mod oracle;
pub mod par;
pub mod pruner;
pub mod rng;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};
pub use field::{Condition, CountingField, FnField, VectorField};
pub use model::{cfm_loss, grad, train, DataSource, MlpConfig, MlpParams, TrainBatch, TrainConfig, TrainOutput};
pub use oracle::{mc_velocity_oracle, sample_prior, Component, GaussianMixture, McEstimate};
pub use par::Exec;
pub use schedule::{epss_schedule, parse_schedule, sway_transform, sway_value, EpssPreset, Schedule, SwayCoefficient};
pub use solver::{
    batch_endpoints, batch_solve, cfg_combine, euler_solve, midpoint_solve, nfe_accounting, predicted_cost, solve,
    BatchSolve, CfgConvention, CfgSpec, Method, NfeAccount, SolveOptions, Trajectory,
};

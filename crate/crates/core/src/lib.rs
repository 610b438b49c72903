//! Finite-state discounted mean-field games: equilibrium computation through
//! a potential-reduction GNEP solver and maximum causal entropy inverse
//! reinforcement learning at the equilibrium.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod exec;
pub mod gnep;
pub mod irl;
pub mod mdp;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
pub use exec::Execution;
pub use gnep::{solve_gnep, verify_mfe, Equilibrium, GnepConfig, KktReport};
pub use irl::{solve_irl, verify_irl, DualPoint, IrlConfig, IrlProblem, IrlSolution};
pub use mdp::{OccupationMeasure, Policy};
pub use model::{builtin_malware, load_model, ModelSpec, SimplexVector};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};

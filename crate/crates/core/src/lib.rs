//! Exchange-driven growth kinetics: truncated mean-field ODEs, their
//! identities and bounds, and a stochastic particle oracle.

pub mod diagnostics;
pub mod error;
pub mod integrator;
pub mod kernel;
pub mod rhs;
pub mod state;
pub mod stochastic;
pub mod summation;

pub use error::{EdgError, Result};
pub use integrator::{integrate, step, IntegratorConfig, Outcome, Stepper, Trajectory};
pub use kernel::{Kernel, Regime, RegimeLabel, SymmetryReport};
pub use rhs::{flux, moment_rate, rhs_direct, rhs_separable, Derivative, FluxProfile};
pub use state::{
    init_distribution, Amplitude, ClusterState, EmptyVolume, InitialShape, InitialSpec,
    MomentSeries, TailWeight,
};

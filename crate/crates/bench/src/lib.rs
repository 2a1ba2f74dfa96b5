//! Shared fixtures for the benchmarks.

use edg_core::{init_distribution, Amplitude, ClusterState, InitialSpec, Kernel};

/// Kernels exercised by every benchmark, keyed by a short label.
pub fn kernels() -> Vec<(&'static str, Kernel)> {
    vec![
        ("constant", Kernel::constant(true)),
        ("product", Kernel::product(1.0, true).expect("valid exponent")),
        ("sum", Kernel::symmetric_sum(0.5, 1.0, true).expect("valid exponents")),
        ("biased", Kernel::biased(1.5, 0.1).expect("valid bias")),
    ]
}

/// A strictly positive, geometrically decaying state on `0..=n`.
pub fn geometric_state(n: usize) -> ClusterState {
    init_distribution(&InitialSpec::geometric(0.5, Amplitude::Scale(0.5)), n)
        .expect("valid initial data")
}

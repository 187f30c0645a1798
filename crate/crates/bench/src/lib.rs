//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use isaclab::constellations::Constellation;
use isaclab::optimizer::{FlatClass, SubcarrierProblem};
use isaclab::sensing::Chain;

pub fn builtin_classes() -> Vec<Arc<Constellation>> {
    [Constellation::qpsk(), Constellation::qam16(), Constellation::apsk32(), Constellation::qam64()]
        .into_iter()
        .map(Arc::new)
        .collect()
}

pub fn flat_classes(noise_psd_bw: f64) -> Vec<FlatClass> {
    builtin_classes()
        .iter()
        .map(|c| FlatClass::from_constellation(c, 1.0, noise_psd_bw, 1e-4).expect("builtin class"))
        .collect()
}

/// Deterministic pseudo-Rayleigh power gains in `[0.05, ~5]`.
pub fn fading_gains(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u = ((i as f64 + 0.5) * 0.618_033_988_749_895).fract();
            (-u.ln()).max(0.05)
        })
        .collect()
}

pub fn fading_problem(chain: Chain, n: usize, classes: &[Arc<Constellation>], r_min: f64) -> SubcarrierProblem {
    SubcarrierProblem::new(chain, fading_gains(n), classes, r_min, 6.0, 1e-4, 0.01).expect("valid problem")
}

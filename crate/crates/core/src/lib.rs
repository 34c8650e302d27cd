//! Synthetic aperture sonar (SAS) simulation and volumetric reconstruction.
//!
//! The crate covers the full pipeline: simulate transient time-of-flight
//! measurements of triangle-mesh scenes, deconvolve the transmit pulse from
//! raw traces, reconstruct a complex-valued volumetric scattering field whose
//! angular dependence is parameterized by spherical harmonics, and evaluate
//! reconstructions against a time-domain backprojection baseline.
//!
//! Modules are layered roughly bottom-up: `math`/`rng`/`fft` are shared
//! utilities, `signal`/`geometry`/`shbasis` hold the measurement model,
//! `autodiff`/`neuralfield`/`renderer` form the differentiable forward model,
//! and `simulator`/`backprojection`/`trainer`/`meshmetrics` sit on top.
//! `pipeline` ties stages together for the CLI and the Python bindings.

pub mod autodiff;
pub mod backprojection;
pub mod config;
pub mod fft;
pub mod geometry;
pub mod io;
pub mod math;
pub mod meshmetrics;
pub mod neuralfield;
pub mod pipeline;
pub mod renderer;
pub mod rng;
pub mod shbasis;
pub mod signal;
pub mod simulator;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trainer;

pub use math::{Aabb, Mat3, Vec3};

/// Installs a rayon global thread pool with `n` threads if one has not been
/// built yet. Call before any parallel work; later calls are ignored (rayon
/// only allows one global pool per process).
pub fn configure_threads(n: usize) {
    if n == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
}

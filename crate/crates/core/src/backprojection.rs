//! Time-domain delay-and-sum baseline.
//!
//! Each voxel accumulates the deconvolved complex signal of every pose,
//! sampled at that voxel's round-trip time of flight, restricted to the
//! pose's beam cone and normalized by pose count. This is the classical
//! reconstruction the learned field is compared against.

use crate::geometry::Aperture;
use crate::math::Vec3;
use crate::meshmetrics::PointCloud;
use crate::renderer::{beam_weight, BeamPattern};
use crate::signal::AnalyticSignal;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BpError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{measurements} measurements for {poses} poses")]
    Mismatch { measurements: usize, poses: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Placement of a voxel volume: `origin` is the minimum corner; voxel
/// centers sit at `origin + (index + 0.5) * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), BpError> {
        if !(self.spacing > 0.0) {
            return Err(BpError::InvalidGrid(format!(
                "spacing {} must be positive",
                self.spacing
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(BpError::InvalidGrid("all dims must be nonzero".into()));
        }
        if !self.origin.is_finite() {
            return Err(BpError::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index; z varies fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (i as f64 + 0.5) * self.spacing,
                (j as f64 + 0.5) * self.spacing,
                (k as f64 + 0.5) * self.spacing,
            )
    }
}

/// Complex image volume.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub values: Vec<Complex64>,
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec) -> Result<VoxelGrid, BpError> {
        spec.validate()?;
        Ok(VoxelGrid {
            values: vec![Complex64::ZERO; spec.len()],
            spec,
        })
    }

    pub fn from_values(spec: GridSpec, values: Vec<Complex64>) -> Result<VoxelGrid, BpError> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(BpError::InvalidGrid(format!(
                "{} values for {} voxels",
                values.len(),
                spec.len()
            )));
        }
        Ok(VoxelGrid { spec, values })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn argmax_center(&self) -> Option<Vec3> {
        let (idx, _) = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())?;
        let [i, j, k] = self.spec.unravel(idx);
        Some(self.spec.center(i, j, k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interp {
    #[default]
    Linear,
    Nearest,
}

/// Signal value at absolute time `t`, zero outside the sampled support.
fn sample_signal(s: &AnalyticSignal, t: f64, interp: Interp) -> Complex64 {
    let u = (t - s.t0) * s.f_s;
    match interp {
        Interp::Nearest => {
            let k = u.round();
            if k < 0.0 || k >= s.samples.len() as f64 {
                Complex64::ZERO
            } else {
                s.samples[k as usize]
            }
        }
        Interp::Linear => {
            if u < 0.0 || u > (s.samples.len() - 1) as f64 {
                return Complex64::ZERO;
            }
            let k0 = (u.floor() as usize).min(s.samples.len() - 1);
            let k1 = (k0 + 1).min(s.samples.len() - 1);
            let frac = u - k0 as f64;
            s.samples[k0] * (1.0 - frac) + s.samples[k1] * frac
        }
    }
}

/// Delay-and-sum of complex measurements onto a voxel grid.
///
/// Voxel-parallel; every voxel sums its poses in ascending index order, so
/// repeated runs are bit-identical.
pub fn backproject(
    measurements: &[AnalyticSignal],
    ap: &Aperture,
    spec: &GridSpec,
    c: f64,
    interp: Interp,
) -> Result<VoxelGrid, BpError> {
    if measurements.len() != ap.len() {
        return Err(BpError::Mismatch {
            measurements: measurements.len(),
            poses: ap.len(),
        });
    }
    if ap.is_empty() {
        return Err(BpError::InvalidArg("empty aperture".into()));
    }
    if !(c > 0.0) {
        return Err(BpError::InvalidArg(format!("c = {c} must be positive")));
    }
    let mut grid = VoxelGrid::zeros(*spec)?;
    let norm = 1.0 / ap.len() as f64;
    let cones: Vec<BeamPattern> = ap
        .poses
        .iter()
        .map(|p| BeamPattern::uniform(p.beam_halfangle))
        .collect();
    grid.values
        .par_iter_mut()
        .enumerate()
        .for_each(|(idx, out)| {
            let [i, j, k] = spec.unravel(idx);
            let v = spec.center(i, j, k);
            let mut acc = Complex64::ZERO;
            for (n, pose) in ap.poses.iter().enumerate() {
                let w = beam_weight(&cones[n], pose.boresight, pose.o_t, v);
                if w == 0.0 {
                    continue;
                }
                let t = ((v - pose.o_t).norm() + (v - pose.o_r).norm()) / c;
                acc += sample_signal(&measurements[n], t, interp) * w;
            }
            *out = acc * norm;
        });
    Ok(grid)
}

/// Centers of all voxels whose magnitude reaches `threshold` times the grid
/// maximum. An all-zero grid yields an empty cloud.
pub fn grid_to_pointcloud(grid: &VoxelGrid, threshold: f64) -> Result<PointCloud, BpError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(BpError::InvalidArg(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let peak = grid.max_abs();
    if peak == 0.0 {
        return Ok(PointCloud::default());
    }
    let cut = threshold * peak;
    let mut points = Vec::new();
    for (idx, v) in grid.values.iter().enumerate() {
        if v.norm() >= cut {
            let [i, j, k] = grid.spec.unravel(idx);
            points.push(grid.spec.center(i, j, k));
        }
    }
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SensorPose;
    use crate::signal::to_analytic;
    use crate::simulator::{
        make_circular_aperture, trace_aperture, uv_sphere, Scene, SceneObject, SimConfig,
    };
    use approx::assert_relative_eq;

    fn small_spec() -> GridSpec {
        GridSpec {
            origin: Vec3::new(-0.055, -0.055, -0.055),
            spacing: 0.01,
            dims: [11, 11, 11],
        }
    }

    /// Simulates a point-like target and backprojects it.
    fn bp_of_sphere(center: Vec3, spec: &GridSpec) -> VoxelGrid {
        let scene = Scene::new(vec![SceneObject {
            mesh: uv_sphere(center, 0.005, 8, 12),
            reflectivity: 1.0,
        }])
        .unwrap();
        let ap = make_circular_aperture(0.4, 48, &[0.3], Vec3::ZERO, 0.35, None).unwrap();
        let cfg = SimConfig {
            n_bins: 512,
            rays_per_pose: 4096,
            seed: 3,
            ..SimConfig::default()
        };
        let hists = trace_aperture(&scene, &ap, &cfg).unwrap();
        let ms: Vec<_> = hists
            .iter()
            .map(|h| to_analytic(h, cfg.f_s).unwrap())
            .collect();
        backproject(&ms, &ap, spec, cfg.c, Interp::Linear).unwrap()
    }

    #[test]
    fn zero_measurements_give_zero_grid() {
        let ap = make_circular_aperture(0.4, 8, &[0.2], Vec3::ZERO, 0.4, None).unwrap();
        let ms: Vec<_> = (0..ap.len())
            .map(|_| to_analytic(&vec![0.0; 64], 100e3).unwrap())
            .collect();
        let grid = backproject(&ms, &ap, &small_spec(), 343.0, Interp::Linear).unwrap();
        assert!(grid.values.iter().all(|v| v.norm() == 0.0));
        assert!(grid_to_pointcloud(&grid, 0.5).unwrap().is_empty());
    }

    #[test]
    fn mismatched_lengths_error() {
        let ap = make_circular_aperture(0.4, 8, &[0.2], Vec3::ZERO, 0.4, None).unwrap();
        let ms = vec![to_analytic(&vec![0.0; 64], 100e3).unwrap(); 3];
        assert!(matches!(
            backproject(&ms, &ap, &small_spec(), 343.0, Interp::Linear),
            Err(BpError::Mismatch { .. })
        ));
    }

    #[test]
    fn interpolation_matches_closed_form() {
        // One pose, one measurement with a single nonzero bin; a voxel whose
        // ToF falls strictly between bins must blend linearly.
        let pose = SensorPose {
            o_t: Vec3::new(0.0, 0.0, 1.0),
            o_r: Vec3::new(0.0, 0.0, 1.0),
            boresight: Vec3::new(0.0, 0.0, -1.0),
            beam_halfangle: 1.0,
        };
        let ap = Aperture { poses: vec![pose] };
        let f_s = 100e3;
        let c = 343.0;
        let spec = GridSpec {
            origin: Vec3::new(-0.005, -0.005, -0.005),
            spacing: 0.01,
            dims: [1, 1, 1],
        };
        let v = spec.center(0, 0, 0); // the origin
        let t = 2.0 * (pose.o_t - v).norm() / c;
        let u = t * f_s;
        let k0 = u.floor() as usize;
        let frac = u - k0 as f64;
        assert!(frac > 1e-3 && frac < 1.0 - 1e-3, "degenerate test geometry");

        let mut samples = vec![Complex64::ZERO; 1024];
        samples[k0] = Complex64::new(1.0, 2.0);
        samples[k0 + 1] = Complex64::new(-3.0, 0.5);
        let m = AnalyticSignal {
            samples: samples.clone(),
            f_s,
            t0: 0.0,
        };
        let grid = backproject(&[m.clone()], &ap, &spec, c, Interp::Linear).unwrap();
        let want = samples[k0] * (1.0 - frac) + samples[k0 + 1] * frac;
        assert_relative_eq!(grid.values[0].re, want.re, max_relative = 1e-12);
        assert_relative_eq!(grid.values[0].im, want.im, max_relative = 1e-12);

        let nearest = backproject(&[m], &ap, &spec, c, Interp::Nearest).unwrap();
        let want = samples[u.round() as usize];
        assert_eq!(nearest.values[0], want);
    }

    #[test]
    fn grid_is_linear_in_measurements() {
        let spec = small_spec();
        let grid = bp_of_sphere(Vec3::new(0.01, -0.01, 0.0), &spec);

        let scene_center = Vec3::new(0.01, -0.01, 0.0);
        let scene = Scene::new(vec![SceneObject {
            mesh: uv_sphere(scene_center, 0.005, 8, 12),
            reflectivity: 1.0,
        }])
        .unwrap();
        let ap = make_circular_aperture(0.4, 48, &[0.3], Vec3::ZERO, 0.35, None).unwrap();
        let cfg = SimConfig {
            n_bins: 512,
            rays_per_pose: 4096,
            seed: 3,
            ..SimConfig::default()
        };
        let hists = trace_aperture(&scene, &ap, &cfg).unwrap();
        let k = Complex64::new(-0.3, 1.7);
        let scaled: Vec<_> = hists
            .iter()
            .map(|h| {
                let mut a = to_analytic(h, cfg.f_s).unwrap();
                for v in &mut a.samples {
                    *v *= k;
                }
                a
            })
            .collect();
        let scaled_grid = backproject(&scaled, &ap, &spec, cfg.c, Interp::Linear).unwrap();
        for (a, b) in grid.values.iter().zip(&scaled_grid.values) {
            let want = a * k;
            assert_relative_eq!(b.re, want.re, max_relative = 1e-12, epsilon = 1e-15);
            assert_relative_eq!(b.im, want.im, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn point_scatterer_focuses_at_its_position() {
        let target = Vec3::new(0.01, -0.01, 0.0);
        let spec = small_spec();
        let grid = bp_of_sphere(target, &spec);
        let peak = grid.argmax_center().unwrap();
        for axis in 0..3 {
            assert!(
                (peak.component(axis) - target.component(axis)).abs() <= spec.spacing + 1e-12,
                "axis {axis}: peak {peak:?} vs target {target:?}"
            );
        }

        // Shift consistency: moving the target one voxel in +x moves the
        // argmax one voxel in +x.
        let shifted = bp_of_sphere(target + Vec3::new(spec.spacing, 0.0, 0.0), &spec);
        let moved = shifted.argmax_center().unwrap();
        assert_relative_eq!(moved.x - peak.x, spec.spacing, max_relative = 1e-9);
        assert_relative_eq!(moved.y, peak.y, epsilon = 1e-12);
        assert_relative_eq!(moved.z, peak.z, epsilon = 1e-12);
    }

    #[test]
    fn pose_permutation_changes_nothing_measurable() {
        let target = Vec3::new(0.0, 0.015, -0.01);
        let scene = Scene::new(vec![SceneObject {
            mesh: uv_sphere(target, 0.005, 8, 12),
            reflectivity: 1.0,
        }])
        .unwrap();
        let ap = make_circular_aperture(0.4, 16, &[0.3], Vec3::ZERO, 0.35, None).unwrap();
        let cfg = SimConfig {
            n_bins: 512,
            rays_per_pose: 1024,
            ..SimConfig::default()
        };
        let hists = trace_aperture(&scene, &ap, &cfg).unwrap();
        let ms: Vec<_> = hists
            .iter()
            .map(|h| to_analytic(h, cfg.f_s).unwrap())
            .collect();
        let spec = small_spec();
        let fwd = backproject(&ms, &ap, &spec, cfg.c, Interp::Linear).unwrap();

        let perm: Vec<usize> = (0..ap.len()).rev().collect();
        let ap2 = Aperture {
            poses: perm.iter().map(|&i| ap.poses[i]).collect(),
        };
        let ms2: Vec<_> = perm.iter().map(|&i| ms[i].clone()).collect();
        let rev = backproject(&ms2, &ap2, &spec, cfg.c, Interp::Linear).unwrap();
        for (a, b) in fwd.values.iter().zip(&rev.values) {
            assert_relative_eq!(a.re, b.re, max_relative = 1e-12, epsilon = 1e-15);
            assert_relative_eq!(a.im, b.im, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn pointcloud_thresholding_is_monotone() {
        let grid = bp_of_sphere(Vec3::new(0.01, -0.01, 0.0), &small_spec());
        let mut prev = usize::MAX;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9, 0.999_999] {
            let cloud = grid_to_pointcloud(&grid, t).unwrap();
            assert!(cloud.len() <= prev, "threshold {t} added points");
            assert!(!cloud.is_empty());
            prev = cloud.len();
        }
        // Near-unity threshold keeps only the argmax voxel(s).
        let top = grid_to_pointcloud(&grid, 0.999_999).unwrap();
        let peak = grid.argmax_center().unwrap();
        assert!(top.points.iter().any(|p| (*p - peak).norm() < 1e-12));
        assert!(grid_to_pointcloud(&grid, 0.0).is_err());
        assert!(grid_to_pointcloud(&grid, 1.0).is_err());
    }
}

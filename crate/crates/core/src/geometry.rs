//! Bistatic constant-ToF ellipsoids and ray intersection.
//!
//! A transmitter at `o_T` and receiver at `o_R` hearing an echo at round-trip
//! time `t` constrains the scatterer to the ellipsoid with those foci and
//! semi-major axis `ct/2`. Rays cast from the transmitter are intersected
//! with per-bin ellipsoids in closed form; for shared foci the ellipsoids
//! are nested, so walking bins in order walks each ray front to back.

use crate::math::{Mat3, Vec3};
use crate::rng::keyed_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate ellipsoid: c*t = {ct} must exceed focal separation {d}")]
    Degenerate { ct: f64, d: f64 },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// One transmit/receive placement. `boresight` is the transmit beam axis;
/// the receive element is treated as omnidirectional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub o_t: Vec3,
    pub o_r: Vec3,
    pub boresight: Vec3,
    pub beam_halfangle: f64,
}

impl SensorPose {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.o_t.is_finite() && self.o_r.is_finite() && self.boresight.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite pose fields".into()));
        }
        if (self.boresight.norm() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose(format!(
                "boresight must be unit length (|b| = {})",
                self.boresight.norm()
            )));
        }
        if !(self.beam_halfangle > 0.0 && self.beam_halfangle <= PI) {
            return Err(GeometryError::InvalidPose(format!(
                "beam half-angle {} outside (0, pi]",
                self.beam_halfangle
            )));
        }
        Ok(())
    }

    /// Focal separation |o_R - o_T|.
    pub fn baseline(&self) -> f64 {
        (self.o_r - self.o_t).norm()
    }
}

/// An ordered set of sensor poses (one trajectory's worth of views).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aperture {
    pub poses: Vec<SensorPose>,
}

impl Aperture {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Random stream key derived from a pose's coordinates, so repeated renders
/// of the same pose reuse rays while distinct poses draw fresh ones.
pub fn pose_stream_key(seed: u64, pose: &SensorPose) -> u64 {
    crate::rng::mix_key(
        seed,
        &[
            pose.o_t.x.to_bits(),
            pose.o_t.y.to_bits(),
            pose.o_t.z.to_bits(),
            pose.o_r.x.to_bits(),
            pose.o_r.y.to_bits(),
            pose.o_r.z.to_bits(),
            pose.boresight.x.to_bits(),
            pose.boresight.y.to_bits(),
            pose.boresight.z.to_bits(),
        ],
    )
}

/// Constant-ToF ellipsoid in focal form: semi-major `a` along the focal
/// axis, semi-minor `b` on the two transverse axes, centered at the focal
/// midpoint. `rotation` columns are the local axes in world coordinates
/// (local x = focal axis).
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub rotation: Mat3,
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl Ellipsoid {
    pub fn to_local(&self, world: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(world - self.center)
    }

    pub fn to_world(&self, local: Vec3) -> Vec3 {
        self.center + self.rotation.mul_vec(local)
    }

    /// Quadric value in the local frame; zero on the surface.
    pub fn quadric(&self, world: Vec3) -> f64 {
        let p = self.to_local(world);
        (p.x / self.a).powi(2) + (p.y / self.b).powi(2) + (p.z / self.b).powi(2) - 1.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Ellipsoid of all points whose TX->point->RX path length equals `c * t`.
pub fn ellipsoid_from_tof(pose: &SensorPose, t: f64, c: f64) -> Result<Ellipsoid, GeometryError> {
    if !(c > 0.0) || !(t > 0.0) {
        return Err(GeometryError::InvalidArg(format!(
            "need c > 0 and t > 0 (got c={c}, t={t})"
        )));
    }
    let ct = c * t;
    let d = pose.baseline();
    if ct <= d {
        return Err(GeometryError::Degenerate { ct, d });
    }
    let a = ct / 2.0;
    let b = (a * a - (d / 2.0) * (d / 2.0)).sqrt();
    let center = (pose.o_t + pose.o_r) * 0.5;
    let rotation = if d < 1e-12 {
        Mat3::IDENTITY
    } else {
        let ex = (pose.o_r - pose.o_t) / d;
        let ey = ex.any_orthonormal();
        let ez = ex.cross(ey);
        Mat3::from_cols(ex, ey, ez)
    };
    Ok(Ellipsoid {
        center,
        rotation,
        a,
        b,
        d,
    })
}

/// Closed-form intersection: transforms the ray into the ellipsoid frame,
/// solves the quadric `a0 l^2 + b0 l + c0 = 0`, and returns the smallest
/// strictly positive root with its world-frame point.
pub fn ray_ellipsoid_intersect(ell: &Ellipsoid, ray: &Ray) -> Option<(Vec3, f64)> {
    let o = ell.to_local(ray.origin);
    let dir = ell.rotation.transpose().mul_vec(ray.dir);
    let (a2, b2) = (ell.a * ell.a, ell.b * ell.b);

    let a0 = dir.x * dir.x / a2 + (dir.y * dir.y + dir.z * dir.z) / b2;
    let b0 = 2.0 * (o.x * dir.x / a2 + (o.y * dir.y + o.z * dir.z) / b2);
    let c0 = o.x * o.x / a2 + (o.y * o.y + o.z * o.z) / b2 - 1.0;

    let disc = b0 * b0 - 4.0 * a0 * c0;
    if disc < 0.0 || a0 == 0.0 {
        return None;
    }
    // Numerically stable root pair: avoids cancellation when b0^2 >> 4 a0 c0.
    let q = -0.5 * (b0 + b0.signum() * disc.sqrt());
    let (r1, r2) = if q == 0.0 {
        let r = disc.sqrt() / (2.0 * a0);
        (-r, r)
    } else {
        (q / a0, c0 / q)
    };
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    let l = if lo > 0.0 {
        lo
    } else if hi > 0.0 {
        hi
    } else {
        return None;
    };
    Some((ray.origin + ray.dir * l, l))
}

/// Unit direction uniformly distributed on the spherical cap of half-angle
/// `halfangle` around `axis` (area-uniform, not angle-uniform).
pub fn sample_cone_direction<R: Rng>(rng: &mut R, axis: Vec3, halfangle: f64) -> Vec3 {
    let w = axis.normalize();
    let u1 = w.any_orthonormal();
    let u2 = w.cross(u1);
    let cos_min = halfangle.cos();
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_min);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * 2.0 * PI;
    u1 * (sin_t * phi.cos()) + u2 * (sin_t * phi.sin()) + w * cos_t
}

/// One ray/ellipsoid hit inside `sample_ellipsoid_points`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidSample {
    pub ray: usize,
    pub point: Vec3,
    pub l: f64,
}

/// Casts `n_rays` beam-cone rays from the transmitter and intersects each
/// with every per-bin ToF ellipsoid. Returns one hit list per bin; bins whose
/// path length does not exceed the baseline yield empty lists. Ray `i` draws
/// from a generator keyed by `(rng_seed, i)`, so results are identical for a
/// given seed regardless of scheduling; callers fold the pose index into
/// `rng_seed` (see `crate::rng::mix_key`).
pub fn sample_ellipsoid_points(
    pose: &SensorPose,
    tof_bins: &[f64],
    c: f64,
    n_rays: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<EllipsoidSample>>, GeometryError> {
    pose.validate()?;
    if n_rays == 0 {
        return Err(GeometryError::InvalidArg("n_rays must be >= 1".into()));
    }
    if tof_bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GeometryError::InvalidArg(
            "tof_bins must be strictly increasing".into(),
        ));
    }
    let ellipsoids: Vec<Option<Ellipsoid>> = tof_bins
        .iter()
        .map(|&t| {
            if t <= 0.0 {
                None
            } else {
                ellipsoid_from_tof(pose, t, c).ok()
            }
        })
        .collect();

    let mut per_bin: Vec<Vec<EllipsoidSample>> = vec![Vec::new(); tof_bins.len()];
    for ray_idx in 0..n_rays {
        let mut rng = keyed_rng(rng_seed, &[ray_idx as u64]);
        let dir = sample_cone_direction(&mut rng, pose.boresight, pose.beam_halfangle);
        let ray = Ray {
            origin: pose.o_t,
            dir,
        };
        for (bin, ell) in ellipsoids.iter().enumerate() {
            if let Some(ell) = ell {
                if let Some((point, l)) = ray_ellipsoid_intersect(ell, &ray) {
                    per_bin[bin].push(EllipsoidSample {
                        ray: ray_idx,
                        point,
                        l,
                    });
                }
            }
        }
    }
    Ok(per_bin)
}

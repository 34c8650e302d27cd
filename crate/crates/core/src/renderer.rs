//! Differentiable time-resolved forward model.
//!
//! A transient for one pose is synthesized by casting rays inside the
//! transmit beam cone and intersecting each ray with the nested per-bin ToF
//! ellipsoids. Every hit contributes `b_T * b_R * T_tx * T_rx * g * sigma_s`
//! to its bin: beam directivities, two-way transmission accumulated front to
//! back along the ray, a Lambertian cosine from the field's surface normal,
//! and the complex SH scattering amplitude evaluated toward the receiver.
//! Bins average over rays (Monte Carlo; the surface-measure constant is
//! absorbed by the learned field amplitude).
//!
//! The whole pipeline is generic over [`FieldCx`], so the same code serves
//! plain synthesis and gradient recording for training.

use crate::autodiff::EvalCx;
use crate::geometry::{ellipsoid_from_tof, ray_ellipsoid_intersect, sample_cone_direction, Ray, SensorPose};
use crate::math::Vec3;
use crate::neuralfield::{FieldCx, FieldParams};
use crate::rng::keyed_rng;
use crate::shbasis::{basis_len, eval_sh_basis_unit};
use crate::signal::AnalyticSignal;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// `1/sqrt(4 pi)`: converts the first SH coefficient to the DC amplitude.
pub(crate) const DC_SCALE: f64 = 0.28209479177387814;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("non-finite transient at bin {bin} (pose at {pose})")]
    NonFinite { bin: usize, pose: String },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeamKind {
    CosinePower,
    Uniform,
}

/// Directivity pattern: weight in [0, 1], zero outside `halfangle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamPattern {
    pub kind: BeamKind,
    /// Exponent of the cosine-power lobe (ignored for uniform).
    pub exponent: f64,
    pub halfangle: f64,
}

impl BeamPattern {
    pub fn uniform(halfangle: f64) -> BeamPattern {
        BeamPattern {
            kind: BeamKind::Uniform,
            exponent: 0.0,
            halfangle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Rays per pose; each ray is intersected with every bin ellipsoid.
    pub n_rays: usize,
    /// Bin count used when callers derive a bin grid (synthesis itself takes
    /// explicit bin times).
    pub n_tof_bins: usize,
    /// Occlusion scale: density = |DC amplitude| * zeta. Zero disables
    /// attenuation (all transmissions are 1).
    pub zeta: f64,
    /// Central-difference step (m) for surface normals; half the finest
    /// evaluation voxel is a good choice.
    pub normal_step: f64,
    /// Fields whose DC-modulus gradient norm falls below this are treated as
    /// flat (shading 1, no gradient). Raising it toward ~1e-3 keeps the
    /// normalization derivative bounded while training through near-flat
    /// states; the tiny default only catches exactly flat fields.
    pub normal_floor: f64,
    /// Sound speed (m/s).
    pub c: f64,
    /// Sample rate (Hz) stamped on synthesized transients.
    pub f_s: f64,
    /// Base seed for ray sampling.
    pub seed: u64,
    /// Transmit directivity. During synthesis the halfangle is taken from
    /// the pose (the beam the aperture was recorded with); the pattern shape
    /// comes from here.
    pub beam_tx: BeamPattern,
    /// Receive directivity (default: uniform over the full sphere, i.e. 1).
    pub beam_rx: BeamPattern,
    /// 0: approximate the return-leg transmission by the outbound chain
    /// (sensible for near-collocated TX/RX). >0: march the return leg
    /// exactly with this many midpoint samples per hit (doubles query cost).
    pub rx_exact_steps: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_rays: 64,
            n_tof_bins: 256,
            zeta: 20.0,
            normal_step: 1e-3,
            normal_floor: 1e-12,
            c: 343.0,
            f_s: 100_000.0,
            seed: 0,
            beam_tx: BeamPattern {
                kind: BeamKind::CosinePower,
                exponent: 2.0,
                halfangle: PI / 6.0,
            },
            beam_rx: BeamPattern::uniform(PI),
            rx_exact_steps: 0,
        }
    }
}

/// Directivity weight toward `x` for an emitter at `origin` looking along
/// `boresight`.
pub fn beam_weight(bp: &BeamPattern, boresight: Vec3, origin: Vec3, x: Vec3) -> f64 {
    let to_x = match (x - origin).try_normalize(0.0) {
        Some(u) => u,
        None => return 0.0,
    };
    let cos_psi = to_x.dot(boresight);
    if cos_psi < bp.halfangle.cos() - 1e-15 {
        return 0.0;
    }
    match bp.kind {
        BeamKind::Uniform => 1.0,
        BeamKind::CosinePower => cos_psi.max(0.0).powf(bp.exponent),
    }
}

/// Lambertian cosine toward the transmitter: `max(0, n . (o_T - x)/|o_T - x|)`.
pub fn lambertian(n: Vec3, x: Vec3, o_t: Vec3) -> Result<f64, RenderError> {
    let u = (o_t - x)
        .try_normalize(0.0)
        .ok_or_else(|| RenderError::InvalidArg("lambertian undefined at x == o_T".into()))?;
    Ok(n.dot(u).max(0.0))
}

/// Transmission at each of an ordered chain of samples along a ray from
/// `origin`: `T_i = prod_{j<i} exp(-density(x_j) * (l_{j+1} - l_j))`, so the
/// first sample sees T = 1. `samples` are `(point, arclength)` pairs with
/// strictly increasing arclengths.
pub fn transmission(
    params: &FieldParams,
    cfg: &RenderConfig,
    origin: Vec3,
    samples: &[(Vec3, f64)],
) -> Vec<f64> {
    debug_assert!(samples.windows(2).all(|w| w[0].1 < w[1].1));
    debug_assert!(samples.first().map_or(true, |s| s.1 >= 0.0));
    let _ = origin; // arclengths are measured from it; not needed directly
    let mut out = Vec::with_capacity(samples.len());
    let mut acc = 0.0f64; // accumulated optical depth
    for i in 0..samples.len() {
        out.push((-acc).exp());
        if i + 1 < samples.len() {
            let rho = if cfg.zeta > 0.0 {
                crate::neuralfield::density(params, samples[i].0, cfg.zeta)
            } else {
                0.0
            };
            acc += rho * (samples[i + 1].1 - samples[i].1);
        }
    }
    out
}

/// One field sample on a ray chain, kept for the regularization terms.
pub(crate) struct ChainSample<V> {
    pub x: Vec3,
    /// Attenuation density at `x` (zeta already applied).
    pub rho: V,
    /// DC amplitude components (real, imaginary).
    pub dc_re: V,
    pub dc_im: V,
}

/// Rendered transient for one pose plus the per-sample values the trainer
/// regularizes.
pub(crate) struct PoseRender<V> {
    /// Complex bin values, same length/order as the input bin times.
    pub bins: Vec<(V, V)>,
    pub samples: Vec<ChainSample<V>>,
}

/// Renders one pose through any field context. Ray `r` draws its direction
/// from a generator keyed by `(ray_seed, r)`.
pub(crate) fn render_pose_cx<C: FieldCx>(
    cx: &mut C,
    params: &FieldParams,
    cfg: &RenderConfig,
    pose: &SensorPose,
    tof_bins: &[f64],
    ray_seed: u64,
) -> Result<PoseRender<C::V>, RenderError> {
    pose.validate()?;
    if tof_bins.is_empty() {
        return Err(RenderError::InvalidArg("no ToF bins".into()));
    }
    if tof_bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RenderError::InvalidArg(
            "tof_bins must be strictly increasing".into(),
        ));
    }
    if cfg.n_rays == 0 {
        return Err(RenderError::InvalidArg("n_rays must be >= 1".into()));
    }

    let half = basis_len(params.l_max);
    let bp_tx = BeamPattern {
        halfangle: pose.beam_halfangle,
        ..cfg.beam_tx
    };
    let ellipsoids: Vec<_> = tof_bins
        .iter()
        .map(|&t| ellipsoid_from_tof(pose, t, cfg.c).ok())
        .collect();

    let zero = cx.k(0.0);
    let mut bin_terms: Vec<(Vec<C::V>, Vec<C::V>)> =
        (0..tof_bins.len()).map(|_| (Vec::new(), Vec::new())).collect();
    let mut chain_samples: Vec<ChainSample<C::V>> = Vec::new();

    for ray_idx in 0..cfg.n_rays {
        let mut rng = keyed_rng(ray_seed, &[ray_idx as u64]);
        let dir = sample_cone_direction(&mut rng, pose.boresight, pose.beam_halfangle);
        let ray = Ray {
            origin: pose.o_t,
            dir,
        };

        // Accumulated optical depth along this ray (a context value so its
        // gradient flows into the densities that built it).
        let mut depth = zero;
        let mut prev: Option<(C::V, f64)> = None; // (rho at prev sample, its l)

        for (bin, ell) in ellipsoids.iter().enumerate() {
            let Some(ell) = ell else { continue };
            let Some((x, l)) = ray_ellipsoid_intersect(ell, &ray) else {
                continue;
            };

            // Extend the optical depth with the segment ending at this hit.
            if let Some((rho_prev, l_prev)) = prev {
                let seg = cx.scale(rho_prev, l - l_prev);
                depth = cx.add(depth, seg);
            }

            let q = cx.field_query_cx(params, x);

            // Density from the DC channel pair.
            let dc_re = cx.scale(q[0], DC_SCALE);
            let dc_im = cx.scale(q[half], DC_SCALE);
            let rho = if cfg.zeta > 0.0 {
                let amp = cx.hypot(dc_re, dc_im);
                cx.scale(amp, cfg.zeta)
            } else {
                zero
            };

            let b_t = beam_weight(&bp_tx, pose.boresight, pose.o_t, x);
            let b_r = beam_weight(&cfg.beam_rx, pose.boresight, pose.o_r, x);
            let weight = b_t * b_r / cfg.n_rays as f64;

            if weight > 0.0 {
                // Scattering amplitude toward the receiver.
                let rx_dir = (x - pose.o_r).try_normalize(0.0);
                let basis = match rx_dir {
                    Some(u) => eval_sh_basis_unit(params.l_max, u),
                    None => vec![0.0; half],
                };
                let sig_re = cx.wsum(&q[..half], &basis);
                let sig_im = cx.wsum(&q[half..], &basis);

                // Lambertian from the field normal (1 where the field is
                // flat: those regions carry no density anyway).
                let g = shading_cx(cx, params, cfg, x, pose.o_t);

                let neg_depth = cx.neg(depth);
                let t_tx = cx.exp(neg_depth);
                let t_rx = if cfg.rx_exact_steps > 0 {
                    rx_transmission_cx(cx, params, cfg, x, pose.o_r)
                } else {
                    t_tx
                };

                let two_way = cx.mul(t_tx, t_rx);
                let shaded = cx.mul(two_way, g);
                let re = cx.mul(shaded, sig_re);
                let im = cx.mul(shaded, sig_im);
                let re = cx.scale(re, weight);
                let im = cx.scale(im, weight);
                bin_terms[bin].0.push(re);
                bin_terms[bin].1.push(im);
            }

            chain_samples.push(ChainSample {
                x,
                rho,
                dc_re,
                dc_im,
            });
            prev = Some((rho, l));
        }
    }

    let mut bins = Vec::with_capacity(tof_bins.len());
    for (bin, (res, ims)) in bin_terms.into_iter().enumerate() {
        let re = if res.is_empty() { zero } else { cx.sum(&res) };
        let im = if ims.is_empty() { zero } else { cx.sum(&ims) };
        if !cx.val(re).is_finite() || !cx.val(im).is_finite() {
            return Err(RenderError::NonFinite {
                bin,
                pose: format!("o_T = {:?}", pose.o_t.to_array()),
            });
        }
        bins.push((re, im));
    }
    Ok(PoseRender {
        bins,
        samples: chain_samples,
    })
}

/// Lambertian cosine of the field's surface normal at `x` toward `toward`,
/// as a context value. Central differences of the DC modulus; 6 queries.
fn shading_cx<C: FieldCx>(
    cx: &mut C,
    params: &FieldParams,
    cfg: &RenderConfig,
    x: Vec3,
    toward: Vec3,
) -> C::V {
    let h = cfg.normal_step;
    let half = basis_len(params.l_max);
    let mut g = Vec::with_capacity(3);
    for axis in 0..3 {
        let mut dp = Vec3::ZERO;
        match axis {
            0 => dp.x = h,
            1 => dp.y = h,
            _ => dp.z = h,
        }
        let qp = cx.field_query_cx(params, x + dp);
        let mp = cx.hypot(qp[0], qp[half]);
        let qm = cx.field_query_cx(params, x - dp);
        let mm = cx.hypot(qm[0], qm[half]);
        let diff = cx.sub(mp, mm);
        g.push(cx.scale(diff, DC_SCALE / (2.0 * h)));
    }
    let norm = cx.l2_norm(&g);
    if cx.val(norm) < cfg.normal_floor {
        return cx.k(1.0);
    }
    let u = match (toward - x).try_normalize(0.0) {
        Some(u) => u,
        None => return cx.k(1.0),
    };
    // n . u with n = -g/|g|.
    let gx = cx.div(g[0], norm);
    let gy = cx.div(g[1], norm);
    let gz = cx.div(g[2], norm);
    let ndotu = cx.wsum(&[gx, gy, gz], &[-u.x, -u.y, -u.z]);
    cx.max0(ndotu)
}

/// Exact return-leg transmission: midpoint march from `x` to the receiver.
fn rx_transmission_cx<C: FieldCx>(
    cx: &mut C,
    params: &FieldParams,
    cfg: &RenderConfig,
    x: Vec3,
    o_r: Vec3,
) -> C::V {
    let half = basis_len(params.l_max);
    let n = cfg.rx_exact_steps;
    let total = (o_r - x).norm();
    if total == 0.0 || cfg.zeta == 0.0 {
        return cx.k(1.0);
    }
    let step = total / n as f64;
    let dir = (o_r - x) / total;
    let mut depth = cx.k(0.0);
    for j in 0..n {
        let y = x + dir * ((j as f64 + 0.5) * step);
        let q = cx.field_query_cx(params, y);
        let re = cx.scale(q[0], DC_SCALE);
        let im = cx.scale(q[half], DC_SCALE);
        let amp = cx.hypot(re, im);
        let rho = cx.scale(amp, cfg.zeta);
        let seg = cx.scale(rho, step);
        depth = cx.add(depth, seg);
    }
    let nd = cx.neg(depth);
    cx.exp(nd)
}

/// Synthesizes the complex transient of one pose at the given bin times.
/// Deterministic: identical params/config/pose/bins give identical bits.
pub fn synthesize_transient(
    params: &FieldParams,
    cfg: &RenderConfig,
    pose: &SensorPose,
    tof_bins: &[f64],
) -> Result<AnalyticSignal, RenderError> {
    let mut cx = EvalCx;
    let key = crate::geometry::pose_stream_key(cfg.seed, pose);
    let render = render_pose_cx(&mut cx, params, cfg, pose, tof_bins, key)?;
    Ok(AnalyticSignal {
        samples: render
            .bins
            .into_iter()
            .map(|(re, im)| Complex64::new(re, im))
            .collect(),
        f_s: cfg.f_s,
        t0: tof_bins[0],
    })
}

/// Transient at an arbitrary (typically held-out) pose. Same computation as
/// [`synthesize_transient`]; named entry point for novel-view evaluation.
pub fn synthesize_novel_view(
    params: &FieldParams,
    cfg: &RenderConfig,
    pose: &SensorPose,
    tof_bins: &[f64],
) -> Result<AnalyticSignal, RenderError> {
    synthesize_transient(params, cfg, pose, tof_bins)
}

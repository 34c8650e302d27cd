//! Analysis-by-synthesis optimization of the field against deconvolved
//! measurements.
//!
//! Each iteration samples a batch of poses and a subset of energetic ToF
//! bins per pose, renders the sampled bins with shared rays, and minimizes
//!
//! `L = l1 * L_ToF + l2 * L_Sparse + l3 * TV(density) + l4 * TV(|DC|)
//!    + l5 * TV(phase)`
//!
//! where `L_ToF` is the per-pose (unsquared) L2 misfit and the TV terms are
//! one-sided finite differences along a fresh random direction per field
//! sample. Gradients come from the recording context; Adam updates are a
//! serial section, so runs are reproducible for a fixed seed.

use crate::autodiff::{Cx, EvalCx};
use crate::geometry::{Aperture, SensorPose};
use crate::neuralfield::{adam_step, AdamState, FieldCx, FieldParams, GradCx};
use crate::renderer::{render_pose_cx, RenderConfig, RenderError, DC_SCALE};
use crate::rng::{keyed_rng, mix_key};
use crate::signal::AnalyticSignal;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;
use thiserror::Error;

const TAG_BINS: u64 = 1;
const TAG_RAYS: u64 = 2;
const TAG_TV: u64 = 3;
const TAG_BATCH: u64 = 4;
/// Salt for the fixed probe batch so it never collides with training rays.
const PROBE_SALT: u64 = 0x70726f_6265;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("non-finite value in loss term {term}")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Field(#[from] crate::neuralfield::FieldError),
    #[error("training diverged at iteration {iteration}; last good checkpoint attached")]
    Diverged {
        iteration: usize,
        last_good: Box<FieldParams>,
        report: TrainReport,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weights of (ToF, sparsity, density TV, DC-amplitude TV, phase TV).
    pub lambdas: [f64; 5],
    pub lr: f64,
    pub iterations: usize,
    /// Poses drawn per iteration (without replacement).
    pub batch_poses: usize,
    /// ToF bins sampled per pose: ~90% from bins holding measured energy,
    /// ~10% uniform over the trace.
    pub bins_per_pose: usize,
    /// Rays shared across a pose's sampled bins (each ray is intersected
    /// with every sampled bin's ellipsoid).
    pub rays_per_bin: usize,
    /// Finite-difference step (m) of the TV regularizers.
    pub tv_delta: f64,
    /// Occlusion scale used for training-time renders.
    pub zeta: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: [1.0, 1e-5, 1e-5, 1e-5, 1e-5],
            lr: 1e-3,
            iterations: 500,
            batch_poses: 4,
            bins_per_pose: 24,
            rays_per_bin: 12,
            tv_delta: 0.01,
            zeta: 20.0,
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(TrainError::InvalidArg(
                "loss weights must be >= 0 and finite".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(TrainError::InvalidArg("iterations must be >= 1".into()));
        }
        if !(self.tv_delta > 0.0) {
            return Err(TrainError::InvalidArg("tv_delta must be > 0".into()));
        }
        if self.batch_poses == 0 || self.bins_per_pose == 0 || self.rays_per_bin == 0 {
            return Err(TrainError::InvalidArg(
                "batch_poses, bins_per_pose and rays_per_bin must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidArg("lr must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::InvalidArg("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unweighted values of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tof: f64,
    pub sparse: f64,
    pub tv_density: f64,
    pub tv_scatter: f64,
    pub tv_phase: f64,
}

impl LossBreakdown {
    pub fn total(&self, lambdas: &[f64; 5]) -> f64 {
        lambdas[0] * self.tof
            + lambdas[1] * self.sparse
            + lambdas[2] * self.tv_density
            + lambdas[3] * self.tv_scatter
            + lambdas[4] * self.tv_phase
    }

    fn add(&mut self, other: &LossBreakdown) {
        self.tof += other.tof;
        self.sparse += other.sparse;
        self.tv_density += other.tv_density;
        self.tv_scatter += other.tv_scatter;
        self.tv_phase += other.tv_phase;
    }

    fn check_finite(&self) -> Result<(), TrainError> {
        for (v, term) in [
            (self.tof, "tof"),
            (self.sparse, "sparse"),
            (self.tv_density, "tv_density"),
            (self.tv_scatter, "tv_scatter"),
            (self.tv_phase, "tv_phase"),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { term });
            }
        }
        Ok(())
    }
}

/// One pose of a training batch. `pose_key` must be stable across
/// iterations (the pose's index in the full aperture) so random streams
/// stay decorrelated between poses.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub pose: SensorPose,
    pub measurement: &'a AnalyticSignal,
    pub pose_key: u64,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub breakdown: LossBreakdown,
    pub grads: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub total: f64,
    pub tof: f64,
    pub sparse: f64,
    pub tv_density: f64,
    pub tv_scatter: f64,
    pub tv_phase: f64,
}

/// Training trace. `wall_time_s` is measured, so it is excluded from any
/// determinism comparison; everything else is reproducible bit-for-bit for
/// a fixed seed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoints: Vec<Checkpoint>,
    pub initial_probe_tof: f64,
    pub final_probe_tof: f64,
    pub iterations_run: usize,
    pub wall_time_s: f64,
}

/// ToF bins to supervise: mostly bins holding measured energy (>= 1% of the
/// trace max), topped up with uniform draws; sorted and deduplicated.
pub(crate) fn sample_bins(s: &AnalyticSignal, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = s.samples.len();
    let n = n.min(len);
    if n == 0 {
        return Vec::new();
    }
    let mags: Vec<f64> = s.samples.iter().map(|c| c.norm()).collect();
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let mut eligible: Vec<usize> = (0..len).filter(|&k| mags[k] >= 0.01 * peak).collect();
    if peak == 0.0 {
        eligible.clear();
    }

    let n_uniform = ((n as f64) * 0.1).round() as usize;
    let n_energy = (n - n_uniform).min(eligible.len());
    let mut chosen = vec![false; len];
    let mut bins = Vec::with_capacity(n);
    let (picked, _) = eligible.partial_shuffle(rng, n_energy);
    for &k in picked.iter() {
        chosen[k] = true;
        bins.push(k);
    }
    // Top up uniformly over the whole trace (also covers short eligibility).
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    for &k in &all {
        if bins.len() >= n {
            break;
        }
        if !chosen[k] {
            chosen[k] = true;
            bins.push(k);
        }
    }
    bins.sort_unstable();
    bins
}

fn random_unit(rng: &mut ChaCha8Rng) -> crate::math::Vec3 {
    let z = 1.0 - 2.0 * rng.random::<f64>();
    let phi = 2.0 * PI * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    crate::math::Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Loss and gradient contribution of one pose. The five breakdown terms are
/// unweighted; `grads` (when requested) hold the gradient of the weighted
/// subtotal.
fn pose_loss(
    params: &FieldParams,
    tcfg: &TrainConfig,
    rcfg: &RenderConfig,
    item: &BatchItem,
    stream: u64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>), TrainError> {
    let pose_stream = mix_key(stream, &[item.pose_key]);
    let mut bin_rng = keyed_rng(pose_stream, &[TAG_BINS]);
    let bins = sample_bins(item.measurement, tcfg.bins_per_pose, &mut bin_rng);
    if bins.is_empty() {
        return Err(TrainError::InvalidArg("empty measurement trace".into()));
    }
    let s = item.measurement;
    let times: Vec<f64> = bins.iter().map(|&k| s.t0 + k as f64 / s.f_s).collect();

    let render_cfg = RenderConfig {
        n_rays: tcfg.rays_per_bin,
        zeta: tcfg.zeta,
        ..*rcfg
    };
    let rays_seed = mix_key(pose_stream, &[TAG_RAYS]);
    let mut tv_rng = keyed_rng(pose_stream, &[TAG_TV]);

    let mut cx = GradCx::new();
    let render = render_pose_cx(&mut cx, params, &render_cfg, &item.pose, &times, rays_seed)?;

    // Data term: unsquared L2 over the sampled bins' complex residuals.
    let mut comps = Vec::with_capacity(2 * bins.len());
    for (bi, &k) in bins.iter().enumerate() {
        let (re, im) = render.bins[bi];
        comps.push(cx.add_k(re, -s.samples[k].re));
        comps.push(cx.add_k(im, -s.samples[k].im));
    }
    let tof = cx.l2_norm(&comps);

    // Regularizers at the chain samples; one extra field query per sample
    // feeds all three TV terms.
    let half = crate::shbasis::basis_len(params.l_max);
    let mut sparse_terms = Vec::with_capacity(render.samples.len());
    let mut tvd_terms = Vec::with_capacity(render.samples.len());
    let mut tvs_terms = Vec::with_capacity(render.samples.len());
    let mut tvp_terms = Vec::with_capacity(render.samples.len());
    let reg_active = tcfg.lambdas[1..].iter().any(|&l| l > 0.0);
    for sample in &render.samples {
        if !reg_active {
            break;
        }
        let u = random_unit(&mut tv_rng);
        sparse_terms.push(sample.rho);

        let q2 = cx.field_query_cx(params, sample.x + u * tcfg.tv_delta);
        let dc2_re = cx.scale(q2[0], DC_SCALE);
        let dc2_im = cx.scale(q2[half], DC_SCALE);
        let amp1 = cx.hypot(sample.dc_re, sample.dc_im);
        let amp2 = cx.hypot(dc2_re, dc2_im);
        let damp = cx.sub(amp2, amp1);
        tvs_terms.push(cx.abs(damp));

        let rho2 = cx.scale(amp2, tcfg.zeta);
        let drho = cx.sub(rho2, sample.rho);
        tvd_terms.push(cx.abs(drho));

        let ph1 = cx.atan2(sample.dc_im, sample.dc_re);
        let ph2 = cx.atan2(dc2_im, dc2_re);
        let dph = cx.sub(ph2, ph1);
        let wrapped = cx.wrap_pi(dph);
        tvp_terms.push(cx.abs(wrapped));
    }
    let zero = cx.k(0.0);
    let sum_or_zero = |cx: &mut GradCx, terms: &[crate::autodiff::Var]| {
        if terms.is_empty() {
            zero
        } else {
            cx.sum(terms)
        }
    };
    let sparse = sum_or_zero(&mut cx, &sparse_terms);
    let tvd = sum_or_zero(&mut cx, &tvd_terms);
    let tvs = sum_or_zero(&mut cx, &tvs_terms);
    let tvp = sum_or_zero(&mut cx, &tvp_terms);

    let breakdown = LossBreakdown {
        tof: cx.val(tof),
        sparse: cx.val(sparse),
        tv_density: cx.val(tvd),
        tv_scatter: cx.val(tvs),
        tv_phase: cx.val(tvp),
    };
    breakdown.check_finite()?;

    let grads = if want_grad {
        let root = cx.wsum(&[tof, sparse, tvd, tvs, tvp], &tcfg.lambdas);
        let mut g = vec![0.0; params.layout.total];
        cx.backward_into(params, root, &mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { term: "gradient" });
        }
        Some(g)
    } else {
        None
    };
    Ok((breakdown, grads))
}

/// Weighted batch loss, per-term breakdown, and the gradient. Poses render
/// in parallel; accumulation runs in batch order, so the result depends only
/// on (params, configs, batch, stream).
pub fn compute_loss(
    params: &FieldParams,
    tcfg: &TrainConfig,
    rcfg: &RenderConfig,
    batch: &[BatchItem],
    stream: u64,
) -> Result<LossValue, TrainError> {
    tcfg.validate()?;
    if batch.is_empty() {
        return Err(TrainError::InvalidArg("empty batch".into()));
    }
    let partials: Vec<Result<(LossBreakdown, Option<Vec<f64>>), TrainError>> = batch
        .par_iter()
        .map(|item| pose_loss(params, tcfg, rcfg, item, stream, true))
        .collect();
    let mut breakdown = LossBreakdown::default();
    let mut grads = vec![0.0; params.layout.total];
    for part in partials {
        let (b, g) = part?;
        breakdown.add(&b);
        let g = g.expect("gradient requested");
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok(LossValue {
        total: breakdown.total(&tcfg.lambdas),
        breakdown,
        grads,
    })
}

/// Data-term value on the fixed probe batch (first few poses, frozen rays
/// and bins): the convergence yardstick reported by training.
fn probe_tof(
    params: &FieldParams,
    tcfg: &TrainConfig,
    rcfg: &RenderConfig,
    items: &[BatchItem],
) -> Result<f64, TrainError> {
    let stream = mix_key(tcfg.seed, &[PROBE_SALT]);
    let totals: Vec<Result<f64, TrainError>> = items
        .par_iter()
        .map(|item| {
            let pose_stream = mix_key(stream, &[item.pose_key]);
            let mut bin_rng = keyed_rng(pose_stream, &[TAG_BINS]);
            let bins = sample_bins(item.measurement, tcfg.bins_per_pose, &mut bin_rng);
            if bins.is_empty() {
                return Err(TrainError::InvalidArg("empty measurement trace".into()));
            }
            let s = item.measurement;
            let times: Vec<f64> = bins.iter().map(|&k| s.t0 + k as f64 / s.f_s).collect();
            let render_cfg = RenderConfig {
                n_rays: tcfg.rays_per_bin,
                zeta: tcfg.zeta,
                ..*rcfg
            };
            let mut cx = EvalCx;
            let render = render_pose_cx(
                &mut cx,
                params,
                &render_cfg,
                &item.pose,
                &times,
                mix_key(pose_stream, &[TAG_RAYS]),
            )?;
            let mut sq = 0.0;
            for (bi, &k) in bins.iter().enumerate() {
                let (re, im) = render.bins[bi];
                let (dr, di) = (re - s.samples[k].re, im - s.samples[k].im);
                sq += dr * dr + di * di;
            }
            Ok(sq.sqrt())
        })
        .collect();
    let mut acc = 0.0;
    for t in totals {
        acc += t?;
    }
    if !acc.is_finite() {
        return Err(TrainError::NonFinite { term: "probe_tof" });
    }
    Ok(acc)
}

fn probe_items<'a>(
    measurements: &'a [AnalyticSignal],
    ap: &Aperture,
) -> Vec<BatchItem<'a>> {
    (0..ap.len().min(4))
        .map(|i| BatchItem {
            pose: ap.poses[i],
            measurement: &measurements[i],
            pose_key: i as u64,
        })
        .collect()
}

/// Optimizes `params` against the measurements. On divergence the error
/// carries the last finite parameter state and the partial report.
pub fn train(
    measurements: &[AnalyticSignal],
    ap: &Aperture,
    mut params: FieldParams,
    tcfg: &TrainConfig,
    rcfg: &RenderConfig,
) -> Result<(FieldParams, TrainReport), TrainError> {
    tcfg.validate()?;
    if measurements.len() != ap.len() || ap.is_empty() {
        return Err(TrainError::InvalidArg(format!(
            "{} measurements for {} poses",
            measurements.len(),
            ap.len()
        )));
    }
    for (i, m) in measurements.iter().enumerate() {
        if !m.is_finite() {
            return Err(TrainError::InvalidArg(format!(
                "measurement {i} has non-finite samples"
            )));
        }
    }
    let started = Instant::now();
    let probes = probe_items(measurements, ap);
    let mut report = TrainReport {
        initial_probe_tof: probe_tof(&params, tcfg, rcfg, &probes)?,
        ..TrainReport::default()
    };

    let mut adam = AdamState::new(params.layout.total, tcfg.lr);
    let batch_size = tcfg.batch_poses.min(ap.len());
    let mut last_good = params.clone();

    for iter in 0..tcfg.iterations {
        let stream = mix_key(tcfg.seed, &[iter as u64]);
        let mut order: Vec<usize> = (0..ap.len()).collect();
        let mut batch_rng = keyed_rng(stream, &[TAG_BATCH]);
        let (picked, _) = order.partial_shuffle(&mut batch_rng, batch_size);
        let batch: Vec<BatchItem> = picked
            .iter()
            .map(|&i| BatchItem {
                pose: ap.poses[i],
                measurement: &measurements[i],
                pose_key: i as u64,
            })
            .collect();

        let diverged = |report: &TrainReport, last_good: &FieldParams, iteration| TrainError::Diverged {
            iteration,
            last_good: Box::new(last_good.clone()),
            report: TrainReport {
                wall_time_s: started.elapsed().as_secs_f64(),
                iterations_run: iteration,
                ..report.clone()
            },
        };

        let loss = match compute_loss(&params, tcfg, rcfg, &batch, stream) {
            Ok(l) => l,
            Err(TrainError::NonFinite { .. })
            | Err(TrainError::Render(RenderError::NonFinite { .. })) => {
                return Err(diverged(&report, &last_good, iter))
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(diverged(&report, &last_good, iter));
        }

        if iter % tcfg.checkpoint_every == 0 || iter + 1 == tcfg.iterations {
            report.checkpoints.push(Checkpoint {
                iteration: iter,
                total: loss.total,
                tof: loss.breakdown.tof,
                sparse: loss.breakdown.sparse,
                tv_density: loss.breakdown.tv_density,
                tv_scatter: loss.breakdown.tv_scatter,
                tv_phase: loss.breakdown.tv_phase,
            });
        }
        last_good.data.copy_from_slice(&params.data);
        if adam_step(&mut adam, &mut params.data, &loss.grads).is_err() || !params.is_finite() {
            return Err(diverged(&report, &last_good, iter));
        }
    }

    report.final_probe_tof = probe_tof(&params, tcfg, rcfg, &probes)?;
    report.iterations_run = tcfg.iterations;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((params, report))
}

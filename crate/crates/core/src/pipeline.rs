//! Pipeline stages as functions over files plus a [`RunConfig`].
//!
//! The CLI subcommands and the Python bindings are both thin wrappers around
//! these. Each stage reads its input artifacts, does the work, writes its
//! output artifacts, and returns a small serializable summary. Outputs are
//! byte-reproducible for a fixed config and seed: parallel maps collect in
//! input order and nothing nondeterministic (time, pointers, thread ids)
//! reaches a file. The one measured quantity, training wall time, is
//! deliberately kept out of the report file.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::backprojection::{backproject, grid_to_pointcloud, BpError, VoxelGrid};
use crate::config::{ConfigError, RunConfig};
use crate::geometry::{GeometryError, SensorPose};
use crate::io::{
    self, FieldCheckpoint, IoError, TracePayload, TransientContainer,
};
use crate::math::Vec3;
use crate::meshmetrics::{
    eval_density_grid, evaluate_clouds, marching_cubes, mesh_to_pointcloud, suggested_thresholds,
    MetricReport, MetricsError, PointCloud, TriMeshOut,
};
use crate::neuralfield::{FieldError, FieldParams};
use crate::renderer::{synthesize_novel_view, RenderConfig, RenderError};
use crate::rng::mix_key;
use crate::signal::{pulse_deconvolve, to_analytic, AnalyticSignal, SignalError};
use crate::simulator::{render_measurement, trace_aperture, SimError, TriMesh};
use crate::trainer::{train, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    /// Wrong artifact kind for the stage (e.g. training on a raw container).
    #[error("{0}")]
    Stage(String),
    #[error("training diverged at iteration {iteration}; last good state saved to {checkpoint}")]
    Diverged { iteration: usize, checkpoint: PathBuf },
}

impl PipelineError {
    /// True for numeric-divergence failures (CLI exit code 4; everything
    /// else here is a data error, exit code 3).
    pub fn is_divergence(&self) -> bool {
        matches!(self, PipelineError::Diverged { .. })
    }
}

fn stage_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Stage(msg.into())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub n_poses: usize,
    pub n_bins: usize,
    /// Sum over poses of the squared-sample energy, a quick sanity signal.
    pub total_energy: f64,
}

/// Scene (JSON or OBJ) -> raw real transient container.
pub fn simulate(
    cfg: &RunConfig,
    scene_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
) -> Result<SimulateSummary, PipelineError> {
    let scene = io::read_scene(scene_path)?;
    let ap = cfg.aperture.build()?;
    let pulse = cfg.pulse.build(cfg.sim.f_s)?;
    let hists = trace_aperture(&scene, &ap, &cfg.sim)?;
    let traces: Vec<Vec<f64>> = hists
        .par_iter()
        .enumerate()
        .map(|(pi, hist)| {
            render_measurement(hist, &pulse, cfg.sim.snr_db, mix_key(cfg.sim.seed, &[pi as u64]))
        })
        .collect();
    let total_energy = traces
        .iter()
        .map(|tr| tr.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let container = TransientContainer {
        f_s: cfg.sim.f_s,
        c: cfg.sim.c,
        aperture: ap,
        traces: TracePayload::Real(traces),
    };
    io::write_sast(out_path, &container)?;
    Ok(SimulateSummary {
        n_poses: container.n_poses(),
        n_bins: container.n_bins(),
        total_energy,
    })
}

// ---------------------------------------------------------------------------
// deconvolve

#[derive(Debug, Clone, Serialize)]
pub struct DeconvolveSummary {
    pub n_poses: usize,
    /// Mean over poses of residual-squared / input analytic energy; small
    /// values mean the estimate re-convolves back to the measurement.
    pub mean_residual_fraction: f64,
}

/// Raw real container -> complex reflectivity container (pulse removed).
pub fn deconvolve(
    cfg: &RunConfig,
    in_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
) -> Result<DeconvolveSummary, PipelineError> {
    let cont = io::read_sast(in_path)?;
    let raw = match &cont.traces {
        TracePayload::Real(t) => t,
        TracePayload::Complex(_) => {
            return Err(stage_err(
                "container is already complex; deconvolve expects raw (real) traces",
            ))
        }
    };
    let pulse = cfg.pulse.build(cont.f_s)?;
    let results: Vec<(Vec<Complex64>, f64)> = raw
        .par_iter()
        .map(|tr| {
            let s = to_analytic(tr, cont.f_s)?;
            let r = pulse_deconvolve(&s, &pulse, &cfg.deconv)?;
            // fidelity_final is peak-normalized; rescale to an energy share.
            let energy = s.energy();
            let peak_sq = s.samples.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
            let frac = if energy > 0.0 {
                r.fidelity_final * peak_sq / energy
            } else {
                0.0
            };
            Ok((r.signal.samples, frac))
        })
        .collect::<Result<_, SignalError>>()?;
    let n = results.len();
    let mean_residual_fraction = results.iter().map(|(_, f)| f).sum::<f64>() / n.max(1) as f64;
    let container = TransientContainer {
        f_s: cont.f_s,
        c: cont.c,
        aperture: cont.aperture,
        traces: TracePayload::Complex(results.into_iter().map(|(s, _)| s).collect()),
    };
    io::write_sast(out_path, &container)?;
    Ok(DeconvolveSummary {
        n_poses: n,
        mean_residual_fraction,
    })
}

fn complex_measurements(
    cont: &TransientContainer,
    stage: &str,
) -> Result<Vec<AnalyticSignal>, PipelineError> {
    cont.analytic_measurements().ok_or_else(|| {
        stage_err(format!(
            "{stage} expects a complex (deconvolved) container; run deconvolve first"
        ))
    })
}

// ---------------------------------------------------------------------------
// backproject

#[derive(Debug, Clone, Serialize)]
pub struct BackprojectSummary {
    pub max_abs: f64,
    pub argmax: Option<Vec3>,
    pub cloud_points: Option<usize>,
}

/// Complex container -> delay-and-sum voxel image, plus an optional
/// thresholded point cloud.
pub fn backproject_stage(
    cfg: &RunConfig,
    in_path: impl AsRef<Path>,
    out_grid: impl AsRef<Path>,
    out_cloud: Option<&Path>,
) -> Result<BackprojectSummary, PipelineError> {
    let cont = io::read_sast(in_path)?;
    let ms = complex_measurements(&cont, "backproject")?;
    let grid = backproject(
        &ms,
        &cont.aperture,
        &cfg.backproject.grid,
        cont.c,
        cfg.backproject.interp,
    )?;
    io::write_shsg(out_grid, &grid)?;
    let cloud_points = match out_cloud {
        Some(path) => {
            let cloud = grid_to_pointcloud(&grid, cfg.backproject.threshold)?;
            io::write_ply(path, &cloud)?;
            Some(cloud.len())
        }
        None => None,
    };
    Ok(BackprojectSummary {
        max_abs: grid.max_abs(),
        argmax: grid.argmax_center(),
        cloud_points,
    })
}

// ---------------------------------------------------------------------------
// train

/// [`TrainReport`] minus the wall-clock field, which would break
/// byte-identical reruns of the stage.
#[derive(Debug, Clone, Serialize)]
struct ReportDoc<'a> {
    checkpoints: &'a [crate::trainer::Checkpoint],
    initial_probe_tof: f64,
    final_probe_tof: f64,
    iterations_run: usize,
}

fn write_report(path: &Path, report: &TrainReport) -> Result<(), IoError> {
    io::write_json(
        path,
        &ReportDoc {
            checkpoints: &report.checkpoints,
            initial_probe_tof: report.initial_probe_tof,
            final_probe_tof: report.final_probe_tof,
            iterations_run: report.iterations_run,
        },
    )
}

/// Complex container -> trained field checkpoint (+ optional loss report).
///
/// On divergence the last finite state is still written to `out_ckpt` and
/// the error says so; callers map that to a distinct exit code.
pub fn train_stage(
    cfg: &RunConfig,
    in_path: impl AsRef<Path>,
    out_ckpt: impl AsRef<Path>,
    out_report: Option<&Path>,
) -> Result<TrainReport, PipelineError> {
    let out_ckpt = out_ckpt.as_ref();
    let cont = io::read_sast(in_path)?;
    let ms = complex_measurements(&cont, "train")?;
    let rcfg = RenderConfig {
        f_s: cont.f_s,
        c: cont.c,
        ..cfg.render
    };
    let init = FieldParams::init(cfg.field.grid, cfg.field.l_max, cfg.field.init_seed)?;
    match train(&ms, &cont.aperture, init, &cfg.train, &rcfg) {
        Ok((params, report)) => {
            io::write_shsf(
                out_ckpt,
                &FieldCheckpoint {
                    params,
                    zeta: cfg.train.zeta,
                },
            )?;
            if let Some(path) = out_report {
                write_report(path, &report)?;
            }
            Ok(report)
        }
        Err(TrainError::Diverged {
            iteration,
            last_good,
            report,
        }) => {
            io::write_shsf(
                out_ckpt,
                &FieldCheckpoint {
                    params: *last_good,
                    zeta: cfg.train.zeta,
                },
            )?;
            if let Some(path) = out_report {
                write_report(path, &report)?;
            }
            Err(PipelineError::Diverged {
                iteration,
                checkpoint: out_ckpt.to_path_buf(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// extract

#[derive(Debug, Clone, Serialize)]
pub struct ExtractedMesh {
    pub iso_fraction: f64,
    pub iso_value: f64,
    pub vertices: usize,
    pub faces: usize,
    pub cloud_points: usize,
    pub obj: PathBuf,
    pub ply: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub density_max: f64,
    pub grid: PathBuf,
    pub meshes: Vec<ExtractedMesh>,
}

/// Checkpoint -> density grid (.shsg) plus, per configured iso fraction, a
/// marching-cubes mesh (.obj) and a surface-sampled cloud (.ply).
///
/// Output names extend `out_stem`: `<stem>.shsg`, `<stem>_iso<NNN>.obj/.ply`
/// with NNN the iso fraction in per-mille.
pub fn extract_stage(
    cfg: &RunConfig,
    ckpt_path: impl AsRef<Path>,
    out_stem: impl AsRef<Path>,
) -> Result<ExtractSummary, PipelineError> {
    let stem = out_stem.as_ref();
    let ckpt = io::read_shsf(ckpt_path)?;
    let density = eval_density_grid(&ckpt.params, ckpt.zeta, &cfg.extract.grid);
    let grid_path = stem.with_extension("shsg");
    let complex_values: Vec<Complex64> = density
        .values
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    io::write_shsg(
        &grid_path,
        &VoxelGrid::from_values(density.spec, complex_values)?,
    )?;

    let dmax = density.values.iter().cloned().fold(0.0_f64, f64::max);
    let stem_str = stem.to_string_lossy();
    let mut meshes = Vec::new();
    for &frac in &cfg.extract.iso_fractions {
        let iso = frac * dmax;
        let mesh = marching_cubes(&density, iso);
        let tag = format!("{stem_str}_iso{:03}", (frac * 1000.0).round() as u32);
        let obj = PathBuf::from(format!("{tag}.obj"));
        let ply = PathBuf::from(format!("{tag}.ply"));
        io::write_obj(&obj, &mesh)?;
        let cloud = if mesh.is_empty() {
            PointCloud { points: Vec::new() }
        } else {
            mesh_to_pointcloud(&mesh, cfg.extract.cloud_samples, cfg.extract.sample_seed)?
        };
        io::write_ply(&ply, &cloud)?;
        meshes.push(ExtractedMesh {
            iso_fraction: frac,
            iso_value: iso,
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
            cloud_points: cloud.len(),
            obj,
            ply,
        });
    }
    Ok(ExtractSummary {
        density_max: dmax,
        grid: grid_path,
        meshes,
    })
}

// ---------------------------------------------------------------------------
// evaluate

fn mesh_to_out(mesh: &TriMesh) -> TriMeshOut {
    TriMeshOut {
        vertices: mesh.vertices.clone(),
        faces: mesh.faces.clone(),
    }
}

/// Reads a point cloud for evaluation; OBJ meshes are surface-sampled with
/// the extract-stage sample count.
pub fn read_cloud_or_mesh(cfg: &RunConfig, path: impl AsRef<Path>) -> Result<PointCloud, PipelineError> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => Ok(io::read_ply(path)?),
        Some("obj") => {
            let mesh = io::read_obj(path)?;
            Ok(mesh_to_pointcloud(
                &mesh_to_out(&mesh),
                cfg.extract.cloud_samples,
                cfg.extract.sample_seed,
            )?)
        }
        _ => Err(stage_err(format!(
            "{}: evaluate reads .ply clouds or .obj meshes",
            path.display()
        ))),
    }
}

/// Reconstruction vs reference -> metric report (optionally written as JSON).
/// Thresholds default to reference-derived values when not configured.
pub fn evaluate_stage(
    cfg: &RunConfig,
    recon_path: impl AsRef<Path>,
    reference_path: impl AsRef<Path>,
    out_json: Option<&Path>,
) -> Result<MetricReport, PipelineError> {
    let recon = read_cloud_or_mesh(cfg, recon_path)?;
    let reference = read_cloud_or_mesh(cfg, reference_path)?;
    let (voxel_default, tau_default) = suggested_thresholds(&reference);
    let voxel = cfg.metrics.voxel_size.unwrap_or(voxel_default);
    let tau = cfg.metrics.tau.unwrap_or(tau_default);
    let report = evaluate_clouds(&recon, &reference, voxel, tau, cfg.metrics.chamfer)?;
    if let Some(path) = out_json {
        io::write_json(path, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// novel view

/// Mean absolute and mean squared errors per channel.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChannelErrors {
    pub l1_real: f64,
    pub l1_imag: f64,
    pub l1_abs: f64,
    pub mse_real: f64,
    pub mse_imag: f64,
    pub mse_abs: f64,
}

fn channel_errors(pred: &[Complex64], truth: &[Complex64]) -> ChannelErrors {
    let n = truth.len().max(1) as f64;
    let mut e = ChannelErrors {
        l1_real: 0.0,
        l1_imag: 0.0,
        l1_abs: 0.0,
        mse_real: 0.0,
        mse_imag: 0.0,
        mse_abs: 0.0,
    };
    for (p, t) in pred.iter().zip(truth) {
        let (dr, di) = (p.re - t.re, p.im - t.im);
        let da = p.norm() - t.norm();
        e.l1_real += dr.abs();
        e.l1_imag += di.abs();
        e.l1_abs += da.abs();
        e.mse_real += dr * dr;
        e.mse_imag += di * di;
        e.mse_abs += da * da;
    }
    e.l1_real /= n;
    e.l1_imag /= n;
    e.l1_abs /= n;
    e.mse_real /= n;
    e.mse_imag /= n;
    e.mse_abs /= n;
    e
}

#[derive(Debug, Clone, Serialize)]
pub struct NovelViewReport {
    pub n_bins: usize,
    /// Beam axis never enters the field bounds; the trace is likely zero.
    pub outside_field: bool,
    pub pred_energy: f64,
    /// Errors against the supplied ground truth.
    pub vs_truth: Option<ChannelErrors>,
    /// Same errors for the all-zero predictor, the floor any useful model
    /// must beat.
    pub zero_baseline: Option<ChannelErrors>,
}

/// Boresight-ray / axis-aligned-box slab test.
fn ray_hits_bbox(origin: Vec3, dir: Vec3, bbox: &crate::math::Aabb) -> bool {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let (o, d, lo, hi) = match axis {
            0 => (origin.x, dir.x, bbox.min.x, bbox.max.x),
            1 => (origin.y, dir.y, bbox.min.y, bbox.max.y),
            _ => (origin.z, dir.z, bbox.min.z, bbox.max.z),
        };
        if d.abs() < 1e-300 {
            if o < lo || o > hi {
                return false;
            }
            continue;
        }
        let (a, b) = ((lo - o) / d, (hi - o) / d);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Checkpoint + pose -> synthesized complex trace (single-pose container),
/// with error channels against optional ground truth.
pub fn novel_view_stage(
    cfg: &RunConfig,
    ckpt_path: impl AsRef<Path>,
    pose: &SensorPose,
    n_bins: usize,
    f_s: f64,
    c: f64,
    out_trace: Option<&Path>,
    truth: Option<&[Complex64]>,
) -> Result<NovelViewReport, PipelineError> {
    pose.validate()?;
    if n_bins == 0 {
        return Err(stage_err("novel view needs at least one time bin"));
    }
    if let Some(t) = truth {
        if t.len() != n_bins {
            return Err(stage_err(format!(
                "ground truth has {} bins, expected {n_bins}",
                t.len()
            )));
        }
    }
    let ckpt = io::read_shsf(ckpt_path)?;
    let rcfg = RenderConfig {
        zeta: ckpt.zeta,
        f_s,
        c,
        ..cfg.render
    };
    let times: Vec<f64> = (0..n_bins).map(|k| k as f64 / f_s).collect();
    let pred = synthesize_novel_view(&ckpt.params, &rcfg, pose, &times)?;
    let outside_field = !ray_hits_bbox(pose.o_t, pose.boresight, &ckpt.params.cfg.bbox);
    if let Some(path) = out_trace {
        io::write_sast(
            path,
            &TransientContainer {
                f_s,
                c,
                aperture: crate::geometry::Aperture { poses: vec![*pose] },
                traces: TracePayload::Complex(vec![pred.samples.clone()]),
            },
        )?;
    }
    let (vs_truth, zero_baseline) = match truth {
        Some(t) => {
            let zeros = vec![Complex64::ZERO; t.len()];
            (
                Some(channel_errors(&pred.samples, t)),
                Some(channel_errors(&zeros, t)),
            )
        }
        None => (None, None),
    };
    Ok(NovelViewReport {
        n_bins,
        outside_field,
        pred_energy: pred.energy(),
        vs_truth,
        zero_baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::math::Aabb;

    fn small_cfg() -> RunConfig {
        let mut cfg = Profile::Simulated.defaults();
        cfg.sim.n_bins = 400;
        cfg.sim.rays_per_pose = 512;
        cfg.aperture.n_azimuth = 6;
        // Two ring heights pin z; one ring alone smears along the axis.
        cfg.aperture.heights = vec![0.2, 0.4];
        cfg.pulse.duration = 4.0e-4;
        cfg.deconv.iterations = 800;
        cfg.deconv.lr = 2e-3;
        cfg.field.grid = crate::neuralfield::HashGridConfig {
            n_levels: 2,
            base_res: 8,
            max_res: 16,
            features_per_level: 2,
            table_size_log2: 14,
            bbox: Aabb::new(Vec3::splat(-0.15), Vec3::splat(0.15)),
        };
        cfg.field.l_max = 1;
        cfg.render.n_rays = 16;
        cfg.train.iterations = 6;
        cfg.train.batch_poses = 2;
        cfg.train.bins_per_pose = 8;
        cfg.train.rays_per_bin = 8;
        cfg.train.checkpoint_every = 3;
        cfg.backproject.grid = crate::backprojection::GridSpec {
            origin: Vec3::splat(-0.15),
            spacing: 0.3 / 16.0,
            dims: [16, 16, 16],
        };
        cfg.extract.grid = cfg.backproject.grid;
        cfg.extract.cloud_samples = 500;
        cfg
    }

    // Off-axis: a sphere centered on the ring axis shares its symmetry and
    // the delay-and-sum image grows a coherent streak along that axis.
    const SPHERE_CENTER: Vec3 = Vec3 {
        x: 0.03,
        y: -0.02,
        z: 0.0,
    };

    fn write_sphere_scene(dir: &Path) -> PathBuf {
        let path = dir.join("scene.json");
        std::fs::write(
            &path,
            r#"{ "objects": [ { "shape": { "sphere": { "center": {"x":0.03,"y":-0.02,"z":0}, "radius": 0.02, "n_lat": 12, "n_lon": 24 } }, "reflectivity": 0.9 } ] }"#,
        )
        .unwrap();
        path
    }

    #[test]
    fn stages_chain_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = small_cfg();
        let scene = write_sphere_scene(d);

        let raw = d.join("raw.sast");
        let sim = simulate(&cfg, &scene, &raw).unwrap();
        assert_eq!(sim.n_poses, 12);
        assert_eq!(sim.n_bins, 400);
        assert!(sim.total_energy > 0.0, "sphere should reflect something");

        // Stage mismatch is loud in both directions.
        let err = train_stage(&cfg, &raw, d.join("x.shsf"), None).unwrap_err();
        assert!(matches!(err, PipelineError::Stage(_)), "got {err:?}");

        let dec = d.join("dec.sast");
        let ds = deconvolve(&cfg, &raw, &dec).unwrap();
        assert_eq!(ds.n_poses, 12);
        assert!(
            ds.mean_residual_fraction < 0.2,
            "deconvolution should absorb most energy, residual {}",
            ds.mean_residual_fraction
        );
        let err = deconvolve(&cfg, &dec, d.join("y.sast")).unwrap_err();
        assert!(matches!(err, PipelineError::Stage(_)));

        let grid_path = d.join("bp.shsg");
        let cloud_path = d.join("bp.ply");
        let bp = backproject_stage(&cfg, &dec, &grid_path, Some(&cloud_path)).unwrap();
        assert!(bp.max_abs > 0.0);
        let argmax = bp.argmax.unwrap();
        assert!(
            (argmax - SPHERE_CENTER).norm() < 0.05,
            "backprojection peak {argmax:?} should be near the sphere"
        );
        assert!(io::read_shsg(&grid_path).is_ok());
        assert!(io::read_ply(&cloud_path).unwrap().len() > 0);

        let ckpt = d.join("field.shsf");
        let report_path = d.join("report.json");
        let report = train_stage(&cfg, &dec, &ckpt, Some(&report_path)).unwrap();
        assert_eq!(report.iterations_run, 6);
        assert!(!report.checkpoints.is_empty());
        assert!(report_path.exists());

        let stem = d.join("recon");
        let ex = extract_stage(&cfg, &ckpt, &stem).unwrap();
        assert!(ex.density_max > 0.0);
        assert_eq!(ex.meshes.len(), 1);
        assert!(ex.meshes[0].obj.exists());
        assert!(ex.meshes[0].ply.exists());
        assert!(ex.grid.exists());

        // Evaluating a cloud against itself is perfect.
        let truth_cloud = ex.meshes[0].ply.clone();
        if ex.meshes[0].cloud_points > 0 {
            let m = evaluate_stage(&cfg, &truth_cloud, &truth_cloud, Some(&d.join("m.json")))
                .unwrap();
            assert_eq!(m.chamfer, 0.0);
            assert_eq!(m.iou, 1.0);
            assert_eq!(m.f1, 1.0);
        }

        // Novel view at a training pose, judged against its own measurement.
        let cont = io::read_sast(&dec).unwrap();
        let truth = match &cont.traces {
            TracePayload::Complex(t) => t[0].clone(),
            _ => unreachable!(),
        };
        let nv = novel_view_stage(
            &cfg,
            &ckpt,
            &cont.aperture.poses[0],
            truth.len(),
            cont.f_s,
            cont.c,
            Some(&d.join("nv.sast")),
            Some(&truth),
        )
        .unwrap();
        assert!(!nv.outside_field);
        assert!(nv.vs_truth.is_some());
        let back = io::read_sast(d.join("nv.sast")).unwrap();
        assert_eq!(back.n_poses(), 1);
        assert_eq!(back.n_bins(), truth.len());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let mut cfg = small_cfg();
        cfg.sim.snr_db = Some(20.0);
        let scene = write_sphere_scene(d);

        let run = |tag: &str| -> Vec<Vec<u8>> {
            let raw = d.join(format!("{tag}-raw.sast"));
            let dec = d.join(format!("{tag}-dec.sast"));
            let ckpt = d.join(format!("{tag}-f.shsf"));
            let rep = d.join(format!("{tag}-rep.json"));
            simulate(&cfg, &scene, &raw).unwrap();
            deconvolve(&cfg, &raw, &dec).unwrap();
            train_stage(&cfg, &dec, &ckpt, Some(&rep)).unwrap();
            [&raw, &dec, &ckpt, &rep]
                .iter()
                .map(|p| std::fs::read(p).unwrap())
                .collect()
        };
        assert_eq!(run("a"), run("b"));
    }

    #[test]
    fn novel_view_zero_field_matches_zero_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = small_cfg();
        let mut params =
            FieldParams::init(cfg.field.grid, cfg.field.l_max, 3).unwrap();
        params.data.fill(0.0);
        let ckpt_path = d.join("zero.shsf");
        io::write_shsf(
            &ckpt_path,
            &FieldCheckpoint {
                params,
                zeta: cfg.train.zeta,
            },
        )
        .unwrap();
        let pose = SensorPose {
            o_t: Vec3::new(0.4, 0.0, 0.3),
            o_r: Vec3::new(0.4, 0.0, 0.3),
            boresight: (Vec3::ZERO - Vec3::new(0.4, 0.0, 0.3)).normalize(),
            beam_halfangle: 0.3,
        };
        let truth: Vec<Complex64> = (0..50)
            .map(|k| Complex64::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()))
            .collect();
        let nv = novel_view_stage(&cfg, &ckpt_path, &pose, 50, 50_000.0, 343.0, None, Some(&truth))
            .unwrap();
        assert_eq!(nv.pred_energy, 0.0);
        let vs = nv.vs_truth.unwrap();
        let zero = nv.zero_baseline.unwrap();
        assert_eq!(vs.l1_real, zero.l1_real);
        assert_eq!(vs.mse_abs, zero.mse_abs);

        // A pose aimed away from the field bounds is flagged, not fatal.
        let away = SensorPose {
            boresight: Vec3::new(0.0, 0.0, 1.0),
            ..pose
        };
        let nv = novel_view_stage(&cfg, &ckpt_path, &away, 10, 50_000.0, 343.0, None, None).unwrap();
        assert!(nv.outside_field);
    }
}

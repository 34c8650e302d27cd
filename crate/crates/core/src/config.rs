//! Run configuration: one JSON document covering every pipeline stage.
//!
//! Resolution order is profile defaults -> user config file -> individual
//! flag overrides (applied by the caller). The config file is a partial
//! overlay: only the keys it names change, everything else keeps the
//! profile's value. Unknown keys anywhere are rejected.
//!
//! `f_s` and `c` live in `sim` and `render` for generation; stages that read
//! a transient container take both from the file instead, so downstream
//! configs cannot contradict recorded data.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backprojection::{GridSpec, Interp};
use crate::geometry::Aperture;
use crate::io::{self, IoError};
use crate::math::{Aabb, Vec3};
use crate::meshmetrics::ChamferKind;
use crate::neuralfield::{HashGridConfig, ParamLayout};
use crate::renderer::RenderConfig;
use crate::signal::{lfm_chirp, DeconvConfig, Pulse, SignalError};
use crate::simulator::{make_circular_aperture, subsample_aperture, SimConfig, SimError};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Named defaults. `simulated` fits clean synthetic data (data term only);
/// `airsas-like` adds the sparsity/smoothness regularizers and 20 dB noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Simulated,
    AirsasLike,
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Profile, String> {
        match s {
            "simulated" => Ok(Profile::Simulated),
            "airsas-like" => Ok(Profile::AirsasLike),
            other => Err(format!(
                "unknown profile {other:?} (expected simulated or airsas-like)"
            )),
        }
    }
}

/// Transmit waveform: an LFM chirp `f0 .. f0 + bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    pub f0: f64,
    pub bandwidth: f64,
    pub duration: f64,
    pub tukey_ratio: f64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        PulseConfig {
            f0: 10_000.0,
            bandwidth: 20_000.0,
            duration: 1.0e-3,
            tukey_ratio: 0.25,
        }
    }
}

impl PulseConfig {
    pub fn build(&self, f_s: f64) -> Result<Pulse, SignalError> {
        lfm_chirp(self.f0, self.bandwidth, self.duration, f_s, self.tukey_ratio)
    }
}

/// Circular-ring measurement trajectory (one ring per entry of `heights`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApertureConfig {
    pub radius: f64,
    pub n_azimuth: usize,
    pub heights: Vec<f64>,
    pub look_at: Vec3,
    pub beam_halfangle: f64,
    /// Receiver displacement from the transmitter; None is monostatic.
    pub rx_offset: Option<Vec3>,
    /// Keep only this fraction of poses (uniformly at random) when set.
    pub subsample: Option<f64>,
    pub subsample_seed: u64,
}

impl Default for ApertureConfig {
    fn default() -> Self {
        ApertureConfig {
            radius: 0.45,
            n_azimuth: 120,
            heights: vec![0.35],
            look_at: Vec3::ZERO,
            beam_halfangle: PI / 8.0,
            rx_offset: None,
            subsample: None,
            subsample_seed: 0,
        }
    }
}

impl ApertureConfig {
    pub fn build(&self) -> Result<Aperture, SimError> {
        let ap = make_circular_aperture(
            self.radius,
            self.n_azimuth,
            &self.heights,
            self.look_at,
            self.beam_halfangle,
            self.rx_offset,
        )?;
        match self.subsample {
            Some(f) => subsample_aperture(&ap, f, self.subsample_seed),
            None => Ok(ap),
        }
    }
}

/// Field shape: hash-grid encoding plus the spherical-harmonic degree of the
/// per-point scattering function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub l_max: usize,
    pub init_seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid: HashGridConfig {
                n_levels: 3,
                base_res: 8,
                max_res: 32,
                features_per_level: 2,
                table_size_log2: 16,
                bbox: Aabb::new(Vec3::splat(-0.3), Vec3::splat(0.3)),
            },
            l_max: 3,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackprojectConfig {
    pub grid: GridSpec,
    pub interp: Interp,
    /// Point-cloud cut as a fraction of the image maximum, in (0, 1).
    pub threshold: f64,
}

impl Default for BackprojectConfig {
    fn default() -> Self {
        BackprojectConfig {
            grid: default_grid(),
            interp: Interp::Linear,
            threshold: 0.5,
        }
    }
}

fn default_grid() -> GridSpec {
    GridSpec {
        origin: Vec3::splat(-0.3),
        spacing: 0.6 / 64.0,
        dims: [64, 64, 64],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub grid: GridSpec,
    /// Isosurface levels as fractions of the density-grid maximum.
    pub iso_fractions: Vec<f64>,
    /// Points sampled from each extracted mesh.
    pub cloud_samples: usize,
    pub sample_seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            grid: default_grid(),
            iso_fractions: vec![0.5],
            cloud_samples: 20_000,
            sample_seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Occupancy voxel size; None derives reference-bbox-diagonal / 64.
    pub voxel_size: Option<f64>,
    /// Precision/recall distance cut; None derives 2x the voxel size.
    pub tau: Option<f64>,
    pub chamfer: ChamferKind,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            voxel_size: None,
            tau: None,
            chamfer: ChamferKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub pulse: PulseConfig,
    pub aperture: ApertureConfig,
    pub deconv: DeconvConfig,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub backproject: BackprojectConfig,
    pub extract: ExtractConfig,
    pub metrics: MetricsConfig,
}

impl Profile {
    pub fn defaults(self) -> RunConfig {
        let mut cfg = RunConfig::default();
        match self {
            Profile::Simulated => {
                cfg.train.lambdas = [1.0, 0.0, 0.0, 0.0, 0.0];
                cfg.sim.snr_db = None;
            }
            Profile::AirsasLike => {
                cfg.train.lambdas = [1.0, 1e-5, 1e-5, 1e-5, 1e-5];
                cfg.sim.snr_db = Some(20.0);
            }
        }
        cfg
    }
}

impl RunConfig {
    /// Cross-field checks that serde cannot express. Stages validate their
    /// own inputs again at run time; this catches config mistakes up front.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: String| ConfigError::Invalid(e);
        self.sim.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        self.backproject.grid.validate().map_err(|e| bad(e.to_string()))?;
        self.extract.grid.validate().map_err(|e| bad(e.to_string()))?;
        ParamLayout::new(&self.field.grid, self.field.l_max).map_err(|e| bad(e.to_string()))?;
        self.pulse.build(self.sim.f_s).map_err(|e| bad(e.to_string()))?;
        if !(self.backproject.threshold > 0.0 && self.backproject.threshold < 1.0) {
            return Err(bad(format!(
                "backproject.threshold {} outside (0, 1)",
                self.backproject.threshold
            )));
        }
        if self.extract.iso_fractions.is_empty() {
            return Err(bad("extract.iso_fractions must not be empty".into()));
        }
        for &f in &self.extract.iso_fractions {
            if !(f > 0.0 && f < 1.0) {
                return Err(bad(format!("extract iso fraction {f} outside (0, 1)")));
            }
        }
        if self.extract.cloud_samples == 0 {
            return Err(bad("extract.cloud_samples must be >= 1".into()));
        }
        for (name, v) in [
            ("metrics.voxel_size", self.metrics.voxel_size),
            ("metrics.tau", self.metrics.tau),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(bad(format!("{name} must be positive (got {v})")));
                }
            }
        }
        if let Some(f) = self.aperture.subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad(format!("aperture.subsample {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Overlays `over` onto `base`: objects merge key by key, anything else
/// (including arrays) replaces wholesale.
fn deep_merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Object(mut b), Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => deep_merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, over) => over,
    }
}

/// Profile defaults overlaid with an optional partial JSON config file.
/// The result is validated; unknown keys fail deserialization.
pub fn resolve(profile: Profile, config_path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let base = serde_json::to_value(profile.defaults())
        .expect("profile defaults always serialize");
    let merged = match config_path {
        None => base,
        Some(path) => {
            let user: Value = io::read_json(path)?;
            deep_merge(base, user)
        }
    };
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| {
        ConfigError::Invalid(match config_path {
            Some(p) => format!("{}: {e}", p.display()),
            None => e.to_string(),
        })
    })?;
    cfg.validate()?;
    Ok(cfg)
}

//! On-disk formats for pipeline stages.
//!
//! Three little-endian binary containers carry data between stages:
//! `.sast` (per-pose transient traces, real or complex), `.shsg` (complex
//! voxel grids), and `.shsf` (field checkpoints). Meshes travel as Wavefront
//! OBJ, point clouds as ASCII PLY, and scenes/configs/reports as JSON.
//! Every reader checks magic, version, and the exact byte count implied by
//! the header, so truncated or padded files fail loudly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aperture, SensorPose};
use crate::math::{Aabb, Vec3};
use crate::meshmetrics::{PointCloud, TriMeshOut};
use crate::neuralfield::{FieldParams, HashGridConfig};
use crate::signal::AnalyticSignal;
use crate::simulator::{box_mesh, square_facet, uv_sphere, Scene, SceneObject, SimError, TriMesh};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: unsupported version {got} (this build reads version {expected})")]
    BadVersion { path: String, got: u32, expected: u32 },
    #[error("{path}: expected {expected} bytes, found {got}")]
    BadLength { path: String, expected: u64, got: u64 },
    #[error("{path}: {what}")]
    Malformed { path: String, what: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Scene(#[from] SimError),
}

impl IoError {
    fn malformed(path: &Path, what: impl Into<String>) -> IoError {
        IoError::Malformed {
            path: path.display().to_string(),
            what: what.into(),
        }
    }
}

const SAST_VERSION: u32 = 1;
const SHSG_VERSION: u32 = 1;
const SHSF_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Little-endian encode/decode helpers.

struct Enc(Vec<u8>);

impl Enc {
    fn new() -> Enc {
        Enc(Vec::new())
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: Vec3) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Dec<'a> {
        Dec { buf, off: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.off.checked_add(n).ok_or_else(|| IoError::BadLength {
            path: self.path.display().to_string(),
            expected: u64::MAX,
            got: self.buf.len() as u64,
        })?;
        if end > self.buf.len() {
            return Err(IoError::BadLength {
                path: self.path.display().to_string(),
                expected: end as u64,
                got: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.off..end];
        self.off = end;
        Ok(s)
    }

    fn magic(&mut self, m: &'static str) -> Result<(), IoError> {
        if self.take(4)? != m.as_bytes() {
            return Err(IoError::BadMagic {
                path: self.path.display().to_string(),
                expected: m,
            });
        }
        Ok(())
    }

    fn version(&mut self, expected: u32) -> Result<(), IoError> {
        let got = self.u32()?;
        if got != expected {
            return Err(IoError::BadVersion {
                path: self.path.display().to_string(),
                got,
                expected,
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<Vec3, IoError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    /// Enforces that the file is exactly `expected` bytes long.
    fn expect_total(&self, expected: u64) -> Result<(), IoError> {
        if self.buf.len() as u64 != expected {
            return Err(IoError::BadLength {
                path: self.path.display().to_string(),
                expected,
                got: self.buf.len() as u64,
            });
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// .sast — per-pose transient traces.

/// Traces for every pose of an aperture, all the same length. Raw simulator
/// or hardware output is real; deconvolution turns it complex.
#[derive(Debug, Clone, PartialEq)]
pub enum TracePayload {
    Real(Vec<Vec<f64>>),
    Complex(Vec<Vec<Complex64>>),
}

impl TracePayload {
    pub fn is_complex(&self) -> bool {
        matches!(self, TracePayload::Complex(_))
    }

    pub fn n_traces(&self) -> usize {
        match self {
            TracePayload::Real(t) => t.len(),
            TracePayload::Complex(t) => t.len(),
        }
    }

    fn n_bins(&self) -> Option<usize> {
        match self {
            TracePayload::Real(t) => t.first().map(Vec::len),
            TracePayload::Complex(t) => t.first().map(Vec::len),
        }
    }
}

/// One pipeline stage's worth of measurements: the aperture it was recorded
/// on plus one trace per pose, starting at t = 0 and sampled at `f_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientContainer {
    pub f_s: f64,
    pub c: f64,
    pub aperture: Aperture,
    pub traces: TracePayload,
}

impl TransientContainer {
    pub fn n_poses(&self) -> usize {
        self.aperture.len()
    }

    pub fn n_bins(&self) -> usize {
        self.traces.n_bins().unwrap_or(0)
    }

    fn check_consistent(&self, path: &Path) -> Result<(), IoError> {
        if self.traces.n_traces() != self.aperture.len() {
            return Err(IoError::malformed(
                path,
                format!(
                    "{} poses but {} traces",
                    self.aperture.len(),
                    self.traces.n_traces()
                ),
            ));
        }
        let n = self.n_bins();
        let uniform = match &self.traces {
            TracePayload::Real(t) => t.iter().all(|tr| tr.len() == n),
            TracePayload::Complex(t) => t.iter().all(|tr| tr.len() == n),
        };
        if !uniform {
            return Err(IoError::malformed(path, "traces have differing lengths"));
        }
        Ok(())
    }

    /// View of a complex container as per-pose analytic signals (t0 = 0).
    pub fn analytic_measurements(&self) -> Option<Vec<AnalyticSignal>> {
        match &self.traces {
            TracePayload::Complex(traces) => Some(
                traces
                    .iter()
                    .map(|tr| AnalyticSignal {
                        samples: tr.clone(),
                        f_s: self.f_s,
                        t0: 0.0,
                    })
                    .collect(),
            ),
            TracePayload::Real(_) => None,
        }
    }
}

pub fn write_sast(path: impl AsRef<Path>, c: &TransientContainer) -> Result<(), IoError> {
    let path = path.as_ref();
    c.check_consistent(path)?;
    let n_poses = c.aperture.len();
    let n_bins = c.n_bins();
    let mut e = Enc::new();
    e.0.extend_from_slice(b"SAST");
    e.u32(SAST_VERSION);
    e.f64(c.f_s);
    e.f64(c.c);
    e.u32(n_poses as u32);
    e.u32(n_bins as u32);
    e.u8(c.traces.is_complex() as u8);
    for p in &c.aperture.poses {
        e.vec3(p.o_t);
        e.vec3(p.o_r);
        e.vec3(p.boresight);
        e.f64(p.beam_halfangle);
    }
    match &c.traces {
        TracePayload::Real(traces) => {
            for tr in traces {
                for &v in tr {
                    e.f32(v as f32);
                }
            }
        }
        TracePayload::Complex(traces) => {
            for tr in traces {
                for v in tr {
                    e.f32(v.re as f32);
                    e.f32(v.im as f32);
                }
            }
        }
    }
    write_atomic(path, &e.0)
}

pub fn read_sast(path: impl AsRef<Path>) -> Result<TransientContainer, IoError> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut d = Dec::new(&buf, path);
    d.magic("SAST")?;
    d.version(SAST_VERSION)?;
    let f_s = d.f64()?;
    let c = d.f64()?;
    let n_poses = d.u32()? as u64;
    let n_bins = d.u32()? as u64;
    let complex = match d.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(IoError::malformed(
                path,
                format!("complex flag must be 0 or 1, got {other}"),
            ))
        }
    };
    let width = if complex { 8 } else { 4 };
    d.expect_total(33 + n_poses * 80 + n_poses * n_bins * width)?;

    let mut poses = Vec::with_capacity(n_poses as usize);
    for _ in 0..n_poses {
        poses.push(SensorPose {
            o_t: d.vec3()?,
            o_r: d.vec3()?,
            boresight: d.vec3()?,
            beam_halfangle: d.f64()?,
        });
    }
    let traces = if complex {
        let mut all = Vec::with_capacity(n_poses as usize);
        for _ in 0..n_poses {
            let mut tr = Vec::with_capacity(n_bins as usize);
            for _ in 0..n_bins {
                let re = d.f32()? as f64;
                let im = d.f32()? as f64;
                tr.push(Complex64::new(re, im));
            }
            all.push(tr);
        }
        TracePayload::Complex(all)
    } else {
        let mut all = Vec::with_capacity(n_poses as usize);
        for _ in 0..n_poses {
            let mut tr = Vec::with_capacity(n_bins as usize);
            for _ in 0..n_bins {
                tr.push(d.f32()? as f64);
            }
            all.push(tr);
        }
        TracePayload::Real(all)
    };
    Ok(TransientContainer {
        f_s,
        c,
        aperture: Aperture { poses },
        traces,
    })
}

// ---------------------------------------------------------------------------
// .shsg — complex voxel grids.

use crate::backprojection::{GridSpec, VoxelGrid};

pub fn write_shsg(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut e = Enc::new();
    e.0.extend_from_slice(b"SHSG");
    e.u32(SHSG_VERSION);
    for d in grid.spec.dims {
        e.u32(d as u32);
    }
    e.vec3(grid.spec.origin);
    e.f64(grid.spec.spacing);
    for v in &grid.values {
        e.f32(v.re as f32);
        e.f32(v.im as f32);
    }
    write_atomic(path, &e.0)
}

pub fn read_shsg(path: impl AsRef<Path>) -> Result<VoxelGrid, IoError> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut d = Dec::new(&buf, path);
    d.magic("SHSG")?;
    d.version(SHSG_VERSION)?;
    let dims = [d.u32()? as usize, d.u32()? as usize, d.u32()? as usize];
    let origin = d.vec3()?;
    let spacing = d.f64()?;
    let len = dims[0] as u64 * dims[1] as u64 * dims[2] as u64;
    d.expect_total(52 + len * 8)?;
    let mut values = Vec::with_capacity(len as usize);
    for _ in 0..len {
        let re = d.f32()? as f64;
        let im = d.f32()? as f64;
        values.push(Complex64::new(re, im));
    }
    let spec = GridSpec {
        origin,
        spacing,
        dims,
    };
    VoxelGrid::from_values(spec, values)
        .map_err(|e| IoError::malformed(path, format!("invalid grid: {e}")))
}

// ---------------------------------------------------------------------------
// .shsf — field checkpoints.

/// A trained field with the density scale it was optimized under, so later
/// stages extract geometry at the same scale.
#[derive(Debug, Clone)]
pub struct FieldCheckpoint {
    pub params: FieldParams,
    pub zeta: f64,
}

pub fn write_shsf(path: impl AsRef<Path>, ckpt: &FieldCheckpoint) -> Result<(), IoError> {
    let path = path.as_ref();
    let cfg = &ckpt.params.cfg;
    let mut e = Enc::new();
    e.0.extend_from_slice(b"SHSF");
    e.u32(SHSF_VERSION);
    e.u32(cfg.n_levels as u32);
    e.u32(cfg.base_res as u32);
    e.u32(cfg.max_res as u32);
    e.u32(cfg.features_per_level as u32);
    e.u32(cfg.table_size_log2 as u32);
    e.vec3(cfg.bbox.min);
    e.vec3(cfg.bbox.max);
    e.u32(ckpt.params.l_max as u32);
    e.f64(ckpt.zeta);
    e.u64(ckpt.params.data.len() as u64);
    for &v in &ckpt.params.data {
        e.f64(v);
    }
    write_atomic(path, &e.0)
}

pub fn read_shsf(path: impl AsRef<Path>) -> Result<FieldCheckpoint, IoError> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut d = Dec::new(&buf, path);
    d.magic("SHSF")?;
    d.version(SHSF_VERSION)?;
    let cfg = HashGridConfig {
        n_levels: d.u32()? as usize,
        base_res: d.u32()? as usize,
        max_res: d.u32()? as usize,
        features_per_level: d.u32()? as usize,
        table_size_log2: d.u32()? as usize,
        bbox: Aabb::new(d.vec3()?, d.vec3()?),
    };
    let l_max = d.u32()? as usize;
    let zeta = d.f64()?;
    let count = d.u64()?;
    d.expect_total(96 + count * 8)?;
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        data.push(d.f64()?);
    }
    let params = FieldParams::from_parts(cfg, l_max, data)
        .map_err(|e| IoError::malformed(path, format!("invalid checkpoint: {e}")))?;
    Ok(FieldCheckpoint { params, zeta })
}

// ---------------------------------------------------------------------------
// Wavefront OBJ.

pub fn write_obj(path: impl AsRef<Path>, mesh: &TriMeshOut) -> Result<(), IoError> {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Reads vertices and faces; `vt`/`vn`/groups/materials are skipped and
/// polygons are fan-triangulated. Indices may be negative (relative).
pub fn read_obj(path: impl AsRef<Path>) -> Result<TriMesh, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let bad = |what: &str| IoError::malformed(path, format!("line {}: {what}", ln + 1));
        match it.next() {
            Some("v") => {
                let mut coord = |_: ()| -> Result<f64, IoError> {
                    it.next()
                        .ok_or_else(|| bad("vertex needs 3 coordinates"))?
                        .parse::<f64>()
                        .map_err(|e| bad(&format!("bad coordinate: {e}")))
                };
                let (x, y, z) = (coord(())?, coord(())?, coord(())?);
                vertices.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|e| bad(&format!("bad face index {tok:?}: {e}")))?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        return Err(bad("face index 0 is invalid"));
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(bad(&format!("face index {i} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(bad("face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces).map_err(|e| IoError::malformed(path, format!("{e}")))
}

// ---------------------------------------------------------------------------
// Scene descriptions.

fn default_reflectivity() -> f64 {
    1.0
}
fn default_sphere_lat() -> usize {
    24
}
fn default_sphere_lon() -> usize {
    48
}

/// Shape primitives a JSON scene can instantiate; `obj` pulls in a mesh file
/// (path relative to the scene file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Sphere {
        center: Vec3,
        radius: f64,
        #[serde(default = "default_sphere_lat")]
        n_lat: usize,
        #[serde(default = "default_sphere_lon")]
        n_lon: usize,
    },
    Box {
        min: Vec3,
        max: Vec3,
    },
    Plate {
        center: Vec3,
        normal: Vec3,
        halfwidth: f64,
    },
    Obj {
        path: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: ShapeSpec,
    #[serde(default = "default_reflectivity")]
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Scene, IoError> {
        let mut objects = Vec::with_capacity(self.objects.len());
        for spec in &self.objects {
            let mesh = match &spec.shape {
                ShapeSpec::Sphere {
                    center,
                    radius,
                    n_lat,
                    n_lon,
                } => uv_sphere(*center, *radius, *n_lat, *n_lon),
                ShapeSpec::Box { min, max } => box_mesh(&Aabb::new(*min, *max)),
                ShapeSpec::Plate {
                    center,
                    normal,
                    halfwidth,
                } => square_facet(*center, *normal, *halfwidth),
                ShapeSpec::Obj { path } => read_obj(base_dir.join(path))?,
            };
            objects.push(SceneObject {
                mesh,
                reflectivity: spec.reflectivity,
            });
        }
        Ok(Scene::new(objects)?)
    }
}

/// Loads a scene from either a JSON scene description or a bare OBJ mesh
/// (reflectivity 1), decided by file extension.
pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene, IoError> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let spec: SceneSpec = read_json(path)?;
            spec.build(path.parent().unwrap_or(Path::new(".")))
        }
        _ => {
            let mesh = read_obj(path)?;
            Ok(Scene::new(vec![SceneObject {
                mesh,
                reflectivity: 1.0,
            }])?)
        }
    }
}

// ---------------------------------------------------------------------------
// ASCII PLY point clouds.

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.points.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str("end_header\n");
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |what: &str| IoError::malformed(path, what.to_string());
    if lines.next().map(str::trim) != Some("ply") {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: "ply",
        });
    }
    let mut n_vertices: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return Err(bad("only ascii 1.0 PLY is supported")),
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse().map_err(|_| bad("bad vertex count"))?);
            }
            ["element", ..] => return Err(bad("only vertex elements are supported")),
            ["property", _ty, name] => props.push(name.to_string()),
            ["end_header"] => break,
            [] => {}
            _ => return Err(bad(&format!("unrecognized header line {line:?}"))),
        }
    }
    let n = n_vertices.ok_or_else(|| bad("header missing 'element vertex'"))?;
    if props != ["x", "y", "z"] {
        return Err(bad("vertex properties must be exactly x, y, z"));
    }
    let mut points = Vec::with_capacity(n);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coord = |_: ()| -> Result<f64, IoError> {
            it.next()
                .ok_or_else(|| bad("vertex line needs 3 coordinates"))?
                .parse::<f64>()
                .map_err(|e| bad(&format!("bad coordinate: {e}")))
        };
        let (x, y, z) = (coord(())?, coord(())?, coord(())?);
        points.push(Vec3::new(x, y, z));
    }
    if points.len() != n {
        return Err(bad(&format!(
            "header promised {n} vertices, file has {}",
            points.len()
        )));
    }
    Ok(PointCloud { points })
}

// ---------------------------------------------------------------------------
// JSON.

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

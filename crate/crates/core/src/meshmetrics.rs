//! Geometric evaluation: density-grid sampling, marching-cubes isosurface
//! extraction, and point-cloud comparison metrics (chamfer distance, voxel
//! IoU, precision/recall/F1).

mod mc_tables;

use crate::backprojection::GridSpec;
use crate::math::Vec3;
use crate::neuralfield::{density, FieldParams};
use crate::rng::keyed_rng;
use mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Unordered set of 3D points.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    pub fn bounds(&self) -> crate::math::Aabb {
        let mut b = crate::math::Aabb::empty();
        for &p in &self.points {
            b.extend(p);
        }
        b
    }
}

/// Extracted isosurface; not necessarily manifold.
#[derive(Debug, Clone, Default)]
pub struct TriMeshOut {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMeshOut {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// Real scalar volume on the same layout as [`GridSpec`] (z fastest).
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.index(i, j, k)]
    }
}

/// Attenuation density sampled at every voxel center. Values equal
/// pointwise [`density`] calls exactly.
pub fn eval_density_grid(params: &FieldParams, zeta: f64, spec: &GridSpec) -> ScalarGrid {
    let values: Vec<f64> = (0..spec.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = spec.unravel(idx);
            density(params, spec.center(i, j, k), zeta)
        })
        .collect();
    ScalarGrid { spec: *spec, values }
}

/// Cube corner offsets in (di, dj, dk), classic ordering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs of the 12 cube edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

fn edge_point(iso: f64, p1: Vec3, p2: Vec3, v1: f64, v2: f64) -> Vec3 {
    if (v2 - v1).abs() < 1e-30 {
        return (p1 + p2) * 0.5;
    }
    let t = ((iso - v1) / (v2 - v1)).clamp(0.0, 1.0);
    p1 + (p2 - p1) * t
}

/// Standard marching cubes over voxel centers; vertices by linear
/// interpolation along crossing edges, shared across neighboring cells.
/// An iso level outside the data range yields an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriMeshOut {
    let [nx, ny, nz] = grid.spec.dims;
    let mut mesh = TriMeshOut::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    // Vertex per global edge: key = (lattice coords of lower corner, axis).
    let mut edge_vertex: HashMap<(usize, usize, usize, u8), u32> = HashMap::new();

    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let mut vals = [0.0f64; 8];
                let mut pts = [Vec3::ZERO; 8];
                let mut cube = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    let (ci, cj, ck) = (i + off[0], j + off[1], k + off[2]);
                    vals[c] = grid.at(ci, cj, ck);
                    pts[c] = grid.spec.center(ci, cj, ck);
                    if vals[c] < iso {
                        cube |= 1 << c;
                    }
                }
                let edge_mask = EDGE_TABLE[cube];
                if edge_mask == 0 {
                    continue;
                }
                let mut cell_vertex = [0u32; 12];
                for (e, pair) in EDGES.iter().enumerate() {
                    if edge_mask & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (pair[0], pair[1]);
                    let ca = [i + CORNERS[a][0], j + CORNERS[a][1], k + CORNERS[a][2]];
                    let cb = [i + CORNERS[b][0], j + CORNERS[b][1], k + CORNERS[b][2]];
                    let lo = [ca[0].min(cb[0]), ca[1].min(cb[1]), ca[2].min(cb[2])];
                    let axis = (0..3).find(|&ax| ca[ax] != cb[ax]).unwrap() as u8;
                    let key = (lo[0], lo[1], lo[2], axis);
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let v = edge_point(iso, pts[a], pts[b], vals[a], vals[b]);
                        mesh.vertices.push(v);
                        (mesh.vertices.len() - 1) as u32
                    });
                    cell_vertex[e] = id;
                }
                let tri_row = &TRIANGLE_TABLE[cube];
                let mut t = 0;
                while tri_row[t] >= 0 {
                    let f = [
                        cell_vertex[tri_row[t] as usize],
                        cell_vertex[tri_row[t + 1] as usize],
                        cell_vertex[tri_row[t + 2] as usize],
                    ];
                    if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                        mesh.faces.push(f);
                    }
                    t += 3;
                }
            }
        }
    }
    mesh
}

/// Exact nearest-neighbor structure over a fixed point set.
struct KdTree<'a> {
    pts: &'a [Vec3],
    /// (point index, split axis, left child, right child); -1 = none.
    nodes: Vec<(u32, u8, i32, i32)>,
    root: i32,
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [Vec3]) -> KdTree<'a> {
        let mut idx: Vec<u32> = (0..pts.len() as u32).collect();
        let mut nodes = Vec::with_capacity(pts.len());
        let root = Self::build_rec(pts, &mut idx, 0, &mut nodes);
        KdTree { pts, nodes, root }
    }

    fn build_rec(pts: &[Vec3], idx: &mut [u32], depth: usize, nodes: &mut Vec<(u32, u8, i32, i32)>) -> i32 {
        if idx.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            pts[a as usize]
                .component(axis as usize)
                .partial_cmp(&pts[b as usize].component(axis as usize))
                .unwrap()
        });
        let point = idx[mid];
        let id = nodes.len() as i32;
        nodes.push((point, axis, -1, -1));
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(pts, lo, depth + 1, nodes);
        let right = Self::build_rec(pts, hi, depth + 1, nodes);
        nodes[id as usize].2 = left;
        nodes[id as usize].3 = right;
        id
    }

    /// Squared distance to the nearest stored point.
    fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best
    }

    fn search(&self, node: i32, q: Vec3, best: &mut f64) {
        if node < 0 {
            return;
        }
        let (pi, axis, left, right) = self.nodes[node as usize];
        let p = self.pts[pi as usize];
        let d = (q - p).norm_sq();
        if d < *best {
            *best = d;
        }
        let delta = q.component(axis as usize) - p.component(axis as usize);
        let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
        self.search(near, q, best);
        if delta * delta < *best {
            self.search(far, q, best);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferKind {
    /// Mean squared nearest-neighbor distance, both directions summed (m²).
    #[default]
    Squared,
    /// Mean unsquared distance form (m).
    Absolute,
}

/// Symmetric chamfer distance between two non-empty clouds.
pub fn chamfer(a: &PointCloud, b: &PointCloud, kind: ChamferKind) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(MetricsError::InvalidArg("non-finite coordinates".into()));
    }
    let one_way = |from: &PointCloud, to: &PointCloud| -> f64 {
        let tree = KdTree::build(&to.points);
        let total: f64 = from
            .points
            .par_iter()
            .map(|&p| {
                let d2 = tree.nearest_sq(p);
                match kind {
                    ChamferKind::Squared => d2,
                    ChamferKind::Absolute => d2.sqrt(),
                }
            })
            .sum();
        total / from.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

fn voxel_key(p: Vec3, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Voxel IoU at `voxel_size` plus point-wise precision/recall/F1 at
/// distance threshold `tau`.
pub fn iou_precision_f1(
    a: &PointCloud,
    b: &PointCloud,
    voxel_size: f64,
    tau: f64,
) -> Result<(f64, f64, f64), MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    if !(voxel_size > 0.0) || !(tau > 0.0) {
        return Err(MetricsError::InvalidArg(
            "voxel_size and tau must be positive".into(),
        ));
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(MetricsError::InvalidArg("non-finite coordinates".into()));
    }
    let va: HashSet<_> = a.points.iter().map(|&p| voxel_key(p, voxel_size)).collect();
    let vb: HashSet<_> = b.points.iter().map(|&p| voxel_key(p, voxel_size)).collect();
    let inter = va.intersection(&vb).count();
    let union = va.len() + vb.len() - inter;
    let iou = inter as f64 / union as f64;

    let tau_sq = tau * tau;
    let tree_b = KdTree::build(&b.points);
    let hits_a = a
        .points
        .par_iter()
        .filter(|&&p| tree_b.nearest_sq(p) <= tau_sq)
        .count();
    let precision = hits_a as f64 / a.len() as f64;
    let tree_a = KdTree::build(&a.points);
    let hits_b = b
        .points
        .par_iter()
        .filter(|&&p| tree_a.nearest_sq(p) <= tau_sq)
        .count();
    let recall = hits_b as f64 / b.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((iou, precision, f1))
}

/// Area-weighted uniform surface sampling; deterministic under `seed`.
pub fn mesh_to_pointcloud(
    mesh: &TriMeshOut,
    n_samples: usize,
    seed: u64,
) -> Result<PointCloud, MetricsError> {
    if mesh.is_empty() {
        return Err(MetricsError::EmptyMesh);
    }
    if n_samples == 0 {
        return Err(MetricsError::InvalidArg("n_samples must be >= 1".into()));
    }
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        total += 0.5 * (b - a).cross(c - a).norm();
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(MetricsError::EmptyMesh);
    }
    let mut rng = keyed_rng(seed, &[0x6d65_7368]);
    let mut points = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let r = rng.random::<f64>() * total;
        let fi = cum.partition_point(|&c| c < r).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.faces[fi].map(|i| mesh.vertices[i as usize]);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push(a + (b - a) * u + (c - a) * v);
    }
    Ok(PointCloud { points })
}

/// All four evaluation numbers for a reconstructed cloud against a
/// reference cloud.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold_tau: f64,
    pub voxel_size: f64,
}

/// Voxel size and distance threshold derived from the reference cloud:
/// bounding-box diagonal / 64 and twice that, respectively.
pub fn suggested_thresholds(reference: &PointCloud) -> (f64, f64) {
    let diag = reference.bounds().diagonal();
    let voxel = if diag > 0.0 { diag / 64.0 } else { 1e-3 };
    (voxel, 2.0 * voxel)
}

/// Compares a reconstruction `a` against reference `b`.
pub fn evaluate_clouds(
    a: &PointCloud,
    b: &PointCloud,
    voxel_size: f64,
    tau: f64,
    kind: ChamferKind,
) -> Result<MetricReport, MetricsError> {
    let chamfer_val = chamfer(a, b, kind)?;
    let (iou, precision, f1) = iou_precision_f1(a, b, voxel_size, tau)?;
    // Recall falls out of precision and F1; recompute it directly instead.
    let tau_sq = tau * tau;
    let tree_a = KdTree::build(&a.points);
    let hits = b
        .points
        .iter()
        .filter(|&&p| tree_a.nearest_sq(p) <= tau_sq)
        .count();
    let recall = hits as f64 / b.len() as f64;
    Ok(MetricReport {
        chamfer: chamfer_val,
        iou,
        precision,
        recall,
        f1,
        threshold_tau: tau,
        voxel_size,
    })
}

//! Hand-constructible fields shared across test modules.

use crate::math::{Aabb, Vec3};
use crate::neuralfield::{level_resolution, FieldParams, HashGridConfig, ParamLayout};

/// All-dense grid so planted table values have strictly local support.
pub fn dense_cfg() -> HashGridConfig {
    HashGridConfig {
        n_levels: 4,
        base_res: 4,
        max_res: 16,
        features_per_level: 2,
        table_size_log2: 14,
        bbox: Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)),
    }
}

/// Field that is exactly zero except inside one cell of the finest level,
/// where the DC real channel rises to a trilinear bump; the MLP is
/// hand-wired to pass the summed features through ReLUs unchanged.
pub fn planted_blob(cfg: HashGridConfig, center: Vec3, amplitude: f64) -> FieldParams {
    let layout = ParamLayout::new(&cfg, 3).unwrap();
    let mut data = vec![0.0; layout.total];
    // W1 row 0 sums all input features; W2/W3 pass unit 0 through.
    for i in 0..layout.in_dim {
        data[layout.w1 + i] = 1.0;
    }
    data[layout.w2] = 1.0;
    data[layout.w3] = 1.0;
    let mut params = FieldParams::from_parts(cfg, 3, data).unwrap();

    // Plant the finest level's 8 corners around `center`.
    let level = params.cfg.n_levels - 1;
    let n = level_resolution(&params.cfg, level).unwrap();
    let f = params.cfg.features_per_level;
    let base = params.layout.level_offsets[level];
    let ext = params.cfg.bbox.extent();
    let rel = center - params.cfg.bbox.min;
    let cell = [
        ((rel.x / ext.x * n as f64).floor() as usize).min(n - 1),
        ((rel.y / ext.y * n as f64).floor() as usize).min(n - 1),
        ((rel.z / ext.z * n as f64).floor() as usize).min(n - 1),
    ];
    for c in 0..8usize {
        let (i, j, k) = (
            cell[0] + (c & 1),
            cell[1] + ((c >> 1) & 1),
            cell[2] + ((c >> 2) & 1),
        );
        let idx = (i * (n + 1) + j) * (n + 1) + k;
        params.data[base + idx * f] = amplitude;
    }
    params
}

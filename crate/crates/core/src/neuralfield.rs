//! Implicit volumetric field: multi-resolution hash encoding feeding a small
//! ReLU MLP that outputs complex spherical-harmonic coefficients per point.
//!
//! Parameters (all hash tables plus MLP weights) live in ONE flat `f64`
//! buffer described by a [`ParamLayout`]; gradients are dense buffers of the
//! same shape. The backward pass is hand-derived: a forward query records a
//! small context (corner indices/weights and pre-activations), and
//! `field_backward` replays it exactly. This pairs with the scalar tape in
//! [`crate::autodiff`] through the [`FieldCx`] trait: the rendering pipeline
//! treats a field query as an opaque differentiable primitive.

use crate::autodiff::{Cx, EvalCx, Tape, Var};
use crate::math::{Aabb, Vec3};
use crate::rng::keyed_rng;
use crate::shbasis::{self, ShCoeffs};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hidden width of the MLP (two hidden layers).
pub const HIDDEN: usize = 32;

const HASH_P2: u64 = 2_654_435_761;
const HASH_P3: u64 = 805_459_861;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid hash-grid config: {0}")]
    InvalidConfig(String),
    #[error("unsupported SH degree {0} (max {max})", max = shbasis::MAX_DEGREE)]
    UnsupportedDegree(usize),
    #[error("parameter buffer length {got} does not match layout ({expected})")]
    ParamLen { got: usize, expected: usize },
    #[error("non-finite gradients passed to the optimizer")]
    NonFiniteGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub n_levels: usize,
    pub base_res: usize,
    pub max_res: usize,
    pub features_per_level: usize,
    pub table_size_log2: usize,
    /// Spatial bounds the field is defined on; queries outside are clamped.
    pub bbox: Aabb,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            n_levels: 16,
            base_res: 16,
            max_res: 4096,
            features_per_level: 2,
            table_size_log2: 19,
            bbox: Aabb::new(Vec3::splat(-0.5), Vec3::splat(0.5)),
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.n_levels < 2 {
            return Err(FieldError::InvalidConfig(
                "need at least 2 resolution levels".into(),
            ));
        }
        if self.base_res < 2 || self.base_res >= self.max_res {
            return Err(FieldError::InvalidConfig(format!(
                "need 2 <= base_res < max_res (got {} .. {})",
                self.base_res, self.max_res
            )));
        }
        if ![1, 2, 4].contains(&self.features_per_level) {
            return Err(FieldError::InvalidConfig(format!(
                "features_per_level must be 1, 2 or 4 (got {})",
                self.features_per_level
            )));
        }
        if !(14..=22).contains(&self.table_size_log2) {
            return Err(FieldError::InvalidConfig(format!(
                "table_size_log2 must be in [14, 22] (got {})",
                self.table_size_log2
            )));
        }
        if !self.bbox.is_valid() || self.bbox.extent().norm_sq() == 0.0 {
            return Err(FieldError::InvalidConfig(
                "bbox must be valid with positive extent".into(),
            ));
        }
        Ok(())
    }

    /// Per-level geometric growth factor.
    pub fn growth(&self) -> f64 {
        ((self.max_res as f64 / self.base_res as f64).ln() / (self.n_levels - 1) as f64).exp()
    }
}

/// Grid resolution of `level`: geometric interpolation from `base_res` to
/// `max_res` inclusive. Computed as `floor(base * (max/base)^(l/(n-1)))`,
/// which is exact at both endpoints in f64.
pub fn level_resolution(cfg: &HashGridConfig, level: usize) -> Result<usize, FieldError> {
    if level >= cfg.n_levels {
        return Err(FieldError::InvalidConfig(format!(
            "level {level} out of range (n_levels = {})",
            cfg.n_levels
        )));
    }
    let ratio = cfg.max_res as f64 / cfg.base_res as f64;
    let t = level as f64 / (cfg.n_levels - 1) as f64;
    Ok((cfg.base_res as f64 * ratio.powf(t)).floor() as usize)
}

/// Offsets into the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    /// Start of each level's table in f64 units; length `n_levels + 1`.
    pub level_offsets: Vec<usize>,
    /// Feature-vector entries per level (dense grid size when it fits the
    /// table, `2^table_size_log2` otherwise).
    pub level_entries: Vec<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &HashGridConfig, l_max: usize) -> Result<ParamLayout, FieldError> {
        cfg.validate()?;
        if l_max > shbasis::MAX_DEGREE {
            return Err(FieldError::UnsupportedDegree(l_max));
        }
        let table_cap = 1usize << cfg.table_size_log2;
        let mut level_offsets = Vec::with_capacity(cfg.n_levels + 1);
        let mut level_entries = Vec::with_capacity(cfg.n_levels);
        let mut off = 0usize;
        for l in 0..cfg.n_levels {
            let n = level_resolution(cfg, l)?;
            let dense = (n + 1).pow(3);
            let entries = dense.min(table_cap);
            level_offsets.push(off);
            level_entries.push(entries);
            off += entries * cfg.features_per_level;
        }
        level_offsets.push(off);

        let in_dim = cfg.n_levels * cfg.features_per_level;
        let out_dim = 2 * shbasis::basis_len(l_max);
        let w1 = off;
        let b1 = w1 + HIDDEN * in_dim;
        let w2 = b1 + HIDDEN;
        let b2 = w2 + HIDDEN * HIDDEN;
        let w3 = b2 + HIDDEN;
        let b3 = w3 + out_dim * HIDDEN;
        let total = b3 + out_dim;
        Ok(ParamLayout {
            level_offsets,
            level_entries,
            in_dim,
            out_dim,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total,
        })
    }
}

/// The full parameter set of one field: hash tables and MLP, flat.
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub cfg: HashGridConfig,
    pub l_max: usize,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl FieldParams {
    /// Fresh parameters: tables uniform in `[-1e-4, 1e-4]` (the initial
    /// field is near-zero, i.e. an empty scene), MLP weights uniform with
    /// fan-in scaling, biases zero. Deterministic in `seed`.
    pub fn init(cfg: HashGridConfig, l_max: usize, seed: u64) -> Result<FieldParams, FieldError> {
        let layout = ParamLayout::new(&cfg, l_max)?;
        let mut data = vec![0.0; layout.total];
        for l in 0..cfg.n_levels {
            let mut rng = keyed_rng(seed, &[0, l as u64]);
            let start = layout.level_offsets[l];
            let end = layout.level_offsets[l + 1];
            for v in &mut data[start..end] {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * 1e-4;
            }
        }
        let spans = [
            (layout.w1, layout.b1, layout.in_dim),
            (layout.w2, layout.b2, HIDDEN),
            (layout.w3, layout.b3, HIDDEN),
        ];
        for (i, (start, end, fan_in)) in spans.into_iter().enumerate() {
            let mut rng = keyed_rng(seed, &[1, i as u64]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut data[start..end] {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
        }
        Ok(FieldParams {
            cfg,
            l_max,
            layout,
            data,
        })
    }

    /// Wraps an existing buffer (e.g. loaded from a checkpoint).
    pub fn from_parts(
        cfg: HashGridConfig,
        l_max: usize,
        data: Vec<f64>,
    ) -> Result<FieldParams, FieldError> {
        let layout = ParamLayout::new(&cfg, l_max)?;
        if data.len() != layout.total {
            return Err(FieldError::ParamLen {
                got: data.len(),
                expected: layout.total,
            });
        }
        Ok(FieldParams {
            cfg,
            l_max,
            layout,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Recorded hash-encode pass: the 8 corners per level (absolute parameter
/// offset of the feature vector start) and their trilinear weights.
#[derive(Debug, Clone)]
pub struct EncodeCtx {
    corners: Vec<(usize, f64)>,
}

fn table_index(entries: usize, n: usize, i: usize, j: usize, k: usize) -> usize {
    let dense = (n + 1) * (n + 1) * (n + 1);
    if dense <= entries {
        (i * (n + 1) + j) * (n + 1) + k
    } else {
        let h = (i as u64) ^ (j as u64).wrapping_mul(HASH_P2) ^ (k as u64).wrapping_mul(HASH_P3);
        (h & (entries as u64 - 1)) as usize
    }
}

fn encode_corners(params: &FieldParams, x: Vec3) -> (EncodeCtx, bool) {
    let cfg = &params.cfg;
    let ext = cfg.bbox.extent();
    let rel = x - cfg.bbox.min;
    let mut clamped = false;
    let mut xn = [0.0f64; 3];
    for (axis, out) in xn.iter_mut().enumerate() {
        let e = ext.component(axis);
        let mut v = if e > 0.0 { rel.component(axis) / e } else { 0.5 };
        if !(0.0..=1.0).contains(&v) {
            clamped = true;
            v = v.clamp(0.0, 1.0);
        }
        *out = v;
    }

    let f = cfg.features_per_level;
    let mut corners = Vec::with_capacity(cfg.n_levels * 8);
    for l in 0..cfg.n_levels {
        let n = {
            // level_resolution can only fail for out-of-range levels.
            let ratio = cfg.max_res as f64 / cfg.base_res as f64;
            let t = l as f64 / (cfg.n_levels - 1) as f64;
            (cfg.base_res as f64 * ratio.powf(t)).floor() as usize
        };
        let entries = params.layout.level_entries[l];
        let base = params.layout.level_offsets[l];

        let mut i0 = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for axis in 0..3 {
            let pos = xn[axis] * n as f64;
            let cell = (pos.floor() as isize).clamp(0, n as isize - 1) as usize;
            i0[axis] = cell;
            frac[axis] = pos - cell as f64;
        }
        for c in 0..8usize {
            let dx = c & 1;
            let dy = (c >> 1) & 1;
            let dz = (c >> 2) & 1;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            let idx = table_index(entries, n, i0[0] + dx, i0[1] + dy, i0[2] + dz);
            corners.push((base + idx * f, wx * wy * wz));
        }
    }
    (EncodeCtx { corners }, clamped)
}

/// Multi-resolution feature vector at `x` (length `n_levels *
/// features_per_level`); the flag reports whether `x` was clamped into the
/// bbox.
pub fn hash_encode(params: &FieldParams, x: Vec3) -> (Vec<f64>, bool) {
    let (ctx, clamped) = encode_corners(params, x);
    (encode_apply(params, &ctx), clamped)
}

fn encode_apply(params: &FieldParams, ctx: &EncodeCtx) -> Vec<f64> {
    let f = params.cfg.features_per_level;
    let mut feat = vec![0.0; params.layout.in_dim];
    for (l, chunk) in ctx.corners.chunks_exact(8).enumerate() {
        for &(off, w) in chunk {
            for fi in 0..f {
                feat[l * f + fi] += w * params.data[off + fi];
            }
        }
    }
    feat
}

/// Accumulates `d(loss)/d(table entries)` given `d(loss)/d(features)`.
pub fn hash_encode_backward(
    params: &FieldParams,
    ctx: &EncodeCtx,
    dfeat: &[f64],
    grad: &mut [f64],
) {
    let f = params.cfg.features_per_level;
    for (l, chunk) in ctx.corners.chunks_exact(8).enumerate() {
        for &(off, w) in chunk {
            for fi in 0..f {
                grad[off + fi] += w * dfeat[l * f + fi];
            }
        }
    }
}

/// Recorded MLP pass: input features and pre-activations of both hidden
/// layers (enough to replay ReLU masks and weight products exactly).
#[derive(Debug, Clone)]
pub struct MlpCtx {
    h0: Vec<f64>,
    z1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
}

fn mlp_forward_ctx(params: &FieldParams, feat: &[f64]) -> (Vec<f64>, MlpCtx) {
    let lay = &params.layout;
    let p = &params.data;
    let mut z1 = [0.0f64; HIDDEN];
    for o in 0..HIDDEN {
        let row = lay.w1 + o * lay.in_dim;
        let mut acc = p[lay.b1 + o];
        for (i, &x) in feat.iter().enumerate() {
            acc += p[row + i] * x;
        }
        z1[o] = acc;
    }
    let h1: [f64; HIDDEN] = std::array::from_fn(|i| z1[i].max(0.0));
    let mut z2 = [0.0f64; HIDDEN];
    for o in 0..HIDDEN {
        let row = lay.w2 + o * HIDDEN;
        let mut acc = p[lay.b2 + o];
        for (i, &x) in h1.iter().enumerate() {
            acc += p[row + i] * x;
        }
        z2[o] = acc;
    }
    let h2: [f64; HIDDEN] = std::array::from_fn(|i| z2[i].max(0.0));
    let mut out = vec![0.0; lay.out_dim];
    for (o, out_o) in out.iter_mut().enumerate() {
        let row = lay.w3 + o * HIDDEN;
        let mut acc = p[lay.b3 + o];
        for (i, &x) in h2.iter().enumerate() {
            acc += p[row + i] * x;
        }
        *out_o = acc;
    }
    (
        out,
        MlpCtx {
            h0: feat.to_vec(),
            z1,
            z2,
        },
    )
}

fn mlp_backward(
    params: &FieldParams,
    ctx: &MlpCtx,
    dout: &[f64],
    grad: &mut [f64],
    dfeat: &mut [f64],
) {
    let lay = &params.layout;
    let p = &params.data;
    let h1: [f64; HIDDEN] = std::array::from_fn(|i| ctx.z1[i].max(0.0));
    let h2: [f64; HIDDEN] = std::array::from_fn(|i| ctx.z2[i].max(0.0));

    let mut dh2 = [0.0f64; HIDDEN];
    for (o, &d) in dout.iter().enumerate() {
        let row = lay.w3 + o * HIDDEN;
        grad[lay.b3 + o] += d;
        for i in 0..HIDDEN {
            grad[row + i] += d * h2[i];
            dh2[i] += d * p[row + i];
        }
    }
    let mut dz2 = [0.0f64; HIDDEN];
    for i in 0..HIDDEN {
        dz2[i] = if ctx.z2[i] > 0.0 { dh2[i] } else { 0.0 };
    }
    let mut dh1 = [0.0f64; HIDDEN];
    for o in 0..HIDDEN {
        let d = dz2[o];
        if d == 0.0 {
            continue;
        }
        let row = lay.w2 + o * HIDDEN;
        grad[lay.b2 + o] += d;
        for i in 0..HIDDEN {
            grad[row + i] += d * h1[i];
            dh1[i] += d * p[row + i];
        }
    }
    let mut dz1 = [0.0f64; HIDDEN];
    for i in 0..HIDDEN {
        dz1[i] = if ctx.z1[i] > 0.0 { dh1[i] } else { 0.0 };
    }
    for o in 0..HIDDEN {
        let d = dz1[o];
        if d == 0.0 {
            continue;
        }
        let row = lay.w1 + o * lay.in_dim;
        grad[lay.b1 + o] += d;
        for i in 0..lay.in_dim {
            grad[row + i] += d * ctx.h0[i];
            dfeat[i] += d * p[row + i];
        }
    }
}

/// Everything needed to backpropagate through one field query.
#[derive(Debug, Clone)]
pub struct QueryCtx {
    enc: EncodeCtx,
    mlp: MlpCtx,
}

/// Raw channel output at `x`: `out_dim` reals, first half real channels,
/// second half imaginary channels of the SH coefficients.
pub fn field_query_raw(params: &FieldParams, x: Vec3) -> Vec<f64> {
    let (feat, _) = hash_encode(params, x);
    mlp_forward_ctx(params, &feat).0
}

/// Like [`field_query_raw`], but also records the intermediates that
/// [`field_backward`] needs.
pub fn field_query_ctx(params: &FieldParams, x: Vec3) -> (Vec<f64>, QueryCtx) {
    let (enc, _) = encode_corners(params, x);
    let feat = encode_apply(params, &enc);
    let (out, mlp) = mlp_forward_ctx(params, &feat);
    (out, QueryCtx { enc, mlp })
}

/// Accumulates parameter gradients for one recorded query given
/// `d(loss)/d(channels)`.
pub fn field_backward(params: &FieldParams, ctx: &QueryCtx, dout: &[f64], grad: &mut [f64]) {
    let mut dfeat = vec![0.0; params.layout.in_dim];
    mlp_backward(params, &ctx.mlp, dout, grad, &mut dfeat);
    hash_encode_backward(params, &ctx.enc, &dfeat, grad);
}

/// Complex SH coefficients at `x`.
pub fn field_query(params: &FieldParams, x: Vec3) -> ShCoeffs {
    let out = field_query_raw(params, x);
    let half = out.len() / 2;
    let c = (0..half)
        .map(|i| Complex64::new(out[i], out[half + i]))
        .collect();
    ShCoeffs { c, l_max: params.l_max }
}

/// Isotropic attenuation density: `|dc amplitude| * zeta`, nonnegative.
pub fn density(params: &FieldParams, x: Vec3, zeta: f64) -> f64 {
    debug_assert!(zeta >= 0.0);
    let coeffs = field_query(params, x);
    shbasis::dc_amplitude(&coeffs).norm() * zeta
}

/// Central finite-difference surface normal of an arbitrary scalar field:
/// `-grad(f)/|grad(f)|`, or `None` where the gradient magnitude is below
/// 1e-12 (flat region). Exposed separately so planted analytic fields can
/// exercise the same code path the implicit field uses.
pub fn normal_from_scalar_fn<F: Fn(Vec3) -> f64>(f: F, x: Vec3, h: f64) -> Option<Vec3> {
    debug_assert!(h > 0.0);
    let mut g = Vec3::ZERO;
    for axis in 0..3 {
        let mut dp = Vec3::ZERO;
        match axis {
            0 => dp.x = h,
            1 => dp.y = h,
            _ => dp.z = h,
        }
        let d = (f(x + dp) - f(x - dp)) / (2.0 * h);
        match axis {
            0 => g.x = d,
            1 => g.y = d,
            _ => g.z = d,
        }
    }
    let n = g.norm();
    if n < 1e-12 {
        None
    } else {
        Some(-g / n)
    }
}

/// Surface normal of the field's DC modulus at `x`, step `h` meters.
/// Suggested `h`: half the finest voxel of the evaluation grid.
pub fn normal(params: &FieldParams, x: Vec3, h: f64) -> Option<Vec3> {
    normal_from_scalar_fn(
        |p| {
            let coeffs = field_query(params, p);
            shbasis::dc_amplitude(&coeffs).norm()
        },
        x,
        h,
    )
}

/// Adam optimizer state, congruent with one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
) -> Result<(), FieldError> {
    assert_eq!(state.m.len(), params.len());
    assert_eq!(grads.len(), params.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(FieldError::NonFiniteGrad);
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Context that can evaluate field queries as differentiable primitives.
/// The rendering pipeline is generic over this, so the same code produces
/// plain predictions (via [`EvalCx`]) and loss gradients (via [`GradCx`]).
pub trait FieldCx: Cx {
    /// Raw output channels at `x` as context values (length
    /// `2 * (l_max+1)^2`; first half real, second half imaginary).
    fn field_query_cx(&mut self, params: &FieldParams, x: Vec3) -> Vec<Self::V>;
}

impl FieldCx for EvalCx {
    fn field_query_cx(&mut self, params: &FieldParams, x: Vec3) -> Vec<f64> {
        field_query_raw(params, x)
    }
}

struct FieldCallRecord {
    ctx: QueryCtx,
    leaves: Vec<Var>,
}

/// Gradient-recording context: scalar ops go on the tape, field queries are
/// injected as leaves with their replay context retained. After building a
/// scalar loss, [`GradCx::backward_into`] combines the tape sweep with the
/// hand-derived field backward into one dense parameter gradient.
#[derive(Default)]
pub struct GradCx {
    pub tape: Tape,
    records: Vec<FieldCallRecord>,
}

impl GradCx {
    pub fn new() -> GradCx {
        GradCx {
            tape: Tape::new(),
            records: Vec::new(),
        }
    }

    /// Adds `d(root)/d(params)` into `grad` (length `layout.total`).
    pub fn backward_into(&self, params: &FieldParams, root: Var, grad: &mut [f64]) {
        assert_eq!(grad.len(), params.layout.total);
        let adj = self.tape.backward(root);
        let mut dout = vec![0.0; params.layout.out_dim];
        for rec in &self.records {
            for (d, leaf) in dout.iter_mut().zip(&rec.leaves) {
                *d = Tape::adjoint_of(&adj, *leaf);
            }
            field_backward(params, &rec.ctx, &dout, grad);
        }
    }
}

impl Cx for GradCx {
    type V = Var;

    fn k(&mut self, c: f64) -> Var {
        self.tape.k(c)
    }
    fn val(&self, a: Var) -> f64 {
        self.tape.val(a)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.tape.add(a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.tape.sub(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.tape.mul(a, b)
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        self.tape.div(a, b)
    }
    fn neg(&mut self, a: Var) -> Var {
        self.tape.neg(a)
    }
    fn scale(&mut self, a: Var, c: f64) -> Var {
        self.tape.scale(a, c)
    }
    fn add_k(&mut self, a: Var, c: f64) -> Var {
        self.tape.add_k(a, c)
    }
    fn exp(&mut self, a: Var) -> Var {
        self.tape.exp(a)
    }
    fn sqrt(&mut self, a: Var) -> Var {
        self.tape.sqrt(a)
    }
    fn abs(&mut self, a: Var) -> Var {
        self.tape.abs(a)
    }
    fn max0(&mut self, a: Var) -> Var {
        self.tape.max0(a)
    }
    fn hypot(&mut self, re: Var, im: Var) -> Var {
        self.tape.hypot(re, im)
    }
    fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.tape.atan2(y, x)
    }
    fn wrap_pi(&mut self, a: Var) -> Var {
        self.tape.wrap_pi(a)
    }
    fn wsum(&mut self, terms: &[Var], coeffs: &[f64]) -> Var {
        self.tape.wsum(terms, coeffs)
    }
    fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        self.tape.dot(a, b)
    }
    fn sum(&mut self, v: &[Var]) -> Var {
        self.tape.sum(v)
    }
    fn l2_norm(&mut self, v: &[Var]) -> Var {
        self.tape.l2_norm(v)
    }
}

impl FieldCx for GradCx {
    fn field_query_cx(&mut self, params: &FieldParams, x: Vec3) -> Vec<Var> {
        let (out, ctx) = field_query_ctx(params, x);
        let leaves: Vec<Var> = out.iter().map(|&v| self.tape.leaf(v)).collect();
        self.records.push(FieldCallRecord {
            ctx,
            leaves: leaves.clone(),
        });
        leaves
    }
}

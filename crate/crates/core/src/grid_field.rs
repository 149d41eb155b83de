//! Multi-resolution feature grids and the MLP decoders that read them.
//!
//! Scene geometry, appearance and semantics are each stored as a pyramid of
//! dense feature grids. A query point is trilinearly interpolated at every
//! level and the per-level features are concatenated (coarse to fine) before
//! decoding. Three small MLPs decode the concatenated features: occupancy
//! (one logit, squashed to (0,1)), view-dependent color (the raw view
//! direction is appended to the input) and a D-dimensional semantic feature
//! (linear output, normalized only after volume rendering).
//!
//! All parameters live in `f64` in memory; checkpoints store them as raw
//! little-endian `f32`, and the trainer keeps in-memory values
//! f32-representable so the round trip is lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};

/// Magic bytes of the field checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OOC1";

/// Axis-aligned bounding box of the reconstructed volume.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneBounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl SceneBounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::InvalidBounds);
        }
        Ok(SceneBounds { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Expands the box by `margin` on every side.
    pub fn inflated(&self, margin: f64) -> SceneBounds {
        let m = Vector3::repeat(margin);
        SceneBounds { min: self.min - m, max: self.max + m }
    }

    /// Entry/exit parameters of a ray against the box (slab method), or
    /// `None` when the ray misses. The entry parameter may be negative when
    /// the origin lies inside.
    pub fn ray_range(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let ta = (self.min[a] - origin[a]) * inv;
                let tb = (self.max[a] - origin[a]) * inv;
                let (lo, hi) = if ta <= tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

/// One dense grid level. `resolution` counts lattice vertices per axis, so a
/// level spans `resolution[a] - 1` cells along axis `a`.
#[derive(Clone, Debug)]
pub struct GridLevel {
    pub resolution: [usize; 3],
    pub feat_dim: usize,
    /// `resolution` product × `feat_dim`, vertex-major with the feature
    /// channel innermost; vertex order is x-outer, then y, then z.
    pub features: Vec<f64>,
}

impl GridLevel {
    pub fn zeros(resolution: [usize; 3], feat_dim: usize) -> Self {
        let n = resolution[0] * resolution[1] * resolution[2] * feat_dim;
        GridLevel { resolution, feat_dim, features: vec![0.0; n] }
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    #[inline]
    fn vertex_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution[1] + iy) * self.resolution[2] + iz
    }
}

/// Interpolation footprint of one query point in one level: the flat vertex
/// index and trilinear weight of each of the 8 surrounding corners.
#[derive(Clone, Copy, Debug, Default)]
pub struct CornerRef {
    pub vertex: u32,
    pub weight: f64,
}

/// A pyramid of feature grids over a common bounding box.
#[derive(Clone, Debug)]
pub struct MultiResGrid {
    pub bounds: SceneBounds,
    pub levels: Vec<GridLevel>,
}

impl MultiResGrid {
    /// Builds a pyramid with one level per entry of `voxel_sizes`, features
    /// initialized uniformly in ±1e-2.
    pub fn new(
        bounds: SceneBounds,
        voxel_sizes: &[f64],
        feat_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if voxel_sizes.is_empty() || feat_dim == 0 {
            return Err(Error::arg("grid needs at least one level and one feature channel"));
        }
        let extent = bounds.extent();
        let mut levels = Vec::with_capacity(voxel_sizes.len());
        for &v in voxel_sizes {
            if !(v > 0.0) {
                return Err(Error::arg(format!("voxel size must be positive, got {v}")));
            }
            let mut res = [0usize; 3];
            for a in 0..3 {
                res[a] = ((extent[a] / v).ceil() as usize + 1).max(2);
            }
            let mut level = GridLevel::zeros(res, feat_dim);
            for f in level.features.iter_mut() {
                *f = rng.random_range(-1e-2..1e-2);
            }
            levels.push(level);
        }
        Ok(MultiResGrid { bounds, levels })
    }

    pub fn total_feat_dim(&self) -> usize {
        self.levels.iter().map(|l| l.feat_dim).sum()
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(|l| l.features.len()).sum()
    }

    /// Trilinearly interpolates every level at `p` into `out`, concatenated
    /// coarse to fine. `out.len()` must equal [`Self::total_feat_dim`].
    pub fn sample_into(&self, p: &Vector3<f64>, out: &mut [f64]) -> Result<()> {
        self.sample_impl(p, out, None)
    }

    /// Like [`Self::sample_into`] but also records the interpolation
    /// footprint, 8 corners per level, for gradient scatter.
    pub fn sample_with_corners(
        &self,
        p: &Vector3<f64>,
        out: &mut [f64],
        corners: &mut [CornerRef],
    ) -> Result<()> {
        self.sample_impl(p, out, Some(corners))
    }

    fn sample_impl(
        &self,
        p: &Vector3<f64>,
        out: &mut [f64],
        mut corners: Option<&mut [CornerRef]>,
    ) -> Result<()> {
        if !self.bounds.contains(p) {
            return Err(Error::OutOfBounds(p.x, p.y, p.z));
        }
        if out.len() != self.total_feat_dim() {
            return Err(Error::DimensionMismatch { expected: self.total_feat_dim(), got: out.len() });
        }
        if let Some(c) = corners.as_deref() {
            debug_assert_eq!(c.len(), 8 * self.levels.len());
        }
        let ext = self.bounds.extent();
        let mut off = 0usize;
        for (li, level) in self.levels.iter().enumerate() {
            let mut base = [0usize; 3];
            let mut frac = [0f64; 3];
            for a in 0..3 {
                let n = level.resolution[a];
                let u = (p[a] - self.bounds.min[a]) / ext[a] * (n - 1) as f64;
                let i = (u.floor() as isize).clamp(0, n as isize - 2) as usize;
                base[a] = i;
                frac[a] = u - i as f64;
            }
            let fd = level.feat_dim;
            let dst = &mut out[off..off + fd];
            dst.fill(0.0);
            for (ci, (dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                let wx = if *dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let wy = if *dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let wz = if *dz == 0 { 1.0 - frac[2] } else { frac[2] };
                let w = wx * wy * wz;
                let v = level.vertex_index(base[0] + dx, base[1] + dy, base[2] + dz);
                let src = &level.features[v * fd..(v + 1) * fd];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
                if let Some(c) = corners.as_deref_mut() {
                    c[li * 8 + ci] = CornerRef { vertex: v as u32, weight: w };
                }
            }
            off += fd;
        }
        Ok(())
    }
}

const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// One affine layer, weights stored row-major `[out_dim][in_dim]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        LinearLayer { in_dim, out_dim, weight, bias }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, b)) in
            out.iter_mut().zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
        {
            let mut acc = *b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }
}

/// An MLP decoder: SiLU on every hidden layer, linear output.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<LinearLayer>,
}

/// Per-query activations kept around for the backward pass. Buffers are
/// reused across queries; capacity sticks after the first use.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation of each hidden layer.
    act: Vec<Vec<f64>>,
    /// Raw output of the final linear layer.
    pub out: Vec<f64>,
}

impl DecoderParams {
    /// `dims` lists layer widths input-first, e.g. `[16, 64, 64, 1]`.
    /// Weights and biases use uniform fan-in initialization.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::arg("decoder needs at least an input and an output width"));
        }
        let layers = dims.windows(2).map(|w| LinearLayer::new(w[0], w[1], rng)).collect();
        Ok(DecoderParams { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass storing every intermediate needed by
    /// [`Self::backward`]; the output lands in `cache.out`.
    pub fn forward_cached(&self, x: &[f64], cache: &mut MlpCache) {
        let hidden = self.layers.len() - 1;
        let MlpCache { pre, act, out } = cache;
        pre.resize(hidden, Vec::new());
        act.resize(hidden, Vec::new());
        for (l, layer) in self.layers[..hidden].iter().enumerate() {
            let (done, rest) = act.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
            pre[l].resize(layer.out_dim, 0.0);
            layer.apply(input, &mut pre[l]);
            rest[0].resize(layer.out_dim, 0.0);
            for (a, &p) in rest[0].iter_mut().zip(pre[l].iter()) {
                *a = silu(p);
            }
        }
        let last = &self.layers[hidden];
        let input: &[f64] = if hidden == 0 { x } else { &act[hidden - 1] };
        out.resize(last.out_dim, 0.0);
        last.apply(input, out);
    }

    /// Convenience forward pass without caching.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(x, &mut cache);
        cache.out
    }

    /// Accumulates parameter gradients into `grads` (layer-major pairs
    /// `[weight_0, bias_0, weight_1, bias_1, ...]`) and writes the input
    /// gradient into `dx`. `x` and `cache` must come from a prior
    /// [`Self::forward_cached`] call with identical parameters.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &MlpCache,
        dout: &[f64],
        grads: &mut [Vec<f64>],
        dx: &mut [f64],
        scratch: &mut MlpBackScratch,
    ) {
        let hidden = self.layers.len() - 1;
        debug_assert_eq!(grads.len(), 2 * self.layers.len());
        debug_assert_eq!(dout.len(), self.out_dim());
        debug_assert_eq!(dx.len(), self.in_dim());

        scratch.d_cur.clear();
        scratch.d_cur.extend_from_slice(dout);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            // Gradient w.r.t. pre-activation of layer l.
            if l < hidden {
                for (d, &p) in scratch.d_cur.iter_mut().zip(cache.pre[l].iter()) {
                    *d *= silu_deriv(p);
                }
            }
            let input: &[f64] = if l == 0 { x } else { &cache.act[l - 1] };
            let (dw, db) = {
                let (a, b) = grads.split_at_mut(2 * l + 1);
                (a[2 * l].as_mut_slice(), b[0].as_mut_slice())
            };
            for (o, &d) in scratch.d_cur.iter().enumerate() {
                db[o] += d;
                let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            // Gradient w.r.t. the layer input.
            scratch.d_prev.resize(layer.in_dim, 0.0);
            scratch.d_prev.fill(0.0);
            for (o, &d) in scratch.d_cur.iter().enumerate() {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, w) in scratch.d_prev.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            std::mem::swap(&mut scratch.d_cur, &mut scratch.d_prev);
        }
        dx.copy_from_slice(&scratch.d_cur);
    }
}

/// Reusable scratch buffers for [`DecoderParams::backward`].
#[derive(Clone, Debug, Default)]
pub struct MlpBackScratch {
    d_cur: Vec<f64>,
    d_prev: Vec<f64>,
}

/// Sizing and architecture knobs for a [`FieldSet`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Pyramid depth of the geometry and color grids.
    pub levels: usize,
    /// Pyramid depth of the semantic grid (shares the coarsest voxel size).
    pub sem_levels: usize,
    /// Voxel size of the coarsest level in meters; `None` picks
    /// scene-diagonal / 16. Each finer level halves it.
    pub coarsest_voxel: Option<f64>,
    pub geo_feat_dim: usize,
    pub color_feat_dim: usize,
    pub sem_feat_dim: usize,
    /// Output dimension D of the semantic decoder; must match the distilled
    /// 2D feature dimension.
    pub sem_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            levels: 4,
            sem_levels: 4,
            coarsest_voxel: None,
            geo_feat_dim: 4,
            color_feat_dim: 4,
            sem_feat_dim: 8,
            sem_dim: 16,
            hidden_dim: 64,
            hidden_layers: 2,
        }
    }
}

impl FieldConfig {
    /// Voxel sizes of the geometry/color pyramid, coarse to fine.
    pub fn voxel_sizes(&self, bounds: &SceneBounds) -> Vec<f64> {
        let coarsest = self.coarsest_voxel.unwrap_or(bounds.diagonal() / 16.0);
        (0..self.levels).map(|l| coarsest / (1u64 << l) as f64).collect()
    }

    /// Voxel sizes of the semantic pyramid, coarse to fine.
    pub fn sem_voxel_sizes(&self, bounds: &SceneBounds) -> Vec<f64> {
        let coarsest = self.coarsest_voxel.unwrap_or(bounds.diagonal() / 16.0);
        (0..self.sem_levels).map(|l| coarsest / (1u64 << l) as f64).collect()
    }

    fn decoder_dims(&self, in_dim: usize, out_dim: usize) -> Vec<usize> {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        dims.push(out_dim);
        dims
    }
}

/// Initial occupancy-decoder output bias; sigmoid of it is ≈ 0.1 so fresh
/// fields start mostly empty.
pub const OCC_BIAS_INIT: f64 = -2.1972245773362196;

/// The complete trainable model: three grid pyramids and three decoders.
#[derive(Clone, Debug)]
pub struct FieldSet {
    pub geometry: MultiResGrid,
    pub color: MultiResGrid,
    pub semantic: MultiResGrid,
    pub occ_decoder: DecoderParams,
    pub color_decoder: DecoderParams,
    pub sem_decoder: DecoderParams,
    /// Semantic feature dimension D.
    pub sem_dim: usize,
}

impl FieldSet {
    /// Fresh fields over `bounds`. Initialization order (geometry, color,
    /// semantic grids, then occupancy, color, semantic decoders) is fixed so
    /// a seeded RNG reproduces parameters exactly.
    pub fn new(bounds: SceneBounds, config: &FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        let geometry = MultiResGrid::new(bounds, &config.voxel_sizes(&bounds), config.geo_feat_dim, rng)?;
        let color = MultiResGrid::new(bounds, &config.voxel_sizes(&bounds), config.color_feat_dim, rng)?;
        let semantic =
            MultiResGrid::new(bounds, &config.sem_voxel_sizes(&bounds), config.sem_feat_dim, rng)?;
        let occ_in = geometry.total_feat_dim();
        let color_in = color.total_feat_dim() + 3;
        let sem_in = semantic.total_feat_dim();
        let mut occ_decoder = DecoderParams::new(&config.decoder_dims(occ_in, 1), rng)?;
        let color_decoder = DecoderParams::new(&config.decoder_dims(color_in, 3), rng)?;
        let sem_decoder = DecoderParams::new(&config.decoder_dims(sem_in, config.sem_dim), rng)?;
        let last = occ_decoder.layers.len() - 1;
        occ_decoder.layers[last].bias[0] = OCC_BIAS_INIT;
        Ok(FieldSet {
            geometry,
            color,
            semantic,
            occ_decoder,
            color_decoder,
            sem_decoder,
            sem_dim: config.sem_dim,
        })
    }

    pub fn bounds(&self) -> SceneBounds {
        self.geometry.bounds
    }

    /// Occupancy probability at a point.
    pub fn occupancy(&self, p: &Vector3<f64>) -> Result<f64> {
        let mut feats = vec![0.0; self.geometry.total_feat_dim()];
        self.geometry.sample_into(p, &mut feats)?;
        Ok(sigmoid(self.occ_decoder.forward(&feats)[0]))
    }

    /// View-dependent color at a point; `view_dir` should be unit length.
    pub fn color(&self, p: &Vector3<f64>, view_dir: &Vector3<f64>) -> Result<[f64; 3]> {
        let n = self.color.total_feat_dim();
        let mut feats = vec![0.0; n + 3];
        self.color.sample_into(p, &mut feats[..n])?;
        feats[n] = view_dir.x;
        feats[n + 1] = view_dir.y;
        feats[n + 2] = view_dir.z;
        let raw = self.color_decoder.forward(&feats);
        Ok([sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])])
    }

    /// Raw (unnormalized) semantic feature at a point.
    pub fn semantic(&self, p: &Vector3<f64>) -> Result<Vec<f64>> {
        let mut feats = vec![0.0; self.semantic.total_feat_dim()];
        self.semantic.sample_into(p, &mut feats)?;
        Ok(self.sem_decoder.forward(&feats))
    }

    /// All parameter tensors in declaration order: geometry, color and
    /// semantic grid levels (coarse to fine), then for each decoder
    /// (occupancy, color, semantic) alternating weight and bias per layer.
    /// Checkpoints, gradients and optimizer state all share this order.
    pub fn param_tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for g in [&self.geometry, &self.color, &self.semantic] {
            for l in &g.levels {
                v.push(&l.features);
            }
        }
        for d in [&self.occ_decoder, &self.color_decoder, &self.sem_decoder] {
            for l in &d.layers {
                v.push(&l.weight);
                v.push(&l.bias);
            }
        }
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for g in [&mut self.geometry, &mut self.color, &mut self.semantic] {
            for l in &mut g.levels {
                v.push(&mut l.features);
            }
        }
        for d in [&mut self.occ_decoder, &mut self.color_decoder, &mut self.sem_decoder] {
            for l in &mut d.layers {
                v.push(&mut l.weight);
                v.push(&mut l.bias);
            }
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat parameter read in [`Self::param_tensors`] order; test helper.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for t in self.param_tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter write in [`Self::param_tensors`] order; test helper.
    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for t in self.param_tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Number of grid tensors preceding the decoder tensors in
    /// [`Self::param_tensors`] order.
    pub fn grid_tensor_count(&self) -> usize {
        self.geometry.levels.len() + self.color.levels.len() + self.semantic.levels.len()
    }

    /// Serializes the fields to the binary checkpoint format: the magic
    /// `OOC1`, a little-endian header (per-grid level counts, resolutions
    /// and feature dims, per-decoder layer widths, the semantic dimension D
    /// and the bounds), then every parameter tensor as raw little-endian
    /// `f32` in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let wu32 = |w: &mut BufWriter<File>, v: usize| w.write_all(&(v as u32).to_le_bytes());
        for g in [&self.geometry, &self.color, &self.semantic] {
            wu32(&mut w, g.levels.len())?;
            for l in &g.levels {
                for a in 0..3 {
                    wu32(&mut w, l.resolution[a])?;
                }
                wu32(&mut w, l.feat_dim)?;
            }
        }
        for d in [&self.occ_decoder, &self.color_decoder, &self.sem_decoder] {
            wu32(&mut w, d.layers.len())?;
            for l in &d.layers {
                wu32(&mut w, l.in_dim)?;
                wu32(&mut w, l.out_dim)?;
            }
        }
        wu32(&mut w, self.sem_dim)?;
        let b = self.bounds();
        for v in [b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for t in self.param_tensors() {
            for &p in t {
                w.write_all(&(p as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        fn ru32(r: &mut impl Read) -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        fn rf32(r: &mut impl Read) -> Result<f64> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(f32::from_le_bytes(b) as f64)
        }
        let mut grid_meta: Vec<Vec<([usize; 3], usize)>> = Vec::new();
        for _ in 0..3 {
            let n_levels = ru32(&mut r)?;
            if n_levels == 0 || n_levels > 64 {
                return Err(Error::format("checkpoint", "implausible level count"));
            }
            let mut meta = Vec::with_capacity(n_levels);
            for _ in 0..n_levels {
                let res = [ru32(&mut r)?, ru32(&mut r)?, ru32(&mut r)?];
                let fd = ru32(&mut r)?;
                if res.iter().any(|&x| x < 2) || fd == 0 {
                    return Err(Error::format("checkpoint", "bad level shape"));
                }
                meta.push((res, fd));
            }
            grid_meta.push(meta);
        }
        let mut dec_meta: Vec<Vec<(usize, usize)>> = Vec::new();
        for _ in 0..3 {
            let n_layers = ru32(&mut r)?;
            if n_layers == 0 || n_layers > 64 {
                return Err(Error::format("checkpoint", "implausible layer count"));
            }
            let mut meta = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                meta.push((ru32(&mut r)?, ru32(&mut r)?));
            }
            dec_meta.push(meta);
        }
        let sem_dim = ru32(&mut r)?;
        let min = Vector3::new(rf32(&mut r)?, rf32(&mut r)?, rf32(&mut r)?);
        let max = Vector3::new(rf32(&mut r)?, rf32(&mut r)?, rf32(&mut r)?);
        let bounds = SceneBounds::new(min, max)?;

        let mut read_tensor = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
        };
        let mut grids = Vec::new();
        for meta in &grid_meta {
            let mut levels = Vec::new();
            for &(res, fd) in meta {
                let features = read_tensor(res[0] * res[1] * res[2] * fd)?;
                levels.push(GridLevel { resolution: res, feat_dim: fd, features });
            }
            grids.push(MultiResGrid { bounds, levels });
        }
        let mut decoders = Vec::new();
        for meta in &dec_meta {
            let mut layers = Vec::new();
            for &(in_dim, out_dim) in meta {
                let weight = read_tensor(in_dim * out_dim)?;
                let bias = read_tensor(out_dim)?;
                layers.push(LinearLayer { in_dim, out_dim, weight, bias });
            }
            decoders.push(DecoderParams { layers });
        }
        let sem = decoders.pop().unwrap();
        let col = decoders.pop().unwrap();
        let occ = decoders.pop().unwrap();
        let semantic = grids.pop().unwrap();
        let color = grids.pop().unwrap();
        let geometry = grids.pop().unwrap();
        if sem.out_dim() != sem_dim {
            return Err(Error::format("checkpoint", "semantic decoder width disagrees with D"));
        }
        if occ.in_dim() != geometry.total_feat_dim()
            || col.in_dim() != color.total_feat_dim() + 3
            || sem.in_dim() != semantic.total_feat_dim()
        {
            return Err(Error::format("checkpoint", "decoder widths disagree with grid dims"));
        }
        Ok(FieldSet {
            geometry,
            color,
            semantic,
            occ_decoder: occ,
            color_decoder: col,
            sem_decoder: sem,
            sem_dim,
        })
    }
}

/// Gradient buffers aligned one-to-one with [`FieldSet::param_tensors`].
#[derive(Clone, Debug)]
pub struct FieldGrads {
    pub tensors: Vec<Vec<f64>>,
    grid_tensors: usize,
    grid_level_base: [usize; 3],
    decoder_base: [usize; 3],
}

impl FieldGrads {
    pub fn zeros_like(fields: &FieldSet) -> Self {
        let tensors = fields.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let g = fields.geometry.levels.len();
        let c = fields.color.levels.len();
        let s = fields.semantic.levels.len();
        let grid_tensors = g + c + s;
        let occ = fields.occ_decoder.layers.len() * 2;
        let col = fields.color_decoder.layers.len() * 2;
        FieldGrads {
            tensors,
            grid_tensors,
            grid_level_base: [0, g, g + c],
            decoder_base: [grid_tensors, grid_tensors + occ, grid_tensors + occ + col],
        }
    }

    pub fn clear(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    /// Gradient tensor of one grid level; `grid` is 0 = geometry,
    /// 1 = color, 2 = semantic.
    #[inline]
    pub fn grid_level_mut(&mut self, grid: usize, level: usize) -> &mut [f64] {
        &mut self.tensors[self.grid_level_base[grid] + level]
    }

    /// Gradient tensors of one decoder (alternating weight/bias); `decoder`
    /// is 0 = occupancy, 1 = color, 2 = semantic.
    #[inline]
    pub fn decoder_mut(&mut self, decoder: usize) -> &mut [Vec<f64>] {
        let start = self.decoder_base[decoder];
        let end = if decoder + 1 < 3 { self.decoder_base[decoder + 1] } else { self.tensors.len() };
        &mut self.tensors[start..end]
    }

    /// Scatters a feature gradient through the recorded interpolation
    /// footprint of one grid sample. `dfeat` is the gradient of the
    /// concatenated feature vector; `corners` is laid out `[level][8]`; the
    /// per-level feature dims are given by `feat_dims`.
    pub fn scatter_grid(
        &mut self,
        grid: usize,
        corners: &[CornerRef],
        dfeat: &[f64],
        feat_dims: &[usize],
    ) {
        let mut off = 0usize;
        for (level, &fd) in feat_dims.iter().enumerate() {
            let tensor = &mut self.tensors[self.grid_level_base[grid] + level];
            let d = &dfeat[off..off + fd];
            for c in &corners[level * 8..(level + 1) * 8] {
                let base = c.vertex as usize * fd;
                let dst = &mut tensor[base..base + fd];
                for (t, g) in dst.iter_mut().zip(d) {
                    *t += c.weight * g;
                }
            }
            off += fd;
        }
    }

    pub fn grid_tensor_count(&self) -> usize {
        self.grid_tensors
    }
}

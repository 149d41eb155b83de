//! Ray sampling and occupancy-weighted volume rendering.
//!
//! A ray is sampled at strictly increasing depths inside the scene bounds.
//! Rendering weights follow the occlusion-aware product form
//! `w_i = o_i * prod_{j<i} (1 - o_j)`: the weight of a sample is its
//! occupancy times the probability that the ray survived every earlier
//! sample. Colors, depths and semantic features are weighted sums over the
//! samples; rendered semantic features are normalized to unit length.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid_field::{sigmoid, FieldSet, MlpCache, SceneBounds};

/// Weight sums at or below this are treated as "ray saw nothing": no
/// termination point, void label in rendered segmentations.
pub const MIN_WEIGHT_SUM: f64 = 1e-3;

/// Rendered semantic features with a norm below this are undefined and are
/// excluded from normalization.
pub const MIN_FEATURE_NORM: f64 = 1e-8;

/// A batch of rays with per-ray supervision.
#[derive(Clone, Debug, Default)]
pub struct RayBundle {
    pub origins: Vec<Vector3<f64>>,
    /// Unit direction per ray.
    pub directions: Vec<Vector3<f64>>,
    /// Target color per ray, each channel in [0, 1].
    pub gt_color: Vec<[f64; 3]>,
    /// Target depth along the unit direction, in meters; values ≤ 0 mark
    /// pixels without a valid depth measurement.
    pub gt_depth: Vec<f64>,
    /// Optional distillation targets, row-major `len() == n × feat_dim`,
    /// unit rows; an all-zero row marks a pixel without a feature.
    pub gt_feature: Option<Vec<f64>>,
    pub feat_dim: usize,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.origins.len();
        if self.directions.len() != n || self.gt_color.len() != n || self.gt_depth.len() != n {
            return Err(Error::arg("ray bundle fields disagree in length"));
        }
        if let Some(f) = &self.gt_feature {
            if f.len() != n * self.feat_dim {
                return Err(Error::DimensionMismatch { expected: n * self.feat_dim, got: f.len() });
            }
        }
        for d in &self.directions {
            if (d.norm() - 1.0).abs() > 1e-4 {
                return Err(Error::arg(format!("ray direction has norm {:.6}, want 1", d.norm())));
            }
        }
        Ok(())
    }

    /// The gt feature row of ray `r`, if features are attached and the row
    /// is not all-zero.
    pub fn feature_row(&self, r: usize) -> Option<&[f64]> {
        let f = self.gt_feature.as_ref()?;
        let row = &f[r * self.feat_dim..(r + 1) * self.feat_dim];
        if row.iter().all(|&x| x == 0.0) {
            None
        } else {
            Some(row)
        }
    }
}

/// Sample positions for a ray batch; a rectangular `n_rays × n_samples`
/// layout with a validity mask. Depths are measured along the unit ray
/// direction and are strictly increasing per ray.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub n_rays: usize,
    pub n_samples: usize,
    pub depths: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl RaySamples {
    pub fn ray_depths(&self, r: usize) -> &[f64] {
        &self.depths[r * self.n_samples..(r + 1) * self.n_samples]
    }

    pub fn ray_positions(&self, r: usize) -> &[Vector3<f64>] {
        &self.positions[r * self.n_samples..(r + 1) * self.n_samples]
    }

    pub fn ray_valid(&self, r: usize) -> &[bool] {
        &self.valid[r * self.n_samples..(r + 1) * self.n_samples]
    }
}

/// Stratified depths over `[near, far]`: one sample per equal-width stratum,
/// placed at the stratum midpoint when `rng` is `None` and uniformly inside
/// the stratum otherwise.
pub fn stratified_depths<R: Rng>(
    near: f64,
    far: f64,
    n: usize,
    mut rng: Option<&mut R>,
    out: &mut Vec<f64>,
) {
    let width = (far - near) / n as f64;
    for i in 0..n {
        let u = match rng.as_deref_mut() {
            Some(r) => r.random_range(0.0..1.0),
            None => 0.5,
        };
        out.push(near + width * (i as f64 + u));
    }
}

/// Samples one ray. Returns `None` when the ray misses `bounds`. When
/// `gt_depth > 0`, half of the budget is drawn uniformly from the depth band
/// `gt_depth ± 3*truncation` (clipped to the bounds range) and the rest is
/// stratified over the full range. Output depths are strictly increasing.
pub fn sample_ray<R: Rng>(
    bounds: &SceneBounds,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    n: usize,
    gt_depth: f64,
    truncation: f64,
    mut rng: Option<&mut R>,
) -> Option<Vec<f64>> {
    debug_assert!(n > 0);
    let (t0, t1) = bounds.ray_range(origin, dir)?;
    let near = t0.max(0.0) + 1e-6;
    let far = t1 - 1e-6;
    if far <= near {
        return None;
    }
    let mut depths = Vec::with_capacity(n);
    let mut n_band = 0usize;
    if gt_depth > 0.0 && truncation > 0.0 {
        let lo = (gt_depth - 3.0 * truncation).max(near);
        let hi = (gt_depth + 3.0 * truncation).min(far);
        if lo < hi {
            n_band = n / 2;
            match rng.as_deref_mut() {
                Some(r) => {
                    for _ in 0..n_band {
                        depths.push(r.random_range(lo..hi));
                    }
                }
                None => stratified_depths::<R>(lo, hi, n_band, None, &mut depths),
            }
        }
    }
    stratified_depths(near, far, n - n_band, rng, &mut depths);
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 1..depths.len() {
        if depths[i] <= depths[i - 1] {
            depths[i] = depths[i - 1].next_up();
        }
    }
    Some(depths)
}

/// Samples every ray of a bundle into a rectangular [`RaySamples`]. Rays
/// that miss the bounds get an all-invalid row (callers that construct
/// bundles via back-projection normally never produce such rays).
pub fn sample_bundle<R: Rng>(
    bounds: &SceneBounds,
    bundle: &RayBundle,
    n: usize,
    truncation: f64,
    mut rng: Option<&mut R>,
) -> RaySamples {
    let m = bundle.len();
    let mut samples = RaySamples {
        n_rays: m,
        n_samples: n,
        depths: vec![0.0; m * n],
        positions: vec![Vector3::zeros(); m * n],
        valid: vec![false; m * n],
    };
    for r in 0..m {
        let origin = &bundle.origins[r];
        let dir = &bundle.directions[r];
        let Some(depths) =
            sample_ray(bounds, origin, dir, n, bundle.gt_depth[r], truncation, rng.as_deref_mut())
        else {
            continue;
        };
        for (i, &t) in depths.iter().enumerate() {
            let p = origin + t * dir;
            let idx = r * n + i;
            samples.depths[idx] = t;
            samples.positions[idx] = p;
            samples.valid[idx] = bounds.contains(&p);
        }
    }
    samples
}

/// Occlusion-aware rendering weights for one ray. `occs[i]` is the
/// occupancy of sample `i` in [0, 1]; entries where `valid` is false
/// contribute zero weight and full transparency. Returns the weight sum.
pub fn compose_weights(occs: &[f64], valid: &[bool], weights: &mut [f64]) -> f64 {
    debug_assert_eq!(occs.len(), valid.len());
    debug_assert_eq!(occs.len(), weights.len());
    let mut transparency = 1.0;
    let mut sum = 0.0;
    for i in 0..occs.len() {
        if valid[i] {
            let w = occs[i] * transparency;
            weights[i] = w;
            sum += w;
            transparency *= 1.0 - occs[i];
        } else {
            weights[i] = 0.0;
        }
    }
    sum
}

/// Backward pass of [`compose_weights`]: given upstream gradients w.r.t.
/// the weights, accumulates gradients w.r.t. the occupancies into `d_occs`.
/// Requires every valid occupancy to be < 1.
pub fn compose_weights_backward(
    occs: &[f64],
    valid: &[bool],
    weights: &[f64],
    d_weights: &[f64],
    d_occs: &mut [f64],
) {
    let n = occs.len();
    // Suffix sum of g_k * w_k over valid samples after i; d w_k / d o_i is
    // -w_k / (1 - o_i) for k > i and the incoming transparency for k = i.
    let mut suffix = 0.0;
    let mut suffixes = vec![0.0; n];
    for i in (0..n).rev() {
        suffixes[i] = suffix;
        if valid[i] {
            suffix += d_weights[i] * weights[i];
        }
    }
    let mut transparency = 1.0;
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let one_minus = 1.0 - occs[i];
        debug_assert!(one_minus > 0.0, "compose_weights_backward needs occupancy < 1");
        d_occs[i] += d_weights[i] * transparency - suffixes[i] / one_minus;
        transparency *= one_minus;
    }
}

/// Point where a ray is considered to terminate: origin + rendered depth
/// along the direction. `None` when the weight sum is at or below
/// [`MIN_WEIGHT_SUM`].
pub fn ray_termination_point(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    weight_sum: f64,
    depth: f64,
) -> Option<Vector3<f64>> {
    if weight_sum > MIN_WEIGHT_SUM {
        Some(origin + depth * dir)
    } else {
        None
    }
}

/// Per-ray outputs of [`render_bundle`].
#[derive(Clone, Debug)]
pub struct RenderedRays {
    pub color: Vec<[f64; 3]>,
    /// Rendered depth along the unit ray direction.
    pub depth: Vec<f64>,
    pub weight_sum: Vec<f64>,
    /// Unit-normalized rendered features, `n_rays × sem_dim`; rows whose
    /// raw norm fell below [`MIN_FEATURE_NORM`] are left zero.
    pub semantic: Option<Vec<f64>>,
    pub sem_defined: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub with_color: bool,
    pub with_semantic: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { with_color: true, with_semantic: false }
    }
}

/// Renders a sampled ray batch through the fields (inference path, no
/// gradients). Occupancy is always decoded; color and semantics are
/// optional.
pub fn render_bundle(
    fields: &FieldSet,
    origins: &[Vector3<f64>],
    directions: &[Vector3<f64>],
    samples: &RaySamples,
    opts: RenderOptions,
) -> Result<RenderedRays> {
    let m = samples.n_rays;
    let n = samples.n_samples;
    if origins.len() != m || directions.len() != m {
        return Err(Error::arg("origin/direction count disagrees with the sample grid"));
    }
    let d = fields.sem_dim;
    let mut out = RenderedRays {
        color: vec![[0.0; 3]; m],
        depth: vec![0.0; m],
        weight_sum: vec![0.0; m],
        semantic: opts.with_semantic.then(|| vec![0.0; m * d]),
        sem_defined: opts.with_semantic.then(|| vec![false; m]),
    };

    let geo_dim = fields.geometry.total_feat_dim();
    let col_dim = fields.color.total_feat_dim();
    let sem_dim_in = fields.semantic.total_feat_dim();
    let mut geo_feats = vec![0.0; geo_dim];
    let mut col_feats = vec![0.0; col_dim + 3];
    let mut sem_feats = vec![0.0; sem_dim_in];
    let mut cache = MlpCache::default();
    let mut occs = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut colors = vec![[0.0; 3]; n];
    let mut sems = vec![0.0; n * d];

    for r in 0..m {
        let depths = samples.ray_depths(r);
        let valid = samples.ray_valid(r);
        let positions = samples.ray_positions(r);
        let dir = &directions[r];
        for i in 0..n {
            if !valid[i] {
                occs[i] = 0.0;
                continue;
            }
            fields.geometry.sample_into(&positions[i], &mut geo_feats)?;
            fields.occ_decoder.forward_cached(&geo_feats, &mut cache);
            occs[i] = sigmoid(cache.out[0]);
            if opts.with_color {
                fields.color.sample_into(&positions[i], &mut col_feats[..col_dim])?;
                col_feats[col_dim] = dir.x;
                col_feats[col_dim + 1] = dir.y;
                col_feats[col_dim + 2] = dir.z;
                fields.color_decoder.forward_cached(&col_feats, &mut cache);
                colors[i] = [sigmoid(cache.out[0]), sigmoid(cache.out[1]), sigmoid(cache.out[2])];
            }
            if opts.with_semantic {
                fields.semantic.sample_into(&positions[i], &mut sem_feats)?;
                fields.sem_decoder.forward_cached(&sem_feats, &mut cache);
                sems[i * d..(i + 1) * d].copy_from_slice(&cache.out);
            }
        }
        let wsum = compose_weights(&occs, valid, &mut weights);
        out.weight_sum[r] = wsum;
        let mut depth = 0.0;
        let mut color = [0.0; 3];
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            depth += weights[i] * depths[i];
            if opts.with_color {
                for c in 0..3 {
                    color[c] += weights[i] * colors[i][c];
                }
            }
        }
        out.depth[r] = depth;
        out.color[r] = color;
        if let (Some(sem), Some(def)) = (out.semantic.as_mut(), out.sem_defined.as_mut()) {
            let row = &mut sem[r * d..(r + 1) * d];
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                let s = &sems[i * d..(i + 1) * d];
                for (acc, v) in row.iter_mut().zip(s) {
                    *acc += weights[i] * v;
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > MIN_FEATURE_NORM {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                def[r] = true;
            } else {
                row.fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Renders color, depth and per-ray weight sums.
#[allow(clippy::type_complexity)]
pub fn render_color_depth(
    fields: &FieldSet,
    origins: &[Vector3<f64>],
    directions: &[Vector3<f64>],
    samples: &RaySamples,
) -> Result<(Vec<[f64; 3]>, Vec<f64>, Vec<f64>)> {
    let out = render_bundle(fields, origins, directions, samples, RenderOptions::default())?;
    Ok((out.color, out.depth, out.weight_sum))
}

/// Renders unit-normalized semantic features plus defined flags and weight
/// sums.
pub fn render_semantic(
    fields: &FieldSet,
    origins: &[Vector3<f64>],
    directions: &[Vector3<f64>],
    samples: &RaySamples,
) -> Result<(Vec<f64>, Vec<bool>, Vec<f64>)> {
    let out = render_bundle(
        fields,
        origins,
        directions,
        samples,
        RenderOptions { with_color: false, with_semantic: true },
    )?;
    Ok((out.semantic.unwrap(), out.sem_defined.unwrap(), out.weight_sum))
}

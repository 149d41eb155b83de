//! Field training: batch sampling, fused gradients, Adam updates, belief
//! folding and bit-reproducible checkpoints.
//!
//! Every step draws rays uniformly over frames and pixels, runs a cheap
//! occupancy-only pre-pass to locate each ray's termination cell, asks the
//! belief grid to weigh the batch's semantic measurements (updating itself
//! from the same batch afterwards), then evaluates the fused objective and
//! applies per-group Adam. Parameters live in f64 but are snapped to the
//! f32 lattice after every update, so a saved checkpoint restores the exact
//! training trajectory: resuming from step `n` reproduces step `n + k`
//! bit for bit.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset_io::{camera_ray, FrameSet};
use crate::error::{Error, Result};
use crate::grid_field::{FieldConfig, FieldGrads, FieldSet, SceneBounds};
use crate::objective::{batch_loss_and_grads, EvalOptions, LossReport, LossWeights};
use crate::scp_fusion::{
    classify_measurement, weigh_batch, BeliefGrid, ClassPrompts, MeasurementBatch, NO_CELL,
};
use crate::volume_renderer::{
    compose_weights, ray_termination_point, sample_bundle, RayBundle, RaySamples, MIN_WEIGHT_SUM,
};

/// Magic prefix of the optimizer state sidecar.
pub const STATE_MAGIC: &[u8; 4] = b"OST1";

/// Full training configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub lr_decoder: f64,
    pub lr_grid: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Truncation band half-width in meters.
    pub truncation: f64,
    pub seed: u64,
    /// Confidence weighting of semantic measurements.
    pub scp_enabled: bool,
    /// Huber kernel on the distillation residual.
    pub huber_enabled: bool,
    /// Occupancy and free-space supervision.
    pub bce_enabled: bool,
    pub loss_weights: LossWeights,
    pub huber_delta: f64,
    pub field: FieldConfig,
    /// Belief cell edge length; defaults to the finest semantic voxel.
    pub belief_voxel: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 10000,
            rays_per_batch: 6144,
            samples_per_ray: 132,
            lr_decoder: 1e-2,
            lr_grid: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            truncation: 0.05,
            seed: 1,
            scp_enabled: true,
            huber_enabled: true,
            bce_enabled: true,
            loss_weights: LossWeights::default(),
            huber_delta: 1.0,
            field: FieldConfig::default(),
            belief_voxel: None,
        }
    }
}

impl TrainConfig {
    /// The evaluation options this configuration induces. Disabling the
    /// occupancy supervision zeroes its weights; the raw terms are still
    /// reported.
    pub fn eval_options(&self) -> EvalOptions {
        let mut weights = self.loss_weights;
        if !self.bce_enabled {
            weights.occ = 0.0;
            weights.fs = 0.0;
        }
        EvalOptions {
            weights,
            truncation: self.truncation,
            huber_delta: self.huber_delta,
            huber_enabled: self.huber_enabled,
        }
    }
}

/// First and second Adam moments, one pair of tensors per parameter
/// tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub fields: FieldSet,
    pub beliefs: Option<BeliefGrid>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub adam: AdamState,
}

/// Snaps every parameter to the nearest f32, the storage grid of
/// checkpoints.
fn quantize_params(fields: &mut FieldSet) {
    for t in fields.param_tensors_mut() {
        for p in t.iter_mut() {
            *p = *p as f32 as f64;
        }
    }
}

/// Snaps bounds onto the f32 lattice so they survive a checkpoint
/// round-trip unchanged.
fn quantize_bounds(b: &SceneBounds) -> Result<SceneBounds> {
    let q = |v: Vector3<f64>| Vector3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64);
    SceneBounds::new(q(b.min), q(b.max))
}

impl TrainState {
    /// Fresh fields and optimizer state. `class_count` enables the belief
    /// grid (ignored when the configuration disables confidence
    /// weighting).
    pub fn new(bounds: &SceneBounds, class_count: Option<usize>, cfg: &TrainConfig) -> Result<Self> {
        let bounds = quantize_bounds(bounds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fields = FieldSet::new(bounds, &cfg.field, &mut rng)?;
        quantize_params(&mut fields);
        let beliefs = match class_count {
            Some(k) if cfg.scp_enabled => Some(make_belief_grid(&bounds, cfg, k)?),
            _ => None,
        };
        let adam = AdamState {
            m: fields.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: fields.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        };
        Ok(TrainState { fields, beliefs, step: 0, rng, adam })
    }

    pub fn bounds(&self) -> SceneBounds {
        self.fields.geometry.bounds
    }
}

fn make_belief_grid(bounds: &SceneBounds, cfg: &TrainConfig, k: usize) -> Result<BeliefGrid> {
    let voxel = match cfg.belief_voxel {
        Some(v) => v,
        None => *cfg
            .field
            .sem_voxel_sizes(bounds)
            .last()
            .expect("field config has at least one semantic level"),
    };
    if !(voxel > 0.0) {
        return Err(Error::arg(format!("belief voxel must be positive, got {voxel}")));
    }
    let ext = bounds.extent();
    let mut res = [0usize; 3];
    for a in 0..3 {
        res[a] = ((ext[a] / voxel).ceil() as usize).max(1);
    }
    BeliefGrid::new(*bounds, res, k)
}

/// The scene box implied by the frames: the union of all back-projected
/// depth samples and camera centers, inflated by 3% of its diagonal.
pub fn bounds_from_frames(set: &FrameSet) -> Result<SceneBounds> {
    let intr = &set.intrinsics;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: Vector3<f64>| {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    };
    for frame in &set.frames {
        grow(Vector3::new(frame.pose[(0, 3)], frame.pose[(1, 3)], frame.pose[(2, 3)]));
        for v in (0..intr.height).step_by(4) {
            for u in (0..intr.width).step_by(4) {
                if let Some(z) = frame.depth_at(u, v, intr.width, intr.depth_scale) {
                    let (o, d, scale) = camera_ray(intr, &frame.pose, u, v);
                    grow(o + d * (z * scale));
                }
            }
        }
    }
    if !lo.x.is_finite() {
        return Err(Error::arg("cannot infer bounds: no valid depth in any frame"));
    }
    let margin = 0.03 * (hi - lo).norm().max(1e-3);
    SceneBounds::new(lo - Vector3::repeat(margin), hi + Vector3::repeat(margin))
}

/// Draws a training batch: uniform over frames, then over pixels. Depth
/// targets are converted from z-depth to distance along the unit ray;
/// pixels without a depth return get `-1`. Feature targets are rows of the
/// per-frame feature maps when present.
pub fn sample_batch(
    set: &FrameSet,
    bounds: &SceneBounds,
    n_rays: usize,
    n_samples: usize,
    truncation: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(RayBundle, RaySamples)> {
    let intr = &set.intrinsics;
    if set.frames.is_empty() {
        return Err(Error::arg("cannot sample rays from an empty frame set"));
    }
    let feat_dim = set
        .frames
        .iter()
        .find_map(|f| f.feature.as_ref().map(|m| m.dim))
        .unwrap_or(0);
    for f in &set.frames {
        if let Some(map) = &f.feature {
            if map.dim != feat_dim {
                return Err(Error::DimensionMismatch { expected: feat_dim, got: map.dim });
            }
        }
    }

    let mut bundle = RayBundle {
        feat_dim,
        gt_feature: (feat_dim > 0).then(|| Vec::with_capacity(n_rays * feat_dim)),
        ..RayBundle::default()
    };
    let mut row = vec![0.0; feat_dim];
    for _ in 0..n_rays {
        let fi = rng.random_range(0..set.frames.len());
        let u = rng.random_range(0..intr.width);
        let v = rng.random_range(0..intr.height);
        let frame = &set.frames[fi];
        let (origin, dir, scale) = camera_ray(intr, &frame.pose, u, v);
        bundle.origins.push(origin);
        bundle.directions.push(dir);
        bundle.gt_color.push(frame.rgb_at(u, v, intr.width));
        bundle.gt_depth.push(
            frame
                .depth_at(u, v, intr.width, intr.depth_scale)
                .map_or(-1.0, |z| z * scale),
        );
        if let Some(feats) = bundle.gt_feature.as_mut() {
            match &frame.feature {
                Some(map) => {
                    map.sample_pixel(u, v, intr.width, intr.height, &mut row);
                    feats.extend_from_slice(&row);
                }
                None => feats.extend(std::iter::repeat_n(0.0, feat_dim)),
            }
        }
    }
    let samples = sample_bundle(bounds, &bundle, n_samples, truncation, Some(rng));
    Ok((bundle, samples))
}

/// Occupancy-only pre-pass: classifies each ray's feature target, finds the
/// belief cell its rendering terminates in, and returns the per-ray
/// confidence weights (from the beliefs as they were before this batch)
/// while folding the batch in.
fn scp_weights_for(
    fields: &FieldSet,
    beliefs: &mut BeliefGrid,
    prompts: &ClassPrompts,
    bundle: &RayBundle,
    samples: &RaySamples,
) -> Result<Vec<f64>> {
    let n = samples.n_samples;
    let mut occs = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut batch = MeasurementBatch::default();
    for r in 0..bundle.len() {
        let class = bundle.feature_row(r).and_then(|f| classify_measurement(f, prompts));
        let Some(class) = class else {
            batch.push(NO_CELL, 0);
            continue;
        };
        let valid = samples.ray_valid(r);
        let depths = samples.ray_depths(r);
        for i in 0..n {
            occs[i] = if valid[i] {
                fields.occupancy(&samples.ray_positions(r)[i])?
            } else {
                0.0
            };
        }
        let wsum = compose_weights(&occs, valid, &mut weights);
        let mut cell = NO_CELL;
        if wsum > MIN_WEIGHT_SUM {
            let depth: f64 =
                (0..n).map(|i| weights[i] * depths[i]).sum::<f64>() / wsum;
            if let Some(p) =
                ray_termination_point(&bundle.origins[r], &bundle.directions[r], wsum, depth)
            {
                cell = beliefs.cell_index(&p).unwrap_or(NO_CELL);
            }
        }
        batch.push(cell, class);
    }
    weigh_batch(beliefs, &batch)
}

/// One optimization step; returns the batch losses.
pub fn train_step(state: &mut TrainState, set: &FrameSet, cfg: &TrainConfig) -> Result<LossReport> {
    let bounds = state.bounds();
    let (bundle, samples) = sample_batch(
        set,
        &bounds,
        cfg.rays_per_batch,
        cfg.samples_per_ray,
        cfg.truncation,
        &mut state.rng,
    )?;

    let scp_w = match (&mut state.beliefs, &set.prompts, &bundle.gt_feature) {
        (Some(beliefs), Some(prompts), Some(_)) => {
            if prompts.dim != bundle.feat_dim {
                return Err(Error::DimensionMismatch {
                    expected: bundle.feat_dim,
                    got: prompts.dim,
                });
            }
            scp_weights_for(&state.fields, beliefs, prompts, &bundle, &samples)?
        }
        _ => vec![1.0; bundle.len()],
    };

    let mut grads = FieldGrads::zeros_like(&state.fields);
    let report = batch_loss_and_grads(
        &state.fields,
        &bundle,
        &samples,
        &scp_w,
        &cfg.eval_options(),
        Some(&mut grads),
    )?;
    adam_apply(state, &grads, cfg);
    Ok(report)
}

/// Adam with bias correction; grid tensors use `lr_grid`, decoder tensors
/// `lr_decoder`. Parameters are re-quantized to the f32 lattice
/// afterwards.
fn adam_apply(state: &mut TrainState, grads: &FieldGrads, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grid_tensors = state.fields.grid_tensor_count();
    let mut tensors = state.fields.param_tensors_mut();
    for (i, tensor) in tensors.iter_mut().enumerate() {
        let lr = if i < grid_tensors { cfg.lr_grid } else { cfg.lr_decoder };
        let g = &grads.tensors[i];
        let m = &mut state.adam.m[i];
        let v = &mut state.adam.v[i];
        for j in 0..tensor.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            tensor[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            tensor[j] = tensor[j] as f32 as f64;
        }
    }
}

/// Trains from scratch for `cfg.iters` steps, invoking `on_step` after
/// each. Scene bounds come from the set or, failing that, from the
/// back-projected depth samples.
pub fn fit(
    set: &FrameSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainState> {
    let bounds = match set.bounds {
        Some(b) => b,
        None => bounds_from_frames(set)?,
    };
    let mut state = TrainState::new(&bounds, set.prompts.as_ref().map(|p| p.k()), cfg)?;
    for _ in 0..cfg.iters {
        let report = train_step(&mut state, set, cfg)?;
        on_step(state.step, &report);
    }
    Ok(state)
}

fn state_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".state");
    PathBuf::from(os)
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, out: &mut [f64]) -> Result<()> {
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(())
}

/// Saves the fields checkpoint at `path` plus a `.state` sidecar holding
/// the step counter, generator state, beliefs and Adam moments. Loading
/// the pair resumes training bit-identically.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.fields.save(path)?;
    let mut w = BufWriter::new(fs::File::create(state_path(path))?);
    w.write_all(STATE_MAGIC)?;
    write_u64(&mut w, state.step)?;
    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    match &state.beliefs {
        None => w.write_all(&[0u8])?,
        Some(b) => {
            w.write_all(&[1u8])?;
            write_f64s(
                &mut w,
                &[b.bounds.min.x, b.bounds.min.y, b.bounds.min.z, b.bounds.max.x, b.bounds.max.y, b.bounds.max.z],
            )?;
            for r in b.resolution {
                write_u64(&mut w, r as u64)?;
            }
            write_u64(&mut w, b.k as u64)?;
            write_f64s(&mut w, &b.logodds)?;
        }
    }
    write_u64(&mut w, state.adam.m.len() as u64)?;
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        write_u64(&mut w, m.len() as u64)?;
        write_f64s(&mut w, m)?;
        write_f64s(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Restores a [`TrainState`] from a checkpoint and its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let fields = FieldSet::load(path)?;
    let mut r = BufReader::new(fs::File::open(state_path(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(Error::format("train state", "bad magic"));
    }
    let step = read_u64(&mut r)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(pos));

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let beliefs = if flag[0] == 1 {
        let mut b6 = [0.0f64; 6];
        read_f64s(&mut r, &mut b6)?;
        let bounds = SceneBounds::new(
            Vector3::new(b6[0], b6[1], b6[2]),
            Vector3::new(b6[3], b6[4], b6[5]),
        )?;
        let mut res = [0usize; 3];
        for a in res.iter_mut() {
            *a = read_u64(&mut r)? as usize;
        }
        let k = read_u64(&mut r)? as usize;
        let mut grid = BeliefGrid::new(bounds, res, k)?;
        read_f64s(&mut r, &mut grid.logodds)?;
        Some(grid)
    } else if flag[0] == 0 {
        None
    } else {
        return Err(Error::format("train state", format!("bad belief flag {}", flag[0])));
    };

    let n_tensors = read_u64(&mut r)? as usize;
    let shapes: Vec<usize> = fields.param_tensors().iter().map(|t| t.len()).collect();
    if n_tensors != shapes.len() {
        return Err(Error::format(
            "train state",
            format!("expected {} tensors, found {n_tensors}", shapes.len()),
        ));
    }
    let mut adam = AdamState { m: Vec::with_capacity(n_tensors), v: Vec::with_capacity(n_tensors) };
    for &len in &shapes {
        let got = read_u64(&mut r)? as usize;
        if got != len {
            return Err(Error::format("train state", format!("tensor length {got}, expected {len}")));
        }
        let mut m = vec![0.0; len];
        let mut v = vec![0.0; len];
        read_f64s(&mut r, &mut m)?;
        read_f64s(&mut r, &mut v)?;
        adam.m.push(m);
        adam.v.push(v);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("train state", "trailing bytes"));
    }
    Ok(TrainState { fields, beliefs, step, rng, adam })
}

//! Reconstruction and segmentation metrics.
//!
//! Point-cloud distances run through an exact kd-tree, mesh surfaces are
//! converted to points by area-weighted sampling, and predicted points can
//! be culled to the region actually observed by the input frames before
//! scoring. Segmentation is scored per class over pixels with a ground
//! truth label.

use nalgebra::Vector3;
use rand::Rng;
use serde::Serialize;

use crate::dataset_io::{project_into, FrameSet};
use crate::error::{Error, Result};
use crate::scene_query::TriMesh;
use crate::VOID_CLASS;

const LEAF_SIZE: usize = 12;

/// Exact nearest-neighbor structure over a fixed point set. Built by
/// recursive median splits along the widest axis of each range.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Split axis of the node whose median sits at this index.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("kd-tree needs at least one point"));
        }
        let mut tree = KdTree { points: points.to_vec(), axes: vec![0; points.len()] };
        tree.build(0, points.len());
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &self.points[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b]))).unwrap();
        let mid = (lo + hi) / 2;
        self.points[lo..hi]
            .select_nth_unstable_by(mid - lo, |a, b| a[axis].total_cmp(&b[axis]));
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Distance from `q` to its nearest point in the set.
    pub fn nearest_dist(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.points.len(), &mut best);
        best.sqrt()
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, best: &mut f64) {
        if hi - lo <= LEAF_SIZE {
            for p in &self.points[lo..hi] {
                let d = (p - q).norm_squared();
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let d = (self.points[mid] - q).norm_squared();
        if d < *best {
            *best = d;
        }
        let delta = q[axis] - self.points[mid][axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if delta * delta < *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// Draws points uniformly over the surface of a mesh, `per_area` points
/// per unit area in expectation (the count is rounded, at least one).
pub fn sample_mesh_points<R: Rng>(
    mesh: &TriMesh,
    per_area: f64,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    if mesh.is_empty() {
        return Err(Error::arg("cannot sample an empty mesh"));
    }
    if !(per_area > 0.0) {
        return Err(Error::arg(format!("sampling density must be positive, got {per_area}")));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        let a = &mesh.vertices[t[0] as usize];
        let b = &mesh.vertices[t[1] as usize];
        let c = &mesh.vertices[t[2] as usize];
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::arg("mesh has zero surface area"));
    }
    let n = (total * per_area).round().max(1.0) as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random_range(0.0..total);
        let ti = cumulative.partition_point(|&c| c <= r).min(mesh.triangles.len() - 1);
        let t = &mesh.triangles[ti];
        let a = &mesh.vertices[t[0] as usize];
        let b = &mesh.vertices[t[1] as usize];
        let c = &mesh.vertices[t[2] as usize];
        // Uniform barycentric sample.
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        points.push(a + r1 * ((b - a) + r2 * (c - b)));
    }
    Ok(points)
}

/// Two-sided point-cloud reconstruction scores at a distance threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReconMetrics {
    /// Mean distance from predicted points to the ground truth surface.
    pub accuracy: f64,
    /// Mean distance from ground truth points to the prediction.
    pub completeness: f64,
    /// Mean of accuracy and completeness.
    pub chamfer_l1: f64,
    /// Fraction of predicted points within the threshold.
    pub precision: f64,
    /// Fraction of ground truth points within the threshold.
    pub recall: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

pub fn recon_metrics(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    threshold: f64,
) -> Result<ReconMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::arg("reconstruction metrics need non-empty point sets"));
    }
    let pred_tree = KdTree::new(pred)?;
    let gt_tree = KdTree::new(gt)?;
    let mut acc = 0.0;
    let mut within_pred = 0usize;
    for p in pred {
        let d = gt_tree.nearest_dist(p);
        acc += d;
        if d <= threshold {
            within_pred += 1;
        }
    }
    let mut comp = 0.0;
    let mut within_gt = 0usize;
    for p in gt {
        let d = pred_tree.nearest_dist(p);
        comp += d;
        if d <= threshold {
            within_gt += 1;
        }
    }
    let accuracy = acc / pred.len() as f64;
    let completeness = comp / gt.len() as f64;
    let precision = within_pred as f64 / pred.len() as f64;
    let recall = within_gt as f64 / gt.len() as f64;
    let fscore =
        if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ReconMetrics {
        accuracy,
        completeness,
        chamfer_l1: 0.5 * (accuracy + completeness),
        precision,
        recall,
        fscore,
        threshold,
        n_pred: pred.len(),
        n_gt: gt.len(),
    })
}

/// Keeps the points that at least one frame observed: the point projects
/// into the image, the pixel carries a depth value, and the point's camera
/// depth agrees with it within `tol` meters.
pub fn cull_unobserved(
    points: &[Vector3<f64>],
    set: &FrameSet,
    tol: f64,
) -> Result<Vec<Vector3<f64>>> {
    let kept = cull_unobserved_indices(points, set, tol)?;
    Ok(kept.into_iter().map(|i| points[i]).collect())
}

/// Indices of the points [`cull_unobserved`] would keep, in input order.
/// Lets callers carry per-point attributes (class labels, colors) through
/// the cull.
pub fn cull_unobserved_indices(
    points: &[Vector3<f64>],
    set: &FrameSet,
    tol: f64,
) -> Result<Vec<usize>> {
    let mut world_to_cam = Vec::with_capacity(set.frames.len());
    for f in &set.frames {
        world_to_cam
            .push(f.pose.try_inverse().ok_or_else(|| Error::arg("frame pose is singular"))?);
    }
    let intr = &set.intrinsics;
    let mut kept = Vec::new();
    'points: for (i, p) in points.iter().enumerate() {
        for (f, w2c) in set.frames.iter().zip(&world_to_cam) {
            let Some((u, v, z)) = project_into(intr, w2c, p) else { continue };
            let Some(d) = f.depth_at(u, v, intr.width, intr.depth_scale) else { continue };
            if (z - d).abs() <= tol {
                kept.push(i);
                continue 'points;
            }
        }
    }
    Ok(kept)
}

/// Per-class and mean segmentation scores. Classes never present in the
/// ground truth carry `None` and are excluded from the means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub mean_acc: f64,
    pub overall_acc: f64,
    /// Pixels with a ground truth label.
    pub n_eval: usize,
}

/// Scores predicted class ids against ground truth over `k` classes.
/// Ground truth pixels labeled [`VOID_CLASS`] are ignored; predictions
/// outside `0..k` (including void) count as errors on their pixel.
pub fn seg_metrics(pred: &[u16], gt: &[u16], k: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch { expected: gt.len(), got: pred.len() });
    }
    if k == 0 {
        return Err(Error::arg("segmentation needs at least one class"));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut n_eval = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == VOID_CLASS {
            continue;
        }
        let g = g as usize;
        if g >= k {
            return Err(Error::arg(format!("ground truth label {g} outside 0..{k}")));
        }
        n_eval += 1;
        if p as usize == g {
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            if (p as usize) < k {
                fp[p as usize] += 1;
            }
        }
    }
    if n_eval == 0 {
        return Err(Error::arg("no pixels with a ground truth label"));
    }
    let mut per_class_iou = vec![None; k];
    let mut per_class_acc = vec![None; k];
    let mut iou_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        if tp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        let iou = tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64;
        let acc = tp[c] as f64 / (tp[c] + fn_[c]) as f64;
        per_class_iou[c] = Some(iou);
        per_class_acc[c] = Some(acc);
        iou_sum += iou;
        acc_sum += acc;
    }
    Ok(SegMetrics {
        per_class_iou,
        mean_iou: iou_sum / present as f64,
        per_class_acc,
        mean_acc: acc_sum / present as f64,
        overall_acc: tp.iter().sum::<usize>() as f64 / n_eval as f64,
        n_eval,
    })
}

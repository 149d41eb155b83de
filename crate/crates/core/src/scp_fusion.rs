//! Per-cell semantic belief fusion and confidence weights.
//!
//! Every grid cell keeps one log-odds value per class. A training batch
//! contributes per-class observation counts per cell; the count ratio,
//! clamped away from 0 and 1, becomes an observation log-odds that is added
//! to the cell's belief (recursive Bayesian update with a zero prior). The
//! belief in turn yields per-class confidence weights that scale the
//! semantic distillation loss: measurements that agree with the accumulated
//! evidence are emphasized, view-inconsistent ones suppressed.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid_field::SceneBounds;

/// Beliefs are clamped to ±this bound so a long run of one-sided evidence
/// stays revisable.
pub const LOGODDS_CLAMP: f64 = 10.0;

/// Observation likelihoods are clamped to `[FLOOR, 1 - FLOOR]` so empty and
/// unanimous counts stay finite.
pub const LIKELIHOOD_FLOOR: f64 = 1e-3;

/// Sentinel cell id for measurements without a spatial association; they
/// receive a neutral weight of 1 and never update the belief.
pub const NO_CELL: usize = usize::MAX;

/// Class vocabulary: one label and one unit embedding per class.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassPrompts {
    pub labels: Vec<String>,
    /// Row-major `K × dim`, unit rows.
    pub embeddings: Vec<f64>,
    pub dim: usize,
}

impl ClassPrompts {
    pub fn new(labels: Vec<String>, embeddings: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || labels.is_empty() {
            return Err(Error::arg("prompts need at least one class and one dimension"));
        }
        if embeddings.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                got: embeddings.len(),
            });
        }
        for (k, row) in embeddings.chunks_exact(dim).enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::arg(format!(
                    "prompt embedding {k} has norm {norm:.6}, want 1"
                )));
            }
        }
        Ok(ClassPrompts { labels, embeddings, dim })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn embedding(&self, class: usize) -> &[f64] {
        &self.embeddings[class * self.dim..(class + 1) * self.dim]
    }
}

/// Dense per-cell, per-class log-odds over the scene bounds.
#[derive(Clone, Debug)]
pub struct BeliefGrid {
    pub bounds: SceneBounds,
    /// Cell counts per axis.
    pub resolution: [usize; 3],
    pub k: usize,
    /// `cells × k`, cell-major; x is the outer axis, then y, then z.
    pub logodds: Vec<f64>,
}

impl BeliefGrid {
    pub fn new(bounds: SceneBounds, resolution: [usize; 3], k: usize) -> Result<Self> {
        if resolution.contains(&0) || k == 0 {
            return Err(Error::arg("belief grid needs nonzero resolution and class count"));
        }
        let cells = resolution[0] * resolution[1] * resolution[2];
        Ok(BeliefGrid { bounds, resolution, k, logodds: vec![0.0; cells * k] })
    }

    pub fn cell_count(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    /// Flat index of the cell containing `p`; points on the upper boundary
    /// fall into the last cell, points outside return `None`.
    pub fn cell_index(&self, p: &Vector3<f64>) -> Option<usize> {
        if !self.bounds.contains(p) {
            return None;
        }
        let ext = self.bounds.extent();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.min[a]) / ext[a] * self.resolution[a] as f64;
            idx[a] = (u.floor() as usize).min(self.resolution[a] - 1);
        }
        Some((idx[0] * self.resolution[1] + idx[1]) * self.resolution[2] + idx[2])
    }

    pub fn cell_logodds(&self, cell: usize) -> &[f64] {
        &self.logodds[cell * self.k..(cell + 1) * self.k]
    }

    pub fn cell_logodds_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.logodds[cell * self.k..(cell + 1) * self.k]
    }
}

/// Argmax-cosine classification of a feature against the prompt embeddings.
/// Ties resolve to the lowest class index; an all-zero feature is
/// unclassifiable and returns `None`.
pub fn classify_measurement(feature: &[f64], prompts: &ClassPrompts) -> Option<usize> {
    debug_assert_eq!(feature.len(), prompts.dim);
    let norm: f64 = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    // Prompt rows are unit, so the dot product orders cosines.
    let mut best = 0usize;
    let mut best_dot = f64::NEG_INFINITY;
    for k in 0..prompts.k() {
        let dot: f64 = prompts.embedding(k).iter().zip(feature).map(|(a, b)| a * b).sum();
        if dot > best_dot {
            best_dot = dot;
            best = k;
        }
    }
    Some(best)
}

/// Observation log-odds from per-class counts: the likelihood of class `k`
/// is `counts[k] / N` clamped to `[1e-3, 1 - 1e-3]`, mapped through
/// `ln(p / (1 - p))`. All zeros when `N == 0`.
pub fn observation_logodds(counts: &[u64], out: &mut [f64]) {
    debug_assert_eq!(counts.len(), out.len());
    let n: u64 = counts.iter().sum();
    if n == 0 {
        out.fill(0.0);
        return;
    }
    for (o, &c) in out.iter_mut().zip(counts) {
        let p = (c as f64 / n as f64).clamp(LIKELIHOOD_FLOOR, 1.0 - LIKELIHOOD_FLOOR);
        *o = (p / (1.0 - p)).ln();
    }
}

/// Adds an observation to a cell belief and clamps to ±[`LOGODDS_CLAMP`].
/// With a zero prior the update is a plain sum, so batches commute up to
/// the clamp.
pub fn update_cell(belief: &mut [f64], observation: &[f64]) {
    debug_assert_eq!(belief.len(), observation.len());
    for (b, &o) in belief.iter_mut().zip(observation) {
        *b = (*b + o).clamp(-LOGODDS_CLAMP, LOGODDS_CLAMP);
    }
}

/// Normalized per-class confidences of a belief: negative log-odds floor at
/// zero, the rest normalize to sum 1; a fresh (or fully negative) belief is
/// uninformed and yields the uniform distribution.
pub fn confidence_weights(logodds: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logodds.len(), out.len());
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logodds) {
        *o = l.max(0.0);
        sum += *o;
    }
    if sum == 0.0 {
        let k = out.len() as f64;
        out.fill(1.0 / k);
    } else {
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}

/// A batch of classified semantic measurements, one per ray that both
/// carried a feature and terminated inside the belief grid.
#[derive(Clone, Debug, Default)]
pub struct MeasurementBatch {
    /// Flat belief-grid cell per measurement, or [`NO_CELL`].
    pub cell_ids: Vec<usize>,
    /// Class index per measurement.
    pub class_ids: Vec<usize>,
}

impl MeasurementBatch {
    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn push(&mut self, cell: usize, class: usize) {
        self.cell_ids.push(cell);
        self.class_ids.push(class);
    }
}

/// Confidence-weighs a measurement batch against the pre-batch belief, then
/// folds the batch into the belief.
///
/// The weight of measurement `i` is `K * confidence(cell_i)[class_i]`, so an
/// uninformed cell yields the neutral weight 1 and a fully confident
/// agreeing cell yields K. Measurements with [`NO_CELL`] get weight 1 and do
/// not touch the belief. The update groups the batch by cell: per-class
/// counts become one observation log-odds added to each touched cell.
pub fn weigh_batch(beliefs: &mut BeliefGrid, batch: &MeasurementBatch) -> Result<Vec<f64>> {
    if batch.cell_ids.len() != batch.class_ids.len() {
        return Err(Error::arg("measurement batch fields disagree in length"));
    }
    let k = beliefs.k;
    let cells = beliefs.cell_count();
    for (&cell, &class) in batch.cell_ids.iter().zip(&batch.class_ids) {
        if class >= k {
            return Err(Error::arg(format!("class id {class} out of range (K = {k})")));
        }
        if cell != NO_CELL && cell >= cells {
            return Err(Error::arg(format!("cell id {cell} out of range ({cells} cells)")));
        }
    }

    let mut weights = vec![1.0; batch.len()];
    let mut conf = vec![0.0; k];
    for (i, (&cell, &class)) in batch.cell_ids.iter().zip(&batch.class_ids).enumerate() {
        if cell == NO_CELL {
            continue;
        }
        confidence_weights(beliefs.cell_logodds(cell), &mut conf);
        weights[i] = conf[class] * k as f64;
    }

    let mut counts: HashMap<usize, Vec<u64>> = HashMap::new();
    for (&cell, &class) in batch.cell_ids.iter().zip(&batch.class_ids) {
        if cell == NO_CELL {
            continue;
        }
        counts.entry(cell).or_insert_with(|| vec![0; k])[class] += 1;
    }
    let mut obs = vec![0.0; k];
    for (cell, c) in counts {
        observation_logodds(&c, &mut obs);
        update_cell(beliefs.cell_logodds_mut(cell), &obs);
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> SceneBounds {
        SceneBounds::new(Vector3::zeros(), Vector3::new(2.0, 2.0, 2.0)).unwrap()
    }

    #[test]
    fn observation_logodds_three_to_one() {
        let mut out = [0.0; 2];
        observation_logodds(&[3, 1], &mut out);
        assert_relative_eq!(out[0], 1.0986122886681098, epsilon = 1e-12);
        assert_relative_eq!(out[1], -1.0986122886681098, epsilon = 1e-12);
    }

    #[test]
    fn observation_logodds_unanimous_is_clamped() {
        let mut out = [0.0; 2];
        observation_logodds(&[4, 0], &mut out);
        let lim = (0.999f64 / 0.001).ln();
        assert_relative_eq!(out[0], lim, epsilon = 1e-12);
        assert_relative_eq!(out[1], -lim, epsilon = 1e-12);
    }

    #[test]
    fn observation_logodds_empty_batch_is_neutral() {
        let mut out = [0.0; 3];
        observation_logodds(&[0, 0, 0], &mut out);
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn confidence_floors_negatives_and_normalizes() {
        let mut out = [0.0; 2];
        confidence_weights(&[1.0986122886681098, -1.0986122886681098], &mut out);
        assert_eq!(out, [1.0, 0.0]);
    }

    #[test]
    fn fresh_cell_confidence_is_uniform() {
        let mut out = [0.0; 4];
        confidence_weights(&[0.0; 4], &mut out);
        assert_eq!(out, [0.25; 4]);
        confidence_weights(&[-3.0, -0.5, -7.0, -0.1], &mut out);
        assert_eq!(out, [0.25; 4]);
    }

    #[test]
    fn update_clamps_to_bound() {
        let mut b = [9.5, -9.5];
        update_cell(&mut b, &[2.0, -2.0]);
        assert_eq!(b, [LOGODDS_CLAMP, -LOGODDS_CLAMP]);
    }

    #[test]
    fn updates_commute_before_the_clamp() {
        let obs = [[0.4, -0.2, 0.1], [-0.3, 0.6, -0.9], [1.1, 0.2, -0.4]];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for o in &obs {
            update_cell(&mut a, o);
        }
        for o in obs.iter().rev() {
            update_cell(&mut b, o);
        }
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn classify_picks_highest_cosine_with_low_index_ties() {
        let prompts = ClassPrompts::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            3,
        )
        .unwrap();
        assert_eq!(classify_measurement(&[0.1, 0.9, 0.2], &prompts), Some(1));
        // Exact tie between classes 0 and 1.
        assert_eq!(classify_measurement(&[0.5, 0.5, 0.0], &prompts), Some(0));
        assert_eq!(classify_measurement(&[0.0, 0.0, 0.0], &prompts), None);
    }

    #[test]
    fn prompts_reject_non_unit_rows() {
        assert!(ClassPrompts::new(vec!["a".into()], vec![0.5, 0.5], 2).is_err());
    }

    #[test]
    fn cell_index_covers_the_box() {
        let g = BeliefGrid::new(bounds(), [4, 4, 4], 2).unwrap();
        assert_eq!(g.cell_index(&Vector3::new(0.0, 0.0, 0.0)), Some(0));
        // Upper boundary lands in the last cell, not out of range.
        assert_eq!(g.cell_index(&Vector3::new(2.0, 2.0, 2.0)), Some(63));
        assert_eq!(g.cell_index(&Vector3::new(2.1, 0.0, 0.0)), None);
    }

    #[test]
    fn consistent_history_suppresses_the_outlier() {
        let mut beliefs = BeliefGrid::new(bounds(), [1, 1, 1], 2).unwrap();
        // 100 agreeing measurements of class 0, folded in over many batches.
        for _ in 0..10 {
            let mut batch = MeasurementBatch::default();
            for _ in 0..10 {
                batch.push(0, 0);
            }
            weigh_batch(&mut beliefs, &batch).unwrap();
        }
        let mut batch = MeasurementBatch::default();
        batch.push(0, 1);
        let w = weigh_batch(&mut beliefs, &batch).unwrap();
        assert!(w[0] < 0.05, "outlier weight {} should be crushed", w[0]);
    }

    #[test]
    fn no_cell_measurements_are_neutral_and_silent() {
        let mut beliefs = BeliefGrid::new(bounds(), [2, 2, 2], 3).unwrap();
        let before = beliefs.logodds.clone();
        let mut batch = MeasurementBatch::default();
        batch.push(NO_CELL, 2);
        let w = weigh_batch(&mut beliefs, &batch).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(beliefs.logodds, before);
    }

    #[test]
    fn weigh_batch_rejects_out_of_range_ids() {
        let mut beliefs = BeliefGrid::new(bounds(), [2, 2, 2], 3).unwrap();
        let mut batch = MeasurementBatch::default();
        batch.push(99, 0);
        assert!(weigh_batch(&mut beliefs, &batch).is_err());
        let mut batch = MeasurementBatch::default();
        batch.push(0, 7);
        assert!(weigh_batch(&mut beliefs, &batch).is_err());
    }

    /// Scalar reference: weights one measurement at a time against the
    /// frozen pre-batch belief, then folds counts per cell, no batching
    /// tricks. `weigh_batch` must match it exactly.
    fn oracle_weigh(beliefs: &mut BeliefGrid, batch: &MeasurementBatch) -> Vec<f64> {
        let k = beliefs.k;
        let frozen = beliefs.clone();
        let mut weights = Vec::with_capacity(batch.len());
        for (&cell, &class) in batch.cell_ids.iter().zip(&batch.class_ids) {
            if cell == NO_CELL {
                weights.push(1.0);
                continue;
            }
            let mut conf = vec![0.0; k];
            confidence_weights(frozen.cell_logodds(cell), &mut conf);
            weights.push(conf[class] * k as f64);
        }
        for cell in 0..beliefs.cell_count() {
            let mut counts = vec![0u64; k];
            let mut touched = false;
            for (&c, &cl) in batch.cell_ids.iter().zip(&batch.class_ids) {
                if c == cell {
                    counts[cl] += 1;
                    touched = true;
                }
            }
            if touched {
                let mut obs = vec![0.0; k];
                observation_logodds(&counts, &mut obs);
                update_cell(beliefs.cell_logodds_mut(cell), &obs);
            }
        }
        weights
    }

    #[test]
    fn weigh_batch_matches_scalar_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..300 {
            let k = rng.random_range(2..6usize);
            let res = [rng.random_range(1..4usize), rng.random_range(1..4), rng.random_range(1..4)];
            let mut a = BeliefGrid::new(bounds(), res, k).unwrap();
            for l in a.logodds.iter_mut() {
                *l = rng.random_range(-12.0f64..12.0).clamp(-LOGODDS_CLAMP, LOGODDS_CLAMP);
            }
            let mut b = a.clone();
            let mut batch = MeasurementBatch::default();
            for _ in 0..rng.random_range(0..40usize) {
                let cell = if rng.random_range(0.0..1.0) < 0.1 {
                    NO_CELL
                } else {
                    rng.random_range(0..a.cell_count())
                };
                batch.push(cell, rng.random_range(0..k));
            }
            let got = weigh_batch(&mut a, &batch).unwrap();
            let want = oracle_weigh(&mut b, &batch);
            assert_eq!(got, want, "weights must match the scalar reference exactly");
            assert_eq!(a.logodds, b.logodds, "updated beliefs must match exactly");
        }
    }

    #[test]
    fn weigh_batch_is_order_invariant_within_a_batch() {
        // Weights are read against the frozen pre-batch state and counts
        // are order-free, so permuting a batch permutes the weights.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = 4;
        let mut a = BeliefGrid::new(bounds(), [2, 2, 2], k).unwrap();
        for l in a.logodds.iter_mut() {
            *l = rng.random_range(-5.0..5.0);
        }
        let mut b = a.clone();
        let mut batch = MeasurementBatch::default();
        for _ in 0..30 {
            batch.push(rng.random_range(0..8usize), rng.random_range(0..k));
        }
        let mut perm: Vec<usize> = (0..30).collect();
        for i in (1..30usize).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut shuffled = MeasurementBatch::default();
        for &i in &perm {
            shuffled.push(batch.cell_ids[i], batch.class_ids[i]);
        }
        let wa = weigh_batch(&mut a, &batch).unwrap();
        let wb = weigh_batch(&mut b, &shuffled).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert_eq!(wb[pos], wa[src]);
        }
        assert_eq!(a.logodds, b.logodds);
    }

    proptest! {
        #[test]
        fn confidences_form_a_distribution(
            logodds in proptest::collection::vec(-10.0f64..10.0, 1..8)
        ) {
            let mut out = vec![0.0; logodds.len()];
            confidence_weights(&logodds, &mut out);
            for &c in &out {
                prop_assert!(c >= 0.0);
            }
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn beliefs_stay_clamped(
            obs in proptest::collection::vec(-20.0f64..20.0, 1..6),
            reps in 1usize..20
        ) {
            let mut belief = vec![0.0; obs.len()];
            for _ in 0..reps {
                update_cell(&mut belief, &obs);
            }
            for &b in &belief {
                prop_assert!(b.abs() <= LOGODDS_CLAMP);
            }
        }
    }
}

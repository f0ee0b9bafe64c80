//! Per-frame mean average precision over dense multi-label grids.

use serde::Serialize;

use crate::error::{PatError, Result};

/// Frame-level predictions and binary labels pooled across sequences,
/// `n_frames × classes`, row-major.
pub struct EvalBatch {
    scores: Vec<f64>,
    labels: Vec<u8>,
    classes: usize,
    offsets: Vec<usize>,
}

impl EvalBatch {
    pub fn new(classes: usize) -> Self {
        EvalBatch { scores: Vec::new(), labels: Vec::new(), classes, offsets: vec![0] }
    }

    pub fn push_sequence(&mut self, scores: &[f64], labels: &[u8]) -> Result<()> {
        if scores.len() != labels.len() || scores.len() % self.classes != 0 {
            return Err(PatError::ShapeMismatch {
                op: "eval_batch",
                lhs: vec![scores.len()],
                rhs: vec![labels.len(), self.classes],
            });
        }
        if scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(PatError::Config("scores must lie in [0,1]".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(PatError::Config("labels must be binary".into()));
        }
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
        self.offsets.push(self.scores.len() / self.classes);
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.scores.len() / self.classes.max(1)
    }

    fn class_column(&self, c: usize) -> (Vec<f64>, Vec<u8>) {
        let n = self.n_frames();
        let mut s = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        for f in 0..n {
            s.push(self.scores[f * self.classes + c]);
            l.push(self.labels[f * self.classes + c]);
        }
        (s, l)
    }
}

#[derive(Serialize, Debug, Clone)]
pub struct MapReport {
    pub map: f64,
    /// One entry per class; `None` marks classes with zero positives, which
    /// are excluded from the mean rather than counted as 0.
    pub per_class_ap: Vec<Option<f64>>,
    pub n_frames: usize,
}

/// All-points average precision. Items are ranked by descending score with
/// ties broken by ascending original index; AP averages precision at each
/// positive's rank. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum_prec = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum_prec += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum_prec / positives as f64)
}

/// Mean of per-class AP over all frames pooled globally per class. Classes
/// without positives are excluded; failing every class is an error.
pub fn per_frame_map(batch: &EvalBatch) -> Result<MapReport> {
    let mut per_class = Vec::with_capacity(batch.classes);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..batch.classes {
        let (s, l) = batch.class_column(c);
        let ap = average_precision(&s, &l);
        if let Some(v) = ap {
            sum += v;
            defined += 1;
        }
        per_class.push(ap);
    }
    if defined == 0 {
        return Err(PatError::Config("no class has a positive frame; mAP undefined".into()));
    }
    Ok(MapReport { map: sum / defined as f64, per_class_ap: per_class, n_frames: batch.n_frames() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::average_precision_brute;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_ranking_gives_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn hand_rankings() {
        // Single positive at rank 2.
        let ap = average_precision(&[0.2, 0.9], &[1, 0]).unwrap();
        assert!((ap - 0.5).abs() <= 1e-12);
        // Positives at ranks 1 and 3.
        let ap = average_precision(&[0.9, 0.3, 0.5], &[1, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn no_positives_is_undefined_not_zero() {
        assert!(average_precision(&[0.5, 0.4], &[0, 0]).is_none());
    }

    #[test]
    fn constant_scores_use_index_tie_break() {
        // All scores equal: ranking is original order, so AP is computed on
        // the label sequence as-is.
        let ap = average_precision(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 0.5) / 2.0).abs() <= 1e-12);
        assert_eq!(
            ap,
            average_precision_brute(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap()
        );
    }

    #[test]
    fn matches_brute_force_oracle_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for n in 1..=8 {
            for mask in 1u32..(1 << n) {
                let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
                let a = average_precision(&scores, &labels).unwrap();
                let b = average_precision_brute(&scores, &labels).unwrap();
                assert!((a - b).abs() <= 1e-12, "n={n} mask={mask}");
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..10);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            if labels.iter().all(|&l| l == 0) {
                continue;
            }
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).tanh()).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&transformed, &labels).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn map_pools_globally_and_ignores_sequence_order() {
        let mut b1 = EvalBatch::new(2);
        b1.push_sequence(&[0.9, 0.1, 0.2, 0.8], &[1, 0, 0, 1]).unwrap();
        b1.push_sequence(&[0.7, 0.6], &[0, 1]).unwrap();
        let mut b2 = EvalBatch::new(2);
        b2.push_sequence(&[0.7, 0.6], &[0, 1]).unwrap();
        b2.push_sequence(&[0.9, 0.1, 0.2, 0.8], &[1, 0, 0, 1]).unwrap();
        let r1 = per_frame_map(&b1).unwrap();
        let r2 = per_frame_map(&b2).unwrap();
        assert!((r1.map - r2.map).abs() <= 1e-12);
        assert_eq!(r1.n_frames, 3);
    }

    #[test]
    fn class_without_positives_excluded_from_mean() {
        let mut b = EvalBatch::new(2);
        b.push_sequence(&[0.9, 0.4, 0.1, 0.3], &[1, 0, 0, 0]).unwrap();
        let r = per_frame_map(&b).unwrap();
        assert_eq!(r.per_class_ap[1], None);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn all_empty_classes_is_error() {
        let mut b = EvalBatch::new(1);
        b.push_sequence(&[0.5, 0.5], &[0, 0]).unwrap();
        assert!(per_frame_map(&b).is_err());
    }
}

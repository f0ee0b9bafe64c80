//! Training objectives: asymmetric focal loss with easy-negative discard, and
//! the plain BCE baseline (the γ₊=γ₋=0, δ=0 special case of the same form).

use serde::{Deserialize, Serialize};

use crate::error::{PatError, Result};
use crate::tape::{self, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Asymmetric,
    Bce,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossParams {
    pub mode: LossMode,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub delta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { mode: LossMode::Asymmetric, gamma_pos: 1.0, gamma_neg: 3.0, delta: 0.1 }
    }
}

impl LossParams {
    pub fn bce() -> Self {
        LossParams { mode: LossMode::Bce, gamma_pos: 0.0, gamma_neg: 0.0, delta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(PatError::Config("focusing exponents must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(PatError::Config("delta must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Exponents/shift actually applied; BCE mode zeroes all three.
    pub fn effective(&self) -> (f64, f64, f64) {
        match self.mode {
            LossMode::Asymmetric => (self.gamma_pos, self.gamma_neg, self.delta),
            LossMode::Bce => (0.0, 0.0, 0.0),
        }
    }
}

/// Single-element asymmetric loss. Positives: −(1−y)^γ₊·log y. Negatives:
/// the probability is shifted down by δ and clamped at zero, discarding easy
/// negatives entirely.
pub fn asymmetric_loss(g: u8, y: f64, params: &LossParams) -> Result<f64> {
    if g > 1 {
        return Err(PatError::Config(format!("label must be 0 or 1, got {g}")));
    }
    let (gp, gn, delta) = params.effective();
    Ok(tape::asl_value(g, y, gp, gn, delta))
}

/// Plain binary cross entropy for one element.
pub fn bce_loss(g: u8, y: f64) -> f64 {
    tape::asl_value(g, y, 0.0, 0.0, 0.0)
}

/// Per-head α weights paired with prediction grids on a tape.
pub struct WeightedHead {
    pub probs: Var,
    pub alpha: f64,
}

/// Total training loss over the label grid: mean over time, sum over classes,
/// α-weighted sum over heads. `labels` is the T×C multi-hot grid, row-major.
pub fn total_loss<E: Scalar>(
    tape: &mut Tape<E>,
    heads: &[WeightedHead],
    labels: &[u8],
    t_len: usize,
    params: &LossParams,
) -> Result<Var> {
    let (gp, gn, delta) = params.effective();
    let mut acc: Option<Var> = None;
    for head in heads {
        if tape.value(head.probs).numel() != labels.len() {
            return Err(PatError::ShapeMismatch {
                op: "total_loss",
                lhs: tape.value(head.probs).shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let scale = head.alpha / t_len as f64;
        let term = tape.asl_sum(head.probs, labels, gp, gn, delta, scale)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| PatError::Config("total_loss requires at least one head".into()))
}

/// Non-tape evaluation of the same total, for logging and tests.
pub fn total_loss_value(
    heads: &[(&[f64], f64)],
    labels: &[u8],
    t_len: usize,
    params: &LossParams,
) -> f64 {
    let (gp, gn, delta) = params.effective();
    let mut total = 0.0;
    for (probs, alpha) in heads {
        let sum: f64 = probs
            .iter()
            .zip(labels)
            .map(|(&y, &g)| tape::asl_value(g, y, gp, gn, delta))
            .sum();
        total += alpha * sum / t_len as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn asl() -> LossParams {
        LossParams::default()
    }

    #[test]
    fn hand_values() {
        // g=1, y=0.5, γ₊=1: −0.5·ln 0.5
        let v = asymmetric_loss(1, 0.5, &asl()).unwrap();
        assert!((v - 0.346574).abs() <= 1e-6);
        // g=0, y=0.6, γ₋=3, δ=0.1: −0.5³·ln 0.5
        let v = asymmetric_loss(0, 0.6, &asl()).unwrap();
        assert!((v - 0.086643).abs() <= 1e-6);
    }

    #[test]
    fn perfect_positive_is_near_zero() {
        let v = asymmetric_loss(1, 1.0 - 1e-9, &asl()).unwrap();
        assert!(v.abs() < 1e-5);
    }

    #[test]
    fn easy_negatives_are_discarded_exactly() {
        for y in [0.0, 0.02, 0.05, 0.08, 0.0999, 0.1] {
            assert_eq!(asymmetric_loss(0, y, &asl()).unwrap(), 0.0);
            assert_eq!(tape::asl_grad(0, y, 1.0, 3.0, 0.1), 0.0);
        }
    }

    #[test]
    fn invalid_label_rejected() {
        assert!(asymmetric_loss(2, 0.5, &asl()).is_err());
    }

    #[test]
    fn bce_hand_value_and_symmetry() {
        assert!((bce_loss(1, 0.5) - std::f64::consts::LN_2).abs() <= 1e-9);
        for y in [0.1, 0.33, 0.77] {
            assert!((bce_loss(1, y) - bce_loss(0, 1.0 - y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn asymmetric_reduces_to_bce_with_zero_exponents() {
        let p = LossParams { mode: LossMode::Asymmetric, gamma_pos: 0.0, gamma_neg: 0.0, delta: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let y: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
            let g: u8 = rng.gen_range(0..=1);
            let a = asymmetric_loss(g, y, &p).unwrap();
            let b = bce_loss(g, y);
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn monotonicity_and_nonnegativity() {
        let p = asl();
        let mut prev_pos = f64::INFINITY;
        let mut prev_neg = -1.0;
        for k in 1..100 {
            let y = k as f64 / 100.0;
            let lp = asymmetric_loss(1, y, &p).unwrap();
            let ln = asymmetric_loss(0, y, &p).unwrap();
            assert!(lp >= 0.0 && ln >= 0.0);
            assert!(lp <= prev_pos, "positive loss must be nonincreasing in y");
            if y > p.delta {
                assert!(ln >= prev_neg, "negative loss must be nondecreasing past delta");
            }
            prev_pos = lp;
            prev_neg = ln;
        }
    }

    #[test]
    fn total_loss_hand_value_and_perfect_case() {
        // T=1, C=1, α=(0.5,0.5), both heads y=0.5 on g=1.
        let mut tape = Tape::<f64>::new();
        let y1 = tape.leaf(Tensor::from_vec(&[1, 1], vec![0.5]).unwrap(), false).unwrap();
        let y2 = tape.leaf(Tensor::from_vec(&[1, 1], vec![0.5]).unwrap(), false).unwrap();
        let heads = [WeightedHead { probs: y1, alpha: 0.5 }, WeightedHead { probs: y2, alpha: 0.5 }];
        let l = total_loss(&mut tape, &heads, &[1], 1, &asl()).unwrap();
        assert!((tape.value(l).data()[0] - 0.346574).abs() <= 1e-6);

        // Perfect heads give (near) zero loss.
        let mut tape = Tape::<f64>::new();
        let y1 = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0 - 1e-9, 1e-9]).unwrap(), false).unwrap();
        let heads = [WeightedHead { probs: y1, alpha: 1.0 }];
        let l = total_loss(&mut tape, &heads, &[1, 0], 1, &asl()).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-5);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t_len = 3;
        let c = 2;
        let labels: Vec<u8> = (0..t_len * c).map(|_| rng.gen_range(0..=1)).collect();
        let y: Vec<f64> = (0..t_len * c).map(|_| rng.gen_range(0.15..0.9)).collect();
        let p = asl();

        let eval = |data: &[f64], with_grad: bool| {
            let mut tape = Tape::<f64>::new();
            let yv = tape
                .leaf(Tensor::from_vec(&[t_len, c], data.to_vec()).unwrap(), true)
                .unwrap();
            let heads = [WeightedHead { probs: yv, alpha: 1.0 }];
            let l = total_loss(&mut tape, &heads, &labels, t_len, &p).unwrap();
            let loss = tape.value(l).data()[0];
            if with_grad {
                tape.backward(l).unwrap();
                (loss, tape.grad(yv).unwrap().data().to_vec())
            } else {
                (loss, vec![])
            }
        };

        let (_, analytic) = eval(&y, true);
        let h = 1e-6;
        for k in 0..y.len() {
            let mut yp = y.clone();
            yp[k] += h;
            let (lp, _) = eval(&yp, false);
            yp[k] -= 2.0 * h;
            let (lm, _) = eval(&yp, false);
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (analytic[k] - numeric).abs() / 1.0f64.max(numeric.abs()) <= 1e-5,
                "coord {k}: analytic {} numeric {}",
                analytic[k],
                numeric
            );
        }
    }

    #[test]
    fn total_loss_invariant_under_class_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t_len, c) = (4, 3);
        let labels: Vec<u8> = (0..t_len * c).map(|_| rng.gen_range(0..=1)).collect();
        let y: Vec<f64> = (0..t_len * c).map(|_| rng.gen_range(0.05..0.95)).collect();
        let perm = [2usize, 0, 1];
        let mut labels_p = labels.clone();
        let mut y_p = y.clone();
        for t in 0..t_len {
            for (j, &pj) in perm.iter().enumerate() {
                labels_p[t * c + j] = labels[t * c + pj];
                y_p[t * c + j] = y[t * c + pj];
            }
        }
        let p = asl();
        let a = total_loss_value(&[(&y, 1.0)], &labels, t_len, &p);
        let b = total_loss_value(&[(&y_p, 1.0)], &labels_p, t_len, &p);
        assert!((a - b).abs() <= 1e-12);
    }
}

//! Counting errors, rotation accuracy and binary classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicted count `y_c` against ground truth `y_gt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub predicted: f64,
    pub ground_truth: f64,
}

impl CountPair {
    pub fn new(ground_truth: f64, predicted: f64) -> Self {
        CountPair { predicted, ground_truth }
    }
}

/// Mean absolute error, `(1/n) Σ |y_c − y_gt|`.
pub fn mae(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(pairs.iter().map(|p| (p.predicted - p.ground_truth).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Mean squared error `(1/n) Σ (y_c − y_gt)²`, or its square root when `root`.
pub fn mse(pairs: &[CountPair], root: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let m = pairs.iter().map(|p| (p.predicted - p.ground_truth).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(if root { m.sqrt() } else { m })
}

/// Binary confusion counts with violent (label 1) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn from_labels(predicted: &[u8], actual: &[u8]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::LengthMismatch(predicted.len(), actual.len()));
        }
        let mut cm = ConfusionMatrix::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            cm.record(p == 1, a == 1);
        }
        Ok(cm)
    }

    pub fn record(&mut self, predicted_positive: bool, actual_positive: bool) {
        match (predicted_positive, actual_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    /// `[[tn, fp], [fn, tp]]`.
    pub fn as_rows(&self) -> [[u64; 2]; 2] {
        [[self.tn, self.fp], [self.fn_, self.tp]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> PrecisionRecall {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let (f1, f1_degenerate) = f1_score(precision, recall);
    PrecisionRecall {
        precision,
        recall,
        f1,
        degenerate: degenerate || f1_degenerate,
    }
}

/// Harmonic mean; `(0, true)` when both inputs are zero.
pub fn f1_score(precision: f64, recall: f64) -> (f64, bool) {
    if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    }
}

/// Fraction of exact label matches.
pub fn rotation_accuracy<L: PartialEq>(predicted: &[L], truth: &[L]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Rounds half away from zero to `places` decimals, for report tables.
pub fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(v: &[(f64, f64)]) -> Vec<CountPair> {
        v.iter().map(|&(gt, p)| CountPair::new(gt, p)).collect()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&pairs(&[(5.0, 5.0), (3.0, 3.0)])).unwrap(), 0.0);
        assert_eq!(mae(&pairs(&[(10.0, 7.0)])).unwrap(), 3.0);
        let scale_invariant = pairs(&[(427.0, 423.16), (240.0, 286.89), (320.0, 288.69)]);
        let hand = (3.84 + 46.89 + 31.31) / 3.0;
        assert!((mae(&scale_invariant).unwrap() - hand).abs() < 1e-9);
        assert!((hand - 27.3466).abs() < 1e-4);
        assert!(matches!(mae(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&pairs(&[(2.0, 2.0)]), false).unwrap(), 0.0);
        assert_eq!(mse(&pairs(&[(0.0, 1.0)]), false).unwrap(), 1.0);
        let occluded = pairs(&[(147.0, 139.35), (279.0, 283.74), (199.0, 223.75)]);
        let hand = (7.65f64.powi(2) + 4.74f64.powi(2) + 24.75f64.powi(2)) / 3.0;
        assert!((mse(&occluded, false).unwrap() - hand).abs() < 1e-9);
        assert!((mse(&occluded, true).unwrap() - hand.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn prf_examples() {
        let all_neg = ConfusionMatrix { tn: 10, ..Default::default() };
        let r = precision_recall_f1(&all_neg);
        assert!(r.degenerate);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        let (f1, _) = f1_score(0.91, 0.82);
        assert!((f1 - 0.8627).abs() < 1e-4);
        assert_eq!(round_to(f1, 2), 0.86);
        let (f1, _) = f1_score(0.93, 0.92);
        assert!((f1 - 0.92497).abs() < 1e-4);

        let perfect = ConfusionMatrix { tp: 4, tn: 4, ..Default::default() };
        let r = precision_recall_f1(&perfect);
        assert_eq!((r.precision, r.recall, r.f1, r.degenerate), (1.0, 1.0, 1.0, false));
    }

    #[test]
    fn confusion_from_labels() {
        let cm = ConfusionMatrix::from_labels(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(cm.as_rows(), [[1, 1], [1, 2]]);
        assert!(ConfusionMatrix::from_labels(&[1], &[]).is_err());
    }

    #[test]
    fn rotation_accuracy_examples() {
        assert_eq!(rotation_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(rotation_accuracy(&[0, 1, 2, 3], &[1, 2, 3, 0]).unwrap(), 0.0);
        assert!(matches!(rotation_accuracy(&[0], &[0, 1]), Err(Error::LengthMismatch(1, 2))));

        // binomial bound: sd = sqrt(0.25*0.75/4000) ~ 0.0068, so 0.03 is > 4 sd
        let mut rng = ChaCha8Rng::seed_from_u64(4000);
        let truth: Vec<u8> = (0..4000).map(|i| (i % 4) as u8).collect();
        let guess: Vec<u8> = (0..4000).map(|_| rng.gen_range(0..4)).collect();
        assert!((rotation_accuracy(&guess, &truth).unwrap() - 0.25).abs() <= 0.03);
    }

    proptest! {
        #[test]
        fn mae_bounded_by_root_mse_and_scales(
            raw in prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..20),
            k in -4.0f64..4.0,
        ) {
            let p = pairs(&raw);
            let a = mae(&p).unwrap();
            let r = mse(&p, true).unwrap();
            prop_assert!(a <= r + 1e-9);
            let scaled: Vec<_> = p.iter().map(|c| CountPair::new(c.ground_truth * k, c.predicted * k)).collect();
            prop_assert!((mae(&scaled).unwrap() - k.abs() * a).abs() <= 1e-9 * (1.0 + a * k.abs()));
            let m = mse(&p, false).unwrap();
            prop_assert!((mse(&scaled, false).unwrap() - k * k * m).abs() <= 1e-9 * (1.0 + m * k * k));
            let mut rev = p.clone();
            rev.reverse();
            prop_assert!((mae(&rev).unwrap() - a).abs() < 1e-9);
        }

        #[test]
        fn f1_between_precision_and_recall(tp in 1u64..100, fp in 0u64..100, fn_ in 0u64..100) {
            let r = precision_recall_f1(&ConfusionMatrix { tp, fp, tn: 0, fn_ });
            prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
        }
    }
}

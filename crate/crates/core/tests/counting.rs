use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdlab_core::density::{count_from_density, generate_density_map};
use crowdlab_core::metrics::{f1_score, mae, mse, precision_recall_f1, round_to, ConfusionMatrix, CountPair};
use crowdlab_core::ot_stage2::{calibrate_scale, CalibrationReference, PriorSpec};

#[test]
fn count_table_errors() {
    let pairs: Vec<CountPair> = [(427.0, 423.16), (240.0, 286.89), (320.0, 288.69)]
        .iter()
        .map(|&(g, p)| CountPair::new(g, p))
        .collect();
    assert_relative_eq!(mae(&pairs).unwrap(), 82.04 / 3.0, epsilon = 1e-9);
    let sq = 3.84f64.powi(2) + 46.89f64.powi(2) + 31.31f64.powi(2);
    assert_relative_eq!(mse(&pairs, false).unwrap(), sq / 3.0, epsilon = 1e-9);
    assert_relative_eq!(mse(&pairs, true).unwrap(), (sq / 3.0).sqrt(), epsilon = 1e-9);
    assert!(mae(&[]).is_err());
}

#[test]
fn confusion_to_f1() {
    let predicted = [1, 1, 1, 0, 0, 1, 0, 0, 1, 1];
    let actual = [1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
    let cm = ConfusionMatrix::from_labels(&predicted, &actual).unwrap();
    assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (5, 1, 3, 1));
    let s = precision_recall_f1(&cm);
    assert_relative_eq!(s.precision, 5.0 / 6.0);
    assert_relative_eq!(s.recall, 5.0 / 6.0);
    assert_relative_eq!(s.f1, 5.0 / 6.0, epsilon = 1e-12);
    assert_relative_eq!(cm.accuracy(), 0.8);
    assert_eq!(f1_score(0.0, 0.0), (0.0, true));
    assert_eq!(round_to(0.86274, 2), 0.86);
}

#[test]
fn calibrated_density_counts_track_annotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = PriorSpec {
        alpha: 2.0,
        cmin: 1.0,
        cmax: 100.0,
    };
    let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.5..2.0)).collect();
    let scale = calibrate_scale(&CalibrationReference::PriorMean {
        spec: &spec,
        raw_crop_sums: &raw,
    })
    .unwrap();
    let mean_raw = raw.iter().sum::<f64>() / raw.len() as f64;
    assert_relative_eq!(scale * mean_raw, spec.mean(), epsilon = 1e-9);
    assert!(calibrate_scale(&CalibrationReference::PriorMean {
        spec: &spec,
        raw_crop_sums: &[0.0, 0.0],
    })
    .is_err());

    let pts: Vec<_> = (0..12).map(|_| [rng.gen_range(0.0..40.0), rng.gen_range(0.0..32.0)].into()).collect();
    let map = generate_density_map::<f64>(&pts, 32, 40, 3.0).unwrap();
    assert_relative_eq!(count_from_density(&map), 12.0, epsilon = 1e-6);
}

/// The printed occluded-scene fixture; unreachable from its own triples (they give 231.1842).
#[test]
#[ignore = "printed literal disagrees with its triples; run with --ignored to see the gap"]
fn occluded_scene_mse_literal() {
    let pairs: Vec<CountPair> = [(147.0, 139.35), (279.0, 283.74), (199.0, 223.75)]
        .iter()
        .map(|&(g, p)| CountPair::new(g, p))
        .collect();
    assert_relative_eq!(mse(&pairs, false).unwrap(), 231.1002, epsilon = 1e-3);
}

use gep_core::gep::{
    calibrate_threshold, mae, predict_accuracy, predicted_fraction, true_accuracy, CalibrationInput, GepError,
    GepEstimate, Threshold,
};
use proptest::prelude::*;

fn calibrate(scores: &[f64], acc: f64) -> Threshold<f64> {
    calibrate_threshold(CalibrationInput {
        val_scores: scores,
        val_accuracy: acc,
    })
    .unwrap()
}

fn estimate(p: f64) -> GepEstimate {
    GepEstimate {
        predicted_accuracy: p,
        tau: 0.5,
        method: "conf".into(),
        target: "far".into(),
    }
}

#[test]
fn calibration_examples() {
    let t = calibrate(&[0.2, 0.4, 0.6, 0.8], 0.5);
    assert_eq!((t.tau, t.achieved_val_error), (0.6, 0.0));
    let scores = [0.31, 0.05, 0.77, 0.5];
    assert_eq!(calibrate(&scores, 1.0).tau, 0.05);
    let none = calibrate(&scores, 0.0);
    assert_eq!((none.tau, none.achieved_val_error), (1.77, 0.0));
    assert!(matches!(
        calibrate_threshold(CalibrationInput::<f64> {
            val_scores: &[],
            val_accuracy: 0.5
        }),
        Err(GepError::EmptyScores)
    ));
}

#[test]
fn prediction_examples() {
    let scores = [0.1, 0.5, 0.9];
    let at = |tau: f64| {
        predict_accuracy(
            &scores,
            &Threshold {
                tau,
                achieved_val_error: 0.0,
            },
            "conf",
            "near",
        )
        .unwrap()
    };
    assert_eq!(at(0.05).predicted_accuracy, 1.0);
    assert_eq!(at(0.91).predicted_accuracy, 0.0);
    let e = at(0.5);
    assert_eq!(e.predicted_accuracy, 2.0 / 3.0);
    assert_eq!((e.method.as_str(), e.target.as_str(), e.tau), ("conf", "near", 0.5));
}

#[test]
fn accuracy_and_mae_examples() {
    assert_eq!(true_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(true_accuracy(&[0, 1, 0], &[1, 0, 1]).unwrap(), 0.0);
    assert_eq!(true_accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
    assert!(true_accuracy(&[0], &[0, 1]).is_err());
    assert_eq!(mae(&[estimate(0.4), estimate(0.6)], &[0.4, 0.6]).unwrap(), 0.0);
    assert!((mae(&[estimate(0.8)], &[0.7]).unwrap() - 0.1).abs() < 1e-15);
    assert!((mae(&[estimate(0.9), estimate(0.5)], &[0.8, 0.7]).unwrap() - 0.15).abs() < 1e-15);
    assert!(mae(&[estimate(0.9)], &[0.8, 0.7]).is_err());
}

#[test]
fn lattice_scores_give_unique_smallest_tau() {
    // all ties inside one lattice gap map to the same smallest candidate
    let scores = [0.1, 0.1, 0.2, 0.2, 0.2, 0.3];
    let t = calibrate(&scores, 0.5);
    assert_eq!(t.tau, 0.2);
    assert!((t.achieved_val_error - 1.0 / 6.0).abs() < 1e-15);
}

fn lattice_scores() -> impl Strategy<Value = Vec<f64>> {
    (1usize..50)
        .prop_flat_map(|levels| prop::collection::vec((0..=levels).prop_map(move |k| k as f64 / levels as f64), 1..200))
}

proptest! {
    #[test]
    fn prediction_is_nonincreasing_in_tau(scores in prop::collection::vec(0.0f64..=1.0, 1..100)) {
        let mut last = f64::INFINITY;
        for step in 0..=120 {
            let tau = -0.1 + step as f64 * 0.01;
            let p = predicted_fraction(&scores, tau).unwrap();
            prop_assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn distinct_scores_calibrate_within_one_over_n(
        raw in prop::collection::btree_set(0u32..1_000_000, 1..300),
        correct in any::<prop::sample::Index>(),
    ) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 1e6).collect();
        let n = scores.len();
        let acc = correct.index(n + 1) as f64 / n as f64;
        let t = calibrate(&scores, acc);
        let p = predicted_fraction(&scores, t.tau).unwrap();
        prop_assert!((p - acc).abs() <= 1.0 / n as f64 + 1e-12);
        prop_assert!(((p - acc).abs() - t.achieved_val_error).abs() < 1e-12);
    }

    #[test]
    fn calibration_is_exact_and_smallest(scores in lattice_scores(), acc in 0.0f64..=1.0) {
        let t = calibrate(&scores, acc);
        let n = scores.len();
        let inv_n = 1.0 / n as f64;
        let err = |tau: f64| (acc - scores.iter().filter(|&&s| s >= tau).count() as f64 * inv_n).abs();
        prop_assert_eq!(err(t.tau), t.achieved_val_error);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut candidates: Vec<f64> = scores.clone();
        candidates.push(max + 1.0);
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let best = candidates.iter().map(|&c| err(c)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(best, t.achieved_val_error);
        let first = candidates.iter().find(|&&c| err(c) == best).unwrap();
        prop_assert_eq!(*first, t.tau);
    }
}

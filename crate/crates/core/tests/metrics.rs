mod common;

use common::oracles::rectangle_area;
use fastrm::confidence::{audit, confidence_threshold, entropy, kde_fit};
use fastrm::eval::{auc, classify_metrics, constant_f1, mask_count, removal_order, Direction};
use proptest::prelude::*;

#[test]
fn kde_integrates_to_one() {
    let values: Vec<f64> = (0..200).map(|k| ((k * 37) % 101) as f64 / 25.0 + if k % 3 == 0 { 6.0 } else { 0.0 }).collect();
    let kde = kde_fit(&values).unwrap();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (lo, hi) = (mean - 6.0 * sigma, mean + 6.0 * sigma);
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let ys: Vec<f64> = (0..=steps).map(|k| kde.density(lo + h * k as f64)).collect();
    let area: f64 = ys.windows(2).map(|w| h * (w[0] + w[1]) / 2.0).sum();
    assert!((area - 1.0).abs() <= 1e-3, "area {area}");
    assert!(ys.iter().all(|&d| d >= 0.0));
    assert!(kde.curve(200).iter().all(|&(_, d)| d >= 0.0));
}

#[test]
fn kde_refuses_small_or_flat_input() {
    assert!(kde_fit(&[1.0; 5]).is_err());
    assert!(kde_fit(&[2.0; 40]).is_err());
}

#[test]
fn entropy_reference_values() {
    assert!((entropy(&[1.0; 36]).unwrap() - 36f64.ln()).abs() < 1e-12);
    assert_eq!(entropy(&[0.0, 0.0, 4.0, 0.0]).unwrap(), 0.0);
    assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-15);
    assert!(entropy(&[0.0, 0.0]).is_err());
}

#[test]
fn constant_predictor_f1() {
    // Predicting every patch relevant: precision is the prevalence, recall is one.
    assert!((constant_f1(0.25) - 0.4).abs() < 1e-15);
    assert_eq!(constant_f1(0.0), 0.0);
}

#[test]
fn audit_refuses_shared_samples() {
    assert!(audit(&[0.1, 0.2], &[true, false], 0.15, &[1, 2], &[2, 3]).is_err());
    let r = audit(&[0.1, 0.2, 0.05, 0.3], &[true, false, false, true], 0.15, &[1, 2, 3, 4], &[7]).unwrap();
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (1, 1, 1, 1));
    assert!((confidence_threshold(&[1.0, 3.0], &[5.0]).unwrap() - 3.5).abs() < 1e-15);
}

#[test]
fn mask_counts_round_up() {
    assert_eq!(mask_count(0.0, 36), 0);
    assert_eq!(mask_count(0.1, 36), 4);
    assert_eq!(mask_count(0.3, 10), 3);
    assert_eq!(mask_count(0.9, 36), 33);
    assert_eq!(mask_count(1.0, 36), 36);
}

fn brute_counts(p: &[Vec<f64>], t: &[Vec<bool>], thr: f64) -> [usize; 4] {
    let mut c = [0; 4];
    for (pr, tr) in p.iter().zip(t) {
        for (&v, &y) in pr.iter().zip(tr) {
            let k = match (v >= thr, y) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            };
            c[k] += 1;
        }
    }
    c
}

proptest! {
    #[test]
    fn auc_matches_rectangle_sum(values in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let xs: Vec<f64> = (0..values.len()).map(|k| k as f64 / 10.0).collect();
        let want = rectangle_area(&xs, &values, 50) / (xs[xs.len() - 1] - xs[0]);
        prop_assert!((auc(&xs, &values).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn auc_of_constant_is_the_constant(c in 0.0f64..1.0, n in 2usize..12) {
        let xs: Vec<f64> = (0..n).map(|k| k as f64 * 0.1).collect();
        prop_assert!((auc(&xs, &vec![c; n]).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts_match_direct_count(
        rows in prop::collection::vec(prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..10), 1..8),
    ) {
        let p: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
        let t: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
        let thresholds = [0.1, 0.5, 0.9];
        for row in classify_metrics(&p, &t, &thresholds).unwrap() {
            let c = brute_counts(&p, &t, row.threshold);
            prop_assert_eq!([row.tp, row.fp, row.tn, row.fn_], c);
            let total = c.iter().sum::<usize>() as f64;
            prop_assert!((row.accuracy - (c[0] + c[2]) as f64 / total).abs() < 1e-12);
        }
    }

    #[test]
    fn removal_orders_are_permutations_and_reverse(scores in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let pos = removal_order(&scores, Direction::Positive);
        let neg = removal_order(&scores, Direction::Negative);
        let mut sorted = pos.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        prop_assert!(pos.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
        prop_assert!(neg.windows(2).all(|w| scores[w[0]] <= scores[w[1]]));
    }

    #[test]
    fn entropy_is_scale_invariant_and_bounded(v in prop::collection::vec(0.0f64..5.0, 2..40), s in 0.01f64..100.0) {
        prop_assume!(v.iter().any(|&x| x > 0.0));
        let h = entropy(&v).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        prop_assert!((h - entropy(&scaled).unwrap()).abs() < 1e-10);
        prop_assert!(h >= 0.0 && h <= (v.len() as f64).ln() + 1e-12);
    }
}

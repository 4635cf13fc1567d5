mod common;

use rand::Rng;
use segprune::metrics::{ahd, auc, Confusion};

use common::{ahd_all_pairs, auc_pairwise, confusion_oracle, random_mask, rng};

#[test]
fn confusion_metrics_match_pixel_counts() {
    let mut r = rng(8);
    for i in 0..1000 {
        let da = r.gen_range(0.0..1.0);
        let db = r.gen_range(0.0..1.0);
        let pred = random_mask(&mut r, 8, 8, da);
        let gt = random_mask(&mut r, 8, 8, db);
        let (tp, fp, fn_, tn) = confusion_oracle(&pred, &gt);
        let c = Confusion::of(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn), "pair {i}");
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        if tp + fp + fn_ > 0.0 {
            assert_eq!(c.dice(), 2.0 * tp / (2.0 * tp + fp + fn_));
            assert_eq!(c.iou(), tp / (tp + fp + fn_));
            assert!((c.dice() - 2.0 * c.iou() / (1.0 + c.iou())).abs() <= 1e-12);
        }
        if tp + fn_ > 0.0 {
            assert_eq!(c.sensitivity(), tp / (tp + fn_));
        }
        if tn + fp > 0.0 {
            assert_eq!(c.specificity(), tn / (tn + fp));
        }
    }
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut r = rng(81);
    for i in 0..1000 {
        let d = r.gen_range(0.05..0.95);
        let gt = random_mask(&mut r, 8, 8, d);
        if gt.count() == 0 || gt.count() == 64 {
            assert!(auc(&vec![0.0; 64], &gt).is_err());
            continue;
        }
        // Coarse scores on half the cases to exercise ties.
        let levels = if i % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f32> = (0..64).map(|_| (r.gen_range(0.0f32..1.0) * levels).round() / levels).collect();
        let got = auc(&scores, &gt).unwrap();
        let want = auc_pairwise(&scores, &gt.bits);
        assert!((got - want).abs() <= 1e-9, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ahd_matches_all_pairs_oracle() {
    let mut r = rng(82);
    for i in 0..1000 {
        let (da, db) = (r.gen_range(0.02..0.9), r.gen_range(0.02..0.9));
        let a = random_mask(&mut r, 8, 8, da);
        let b = random_mask(&mut r, 8, 8, db);
        if a.count() == 0 || b.count() == 0 {
            assert!(ahd(&a, &b).is_err());
            continue;
        }
        let got = ahd(&a, &b).unwrap();
        let want = ahd_all_pairs(&a, &b);
        assert!((got - want).abs() <= 1e-9, "pair {i}: {got} vs {want}");
    }
}

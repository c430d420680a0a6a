//! Label and instance metrics, rejection curves and AUROC against
//! brute-force oracles.

use std::collections::BTreeSet;

use evipar_core::metrics::{
    instance_metrics, label_metrics, rejection_curve, rejection_curve_samples, uncertainty_auroc,
    MetricsReport,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Matrix = Vec<Vec<u8>>;

fn positives(row: &[u8]) -> BTreeSet<usize> {
    row.iter().enumerate().filter(|(_, &v)| v == 1).map(|(j, _)| j).collect()
}

/// Per-attribute TPR/TNR by enumerating the positive and negative sample sets.
fn oracle_ma(pred: &Matrix, gt: &Matrix) -> f64 {
    let n = gt[0].len();
    let mut total = 0.0;
    for j in 0..n {
        let pos: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i][j] == 1).collect();
        let neg: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i][j] == 0).collect();
        let hit: BTreeSet<usize> = (0..gt.len()).filter(|&i| pred[i][j] == 1).collect();
        let tpr = if pos.is_empty() {
            1.0
        } else {
            pos.intersection(&hit).count() as f64 / pos.len() as f64
        };
        let tnr = if neg.is_empty() {
            1.0
        } else {
            neg.difference(&hit).count() as f64 / neg.len() as f64
        };
        total += (tpr + tnr) / 2.0;
    }
    total / n as f64
}

fn set_ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    match (den, other_empty) {
        (0, true) => 1.0,
        (0, false) => 0.0,
        _ => num as f64 / den as f64,
    }
}

fn oracle_instance(pred: &Matrix, gt: &Matrix) -> [f64; 4] {
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (ps, ys) = (positives(p), positives(g));
        let inter = ps.intersection(&ys).count();
        let union = ps.union(&ys).count();
        acc += set_ratio(inter, union, true);
        prec += set_ratio(inter, ps.len(), ys.is_empty());
        rec += set_ratio(inter, ys.len(), ps.is_empty());
    }
    let b = pred.len() as f64;
    let (a, p, r) = (acc / b, prec / b, rec / b);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    [a, p, r, f1]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| u8::from(rng.random::<f64>() < density)).collect())
        .collect()
}

#[test]
fn label_and_instance_metrics_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let density = rng.random_range(0.05..0.95);
        let gt = random_matrix(&mut rng, 10, 6, density);
        let pred = random_matrix(&mut rng, 10, 6, density);
        let report = MetricsReport::compute(&pred, &gt, &[]).unwrap();
        assert_eq!(report.ma, oracle_ma(&pred, &gt));
        let [a, p, r, f1] = oracle_instance(&pred, &gt);
        assert_eq!([report.accuracy, report.precision, report.recall, report.f1], [a, p, r, f1]);
    }
}

#[test]
fn hand_enumerated_example() {
    let gt = vec![vec![1u8, 0, 1], vec![0, 1, 0]];
    let pred = vec![vec![1u8, 1, 1], vec![0, 1, 0]];
    let (ma, table) = label_metrics(&pred, &gt, &[]).unwrap();
    assert!((ma - 0.833333).abs() < 1e-6);
    assert_eq!(table[1].tnr, 0.0);
    let inst = instance_metrics(&pred, &gt).unwrap();
    assert!((inst.accuracy - 5.0 / 6.0).abs() < 1e-12);
    assert!((inst.precision - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(inst.recall, 1.0);
    assert!((inst.f1 - 10.0 / 11.0).abs() < 1e-12);
}

#[test]
fn perfect_inverted_and_empty_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_matrix(&mut rng, 20, 5, 0.4);
    let r = MetricsReport::compute(&gt, &gt, &[]).unwrap();
    assert_eq!([r.ma, r.accuracy, r.precision, r.recall, r.f1], [1.0; 5]);

    let inv: Matrix = gt.iter().map(|row| row.iter().map(|v| 1 - v).collect()).collect();
    let (ma, _) = label_metrics(&inv, &gt, &[]).unwrap();
    assert_eq!(ma, 0.0);

    let mut gt = gt;
    gt.iter_mut().for_each(|row| row[0] = 1);
    let zeros = vec![vec![0u8; 5]; 20];
    let inst = instance_metrics(&zeros, &gt).unwrap();
    assert_eq!((inst.recall, inst.f1), (0.0, 0.0));
    assert!(label_metrics::<Vec<u8>, Vec<u8>>(&[], &[], &[]).is_err());
}

fn oracle_rejection(correct: &[bool], u: &[f64], coverage: f64) -> f64 {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[a].partial_cmp(&u[b]).unwrap());
    let keep = (coverage * u.len() as f64).ceil() as usize;
    idx[..keep].iter().filter(|&&i| correct[i]).count() as f64 / keep as f64
}

#[test]
fn rejection_examples() {
    let u = [0.1, 0.2, 0.8, 0.9];
    let correct = [true, true, false, true];
    let c = rejection_curve(&correct, &u, &[0.5, 1.0]).unwrap();
    assert_eq!(c.accuracy_at(0.5), Some(1.0));
    assert_eq!(c.accuracy_at(1.0), Some(0.75));
    assert_eq!(c.to_csv().lines().count(), 3);

    let flat = rejection_curve(&correct, &[0.3; 4], &[0.25, 0.5, 0.75, 1.0]).unwrap();
    assert!(flat.points.iter().all(|p| p.accuracy == 0.75));
    assert!(rejection_curve(&correct, &u, &[]).is_err());
    assert!(rejection_curve(&correct, &u, &[0.5, 0.5]).is_err());
}

#[test]
fn rejection_matches_sorting_oracle_and_full_coverage_is_global_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coverages: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    for _ in 0..1000 {
        let m = rng.random_range(1..200);
        let u: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let correct: Vec<bool> = u.iter().map(|&x| rng.random::<f64>() > x * 0.8).collect();
        let curve = rejection_curve(&correct, &u, &coverages).unwrap();
        for p in &curve.points {
            assert_eq!(p.accuracy, oracle_rejection(&correct, &u, p.coverage));
        }
        let global = correct.iter().filter(|&&c| c).count() as f64 / m as f64;
        assert_eq!(curve.accuracy_at(1.0).unwrap().to_bits(), global.to_bits());
    }
}

#[test]
fn sample_level_rejection_ranks_whole_samples() {
    // Two samples of three decisions; the certain one is fully correct.
    let correct = [true, true, true, false, true, false];
    let c = rejection_curve_samples(&correct, &[0.1, 0.9], 3, &[0.5, 1.0]).unwrap();
    assert_eq!(c.accuracy_at(0.5), Some(1.0));
    assert_eq!(c.accuracy_at(1.0), Some(4.0 / 6.0));
}

fn oracle_auroc(score: &[f64], flags: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &fi) in flags.iter().enumerate() {
        for (k, &fk) in flags.iter().enumerate() {
            if fi && !fk {
                pairs += 1.0;
                wins += match score[i].partial_cmp(&score[k]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let m = rng.random_range(2..80);
        let mut flags: Vec<bool> = (0..m).map(|_| rng.random()).collect();
        flags[0] = true;
        flags[1] = false;
        // Coarse scores so that ties occur.
        let score: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
        let a = uncertainty_auroc(&score, &flags).unwrap();
        assert!((a - oracle_auroc(&score, &flags)).abs() < 1e-12);
    }
}

#[test]
fn auroc_reference_cases() {
    let flags = [true, false, true, false];
    let exact: Vec<f64> = flags.iter().map(|&f| f64::from(u8::from(f))).collect();
    assert_eq!(uncertainty_auroc(&exact, &flags).unwrap(), 1.0);
    assert_eq!(uncertainty_auroc(&[0.4; 4], &flags).unwrap(), 0.5);
    assert!(uncertainty_auroc(&[0.1, 0.2], &[true, true]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let score: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
    let flags: Vec<bool> = (0..20_000).map(|_| rng.random()).collect();
    assert!((uncertainty_auroc(&score, &flags).unwrap() - 0.5).abs() < 0.05);
}

fn matrices() -> impl Strategy<Value = (Matrix, Matrix, Vec<usize>)> {
    (1usize..12, 1usize..7).prop_flat_map(|(b, n)| {
        let m = prop::collection::vec(prop::collection::vec(0u8..2, n), b);
        (m.clone(), m, Just((0..b).collect::<Vec<_>>()).prop_shuffle())
    })
}

proptest! {
    #[test]
    fn metrics_in_unit_range_and_row_permutation_invariant((pred, gt, perm) in matrices()) {
        let r = MetricsReport::compute(&pred, &gt, &[]).unwrap();
        for v in [r.ma, r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let pp: Matrix = perm.iter().map(|&i| pred[i].clone()).collect();
        let gp: Matrix = perm.iter().map(|&i| gt[i].clone()).collect();
        let s = MetricsReport::compute(&pp, &gp, &[]).unwrap();
        prop_assert!((r.ma - s.ma).abs() < 1e-12);
        prop_assert!((r.accuracy - s.accuracy).abs() < 1e-12);
        prop_assert!((r.f1 - s.f1).abs() < 1e-12);
    }
}

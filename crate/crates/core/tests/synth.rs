//! Synthetic task generator: information content, occlusion, label noise
//! and rate calibration.

use evipar_core::schema::{AttributeSpec, Region};
use evipar_core::synth::{apply_occlusion, flip_labels, generate_dataset, LabeledSample, TaskSpec};

fn attributes() -> Vec<AttributeSpec> {
    vec![
        AttributeSpec::new("a_head", Region::Head, 0.3),
        AttributeSpec::new("a_upper", Region::Upper, 0.5),
        AttributeSpec::new("a_lower", Region::Lower, 0.4),
        AttributeSpec::new("a_global", Region::Global, 0.5),
    ]
}

fn spec(snr: f64) -> TaskSpec {
    TaskSpec {
        seed: 21,
        rows: 8,
        cols: 2,
        visual_dim: 16,
        text_dim: 8,
        snr,
        train: 2000,
        val: 0,
        test: 2000,
        attributes: attributes(),
        ..TaskSpec::default()
    }
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j {
                (a[i][i] - s).sqrt()
            } else {
                (a[i][j] - s) / l[j][j]
            };
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Mean feature over the patches of one attribute's region, with a bias term.
fn region_feature(sample: &LabeledSample, patches: &[usize]) -> Vec<f64> {
    let d = sample.visual.shape()[1];
    let mut f = vec![0.0; d + 1];
    for &p in patches {
        for (acc, x) in f.iter_mut().zip(sample.visual.row(p + 1)) {
            *acc += x / patches.len() as f64;
        }
    }
    f[d] = 1.0;
    f
}

struct Ridge(Vec<f64>);

impl Ridge {
    fn fit(xs: &[Vec<f64>], ys: &[u8], lambda: f64) -> Self {
        let d = xs[0].len();
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for (x, &y) in xs.iter().zip(ys) {
            for i in 0..d {
                b[i] += x[i] * f64::from(y);
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        Self(solve_spd(&a, &b))
    }

    fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.0.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() >= 0.5)
    }
}

fn balanced_accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &y) in pred.iter().zip(truth) {
        if y == 1 {
            p += 1.0;
            tp += f64::from(a);
        } else {
            n += 1.0;
            tn += f64::from(1 - a);
        }
    }
    0.5 * (tp / p + tn / n)
}

/// Per-attribute balanced accuracy of a ridge probe trained on `train` and
/// evaluated on `test`.
fn probe(spec: &TaskSpec, train: &[LabeledSample], test: &[LabeledSample]) -> Vec<f64> {
    let map = spec.region_map().unwrap();
    spec.attributes
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let patches = map.bands.patches(a.region, map.grid);
            let xs: Vec<_> = train.iter().map(|s| region_feature(s, &patches)).collect();
            let ys: Vec<u8> = train.iter().map(|s| s.labels[j]).collect();
            let model = Ridge::fit(&xs, &ys, 1e-3);
            let pred: Vec<u8> = test.iter().map(|s| model.predict(&region_feature(s, &patches))).collect();
            let truth: Vec<u8> = test.iter().map(|s| s.labels[j]).collect();
            balanced_accuracy(&pred, &truth)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn strong_signal_is_linearly_recoverable() {
    let s = spec(10.0);
    let d = generate_dataset(&s).unwrap();
    let acc = probe(&s, &d.train, &d.test);
    assert!(mean(&acc) > 0.95, "{acc:?}");
}

#[test]
fn zero_signal_carries_no_information() {
    let s = spec(0.0);
    let d = generate_dataset(&s).unwrap();
    let acc = probe(&s, &d.train, &d.test);
    assert!((mean(&acc) - 0.5).abs() < 0.05, "{acc:?}");
}

#[test]
fn occlusion_removes_region_evidence() {
    let s = TaskSpec {
        occlusion_rate: 0.5,
        occlusion_region: Some(Region::Upper),
        train: 4000,
        test: 4000,
        ..spec(10.0)
    };
    let d = generate_dataset(&s).unwrap();
    let clean: Vec<_> = d.train.iter().filter(|x| !x.occluded).cloned().collect();
    let (occ, vis): (Vec<_>, Vec<_>) = d.test.iter().cloned().partition(|x| x.occluded);
    let on_occluded = probe(&s, &clean, &occ);
    let on_clean = probe(&s, &clean, &vis);
    // The upper-body attribute loses its evidence; the others keep theirs.
    assert!((on_occluded[1] - 0.5).abs() <= 0.05, "{on_occluded:?}");
    assert!(on_clean[1] > 0.95, "{on_clean:?}");
    assert!(on_occluded[0] > 0.95 && on_occluded[2] > 0.95, "{on_occluded:?}");
}

#[test]
fn occlusion_is_deterministic_and_local() {
    let s = spec(4.0);
    let d = generate_dataset(&TaskSpec { train: 3, test: 0, ..s.clone() }).unwrap();
    let map = s.region_map().unwrap();
    let a = apply_occlusion(&d.train[0], &map, Region::Lower, 5).unwrap();
    let b = apply_occlusion(&d.train[0], &map, Region::Lower, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels, d.train[0].labels);
    for p in map.bands.patches(Region::Head, map.grid) {
        assert_eq!(a.visual.row(p + 1), d.train[0].visual.row(p + 1));
    }
    let err = apply_occlusion(&d.train[0], &map, Region::Global, 5).unwrap_err();
    assert!(err.to_string().contains("occlusion_region"));
}

fn within_three_sigma(count: usize, trials: usize, p: f64) -> bool {
    let n = trials as f64;
    (count as f64 - n * p).abs() <= 3.0 * (n * p * (1.0 - p)).sqrt()
}

#[test]
fn positive_and_occlusion_rates_are_calibrated() {
    let s = TaskSpec {
        occlusion_rate: 0.2,
        train: 20_000,
        test: 0,
        ..spec(4.0)
    };
    let d = generate_dataset(&s).unwrap();
    for (j, a) in s.attributes.iter().enumerate() {
        let pos = d.train.iter().filter(|x| x.labels[j] == 1).count();
        assert!(within_three_sigma(pos, d.train.len(), a.rate), "{} {pos}", a.name);
    }
    let occ = d.train.iter().filter(|x| x.occluded).count();
    assert!(within_three_sigma(occ, d.train.len(), 0.2), "{occ}");
}

#[test]
fn flip_rate_is_calibrated() {
    let labels = vec![0u8; 100_000];
    let (out, flipped) = flip_labels(&labels, 0.1, 77).unwrap();
    assert!(within_three_sigma(flipped.len(), labels.len(), 0.1));
    assert_eq!(out.iter().filter(|&&y| y == 1).count(), flipped.len());

    let (out, flipped) = flip_labels(&labels[..1000], 1e-9, 78).unwrap();
    assert!(flipped.is_empty());
    assert_eq!(out, &labels[..1000]);
    assert!(flip_labels(&labels, 0.5, 1).is_err());
}

#[test]
fn noise_reaches_training_labels_only() {
    let s = TaskSpec {
        flip_rate: 0.2,
        train: 500,
        test: 500,
        ..spec(4.0)
    };
    let d = generate_dataset(&s).unwrap();
    assert!(d.test.iter().all(|x| x.flipped.is_empty()));
    let flips: usize = d.train.iter().map(|x| x.flipped.len()).sum();
    assert!(within_three_sigma(flips, 500 * 4, 0.2));
    for x in &d.train {
        let clean = x.clean_labels();
        for (j, (&a, &b)) in x.labels.iter().zip(&clean).enumerate() {
            assert_eq!(a != b, x.flipped.contains(&j));
        }
    }
}

//! Label-based and instance-based multi-label metrics, accuracy-rejection
//! curves and uncertainty AUROC.
//!
//! Conventions:
//! - `mA` is the mean over attributes of `(TPR + TNR) / 2`. An attribute with
//!   no positives takes `TPR = 1`, one with no negatives takes `TNR = 1`.
//! - Instance metrics compare the positive sets `Y_i` (truth) and `P_i`
//!   (prediction) per sample. A ratio with an empty denominator is 1 when the
//!   other set is also empty and 0 otherwise. F1 combines mean precision and
//!   mean recall.
//! - Rejection keeps the lowest-uncertainty fraction; a tie group cut by the
//!   coverage boundary counts with its mean correctness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRates {
    pub attribute: String,
    pub true_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub ma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute: Vec<AttributeRates>,
}

fn check_shapes<P: AsRef<[u8]>, G: AsRef<[u8]>>(pred: &[P], gt: &[G]) -> Result<usize> {
    if pred.is_empty() {
        return Err(Error::Data("metrics on an empty prediction set".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "prediction rows".into(),
            expected: vec![gt.len()],
            found: vec![pred.len()],
        });
    }
    let n = gt[0].as_ref().len();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.as_ref().len() != n || g.as_ref().len() != n {
            return Err(Error::Dimension {
                what: format!("labels of sample {i}"),
                expected: vec![n],
                found: vec![p.as_ref().len(), g.as_ref().len()],
            });
        }
    }
    if n == 0 {
        return Err(Error::Data("metrics with zero attributes".into()));
    }
    Ok(n)
}

/// Mean accuracy and the per-attribute table. `names` may be empty, in which
/// case attributes are named by index.
pub fn label_metrics<P: AsRef<[u8]>, G: AsRef<[u8]>>(
    pred: &[P],
    gt: &[G],
    names: &[String],
) -> Result<(f64, Vec<AttributeRates>)> {
    let n = check_shapes(pred, gt)?;
    let mut table = Vec::with_capacity(n);
    for j in 0..n {
        let (mut tp, mut fneg, mut tn, mut fp) = (0, 0, 0, 0);
        for (p, g) in pred.iter().zip(gt) {
            match (g.as_ref()[j] != 0, p.as_ref()[j] != 0) {
                (true, true) => tp += 1,
                (true, false) => fneg += 1,
                (false, false) => tn += 1,
                (false, true) => fp += 1,
            }
        }
        let name = names.get(j).cloned().unwrap_or_else(|| j.to_string());
        let tpr = if tp + fneg == 0 {
            log::info!("attribute {name}: no positives, TPR taken as 1");
            1.0
        } else {
            tp as f64 / (tp + fneg) as f64
        };
        let tnr = if tn + fp == 0 {
            log::info!("attribute {name}: no negatives, TNR taken as 1");
            1.0
        } else {
            tn as f64 / (tn + fp) as f64
        };
        table.push(AttributeRates {
            attribute: name,
            true_pos: tp,
            false_neg: fneg,
            true_neg: tn,
            false_pos: fp,
            tpr,
            tnr,
            ma: (tpr + tnr) / 2.0,
        });
    }
    let ma = table.iter().map(|r| r.ma).sum::<f64>() / n as f64;
    Ok((ma, table))
}

fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if other_empty {
        1.0
    } else {
        0.0
    }
}

pub fn instance_metrics<P: AsRef<[u8]>, G: AsRef<[u8]>>(pred: &[P], gt: &[G]) -> Result<InstanceMetrics> {
    check_shapes(pred, gt)?;
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (mut inter, mut union, mut np, mut ny) = (0, 0, 0, 0);
        for (&a, &b) in p.as_ref().iter().zip(g.as_ref()) {
            let (a, b) = (a != 0, b != 0);
            inter += usize::from(a && b);
            union += usize::from(a || b);
            np += usize::from(a);
            ny += usize::from(b);
        }
        acc += ratio(inter, union, true);
        prec += ratio(inter, np, ny == 0);
        rec += ratio(inter, ny, np == 0);
    }
    let b = pred.len() as f64;
    let (accuracy, precision, recall) = (acc / b, prec / b, rec / b);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(InstanceMetrics {
        accuracy,
        precision,
        recall,
        f1,
    })
}

impl MetricsReport {
    pub fn compute<P: AsRef<[u8]>, G: AsRef<[u8]>>(pred: &[P], gt: &[G], names: &[String]) -> Result<Self> {
        let (ma, per_attribute) = label_metrics(pred, gt, names)?;
        let inst = instance_metrics(pred, gt)?;
        Ok(Self {
            ma,
            accuracy: inst.accuracy,
            precision: inst.precision,
            recall: inst.recall,
            f1: inst.f1,
            per_attribute,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub points: Vec<CurvePoint>,
}

impl RejectionCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("coverage,accuracy\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.coverage, p.accuracy));
        }
        s
    }

    pub fn accuracy_at(&self, coverage: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.coverage == coverage)
            .map(|p| p.accuracy)
    }
}

/// `0.1, 0.2, ..., 1.0`.
pub fn default_coverages() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

fn check_coverages(coverages: &[f64]) -> Result<()> {
    if coverages.is_empty() {
        return Err(Error::config("coverages", "empty coverage list"));
    }
    let mut prev = 0.0;
    for &k in coverages {
        if !(k > prev && k <= 1.0) {
            return Err(Error::config(
                "coverages",
                format!("coverages must increase strictly within (0, 1]; got {k} after {prev}"),
            ));
        }
        prev = k;
    }
    Ok(())
}

/// Indices ordered by ascending score, ties by index.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn retained(coverage: f64, total: usize) -> usize {
    ((coverage * total as f64).ceil() as usize).clamp(1, total)
}

/// Accuracy of the `m` lowest-score items. A tie group cut by the boundary
/// contributes its mean correctness, so the result does not depend on how
/// equal scores are ordered.
struct Ranked {
    scores: Vec<f64>,
    /// Cumulative hits and weights in ascending score order.
    hits: Vec<usize>,
    weights: Vec<usize>,
}

impl Ranked {
    fn new(scores: &[f64], hits_of: impl Fn(usize) -> usize, weight: usize) -> Self {
        let order = ascending(scores);
        let mut hits = vec![0usize; order.len() + 1];
        let mut weights = vec![0usize; order.len() + 1];
        for (k, &i) in order.iter().enumerate() {
            hits[k + 1] = hits[k] + hits_of(i);
            weights[k + 1] = weights[k] + weight;
        }
        Self {
            scores: order.iter().map(|&i| scores[i]).collect(),
            hits,
            weights,
        }
    }

    fn accuracy(&self, m: usize) -> f64 {
        let s = &self.scores;
        let mut lo = m;
        while lo > 0 && s[lo - 1] == s[m - 1] {
            lo -= 1;
        }
        let mut hi = m;
        while hi < s.len() && s[hi] == s[m - 1] {
            hi += 1;
        }
        if hi == m {
            return self.hits[m] as f64 / self.weights[m] as f64;
        }
        let share = (m - lo) as f64 / (hi - lo) as f64;
        let hits = self.hits[lo] as f64 + share * (self.hits[hi] - self.hits[lo]) as f64;
        let weight = self.weights[lo] as f64 + share * (self.weights[hi] - self.weights[lo]) as f64;
        hits / weight
    }
}

/// Decision-level curve: keep the `ceil(k * M)` decisions with lowest `u`.
pub fn rejection_curve(correct: &[bool], u: &[f64], coverages: &[f64]) -> Result<RejectionCurve> {
    check_coverages(coverages)?;
    if correct.is_empty() || correct.len() != u.len() {
        return Err(Error::Dimension {
            what: "rejection curve inputs".into(),
            expected: vec![correct.len()],
            found: vec![u.len()],
        });
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite uncertainty".into()));
    }
    let ranked = Ranked::new(u, |i| usize::from(correct[i]), 1);
    let points = coverages
        .iter()
        .map(|&coverage| CurvePoint {
            coverage,
            accuracy: ranked.accuracy(retained(coverage, u.len())),
        })
        .collect();
    Ok(RejectionCurve { points })
}

/// Sample-level curve: rank samples by mean vacuity `u_bar`, keep the
/// `ceil(k * B)` most certain and report accuracy over their decisions.
/// `correct` is row-major `[B, N]`.
pub fn rejection_curve_samples(
    correct: &[bool],
    u_bar: &[f64],
    attributes: usize,
    coverages: &[f64],
) -> Result<RejectionCurve> {
    check_coverages(coverages)?;
    if u_bar.is_empty() || correct.len() != u_bar.len() * attributes {
        return Err(Error::Dimension {
            what: "sample rejection inputs".into(),
            expected: vec![u_bar.len(), attributes],
            found: vec![correct.len()],
        });
    }
    if u_bar.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite uncertainty".into()));
    }
    let ranked = Ranked::new(
        u_bar,
        |i| correct[i * attributes..(i + 1) * attributes].iter().filter(|&&c| c).count(),
        attributes,
    );
    let points = coverages
        .iter()
        .map(|&coverage| CurvePoint {
            coverage,
            accuracy: ranked.accuracy(retained(coverage, u_bar.len())),
        })
        .collect();
    Ok(RejectionCurve { points })
}

/// Mann-Whitney AUROC of `score` for `flag = true`; ties count one half.
pub fn uncertainty_auroc(score: &[f64], flags: &[bool]) -> Result<f64> {
    if score.len() != flags.len() {
        return Err(Error::Dimension {
            what: "auroc inputs".into(),
            expected: vec![score.len()],
            found: vec![flags.len()],
        });
    }
    let pos = flags.iter().filter(|&&f| f).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUROC needs both flag classes".into()));
    }
    let order = ascending(score);
    // Sum of (1-based) midranks of the positives.
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && score[order[end]] == score[order[k]] {
            end += 1;
        }
        let midrank = (k + 1 + end) as f64 / 2.0;
        rank_sum += midrank * order[k..end].iter().filter(|&&i| flags[i]).count() as f64;
        k = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

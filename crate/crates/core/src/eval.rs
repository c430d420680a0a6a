//! Batch inference and evaluation reports.

use evipar_autodiff::{Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::DECISION_THRESHOLD;
use crate::fusion::FeatureBundle;
use crate::metrics::{
    default_coverages, rejection_curve, rejection_curve_samples, uncertainty_auroc, MetricsReport,
    RejectionCurve,
};
use crate::model::Model;
use crate::nn::mean_of;
use crate::schema::Region;
use crate::synth::{Dataset, LabeledSample};

/// Per-attribute outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub eps_pos: Vec<f64>,
    pub eps_neg: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub vacuity: Vec<f64>,
    /// Head-averaged attribute attention `[N, L]` when requested.
    pub attention: Option<Tensor>,
}

impl SamplePrediction {
    pub fn decisions(&self) -> Vec<u8> {
        self.p_hat
            .iter()
            .map(|&p| u8::from(p >= DECISION_THRESHOLD))
            .collect()
    }

    pub fn mean_vacuity(&self) -> f64 {
        self.vacuity.iter().sum::<f64>() / self.vacuity.len() as f64
    }
}

/// Runs the model on every sample, in parallel, preserving order.
pub fn predict(
    model: &Model,
    text: &Tensor,
    samples: &[LabeledSample],
    with_attention: bool,
) -> Result<Vec<SamplePrediction>> {
    let grid = model.dims.regions.grid;
    samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let bundle = FeatureBundle::new(&s.visual, text, grid)?;
            let out = model.forward(&mut g, &p, &bundle)?;
            let b = out.evidence.beta.bundle(&g);
            let attention = with_attention.then(|| match &out.raer {
                Some(r) => r.mean_attention(&g),
                None => {
                    let n = model.dims.attributes();
                    let last = out.fused.attention.last().expect("attention map needs a fusion block");
                    let full = mean_of(&g, last);
                    let cols = full.shape()[1];
                    Tensor::new(vec![n, cols], full.data()[..n * cols].to_vec()).expect("rows")
                }
            });
            Ok(SamplePrediction {
                eps_pos: b.eps_pos,
                eps_neg: b.eps_neg,
                p_hat: b.p_hat,
                vacuity: b.vacuity,
                attention,
            })
        })
        .collect()
}

/// Mean vacuity on a region's attributes, occluded versus clean samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSummary {
    pub region: Region,
    pub occluded_samples: usize,
    pub occluded_mean_vacuity: f64,
    pub clean_mean_vacuity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub metrics: MetricsReport,
    pub mean_vacuity: f64,
    /// AUROC of decision vacuity for "attribute's region is occluded".
    pub auroc_occluded: Option<f64>,
    /// AUROC of the mean vacuity over the occluded region's attributes for
    /// "sample is occluded".
    pub auroc_occluded_samples: Option<f64>,
    /// AUROC of decision vacuity for "decision is wrong".
    pub auroc_error: Option<f64>,
    pub occlusion: Vec<OcclusionSummary>,
    pub rejection: RejectionCurve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectionLevel {
    #[default]
    Decision,
    Sample,
}

fn optional(r: Result<f64>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(Error::Data(msg)) => {
            log::info!("{msg}; AUROC omitted");
            None
        }
        Err(e) => {
            log::warn!("AUROC failed: {e}");
            None
        }
    }
}

/// Scores predictions against the clean labels of `samples`.
pub fn evaluate(
    dataset: &Dataset,
    samples: &[LabeledSample],
    preds: &[SamplePrediction],
    coverages: &[f64],
    level: RejectionLevel,
) -> Result<EvalReport> {
    if samples.len() != preds.len() || samples.is_empty() {
        return Err(Error::Data(format!(
            "{} samples but {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let n = dataset.attribute_count();
    let regions = &dataset.regions.regions;
    let names: Vec<String> = dataset.attributes.iter().map(|a| a.name.clone()).collect();
    let gt: Vec<Vec<u8>> = samples.iter().map(LabeledSample::clean_labels).collect();
    let pred: Vec<Vec<u8>> = preds.iter().map(SamplePrediction::decisions).collect();
    let metrics = MetricsReport::compute(&pred, &gt, &names)?;

    let u: Vec<f64> = preds.iter().flat_map(|p| p.vacuity.iter().copied()).collect();
    let correct: Vec<bool> = pred
        .iter()
        .zip(&gt)
        .flat_map(|(p, g)| p.iter().zip(g).map(|(a, b)| a == b))
        .collect();
    let occluded_decision: Vec<bool> = samples
        .iter()
        .flat_map(|s| regions.iter().map(move |&r| s.occluded && s.occluded_region == Some(r)))
        .collect();

    let rejection = match level {
        RejectionLevel::Decision => rejection_curve(&correct, &u, coverages)?,
        RejectionLevel::Sample => {
            let u_bar: Vec<f64> = preds.iter().map(SamplePrediction::mean_vacuity).collect();
            rejection_curve_samples(&correct, &u_bar, n, coverages)?
        }
    };

    let mut occlusion = Vec::new();
    let (mut sample_scores, mut sample_flags) = (Vec::new(), Vec::new());
    for region in Region::LOCAL {
        let attrs: Vec<usize> = (0..n).filter(|&j| regions[j] == region).collect();
        if attrs.is_empty() {
            continue;
        }
        let mean_u = |p: &SamplePrediction| attrs.iter().map(|&j| p.vacuity[j]).sum::<f64>() / attrs.len() as f64;
        let (mut occ, mut clean) = (Vec::new(), Vec::new());
        for (s, p) in samples.iter().zip(preds) {
            if !s.occluded {
                clean.push(mean_u(p));
            } else if s.occluded_region == Some(region) {
                occ.push(mean_u(p));
            }
        }
        if occ.is_empty() {
            continue;
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        occlusion.push(OcclusionSummary {
            region,
            occluded_samples: occ.len(),
            occluded_mean_vacuity: avg(&occ),
            clean_mean_vacuity: avg(&clean),
        });
        sample_flags.extend(std::iter::repeat_n(true, occ.len()));
        sample_scores.extend(occ);
        sample_flags.extend(std::iter::repeat_n(false, clean.len()));
        sample_scores.extend(clean);
    }

    Ok(EvalReport {
        samples: samples.len(),
        metrics,
        mean_vacuity: u.iter().sum::<f64>() / u.len() as f64,
        auroc_occluded: optional(uncertainty_auroc(&u, &occluded_decision)),
        auroc_occluded_samples: optional(uncertainty_auroc(&sample_scores, &sample_flags)),
        auroc_error: optional(uncertainty_auroc(
            &u,
            &correct.iter().map(|c| !c).collect::<Vec<_>>(),
        )),
        occlusion,
        rejection,
    })
}

/// Predicts and evaluates in one call with default coverages.
pub fn evaluate_split(model: &Model, dataset: &Dataset, samples: &[LabeledSample]) -> Result<EvalReport> {
    let preds = predict(model, &dataset.text, samples, false)?;
    evaluate(dataset, samples, &preds, &default_coverages(), RejectionLevel::Decision)
}

/// `sample_id,attribute,label,p_hat,u,eps_pos,eps_neg`, one row per decision.
pub fn predictions_csv(dataset: &Dataset, samples: &[LabeledSample], preds: &[SamplePrediction]) -> String {
    let mut s = String::from("sample_id,attribute,label,p_hat,u,eps_pos,eps_neg\n");
    for (i, (sample, p)) in samples.iter().zip(preds).enumerate() {
        let y = sample.clean_labels();
        for (j, a) in dataset.attributes.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                a.name, y[j], p.p_hat[j], p.vacuity[j], p.eps_pos[j], p.eps_neg[j]
            ));
        }
    }
    s
}

/// `attribute,token_index,grid_row,grid_col,weight`: attention averaged over
/// samples and heads, one row per (attribute, token). Text and cls tokens
/// carry grid coordinates -1.
pub fn attention_csv(dataset: &Dataset, preds: &[SamplePrediction]) -> Result<String> {
    let maps: Vec<&Tensor> = preds.iter().filter_map(|p| p.attention.as_ref()).collect();
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("no attention maps were recorded".into()))?;
    let (n, l) = first.dims2()?;
    let mut mean = vec![0.0; n * l];
    for m in &maps {
        for (a, b) in mean.iter_mut().zip(m.data()) {
            *a += b / maps.len() as f64;
        }
    }
    let grid = dataset.regions.grid;
    let mut s = String::from("attribute,token_index,grid_row,grid_col,weight\n");
    for (j, a) in dataset.attributes.iter().enumerate() {
        for t in 0..l {
            let (row, col) = if t > n && t - n - 1 < grid.patches() {
                let (r, c) = grid.position(t - n - 1);
                (r as i64, c as i64)
            } else {
                (-1, -1)
            };
            s.push_str(&format!("{},{t},{row},{col},{}\n", a.name, mean[j * l + t]));
        }
    }
    Ok(s)
}

/// Mean attention mass that attribute `j` places on its own region's patches,
/// averaged over samples, next to the mass a uniform map would place there.
pub fn region_attention_mass(dataset: &Dataset, preds: &[SamplePrediction], j: usize) -> Result<(f64, f64)> {
    let map = &dataset.regions;
    let n = dataset.attribute_count();
    let patches = map.bands.patches(map.regions[j], map.grid);
    let mut mass = 0.0;
    let mut count = 0;
    let mut tokens = 0;
    for p in preds {
        let a = p
            .attention
            .as_ref()
            .ok_or_else(|| Error::Data("no attention maps were recorded".into()))?;
        let l = a.shape()[1];
        tokens = l;
        mass += patches.iter().map(|&q| a.at(j, n + 1 + q)).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("no predictions".into()));
    }
    Ok((mass / count as f64, patches.len() as f64 / tokens as f64))
}

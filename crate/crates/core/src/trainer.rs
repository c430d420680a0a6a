//! The two-stage training loop.
//!
//! Each batch is processed sample by sample: every sample gets its own graph,
//! built and differentiated on the rayon pool. Per-sample gradients are summed
//! in sample order, so results do not depend on the number of workers.

use evipar_autodiff::{Gradients, Graph, Sgd, SgdConfig, StepOutcome, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    gaussian_weights, renormalize, schedule_at, stage1_weights, CurriculumSchedule, Stage,
};
use crate::error::{Error, Result};
use crate::eval::evaluate_split;
use crate::evidential::{labels_var, loss_bce, loss_stage2, DECISION_THRESHOLD};
use crate::fusion::FeatureBundle;
use crate::metrics::label_metrics;
use crate::model::{ForwardOutput, Model};
use crate::seed::{self, tag};
use crate::synth::Dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: CurriculumSchedule,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    /// Stage I pacing and Stage II Gaussian weighting. Off means `q = 1`, `w = 1`.
    pub use_curriculum: bool,
    /// Switch to the evidential objective after warm-up. Off keeps Stage I throughout.
    pub use_edl: bool,
    /// Rescale Stage II weights to mean 1 within each batch. Without it the
    /// Gaussian weights can vanish for a whole batch right after warm-up.
    pub renormalize: bool,
    /// Abort when more than this fraction of an epoch's steps is skipped.
    pub max_skipped_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: CurriculumSchedule::default(),
            optimizer: SgdConfig::default(),
            batch_size: 48,
            use_curriculum: true,
            use_edl: true,
            renormalize: true,
            max_skipped_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// The schedule actually followed: without EDL every epoch is Stage I,
    /// without curriculum the pacing quantile starts at 1.
    pub fn effective_schedule(&self) -> CurriculumSchedule {
        let mut s = self.schedule;
        if !self.use_edl {
            s.warmup_epochs = s.total_epochs;
        }
        if !self.use_curriculum {
            s.q0 = 1.0;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    pub mean_vacuity: f64,
    /// Stage I pacing quantile; 1 in Stage II.
    pub retained_fraction: f64,
    pub lambda: f64,
    pub center: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    /// mA of the epoch's training predictions against the training labels.
    pub train_ma: f64,
    /// mA on the validation split, when it is non-empty.
    pub val_ma: Option<f64>,
}

struct SampleGraph {
    graph: Graph,
    grads_of: evipar_autodiff::Bound,
    out: ForwardOutput,
    y: Var,
    /// Stage I only: the BCE node.
    loss: Option<Var>,
}

/// Builds, weights and differentiates one batch. The batch loss is
/// `sum_i scale_i * L_i`; Stage II sample weights live inside `L_i`.
fn batch_step(
    model: &Model,
    dataset: &Dataset,
    batch: &[usize],
    point: &crate::curriculum::SchedulePoint,
    cfg: &TrainConfig,
    sched: &CurriculumSchedule,
) -> Result<(Gradients, BatchStats)> {
    let grid = dataset.regions.grid;
    let samples = &dataset.train;
    let mut graphs = batch
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let bundle = FeatureBundle::new(&s.visual, &dataset.text, grid)?;
            let out = model.forward(&mut g, &p, &bundle)?;
            let y = labels_var(&mut g, &s.labels);
            let loss = match point.stage {
                Stage::Warmup => {
                    let prob = out.warmup_probability(&mut g)?;
                    Some(loss_bce(&mut g, prob, y)?)
                }
                Stage::Evidential => None,
            };
            Ok(SampleGraph {
                graph: g,
                grads_of: p,
                out,
                y,
                loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = dataset.attribute_count();
    let vacuity: Vec<f64> = graphs
        .iter()
        .flat_map(|s| s.graph.value(s.out.evidence.beta.vacuity).data().to_vec())
        .collect();
    let u_bar: Vec<f64> = vacuity
        .chunks(n)
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let probs: Vec<Vec<f64>> = graphs
        .iter_mut()
        .map(|s| -> Result<Vec<f64>> {
            Ok(match point.stage {
                Stage::Warmup => {
                    let p = s.out.warmup_probability(&mut s.graph)?;
                    s.graph.value(p).data().to_vec()
                }
                Stage::Evidential => s.graph.value(s.out.evidence.beta.p_hat).data().to_vec(),
            })
        })
        .collect::<Result<_>>()?;

    // Per-sample root weights such that the batch loss is sum(scale_i * L_i).
    let (weights, scales): (Vec<f64>, Vec<f64>) = match point.stage {
        Stage::Warmup => {
            let losses: Vec<f64> = graphs
                .iter()
                .map(|s| s.graph.value(s.loss.expect("stage I loss")).item())
                .collect();
            let w = if cfg.use_curriculum {
                stage1_weights(&losses, point.q)?
            } else {
                vec![1.0; losses.len()]
            };
            let total: f64 = w.iter().sum();
            let scales = w.iter().map(|w| w / total).collect();
            (w, scales)
        }
        Stage::Evidential => {
            let mut w = if cfg.use_curriculum {
                gaussian_weights(&u_bar, point.center, point.sigma)
            } else {
                vec![1.0; u_bar.len()]
            };
            if cfg.renormalize {
                renormalize(&mut w);
            }
            let b = w.len() as f64;
            (w, vec![1.0 / b; u_bar.len()])
        }
    };

    let results = graphs
        .into_par_iter()
        .zip(weights.par_iter())
        .zip(scales.par_iter())
        .map(|((mut s, &w), &scale)| -> Result<Option<(Gradients, f64, f64)>> {
            if scale == 0.0 {
                return Ok(None);
            }
            let root = match s.loss {
                Some(l) => l,
                None => loss_stage2(
                    &mut s.graph,
                    &s.out.evidence.beta,
                    s.y,
                    w,
                    point.lambda,
                    sched.lambda_awr,
                )?,
            };
            let value = s.graph.value(root).item();
            s.graph.backward(root)?;
            Ok(Some((s.grads_of.gradients(&s.graph), value, scale)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = model.store.zero_gradients();
    let mut loss = 0.0;
    for (g, value, scale) in results.iter().flatten() {
        grads.accumulate(g, *scale);
        loss += value * scale;
    }
    let decisions: Vec<Vec<u8>> = probs
        .iter()
        .map(|p| p.iter().map(|&x| u8::from(x >= DECISION_THRESHOLD)).collect())
        .collect();
    Ok((
        grads,
        BatchStats {
            loss,
            vacuity_sum: vacuity.iter().sum(),
            decisions,
        },
    ))
}

struct BatchStats {
    loss: f64,
    vacuity_sum: f64,
    decisions: Vec<Vec<u8>>,
}

/// Trains `model` in place on `dataset.train`, calling `on_epoch` after each
/// epoch. Aborts with [`Error::Numerical`] when too many steps are skipped.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochReport) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    let samples = &dataset.train;
    if samples.is_empty() && cfg.schedule.total_epochs > 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    let sched = cfg.effective_schedule();
    let batch = cfg.batch_size.min(samples.len()).max(1);
    let mut opt = Sgd::new(cfg.optimizer, &model.store);
    let mut reports = Vec::with_capacity(sched.total_epochs);
    let n = dataset.attribute_count();

    for epoch in 1..=sched.total_epochs {
        let point = schedule_at(epoch, &sched)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[tag::SHUFFLE, epoch as u64]));

        let (mut steps, mut skipped) = (0, 0);
        let (mut loss_sum, mut vac_sum) = (0.0, 0.0);
        let mut pred_rows = vec![Vec::new(); samples.len()];
        for idx in order.chunks(batch) {
            let (mut grads, stats) = batch_step(model, dataset, idx, &point, cfg, &sched)?;
            steps += 1;
            let finite = stats.loss.is_finite();
            if !finite {
                log::warn!("epoch {epoch}: non-finite batch loss, step skipped");
                grads.zero();
                skipped += 1;
            } else if opt.step(&mut model.store, &mut grads) == StepOutcome::Skipped {
                log::warn!("epoch {epoch}: non-finite gradient, step skipped");
                skipped += 1;
            } else {
                loss_sum += stats.loss;
            }
            vac_sum += stats.vacuity_sum;
            for (&i, d) in idx.iter().zip(stats.decisions) {
                pred_rows[i] = d;
            }
        }
        if skipped as f64 > cfg.max_skipped_fraction * steps as f64 {
            return Err(Error::Numerical(format!(
                "epoch {epoch}: {skipped} of {steps} steps skipped for non-finite values"
            )));
        }
        let labels: Vec<&[u8]> = samples.iter().map(|s| s.labels.as_slice()).collect();
        let train_ma = label_metrics(&pred_rows, &labels, &[])?.0;
        let val_ma = if dataset.val.is_empty() {
            None
        } else {
            Some(evaluate_split(model, dataset, &dataset.val)?.metrics.ma)
        };
        let applied = (steps - skipped).max(1);
        let report = EpochReport {
            epoch,
            stage: point.stage,
            mean_loss: loss_sum / applied as f64,
            mean_vacuity: vac_sum / (samples.len() * n) as f64,
            retained_fraction: point.q,
            lambda: point.lambda,
            center: point.center,
            steps,
            skipped_steps: skipped,
            train_ma,
            val_ma,
        };
        log::info!(
            "epoch {epoch} stage {:?} loss {:.5} u {:.4} train mA {:.4}",
            report.stage,
            report.mean_loss,
            report.mean_vacuity,
            report.train_ma
        );
        on_epoch(model, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

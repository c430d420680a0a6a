//! Two-stage curriculum: loss-ranked retention during warm-up, then Gaussian
//! weighting on sample vacuity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    Warmup,
    #[serde(rename = "II")]
    Evidential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumSchedule {
    /// Last epoch of stage I (`E_w`).
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Fraction of each batch retained at epoch 1.
    pub q0: f64,
    pub center_start: f64,
    pub center_end: f64,
    pub sigma: f64,
    pub lambda_max: f64,
    pub lambda_awr: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 12,
            total_epochs: 30,
            q0: 0.5,
            center_start: 0.2,
            center_end: 0.6,
            sigma: 0.15,
            lambda_max: 1.0,
            lambda_awr: 0.1,
        }
    }
}

/// Schedule values for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SchedulePoint {
    pub epoch: usize,
    pub stage: Stage,
    /// Stage I retained fraction; 1 in stage II.
    pub q: f64,
    /// Gaussian centre; `center_start` in stage I.
    pub center: f64,
    pub sigma: f64,
    /// MSE weight; 0 in stage I.
    pub lambda: f64,
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let c = |k: &str, m: String| Err(Error::config(format!("curriculum.{k}"), m));
        if !(self.q0 > 0.0 && self.q0 <= 1.0) {
            return c("q0", format!("{} not in (0, 1]", self.q0));
        }
        if !(0.0 <= self.center_start
            && self.center_start <= self.center_end
            && self.center_end <= 1.0)
        {
            return c(
                "center_start",
                format!(
                    "need 0 <= center_start ({}) <= center_end ({}) <= 1",
                    self.center_start, self.center_end
                ),
            );
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return c("sigma", format!("{} must be positive", self.sigma));
        }
        if self.total_epochs > 0 && self.warmup_epochs > self.total_epochs {
            return c(
                "warmup_epochs",
                format!(
                    "{} exceeds total_epochs {}",
                    self.warmup_epochs, self.total_epochs
                ),
            );
        }
        if self.lambda_max.is_nan() || self.lambda_max < 0.0 {
            return c("lambda_max", "must be non-negative".into());
        }
        if self.lambda_awr.is_nan() || self.lambda_awr < 0.0 {
            return c("lambda_awr", "must be non-negative".into());
        }
        Ok(())
    }

    pub fn has_stage_two(&self) -> bool {
        self.warmup_epochs < self.total_epochs
    }
}

/// Stage and schedule values at 1-based `epoch`.
///
/// Stage I covers epochs `1..=E_w` with `q` rising linearly from `q0` to 1.
/// Stage II covers the rest; `lambda` and the centre ramp linearly over it,
/// reaching `lambda_max` and `center_end` at the final epoch.
pub fn schedule_at(epoch: usize, s: &CurriculumSchedule) -> Result<SchedulePoint> {
    if epoch == 0 || epoch > s.total_epochs {
        return Err(Error::config(
            "epoch",
            format!("epoch {epoch} outside 1..={}", s.total_epochs),
        ));
    }
    if epoch <= s.warmup_epochs {
        let q = if s.warmup_epochs > 1 {
            (s.q0 + (1.0 - s.q0) * (epoch - 1) as f64 / (s.warmup_epochs - 1) as f64).min(1.0)
        } else {
            s.q0
        };
        return Ok(SchedulePoint {
            epoch,
            stage: Stage::Warmup,
            q,
            center: s.center_start,
            sigma: s.sigma,
            lambda: 0.0,
        });
    }
    let frac = (epoch - s.warmup_epochs) as f64 / (s.total_epochs - s.warmup_epochs) as f64;
    Ok(SchedulePoint {
        epoch,
        stage: Stage::Evidential,
        q: 1.0,
        center: s.center_start + (s.center_end - s.center_start) * frac,
        sigma: s.sigma,
        lambda: s.lambda_max * frac,
    })
}

/// Hard self-paced retention: the `ceil(q * B)` lowest-loss samples get
/// weight 1, the rest 0. Ties go to the lower index.
pub fn stage1_weights(losses: &[f64], q: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Data("stage I pacing on an empty batch".into()));
    }
    let keep = ((q * losses.len() as f64).ceil() as usize).clamp(1, losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut w = vec![0.0; losses.len()];
    for &i in &order[..keep] {
        w[i] = 1.0;
    }
    Ok(w)
}

/// Mean vacuity of each sample; `vacuity` is row-major `[B, N]`.
pub fn sample_uncertainty(vacuity: &[f64], attributes: usize) -> Vec<f64> {
    vacuity
        .chunks(attributes)
        .map(|row| row.iter().sum::<f64>() / attributes as f64)
        .collect()
}

/// `w_i = exp(-(u_i - c)^2 / (2 sigma^2))`, not renormalized.
pub fn gaussian_weights(uncertainty: &[f64], center: f64, sigma: f64) -> Vec<f64> {
    uncertainty
        .iter()
        .map(|u| (-(u - center).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Rescales weights to mean 1 (all-zero input is left as is).
pub fn renormalize(weights: &mut [f64]) {
    let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
    if mean > 0.0 {
        weights.iter_mut().for_each(|w| *w /= mean);
    }
}

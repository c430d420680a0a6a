//! Beta evidence head and the training objectives built on it.
//!
//! Each attribute gets two non-negative evidences `(e+, e-)` from a linear
//! layer followed by softplus. With `alpha = e+ + 1`, `beta = e- + 1` and
//! `S = alpha + beta`, the prediction is the Beta mean `alpha / S` and the
//! vacuity is `2 / S`.

use evipar_autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Probabilities are kept this far from 0 and 1 inside logarithms.
pub const PROB_CLAMP: f64 = 1e-12;
/// Predict positive when `p_hat >= DECISION_THRESHOLD`.
pub const DECISION_THRESHOLD: f64 = 0.5;
/// A decision is flagged as uncertain when its vacuity exceeds this.
pub const UNCERTAINTY_FLAG: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSharing {
    /// One `W_e: [d, 2]` applied to every attribute's features.
    Shared,
    /// Separate weights per attribute.
    PerAttribute,
}

#[derive(Clone, Copy, Debug)]
pub enum EvidenceParams {
    Shared {
        weight: ParamId,
        bias: ParamId,
    },
    PerAttribute {
        /// `[N, d]` weights for the positive evidence.
        weight_pos: ParamId,
        /// `[N, d]` weights for the negative evidence.
        weight_neg: ParamId,
        /// `[N, 2]`.
        bias: ParamId,
    },
}

impl EvidenceParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        sharing: HeadSharing,
        attributes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        match sharing {
            HeadSharing::Shared => Self::Shared {
                weight: store.add("head.weight", Tensor::randn(&[dim, 2], std, rng)),
                bias: store.add("head.bias", Tensor::zeros(&[2])),
            },
            HeadSharing::PerAttribute => Self::PerAttribute {
                weight_pos: store.add("head.weight_pos", Tensor::randn(&[attributes, dim], std, rng)),
                weight_neg: store.add("head.weight_neg", Tensor::randn(&[attributes, dim], std, rng)),
                bias: store.add("head.bias", Tensor::zeros(&[attributes, 2])),
            },
        }
    }

    /// Pre-activation logits `W_e f + b_e`, `[N, 2]` (positive, negative).
    pub fn logits(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        match *self {
            Self::Shared { weight, bias } => {
                let z = g.matmul(features, p[weight])?;
                Ok(g.add(z, p[bias])?)
            }
            Self::PerAttribute {
                weight_pos,
                weight_neg,
                bias,
            } => {
                let zp = g.mul(features, p[weight_pos])?;
                let zp = g.sum_lastdim(zp);
                let zn = g.mul(features, p[weight_neg])?;
                let zn = g.sum_lastdim(zn);
                let z = g.concat_cols(&[zp, zn])?;
                Ok(g.add(z, p[bias])?)
            }
        }
    }
}

/// Beta parameters of every attribute as graph nodes, each `[N, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct BetaVars {
    pub eps_pos: Var,
    pub eps_neg: Var,
    pub alpha: Var,
    pub beta: Var,
    pub strength: Var,
    pub p_hat: Var,
    pub vacuity: Var,
}

impl BetaVars {
    /// Derives the Beta fields from evidence nodes. Evidence is used as given.
    pub fn from_evidence(g: &mut Graph, eps_pos: Var, eps_neg: Var) -> Result<Self> {
        let alpha = g.affine(eps_pos, 1.0, 1.0);
        let beta = g.affine(eps_neg, 1.0, 1.0);
        let strength = g.add(alpha, beta)?;
        let p_hat = g.div(alpha, strength)?;
        let two = g.constant(Tensor::full(g.shape(strength), 2.0));
        let vacuity = g.div(two, strength)?;
        Ok(Self {
            eps_pos,
            eps_neg,
            alpha,
            beta,
            strength,
            p_hat,
            vacuity,
        })
    }

    pub fn bundle(&self, g: &Graph) -> BetaBundle {
        let col = |v: Var| g.value(v).data().to_vec();
        BetaBundle {
            eps_pos: col(self.eps_pos),
            eps_neg: col(self.eps_neg),
            alpha: col(self.alpha),
            beta: col(self.beta),
            strength: col(self.strength),
            p_hat: col(self.p_hat),
            vacuity: col(self.vacuity),
        }
    }
}

/// Per-attribute Beta summaries as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaBundle {
    pub eps_pos: Vec<f64>,
    pub eps_neg: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub strength: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub vacuity: Vec<f64>,
}

impl BetaBundle {
    pub fn from_evidence(eps_pos: &[f64], eps_neg: &[f64]) -> Self {
        let alpha: Vec<f64> = eps_pos.iter().map(|e| e + 1.0).collect();
        let beta: Vec<f64> = eps_neg.iter().map(|e| e + 1.0).collect();
        let strength: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a + b).collect();
        Self {
            eps_pos: eps_pos.to_vec(),
            eps_neg: eps_neg.to_vec(),
            p_hat: alpha.iter().zip(&strength).map(|(a, s)| a / s).collect(),
            vacuity: strength.iter().map(|s| 2.0 / s).collect(),
            alpha,
            beta,
            strength,
        }
    }

    pub fn len(&self) -> usize {
        self.p_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_hat.is_empty()
    }
}

/// Evidence head output for one sample.
#[derive(Clone, Copy, Debug)]
pub struct EvidenceOutput {
    /// `[N, 2]` pre-softplus logits.
    pub logits: Var,
    pub beta: BetaVars,
}

/// `(e+, e-) = softplus(W_e f + b_e)` and the derived Beta fields.
pub fn evidence_head(
    g: &mut Graph,
    p: &Bound,
    params: &EvidenceParams,
    features: Var,
) -> Result<EvidenceOutput> {
    let logits = params.logits(g, p, features)?;
    let evidence = g.softplus(logits);
    let eps_pos = g.slice_cols(evidence, 0, 1)?;
    let eps_neg = g.slice_cols(evidence, 1, 1)?;
    Ok(EvidenceOutput {
        logits,
        beta: BetaVars::from_evidence(g, eps_pos, eps_neg)?,
    })
}

/// Point-estimate probability used by the warm-up objective:
/// `sigmoid(z+ - z-)` on the head logits, `[N, 1]`.
pub fn warmup_probability(g: &mut Graph, logits: Var) -> Result<Var> {
    let zp = g.slice_cols(logits, 0, 1)?;
    let zn = g.slice_cols(logits, 1, 1)?;
    let diff = g.sub(zp, zn)?;
    Ok(g.sigmoid(diff))
}

/// Labels as an `[N, 1]` constant.
pub fn labels_var(g: &mut Graph, labels: &[u8]) -> Var {
    let data = labels.iter().map(|&y| f64::from(y)).collect();
    g.constant(Tensor::new(vec![labels.len(), 1], data).expect("column"))
}

/// `-(1/N) sum [y log p + (1-y) log(1-p)]` with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn loss_bce(g: &mut Graph, p_hat: Var, y: Var) -> Result<Var> {
    let p = g.clamp(p_hat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.affine(p, -1.0, 1.0);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let not_y = g.affine(y, -1.0, 1.0);
    let a = g.mul(log_p, y)?;
    let b = g.mul(log_q, not_y)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Cross-entropy on the Beta mean.
pub fn loss_ce_br(g: &mut Graph, beta: &BetaVars, y: Var) -> Result<Var> {
    loss_bce(g, beta.p_hat, y)
}

/// `(1/N) sum [(y - p)^2 + p(1-p)/(S+1)]`, the expected squared error under
/// `Beta(alpha, beta)`.
pub fn loss_mse_br(g: &mut Graph, beta: &BetaVars, y: Var) -> Result<Var> {
    let diff = g.sub(y, beta.p_hat)?;
    let sq = g.mul(diff, diff)?;
    let q = g.affine(beta.p_hat, -1.0, 1.0);
    let pq = g.mul(beta.p_hat, q)?;
    let s1 = g.affine(beta.strength, 1.0, 1.0);
    let var = g.div(pq, s1)?;
    let t = g.add(sq, var)?;
    Ok(g.mean(t))
}

/// `(1/N) sum [y e- + (1-y) e+]`: evidence placed on the wrong side.
pub fn loss_awr(g: &mut Graph, beta: &BetaVars, y: Var) -> Result<Var> {
    let not_y = g.affine(y, -1.0, 1.0);
    let a = g.mul(beta.eps_neg, y)?;
    let b = g.mul(beta.eps_pos, not_y)?;
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

/// `CE-BR + lambda * MSE-BR`.
pub fn loss_edl(g: &mut Graph, beta: &BetaVars, y: Var, lambda: f64) -> Result<Var> {
    let ce = loss_ce_br(g, beta, y)?;
    let mse = loss_mse_br(g, beta, y)?;
    let mse = g.scale(mse, lambda);
    Ok(g.add(ce, mse)?)
}

/// `w * EDL + lambda_awr * AWR`; the regularizer is not scaled by the sample weight.
pub fn loss_stage2(
    g: &mut Graph,
    beta: &BetaVars,
    y: Var,
    weight: f64,
    lambda: f64,
    lambda_awr: f64,
) -> Result<Var> {
    let edl = loss_edl(g, beta, y, lambda)?;
    let edl = g.scale(edl, weight);
    let awr = loss_awr(g, beta, y)?;
    let awr = g.scale(awr, lambda_awr);
    Ok(g.add(edl, awr)?)
}

//! Shared layer building blocks.

use evipar_autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in)`, bias zero.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[input, output], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p[self.weight])?;
        Ok(g.add(xw, p[self.bias])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)?)
    }
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// `q: [n, d]`, `k, v: [l, d]`. The optional additive `mask: [n, l]` is applied
/// identically to every head. Returns the concatenated head outputs `[n, d]`
/// and the per-head attention matrices `[n, l]`.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).last_dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let a = g.softmax_lastdim(scores);
        outs.push(g.matmul(a, vh)?);
        probs.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((out, probs))
}

/// Elementwise mean of several same-shaped graph values.
pub fn mean_of(g: &Graph, vars: &[Var]) -> Tensor {
    let mut acc = g.value(vars[0]).clone();
    for &v in &vars[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(g.value(v).data()) {
            *a += b;
        }
    }
    let n = vars.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= n);
    acc
}

//! Modality projections and the self-attention fusion stack.
//!
//! Text tokens `T: [N, d_t]` and visual tokens `V: [P+1, d_v]` (cls first)
//! are projected to a common width `d`, stacked text-first and passed through
//! `blocks` transformer blocks. The first `N` output rows are the
//! attribute-aware features.

use evipar_autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, LayerNormParams, Linear};
use crate::schema::Grid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub common_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            common_dim: 64,
            blocks: 1,
            heads: 4,
            ffn_multiplier: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.common_dim == 0 {
            return Err(Error::config("model.common_dim", "must be positive"));
        }
        if self.heads == 0 || !self.common_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide common_dim {}", self.heads, self.common_dim),
            ));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::config("model.ffn_multiplier", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.common_dim / self.heads
    }
}

/// Backbone tokens for one sample.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle<'a> {
    /// `[(P+1), d_v]`, cls token first.
    pub visual: &'a Tensor,
    /// `[N, d_t]`.
    pub text: &'a Tensor,
    pub grid: Grid,
}

impl<'a> FeatureBundle<'a> {
    pub fn new(visual: &'a Tensor, text: &'a Tensor, grid: Grid) -> Result<Self> {
        let (vr, _) = visual.dims2()?;
        let (tr, _) = text.dims2()?;
        if vr != grid.patches() + 1 {
            return Err(Error::Dimension {
                what: "visual tokens (P+1)".into(),
                expected: vec![grid.patches() + 1],
                found: vec![vr],
            });
        }
        if tr == 0 {
            return Err(Error::Data("no text tokens".into()));
        }
        Ok(Self { visual, text, grid })
    }

    pub fn attributes(&self) -> usize {
        self.text.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.attributes() + self.grid.patches() + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub proj_text: Linear,
    pub proj_visual: Linear,
    pub blocks: Vec<BlockParams>,
}

/// Output of [`FusionParams::fuse`].
#[derive(Clone, Debug)]
pub struct FusedOutput {
    /// `F: [L, d]`, `L = N + P + 1`.
    pub all: Var,
    /// `F_attr`: the first `N` rows of `F`.
    pub attr: Var,
    /// Self-attention matrices `[L, L]`, per block then per head.
    pub attention: Vec<Vec<Var>>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: FusionConfig,
        text_dim: usize,
        visual_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.common_dim;
        let hidden = d * config.ffn_multiplier;
        let proj_text = Linear::init(store, "fusion.proj_text", text_dim, d, rng);
        let proj_visual = Linear::init(store, "fusion.proj_visual", visual_dim, d, rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                let n = |s: &str| format!("fusion.block{b}.{s}");
                BlockParams {
                    query: Linear::init(store, &n("query"), d, d, rng),
                    key: Linear::init(store, &n("key"), d, d, rng),
                    value: Linear::init(store, &n("value"), d, d, rng),
                    output: Linear::init(store, &n("output"), d, d, rng),
                    norm1: LayerNormParams::init(store, &n("norm1"), d),
                    ffn_in: Linear::init(store, &n("ffn_in"), d, hidden, rng),
                    ffn_out: Linear::init(store, &n("ffn_out"), hidden, d, rng),
                    norm2: LayerNormParams::init(store, &n("norm2"), d),
                }
            })
            .collect();
        Ok(Self {
            config,
            proj_text,
            proj_visual,
            blocks,
        })
    }

    /// `T' = T W_t + b_t`, `V' = V W_v + b_v`.
    pub fn project(&self, g: &mut Graph, p: &Bound, text: Var, visual: Var) -> Result<(Var, Var)> {
        for (what, x, w) in [
            ("text projection", text, self.proj_text.weight),
            ("visual projection", visual, self.proj_visual.weight),
        ] {
            let (_, cols) = g.value(x).dims2()?;
            let wrows = g.shape(p[w])[0];
            if cols != wrows {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected: vec![wrows],
                    found: vec![cols],
                });
            }
        }
        let t = self.proj_text.apply(g, p, text)?;
        let v = self.proj_visual.apply(g, p, visual)?;
        Ok((t, v))
    }

    /// Concatenates `[T'; V']` and runs the block stack. Each block is
    /// `x = LN(x + MHSA(x)); x = LN(x + FFN(x))` with a GELU FFN.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, text: Var, visual: Var) -> Result<FusedOutput> {
        let n = g.value(text).dims2()?.0;
        let mut x = g.concat_rows(&[text, visual])?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let q = b.query.apply(g, p, x)?;
            let k = b.key.apply(g, p, x)?;
            let v = b.value.apply(g, p, x)?;
            let (heads, probs) = multi_head_attention(g, q, k, v, self.config.heads, None)?;
            let o = b.output.apply(g, p, heads)?;
            let r = g.add(x, o)?;
            x = b.norm1.apply(g, p, r)?;
            let h = b.ffn_in.apply(g, p, x)?;
            let h = g.gelu(h);
            let f = b.ffn_out.apply(g, p, h)?;
            let r = g.add(x, f)?;
            x = b.norm2.apply(g, p, r)?;
            attention.push(probs);
        }
        let attr = g.slice_rows(x, 0, n)?;
        Ok(FusedOutput {
            all: x,
            attr,
            attention,
        })
    }
}

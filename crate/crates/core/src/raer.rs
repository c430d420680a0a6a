//! Region-aware evidence reasoning.
//!
//! Learnable attribute queries attend over the full fused token sequence. An
//! additive spatial prior mask pushes each local attribute towards the patches
//! of its body region, and a sigmoid gate blends the attended features with
//! the original attribute features.

use evipar_autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::FusedOutput;
use crate::nn::{mean_of, multi_head_attention, LayerNormParams, LN_EPS};
use crate::schema::RegionMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaerConfig {
    /// With the mask disabled `gamma` is frozen at zero.
    pub use_spm: bool,
    pub gamma_init: f64,
    pub gate_bias_init: f64,
    /// Std of the random attribute-query initialization.
    pub query_init_std: f64,
}

impl Default for RaerConfig {
    fn default() -> Self {
        Self {
            use_spm: true,
            gamma_init: 2.0,
            gate_bias_init: -2.0,
            query_init_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RaerParams {
    /// `W_attr: [N, d]`.
    pub attr_queries: ParamId,
    pub query_norm: LayerNormParams,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `W_g: [1, 2d]`.
    pub gate_weight: ParamId,
    /// Scalar gate bias.
    pub gate_bias: ParamId,
    /// Scalar mask strength.
    pub gamma: ParamId,
    pub heads: usize,
}

/// Output of [`RaerParams::forward`].
#[derive(Clone, Debug)]
pub struct RaerOutput {
    /// Evidential features `[N, d]`.
    pub features: Var,
    /// Attention `[N, L]` per head.
    pub attention: Vec<Var>,
    /// Gate values `[N, 1]`.
    pub gates: Var,
}

impl RaerOutput {
    /// Head-averaged attention `[N, L]`.
    pub fn mean_attention(&self, g: &Graph) -> Tensor {
        mean_of(g, &self.attention)
    }
}

impl RaerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &RaerConfig,
        attributes: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let gamma = if config.use_spm {
            store.add("raer.gamma", Tensor::scalar(config.gamma_init))
        } else {
            store.add_frozen("raer.gamma", Tensor::scalar(0.0))
        };
        Self {
            attr_queries: store.add(
                "raer.attr_queries",
                Tensor::randn(&[attributes, dim], config.query_init_std, rng),
            ),
            query_norm: LayerNormParams::init(store, "raer.query_norm", dim),
            w_q: store.add("raer.w_q", Tensor::randn(&[dim, dim], std, rng)),
            w_k: store.add("raer.w_k", Tensor::randn(&[dim, dim], std, rng)),
            w_v: store.add("raer.w_v", Tensor::randn(&[dim, dim], std, rng)),
            gate_weight: store.add(
                "raer.gate_weight",
                Tensor::randn(&[1, 2 * dim], 1.0 / (2.0 * dim as f64).sqrt(), rng),
            ),
            gate_bias: store.add("raer.gate_bias", Tensor::scalar(config.gate_bias_init)),
            gamma,
            heads,
        }
    }

    /// Runs query construction, masked cross-attention and gated fusion.
    /// `mask_signs` is the `[N, L]` output of [`spm_signs`].
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        fused: &FusedOutput,
        mask_signs: Var,
    ) -> Result<RaerOutput> {
        let q = build_query(
            g,
            p[self.attr_queries],
            fused.attr,
            p[self.query_norm.gain],
            p[self.query_norm.bias],
        )?;
        let mask = g.mul(mask_signs, p[self.gamma])?;
        let (r, attention) = cross_attend(
            g,
            q,
            fused.all,
            p[self.w_q],
            p[self.w_k],
            p[self.w_v],
            Some(mask),
            self.heads,
        )?;
        let (features, gates) = gated_fuse(g, fused.attr, r, p[self.gate_weight], p[self.gate_bias])?;
        Ok(RaerOutput {
            features,
            attention,
            gates,
        })
    }
}

/// `Q = LN(W_attr + F_attr)`.
pub fn build_query(
    g: &mut Graph,
    attr_queries: Var,
    attr_features: Var,
    gain: Var,
    bias: Var,
) -> Result<Var> {
    if g.shape(attr_queries) != g.shape(attr_features) {
        return Err(Error::Dimension {
            what: "attribute queries".into(),
            expected: g.shape(attr_features).to_vec(),
            found: g.shape(attr_queries).to_vec(),
        });
    }
    let s = g.add(attr_queries, attr_features)?;
    Ok(g.layer_norm(s, gain, bias, LN_EPS)?)
}

/// Sign pattern of the spatial prior mask, `[N, L]` with `L = N + P + 1`:
/// `+1` on patches inside attribute `j`'s band, `-1` on the other patches, and
/// `0` on text and cls columns and on every column of a global attribute.
pub fn spm_signs(map: &RegionMap, attributes: usize, tokens: usize) -> Result<Tensor> {
    let patches = map.grid.patches();
    if map.attributes() != attributes || tokens != attributes + patches + 1 {
        return Err(Error::Dimension {
            what: "spatial prior mask".into(),
            expected: vec![map.attributes(), map.attributes() + patches + 1],
            found: vec![attributes, tokens],
        });
    }
    let mut m = Tensor::zeros(&[attributes, tokens]);
    let first_patch = attributes + 1;
    for (j, &region) in map.regions.iter().enumerate() {
        if !region.is_local() {
            continue;
        }
        for p in 0..patches {
            let (row, _) = map.grid.position(p);
            let sign = if map.bands.contains_row(region, row, map.grid.rows) {
                1.0
            } else {
                -1.0
            };
            m.data_mut()[j * tokens + first_patch + p] = sign;
        }
    }
    Ok(m)
}

/// The mask `M = gamma * signs` as a plain tensor.
pub fn build_spm(map: &RegionMap, attributes: usize, tokens: usize, gamma: f64) -> Result<Tensor> {
    Ok(spm_signs(map, attributes, tokens)?.map(|s| s * gamma))
}

/// Multi-head cross-attention from attribute queries to the fused sequence.
///
/// Per head `h`: `A_h = (Q W_Q)_h (F W_K)_h^T / sqrt(d_h)`,
/// `Â_h = softmax(A_h + M)` and `R_h = Â_h (F W_V)_h`. Heads are concatenated
/// without an output projection.
#[allow(clippy::too_many_arguments)]
pub fn cross_attend(
    g: &mut Graph,
    q: Var,
    fused: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    mask: Option<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).last_dim();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(
            "model.heads",
            format!("{heads} heads do not divide {d}"),
        ));
    }
    let qp = g.matmul(q, w_q)?;
    let k = g.matmul(fused, w_k)?;
    let v = g.matmul(fused, w_v)?;
    multi_head_attention(g, qp, k, v, heads, mask)
}

/// `g_j = sigmoid(W_g [F_attr,j ; r_j] + b_g)`,
/// `f_j = g_j r_j + (1 - g_j) F_attr,j`.
pub fn gated_fuse(
    g: &mut Graph,
    attr_features: Var,
    region_features: Var,
    gate_weight: Var,
    gate_bias: Var,
) -> Result<(Var, Var)> {
    let joint = g.concat_cols(&[attr_features, region_features])?;
    let wt = g.transpose(gate_weight)?;
    let logits = g.matmul(joint, wt)?;
    let logits = g.add(logits, gate_bias)?;
    let gate = g.sigmoid(logits);
    let closed = g.affine(gate, -1.0, 1.0);
    let a = g.mul(region_features, gate)?;
    let b = g.mul(attr_features, closed)?;
    let features = g.add(a, b)?;
    Ok((features, gate))
}

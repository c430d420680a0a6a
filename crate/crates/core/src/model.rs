//! The full recognition model: fusion, optional region-aware reasoning, and
//! the evidence head.

use evipar_autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::evidential::{evidence_head, warmup_probability, EvidenceOutput, EvidenceParams, HeadSharing};
use crate::fusion::{FeatureBundle, FusedOutput, FusionConfig, FusionParams};
use crate::raer::{spm_signs, RaerConfig, RaerOutput, RaerParams};
use crate::schema::RegionMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub use_raer: bool,
    pub raer: RaerConfig,
    pub evidence_head: HeadSharing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            use_raer: true,
            raer: RaerConfig::default(),
            evidence_head: HeadSharing::Shared,
        }
    }
}

/// Input dimensions fixed by the data.
#[derive(Clone, Debug, PartialEq)]
pub struct InputDims {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub regions: RegionMap,
}

impl InputDims {
    pub fn attributes(&self) -> usize {
        self.regions.attributes()
    }

    pub fn tokens(&self) -> usize {
        self.attributes() + self.regions.grid.patches() + 1
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub store: ParamStore,
    pub fusion: FusionParams,
    pub raer: Option<RaerParams>,
    pub head: EvidenceParams,
    mask_signs: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub fused: FusedOutput,
    pub raer: Option<RaerOutput>,
    pub evidence: EvidenceOutput,
}

impl ForwardOutput {
    /// `[N, 1]` probability for the warm-up objective.
    pub fn warmup_probability(&self, g: &mut Graph) -> Result<Var> {
        warmup_probability(g, self.evidence.logits)
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, dims: InputDims, rng: &mut R) -> Result<Self> {
        config.fusion.validate()?;
        let n = dims.attributes();
        let d = config.fusion.common_dim;
        let mut store = ParamStore::new();
        let fusion = FusionParams::init(&mut store, config.fusion, dims.text_dim, dims.visual_dim, rng)?;
        let raer = config.use_raer.then(|| {
            RaerParams::init(&mut store, &config.raer, n, d, config.fusion.heads, rng)
        });
        let head = EvidenceParams::init(&mut store, config.evidence_head, n, d, rng);
        let mask_signs = spm_signs(&dims.regions, n, dims.tokens())?;
        Ok(Self {
            config,
            dims,
            store,
            fusion,
            raer,
            head,
            mask_signs,
        })
    }

    pub fn mask_signs(&self) -> &Tensor {
        &self.mask_signs
    }

    pub fn check_bundle(&self, bundle: &FeatureBundle<'_>) -> Result<()> {
        let expect = [
            ("visual tokens", vec![self.dims.tokens() - self.dims.attributes(), self.dims.visual_dim], bundle.visual.shape()),
            ("text tokens", vec![self.dims.attributes(), self.dims.text_dim], bundle.text.shape()),
        ];
        for (what, expected, found) in expect {
            if expected.as_slice() != found {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected,
                    found: found.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Builds the forward pass for one sample on `g` using parameters bound by
    /// `p = self.store.bind(g)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, bundle: &FeatureBundle<'_>) -> Result<ForwardOutput> {
        self.check_bundle(bundle)?;
        let text = g.constant(bundle.text.clone());
        let visual = g.constant(bundle.visual.clone());
        let (t, v) = self.fusion.project(g, p, text, visual)?;
        let fused = self.fusion.fuse(g, p, t, v)?;
        let (features, raer) = match &self.raer {
            Some(r) => {
                let signs = g.constant(self.mask_signs.clone());
                let out = r.forward(g, p, &fused, signs)?;
                (out.features, Some(out))
            }
            None => (fused.attr, None),
        };
        let evidence = evidence_head(g, p, &self.head, features)?;
        Ok(ForwardOutput {
            fused,
            raer,
            evidence,
        })
    }

    /// Replaces parameter values with those of `loaded`, matched by name.
    pub fn load_params(&mut self, loaded: &ParamStore) -> Result<()> {
        if loaded.len() != self.store.len() {
            return Err(Error::Dimension {
                what: "parameter count".into(),
                expected: vec![self.store.len()],
                found: vec![loaded.len()],
            });
        }
        for param in self.store.iter_mut() {
            let src = loaded
                .find(&param.name)
                .map(|id| loaded.get(id))
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", param.name)))?;
            if src.shape() != param.value.shape() {
                return Err(Error::Dimension {
                    what: param.name.clone(),
                    expected: param.value.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            param.value = src.clone();
        }
        Ok(())
    }
}

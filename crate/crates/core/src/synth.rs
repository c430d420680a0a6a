//! Synthetic multi-attribute recognition tasks with known ground truth.
//!
//! Each attribute owns a fixed random prototype direction. A positive label
//! adds `snr` times that prototype to every patch of the attribute's region
//! (every patch for global attributes) on top of unit Gaussian noise. Visible
//! local regions also carry a per-region appearance prototype; occlusion
//! replaces a region's patches by fresh noise, removing both the appearance
//! and any attribute evidence while leaving labels untouched.

use evipar_autodiff::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputDims;
use crate::schema::{default_attributes, AttributeSpec, Grid, Region, RegionBands, RegionMap};
use crate::seed::{self, tag};

/// Noise scale on the cls summary token.
pub const CLS_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Amplitude of an attribute prototype relative to unit patch noise.
    pub snr: f64,
    /// Amplitude of the per-region appearance prototype on visible patches.
    pub appearance: f64,
    /// Probability that a sample has one local region occluded.
    pub occlusion_rate: f64,
    /// Region to occlude; a uniformly drawn local region when absent.
    pub occlusion_region: Option<Region>,
    /// Per-label flip probability, training split only.
    pub flip_rate: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub bands: RegionBands,
    pub attributes: Vec<AttributeSpec>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 8,
            cols: 4,
            visual_dim: 64,
            text_dim: 64,
            snr: 4.0,
            appearance: 2.0,
            occlusion_rate: 0.0,
            occlusion_region: None,
            flip_rate: 0.0,
            train: 6000,
            val: 0,
            test: 2000,
            bands: RegionBands::default(),
            attributes: default_attributes(),
        }
    }
}

fn bad(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::config(key, message)
}

impl TaskSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("spec")
                .to_string();
            bad(key, e.to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(bad("rows", "must be positive"));
        }
        if self.cols == 0 {
            return Err(bad("cols", "must be positive"));
        }
        if self.visual_dim == 0 {
            return Err(bad("visual_dim", "must be positive"));
        }
        if self.text_dim == 0 {
            return Err(bad("text_dim", "must be positive"));
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return Err(bad("snr", format!("{} must be finite and >= 0", self.snr)));
        }
        if !(self.appearance.is_finite() && self.appearance >= 0.0) {
            return Err(bad("appearance", format!("{} must be finite and >= 0", self.appearance)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(bad(
                "occlusion_rate",
                format!("{} not in [0, 1]", self.occlusion_rate),
            ));
        }
        if self.occlusion_region == Some(Region::Global) {
            return Err(bad("occlusion_region", "must be a local region"));
        }
        if !(0.0..0.5).contains(&self.flip_rate) {
            return Err(bad("flip_rate", format!("{} not in [0, 0.5)", self.flip_rate)));
        }
        if self.train + self.val + self.test == 0 {
            return Err(bad("train", "no samples requested"));
        }
        if self.attributes.is_empty() {
            return Err(bad("attributes", "at least one attribute required"));
        }
        self.bands.validate()?;
        let grid = self.grid()?;
        for (j, a) in self.attributes.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.rate) {
                return Err(bad(
                    format!("attributes[{j}].rate"),
                    format!("{} not in [0, 1]", a.rate),
                ));
            }
            if self.attributes[..j].iter().any(|b| b.name == a.name) {
                return Err(bad(
                    format!("attributes[{j}].name"),
                    format!("duplicate attribute `{}`", a.name),
                ));
            }
            if self.bands.patches(a.region, grid).is_empty() {
                return Err(bad(
                    "rows",
                    format!("region {} covers no rows of a {}-row grid", a.region, self.rows),
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.rows, self.cols)
    }

    pub fn region_map(&self) -> Result<RegionMap> {
        RegionMap::from_attributes(&self.attributes, self.grid()?, self.bands)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| bad("split", format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[(P+1), d_v]`, cls token first.
    pub visual: Tensor,
    /// Labels as seen by the trainer (noisy on the training split).
    pub labels: Vec<u8>,
    pub occluded: bool,
    pub occluded_region: Option<Region>,
    /// Attribute indices whose label was flipped. Evaluation only.
    pub flipped: Vec<usize>,
}

impl LabeledSample {
    pub fn clean_labels(&self) -> Vec<u8> {
        let mut y = self.labels.clone();
        for &j in &self.flipped {
            y[j] ^= 1;
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub attributes: Vec<AttributeSpec>,
    pub regions: RegionMap,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// `[N, d_t]`, shared by all samples.
    pub text: Tensor,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    /// Generating spec, when synthetic.
    pub spec: Option<TaskSpec>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<LabeledSample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            text_dim: self.text_dim,
            visual_dim: self.visual_dim,
            regions: self.regions.clone(),
        }
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_direction<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = gaussian(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Overwrites row 0 with the patch mean plus small noise.
fn set_cls<R: Rng + ?Sized>(visual: &mut [f64], patches: usize, dim: usize, rng: &mut R) {
    let (cls, body) = visual.split_at_mut(dim);
    cls.iter_mut().for_each(|c| *c = 0.0);
    for row in body.chunks(dim) {
        for (c, x) in cls.iter_mut().zip(row) {
            *c += x;
        }
    }
    for c in cls.iter_mut() {
        *c = *c / patches as f64 + CLS_NOISE * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Replaces every patch of `region` with fresh unit noise and recomputes the
/// cls token. Labels are kept.
pub fn apply_occlusion(
    sample: &LabeledSample,
    map: &RegionMap,
    region: Region,
    seed: u64,
) -> Result<LabeledSample> {
    if !region.is_local() {
        return Err(bad(
            "occlusion_region",
            "cannot occlude the global region",
        ));
    }
    let (rows, dim) = sample.visual.dims2()?;
    let patches = rows - 1;
    if patches != map.grid.patches() {
        return Err(Error::Dimension {
            what: "visual patches".into(),
            expected: vec![map.grid.patches()],
            found: vec![patches],
        });
    }
    let mut rng = seed::rng(seed, &[]);
    let mut data = sample.visual.data().to_vec();
    for p in map.bands.patches(region, map.grid) {
        for x in &mut data[(p + 1) * dim..(p + 2) * dim] {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
    }
    set_cls(&mut data, patches, dim, &mut rng);
    data.iter_mut().for_each(|x| *x = round_f32(*x));
    Ok(LabeledSample {
        visual: Tensor::new(vec![rows, dim], data)?,
        labels: sample.labels.clone(),
        occluded: true,
        occluded_region: Some(region),
        flipped: sample.flipped.clone(),
    })
}

/// Flips each label independently with probability `rate`.
pub fn flip_labels(labels: &[u8], rate: f64, seed: u64) -> Result<(Vec<u8>, Vec<usize>)> {
    if !(0.0..0.5).contains(&rate) {
        return Err(bad("flip_rate", format!("{rate} not in [0, 0.5)")));
    }
    let mut rng = seed::rng(seed, &[]);
    let mut out = labels.to_vec();
    let mut flipped = Vec::new();
    for (j, y) in out.iter_mut().enumerate() {
        if rng.random::<f64>() < rate {
            *y ^= 1;
            flipped.push(j);
        }
    }
    Ok((out, flipped))
}

struct Prototypes {
    attributes: Vec<Vec<f64>>,
    /// Indexed like `Region::LOCAL`.
    appearance: Vec<Vec<f64>>,
    /// Patch indices per local region.
    region_patches: Vec<Vec<usize>>,
    attribute_patches: Vec<Vec<usize>>,
}

fn generate_sample(
    spec: &TaskSpec,
    map: &RegionMap,
    protos: &Prototypes,
    split: Split,
    index: usize,
) -> Result<LabeledSample> {
    let dim = spec.visual_dim;
    let patches = map.grid.patches();
    let mut rng = seed::rng(spec.seed, &[tag::SAMPLE, split.tag(), index as u64]);
    let labels: Vec<u8> = spec
        .attributes
        .iter()
        .map(|a| u8::from(rng.random::<f64>() < a.rate))
        .collect();
    let mut data = vec![0.0; (patches + 1) * dim];
    for x in &mut data[dim..] {
        *x = rng.sample::<f64, _>(StandardNormal);
    }
    let mut add = |ps: &[usize], dir: &[f64], amp: f64| {
        for &p in ps {
            for (x, d) in data[(p + 1) * dim..(p + 2) * dim].iter_mut().zip(dir) {
                *x += amp * d;
            }
        }
    };
    for (ps, dir) in protos.region_patches.iter().zip(&protos.appearance) {
        add(ps, dir, spec.appearance);
    }
    for (j, &y) in labels.iter().enumerate() {
        if y == 1 {
            add(&protos.attribute_patches[j], &protos.attributes[j], spec.snr);
        }
    }
    set_cls(&mut data, patches, dim, &mut rng);
    data.iter_mut().for_each(|x| *x = round_f32(*x));
    let occluded = rng.random::<f64>() < spec.occlusion_rate;
    let region = match spec.occlusion_region {
        Some(r) => r,
        None => Region::LOCAL[rng.random_range(0..Region::LOCAL.len())],
    };
    let mut sample = LabeledSample {
        visual: Tensor::new(vec![patches + 1, dim], data)?,
        labels,
        occluded: false,
        occluded_region: None,
        flipped: Vec::new(),
    };
    if occluded {
        let occ_seed = seed::derive(spec.seed, &[tag::OCCLUSION, split.tag(), index as u64]);
        sample = apply_occlusion(&sample, map, region, occ_seed)?;
    }
    if split == Split::Train && spec.flip_rate > 0.0 {
        let flip_seed = seed::derive(spec.seed, &[tag::FLIP, index as u64]);
        let (labels, flipped) = flip_labels(&sample.labels, spec.flip_rate, flip_seed)?;
        sample.labels = labels;
        sample.flipped = flipped;
    }
    Ok(sample)
}

/// Generates all three splits. Pure in `spec`; samples are drawn in parallel
/// from per-sample streams and collected in index order.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let map = spec.region_map()?;
    let mut proto_rng = seed::rng(spec.seed, &[tag::PROTOTYPES]);
    let attributes = spec
        .attributes
        .iter()
        .map(|_| unit_direction(&mut proto_rng, spec.visual_dim))
        .collect();
    let appearance = Region::LOCAL
        .iter()
        .map(|_| unit_direction(&mut proto_rng, spec.visual_dim))
        .collect();
    let protos = Prototypes {
        attributes,
        appearance,
        region_patches: Region::LOCAL
            .iter()
            .map(|&r| map.bands.patches(r, map.grid))
            .collect(),
        attribute_patches: spec
            .attributes
            .iter()
            .map(|a| map.bands.patches(a.region, map.grid))
            .collect(),
    };
    let n = spec.attributes.len();
    let mut text_rng = seed::rng(spec.seed, &[tag::TEXT]);
    let text: Vec<f64> = gaussian(&mut text_rng, n * spec.text_dim)
        .into_iter()
        .map(round_f32)
        .collect();
    let mut splits = Split::ALL.into_iter().map(|split| {
        (0..spec.count(split))
            .into_par_iter()
            .map(|i| generate_sample(spec, &map, &protos, split, i))
            .collect::<Result<Vec<_>>>()
    });
    let (train, val, test) = (
        splits.next().unwrap()?,
        splits.next().unwrap()?,
        splits.next().unwrap()?,
    );
    Ok(Dataset {
        attributes: spec.attributes.clone(),
        regions: map,
        visual_dim: spec.visual_dim,
        text_dim: spec.text_dim,
        text: Tensor::new(vec![n, spec.text_dim], text)?,
        train,
        val,
        test,
        spec: Some(spec.clone()),
    })
}

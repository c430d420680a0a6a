//! On-disk feature datasets.
//!
//! A dataset directory holds one `<split>.evipfeat` file per split, the shared
//! text tokens in `text.f32` and a `manifest.json` with the schema and
//! per-sample flags. Feature files start with the ASCII header line
//! `EVIPFEAT v1 N P d_v d_t`, followed by one record per sample:
//! `(P+1) * d_v` little-endian f32 visual values, then `N` label bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use evipar_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeSpec, Grid, Region, RegionBands, RegionMap};
use crate::synth::{Dataset, LabeledSample, Split, TaskSpec};

pub const HEADER_TAG: &str = "EVIPFEAT v1";
pub const TEXT_FILE: &str = "text.f32";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFlags {
    pub occluded: bool,
    pub occluded_region: Option<Region>,
    pub flipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub file: String,
    pub count: usize,
    pub samples: Vec<SampleFlags>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub attributes: Vec<AttributeSpec>,
    pub grid: Grid,
    pub bands: RegionBands,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub text_file: String,
    pub splits: Vec<SplitManifest>,
    pub spec: Option<TaskSpec>,
}

pub fn split_file(split: Split) -> String {
    format!("{}.evipfeat", split.as_str())
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Serializes one split.
pub fn encode_split(samples: &[LabeledSample], n: usize, grid: Grid, visual_dim: usize, text_dim: usize) -> Result<Vec<u8>> {
    let p = grid.patches();
    let mut buf = format!("{HEADER_TAG} {n} {p} {visual_dim} {text_dim}\n").into_bytes();
    buf.reserve(samples.len() * ((p + 1) * visual_dim * 4 + n));
    for (i, s) in samples.iter().enumerate() {
        if s.visual.shape() != [p + 1, visual_dim] || s.labels.len() != n {
            return Err(Error::Data(format!(
                "sample {i}: visual {:?} labels {} do not match header",
                s.visual.shape(),
                s.labels.len()
            )));
        }
        push_f32s(&mut buf, s.visual.data());
        buf.extend_from_slice(&s.labels);
    }
    Ok(buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub attributes: usize,
    pub patches: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
}

/// One sample on disk: `[P+1, d_v]` visual features and its label bytes.
pub type Record = (Tensor, Vec<u8>);

/// Parses one split into records.
pub fn decode_split(bytes: &[u8]) -> Result<(FeatureHeader, Vec<Record>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data("feature file lacks a header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Data("feature header is not ASCII".into()))?;
    let rest = line
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| Error::Data(format!("bad feature header `{line}`")))?;
    let nums: Vec<usize> = rest
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data(format!("bad feature header `{line}`")))?;
    let [n, p, dv, dt] = nums[..] else {
        return Err(Error::Data(format!("bad feature header `{line}`")));
    };
    let header = FeatureHeader {
        attributes: n,
        patches: p,
        visual_dim: dv,
        text_dim: dt,
    };
    let body = &bytes[nl + 1..];
    let visual_bytes = (p + 1) * dv * 4;
    let record = visual_bytes + n;
    if record == 0 || !body.len().is_multiple_of(record) {
        return Err(Error::Data(format!(
            "feature body of {} bytes is not a whole number of {record}-byte records",
            body.len()
        )));
    }
    let records = body
        .chunks_exact(record)
        .map(|r| {
            let visual = Tensor::new(vec![p + 1, dv], read_f32s(&r[..visual_bytes]))?;
            Ok((visual, r[visual_bytes..].to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let n = dataset.attribute_count();
    let grid = dataset.regions.grid;
    let mut text = Vec::with_capacity(dataset.text.numel() * 4);
    push_f32s(&mut text, dataset.text.data());
    write_file(&dir.join(TEXT_FILE), &text)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = dataset.split(split);
        let bytes = encode_split(samples, n, grid, dataset.visual_dim, dataset.text_dim)?;
        let file = split_file(split);
        write_file(&dir.join(&file), &bytes)?;
        splits.push(SplitManifest {
            split,
            file,
            count: samples.len(),
            samples: samples
                .iter()
                .map(|s| SampleFlags {
                    occluded: s.occluded,
                    occluded_region: s.occluded_region,
                    flipped: s.flipped.clone(),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        format: HEADER_TAG.into(),
        attributes: dataset.attributes.clone(),
        grid,
        bands: dataset.regions.bands,
        visual_dim: dataset.visual_dim,
        text_dim: dataset.text_dim,
        text_file: TEXT_FILE.into(),
        splits,
        spec: dataset.spec.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?;
    let n = manifest.attributes.len();
    let grid = Grid::new(manifest.grid.rows, manifest.grid.cols)?;
    let regions = RegionMap::from_attributes(&manifest.attributes, grid, manifest.bands)?;
    let text = read_f32s(&read(&dir.join(&manifest.text_file))?);
    if text.len() != n * manifest.text_dim {
        return Err(Error::Dimension {
            what: "text tokens".into(),
            expected: vec![n, manifest.text_dim],
            found: vec![text.len()],
        });
    }
    let mut dataset = Dataset {
        attributes: manifest.attributes.clone(),
        regions,
        visual_dim: manifest.visual_dim,
        text_dim: manifest.text_dim,
        text: Tensor::new(vec![n, manifest.text_dim], text)?,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        spec: manifest.spec.clone(),
    };
    for sm in &manifest.splits {
        let (header, records) = decode_split(&read(&dir.join(&sm.file))?)?;
        let expected = FeatureHeader {
            attributes: n,
            patches: grid.patches(),
            visual_dim: manifest.visual_dim,
            text_dim: manifest.text_dim,
        };
        if header != expected {
            return Err(Error::Dimension {
                what: format!("{} header (N, P, d_v, d_t)", sm.file),
                expected: vec![n, grid.patches(), manifest.visual_dim, manifest.text_dim],
                found: vec![header.attributes, header.patches, header.visual_dim, header.text_dim],
            });
        }
        if records.len() != sm.count || sm.samples.len() != sm.count {
            return Err(Error::Data(format!(
                "{}: {} records but manifest lists {}",
                sm.file,
                records.len(),
                sm.count
            )));
        }
        *dataset.split_mut(sm.split) = records
            .into_iter()
            .zip(&sm.samples)
            .map(|((visual, labels), f)| LabeledSample {
                visual,
                labels,
                occluded: f.occluded,
                occluded_region: f.occluded_region,
                flipped: f.flipped.clone(),
            })
            .collect();
    }
    Ok(dataset)
}

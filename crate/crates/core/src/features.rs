//! Dense feature extraction contract, masked feature means, cosine similarity
//! and score-level ensembling across feature spaces.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::io;
use crate::synthetic::ColorHashExtractor;

/// `H' x W' x D` feature tensor in one named feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
    space_id: String,
    source_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
        space_id: impl Into<String>,
        source_size: (usize, usize),
    ) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{dim} feature map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { height, width, dim, data, space_id: space_id.into(), source_size })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let at = (y * self.width + x) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// Row-major iterator over per-cell feature vectors.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Feature vectors of cells selected by `mask` after nearest-neighbour
    /// resizing to the feature grid.
    pub fn masked_rows<'a>(&'a self, mask: &Mask) -> Vec<&'a [f32]> {
        let m = mask.resize_nearest(self.height, self.width);
        self.rows().zip(m.data()).filter(|(_, &on)| on).map(|(r, _)| r).collect()
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Binary grid plus a JSON sidecar naming the space.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, io::encode_feature_grid(self.height, self.width, self.dim, &self.data))?;
        let meta = FeatureMeta { space_id: self.space_id.clone(), source_size: self.source_size };
        fs::write(Self::sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, w, d, data) = io::decode_feature_grid(&fs::read(path)?, path)?;
        let meta: FeatureMeta = serde_json::from_slice(&fs::read(Self::sidecar(path))?)?;
        Self::new(h, w, d, data, meta.space_id, meta.source_size)
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    space_id: String,
    source_size: (usize, usize),
}

/// Dense feature extractor contract. The same image and configuration must
/// give the same feature map, and emitted `D` must equal `output_dim`.
pub trait ExtractorAdapter: Send + Sync {
    fn space_id(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<FeatureMap>;
}

/// Runs `adapter` and checks its output against the declared contract.
pub fn extract(image: &RgbImage, adapter: &dyn ExtractorAdapter) -> Result<FeatureMap> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::EmptyInput("cannot extract features from an empty image"));
    }
    let fm = adapter.extract(image).map_err(|e| Error::adapter(adapter.space_id(), e))?;
    if fm.dim() != adapter.output_dim() {
        return Err(Error::DimensionMismatch { expected: adapter.output_dim(), actual: fm.dim() });
    }
    if fm.space_id() != adapter.space_id() {
        return Err(Error::adapter(adapter.space_id(), format!("emitted space {:?}", fm.space_id())));
    }
    if fm.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("features from {}", adapter.space_id())));
    }
    Ok(fm)
}

/// `(M^T Phi) / m` and `m`, with the mask resized to the feature grid.
pub fn masked_mean(features: &FeatureMap, mask: &Mask) -> Result<(Vec<f32>, usize)> {
    let rows = features.masked_rows(mask);
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((mean_of(&rows, features.dim()), rows.len()))
}

pub(crate) fn mean_of(rows: &[&[f32]], dim: usize) -> Vec<f32> {
    let mut acc = vec![0f64; dim];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r.iter()) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| (v / rows.len() as f64) as f32).collect()
}

/// Cosine similarity; a zero vector is similar to nothing (0).
pub fn cosine_sim(x: &[f32], y: &[f32]) -> f64 {
    let (mut dot, mut nx, mut ny) = (0f64, 0f64, 0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0)
}

/// Feature spaces whose cosine scores are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpace {
    members: Vec<String>,
    weights: Vec<f64>,
}

impl EnsembleSpace {
    pub fn uniform(members: Vec<String>) -> Result<Self> {
        let n = members.len();
        Self::weighted(members, vec![1.0; n])
    }

    /// Weights are normalized to sum to one.
    pub fn weighted(members: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one feature space".into()));
        }
        if weights.len() != members.len() {
            return Err(Error::Config("one weight per ensemble member is required".into()));
        }
        if weights.iter().any(|&w| w.is_nan() || w <= 0.0 || !w.is_finite()) {
            return Err(Error::Config("ensemble weights must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !members.iter().all(|m| seen.insert(m)) {
            return Err(Error::Config("duplicate ensemble member".into()));
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| members[a].cmp(&members[b]));
        let total: f64 = order.iter().map(|&i| weights[i]).sum();
        Ok(Self { members, weights: weights.into_iter().map(|w| w / total).collect() })
    }

    pub fn single(space_id: impl Into<String>) -> Self {
        Self { members: vec![space_id.into()], weights: vec![1.0] }
    }

    /// SD + DINO + CLIP reference combination, uniform weights.
    pub fn reference_default() -> Self {
        let members = ["sd", "dino", "clip"]
            .iter()
            .map(|n| ExtractorConfig::preset(n).expect("reference preset exists").space_id())
            .collect();
        Self::uniform(members).expect("reference ensemble is valid")
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(member, weight)` pairs in a canonical (sorted) order, so that
    /// weighted sums do not depend on how the members were listed.
    pub fn canonical(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<_> = self.members.iter().map(String::as_str).zip(self.weights.iter().copied()).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }
}

/// Weighted mean over ensemble members of the per-space cosine similarity.
pub fn ensemble_score(
    pixel: &HashMap<&str, &[f32]>,
    prototype: &HashMap<&str, &[f32]>,
    ensemble: &EnsembleSpace,
) -> Result<f64> {
    let mut score = 0.0;
    for (space, w) in ensemble.canonical() {
        let x = pixel.get(space).ok_or_else(|| Error::MissingSpace(space.to_string()))?;
        let p = prototype.get(space).ok_or_else(|| Error::MissingSpace(space.to_string()))?;
        score += w * cosine_sim(x, p);
    }
    Ok(score)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Keys,
    Queries,
    Tokens,
}

/// Declarative extractor configuration. The space id is derived from it, so a
/// prototype bank records exactly which features produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum ExtractorConfig {
    /// Deterministic colour-kernel features (desk-scale stand-in).
    ColorHash { patch: usize, dim: usize, bandwidth: f32, seed: u64 },
    /// ViT attention-facet features; `layer` counts from the end (-1 = last).
    Vit { model: String, patch: usize, layer: i32, facet: Facet, concat_heads: bool },
    /// Text-to-image UNet cross-attention queries, resampled and concatenated.
    Diffusion {
        model: String,
        facet: Facet,
        layers: Vec<String>,
        output_grid: (usize, usize),
        timestep: u32,
        prompt: String,
    },
}

impl ExtractorConfig {
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "color-hash" => ExtractorConfig::ColorHash { patch: 8, dim: 64, bandwidth: 0.2, seed: 7 },
            "color-hash-fine" => ExtractorConfig::ColorHash { patch: 4, dim: 48, bandwidth: 0.3, seed: 11 },
            "dino" => ExtractorConfig::Vit {
                model: "dino-vitb8".into(),
                patch: 8,
                layer: -1,
                facet: Facet::Keys,
                concat_heads: true,
            },
            "mae" => ExtractorConfig::Vit {
                model: "mae-vitl16-448".into(),
                patch: 16,
                layer: -1,
                facet: Facet::Keys,
                concat_heads: true,
            },
            "clip" => ExtractorConfig::Vit {
                model: "clip-vitb16".into(),
                patch: 16,
                layer: -2,
                facet: Facet::Keys,
                concat_heads: true,
            },
            "sd" => ExtractorConfig::Diffusion {
                model: "stable-diffusion-v1-5".into(),
                facet: Facet::Queries,
                layers: vec![
                    "down.0.attn.0".into(),
                    "up.1.attn.0".into(),
                    "up.1.attn.1".into(),
                    "up.1.attn.2".into(),
                    "up.2.attn.0".into(),
                    "up.2.attn.1".into(),
                    "up.2.attn.2".into(),
                    "up.3.attn.2".into(),
                ],
                output_grid: (64, 64),
                timestep: 200,
                prompt: String::new(),
            },
            _ => return None,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["color-hash", "color-hash-fine", "sd", "dino", "clip", "mae"]
    }

    fn family(&self) -> &str {
        match self {
            ExtractorConfig::ColorHash { .. } => "color-hash",
            ExtractorConfig::Vit { model, .. } | ExtractorConfig::Diffusion { model, .. } => model,
        }
    }

    pub fn space_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("extractor config serializes");
        format!("{}-{}", self.family(), &io::sha256_hex(&json)[..12])
    }

    /// Spatial size of emitted feature grids for an input of `(h, w)` pixels.
    pub fn output_grid(&self, input: (usize, usize)) -> (usize, usize) {
        match self {
            ExtractorConfig::ColorHash { patch, .. } | ExtractorConfig::Vit { patch, .. } => {
                (input.0.div_ceil(*patch), input.1.div_ceil(*patch))
            }
            ExtractorConfig::Diffusion { output_grid, .. } => *output_grid,
        }
    }

    /// Builds a runnable adapter. Pretrained backends are external and report
    /// themselves unavailable.
    pub fn instantiate(&self) -> Result<Box<dyn ExtractorAdapter + Send + Sync>> {
        match self {
            ExtractorConfig::ColorHash { patch, dim, bandwidth, seed } => {
                Ok(Box::new(ColorHashExtractor::new(*patch, *dim, *bandwidth, *seed, self.space_id())))
            }
            other => Err(Error::BackendUnavailable(other.family().to_string())),
        }
    }
}

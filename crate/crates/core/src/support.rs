//! Support-set sampling: N generated images per category, each with an
//! aggregated cross-attention attribution map, cached on disk.
//!
//! Cache layout, one directory per category:
//!
//! ```text
//! <cache>/<category>/manifest.json     key + per-sample checksums
//! <cache>/<category>/0000.png          support image (lossless)
//! <cache>/<category>/0000.attr         attribution grid (real grid format)
//! <cache>/<category>/0000.fg.mask      foreground mask (written by proposal stage)
//! <cache>/<category>/masks.json        mask provenance + checksums
//! <cache>/<category>/features/<space>/0000.feat
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::grid::Grid;
use crate::io;
use crate::proposal::{FgBgMasks, MaskProvenance};
use crate::vocabulary::{make_prompt, Category};

pub const DEFAULT_SUPPORT_SIZE: usize = 64;
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SupportImage {
    pub pixels: RgbImage,
    pub category_id: String,
    pub sample_index: usize,
    pub seed_used: u64,
}

/// Per-pixel relevance of a support image to its query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    values: Grid<f32>,
    normalized: bool,
}

impl AttributionMap {
    /// Wraps raw relevance values; they must be finite and non-negative.
    pub fn new(values: Grid<f32>) -> Result<Self> {
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribution map".into()));
        }
        if values.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidValue("attribution values must be non-negative".into()));
        }
        Ok(Self { values, normalized: false })
    }

    /// Min-max normalization to `[0, 1]`; constant maps become all zero.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = self.values.min_max();
        let span = hi - lo;
        let values = if span > 0.0 { self.values.map(|&v| (v - lo) / span) } else { self.values.map(|_| 0.0) };
        Self { values, normalized: true }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &Grid<f32> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub(crate) fn from_normalized(values: Grid<f32>) -> Self {
        Self { values, normalized: true }
    }
}

/// Sums attention grids (layers x heads x steps) after bilinear resizing to
/// `target`, then min-max normalizes. Grids are weighted uniformly.
pub fn aggregate_attribution(raw: &[Grid<f32>], target: (usize, usize)) -> Result<AttributionMap> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("no attention grids to aggregate"));
    }
    let (h, w) = target;
    let mut acc = vec![0f64; h * w];
    for g in raw {
        if g.data().iter().any(|&v| v.is_nan() || v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidValue("attention grids must be finite and non-negative".into()));
        }
        for (a, &v) in acc.iter_mut().zip(g.resize_bilinear(h, w).data()) {
            *a += v as f64;
        }
    }
    let summed = Grid::from_vec(h, w, acc.into_iter().map(|v| v as f32).collect())?;
    Ok(AttributionMap::new(summed)?.normalized())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub model: String,
    pub guidance_scale: f64,
    pub steps: u32,
    pub sampler_name: String,
    pub batch_size: u32,
    #[serde(default)]
    pub image_size: (u32, u32),
    /// Adapter-specific parameters, recorded verbatim in the config hash.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl GeneratorConfig {
    /// Reference text-to-image sampling settings.
    pub fn reference() -> Self {
        Self {
            model: "stable-diffusion-v1-5".into(),
            guidance_scale: 8.0,
            steps: 30,
            sampler_name: "dpm-solver".into(),
            batch_size: 16,
            image_size: (512, 512),
            extra: serde_json::Value::Null,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("generator config serializes");
        io::sha256_hex(&json)[..16].to_string()
    }
}

/// Output of one generator call: the image plus the raw cross-attention grids
/// for the query tokens (any resolution, non-negative).
pub struct GeneratedSample {
    pub image: RgbImage,
    pub attention: Vec<Grid<f32>>,
}

/// Text-to-image generator contract. Identical `(prompt, category, seed)`
/// and configuration must produce bit-identical output.
pub trait GeneratorAdapter {
    fn name(&self) -> &str;
    fn config(&self) -> &GeneratorConfig;
    fn can_attribute(&self) -> bool;
    fn generate(&self, prompt: &str, category: &Category, seed: u64) -> Result<GeneratedSample>;
}

/// Seed for the `index`-th sample of a category.
pub fn sample_seed(category_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(category_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

pub type SupportSample = (SupportImage, AttributionMap);

/// Generates `n` support images for `category` (or reads them back from
/// `cache`). Attribution maps are normalized and aligned to the image.
pub fn sample_support_set(
    category: &Category,
    n: usize,
    template: &str,
    adapter: &dyn GeneratorAdapter,
    cache: Option<&SupportCache>,
) -> Result<Vec<SupportSample>> {
    if n == 0 {
        return Err(Error::EmptyInput("support set size must be at least 1"));
    }
    if !adapter.can_attribute() {
        return Err(Error::adapter(adapter.name(), "generator cannot produce attribution maps"));
    }
    let prompt = make_prompt(category, template)?;
    let key = CacheKey {
        category_id: category.id.clone(),
        prompt: prompt.clone(),
        n,
        seed: category.seed,
        adapter: adapter.name().to_string(),
        adapter_config_hash: adapter.config().hash(),
    };
    if let Some(cache) = cache {
        match cache.load_samples(&key) {
            Ok(Some(samples)) => {
                debug!(category = %category.id, "support cache hit");
                return Ok(samples);
            }
            Ok(None) => {}
            Err(e) => warn!(category = %category.id, error = %e, "support cache unreadable; regenerating"),
        }
    }
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let seed = sample_seed(category.seed, index);
        let out = adapter
            .generate(&prompt, category, seed)
            .map_err(|e| Error::adapter(format!("category {} sample {index}", category.id), e))?;
        let (w, h) = out.image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::adapter(format!("category {} sample {index}", category.id), "empty image"));
        }
        let attribution = aggregate_attribution(&out.attention, (h as usize, w as usize))
            .map_err(|e| Error::adapter(format!("category {} sample {index}", category.id), e))?;
        samples.push((
            SupportImage { pixels: out.image, category_id: category.id.clone(), sample_index: index, seed_used: seed },
            attribution,
        ));
    }
    if let Some(cache) = cache {
        cache.store_samples(&key, &samples)?;
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheKey {
    category_id: String,
    prompt: String,
    n: usize,
    seed: u64,
    adapter: String,
    adapter_config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleManifest {
    format_version: u32,
    #[serde(flatten)]
    key: CacheKey,
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    index: usize,
    seed: u64,
    image: String,
    image_crc32: u32,
    attribution: String,
    attribution_crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskManifest {
    format_version: u32,
    entries: Vec<MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    index: usize,
    provenance: MaskProvenance,
    fg: String,
    fg_crc32: u32,
    bg: String,
    bg_crc32: u32,
}

/// On-disk support cache rooted at one directory. Writers for different
/// categories may run concurrently; a category has a single writer.
#[derive(Clone, Debug)]
pub struct SupportCache {
    root: PathBuf,
}

fn read_checked(path: &Path, crc: u32) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if io::crc32(&bytes) != crc {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok(bytes)
}

impl SupportCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn category_dir(&self, category_id: &str) -> PathBuf {
        self.root.join(category_id)
    }

    fn load_samples(&self, key: &CacheKey) -> Result<Option<Vec<SupportSample>>> {
        let dir = self.category_dir(&key.category_id);
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Ok(None);
        }
        let manifest: SampleManifest = serde_json::from_slice(&fs::read(&path)?)?;
        if manifest.format_version != CACHE_VERSION || manifest.key != *key {
            debug!(category = %key.category_id, "support cache key changed");
            return Ok(None);
        }
        self.read_samples(&manifest, &dir).map(Some)
    }

    /// Loads whatever support set is cached for a category, without checking
    /// the generation key.
    pub fn load_any(&self, category_id: &str) -> Result<Vec<SupportSample>> {
        let dir = self.category_dir(category_id);
        let manifest: SampleManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != CACHE_VERSION {
            return Err(Error::Version { found: manifest.format_version, expected: CACHE_VERSION });
        }
        self.read_samples(&manifest, &dir)
    }

    fn read_samples(&self, manifest: &SampleManifest, dir: &Path) -> Result<Vec<SupportSample>> {
        manifest
            .samples
            .iter()
            .map(|e| {
                let img = io::decode_rgb_png(&read_checked(&dir.join(&e.image), e.image_crc32)?)?;
                let attr_path = dir.join(&e.attribution);
                let attr = io::decode_real_grid(&read_checked(&attr_path, e.attribution_crc32)?, &attr_path)?;
                Ok((
                    SupportImage {
                        pixels: img,
                        category_id: manifest.key.category_id.clone(),
                        sample_index: e.index,
                        seed_used: e.seed,
                    },
                    AttributionMap::from_normalized(attr),
                ))
            })
            .collect()
    }

    fn store_samples(&self, key: &CacheKey, samples: &[SupportSample]) -> Result<()> {
        let dir = self.category_dir(&key.category_id);
        // Stale derived artifacts (masks, features) belong to the old images.
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let mut entries = Vec::with_capacity(samples.len());
        for (img, attr) in samples {
            let image = format!("{:04}.png", img.sample_index);
            let attribution = format!("{:04}.attr", img.sample_index);
            let png = io::encode_rgb_png(&img.pixels)?;
            let grid = io::encode_real_grid(attr.values());
            fs::write(dir.join(&image), &png)?;
            fs::write(dir.join(&attribution), &grid)?;
            entries.push(SampleEntry {
                index: img.sample_index,
                seed: img.seed_used,
                image,
                image_crc32: io::crc32(&png),
                attribution,
                attribution_crc32: io::crc32(&grid),
            });
        }
        let manifest = SampleManifest { format_version: CACHE_VERSION, key: key.clone(), samples: entries };
        io::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn store_masks(&self, category_id: &str, masks: &[FgBgMasks]) -> Result<()> {
        let dir = self.category_dir(category_id);
        fs::create_dir_all(&dir)?;
        let mut entries = Vec::with_capacity(masks.len());
        for (index, m) in masks.iter().enumerate() {
            let fg = format!("{index:04}.fg.mask");
            let bg = format!("{index:04}.bg.mask");
            let fg_bytes = io::encode_mask(&m.fg);
            let bg_bytes = io::encode_mask(&m.bg);
            fs::write(dir.join(&fg), &fg_bytes)?;
            fs::write(dir.join(&bg), &bg_bytes)?;
            entries.push(MaskEntry {
                index,
                provenance: m.provenance,
                fg,
                fg_crc32: io::crc32(&fg_bytes),
                bg,
                bg_crc32: io::crc32(&bg_bytes),
            });
        }
        let manifest = MaskManifest { format_version: CACHE_VERSION, entries };
        io::write_atomic(&dir.join("masks.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load_masks(&self, category_id: &str) -> Result<Vec<FgBgMasks>> {
        let dir = self.category_dir(category_id);
        let manifest: MaskManifest = serde_json::from_slice(&fs::read(dir.join("masks.json"))?)?;
        manifest
            .entries
            .iter()
            .map(|e| {
                let fg_path = dir.join(&e.fg);
                let bg_path = dir.join(&e.bg);
                Ok(FgBgMasks {
                    fg: io::decode_mask(&read_checked(&fg_path, e.fg_crc32)?, &fg_path)?,
                    bg: io::decode_mask(&read_checked(&bg_path, e.bg_crc32)?, &bg_path)?,
                    provenance: e.provenance,
                })
            })
            .collect()
    }

    fn feature_path(&self, category_id: &str, space_id: &str, index: usize) -> PathBuf {
        let space_dir: String =
            space_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect();
        self.category_dir(category_id).join("features").join(space_dir).join(format!("{index:04}.feat"))
    }

    pub fn store_features(&self, category_id: &str, index: usize, features: &FeatureMap) -> Result<()> {
        let path = self.feature_path(category_id, features.space_id(), index);
        fs::create_dir_all(path.parent().expect("feature path has a parent"))?;
        features.save(&path)
    }

    pub fn load_features(&self, category_id: &str, space_id: &str, index: usize) -> Result<FeatureMap> {
        FeatureMap::load(&self.feature_path(category_id, space_id, index))
    }
}

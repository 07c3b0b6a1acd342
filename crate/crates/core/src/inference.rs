//! Target-image segmentation against a prototype bank.
//!
//! Per image: the vocabulary is narrowed by an image-text scorer, then every
//! pixel is assigned the class whose prototype pool contains its most similar
//! prototype. The background class pools the background prototypes of the
//! kept categories and competes like any other class.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::bank::{Polarity, PrototypeBank};
use crate::error::{Error, Result};
use crate::features::{extract, EnsembleSpace, ExtractorAdapter, FeatureMap};
use crate::grid::Grid;
use crate::io;
use crate::vocabulary::Vocabulary;

pub const DEFAULT_ETA: usize = 10;
pub const DEFAULT_WINDOWS: [usize; 2] = [448, 336];
pub const DEFAULT_STRIDE: usize = 224;
pub const DEFAULT_SHORT_SIDE: usize = 448;
pub const DEFAULT_NO_BG_THRESHOLD: f32 = 0.75;
/// Per-class score maps with the winning prototype id per class.
pub type ScoreMaps = (Vec<Grid<f32>>, Vec<Grid<u32>>);

/// Winner-grid value for pixels won by a constant-score background.
pub const NO_WINNER: u32 = u32::MAX;

/// Image-text relevance: one finite score per prompt, higher is more relevant.
pub trait PrefilterScorer: Send + Sync {
    fn score(&self, image: &RgbImage, prompts: &[String]) -> Result<Vec<f32>>;

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Every non-empty subset of `names` as `(member indices, "a and b and ...")`,
/// enumerated by bitmask so subset `s` has members `{i : bit i of s}`.
pub fn combination_prompts(names: &[&str]) -> Vec<(Vec<usize>, String)> {
    assert!(names.len() < 32, "combination prompts need fewer than 32 names");
    (1u32..(1 << names.len()))
        .map(|bits| {
            let members: Vec<usize> = (0..names.len()).filter(|i| bits & (1 << i) != 0).collect();
            let prompt = members.iter().map(|&i| names[i]).collect::<Vec<_>>().join(" and ");
            (members, prompt)
        })
        .collect()
}

fn softmax(scores: &[f32]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s as f64));
    let exp: Vec<f64> = scores.iter().map(|&s| (s as f64 - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn checked_scores(scorer: &dyn PrefilterScorer, image: &RgbImage, prompts: &[String]) -> Result<Vec<f32>> {
    let s = scorer.score(image, prompts)?;
    if s.len() != prompts.len() {
        return Err(Error::DimensionMismatch { expected: prompts.len(), actual: s.len() });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prefilter scores".into()));
    }
    Ok(s)
}

/// Indices (ascending) of the vocabulary categories kept for `image`.
///
/// Single-prompt scores are softmax-normalized and categories at or below
/// `1/|C|` dropped; at most `eta` survivors (highest probability first) enter
/// the combination stage, where every non-empty subset is scored as one prompt
/// on raw scores and the best subset wins (first on ties). A failing scorer
/// keeps every category.
pub fn prefilter(image: &RgbImage, vocab: &Vocabulary, scorer: &dyn PrefilterScorer, eta: usize) -> Result<Vec<usize>> {
    if eta == 0 {
        return Err(Error::InvalidValue("eta must be at least 1".into()));
    }
    let n = vocab.len();
    if n <= 1 {
        return Ok((0..n).collect());
    }
    let all: Vec<usize> = (0..n).collect();
    let names: Vec<&str> = vocab.categories().iter().map(|c| c.query_text.as_str()).collect();
    let singles: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let probs = match checked_scores(scorer, image, &singles) {
        Ok(s) => softmax(&s),
        Err(e) => {
            warn!(error = %e, "prefilter scorer failed; keeping every category");
            return Ok(all);
        }
    };
    let floor = 1.0 / n as f64;
    let mut survivors: Vec<usize> = all.iter().copied().filter(|&i| probs[i] > floor).collect();
    if survivors.is_empty() {
        // all probabilities equal 1/|C|: keep the first best
        let best = (0..n).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        survivors.push(best);
    }
    survivors.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    survivors.truncate(eta);
    survivors.sort_unstable();

    let sub_names: Vec<&str> = survivors.iter().map(|&i| names[i]).collect();
    let combos = combination_prompts(&sub_names);
    let prompts: Vec<String> = combos.iter().map(|(_, p)| p.clone()).collect();
    let scores = match checked_scores(scorer, image, &prompts) {
        Ok(s) => s,
        Err(e) => {
            warn!(error = %e, "prefilter scorer failed; keeping every category");
            return Ok(all);
        }
    };
    let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    Ok(combos[best].0.iter().map(|&j| survivors[j]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    /// Background competes with the union of background prototypes.
    Prototypes,
    /// No background prototypes; background wins where every class scores
    /// below this constant.
    Threshold(f32),
}

/// Which categories contribute background prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundPool {
    #[default]
    Kept,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub background: BackgroundMode,
    pub background_pool: BackgroundPool,
    /// Pre-filter combination width; `None` disables pre-filtering.
    pub eta: Option<usize>,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { background: BackgroundMode::Prototypes, background_pool: BackgroundPool::Kept, eta: Some(DEFAULT_ETA) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowOptions {
    pub windows: Vec<usize>,
    pub stride: usize,
    /// Images are resized so their shorter side has this length.
    pub short_side: Option<usize>,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self { windows: DEFAULT_WINDOWS.to_vec(), stride: DEFAULT_STRIDE, short_side: Some(DEFAULT_SHORT_SIDE) }
    }
}

/// Address of one prototype in a bank.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrototypeRef {
    pub category_id: String,
    pub space_id: String,
    pub polarity: Polarity,
    pub index: usize,
}

struct PoolEntry {
    vector: Vec<f32>,
    norm: f64,
    id: u32,
}

impl PoolEntry {
    fn new(vector: &[f32], id: u32) -> Self {
        let norm = vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        Self { vector: vector.to_vec(), norm, id }
    }
}

struct PoolClass {
    label: u16,
    /// One pool per ensemble space, canonical order.
    spaces: Vec<Vec<PoolEntry>>,
}

/// Per-class prototype pools for one kept-class set.
pub struct ClassPools {
    classes: Vec<PoolClass>,
    constant_background: Option<f32>,
    refs: Vec<PrototypeRef>,
    spaces: Vec<(String, f64)>,
}

impl ClassPools {
    /// Pools for `kept` (indices into `vocab`), background first.
    pub fn build(
        bank: &PrototypeBank,
        vocab: &Vocabulary,
        kept: &[usize],
        ensemble: &EnsembleSpace,
        options: &SegmentOptions,
    ) -> Result<Self> {
        let spaces: Vec<(String, f64)> = ensemble.canonical().into_iter().map(|(s, w)| (s.to_string(), w)).collect();
        let space_ids: Vec<String> = spaces.iter().map(|(s, _)| s.clone()).collect();
        let missing = bank.missing(vocab, &space_ids);
        let missing_kept: Vec<String> =
            kept.iter().map(|&i| vocab.categories()[i].id.clone()).filter(|id| missing.contains(id)).collect();
        if !missing_kept.is_empty() {
            return Err(Error::MissingCategories(missing_kept));
        }
        let mut refs = Vec::new();
        let mut pool_of = |ids: &[usize], pol: Polarity| -> Vec<Vec<PoolEntry>> {
            space_ids
                .iter()
                .map(|space| {
                    let mut pool = Vec::new();
                    for &ci in ids {
                        let id = &vocab.categories()[ci].id;
                        let Some(set) = bank.get(id, space) else { continue };
                        for (index, p) in set.get(pol).iter().enumerate() {
                            pool.push(PoolEntry::new(&p.vector, refs.len() as u32));
                            refs.push(PrototypeRef {
                                category_id: id.clone(),
                                space_id: space.clone(),
                                polarity: pol,
                                index,
                            });
                        }
                    }
                    pool
                })
                .collect()
        };

        let mut classes = Vec::new();
        let mut constant_background = None;
        match options.background {
            BackgroundMode::Prototypes => {
                let contributors: Vec<usize> = match options.background_pool {
                    BackgroundPool::Kept => kept.to_vec(),
                    BackgroundPool::All => (0..vocab.len()).filter(|&i| !missing.contains(&vocab.categories()[i].id)).collect(),
                };
                let pools = pool_of(&contributors, Polarity::Bg);
                if pools.iter().any(Vec::is_empty) {
                    warn!("background prototype pool is empty; background class omitted");
                } else {
                    classes.push(PoolClass { label: 0, spaces: pools });
                }
            }
            BackgroundMode::Threshold(t) => constant_background = Some(t),
        }
        for &ci in kept {
            let pools = pool_of(&[ci], Polarity::Fg);
            if pools.iter().any(Vec::is_empty) {
                warn!(category = %vocab.categories()[ci].id, "no foreground prototypes; class omitted");
                continue;
            }
            classes.push(PoolClass { label: ci as u16 + 1, spaces: pools });
        }
        Ok(Self { classes, constant_background, refs, spaces })
    }

    /// Label ids in scoring order (background first when present).
    pub fn labels(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self.constant_background.map(|_| 0).into_iter().collect();
        v.extend(self.classes.iter().map(|c| c.label));
        v
    }

    pub fn prototype_refs(&self) -> &[PrototypeRef] {
        &self.refs
    }

    pub fn spaces(&self) -> &[(String, f64)] {
        &self.spaces
    }
}

/// Max cosine over each class pool at every cell of `fm`, with the argmax
/// prototype id. Classes follow `ClassPools::labels` order.
fn space_scores(fm: &FeatureMap, pools: &ClassPools, space: usize) -> (Vec<Grid<f32>>, Vec<Grid<u32>>) {
    let (h, w) = (fm.height(), fm.width());
    let mut scores = Vec::new();
    let mut winners = Vec::new();
    if let Some(t) = pools.constant_background {
        scores.push(Grid::filled(h, w, t));
        winners.push(Grid::filled(h, w, NO_WINNER));
    }
    let norms: Vec<f64> =
        fm.rows().map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()).collect();
    for class in &pools.classes {
        let pool = &class.spaces[space];
        let mut s = Vec::with_capacity(h * w);
        let mut win = Vec::with_capacity(h * w);
        for (row, &nx) in fm.rows().zip(&norms) {
            let mut best = (f64::NEG_INFINITY, NO_WINNER);
            for p in pool {
                let cos = if nx == 0.0 || p.norm == 0.0 {
                    0.0
                } else {
                    let dot: f64 = row.iter().zip(&p.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
                    (dot / (nx * p.norm)).clamp(-1.0, 1.0)
                };
                if cos > best.0 {
                    best = (cos, p.id);
                }
            }
            s.push(best.0 as f32);
            win.push(best.1);
        }
        scores.push(Grid::from_vec(h, w, s).expect("sized"));
        winners.push(Grid::from_vec(h, w, win).expect("sized"));
    }
    (scores, winners)
}

fn argmax_labels(labels: &[u16], scores: &[Grid<f32>], winners: &[Grid<u32>]) -> (Grid<u16>, Grid<u32>) {
    let (h, w) = scores.first().map_or((0, 0), Grid::shape);
    let mut out = Grid::filled(h, w, 0u16);
    let mut win = Grid::filled(h, w, NO_WINNER);
    for i in 0..h * w {
        let mut best = 0;
        for c in 1..scores.len() {
            if scores[c].data()[i] > scores[best].data()[i] {
                best = c;
            }
        }
        out.data_mut()[i] = labels[best];
        win.data_mut()[i] = winners[best].data()[i];
    }
    (out, win)
}

/// Labels and scores at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSegmentation {
    pub labels: Grid<u16>,
    pub class_labels: Vec<u16>,
    pub scores: Vec<Grid<f32>>,
    pub winner: Grid<u32>,
}

/// Nearest-prototype assignment on precomputed feature maps (one per
/// ensemble space). Spaces are combined on the grid of the first canonical
/// space; the winner comes from that space.
pub fn segment_feature_maps(features: &[FeatureMap], pools: &ClassPools) -> Result<FeatureSegmentation> {
    let by_space: HashMap<&str, &FeatureMap> = features.iter().map(|f| (f.space_id(), f)).collect();
    let (first, _) = &pools.spaces[0];
    let base = by_space.get(first.as_str()).ok_or_else(|| Error::MissingSpace(first.clone()))?;
    let (h, w) = (base.height(), base.width());
    combine_spaces(pools, (h, w), |si, space| {
        let fm = by_space.get(space).ok_or_else(|| Error::MissingSpace(space.to_string()))?;
        Ok(space_scores(fm, pools, si))
    })
    .map(|(scores, winners)| {
        let class_labels = pools.labels();
        let (labels, winner) = argmax_labels(&class_labels, &scores, &winners);
        FeatureSegmentation { labels, class_labels, scores, winner }
    })
}

/// Weighted sum of per-space class scores resized to `shape`.
fn combine_spaces(
    pools: &ClassPools,
    shape: (usize, usize),
    mut per_space: impl FnMut(usize, &str) -> Result<ScoreMaps>,
) -> Result<ScoreMaps> {
    let (h, w) = shape;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    let mut winners = Vec::new();
    for (si, (space, weight)) in pools.spaces.iter().enumerate() {
        let (scores, wins) = per_space(si, space)?;
        if si == 0 {
            acc = vec![vec![0f64; h * w]; scores.len()];
            winners = wins.iter().map(|g| g.resize_nearest(h, w)).collect();
        }
        for (a, s) in acc.iter_mut().zip(&scores) {
            let s = s.resize_bilinear(h, w);
            for (x, &v) in a.iter_mut().zip(s.data()) {
                *x += weight * v as f64;
            }
        }
    }
    // a constant background is not a similarity and is not weighted
    if let Some(t) = pools.constant_background {
        acc[0].iter_mut().for_each(|v| *v = t as f64);
    }
    let scores = acc
        .into_iter()
        .map(|a| Grid::from_vec(h, w, a.into_iter().map(|v| v as f32).collect()).expect("sized"))
        .collect();
    Ok((scores, winners))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// Label ids over the background-expanded vocabulary (0 = background).
    pub labels: Grid<u16>,
    /// Label id of each score map.
    pub class_labels: Vec<u16>,
    pub scores: Vec<Grid<f32>>,
    /// Index into `prototype_refs` of the winning prototype, or [`NO_WINNER`].
    pub winner: Grid<u32>,
    pub prototype_refs: Vec<PrototypeRef>,
    /// Vocabulary indices surviving the pre-filter.
    pub kept_classes: Vec<usize>,
    pub label_names: Vec<String>,
}

impl SegmentationResult {
    pub fn winner_at(&self, y: usize, x: usize) -> Option<&PrototypeRef> {
        let w = *self.winner.get(y, x);
        (w != NO_WINNER).then(|| &self.prototype_refs[w as usize])
    }

    /// Label PNG (VOC palette) plus `<path>.json` naming each index.
    pub fn write_labels(&self, path: &Path) -> Result<()> {
        io::write_label_png(&self.labels, path)?;
        let sidecar = LabelSidecar {
            width: self.labels.width(),
            height: self.labels.height(),
            labels: self.label_names.iter().enumerate().map(|(i, n)| (i as u16, n.clone())).collect(),
            kept: self.kept_classes.iter().map(|&i| self.label_names[i + 1].clone()).collect(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Score maps as one feature-format grid with a channel per scored class.
    pub fn write_scores(&self, path: &Path) -> Result<()> {
        let (h, w) = self.labels.shape();
        let c = self.scores.len();
        let mut values = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            values.extend(self.scores.iter().map(|s| s.data()[i]));
        }
        fs::write(path, io::encode_feature_grid(h, w, c, &values))?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LabelSidecar {
    width: usize,
    height: usize,
    labels: std::collections::BTreeMap<u16, String>,
    kept: Vec<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Start offsets of windows of length `window` along an axis of length `len`;
/// the last window is pulled back to end at the edge.
pub fn tile_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let window = window.min(len);
    let n = len.saturating_sub(window).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride + window).min(len) - window).collect()
}

/// `(y, x, height, width)` of every tile for one window size.
pub fn window_tiles(height: usize, width: usize, window: usize, stride: usize) -> Vec<(usize, usize, usize, usize)> {
    let (th, tw) = (window.min(height), window.min(width));
    let xs = tile_origins(width, window, stride);
    tile_origins(height, window, stride)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| (y, x, th, tw)))
        .collect()
}

/// Mean of per-tile class scores over every covering tile and window size,
/// plus the best-scoring prototype per class across tiles.
pub fn accumulate_windows(
    shape: (usize, usize),
    options: &WindowOptions,
    classes: usize,
    mut tile: impl FnMut(usize, usize, usize, usize) -> Result<ScoreMaps>,
) -> Result<ScoreMaps> {
    let (h, w) = shape;
    if options.windows.is_empty() || options.stride == 0 {
        return Err(Error::Config("sliding windows need at least one window and a positive stride".into()));
    }
    if options.stride > *options.windows.iter().min().expect("non-empty") {
        return Err(Error::Config("stride exceeds the smallest window".into()));
    }
    let mut sum = vec![vec![0f64; h * w]; classes];
    let mut best: Vec<Vec<(f32, u32)>> = vec![vec![(f32::NEG_INFINITY, NO_WINNER); h * w]; classes];
    let mut count = vec![0u32; h * w];
    for &window in &options.windows {
        for (y0, x0, th, tw) in window_tiles(h, w, window, options.stride) {
            let (scores, winners) = tile(y0, x0, th, tw)?;
            for y in 0..th {
                for x in 0..tw {
                    let i = (y0 + y) * w + x0 + x;
                    let j = y * tw + x;
                    count[i] += 1;
                    for c in 0..classes {
                        let s = scores[c].data()[j];
                        sum[c][i] += s as f64;
                        if s > best[c][i].0 {
                            best[c][i] = (s, winners[c].data()[j]);
                        }
                    }
                }
            }
        }
    }
    let scores = sum
        .into_iter()
        .map(|s| {
            let v = s.iter().zip(&count).map(|(&a, &n)| (a / n as f64) as f32).collect();
            Grid::from_vec(h, w, v).expect("sized")
        })
        .collect();
    let winners = best
        .into_iter()
        .map(|b| Grid::from_vec(h, w, b.into_iter().map(|(_, id)| id).collect()).expect("sized"))
        .collect();
    Ok((scores, winners))
}

/// Optional post-hoc label refinement (e.g. pixel-adaptive mask refinement).
pub trait Refiner {
    fn refine(&self, result: &SegmentationResult, image: &RgbImage) -> Result<Grid<u16>>;
}

/// Passes `result` through `refiner`, checking the refined label shape.
pub fn pamr_hook(result: SegmentationResult, image: &RgbImage, refiner: Option<&dyn Refiner>) -> Result<SegmentationResult> {
    let Some(r) = refiner else { return Ok(result) };
    let labels = r.refine(&result, image)?;
    if labels.shape() != result.labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "refiner returned {:?}, expected {:?}",
            labels.shape(),
            result.labels.shape()
        )));
    }
    Ok(SegmentationResult { labels, ..result })
}

/// Everything needed to segment images against one bank.
pub struct Segmenter<'a> {
    pub bank: &'a PrototypeBank,
    pub vocab: &'a Vocabulary,
    pub ensemble: &'a EnsembleSpace,
    pub extractors: Vec<&'a dyn ExtractorAdapter>,
    pub scorer: Option<&'a dyn PrefilterScorer>,
    pub options: SegmentOptions,
}

impl Segmenter<'_> {
    fn extractor(&self, space: &str) -> Result<&dyn ExtractorAdapter> {
        self.extractors.iter().copied().find(|e| e.space_id() == space).ok_or_else(|| Error::MissingSpace(space.into()))
    }

    pub fn kept_classes(&self, image: &RgbImage) -> Result<Vec<usize>> {
        match (self.options.eta, self.scorer) {
            (Some(eta), Some(scorer)) => prefilter(image, self.vocab, scorer, eta),
            _ => Ok((0..self.vocab.len()).collect()),
        }
    }

    pub fn pools(&self, kept: &[usize]) -> Result<ClassPools> {
        ClassPools::build(self.bank, self.vocab, kept, self.ensemble, &self.options)
    }

    /// Class scores for one image region at its pixel resolution.
    fn crop_scores(&self, crop: &RgbImage, pools: &ClassPools) -> Result<ScoreMaps> {
        let shape = (crop.height() as usize, crop.width() as usize);
        combine_spaces(pools, shape, |si, space| {
            let fm = extract(crop, self.extractor(space)?)?;
            Ok(space_scores(&fm, pools, si))
        })
    }

    fn finish(&self, scores: Vec<Grid<f32>>, winners: Vec<Grid<u32>>, pools: &ClassPools, kept: Vec<usize>) -> SegmentationResult {
        let class_labels = pools.labels();
        let (labels, winner) = argmax_labels(&class_labels, &scores, &winners);
        SegmentationResult {
            labels,
            class_labels,
            scores,
            winner,
            prototype_refs: pools.refs.clone(),
            kept_classes: kept,
            label_names: self.vocab.label_names(),
        }
    }

    /// Whole image as a single window, at its own resolution.
    pub fn segment(&self, image: &RgbImage) -> Result<SegmentationResult> {
        let kept = self.kept_classes(image)?;
        let pools = self.pools(&kept)?;
        let (scores, winners) = self.crop_scores(image, &pools)?;
        Ok(self.finish(scores, winners, &pools, kept))
    }

    /// Resizes the shorter side, averages class scores over sliding windows
    /// of every size, and maps the result back to the input resolution.
    pub fn sliding_window_segment(&self, image: &RgbImage, windows: &WindowOptions) -> Result<SegmentationResult> {
        let kept = self.kept_classes(image)?;
        let pools = self.pools(&kept)?;
        let (w0, h0) = (image.width() as usize, image.height() as usize);
        if w0 == 0 || h0 == 0 {
            return Err(Error::EmptyInput("cannot segment an empty image"));
        }
        let resized;
        let work = match windows.short_side {
            Some(s) if s != w0.min(h0) => {
                let scale = s as f64 / w0.min(h0) as f64;
                let (w, h) = ((w0 as f64 * scale).round().max(1.0) as u32, (h0 as f64 * scale).round().max(1.0) as u32);
                resized = imageops::resize(image, w, h, imageops::FilterType::Triangle);
                &resized
            }
            _ => image,
        };
        let (h, w) = (work.height() as usize, work.width() as usize);
        let (scores, winners) = accumulate_windows((h, w), windows, pools.labels().len(), |y, x, th, tw| {
            let crop = imageops::crop_imm(work, x as u32, y as u32, tw as u32, th as u32).to_image();
            self.crop_scores(&crop, &pools)
        })?;
        let (scores, winners) = if (h, w) == (h0, w0) {
            (scores, winners)
        } else {
            (
                scores.iter().map(|s| s.resize_bilinear(h0, w0)).collect(),
                winners.iter().map(|g| g.resize_nearest(h0, w0)).collect(),
            )
        };
        Ok(self.finish(scores, winners, &pools, kept))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BuildInfo, PrototypeSet, Prototype, Provenance};
    use crate::vocabulary::Category;
    use std::collections::BTreeMap;

    struct Scripted(HashMap<String, f32>);

    impl PrefilterScorer for Scripted {
        fn score(&self, _: &RgbImage, prompts: &[String]) -> Result<Vec<f32>> {
            Ok(prompts.iter().map(|p| self.0.get(p).copied().unwrap_or(-10.0)).collect())
        }
    }

    struct Broken;
    impl PrefilterScorer for Broken {
        fn score(&self, _: &RgbImage, _: &[String]) -> Result<Vec<f32>> {
            Err(Error::BackendUnavailable("clip".into()))
        }
    }

    fn vocab(names: &[&str]) -> Vocabulary {
        Vocabulary::new(names.iter().map(|n| Category::new(*n, *n, 0)).collect(), "background").unwrap()
    }

    #[test]
    fn combination_count() {
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let combos = combination_prompts(&refs);
        assert_eq!(combos.len(), 1023);
        assert_eq!(combos[2].1, "c0 and c1");
        assert!(combination_prompts(&[]).is_empty());
    }

    #[test]
    fn single_category_is_always_kept() {
        let v = vocab(&["a"]);
        let img = RgbImage::new(1, 1);
        assert_eq!(prefilter(&img, &v, &Scripted(HashMap::new()), 10).unwrap(), vec![0]);
    }

    #[test]
    fn hand_applied_rules() {
        // softmax(ln .6, ln .3, ln .1) = (.6, .3, .1); threshold 1/3
        let v = vocab(&["a", "b", "c"]);
        let scores = HashMap::from([
            ("a".to_string(), 0.6f32.ln()),
            ("b".to_string(), 0.3f32.ln()),
            ("c".to_string(), 0.1f32.ln()),
        ]);
        let img = RgbImage::new(1, 1);
        assert_eq!(prefilter(&img, &v, &Scripted(scores), 10).unwrap(), vec![0]);
    }

    #[test]
    fn scorer_failure_keeps_everything() {
        let v = vocab(&["a", "b", "c"]);
        assert_eq!(prefilter(&RgbImage::new(1, 1), &v, &Broken, 3).unwrap(), vec![0, 1, 2]);
        assert!(prefilter(&RgbImage::new(1, 1), &v, &Broken, 0).is_err());
    }

    #[test]
    fn tiles_are_clamped_to_the_edge() {
        assert_eq!(tile_origins(672, 448, 224), vec![0, 224]);
        assert_eq!(tile_origins(672, 336, 224), vec![0, 224, 336]);
        assert_eq!(tile_origins(448, 336, 224), vec![0, 112]);
        assert_eq!(tile_origins(448, 448, 224), vec![0]);
        assert_eq!(tile_origins(100, 448, 224), vec![0]);
        assert_eq!(window_tiles(448, 448, 448, 224), vec![(0, 0, 448, 448)]);
    }

    fn bank_with(protos: &[(&str, Polarity, Vec<f32>)]) -> PrototypeBank {
        let mut bank = PrototypeBank::new(BuildInfo {
            n_support: 1,
            k_parts: 1,
            seed: 0,
            fallback_fg: 0.5,
            fallback_bg: 0.2,
            stuff_threshold: None,
            spaces: vec!["s".into()],
            generator_config_hash: String::new(),
            config_digest: String::new(),
        });
        let mut sets: BTreeMap<&str, PrototypeSet> = BTreeMap::new();
        for (cat, pol, v) in protos {
            let set = sets.entry(cat).or_default();
            let list = if *pol == Polarity::Fg { &mut set.fg } else { &mut set.bg };
            list.push(Prototype {
                vector: v.clone(),
                space_id: "s".into(),
                polarity: *pol,
                category_id: cat.to_string(),
                provenance: Provenance::Instance { sample: list.len(), pixels: 1 },
            });
        }
        for (cat, set) in sets {
            bank.insert(cat, BTreeMap::from([("s".to_string(), set)])).unwrap();
        }
        bank
    }

    #[test]
    fn exact_match_wins_and_ties_go_to_background() {
        let bank = bank_with(&[
            ("a", Polarity::Fg, vec![1., 0., 0.]),
            ("a", Polarity::Bg, vec![0., 0., 1.]),
            ("b", Polarity::Fg, vec![0., 1., 0.]),
            ("b", Polarity::Bg, vec![0., 0., 1.]),
        ]);
        let v = vocab(&["a", "b"]);
        let ens = EnsembleSpace::single("s");
        let pools = ClassPools::build(&bank, &v, &[0, 1], &ens, &SegmentOptions::default()).unwrap();
        // pixels: a, b, background, equidistant between a/b/bg
        let s = 1.0 / 3f32.sqrt();
        let fm = FeatureMap::new(1, 4, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1., s, s, s], "s", (1, 4)).unwrap();
        let seg = segment_feature_maps(&[fm], &pools).unwrap();
        assert_eq!(seg.labels.data(), &[1, 2, 0, 0]);
        assert_eq!(seg.class_labels, vec![0, 1, 2]);
    }

    #[test]
    fn threshold_background_and_empty_pool() {
        let bank = bank_with(&[("a", Polarity::Fg, vec![1., 0.]), ("b", Polarity::Fg, vec![0., 1.])]);
        let v = vocab(&["a", "b"]);
        let ens = EnsembleSpace::single("s");
        let fm = FeatureMap::new(1, 3, 2, vec![1., 0., 1., 1., 1., 0.2], "s", (1, 3)).unwrap();
        let pools = ClassPools::build(&bank, &v, &[0, 1], &ens, &SegmentOptions::default()).unwrap();
        assert_eq!(pools.labels(), vec![1, 2]);
        let opts = SegmentOptions { background: BackgroundMode::Threshold(0.75), ..Default::default() };
        let pools = ClassPools::build(&bank, &v, &[0, 1], &ens, &opts).unwrap();
        let seg = segment_feature_maps(&[fm], &pools).unwrap();
        // cos([1,1],[1,0]) = 0.707 < 0.75
        assert_eq!(seg.labels.data(), &[1, 0, 1]);
        assert_eq!(seg.winner.data()[1], NO_WINNER);
    }

    #[test]
    fn missing_categories_are_listed() {
        let bank = bank_with(&[("a", Polarity::Fg, vec![1., 0.])]);
        let v = vocab(&["a", "b", "c"]);
        let err = ClassPools::build(&bank, &v, &[0, 1, 2], &EnsembleSpace::single("s"), &SegmentOptions::default());
        assert!(matches!(err, Err(Error::MissingCategories(ids)) if ids == vec!["b".to_string(), "c".to_string()]));
    }

    struct Flip;
    impl Refiner for Flip {
        fn refine(&self, r: &SegmentationResult, _: &RgbImage) -> Result<Grid<u16>> {
            Ok(r.labels.map(|&l| 1 - l.min(1)))
        }
    }
    struct Wrong;
    impl Refiner for Wrong {
        fn refine(&self, _: &SegmentationResult, _: &RgbImage) -> Result<Grid<u16>> {
            Ok(Grid::filled(1, 1, 0))
        }
    }

    #[test]
    fn refinement_hook() {
        let r = SegmentationResult {
            labels: Grid::filled(2, 2, 1),
            class_labels: vec![0, 1],
            scores: vec![],
            winner: Grid::filled(2, 2, NO_WINNER),
            prototype_refs: vec![],
            kept_classes: vec![0],
            label_names: vec!["background".into(), "a".into()],
        };
        let img = RgbImage::new(2, 2);
        assert_eq!(pamr_hook(r.clone(), &img, None).unwrap(), r);
        assert_eq!(pamr_hook(r.clone(), &img, Some(&Flip)).unwrap().labels, Grid::filled(2, 2, 0));
        assert!(matches!(pamr_hook(r, &img, Some(&Wrong)), Err(Error::ShapeMismatch(_))));
    }
}

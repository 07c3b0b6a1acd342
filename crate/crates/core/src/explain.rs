//! Provenance lookup: from a segmented pixel to the support-image regions its
//! winning prototype was distilled from.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::Serialize;
use tracing::warn;

use crate::bank::{Kind, Polarity, PrototypeBank, Provenance};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::inference::{PrototypeRef, SegmentationResult};
use crate::io;
use crate::kmeans::nearest;
use crate::proposal::FgBgMasks;
use crate::support::SupportCache;

pub const PANEL_SIZE: u32 = 128;
pub const MONTAGE_COLUMNS: u32 = 3;
pub const MAX_PANELS: usize = 6;
const QUERY_CROP: u32 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub sample_index: usize,
    /// Support-image resolution; never empty.
    pub mask: Mask,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub pixel: (usize, usize),
    /// Label name at the pixel.
    pub label: String,
    pub prototype: Option<PrototypeRef>,
    pub provenance: Option<Provenance>,
    pub evidence: Vec<Evidence>,
    /// Evidence could not be recovered (no support cache, or no prototype).
    pub degraded: bool,
    pub query_crop: RgbImage,
    pub region_overlay: RgbImage,
}

impl Explanation {
    /// Category whose support set the evidence comes from.
    pub fn evidence_category(&self) -> Option<&str> {
        self.prototype.as_ref().map(|p| p.category_id.as_str())
    }

    pub fn kind(&self) -> Option<Kind> {
        self.provenance.as_ref().map(|p| match p {
            Provenance::Class { .. } => Kind::Class,
            Provenance::Instance { .. } => Kind::Instance,
            Provenance::Part { .. } => Kind::Part,
        })
    }
}

fn polarity_mask(m: &FgBgMasks, polarity: Polarity) -> &Mask {
    match polarity {
        Polarity::Fg => &m.fg,
        Polarity::Bg => &m.bg,
    }
}

/// Cluster index of every masked feature cell per support image (feature
/// resolution; `None` outside the mask), by nearest stored centroid.
pub fn part_memberships(
    bank: &PrototypeBank,
    cache: &SupportCache,
    category_id: &str,
    space_id: &str,
    polarity: Polarity,
) -> Result<Vec<(usize, Grid<Option<usize>>)>> {
    let set = bank.get(category_id, space_id).ok_or_else(|| Error::UnknownCategory(category_id.to_string()))?;
    let centroids: Vec<Vec<f32>> =
        set.get(polarity).iter().filter(|p| p.kind() == Kind::Part).map(|p| p.vector.clone()).collect();
    let masks = cache.load_masks(category_id)?;
    let mut out = Vec::new();
    for (sample, m) in masks.iter().enumerate() {
        let fm = cache.load_features(category_id, space_id, sample)?;
        let mask = polarity_mask(m, polarity).resize_nearest(fm.height(), fm.width());
        if mask.is_all_off() || centroids.is_empty() {
            continue;
        }
        let grid = Grid::from_fn(fm.height(), fm.width(), |y, x| {
            mask.get(y, x).then(|| nearest(fm.pixel(y, x), &centroids))
        });
        out.push((sample, grid));
    }
    Ok(out)
}

fn evidence_masks(
    bank: &PrototypeBank,
    cache: &SupportCache,
    r: &PrototypeRef,
    provenance: &Provenance,
) -> Result<Vec<(usize, Mask)>> {
    let masks = cache.load_masks(&r.category_id)?;
    let mask_of = |n: usize| -> Result<Mask> {
        masks
            .get(n)
            .map(|m| polarity_mask(m, r.polarity).clone())
            .ok_or_else(|| Error::format(cache.category_dir(&r.category_id), format!("no masks for sample {n}")))
    };
    Ok(match provenance {
        Provenance::Instance { sample, .. } => vec![(*sample, mask_of(*sample)?)],
        Provenance::Class { samples, .. } => samples.iter().map(|&n| Ok((n, mask_of(n)?))).collect::<Result<_>>()?,
        Provenance::Part { cluster, .. } => part_memberships(bank, cache, &r.category_id, &r.space_id, r.polarity)?
            .into_iter()
            .map(|(n, grid)| {
                let (h, w) = masks[n].fg.shape();
                (n, grid.map(|c| *c == Some(*cluster)).resize_nearest(h, w))
            })
            .collect(),
    })
}

fn tint(base: [u8; 3], color: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| ((base[i] as u16 + color[i] as u16) / 2) as u8)
}

fn overlay(image: &RgbImage, mask: &Mask, color: [u8; 3]) -> RgbImage {
    let m = mask.resize_nearest(image.height() as usize, image.width() as usize);
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let p = image.get_pixel(x, y).0;
        Rgb(if *m.get(y as usize, x as usize) { tint(p, color) } else { p })
    })
}

fn highlight_color(label: u16) -> [u8; 3] {
    if label == 0 {
        [255, 255, 255]
    } else {
        io::voc_palette()[label as usize % 256]
    }
}

/// Explanation for pixel `(x, y)` of `result`. Without a support cache (or
/// when the pixel has no winning prototype) the explanation is degraded:
/// prototype metadata only, no evidence.
pub fn explain_pixel(
    result: &SegmentationResult,
    image: &RgbImage,
    (x, y): (usize, usize),
    bank: &PrototypeBank,
    cache: Option<&SupportCache>,
) -> Result<Explanation> {
    let (h, w) = result.labels.shape();
    if x >= w || y >= h {
        return Err(Error::InvalidValue(format!("pixel ({x}, {y}) outside {w}x{h}")));
    }
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(Error::ShapeMismatch(format!("image {:?} vs labels {:?}", image.dimensions(), (w, h))));
    }
    let label = *result.labels.get(y, x);
    let label_name = result.label_names[label as usize].clone();
    let color = highlight_color(label);

    let half = QUERY_CROP / 2;
    let cx = (x as u32).saturating_sub(half).min(image.width().saturating_sub(QUERY_CROP));
    let cy = (y as u32).saturating_sub(half).min(image.height().saturating_sub(QUERY_CROP));
    let query_crop = imageops::crop_imm(image, cx, cy, QUERY_CROP.min(image.width()), QUERY_CROP.min(image.height())).to_image();
    let region = result.labels.map(|&l| l == label);
    let region_overlay = overlay(image, &region, color);

    let prototype = result.winner_at(y, x).cloned();
    let provenance = prototype.as_ref().and_then(|r| {
        bank.get(&r.category_id, &r.space_id).and_then(|s| s.get(r.polarity).get(r.index)).map(|p| p.provenance.clone())
    });
    let mut expl = Explanation {
        pixel: (x, y),
        label: label_name,
        prototype: prototype.clone(),
        provenance: provenance.clone(),
        evidence: Vec::new(),
        degraded: true,
        query_crop,
        region_overlay,
    };
    let (Some(r), Some(prov), Some(cache)) = (prototype, provenance, cache) else {
        return Ok(expl);
    };
    let support = match cache.load_any(&r.category_id) {
        Ok(s) => s,
        Err(e) => {
            warn!(category = %r.category_id, error = %e, "support cache unavailable; explanation degraded");
            return Ok(expl);
        }
    };
    for (n, mask) in evidence_masks(bank, cache, &r, &prov)? {
        if mask.is_all_off() {
            continue;
        }
        let img = support
            .iter()
            .find(|(s, _)| s.sample_index == n)
            .map(|(s, _)| s.pixels.clone())
            .ok_or_else(|| Error::format(cache.category_dir(&r.category_id), format!("support image {n} missing")))?;
        expl.evidence.push(Evidence { sample_index: n, mask, image: img });
    }
    expl.degraded = false;
    Ok(expl)
}

fn panel(image: &RgbImage) -> RgbImage {
    imageops::resize(image, PANEL_SIZE, PANEL_SIZE, imageops::FilterType::Nearest)
}

/// Panels in montage order: query crop, labelled region, then support
/// overlays, capped at [`MAX_PANELS`].
pub fn montage_panels(expl: &Explanation) -> Vec<RgbImage> {
    let color = [255, 64, 64];
    let mut panels = vec![panel(&expl.query_crop), panel(&expl.region_overlay)];
    for e in expl.evidence.iter().take(MAX_PANELS - panels.len()) {
        panels.push(panel(&overlay(&e.image, &e.mask, color)));
    }
    panels
}

#[derive(Serialize)]
struct EvidenceSidecar<'a> {
    pixel: (usize, usize),
    label: &'a str,
    prototype: Option<&'a PrototypeRef>,
    provenance: Option<&'a Provenance>,
    degraded: bool,
    panels: usize,
    evidence: Vec<EvidenceEntry>,
}

#[derive(Serialize)]
struct EvidenceEntry {
    sample: usize,
    pixels: usize,
    mask: String,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

/// Writes the montage PNG, one mask file per evidence entry and a JSON
/// sidecar listing them. Output is a pure function of `expl`.
pub fn render_explanation(expl: &Explanation, out_path: &Path) -> Result<()> {
    if expl.evidence.is_empty() && !expl.degraded {
        return Err(Error::EmptyInput("explanation without evidence must be marked degraded"));
    }
    let panels = montage_panels(expl);
    let rows = (panels.len() as u32).div_ceil(MONTAGE_COLUMNS);
    let mut canvas = RgbImage::from_pixel(MONTAGE_COLUMNS * PANEL_SIZE, rows * PANEL_SIZE, Rgb([0, 0, 0]));
    for (i, p) in panels.iter().enumerate() {
        let (col, row) = (i as u32 % MONTAGE_COLUMNS, i as u32 / MONTAGE_COLUMNS);
        imageops::replace(&mut canvas, p, (col * PANEL_SIZE) as i64, (row * PANEL_SIZE) as i64);
    }
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    io::write_rgb_png(&canvas, out_path)?;

    let mut entries = Vec::new();
    for (i, e) in expl.evidence.iter().enumerate() {
        let mask_path = with_suffix(out_path, &format!(".evidence{i}.mask"));
        fs::write(&mask_path, io::encode_mask(&e.mask))?;
        entries.push(EvidenceEntry {
            sample: e.sample_index,
            pixels: e.mask.count(),
            mask: mask_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        });
    }
    let sidecar = EvidenceSidecar {
        pixel: expl.pixel,
        label: &expl.label,
        prototype: expl.prototype.as_ref(),
        provenance: expl.provenance.as_ref(),
        degraded: expl.degraded,
        panels: panels.len(),
        evidence: entries,
    };
    fs::write(with_suffix(out_path, ".json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

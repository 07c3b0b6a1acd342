//! Dataset adapters, mIoU accumulation and the benchmark driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::inference::{Segmenter, WindowOptions};
use crate::io;

pub const VOC_IGNORE_INDEX: u16 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetItem {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Image/ground-truth pairs with index masks over `class_names`
/// (index 0 is the background class).
pub trait DatasetAdapter: Sync {
    fn name(&self) -> &str;
    fn class_names(&self) -> &[String];
    fn ignore_index(&self) -> u16;
    fn items(&self) -> Result<Vec<DatasetItem>>;
}

/// `images/<id>.{png,jpg}` + `masks/<id>.png` + `classes.txt` (one class name
/// per line, background first). The synthetic generator writes this layout.
pub struct FolderDataset {
    name: String,
    root: PathBuf,
    classes: Vec<String>,
    ignore_index: u16,
}

impl FolderDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("classes.txt"))?;
        let classes: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if classes.is_empty() {
            return Err(Error::format(root.join("classes.txt"), "no classes listed"));
        }
        let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("folder").to_string();
        Ok(Self { name, root: root.to_path_buf(), classes, ignore_index: VOC_IGNORE_INDEX })
    }
}

impl DatasetAdapter for FolderDataset {
    fn name(&self) -> &str {
        &self.name
    }

    fn class_names(&self) -> &[String] {
        &self.classes
    }

    fn ignore_index(&self) -> u16 {
        self.ignore_index
    }

    fn items(&self) -> Result<Vec<DatasetItem>> {
        let mut items = Vec::new();
        for entry in fs::read_dir(self.root.join("images"))? {
            let path = entry?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let mask = self.root.join("masks").join(format!("{stem}.png"));
            if mask.exists() {
                items.push(DatasetItem { id: stem.to_string(), image: path.clone(), mask });
            }
        }
        items.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(items)
    }
}

pub const VOC_CLASSES: [&str; 21] = [
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
];

/// Pascal VOC layout: `JPEGImages/`, `SegmentationClass/` (palette PNGs,
/// 255 = ignore) and `ImageSets/Segmentation/<split>.txt`.
pub struct VocDataset {
    root: PathBuf,
    split: String,
    classes: Vec<String>,
}

impl VocDataset {
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let list = root.join("ImageSets/Segmentation").join(format!("{split}.txt"));
        if !list.exists() {
            return Err(Error::format(list, "split list not found"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            split: split.to_string(),
            classes: VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
        })
    }
}

impl DatasetAdapter for VocDataset {
    fn name(&self) -> &str {
        "voc"
    }

    fn class_names(&self) -> &[String] {
        &self.classes
    }

    fn ignore_index(&self) -> u16 {
        VOC_IGNORE_INDEX
    }

    fn items(&self) -> Result<Vec<DatasetItem>> {
        let list = fs::read_to_string(self.root.join("ImageSets/Segmentation").join(format!("{}.txt", self.split)))?;
        Ok(list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|id| DatasetItem {
                id: id.to_string(),
                image: self.root.join("JPEGImages").join(format!("{id}.jpg")),
                mask: self.root.join("SegmentationClass").join(format!("{id}.png")),
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Per-class TP/FP/FN over a split; merging is associative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<ClassCounts>,
    pub evaluated: u64,
    pub ignored: u64,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: vec![ClassCounts::default(); num_classes], evaluated: 0, ignored: 0 }
    }

    pub fn add(&mut self, pred: &Grid<u16>, gt: &Grid<u16>, ignore_index: u16) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
        }
        let n = self.counts.len();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if (p as usize >= n && p != ignore_index) || (g as usize >= n && g != ignore_index) {
                return Err(Error::InvalidValue(format!("label {} outside {n} classes", g.max(p))));
            }
            if g == ignore_index {
                self.ignored += 1;
                continue;
            }
            self.evaluated += 1;
            if p == g {
                self.counts[g as usize].tp += 1;
            } else {
                // A void prediction is a miss for the true class only.
                if p != ignore_index {
                    self.counts[p as usize].fp += 1;
                }
                self.counts[g as usize].fn_ += 1;
            }
        }
        Ok(())
    }

    pub fn merge(mut self, other: &Confusion) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.evaluated += other.evaluated;
        self.ignored += other.ignored;
        self
    }

    pub fn report(&self, class_names: &[String]) -> Result<EvalReport> {
        if self.evaluated == 0 {
            return Err(Error::EmptyEval);
        }
        let per_class: Vec<ClassIou> = class_names
            .iter()
            .zip(&self.counts)
            .map(|(name, c)| {
                let union = c.tp + c.fp + c.fn_;
                ClassIou { name: name.clone(), iou: (union > 0).then(|| c.tp as f64 / union as f64), counts: *c }
            })
            .collect();
        let ious: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        Ok(EvalReport {
            dataset: String::new(),
            images: 0,
            per_class,
            miou,
            evaluated_pixels: self.evaluated,
            ignored_pixels: self.ignored,
            config_digest: String::new(),
            notes: Vec::new(),
            wall_clock_secs: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
    #[serde(flatten)]
    pub counts: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub images: usize,
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
    pub evaluated_pixels: u64,
    pub ignored_pixels: u64,
    pub config_digest: String,
    pub notes: Vec<String>,
    /// Kept out of the report files so they stay byte-identical across runs;
    /// written to `timing.json` instead.
    #[serde(skip)]
    pub wall_clock_secs: Option<f64>,
}

impl EvalReport {
    pub fn iou(&self, class: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.name == class).and_then(|c| c.iou)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dataset: {}\nimages: {}\n\n", self.dataset, self.images);
        s.push_str(&format!("{:<24} {:>8} {:>12} {:>12} {:>12}\n", "class", "IoU", "TP", "FP", "FN"));
        for c in &self.per_class {
            let iou = c.iou.map_or("-".to_string(), |v| format!("{:.4}", v));
            s.push_str(&format!("{:<24} {:>8} {:>12} {:>12} {:>12}\n", c.name, iou, c.counts.tp, c.counts.fp, c.counts.fn_));
        }
        s.push_str(&format!("\nmIoU: {:.4}\n", self.miou));
        s.push_str(&format!("evaluated pixels: {}\nignored pixels: {}\n", self.evaluated_pixels, self.ignored_pixels));
        s.push_str(&format!("config digest: {}\n", self.config_digest));
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }

    /// `report.json`, `report.txt` and `timing.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        let timing = serde_json::json!({ "wall_clock_secs": self.wall_clock_secs });
        fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(&timing)?)?;
        Ok(())
    }
}

/// mIoU over a whole split: counts are accumulated over every image before
/// dividing, classes with an empty union are left out of the mean, and
/// `ignore_index` pixels are skipped.
pub fn miou(preds: &[Grid<u16>], gts: &[Grid<u16>], class_names: &[String], ignore_index: u16) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut acc = Confusion::new(class_names.len());
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g, ignore_index)?;
    }
    let mut report = acc.report(class_names)?;
    report.images = preds.len();
    Ok(report)
}

fn prompt_note(eta: Option<usize>) -> Option<String> {
    eta.map(|e| {
        format!(
            "pre-filter scores at most 2^{e} - 1 = {} combination prompts per image (the empty subset of a 2^{e} batch is never scored)",
            (1u64 << e) - 1
        )
    })
}

/// Segments every dataset image with sliding windows and accumulates mIoU.
/// Predicted label names are matched to dataset classes by name. Label PNGs
/// go to `<out>/labels/` and the report to `<out>/` when `out` is given.
pub fn run_benchmark(
    dataset: &dyn DatasetAdapter,
    segmenter: &Segmenter,
    windows: &WindowOptions,
    config_digest: &str,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let spaces = segmenter.ensemble.members().to_vec();
    let missing = segmenter.bank.missing(segmenter.vocab, &spaces);
    if !missing.is_empty() {
        return Err(Error::MissingCategories(missing));
    }
    let classes = dataset.class_names();
    let mapping: Vec<u16> = segmenter
        .vocab
        .label_names()
        .iter()
        .map(|n| {
            classes
                .iter()
                .position(|c| c == n)
                .map(|i| i as u16)
                .ok_or_else(|| Error::Config(format!("class {n:?} is not part of dataset {:?}", dataset.name())))
        })
        .collect::<Result<_>>()?;
    let items = dataset.items()?;
    if items.is_empty() {
        return Err(Error::EmptyEval);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("labels"))?;
    }
    let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len());
    let chunk = items.len().div_ceil(workers);
    let partials: Vec<Result<Confusion>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let mapping = &mapping;
                s.spawn(move || {
                    let mut acc = Confusion::new(classes.len());
                    for item in part {
                        let image = io::read_rgb_image(&item.image)?;
                        let gt = io::read_label_png(&item.mask)?;
                        let mut result = segmenter.sliding_window_segment(&image, windows)?;
                        if let Some(dir) = out {
                            result.write_labels(&dir.join("labels").join(format!("{}.png", item.id)))?;
                        }
                        result.labels = result.labels.map(|&l| mapping[l as usize]);
                        acc.add(&result.labels, &gt, dataset.ignore_index())?;
                        info!(image = %item.id, "segmented");
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut acc = Confusion::new(classes.len());
    for p in partials {
        acc = acc.merge(&p?);
    }
    let mut report = acc.report(classes)?;
    report.dataset = dataset.name().to_string();
    report.images = items.len();
    report.config_digest = config_digest.to_string();
    report.notes.extend(prompt_note(segmenter.options.eta));
    report.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

//! Prototype banks: per category and feature space, foreground and background
//! prototypes at class, instance and part level.
//!
//! On disk a bank is a directory:
//!
//! ```text
//! <bank>/manifest.json           versions, build settings, provenance, file checksums
//! <bank>/manifest.json.crc32     checksum of the manifest bytes (hex)
//! <bank>/<category>/<space>.fg.bin
//! <bank>/<category>/<space>.bg.bin
//! ```
//!
//! Vector files start with a 24-byte little-endian header
//! `magic, count, dim, polarity, kind_flags, crc32` followed by `count * dim`
//! `f32` values. The checksum covers the first 20 header bytes and the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{Error, Result};
use crate::features::{cosine_sim, extract, masked_mean, ExtractorAdapter, FeatureMap};
use crate::grid::Mask;
use crate::io;
use crate::kmeans::kmeans;
use crate::proposal::FgBgMasks;
use crate::support::{SupportCache, SupportImage};
use crate::vocabulary::{Category, Vocabulary};

pub const DEFAULT_K_PARTS: usize = 32;
pub const DEFAULT_STUFF_THRESHOLD: f32 = 0.85;
pub const FORMAT_VERSION: u32 = 1;
pub const BUILDER_VERSION: &str = concat!("protoseg-", env!("CARGO_PKG_VERSION"));

const MAGIC: [u8; 4] = *b"PSB1";
const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Fg,
    Bg,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Fg, Polarity::Bg];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Fg => "fg",
            Polarity::Bg => "bg",
        }
    }

    fn code(self) -> u32 {
        match self {
            Polarity::Fg => 0,
            Polarity::Bg => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Class,
    Instance,
    Part,
}

impl Kind {
    fn flag(self) -> u32 {
        match self {
            Kind::Class => 1,
            Kind::Instance => 2,
            Kind::Part => 4,
        }
    }
}

/// Where a prototype came from. `pixels` counts feature cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Class { samples: Vec<usize>, pixels: u64 },
    Instance { sample: usize, pixels: u64 },
    Part { cluster: usize, pixels: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f32>,
    pub space_id: String,
    pub polarity: Polarity,
    pub category_id: String,
    pub provenance: Provenance,
}

impl Prototype {
    pub fn kind(&self) -> Kind {
        match self.provenance {
            Provenance::Class { .. } => Kind::Class,
            Provenance::Instance { .. } => Kind::Instance,
            Provenance::Part { .. } => Kind::Part,
        }
    }

    pub fn pixels(&self) -> u64 {
        match self.provenance {
            Provenance::Class { pixels, .. } | Provenance::Instance { pixels, .. } | Provenance::Part { pixels, .. } => {
                pixels
            }
        }
    }
}

/// Prototypes of one category in one feature space, ordered class, instances,
/// parts (by cluster index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeSet {
    pub fg: Vec<Prototype>,
    pub bg: Vec<Prototype>,
}

impl PrototypeSet {
    pub fn get(&self, polarity: Polarity) -> &[Prototype] {
        match polarity {
            Polarity::Fg => &self.fg,
            Polarity::Bg => &self.bg,
        }
    }

    fn get_mut(&mut self, polarity: Polarity) -> &mut Vec<Prototype> {
        match polarity {
            Polarity::Fg => &mut self.fg,
            Polarity::Bg => &mut self.bg,
        }
    }
}

/// Settings a bank was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildInfo {
    pub n_support: usize,
    pub k_parts: usize,
    pub seed: u64,
    pub fallback_fg: f32,
    pub fallback_bg: f32,
    /// Set once the stuff filter has been applied.
    pub stuff_threshold: Option<f32>,
    pub spaces: Vec<String>,
    pub generator_config_hash: String,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    info: BuildInfo,
    categories: BTreeMap<String, BTreeMap<String, PrototypeSet>>,
}

impl PrototypeBank {
    pub fn new(info: BuildInfo) -> Self {
        Self { info, categories: BTreeMap::new() }
    }

    pub fn info(&self) -> &BuildInfo {
        &self.info
    }

    pub fn category_ids(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn contains(&self, category_id: &str) -> bool {
        self.categories.contains_key(category_id)
    }

    pub fn get(&self, category_id: &str, space_id: &str) -> Option<&PrototypeSet> {
        self.categories.get(category_id)?.get(space_id)
    }

    /// Adds a freshly built category. Existing categories are never replaced.
    pub fn insert(&mut self, category_id: &str, spaces: BTreeMap<String, PrototypeSet>) -> Result<()> {
        if self.categories.contains_key(category_id) {
            return Err(Error::Config(format!("category {category_id:?} is already in the bank")));
        }
        for space in spaces.keys() {
            if !self.info.spaces.contains(space) {
                return Err(Error::MissingSpace(space.clone()));
            }
        }
        self.categories.insert(category_id.to_string(), spaces);
        Ok(())
    }

    /// Categories from `vocab` lacking prototypes in any of `spaces`.
    pub fn missing(&self, vocab: &Vocabulary, spaces: &[String]) -> Vec<String> {
        vocab
            .categories()
            .iter()
            .filter(|c| spaces.iter().any(|s| self.get(&c.id, s).is_none()))
            .map(|c| c.id.clone())
            .collect()
    }

    fn hash_category(&self, h: &mut Sha256, id: &str) {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        for (space, set) in &self.categories[id] {
            h.update((space.len() as u64).to_le_bytes());
            h.update(space.as_bytes());
            for pol in Polarity::BOTH {
                let protos = set.get(pol);
                h.update([pol.code() as u8]);
                h.update((protos.len() as u64).to_le_bytes());
                for p in protos {
                    h.update(serde_json::to_vec(&p.provenance).expect("provenance serializes"));
                    let mut bytes = Vec::new();
                    io::f32s_to_le_bytes(&p.vector, &mut bytes);
                    h.update((p.vector.len() as u64).to_le_bytes());
                    h.update(&bytes);
                }
            }
        }
    }

    /// Digest over every prototype vector and its provenance.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in self.categories.keys() {
            self.hash_category(&mut h, id);
        }
        hex::encode(h.finalize())
    }

    pub fn category_digest(&self, category_id: &str) -> Option<String> {
        self.categories.contains_key(category_id).then(|| {
            let mut h = Sha256::new();
            self.hash_category(&mut h, category_id);
            hex::encode(h.finalize())
        })
    }

    /// Union of two banks built with the same settings.
    pub fn merge(mut self, other: PrototypeBank) -> Result<PrototypeBank> {
        let (a, b) = (&self.info, &other.info);
        let mut sa = a.spaces.clone();
        let mut sb = b.spaces.clone();
        sa.sort();
        sb.sort();
        if a.n_support != b.n_support || a.k_parts != b.k_parts || sa != sb || a.stuff_threshold != b.stuff_threshold {
            return Err(Error::Config("banks were built with different settings and cannot be merged".into()));
        }
        for (id, spaces) in other.categories {
            match self.categories.get(&id) {
                Some(mine) if *mine == spaces => {}
                Some(_) => return Err(Error::Config(format!("category {id:?} differs between merged banks"))),
                None => {
                    self.categories.insert(id, spaces);
                }
            }
        }
        Ok(self)
    }
}

/// Instance, class and part prototypes of one polarity. Instances whose mask
/// is empty at feature resolution are skipped.
pub fn build_polarity(
    category_id: &str,
    features: &[(usize, &FeatureMap, &Mask)],
    polarity: Polarity,
    k: usize,
    seed: u64,
) -> Result<Vec<Prototype>> {
    let Some((_, first, _)) = features.first() else {
        return Ok(Vec::new());
    };
    let space_id = first.space_id().to_string();
    let dim = first.dim();
    let proto = |vector, provenance| Prototype {
        vector,
        space_id: space_id.clone(),
        polarity,
        category_id: category_id.to_string(),
        provenance,
    };

    let mut instances = Vec::new();
    let mut rows: Vec<&[f32]> = Vec::new();
    for &(sample, fm, mask) in features {
        if fm.space_id() != space_id || fm.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: fm.dim() });
        }
        match masked_mean(fm, mask) {
            Ok((mean, m)) => {
                instances.push(proto(mean, Provenance::Instance { sample, pixels: m as u64 }));
                rows.extend(fm.masked_rows(mask));
            }
            Err(Error::EmptyMask) => {}
            Err(e) => return Err(e),
        }
    }
    if instances.is_empty() {
        warn!(category = category_id, space = %space_id, polarity = polarity.as_str(), "no usable instances");
        return Ok(Vec::new());
    }

    let mut acc = vec![0f64; dim];
    let mut total = 0u64;
    let mut samples = Vec::with_capacity(instances.len());
    for p in &instances {
        let m = p.pixels();
        total += m;
        for (a, &v) in acc.iter_mut().zip(&p.vector) {
            *a += m as f64 * v as f64;
        }
        if let Provenance::Instance { sample, .. } = p.provenance {
            samples.push(sample);
        }
    }
    let class_vec = acc.into_iter().map(|v| (v / total as f64) as f32).collect();

    let mut out = Vec::with_capacity(1 + instances.len() + k);
    out.push(proto(class_vec, Provenance::Class { samples, pixels: total }));
    out.extend(instances);

    let clusters = kmeans(&rows, k, seed);
    let mut counts = vec![0u64; clusters.centroids.len()];
    for &a in &clusters.assignments {
        counts[a] += 1;
    }
    for (cluster, (c, n)) in clusters.centroids.into_iter().zip(counts).enumerate() {
        out.push(proto(c, Provenance::Part { cluster, pixels: n }));
    }
    Ok(out)
}

fn part_seed(category_seed: u64, space_id: &str, polarity: Polarity) -> u64 {
    let mut h = Sha256::new();
    h.update(category_seed.to_le_bytes());
    h.update(space_id.as_bytes());
    h.update(polarity.as_str().as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

/// Prototypes for one space from precomputed support features.
/// `features[i]` belongs to `masks[i]`.
pub fn build_from_features(
    category: &Category,
    features: &[(usize, FeatureMap)],
    masks: &[FgBgMasks],
    k: usize,
) -> Result<PrototypeSet> {
    if features.is_empty() {
        return Err(Error::EmptyInput("support set is empty"));
    }
    if k == 0 {
        return Err(Error::InvalidValue("number of parts must be at least 1".into()));
    }
    if features.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} feature maps for {} mask pairs", features.len(), masks.len())));
    }
    let space_id = features[0].1.space_id().to_string();
    let mut set = PrototypeSet::default();
    for pol in Polarity::BOTH {
        let triples: Vec<(usize, &FeatureMap, &Mask)> = features
            .iter()
            .zip(masks)
            .map(|((i, fm), m)| (*i, fm, if pol == Polarity::Fg { &m.fg } else { &m.bg }))
            .collect();
        *set.get_mut(pol) = build_polarity(&category.id, &triples, pol, k, part_seed(category.seed, &space_id, pol))?;
    }
    Ok(set)
}

/// Extracts features for every support image in every space and builds the
/// category's prototypes. Features are written to `cache` when given.
pub fn build_category(
    category: &Category,
    support: &[(SupportImage, FgBgMasks)],
    extractors: &[&dyn ExtractorAdapter],
    k: usize,
    cache: Option<&SupportCache>,
) -> Result<BTreeMap<String, PrototypeSet>> {
    if support.is_empty() {
        return Err(Error::EmptyInput("support set is empty"));
    }
    let masks: Vec<FgBgMasks> = support.iter().map(|(_, m)| m.clone()).collect();
    let mut out = BTreeMap::new();
    for ex in extractors {
        let mut feats = Vec::with_capacity(support.len());
        for (img, _) in support {
            let fm = extract(&img.pixels, *ex)?;
            if let Some(cache) = cache {
                cache.store_features(&category.id, img.sample_index, &fm)?;
            }
            feats.push((img.sample_index, fm));
        }
        out.insert(ex.space_id().to_string(), build_from_features(category, &feats, &masks, k)?);
    }
    Ok(out)
}

/// Drops every background prototype of stuff categories, and background
/// prototypes of thing categories whose cosine similarity to a stuff
/// foreground prototype (same space) exceeds `threshold`. A vocabulary
/// without stuff categories leaves the bank untouched.
pub fn stuff_filter(bank: &PrototypeBank, vocab: &Vocabulary, threshold: f32) -> Result<PrototypeBank> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidValue(format!("stuff threshold {threshold} outside (0, 1]")));
    }
    let stuff: Vec<&str> =
        vocab.categories().iter().filter(|c| c.is_stuff() && bank.contains(&c.id)).map(|c| c.id.as_str()).collect();
    if stuff.is_empty() {
        return Ok(bank.clone());
    }
    let mut out = bank.clone();
    for space in &bank.info.spaces {
        let stuff_fg: Vec<&[f32]> = stuff
            .iter()
            .filter_map(|id| bank.get(id, space))
            .flat_map(|set| set.fg.iter().map(|p| p.vector.as_slice()))
            .collect();
        for cat in vocab.categories() {
            let Some(set) = out.categories.get_mut(&cat.id).and_then(|s| s.get_mut(space)) else {
                continue;
            };
            if cat.is_stuff() {
                set.bg.clear();
            } else {
                set.bg.retain(|p| stuff_fg.iter().all(|s| cosine_sim(&p.vector, s) <= threshold as f64));
            }
        }
    }
    out.info.stuff_threshold = Some(threshold);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    builder_version: String,
    info: BuildInfo,
    categories: Vec<ManifestCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCategory {
    id: String,
    spaces: Vec<ManifestSpace>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSpace {
    space_id: String,
    fg: ManifestFile,
    bg: ManifestFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    file: String,
    crc32: u32,
    count: usize,
    dim: usize,
    provenance: Vec<Provenance>,
}

fn file_stem(space_id: &str) -> String {
    space_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn kind_flags(protos: &[Prototype]) -> u32 {
    protos.iter().fold(0, |f, p| f | p.kind().flag())
}

pub(crate) fn encode_vectors(protos: &[Prototype], polarity: Polarity) -> Vec<u8> {
    let dim = protos.first().map_or(0, |p| p.vector.len());
    let mut out = Vec::with_capacity(HEADER_LEN + protos.len() * dim * 4);
    out.extend_from_slice(&MAGIC);
    for v in [protos.len() as u32, dim as u32, polarity.code(), kind_flags(protos)] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[0; 4]);
    for p in protos {
        io::f32s_to_le_bytes(&p.vector, &mut out);
    }
    let crc = {
        let mut h = crc32fast::Hasher::new();
        h.update(&out[..20]);
        h.update(&out[HEADER_LEN..]);
        h.finalize()
    };
    out[20..24].copy_from_slice(&crc.to_le_bytes());
    out
}

/// Returns `(count, dim, polarity code, vectors)`.
fn decode_vectors(bytes: &[u8], path: &Path) -> Result<(usize, usize, u32, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let mut h = crc32fast::Hasher::new();
    h.update(&bytes[..20]);
    h.update(&bytes[HEADER_LEN..]);
    if h.finalize() != word(20) {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a prototype vector file"));
    }
    let (count, dim) = (word(4) as usize, word(8) as usize);
    if bytes.len() != HEADER_LEN + count * dim * 4 {
        return Err(Error::format(path, "payload length disagrees with header"));
    }
    Ok((count, dim, word(12), io::f32s_from_le_bytes(&bytes[HEADER_LEN..])))
}

fn crc_sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".crc32");
    PathBuf::from(p)
}

pub fn save_bank(bank: &PrototypeBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut categories = Vec::new();
    for (id, spaces) in &bank.categories {
        fs::create_dir_all(dir.join(id))?;
        let mut entries = Vec::new();
        for (space_id, set) in spaces {
            let write = |pol: Polarity| -> Result<ManifestFile> {
                let protos = set.get(pol);
                let file = format!("{id}/{}.{}.bin", file_stem(space_id), pol.as_str());
                let bytes = encode_vectors(protos, pol);
                io::write_atomic(&dir.join(&file), &bytes)?;
                Ok(ManifestFile {
                    file,
                    crc32: io::crc32(&bytes),
                    count: protos.len(),
                    dim: protos.first().map_or(0, |p| p.vector.len()),
                    provenance: protos.iter().map(|p| p.provenance.clone()).collect(),
                })
            };
            let fg = write(Polarity::Fg)?;
            let bg = write(Polarity::Bg)?;
            entries.push(ManifestSpace { space_id: space_id.clone(), fg, bg });
        }
        categories.push(ManifestCategory { id: id.clone(), spaces: entries });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        builder_version: BUILDER_VERSION.to_string(),
        info: bank.info.clone(),
        categories,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    let path = dir.join("manifest.json");
    io::write_atomic(&path, &bytes)?;
    io::write_atomic(&crc_sidecar(&path), sidecar_text(&bytes).as_bytes())
}

/// Canonical sidecar content; anything else (case, whitespace) is corruption.
fn sidecar_text(manifest: &[u8]) -> String {
    format!("{:08x}\n", io::crc32(manifest))
}

pub fn load_bank(dir: &Path) -> Result<PrototypeBank> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path)?;
    let sidecar = fs::read(crc_sidecar(&path))?;
    if sidecar != sidecar_text(&bytes).as_bytes() {
        return Err(Error::Checksum(path));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    let mut bank = PrototypeBank::new(manifest.info);
    for cat in manifest.categories {
        let mut spaces = BTreeMap::new();
        for entry in cat.spaces {
            let mut set = PrototypeSet::default();
            for (pol, file) in [(Polarity::Fg, &entry.fg), (Polarity::Bg, &entry.bg)] {
                let fpath = dir.join(&file.file);
                let raw = fs::read(&fpath)?;
                if io::crc32(&raw) != file.crc32 {
                    return Err(Error::Checksum(fpath));
                }
                let (count, dim, code, values) = decode_vectors(&raw, &fpath)?;
                if count != file.count || dim != file.dim || code != pol.code() || file.provenance.len() != count {
                    return Err(Error::format(&fpath, "vector file disagrees with manifest"));
                }
                *set.get_mut(pol) = file
                    .provenance
                    .iter()
                    .enumerate()
                    .map(|(i, prov)| Prototype {
                        vector: values[i * dim..(i + 1) * dim].to_vec(),
                        space_id: entry.space_id.clone(),
                        polarity: pol,
                        category_id: cat.id.clone(),
                        provenance: prov.clone(),
                    })
                    .collect();
            }
            spaces.insert(entry.space_id, set);
        }
        bank.insert(&cat.id, spaces)?;
    }
    Ok(bank)
}

/// Loads and merges several bank directories.
pub fn load_banks(dirs: &[PathBuf]) -> Result<PrototypeBank> {
    let (first, rest) = dirs.split_first().ok_or(Error::EmptyInput("no bank directory given"))?;
    rest.iter().try_fold(load_bank(first)?, |acc, d| acc.merge(load_bank(d)?))
}

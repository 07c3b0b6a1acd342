//! Deterministic desk-scale stand-ins for the pretrained components.
//!
//! * [`SyntheticGenerator`]: draws one coloured shape over a textured
//!   background per category and emits a relevance field derived from the
//!   true shape (1 inside, decaying outside).
//! * [`SceneProposer`]: re-derives the true shape mask from the sample seed
//!   and proposes `{shape, complement}`.
//! * [`ColorHashExtractor`]: patch-averaged random Fourier features of pixel
//!   colour, so cosine similarity behaves like a colour kernel.
//! * [`SceneScorer`]: image-text relevance from colour presence.
//! * [`generate_dataset`]: multi-object test scenes with exact ground truth.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ExtractorAdapter, FeatureMap};
use crate::grid::{Grid, Mask};
use crate::inference::PrefilterScorer;
use crate::io;
use crate::proposal::{MaskProposer, MaskSet};
use crate::support::{GeneratedSample, GeneratorAdapter, GeneratorConfig, SupportImage};
use crate::vocabulary::{Category, Tag, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Signed distance (negative inside) from `(x, y)` to a shape of
    /// circumradius/half-side `r` centred at `(cx, cy)`. Exact inside; a lower
    /// bound outside polygons.
    pub fn sdf(self, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> f32 {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Disk => dx.hypot(dy) - r,
            Shape::Square => {
                let (qx, qy) = (dx.abs() - r, dy.abs() - r);
                let outside = qx.max(0.0).hypot(qy.max(0.0));
                outside + qx.max(qy).min(0.0)
            }
            Shape::Triangle => {
                // equilateral, apex up; inradius r/2
                let normals = [(0.0f32, -1.0f32), (0.866_025_4, 0.5), (-0.866_025_4, 0.5)];
                normals.iter().map(|(nx, ny)| dx * nx + dy * ny - r * 0.5).fold(f32::NEG_INFINITY, f32::max)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Pattern {
    Stripes { period: u32 },
    Checker { period: u32 },
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub name: String,
    pub colors: [[u8; 3]; 2],
    pub pattern: Pattern,
}

impl Texture {
    fn color_at(&self, x: u32, y: u32, phase: (u32, u32), salt: u64) -> [u8; 3] {
        let (x, y) = (x + phase.0, y + phase.1);
        let pick = match self.pattern {
            Pattern::Stripes { period } => ((x + y) / period.max(1)) % 2,
            Pattern::Checker { period } => (x / period.max(1) + y / period.max(1)) % 2,
            Pattern::Speckle => mix64(salt ^ ((x as u64) << 32 | y as u64)).is_multiple_of(3) as u32,
        };
        self.colors[pick as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCategory {
    pub id: String,
    pub query: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub background: Texture,
}

/// Shape/colour/background description per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: (u32, u32),
    /// Per-channel uniform colour jitter applied to each drawn object.
    pub color_jitter: u8,
    /// Per-pixel uniform noise amplitude.
    pub pixel_noise: u8,
    pub category: Vec<SceneCategory>,
}

impl SceneSpec {
    /// Disk, square and triangle on three distinct textured backgrounds. Each
    /// background is tinted towards its own object colour.
    pub fn three_shapes() -> Self {
        let tex = |name: &str, a: [u8; 3], b: [u8; 3], pattern| Texture { name: name.into(), colors: [a, b], pattern };
        Self {
            image_size: (128, 128),
            color_jitter: 8,
            pixel_noise: 4,
            category: vec![
                SceneCategory {
                    id: "red-disk".into(),
                    query: "red disk".into(),
                    shape: Shape::Disk,
                    color: [200, 40, 40],
                    background: tex("brick", [165, 75, 62], [140, 60, 52], Pattern::Stripes { period: 6 }),
                },
                SceneCategory {
                    id: "blue-square".into(),
                    query: "blue square".into(),
                    shape: Shape::Square,
                    color: [40, 60, 200],
                    background: tex("water", [72, 102, 178], [58, 88, 160], Pattern::Speckle),
                },
                SceneCategory {
                    id: "yellow-triangle".into(),
                    query: "yellow triangle".into(),
                    shape: Shape::Triangle,
                    color: [230, 200, 40],
                    background: tex("sand", [205, 185, 100], [190, 170, 92], Pattern::Checker { period: 5 }),
                },
            ],
        }
    }

    pub fn get(&self, id: &str) -> Result<&SceneCategory> {
        self.category.iter().find(|c| c.id == id).ok_or_else(|| Error::UnknownCategory(id.to_string()))
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        Ok(toml::from_str(src)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn vocabulary(&self, global_seed: u64) -> Result<Vocabulary> {
        let cats = self
            .category
            .iter()
            .map(|c| {
                // drawn shapes are countable objects
                Category::new(c.id.clone(), c.query.clone(), crate::vocabulary::category_seed(global_seed, &c.id))
                    .with_tag(Tag::Thing)
            })
            .collect();
        Vocabulary::new(cats, crate::vocabulary::DEFAULT_BACKGROUND_ID)
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn str_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// One drawn object.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub shape: Shape,
    pub color: [u8; 3],
    pub center: (f32, f32),
    pub radius: f32,
}

impl Placement {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.shape.sdf(x as f32 + 0.5, y as f32 + 0.5, self.center.0, self.center.1, self.radius) <= 0.0
    }

    pub fn mask(&self, h: u32, w: u32) -> Mask {
        Grid::from_fn(h as usize, w as usize, |y, x| self.contains(x as u32, y as u32))
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amp: u8) -> [u8; 3] {
    let a = amp as i32;
    c.map(|v| (v as i32 + if a > 0 { rng.random_range(-a..=a) } else { 0 }).clamp(0, 255) as u8)
}

fn random_placement(rng: &mut ChaCha8Rng, cat: &SceneCategory, size: (u32, u32), jit: u8, scale: (f32, f32)) -> Placement {
    let (w, h) = (size.0 as f32, size.1 as f32);
    let radius = rng.random_range(scale.0..scale.1) * w.min(h);
    let cx = rng.random_range(radius..(w - radius).max(radius + 1.0));
    let cy = rng.random_range(radius..(h - radius).max(radius + 1.0));
    Placement { shape: cat.shape, color: jitter(rng, cat.color, jit), center: (cx, cy), radius }
}

/// Renders a textured background with objects drawn in order.
pub fn render(size: (u32, u32), background: &Texture, objects: &[Placement], noise: u8, rng: &mut ChaCha8Rng) -> RgbImage {
    let phase = (rng.random_range(0..64), rng.random_range(0..64));
    let salt: u64 = rng.random();
    let noise_seed: u64 = rng.random();
    RgbImage::from_fn(size.0, size.1, |x, y| {
        let mut c = background.color_at(x, y, phase, salt);
        for o in objects {
            if o.contains(x, y) {
                c = o.color;
            }
        }
        if noise > 0 {
            let n = mix64(noise_seed ^ ((x as u64) << 32 | y as u64));
            for (k, v) in c.iter_mut().enumerate() {
                let r = ((n >> (k * 16)) & 0xffff) as i32 % (2 * noise as i32 + 1) - noise as i32;
                *v = (*v as i32 + r).clamp(0, 255) as u8;
            }
        }
        Rgb(c)
    })
}

/// Text-to-image stand-in drawing each category's shape over its background.
pub struct SyntheticGenerator {
    spec: SceneSpec,
    config: GeneratorConfig,
}

const SUPPORT_SCALE: (f32, f32) = (0.18, 0.32);
const ATTRIBUTION_FALLOFF: f32 = 8.0;

impl SyntheticGenerator {
    pub fn new(spec: SceneSpec) -> Self {
        let config = GeneratorConfig {
            model: "synthetic-shapes".into(),
            guidance_scale: 0.0,
            steps: 0,
            sampler_name: "none".into(),
            batch_size: 1,
            image_size: spec.image_size,
            extra: serde_json::to_value(&spec).expect("scene spec serializes"),
        };
        Self { spec, config }
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Object placement for a `(category, seed)` pair.
    pub fn layout(&self, category_id: &str, seed: u64) -> Result<Placement> {
        let cat = self.spec.get(category_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ str_hash(category_id));
        Ok(random_placement(&mut rng, cat, self.spec.image_size, self.spec.color_jitter, SUPPORT_SCALE))
    }
}

impl GeneratorAdapter for SyntheticGenerator {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn can_attribute(&self) -> bool {
        true
    }

    fn generate(&self, _prompt: &str, category: &Category, seed: u64) -> Result<GeneratedSample> {
        let cat = self.spec.get(&category.id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ str_hash(&category.id));
        let size = self.spec.image_size;
        let obj = random_placement(&mut rng, cat, size, self.spec.color_jitter, SUPPORT_SCALE);
        let image = render(size, &cat.background, std::slice::from_ref(&obj), self.spec.pixel_noise, &mut rng);
        let (w, h) = (size.0 as usize, size.1 as usize);
        let field = Grid::from_fn(h, w, |y, x| {
            let d = obj.shape.sdf(x as f32 + 0.5, y as f32 + 0.5, obj.center.0, obj.center.1, obj.radius);
            if d <= 0.0 {
                1.0
            } else {
                (-d / ATTRIBUTION_FALLOFF).exp()
            }
        });
        // a coarse copy stands in for low-resolution attention layers
        let coarse = field.resize_bilinear(h.div_ceil(8), w.div_ceil(8));
        Ok(GeneratedSample { image, attention: vec![field, coarse] })
    }
}

/// Proposer returning the true shape mask and its complement.
pub struct SceneProposer {
    generator: SyntheticGenerator,
}

impl SceneProposer {
    pub fn new(spec: SceneSpec) -> Self {
        Self { generator: SyntheticGenerator::new(spec) }
    }
}

impl MaskProposer for SceneProposer {
    fn name(&self) -> &str {
        "scene-truth"
    }

    fn propose(&self, image: &SupportImage) -> Result<MaskSet> {
        let obj = self.generator.layout(&image.category_id, image.seed_used)?;
        let shape = obj.mask(image.pixels.height(), image.pixels.width());
        let complement = shape.complement();
        Ok(MaskSet { masks: vec![shape, complement], includes_background_proposal: true })
    }
}

/// Random Fourier features of RGB colour, averaged over square patches.
/// `cos(phi(a), phi(b))` approximates `exp(-|a - b|^2 / (2 bandwidth^2))`
/// for colours in `[0, 1]^3`.
pub struct ColorHashExtractor {
    patch: usize,
    dim: usize,
    space_id: String,
    freqs: Vec<[f32; 3]>,
    phases: Vec<f32>,
    lut: OnceLock<Vec<f32>>,
}

const LUT_BITS: u32 = 5;

impl ColorHashExtractor {
    pub fn new(patch: usize, dim: usize, bandwidth: f32, seed: u64, space_id: String) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs = (0..dim)
            .map(|_| {
                let mut f = [0f32; 3];
                for v in &mut f {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (z / bandwidth as f64) as f32;
                }
                f
            })
            .collect();
        let phases = (0..dim).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
        Self { patch: patch.max(1), dim, space_id, freqs, phases, lut: OnceLock::new() }
    }

    /// Embedding of one colour (channels in `[0, 1]`).
    pub fn embed(&self, rgb: [f32; 3]) -> Vec<f32> {
        let scale = (2.0 / self.dim as f32).sqrt();
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(f, p)| scale * (f[0] * rgb[0] + f[1] * rgb[1] + f[2] * rgb[2] + p).cos())
            .collect()
    }

    fn quantize(c: u8) -> usize {
        (c >> (8 - LUT_BITS)) as usize
    }

    fn lut(&self) -> &[f32] {
        self.lut.get_or_init(|| {
            let levels = 1usize << LUT_BITS;
            let step = 256.0 / levels as f32;
            let mut lut = Vec::with_capacity(levels * levels * levels * self.dim);
            for r in 0..levels {
                for g in 0..levels {
                    for b in 0..levels {
                        let c = [r, g, b].map(|q| ((q as f32 + 0.5) * step) / 255.0);
                        lut.extend(self.embed(c));
                    }
                }
            }
            lut
        })
    }

    /// Embedding actually used for a pixel value (after quantization).
    pub fn pixel_embedding(&self, c: [u8; 3]) -> &[f32] {
        let levels = 1usize << LUT_BITS;
        let idx = (Self::quantize(c[0]) * levels + Self::quantize(c[1])) * levels + Self::quantize(c[2]);
        &self.lut()[idx * self.dim..(idx + 1) * self.dim]
    }
}

impl ExtractorAdapter for ColorHashExtractor {
    fn space_id(&self) -> &str {
        &self.space_id
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureMap> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let (gh, gw) = (h.div_ceil(self.patch), w.div_ceil(self.patch));
        let d = self.dim;
        let mut acc = vec![0f64; gh * gw * d];
        let mut counts = vec![0u32; gh * gw];
        for (x, y, px) in image.enumerate_pixels() {
            let cell = (y as usize / self.patch) * gw + x as usize / self.patch;
            counts[cell] += 1;
            let e = self.pixel_embedding(px.0);
            for (a, &v) in acc[cell * d..(cell + 1) * d].iter_mut().zip(e) {
                *a += v as f64;
            }
        }
        let data = acc
            .chunks_exact(d)
            .zip(&counts)
            .flat_map(|(cell, &n)| cell.iter().map(move |&v| (v / n as f64) as f32))
            .collect();
        FeatureMap::new(gh, gw, d, data, self.space_id.clone(), (h, w))
    }
}

const PROMPT_GAIN: f32 = 10.0;

/// Image-text relevance stand-in. A prompt names categories joined by
/// `" and "`; each named category scores by how much of its object colour the
/// image contains. A prompt scores the sum over its names, so naming every
/// present category (and nothing else) gives the highest score.
pub struct SceneScorer {
    colors: HashMap<String, [u8; 3]>,
    tolerance: u8,
    /// Pixel fraction at which a category counts as fully present.
    saturation: f32,
}

impl SceneScorer {
    pub fn new(spec: &SceneSpec) -> Self {
        let colors = spec.category.iter().map(|c| (c.query.clone(), c.color)).collect();
        Self { colors, tolerance: 16, saturation: 0.01 }
    }

    fn presence(&self, image: &RgbImage, color: [u8; 3]) -> f32 {
        let hits = image
            .pixels()
            .filter(|p| p.0.iter().zip(color).all(|(&a, b)| a.abs_diff(b) <= self.tolerance))
            .count();
        (hits as f32 / (image.width() * image.height()).max(1) as f32 / self.saturation).min(1.0)
    }
}

impl PrefilterScorer for SceneScorer {
    fn score(&self, image: &RgbImage, prompts: &[String]) -> Result<Vec<f32>> {
        let mut cache: HashMap<&str, f32> = HashMap::new();
        prompts
            .iter()
            .map(|p| {
                let names: Vec<&str> = p.split(" and ").collect();
                let mut total = 0.0;
                for n in &names {
                    let color = self.colors.get(*n).ok_or_else(|| Error::UnknownCategory(n.to_string()))?;
                    let v = *cache.entry(n).or_insert_with(|| self.presence(image, *color));
                    total += PROMPT_GAIN * (v - 0.5);
                }
                Ok(total)
            })
            .collect()
    }
}

/// One synthetic evaluation image with exact ground truth (0 = background,
/// `i + 1` = `spec.category[i]`).
pub struct SceneSample {
    pub image: RgbImage,
    pub labels: Grid<u16>,
}

const SCENE_SIZES: [(u32, u32); 4] = [(160, 160), (240, 160), (160, 240), (256, 192)];
const SCENE_SCALE: (f32, f32) = (0.12, 0.28);

/// Scenes hold one or two categories (one to three objects) over the
/// background texture of one of the present categories.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    let size = SCENE_SIZES[rng.random_range(0..SCENE_SIZES.len())];
    let n_cats = spec.category.len();
    let first = rng.random_range(0..n_cats);
    let mut present = vec![first];
    if n_cats > 1 && rng.random_bool(0.5) {
        let second = (first + rng.random_range(1..n_cats)) % n_cats;
        present.push(second);
    }
    let n_objects = rng.random_range(present.len()..=3);
    let objects: Vec<(usize, Placement)> = (0..n_objects)
        .map(|i| {
            let c = present[i % present.len()];
            (c, random_placement(&mut rng, &spec.category[c], size, spec.color_jitter, SCENE_SCALE))
        })
        .collect();
    let bg = &spec.category[present[rng.random_range(0..present.len())]].background;
    let placements: Vec<Placement> = objects.iter().map(|(_, p)| p.clone()).collect();
    let image = render(size, bg, &placements, spec.pixel_noise, &mut rng);
    let labels = Grid::from_fn(size.1 as usize, size.0 as usize, |y, x| {
        objects.iter().rev().find(|(_, p)| p.contains(x as u32, y as u32)).map_or(0, |(c, _)| *c as u16 + 1)
    });
    SceneSample { image, labels }
}

/// Writes `count` scenes as `images/NNNN.png` + `masks/NNNN.png` (VOC-palette
/// index masks) and a `classes.txt` listing label names.
pub fn generate_dataset(spec: &SceneSpec, root: &Path, count: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for i in 0..count {
        let s = generate_scene(spec, seed.wrapping_add(i as u64));
        io::write_rgb_png(&s.image, &root.join("images").join(format!("{i:04}.png")))?;
        io::write_label_png(&s.labels, &root.join("masks").join(format!("{i:04}.png")))?;
    }
    let mut classes = String::from("background\n");
    for c in &spec.category {
        classes.push_str(&c.id);
        classes.push('\n');
    }
    fs::write(root.join("classes.txt"), classes)?;
    Ok(())
}

//! End-to-end wiring: backend selection from a [`Config`], support sampling,
//! fg/bg mask selection and bank construction.

use std::collections::BTreeMap;
use std::thread;

use tracing::info;

use crate::bank::{build_category, stuff_filter, BuildInfo, PrototypeBank, PrototypeSet};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{EnsembleSpace, ExtractorAdapter};
use crate::inference::{PrefilterScorer, Segmenter};
use crate::proposal::{propose, FgBgMasks, MaskProposer, MaskSet};
use crate::support::{sample_support_set, GeneratorAdapter, SupportCache, SupportImage};
use crate::synthetic::{SceneProposer, SceneScorer, SceneSpec, SyntheticGenerator};
use crate::vocabulary::{tag_vocabulary, Category, TableSource, ThingStuffTable, Vocabulary};

/// Proposer with no candidates: every support image uses attribution
/// thresholds.
pub struct NoProposer;

impl MaskProposer for NoProposer {
    fn name(&self) -> &str {
        "none"
    }

    fn propose(&self, _: &SupportImage) -> Result<MaskSet> {
        Ok(MaskSet { masks: Vec::new(), includes_background_proposal: false })
    }
}

/// Concrete adapters selected by a configuration.
pub struct Backends {
    pub generator: Box<dyn GeneratorAdapter + Send + Sync>,
    pub proposer: Box<dyn MaskProposer + Send + Sync>,
    pub scorer: Option<Box<dyn PrefilterScorer + Send + Sync>>,
    pub extractors: Vec<Box<dyn ExtractorAdapter + Send + Sync>>,
    pub ensemble: EnsembleSpace,
}

impl Backends {
    pub fn from_config(config: &Config, scene: &SceneSpec) -> Result<Self> {
        let generator: Box<dyn GeneratorAdapter + Send + Sync> = match config.generator.as_str() {
            "synthetic" => Box::new(SyntheticGenerator::new(scene.clone())),
            other => return Err(Error::BackendUnavailable(other.to_string())),
        };
        let proposer: Box<dyn MaskProposer + Send + Sync> = match config.proposer.as_str() {
            "scene" => Box::new(SceneProposer::new(scene.clone())),
            "none" => Box::new(NoProposer),
            other => return Err(Error::BackendUnavailable(other.to_string())),
        };
        let scorer: Option<Box<dyn PrefilterScorer + Send + Sync>> = match config.scorer.as_str() {
            "scene" => Some(Box::new(SceneScorer::new(scene))),
            "none" => None,
            other => return Err(Error::BackendUnavailable(other.to_string())),
        };
        let extractors = config
            .ensemble
            .iter()
            .map(|name| config.extractor_config(name)?.instantiate())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { generator, proposer, scorer, extractors, ensemble: config.ensemble_space()? })
    }

    pub fn extractor_refs(&self) -> Vec<&dyn ExtractorAdapter> {
        self.extractors.iter().map(|e| e.as_ref() as &dyn ExtractorAdapter).collect()
    }

    pub fn segmenter<'a>(
        &'a self,
        bank: &'a PrototypeBank,
        vocab: &'a Vocabulary,
        config: &Config,
    ) -> Segmenter<'a> {
        Segmenter {
            bank,
            vocab,
            ensemble: &self.ensemble,
            extractors: self.extractor_refs(),
            scorer: self.scorer.as_deref().map(|s| s as &dyn PrefilterScorer),
            options: config.segment_options(),
        }
    }
}

pub fn load_scene(config: &Config) -> Result<SceneSpec> {
    match &config.paths.scene {
        Some(p) => SceneSpec::load(p),
        None => Ok(SceneSpec::three_shapes()),
    }
}

/// Vocabulary from the configured file (or the scene's categories), tagged
/// with the built-in thing/stuff table plus any user table.
pub fn load_vocabulary(config: &Config, scene: &SceneSpec) -> Result<Vocabulary> {
    let vocab = match &config.paths.vocabulary {
        Some(p) => Vocabulary::load(p, config.seed)?,
        None => scene.vocabulary(config.seed)?,
    };
    let mut table = ThingStuffTable::builtin();
    if let Some(p) = &config.paths.thing_stuff {
        table = table.overridden_by(&ThingStuffTable::load(p, TableSource::User)?);
    }
    Ok(tag_vocabulary(&vocab, &table))
}

/// Support images with their selected fg/bg masks; masks are cached.
pub fn sample_category(
    category: &Category,
    config: &Config,
    backends: &Backends,
    cache: &SupportCache,
) -> Result<Vec<(SupportImage, FgBgMasks)>> {
    let samples = sample_support_set(category, config.n_support, &config.template, backends.generator.as_ref(), Some(cache))?;
    let support: Vec<(SupportImage, FgBgMasks)> = samples
        .into_iter()
        .map(|(img, attr)| {
            let masks = propose(&img, &attr, backends.proposer.as_ref(), config.fallback());
            (img, masks)
        })
        .collect();
    let masks: Vec<FgBgMasks> = support.iter().map(|(_, m)| m.clone()).collect();
    cache.store_masks(&category.id, &masks)?;
    Ok(support)
}

fn build_one(
    category: &Category,
    config: &Config,
    backends: &Backends,
    cache: &SupportCache,
) -> Result<BTreeMap<String, PrototypeSet>> {
    let support = sample_category(category, config, backends, cache)?;
    build_category(category, &support, &backends.extractor_refs(), config.k_parts, Some(cache))
}

pub fn build_info(config: &Config, backends: &Backends) -> BuildInfo {
    BuildInfo {
        n_support: config.n_support,
        k_parts: config.k_parts,
        seed: config.seed,
        fallback_fg: config.fallback_fg,
        fallback_bg: config.fallback_bg,
        stuff_threshold: None,
        spaces: backends.ensemble.members().to_vec(),
        generator_config_hash: backends.generator.config().hash(),
        config_digest: config.digest(),
    }
}

/// Builds every category of `vocab` (in parallel, one thread per category)
/// into a new bank.
pub fn build_bank(vocab: &Vocabulary, config: &Config, backends: &Backends, cache: &SupportCache) -> Result<PrototypeBank> {
    let built: Vec<Result<BTreeMap<String, PrototypeSet>>> = thread::scope(|s| {
        let handles: Vec<_> = vocab
            .categories()
            .iter()
            .map(|c| s.spawn(move || build_one(c, config, backends, cache)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("category build panicked")).collect()
    });
    let mut bank = PrototypeBank::new(build_info(config, backends));
    for (c, spaces) in vocab.categories().iter().zip(built) {
        bank.insert(&c.id, spaces?)?;
        info!(category = %c.id, "prototypes built");
    }
    Ok(bank)
}

/// Build followed by the stuff filter.
pub fn build_filtered_bank(
    vocab: &Vocabulary,
    config: &Config,
    backends: &Backends,
    cache: &SupportCache,
) -> Result<PrototypeBank> {
    stuff_filter(&build_bank(vocab, config, backends, cache)?, vocab, config.stuff_threshold)
}

//! Command-line surface. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bank::{load_banks, save_bank, stuff_filter};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::explain::{explain_pixel, render_explanation};
use crate::harness::{run_benchmark, DatasetAdapter, FolderDataset, VocDataset};
use crate::io;
use crate::pipeline::{build_bank, load_scene, load_vocabulary, sample_category, Backends};
use crate::support::SupportCache;
use crate::synthetic::generate_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "protoseg", version, about = "Open-vocabulary segmentation from generated support sets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one is a shorthand for a config
/// key and is applied after the config file and `PROTOSEG_*` variables.
#[derive(Debug, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bank directory; repeat to merge several banks.
    #[arg(long = "bank", global = true)]
    pub banks: Vec<PathBuf>,
    /// Support cache directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Vocabulary TOML file.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Comma-separated extractor names.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ensemble: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub no_prefilter: bool,
    /// Constant background score instead of background prototypes.
    #[arg(long, global = true)]
    pub no_bg_prototypes: bool,
    /// Comma-separated sliding-window sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub n_support: Option<usize>,
    #[arg(long, global = true)]
    pub k_parts: Option<usize>,
    /// Any config key, e.g. `--set eta=5` or `--set paths.scene=scene.toml`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate support sets and fg/bg masks into the cache.
    Sample,
    /// Build the prototype bank for the vocabulary.
    Build,
    /// Apply the stuff filter to a bank.
    Filter {
        /// Output bank directory (defaults to overwriting the input bank).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Segment images or directories of images.
    Segment {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "segment")]
        out: PathBuf,
        /// Also write per-class score maps.
        #[arg(long)]
        scores: bool,
    },
    /// Trace one pixel back to its support-set evidence.
    Explain {
        #[arg(long)]
        image: PathBuf,
        /// Pixel as X,Y.
        #[arg(long, value_parser = parse_pixel)]
        pixel: (usize, usize),
        #[arg(long, default_value = "explanation.png")]
        out: PathBuf,
    },
    /// Benchmark on a dataset: `synthetic`, `folder:PATH` or `voc:PATH`.
    Eval {
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Number of generated images for the synthetic dataset.
        #[arg(long, default_value_t = 50)]
        images: usize,
        /// VOC split name.
        #[arg(long, default_value = "val")]
        split: String,
    },
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(x)?, p(y)?))
}

impl GlobalArgs {
    /// Layered configuration: defaults, file, environment, then these flags.
    pub fn config(&self, env: impl IntoIterator<Item = (String, String)>) -> Result<Config> {
        let mut c = Config::layered(self.config.as_deref(), env)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if !self.banks.is_empty() {
            c.paths.banks = self.banks.clone();
        }
        if let Some(v) = &self.cache {
            c.paths.cache = v.clone();
        }
        if let Some(v) = &self.vocab {
            c.paths.vocabulary = Some(v.clone());
        }
        if let Some(v) = &self.ensemble {
            c.ensemble = v.clone();
        }
        if self.no_prefilter {
            c.prefilter = false;
        }
        if self.no_bg_prototypes {
            c.bg_prototypes = false;
        }
        if let Some(v) = &self.windows {
            c.windows = v.clone();
        }
        if let Some(v) = self.stride {
            c.stride = v;
        }
        if let Some(v) = self.n_support {
            c.n_support = v;
        }
        if let Some(v) = self.k_parts {
            c.k_parts = v;
        }
        for o in &self.overrides {
            c.set(o)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn image_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|f| {
                f.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            });
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no input images"));
    }
    Ok(out)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

/// Executes a parsed command and returns a one-line-per-item summary.
pub fn execute(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<String> {
    let config = cli.global.config(env)?;
    let scene = load_scene(&config)?;
    let vocab = load_vocabulary(&config, &scene)?;
    let backends = Backends::from_config(&config, &scene)?;
    let cache = SupportCache::new(&config.paths.cache);
    let mut lines = Vec::new();
    match &cli.command {
        Command::Sample => {
            for c in vocab.categories() {
                let support = sample_category(c, &config, &backends, &cache)?;
                lines.push(format!("{}: {} support images", c.id, support.len()));
            }
        }
        Command::Build => {
            let bank = build_bank(&vocab, &config, &backends, &cache)?;
            let dir = &config.paths.banks[0];
            save_bank(&bank, dir)?;
            lines.push(format!("bank {} digest {}", dir.display(), bank.digest()));
        }
        Command::Filter { out, threshold } => {
            let bank = load_banks(&config.paths.banks)?;
            let filtered = stuff_filter(&bank, &vocab, threshold.unwrap_or(config.stuff_threshold))?;
            let dir = out.clone().unwrap_or_else(|| config.paths.banks[0].clone());
            save_bank(&filtered, &dir)?;
            lines.push(format!("bank {} digest {}", dir.display(), filtered.digest()));
        }
        Command::Segment { inputs, out, scores } => {
            let bank = load_banks(&config.paths.banks)?;
            let segmenter = backends.segmenter(&bank, &vocab, &config);
            fs::create_dir_all(out)?;
            for path in image_inputs(inputs)? {
                let image = io::read_rgb_image(&path)?;
                let result = segmenter.sliding_window_segment(&image, &config.window_options())?;
                let target = out.join(format!("{}.png", file_stem(&path)));
                result.write_labels(&target)?;
                if *scores {
                    result.write_scores(&out.join(format!("{}.scores.bin", file_stem(&path))))?;
                }
                lines.push(format!("{} -> {}", path.display(), target.display()));
            }
        }
        Command::Explain { image, pixel, out } => {
            let bank = load_banks(&config.paths.banks)?;
            let segmenter = backends.segmenter(&bank, &vocab, &config);
            let img = io::read_rgb_image(image)?;
            let result = segmenter.sliding_window_segment(&img, &config.window_options())?;
            let cache = config.paths.cache.is_dir().then_some(&cache);
            let expl = explain_pixel(&result, &img, *pixel, &bank, cache)?;
            render_explanation(&expl, out)?;
            lines.push(format!(
                "{} at ({}, {}): {} evidence region(s){} -> {}",
                expl.label,
                pixel.0,
                pixel.1,
                expl.evidence.len(),
                if expl.degraded { " (degraded)" } else { "" },
                out.display()
            ));
        }
        Command::Eval { dataset, out, images, split } => {
            let bank = load_banks(&config.paths.banks)?;
            let segmenter = backends.segmenter(&bank, &vocab, &config);
            let adapter: Box<dyn DatasetAdapter> = match dataset.split_once(':') {
                None if dataset == "synthetic" => {
                    let root = out.join("dataset");
                    generate_dataset(&scene, &root, *images, config.seed)?;
                    Box::new(FolderDataset::open(&root)?)
                }
                Some(("folder", p)) => Box::new(FolderDataset::open(Path::new(p))?),
                Some(("voc", p)) => Box::new(VocDataset::open(Path::new(p), split)?),
                _ => return Err(Error::Config(format!("unknown dataset {dataset:?}"))),
            };
            let report = run_benchmark(adapter.as_ref(), &segmenter, &config.window_options(), &config.digest(), Some(out))?;
            lines.push(format!("mIoU {:.4} over {} images -> {}", report.miou, report.images, out.join("report.txt").display()));
        }
    }
    Ok(lines.join("\n"))
}

/// Parses `args`, runs the command, prints results and returns the exit code.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, env) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("protoseg").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        assert_eq!(run(["protoseg", "build", "--bogus"], []), EXIT_USAGE);
        assert_eq!(run(["protoseg"], []), EXIT_USAGE);
        assert_eq!(run(["protoseg", "--help"], []), EXIT_OK);
    }

    #[test]
    fn flags_match_reference_defaults() {
        let c = parse(&["build", "--n-support", "64", "--k-parts", "32"]).global.config([]).unwrap();
        assert_eq!((c.n_support, c.k_parts), (64, 32));
        assert_eq!(c, Config::default());
    }

    #[test]
    fn ablation_flag_selects_threshold_background() {
        use crate::inference::BackgroundMode;
        let c = parse(&["segment", "x.png", "--no-bg-prototypes"]).global.config([]).unwrap();
        assert_eq!(c.segment_options().background, BackgroundMode::Threshold(0.75));
    }

    #[test]
    fn every_flag_has_a_config_key() {
        let cli = parse(&[
            "--seed", "3", "--bank", "a", "--bank", "b", "--cache", "c", "--vocab", "v.toml", "--ensemble", "color-hash",
            "--no-prefilter", "--no-bg-prototypes", "--windows", "64,32", "--stride", "16", "--n-support", "4",
            "--k-parts", "2", "sample",
        ]);
        let from_flags = cli.global.config([]).unwrap();
        let env = [
            ("PROTOSEG_SEED", "3"),
            ("PROTOSEG_PATHS__BANKS", "[\"a\", \"b\"]"),
            ("PROTOSEG_PATHS__CACHE", "c"),
            ("PROTOSEG_PATHS__VOCABULARY", "v.toml"),
            ("PROTOSEG_ENSEMBLE", "[\"color-hash\"]"),
            ("PROTOSEG_PREFILTER", "false"),
            ("PROTOSEG_BG_PROTOTYPES", "false"),
            ("PROTOSEG_WINDOWS", "[64, 32]"),
            ("PROTOSEG_STRIDE", "16"),
            ("PROTOSEG_N_SUPPORT", "4"),
            ("PROTOSEG_K_PARTS", "2"),
        ]
        .map(|(k, v)| (k.to_string(), v.to_string()));
        let from_env = GlobalArgs::default().config(env).unwrap();
        assert_eq!(from_flags, from_env);
    }

    #[test]
    fn flags_override_environment() {
        let env = [("PROTOSEG_SEED".to_string(), "5".to_string())];
        assert_eq!(parse(&["sample"]).global.config(env.clone()).unwrap().seed, 5);
        assert_eq!(parse(&["--seed", "9", "sample"]).global.config(env).unwrap().seed, 9);
    }

    #[test]
    fn pixel_parsing() {
        assert_eq!(parse_pixel("3, 4"), Ok((3, 4)));
        assert!(parse_pixel("3").is_err());
    }
}

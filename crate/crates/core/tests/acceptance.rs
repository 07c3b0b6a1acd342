//! Acceptance suite. Runs every criterion against independent brute-force
//! oracles and prints one PASS/FAIL line each; exits non-zero on any failure.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoseg::bank::{
    build_polarity, load_bank, save_bank, stuff_filter, BuildInfo, Kind, Polarity, Prototype, PrototypeBank,
    PrototypeSet, Provenance,
};
use protoseg::cli::{execute, Cli};
use protoseg::error::Error;
use protoseg::explain::{explain_pixel, part_memberships};
use protoseg::features::{masked_mean, ExtractorConfig, EnsembleSpace, FeatureMap};
use protoseg::inference::{
    combination_prompts, prefilter, segment_feature_maps, BackgroundMode, ClassPools, PrefilterScorer, SegmentOptions,
    Segmenter, WindowOptions,
};
use protoseg::kmeans::kmeans;
use protoseg::proposal::{select_fg_bg, MaskSet};
use protoseg::support::{AttributionMap, SupportCache};
use protoseg::synthetic::{generate_scene, SceneSpec};
use protoseg::vocabulary::{Category, Tag, Vocabulary};
use protoseg::{Grid, Mask};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- oracles

fn oracle_cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Grid::from_fn(h, w, |_, _| rng.random_bool(p))
}

fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize, space: &str) -> FeatureMap {
    let data = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMap::new(h, w, d, data, space, (h, w)).unwrap()
}

fn info(spaces: &[&str]) -> BuildInfo {
    BuildInfo {
        n_support: 1,
        k_parts: 1,
        seed: 0,
        fallback_fg: 0.5,
        fallback_bg: 0.2,
        stuff_threshold: None,
        spaces: spaces.iter().map(|s| s.to_string()).collect(),
        generator_config_hash: String::new(),
        config_digest: String::new(),
    }
}

fn proto(v: Vec<f32>, space: &str, pol: Polarity, cat: &str, i: usize) -> Prototype {
    Prototype {
        vector: v,
        space_id: space.into(),
        polarity: pol,
        category_id: cat.into(),
        provenance: Provenance::Instance { sample: i, pixels: 1 },
    }
}

// ------------------------------------------------------------ criterion 1

fn select_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let attr = Grid::from_fn(h, w, |_, _| rng.random_range(0.0f32..1.0));
    let masks: Vec<Mask> = (0..rng.random_range(1..=5)).map(|_| random_mask(rng, h, w, 0.5)).collect();
    let means: Vec<Option<f64>> = masks
        .iter()
        .map(|m| {
            let v: Vec<f64> = (0..h * w).filter(|&i| m.data()[i]).map(|i| attr.data()[i] as f64).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let got = select_fg_bg(&MaskSet { masks: masks.clone(), includes_background_proposal: false }, &AttributionMap::new(attr).unwrap());
    let valid: Vec<(usize, f64)> = means.iter().enumerate().filter_map(|(i, m)| m.map(|m| (i, m))).collect();
    if valid.is_empty() {
        return ensure(got.is_err(), || "all-empty proposals must fail".into());
    }
    let got = got.map_err(e2s)?;
    let hi = valid.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = valid.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let fg = valid.iter().find(|v| v.1 == hi).unwrap().0;
    let bg = valid.iter().find(|v| v.1 == lo).unwrap().0;
    ensure(got.fg_index == fg && got.bg_index == bg, || format!("select {:?} vs oracle {fg}/{bg}", (got.fg_index, got.bg_index)))?;
    ensure(close(got.fg_mean, hi, 1e-6) && close(got.bg_mean, lo, 1e-6), || "selected means differ".into())
}

fn mean_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
    let n = rng.random_range(1..=5);
    let fms: Vec<FeatureMap> = (0..n).map(|_| random_features(rng, h, w, d, "s")).collect();
    let masks: Vec<Mask> = (0..n).map(|_| random_mask(rng, h, w, 0.4)).collect();
    // instance means
    for (fm, m) in fms.iter().zip(&masks) {
        let cells: Vec<usize> = (0..h * w).filter(|&i| m.data()[i]).collect();
        match masked_mean(fm, m) {
            Err(Error::EmptyMask) => ensure(cells.is_empty(), || "spurious empty mask".into())?,
            Err(e) => return Err(e.to_string()),
            Ok((mean, count)) => {
                ensure(count == cells.len(), || "masked count differs".into())?;
                for k in 0..d {
                    let want = cells.iter().map(|&i| fm.data()[i * d + k] as f64).sum::<f64>() / cells.len() as f64;
                    ensure(close(mean[k] as f64, want, 1e-6), || format!("masked mean {} vs {want}", mean[k]))?;
                }
            }
        }
    }
    // class prototype: size-weighted mean of instance means equals the mean
    // of every pooled masked cell
    let inputs: Vec<(usize, &FeatureMap, &Mask)> = fms.iter().zip(&masks).enumerate().map(|(i, (f, m))| (i, f, m)).collect();
    let protos = build_polarity("c", &inputs, Polarity::Fg, 2, 1).map_err(e2s)?;
    let pooled: Vec<&[f32]> = fms
        .iter()
        .zip(&masks)
        .flat_map(|(f, m)| (0..h * w).filter(|&i| m.data()[i]).map(move |i| &f.data()[i * d..(i + 1) * d]))
        .collect();
    if pooled.is_empty() {
        return ensure(protos.is_empty(), || "no prototypes expected from empty masks".into());
    }
    let class = protos.first().filter(|p| p.kind() == Kind::Class).ok_or("class prototype missing")?;
    for k in 0..d {
        let want = pooled.iter().map(|r| r[k] as f64).sum::<f64>() / pooled.len() as f64;
        ensure(close(class.vector[k] as f64, want, 1e-6), || format!("class mean {} vs {want}", class.vector[k]))?;
    }
    ensure(class.pixels() == pooled.len() as u64, || "class pixel total differs".into())
}

fn segment_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
    let n_cats = rng.random_range(1..=3);
    let cats: Vec<Category> = (0..n_cats).map(|i| Category::new(format!("c{i}"), format!("cat {i}"), i as u64)).collect();
    let vocab = Vocabulary::new(cats, "background").map_err(e2s)?;
    let mut bank = PrototypeBank::new(info(&["s"]));
    for c in vocab.categories() {
        let mut set = PrototypeSet::default();
        for pol in Polarity::BOTH {
            let v = match pol {
                Polarity::Fg => &mut set.fg,
                Polarity::Bg => &mut set.bg,
            };
            for i in 0..rng.random_range(1..=3) {
                v.push(proto((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(), "s", pol, &c.id, i));
            }
        }
        bank.insert(&c.id, BTreeMap::from([("s".to_string(), set)])).map_err(e2s)?;
    }
    let fm = random_features(rng, h, w, d, "s");
    let kept: Vec<usize> = (0..n_cats).collect();
    let options = SegmentOptions { eta: None, ..SegmentOptions::default() };
    let pools = ClassPools::build(&bank, &vocab, &kept, &EnsembleSpace::single("s"), &options).map_err(e2s)?;
    let seg = segment_feature_maps(std::slice::from_ref(&fm), &pools).map_err(e2s)?;

    // class 0 = union of every bg prototype, then each category's fg set
    let mut classes: Vec<(u16, Vec<&[f32]>)> = vec![(
        0,
        vocab.categories().iter().flat_map(|c| bank.get(&c.id, "s").unwrap().bg.iter().map(|p| p.vector.as_slice())).collect(),
    )];
    for (i, c) in vocab.categories().iter().enumerate() {
        classes.push((i as u16 + 1, bank.get(&c.id, "s").unwrap().fg.iter().map(|p| p.vector.as_slice()).collect()));
    }
    for cell in 0..h * w {
        let x = &fm.data()[cell * d..(cell + 1) * d];
        let scores: Vec<f64> =
            classes.iter().map(|(_, ps)| ps.iter().map(|p| oracle_cos(x, p)).fold(f64::NEG_INFINITY, f64::max)).collect();
        for (c, s) in scores.iter().enumerate() {
            let got = seg.scores[c].data()[cell] as f64;
            ensure(close(got, *s, 1e-6), || format!("score {got} vs oracle {s}"))?;
        }
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let label = seg.labels.data()[cell];
        let got_score = scores[classes.iter().position(|(l, _)| *l == label).unwrap()];
        // labels agree unless two classes tie to within rounding
        let first = classes[scores.iter().position(|&s| s == best).unwrap()].0;
        ensure(label == first || best - got_score < 1e-6, || format!("label {label} vs oracle {first}"))?;
    }
    Ok(())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 150;
    for i in 0..n {
        select_case(&mut rng).map_err(|e| format!("instance {i}: select_fg_bg: {e}"))?;
        mean_case(&mut rng).map_err(|e| format!("instance {i}: means: {e}"))?;
        segment_case(&mut rng).map_err(|e| format!("instance {i}: segment: {e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{n} instances x 4 operations match brute force in {secs:.2}s"))
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..50 {
        let d = rng.random_range(1..=6);
        let pts: Vec<Vec<f32>> = (0..rng.random_range(2..200)).map(|_| (0..d).map(|_| rng.random_range(-5.0f32..5.0)).collect()).collect();
        let refs: Vec<&[f32]> = pts.iter().map(|p| p.as_slice()).collect();
        let k = rng.random_range(1..=8);
        let km = kmeans(&refs, k, inst);
        for w in km.objective_history.windows(2) {
            ensure(w[1] <= w[0] * (1.0 + 1e-12), || format!("instance {inst}: objective rose {} -> {}", w[0], w[1]))?;
        }
        // k = 1 centroid is the mean
        let one = kmeans(&refs, 1, inst);
        for j in 0..d {
            let mean = pts.iter().map(|p| p[j] as f64).sum::<f64>() / pts.len() as f64;
            ensure((one.centroids[0][j] as f64 - mean).abs() < 1e-6 * mean.abs().max(1.0), || format!("instance {inst}: k=1 centroid off"))?;
        }
    }
    // two blobs, separation 100 x radius
    for trial in 0..10 {
        let centers = [[0.0f32, 0.0, 0.0], [100.0, 50.0, -20.0]];
        let mut pts = Vec::new();
        for c in &centers {
            for _ in 0..100 {
                pts.push(c.iter().map(|&v| v + rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>());
            }
        }
        let refs: Vec<&[f32]> = pts.iter().map(|p| p.as_slice()).collect();
        let km = kmeans(&refs, 2, trial);
        for blob in 0..2 {
            let members = &pts[blob * 100..(blob + 1) * 100];
            let mean: Vec<f64> = (0..3).map(|j| members.iter().map(|p| p[j] as f64).sum::<f64>() / 100.0).collect();
            let ok = km.centroids.iter().any(|c| c.iter().zip(&mean).all(|(&a, &b)| (a as f64 - b).abs() < 1e-3));
            ensure(ok, || format!("trial {trial}: no centroid within 1e-3 of blob {blob} mean"))?;
        }
    }
    Ok("50 monotone instances, k=1 mean, 10/10 two-blob recoveries".into())
}

// ------------------------------------------------------------ criterion 3

/// Scores prompts by their (order-free) set of names from a fixed table.
struct TableScorer {
    singles: Vec<f32>,
    names: Vec<String>,
    combos: BTreeMap<Vec<usize>, f32>,
}

impl TableScorer {
    fn key(&self, prompt: &str) -> Vec<usize> {
        let mut k: Vec<usize> = prompt.split(" and ").map(|n| self.names.iter().position(|x| x == n).unwrap()).collect();
        k.sort();
        k
    }
}

impl PrefilterScorer for TableScorer {
    fn score(&self, _: &RgbImage, prompts: &[String]) -> protoseg::Result<Vec<f32>> {
        Ok(prompts
            .iter()
            .map(|p| {
                let k = self.key(p);
                if k.len() == 1 && !self.combos.contains_key(&k) {
                    self.singles[k[0]]
                } else {
                    self.combos[&k]
                }
            })
            .collect())
    }
}

fn all_subsets(items: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &i in items {
        let more: Vec<Vec<usize>> = out.iter().map(|s| {
            let mut s = s.clone();
            s.push(i);
            s
        }).collect();
        out.extend(more);
    }
    out.retain(|s| !s.is_empty());
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = RgbImage::new(1, 1);
    let mut cases = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=7);
        let eta = rng.random_range(1..=4);
        let names: Vec<String> = (0..n).map(|i| format!("thing{i}")).collect();
        let cats = names.iter().enumerate().map(|(i, q)| Category::new(format!("c{i}"), q.clone(), i as u64)).collect();
        let vocab = Vocabulary::new(cats, "background").map_err(e2s)?;
        let singles: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let all: Vec<usize> = (0..n).collect();
        let mut combos = BTreeMap::new();
        for s in all_subsets(&all) {
            if s.len() > 1 {
                combos.insert(s, rng.random_range(-3.0f32..3.0));
            }
        }
        // single prompts score the same in both stages
        let scorer = TableScorer { singles: singles.clone(), names: names.clone(), combos };

        // brute force
        let m = singles.iter().map(|&s| s as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = singles.iter().map(|&s| (s as f64 - m).exp()).sum();
        let p: Vec<f64> = singles.iter().map(|&s| (s as f64 - m).exp() / z).collect();
        let mut surv: Vec<usize> = all.iter().copied().filter(|&i| p[i] > 1.0 / n as f64).collect();
        surv.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        surv.truncate(eta);
        let mut best: Option<(f32, Vec<usize>)> = None;
        for s in all_subsets(&surv) {
            let mut s = s;
            s.sort();
            let v = if s.len() == 1 { singles[s[0]] } else { scorer.combos[&s] };
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, s));
            }
        }
        let want = best.unwrap().1;
        let got = prefilter(&image, &vocab, &scorer, eta).map_err(e2s)?;
        ensure(got == want, || format!("n={n} eta={eta}: kept {got:?}, brute force {want:?}"))?;
        cases += 1;
    }
    let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let prompts = combination_prompts(&refs);
    ensure(prompts.len() == 1023, || format!("{} combination prompts for eta=10", prompts.len()))?;
    let distinct: std::collections::BTreeSet<&Vec<usize>> = prompts.iter().map(|(m, _)| m).collect();
    ensure(distinct.len() == 1023 && prompts.iter().all(|(m, _)| !m.is_empty()), || "duplicate or empty subsets".into())?;
    Ok(format!("{cases} scripted cases match exhaustive search; eta=10 builds 1023 prompts"))
}

// ------------------------------------------------------------ criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spaces = ["a", "b"];
    let mut removed_total = 0;
    for trial in 0..30 {
        let mut cats = Vec::new();
        for i in 0..4 {
            let c = Category::new(format!("c{i}"), format!("cat {i}"), i);
            cats.push(if i < 2 { c.with_tag(Tag::Thing) } else { c.with_tag(Tag::Stuff) });
        }
        let vocab = Vocabulary::new(cats, "background").map_err(e2s)?;
        let mut bank = PrototypeBank::new(info(&spaces));
        for c in vocab.categories() {
            let mut m = BTreeMap::new();
            for s in spaces {
                let mut set = PrototypeSet::default();
                // near-duplicates of a shared direction give cosines on both
                // sides of the threshold
                let base: Vec<f32> = vec![1.0, 0.5, -0.3];
                for i in 0..6 {
                    let jitter = rng.random_range(0.0f32..1.0);
                    set.fg.push(proto(base.iter().map(|&v| v + jitter * rng.random_range(-1.0f32..1.0)).collect(), s, Polarity::Fg, &c.id, i));
                    let jitter = rng.random_range(0.0f32..1.0);
                    set.bg.push(proto(base.iter().map(|&v| v + jitter * rng.random_range(-1.0f32..1.0)).collect(), s, Polarity::Bg, &c.id, i));
                }
                m.insert(s.to_string(), set);
            }
            bank.insert(&c.id, m).map_err(e2s)?;
        }
        let filtered = stuff_filter(&bank, &vocab, 0.85).map_err(e2s)?;
        for c in vocab.categories() {
            for s in spaces {
                let before = bank.get(&c.id, s).unwrap();
                let after = filtered.get(&c.id, s).unwrap();
                ensure(before.fg == after.fg, || format!("trial {trial}: fg of {} changed", c.id))?;
                let stuff_fg: Vec<&Prototype> = vocab
                    .categories()
                    .iter()
                    .filter(|x| x.is_stuff())
                    .flat_map(|x| bank.get(&x.id, s).unwrap().fg.iter())
                    .collect();
                let want: Vec<Prototype> = if c.is_stuff() {
                    Vec::new()
                } else {
                    before.bg.iter().filter(|p| stuff_fg.iter().all(|q| oracle_cos(&p.vector, &q.vector) <= 0.85)).cloned().collect()
                };
                removed_total += before.bg.len() - want.len();
                ensure(after.bg == want, || format!("trial {trial}: bg of {} in {s} differs from oracle", c.id))?;
            }
        }
    }
    // no stuff: byte-identical on disk
    let vocab = Vocabulary::new(vec![Category::new("t", "thing", 1).with_tag(Tag::Thing)], "background").map_err(e2s)?;
    let mut bank = PrototypeBank::new(info(&["a"]));
    let set = PrototypeSet {
        fg: vec![proto(vec![1.0, 2.0], "a", Polarity::Fg, "t", 0)],
        bg: vec![proto(vec![1.0, 2.1], "a", Polarity::Bg, "t", 0)],
    };
    bank.insert("t", BTreeMap::from([("a".to_string(), set)])).map_err(e2s)?;
    let dir = tempfile::tempdir().map_err(e2s)?;
    save_bank(&bank, &dir.path().join("x")).map_err(e2s)?;
    save_bank(&stuff_filter(&bank, &vocab, 0.85).map_err(e2s)?, &dir.path().join("y")).map_err(e2s)?;
    ensure(tree_bytes(&dir.path().join("x")) == tree_bytes(&dir.path().join("y")), || "stuff-free bank changed on disk".into())?;
    Ok(format!("30 constructed banks match oracle ({removed_total} bg prototypes removed); stuff-free bank byte-identical"))
}

fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

// ------------------------------------------------------- criteria 5, 6, 9

struct Run {
    root: tempfile::TempDir,
    miou: f64,
    ablation_miou: f64,
    secs: f64,
}

fn cli(root: &Path, args: &[&str]) -> Result<String, String> {
    use clap::Parser;
    let bank = root.join("bank");
    let cache = root.join("cache");
    let mut argv: Vec<String> = ["protoseg", "--n-support", "16", "--k-parts", "4", "--ensemble", "color-hash", "--seed", "11"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    argv.extend(["--bank".into(), bank.display().to_string(), "--cache".into(), cache.display().to_string()]);
    argv.extend(args.iter().map(|s| s.to_string()));
    let parsed = Cli::try_parse_from(&argv).map_err(e2s)?;
    execute(&parsed, Vec::<(String, String)>::new()).map_err(e2s)
}

fn report_miou(dir: &Path) -> Result<f64, String> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).map_err(e2s)?).map_err(e2s)?;
    v["miou"].as_f64().ok_or_else(|| "report has no miou".to_string())
}

fn full_run() -> Result<Run, String> {
    let root = tempfile::tempdir().map_err(e2s)?;
    let start = Instant::now();
    cli(root.path(), &["build"])?;
    let eval = root.path().join("eval");
    cli(root.path(), &["eval", "--dataset", "synthetic", "--images", "50", "--out", eval.to_str().unwrap()])?;
    let ablation = root.path().join("eval-no-bg");
    cli(root.path(), &["--no-bg-prototypes", "eval", "--dataset", "synthetic", "--images", "50", "--out", ablation.to_str().unwrap()])?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Run { miou: report_miou(&eval)?, ablation_miou: report_miou(&ablation)?, secs, root })
}

fn criterion_5(run: &Result<Run, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let drop = run.miou - run.ablation_miou;
    let detail = format!(
        "mIoU {:.4}, without bg prototypes {:.4} (drop {:.4}), {:.1}s",
        run.miou, run.ablation_miou, drop, run.secs
    );
    ensure(run.miou >= 0.90 && drop >= 0.05 && run.secs < 120.0, || detail.clone())?;
    Ok(detail)
}

fn criterion_6(first: &Result<Run, String>) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = full_run()?;
    let mut compared = 0;
    for sub in ["bank", "eval/labels", "eval-no-bg/labels"] {
        let (x, y) = (tree_bytes(&a.root.path().join(sub)), tree_bytes(&b.root.path().join(sub)));
        ensure(!x.is_empty() && x == y, || format!("{sub} differs between runs"))?;
        compared += x.len();
    }
    for f in ["eval/report.json", "eval/report.txt", "eval-no-bg/report.json", "eval-no-bg/report.txt"] {
        let (x, y) = (fs::read(a.root.path().join(f)).map_err(e2s)?, fs::read(b.root.path().join(f)).map_err(e2s)?);
        ensure(x == y, || format!("{f} differs between runs"))?;
        compared += 1;
    }
    Ok(format!("{compared} files byte-identical across two full runs"))
}

fn criterion_9(run: &Result<Run, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let root = run.root.path();
    let bank = load_bank(&root.join("bank")).map_err(e2s)?;
    let cache = SupportCache::new(root.join("cache"));
    let spec = SceneSpec::three_shapes();
    let vocab = spec.vocabulary(11).map_err(e2s)?;
    let ex = ExtractorConfig::preset("color-hash").unwrap().instantiate().map_err(e2s)?;
    let ensemble = EnsembleSpace::single(ex.space_id());
    let segmenter = Segmenter {
        bank: &bank,
        vocab: &vocab,
        ensemble: &ensemble,
        extractors: vec![ex.as_ref()],
        scorer: None,
        options: SegmentOptions { eta: None, ..SegmentOptions::default() },
    };
    let windows = WindowOptions { windows: vec![160], stride: 160, short_side: None };
    let mut explained = 0;
    let mut kinds = BTreeMap::new();
    for seed in 0..4 {
        let scene = generate_scene(&spec, 1000 + seed);
        let result = segmenter.sliding_window_segment(&scene.image, &windows).map_err(e2s)?;
        let (h, w) = result.labels.shape();
        for y in (3..h).step_by(17) {
            for x in (5..w).step_by(19) {
                let e = explain_pixel(&result, &scene.image, (x, y), &bank, Some(&cache)).map_err(e2s)?;
                let label = *result.labels.get(y, x);
                let r = e.prototype.as_ref().ok_or("pixel without winning prototype")?;
                let evidence_class = match r.polarity {
                    Polarity::Fg => r.category_id.clone(),
                    Polarity::Bg => vocab.background_id().to_string(),
                };
                ensure(evidence_class == result.label_names[label as usize] && e.label == evidence_class, || {
                    format!("pixel ({x},{y}): label {} but evidence from {evidence_class}", result.label_names[label as usize])
                })?;
                ensure(!e.degraded && !e.evidence.is_empty() && e.evidence.iter().all(|ev| !ev.mask.is_all_off()), || {
                    format!("pixel ({x},{y}): missing or empty evidence")
                })?;
                *kinds.entry(format!("{:?}", e.kind().unwrap())).or_insert(0) += 1;
                explained += 1;
            }
        }
    }
    // part memberships are disjoint across cluster indices
    let mut checked = 0;
    for c in vocab.categories() {
        for pol in Polarity::BOTH {
            for (sample, grid) in part_memberships(&bank, &cache, &c.id, ex.space_id(), pol).map_err(e2s)? {
                let clusters: std::collections::BTreeSet<usize> = grid.data().iter().flatten().copied().collect();
                let masks: Vec<Mask> = clusters.iter().map(|&k| grid.map(|v| *v == Some(k))).collect();
                for i in 0..masks.len() {
                    for j in i + 1..masks.len() {
                        let overlap = masks[i].data().iter().zip(masks[j].data()).any(|(&a, &b)| a && b);
                        ensure(!overlap, || format!("{} sample {sample}: parts overlap", c.id))?;
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{explained} pixels explained by their own class {kinds:?}; part masks disjoint in {checked} support images"))
}

// ------------------------------------------------------------ criterion 7

fn criterion_7() -> Outcome {
    let spec = SceneSpec::three_shapes();
    let scene = generate_scene(&spec, 7);
    let image = imageops::resize(&scene.image, 672, 448, imageops::FilterType::Nearest);
    let vocab = spec.vocabulary(0).map_err(e2s)?;
    let ex = ExtractorConfig::preset("color-hash").unwrap().instantiate().map_err(e2s)?;
    let space = ex.space_id().to_string();
    // a small random bank is enough: the oracle checks the averaging
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bank = PrototypeBank::new(info(&[space.as_str()]));
    for c in vocab.categories() {
        let mut set = PrototypeSet::default();
        for i in 0..3 {
            set.fg.push(proto((0..ex.output_dim()).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &space, Polarity::Fg, &c.id, i));
            set.bg.push(proto((0..ex.output_dim()).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &space, Polarity::Bg, &c.id, i));
        }
        bank.insert(&c.id, BTreeMap::from([(space.clone(), set)])).map_err(e2s)?;
    }
    let ensemble = EnsembleSpace::single(&space);
    let segmenter = Segmenter {
        bank: &bank,
        vocab: &vocab,
        ensemble: &ensemble,
        extractors: vec![ex.as_ref()],
        scorer: None,
        options: SegmentOptions { eta: None, background: BackgroundMode::Prototypes, ..SegmentOptions::default() },
    };
    let got = segmenter.sliding_window_segment(&image, &WindowOptions::default()).map_err(e2s)?;

    // hand-enumerated tiles (y, x, size) for 448 x 672, stride 224
    let tiles: [(u32, u32, u32); 8] = [
        (0, 0, 448),
        (0, 224, 448),
        (0, 0, 336),
        (0, 224, 336),
        (0, 336, 336),
        (112, 0, 336),
        (112, 224, 336),
        (112, 336, 336),
    ];
    let classes = got.scores.len();
    let mut sum = vec![vec![0f64; 448 * 672]; classes];
    let mut count = vec![0u32; 448 * 672];
    for &(y0, x0, s) in &tiles {
        let crop = imageops::crop_imm(&image, x0, y0, s, s).to_image();
        let r = segmenter.segment(&crop).map_err(e2s)?;
        for y in 0..s as usize {
            for x in 0..s as usize {
                let i = (y0 as usize + y) * 672 + x0 as usize + x;
                count[i] += 1;
                for c in 0..classes {
                    sum[c][i] += *r.scores[c].get(y, x) as f64;
                }
            }
        }
    }
    let mut worst = 0f64;
    for c in 0..classes {
        for i in 0..448 * 672 {
            worst = worst.max((sum[c][i] / count[i] as f64 - got.scores[c].data()[i] as f64).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation from tile-mean oracle {worst:e}"))?;
    let covered: std::collections::BTreeSet<u32> = count.iter().copied().collect();

    // single tile at 448 x 448
    let square = imageops::crop_imm(&image, 0, 0, 448, 448).to_image();
    let one = WindowOptions { windows: vec![448], ..WindowOptions::default() };
    let slid = segmenter.sliding_window_segment(&square, &one).map_err(e2s)?;
    let direct = segmenter.segment(&square).map_err(e2s)?;
    ensure(slid.scores == direct.scores && slid.labels == direct.labels, || "448x448 single tile differs from direct".into())?;
    Ok(format!("8 tiles, coverage counts {covered:?}, max deviation {worst:e}; single tile identical"))
}

// ------------------------------------------------------------ criterion 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bank = PrototypeBank::new(info(&["a", "b"]));
    for c in ["cat", "dog", "sky"] {
        let mut m = BTreeMap::new();
        for s in ["a", "b"] {
            let mut set = PrototypeSet::default();
            for i in 0..5 {
                set.fg.push(proto((0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect(), s, Polarity::Fg, c, i));
                set.bg.push(proto((0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect(), s, Polarity::Bg, c, i));
            }
            m.insert(s.to_string(), set);
        }
        bank.insert(c, m).map_err(e2s)?;
    }
    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("bank");
    save_bank(&bank, &path).map_err(e2s)?;
    let loaded = load_bank(&path).map_err(e2s)?;
    ensure(loaded.digest() == bank.digest() && loaded == bank, || "round trip changed the bank".into())?;

    let files: Vec<PathBuf> = tree_bytes(&path).into_keys().collect();
    let mut detected = 0;
    for trial in 0..20 {
        let f = path.join(&files[rng.random_range(0..files.len())]);
        let original = fs::read(&f).map_err(e2s)?;
        let mut bytes = original.clone();
        let at = rng.random_range(0..bytes.len());
        bytes[at] ^= rng.random_range(1..=255u8);
        fs::write(&f, &bytes).map_err(e2s)?;
        match load_bank(&path) {
            Err(Error::Checksum(_)) => detected += 1,
            other => {
                return Err(format!(
                    "trial {trial}: byte {at} of {} gave {:?}",
                    f.display(),
                    other.map(|b| b.digest())
                ))
            }
        }
        fs::write(&f, &original).map_err(e2s)?;
    }
    ensure(load_bank(&path).is_ok(), || "restored bank no longer loads".into())?;
    Ok(format!("digest-identical round trip; {detected}/20 corruptions detected by checksum"))
}

// ------------------------------------------------------------------- main

fn main() {
    // silence library warnings unless asked for
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env(protoseg::config::LOG_ENV)
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("error")),
        )
        .with_writer(std::io::stderr)
        .try_init();

    let run = full_run();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 operation oracles", criterion_1()),
        ("2 k-means", criterion_2()),
        ("3 pre-filter", criterion_3()),
        ("4 stuff filter", criterion_4()),
        ("5 end-to-end synthetic benchmark", criterion_5(&run)),
        ("6 determinism", criterion_6(&run)),
        ("7 sliding window", criterion_7()),
        ("8 persistence", criterion_8()),
        ("9 explanation", criterion_9(&run)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use naturalize_core::detector::{train_detector as fit_detector, BlackBoxScorer, DetectorModel, Variant};
use naturalize_core::eval::{
    load_corpus, parse_manifest, reports_csv, run_scenario, synth_corpus, transform_images, CorpusEntry, CorpusError,
    CorpusMeta, ImageCorpus, ImageScore, MetricsReport, Phase, ScenarioConfig, ScenarioSpec, SynthProfile,
    MANIFEST_FILE,
};
use naturalize_core::format::FormatError;
use naturalize_core::image::{encode_png, read_image, PixelImage};
use naturalize_core::losses::PerceptualNet;
use naturalize_core::model::{load_checkpoint, load_checkpoint_for, save_checkpoint, ArchSpec, HNetParams};
use naturalize_core::training::{
    canonical_log_hash, read_metrics_log, state_path, MetricsLog, TrainConfig, TrainError, Trainer,
};
use naturalize_core::Label;
use serde_json::json;

use crate::config::Resolver;
use crate::manifest::{manifest_path, RunManifest};
use crate::{EvaluateArgs, Failure, HyperArgs, SynthArgs, TrainArgs, TrainDetectorArgs, TransformArgs};

const DEFAULT_PERCEPTUAL_SEED: u64 = 7;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pgm"];

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} {} not found", path.display())))
    }
}

/// Missing files are usage errors; anything else means the input is bad.
fn format_failure(path: &Path, e: FormatError) -> Failure {
    match e {
        FormatError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Failure::usage(format!("{} not found", path.display()))
        }
        e => Failure::from(anyhow::anyhow!("{}: {e}", path.display())),
    }
}

fn load_corpora(
    dirs: &[PathBuf],
    size: usize,
    manifest: &mut RunManifest,
) -> Result<(Vec<PixelImage>, Vec<PixelImage>), Failure> {
    let (mut natural, mut cg) = (Vec::new(), Vec::new());
    for dir in dirs {
        let loaded = load_corpus(dir, size).map_err(|e| match e {
            CorpusError::Io { .. } => Failure::usage(format!("corpus {}: {e}", dir.display())),
            e => Failure::from(e),
        })?;
        if !loaded.skipped.is_empty() {
            log::warn!("{}: skipped {} of {} files", dir.display(), loaded.skipped.len(), loaded.manifest_len);
        }
        manifest.input(dir, loaded.corpus.content_hash());
        natural.extend(loaded.corpus.images(Label::Natural));
        cg.extend(loaded.corpus.images(Label::Cg));
    }
    Ok((natural, cg))
}

fn finish(manifest: &RunManifest, path: PathBuf) -> Result<(), Failure> {
    manifest.write(&path).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    log::info!("run manifest {}", path.display());
    Ok(())
}

fn train_config(h: &HyperArgs, r: &mut Resolver) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        alpha: r.pick("alpha", h.alpha, d.alpha)?,
        lr: r.pick("lr", h.lr, d.lr)?,
        batch_size: r.pick("batch_size", h.batch_size, d.batch_size)?,
        iterations_per_epoch: r.pick("iterations_per_epoch", h.iterations_per_epoch, d.iterations_per_epoch)?,
        epochs: r.pick("epochs", h.epochs, d.epochs)?,
        seed: r.pick("seed", h.seed, d.seed)?,
        input_size: r.pick("size", h.size, d.input_size)?,
        checkpoint_every: r.pick("checkpoint_every", h.checkpoint_every, d.checkpoint_every)?,
    };
    config.validate().map_err(Failure::usage)?;
    Ok(config)
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut r = Resolver::load(a.config.as_deref())?;
    let kind: String = r.pick("kind", a.kind, String::new())?;
    let label = match kind.as_str() {
        "natural" => Label::Natural,
        "cg" => Label::Cg,
        other => return Err(Failure::usage(format!("--kind must be natural or cg, got {other:?}"))),
    };
    let count: usize = r.pick("count", a.count, 0)?;
    let size: usize = r.pick("size", a.size, 64)?;
    let seed: u64 = r.pick("seed", a.seed, 0)?;
    let dataset: u32 = r.pick("dataset", a.dataset, 1)?;
    let format: String = r.pick("format", a.format, "png".into())?;
    if count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    if size < 2 {
        return Err(Failure::usage("--size must be at least 2"));
    }
    if !(1..=3).contains(&dataset) {
        return Err(Failure::usage(format!("--dataset must be 1, 2 or 3, got {dataset}")));
    }
    if format != "png" && format != "ppm" {
        return Err(Failure::usage(format!("--format must be png or ppm, got {format:?}")));
    }
    let corpus = synth_corpus(&SynthProfile::dataset(dataset), label, count, size, seed);
    corpus.save(&a.out, &format)?;
    let mut m = RunManifest::new("synth");
    m.config = r.snapshot();
    m.seeds.insert("seed".into(), seed);
    m.output(&a.out);
    finish(&m, manifest_path(&a.out, true))?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn train_detector(a: TrainDetectorArgs) -> Result<(), Failure> {
    let mut r = Resolver::load(a.config.as_deref())?;
    let variant: String = r.pick("variant", a.variant, "mlp".into())?;
    let variant: Variant = variant.parse().map_err(Failure::usage)?;
    let seed: u64 = r.pick("seed", a.seed, 0)?;
    let size: usize = r.pick("size", a.size, 64)?;
    let mut m = RunManifest::new("train-detector");
    let (natural, cg) = load_corpora(&a.corpus, size, &mut m)?;
    if natural.is_empty() || cg.is_empty() {
        return Err(Failure::usage(format!(
            "corpora hold {} natural and {} CG images; both classes are needed",
            natural.len(),
            cg.len()
        )));
    }
    let model = fit_detector(variant, &natural, &cg, seed)?;
    model.save(&a.out)?;
    m.config = r.snapshot();
    m.seeds.insert("seed".into(), seed);
    m.output(&a.out);
    finish(&m, manifest_path(&a.out, false))?;
    println!("{}", a.out.display());
    Ok(())
}

fn load_perceptual(path: Option<&Path>, seed: u64, manifest: &mut RunManifest) -> Result<PerceptualNet<f32>, Failure> {
    match path {
        Some(p) => {
            let net = PerceptualNet::load(p).map_err(|e| format_failure(p, e))?;
            manifest.input_file(p)?;
            Ok(net)
        }
        None => Ok(PerceptualNet::seeded(seed)),
    }
}

/// Keeps log records below `iteration`, dropping anything written after the
/// checkpoint being resumed from.
fn truncate_log(path: &Path, iteration: u64) -> Result<(), Failure> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let kept: Vec<_> = read_metrics_log(&text)?.into_iter().filter(|m| m.iteration < iteration).collect();
    let mut log = MetricsLog::new(Vec::new());
    for m in &kept {
        log.write(m)?;
    }
    std::fs::write(path, log.into_inner())?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut r = Resolver::load(a.config.as_deref())?;
    let config = train_config(&a.hyper, &mut r)?;
    let perceptual_seed: u64 = r.pick("perceptual_seed", a.hyper.perceptual_seed, DEFAULT_PERCEPTUAL_SEED)?;
    let mut m = RunManifest::new("train");
    require(&a.detector, "detector")?;
    let detector = DetectorModel::load(&a.detector).map_err(|e| format_failure(&a.detector, e))?;
    m.input_file(&a.detector)?;
    let perceptual = load_perceptual(a.perceptual.as_deref(), perceptual_seed, &mut m)?;
    let (natural, cg) = load_corpora(&a.corpus, config.input_size, &mut m)?;
    if natural.is_empty() || cg.is_empty() {
        return Err(Failure::usage(format!(
            "corpora hold {} natural and {} CG images; both classes are needed",
            natural.len(),
            cg.len()
        )));
    }
    let arch = ArchSpec::with_size(config.input_size);
    let params = match &a.resume {
        Some(p) => {
            require(p, "resume checkpoint")?;
            m.input_file(p)?;
            load_checkpoint_for(p, &arch).map_err(|e| format_failure(p, e))?
        }
        None => HNetParams::init(&arch, config.seed)?,
    };
    let mut trainer = Trainer::new(params, config.clone(), natural, cg, &detector, &perceptual)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".metrics.ndjson");
        PathBuf::from(s)
    });
    if let Some(p) = &a.resume {
        let state = state_path(p);
        require(&state, "optimizer state")?;
        trainer.restore_state(&std::fs::read(&state)?)?;
        log::info!("resuming at iteration {}", trainer.iteration);
        truncate_log(&metrics_path, trainer.iteration)?;
    } else {
        std::fs::write(&metrics_path, b"")?;
    }
    let file = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut log = MetricsLog::new(BufWriter::new(file));
    trainer.run(a.stop_after, Some(&a.out), |metrics| {
        if metrics.step == 4 && (metrics.iteration + 1) % 50 == 0 {
            log::info!(
                "iteration {}/{}: L_VGG {:.4}, L_Adv {:.3}",
                metrics.iteration + 1,
                config.total_iterations(),
                metrics.l_vgg.unwrap_or(f64::NAN),
                metrics.l_adv.unwrap_or(f64::NAN)
            );
        }
        log.write(metrics).map_err(TrainError::Io)
    })?;
    std::io::Write::flush(&mut log.into_inner())?;

    m.config = r.snapshot();
    m.seeds.insert("seed".into(), config.seed);
    m.seeds.insert("perceptual_seed".into(), perceptual_seed);
    for p in [a.out.clone(), state_path(&a.out), metrics_path.clone()] {
        m.output(&p);
    }
    finish(&m, manifest_path(&a.out, false))?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out.display().to_string(),
            "metrics": metrics_path.display().to_string(),
            "iterations": trainer.iteration,
        })
    );
    Ok(())
}

/// Images of a directory in manifest order, or sorted by file name.
fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let entries = parse_manifest(&std::fs::read_to_string(&manifest)?)?;
        return Ok(entries.into_iter().map(|e| (e.id, dir.join(e.file))).collect());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|x| x.to_str()).is_some_and(|x| IMAGE_EXTENSIONS.contains(&x)))
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p))
        .collect())
}

fn fit_to(image: PixelImage, size: usize) -> PixelImage {
    if image.width() == size && image.height() == size {
        image
    } else {
        log::warn!("resizing {}x{} input to {size}x{size}", image.width(), image.height());
        image.resize(size, size)
    }
}

fn write_png(path: &Path, image: &PixelImage) -> Result<(), Failure> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

pub fn transform(a: TransformArgs) -> Result<(), Failure> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.input, "input")?;
    let params: HNetParams<f32> = load_checkpoint(&a.checkpoint).map_err(|e| format_failure(&a.checkpoint, e))?;
    let size = params.arch.input_size;
    let mut m = RunManifest::new("transform");
    m.input_file(&a.checkpoint)?;
    if a.input.is_dir() {
        let listed = list_images(&a.input)?;
        let mut ids = Vec::new();
        let mut images = Vec::new();
        for (id, path) in listed {
            match read_image(&path) {
                Ok(im) => {
                    m.input_file(&path)?;
                    ids.push(id);
                    images.push(fit_to(im, size));
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        let outputs = transform_images(&params, &images)?;
        let corpus = ImageCorpus {
            meta: CorpusMeta { source: format!("transformed:{}", a.input.display()), size, grayscale: false },
            entries: ids
                .into_iter()
                .zip(outputs)
                .map(|(id, image)| CorpusEntry { id, label: Label::Cg, image })
                .collect(),
        };
        corpus.save(&a.out, "png")?;
        m.output(&a.out);
        finish(&m, manifest_path(&a.out, true))?;
    } else {
        let image =
            fit_to(read_image(&a.input).map_err(|e| Failure::usage(format!("{}: {e}", a.input.display())))?, size);
        m.input_file(&a.input)?;
        let out = transform_images(&params, std::slice::from_ref(&image))?.remove(0);
        write_png(&a.out, &out)?;
        m.output(&a.out);
        finish(&m, manifest_path(&a.out, false))?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn score_images(det: &DetectorModel, items: &[(String, Label, PixelImage)]) -> Result<Vec<ImageScore>, Failure> {
    items
        .iter()
        .map(|(id, label, image)| {
            let score = det.score(image)?;
            Ok(ImageScore { id: id.clone(), label: *label, score, predicted: det.decide(score) })
        })
        .collect()
}

fn write_reports(dir: &Path, reports: &[MetricsReport], m: &mut RunManifest) -> Result<(), Failure> {
    let json_path = dir.join("reports.json");
    let csv_path = dir.join("reports.csv");
    std::fs::write(&json_path, serde_json::to_string_pretty(reports)? + "\n")?;
    std::fs::write(&csv_path, reports_csv(reports))?;
    m.output(&json_path);
    m.output(&csv_path);
    println!("{}", json_path.display());
    println!("{}", csv_path.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    std::fs::create_dir_all(&a.out_dir)?;
    match a.scenario.clone() {
        Some(tag) => evaluate_scenario(&tag, a),
        None => evaluate_corpus(a),
    }
}

fn evaluate_corpus(a: EvaluateArgs) -> Result<(), Failure> {
    let mut r = Resolver::load(a.config.as_deref())?;
    let det_path = a.detector.expect("required by clap");
    let mut m = RunManifest::new("evaluate");
    require(&det_path, "detector")?;
    let det = DetectorModel::load(&det_path).map_err(|e| format_failure(&det_path, e))?;
    m.input_file(&det_path)?;
    let params: Option<HNetParams<f32>> = match &a.checkpoint {
        Some(p) => {
            require(p, "checkpoint")?;
            m.input_file(p)?;
            Some(load_checkpoint(p).map_err(|e| format_failure(p, e))?)
        }
        None => None,
    };
    let default_size = params.as_ref().map_or(64, |p| p.arch.input_size);
    let size: usize = r.pick("size", a.hyper.size, default_size)?;
    let mut items: Vec<(String, Label, PixelImage)> = Vec::new();
    for dir in &a.corpus {
        let loaded = load_corpus(dir, size).map_err(|e| match e {
            CorpusError::Io { .. } => Failure::usage(format!("corpus {}: {e}", dir.display())),
            e => Failure::from(e),
        })?;
        m.input(dir, loaded.corpus.content_hash());
        items.extend(loaded.corpus.entries.into_iter().map(|e| (e.id, e.label, e.image)));
    }
    let before = score_images(&det, &items)?;
    let name = det.variant().to_string();
    let report = |phase, note, scores| {
        MetricsReport::from_scores("custom", phase, &name, note, scores).map_err(Failure::undefined)
    };
    let mut reports = vec![report(Phase::Before, "accuracy over natural and original CG images", before.clone())?];
    if let Some(params) = &params {
        let cg_idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].1 == Label::Cg).collect();
        let cg: Vec<PixelImage> = cg_idx.iter().map(|&i| items[i].2.clone()).collect();
        let outputs = transform_images(params, &cg)?;
        let mut after_items = items.clone();
        for (&i, o) in cg_idx.iter().zip(outputs) {
            after_items[i].2 = o;
        }
        let after = score_images(&det, &after_items)?;
        reports.push(report(Phase::After, "accuracy over natural and transformed-CG images", after)?);
    }
    m.config = r.snapshot();
    write_reports(&a.out_dir, &reports, &mut m)?;
    finish(&m, manifest_path(&a.out_dir, true))
}

fn evaluate_scenario(tag: &str, a: EvaluateArgs) -> Result<(), Failure> {
    let spec = ScenarioSpec::by_tag(tag).ok_or_else(|| Failure::usage(format!("unknown scenario {tag:?}")))?;
    let mut r = Resolver::load(a.config.as_deref())?;
    let d = ScenarioConfig::default();
    let adversary: String = r.pick("adversary", None, d.adversary.to_string())?;
    let config = ScenarioConfig {
        train: train_config(&a.hyper, &mut r)?,
        train_per_class: r.pick("train_per_class", a.train_per_class, d.train_per_class)?,
        detector_per_class: r.pick("detector_per_class", a.detector_per_class, d.detector_per_class)?,
        eval_per_class: r.pick("eval_per_class", a.eval_per_class, d.eval_per_class)?,
        corpus_seed: r.pick("corpus_seed", a.corpus_seed, d.corpus_seed)?,
        detector_seed: r.pick("detector_seed", a.detector_seed, d.detector_seed)?,
        perceptual_seed: r.pick("perceptual_seed", a.hyper.perceptual_seed, d.perceptual_seed)?,
        adversary: adversary.parse().map_err(Failure::usage)?,
        evaluators: d.evaluators,
    };
    let outcome = run_scenario(&spec, &config, |_| {}).map_err(|e| match e.stage {
        "spec" => Failure::usage(e),
        "metrics" => Failure::undefined(e),
        _ => Failure::from(e),
    })?;
    let mut m = RunManifest::new("evaluate");
    let dir = &a.out_dir;
    let ckpt = dir.join("hnet.hnet");
    save_checkpoint(&outcome.params, &ckpt)?;
    m.output(&ckpt);
    let log_path = dir.join("metrics.ndjson");
    let mut log = MetricsLog::new(Vec::new());
    for rec in &outcome.log {
        log.write(rec)?;
    }
    std::fs::write(&log_path, log.into_inner())?;
    m.output(&log_path);
    let transformed = dir.join("transformed");
    ImageCorpus {
        meta: CorpusMeta { source: format!("scenario-{tag}"), size: config.train.input_size, grayscale: false },
        entries: outcome.transformed.clone(),
    }
    .save(&transformed, "png")?;
    m.output(&transformed);
    let summary_path = dir.join("summary.json");
    let summary = json!({
        "scenario": spec,
        "identity_proxy": outcome.proxy,
        "flags": outcome.flags,
        "adversary_hash_before": outcome.adversary_hash_before,
        "adversary_hash_after": outcome.adversary_hash_after,
        "metrics_log_hash": canonical_log_hash(&outcome.log),
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    m.output(&summary_path);
    for flag in &outcome.flags {
        log::warn!("{flag}");
    }
    m.config = r.snapshot();
    for (k, v) in [
        ("seed", config.train.seed),
        ("corpus_seed", config.corpus_seed),
        ("detector_seed", config.detector_seed),
        ("perceptual_seed", config.perceptual_seed),
    ] {
        m.seeds.insert(k.into(), v);
    }
    write_reports(dir, &outcome.reports, &mut m)?;
    println!("{}", summary_path.display());
    finish(&m, manifest_path(dir, true))
}

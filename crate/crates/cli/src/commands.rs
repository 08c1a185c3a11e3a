use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ltcx_core::datakit::{
    class_counts, generate_synthetic, load_manifest, partition_classes, write_manifest, Attribute, DatasetManifest,
    ImageSource, ImageStore, Record, Split, SynthConfig,
};
use ltcx_core::ensemble::{combine as combine_scores, predict_branch, read_branch_csv, write_branch_csv, BranchPrediction};
use ltcx_core::imbalance::{crt_resample, ResampleKind, ResampleSpec};
use ltcx_core::metrics::{
    build_report, fairness_for_records, render_ap_bars, render_roc_grid, write_curves, write_report, F1Threshold,
    ReportOptions,
};
use ltcx_core::model::gradcam as grad_cam;
use ltcx_core::training::{self, crt_retrain, Checkpoint, TrainConfig};
use ltcx_core::{Branch, ClassPartition, LabelMatrix, ScoreMatrix};

use crate::{overlay, ConfigArgs, DataArgs};

struct Data {
    manifest: DatasetManifest,
    images: ImageSource,
    partition: ClassPartition,
}

fn load_data(args: &DataArgs, image_size: usize) -> Result<Data> {
    let manifest = load_manifest(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let store = match &args.images {
        Some(p) => Some(ImageStore::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    if let Some(s) = &store {
        if s.image_size() != image_size {
            bail!("image store holds {0}×{0} images but the network expects {1}×{1}", s.image_size(), image_size);
        }
    }
    let base_dir = args
        .image_dir
        .clone()
        .or_else(|| args.manifest.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let images = ImageSource { store, base_dir, image_size };
    let counts = class_counts(&manifest, Split::Train)?;
    let partition = partition_classes(&counts, &manifest.class_names, &args.support_device, args.head_size)?;
    Ok(Data { manifest, images, partition })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_config(args: &ConfigArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(p) => read_json(p)?,
        None => base,
    };
    for kv in &args.overrides {
        let (key, value) = kv.split_once('=').ok_or_else(|| anyhow!("override `{kv}` is not KEY=VALUE"))?;
        config = config.with_override(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn records_of(manifest: &DatasetManifest, split: Split) -> Result<Vec<Record>> {
    let records = manifest.split(split).records;
    if records.is_empty() {
        bail!("the {} split is empty", split.as_str());
    }
    Ok(records)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

pub fn synth(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => read_json(&p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (manifest, store) = generate_synthetic(&cfg)?;
    fs::create_dir_all(out)?;
    write_manifest(&manifest, out.join("manifest.csv"))?;
    store.save(out.join("images.bin"))?;
    fs::write(out.join("synth.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    eprintln!("wrote {} samples, {} classes to {}", manifest.len(), manifest.num_classes(), out.display());
    Ok(())
}

pub fn train(data: &DataArgs, config: &ConfigArgs, branch: Branch, out: &Path) -> Result<()> {
    let config = resolve_config(config, TrainConfig::default())?;
    let d = load_data(data, config.network.image_size)?;
    let outcome = training::train(&d.manifest, &d.images, &d.partition, branch, &config)?;
    for m in &outcome.checkpoint.history {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_loss {}  val_map {}",
            m.epoch,
            m.train_loss,
            m.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            m.val_map.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    outcome.checkpoint.save(out)?;
    eprintln!("{} checkpoint (epoch {}, {} classes) saved to {}", branch, outcome.checkpoint.epoch, outcome.checkpoint.network.num_classes(), out.display());
    Ok(())
}

pub fn resample(
    manifest: &Path,
    spec: Option<PathBuf>,
    kind: Option<ResampleKind>,
    factor: Option<f64>,
    threshold: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut spec: ResampleSpec = match spec {
        Some(p) => read_json(&p)?,
        None => ResampleSpec::default(),
    };
    if let Some(k) = kind {
        spec.kind = k;
    }
    if let Some(f) = factor {
        spec.crt_factor = f;
    }
    if threshold.is_some() {
        spec.ros_threshold = threshold;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let m = load_manifest(manifest)?;
    let resampled = spec.apply(&m)?;
    write_manifest(&resampled, out)?;
    let before = class_counts(&m, Split::Train)?;
    let after = class_counts(&resampled, Split::Train)?;
    eprintln!("train class counts {before:?} -> {after:?}");
    Ok(())
}

pub fn crt(checkpoint: &Path, data: &DataArgs, config: &ConfigArgs, count: usize, factor: f64, seed: u64, out: &Path) -> Result<()> {
    let base = load_checkpoint(checkpoint)?;
    let config = resolve_config(config, base.config.clone())?;
    let d = load_data(data, base.network.config.image_size)?;
    fs::create_dir_all(out)?;
    let mut manifests = Vec::with_capacity(count);
    for i in 0..count {
        let m = crt_resample(&d.manifest, factor, seed + i as u64)?;
        write_manifest(&m, out.join(format!("resampled_{i}.csv")))?;
        manifests.push(m);
    }
    let runs = crt_retrain(&base, &manifests, &d.images, &config)?;
    for (i, cp) in runs.iter().enumerate() {
        let dir = out.join(format!("run_{i}"));
        cp.save(&dir)?;
        eprintln!("run {i}: epoch {} val_map {}", cp.epoch, cp.best_val_map().map_or("-".into(), |v| format!("{v:.4}")));
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, data: &DataArgs, split: Split, out: &Path) -> Result<()> {
    let cp = load_checkpoint(checkpoint)?;
    let d = load_data(data, cp.network.config.image_size)?;
    let records = records_of(&d.manifest, split)?;
    let pred = predict_branch(&cp.network, &records, &d.images, &d.partition, cp.branch)?;
    write_branch_csv(&pred, out)?;
    Ok(())
}

fn all_prediction(scores: ScoreMatrix, sample_ids: Vec<String>, partition: &ClassPartition) -> BranchPrediction {
    BranchPrediction {
        branch: Branch::All,
        class_indices: partition.all_indices.clone(),
        class_names: scores.class_names,
        sample_ids,
        scores: scores.values,
    }
}

pub fn combine(all: &Path, head: &Path, tail: &Path, data: &DataArgs, out: &Path) -> Result<()> {
    let manifest = load_manifest(&data.manifest)?;
    let counts = class_counts(&manifest, Split::Train)?;
    let partition = partition_classes(&counts, &manifest.class_names, &data.support_device, data.head_size)?;
    let names = &manifest.class_names;
    let a = read_branch_csv(all, Branch::All, names)?;
    let h = read_branch_csv(head, Branch::Head, names)?;
    let t = read_branch_csv(tail, Branch::Tail, names)?;
    let ids = a.sample_ids.clone();
    let scores = combine_scores(&a, &h, &t, &partition)?;
    write_branch_csv(&all_prediction(scores, ids, &partition), out)?;
    Ok(())
}

pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub scores: Option<PathBuf>,
    pub ensemble: bool,
    pub fairness: Vec<Attribute>,
    pub f1_threshold: String,
    pub split: Split,
}

fn parse_f1_threshold(s: &str) -> Result<F1Threshold> {
    if s.eq_ignore_ascii_case("youden") {
        return Ok(F1Threshold::Youden);
    }
    let t: f64 = s.parse().map_err(|_| anyhow!("--f1-threshold must be `youden` or a number, got `{s}`"))?;
    if !(0.0..=1.0).contains(&t) {
        bail!("--f1-threshold {t} outside [0, 1]");
    }
    Ok(F1Threshold::Fixed(t))
}

/// Scores (columns = `classes`, global indices) plus optional baseline
/// per-class scores for the AP chart.
struct Scored {
    scores: ScoreMatrix,
    classes: Vec<usize>,
    baseline: Option<ScoreMatrix>,
}

fn score_checkpoints(args: &EvalArgs, data: &DataArgs, records: &mut Vec<Record>, d: &mut Option<Data>) -> Result<Scored> {
    if args.checkpoints.is_empty() {
        bail!("give at least one checkpoint or --scores");
    }
    let cps = args.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let loaded = load_data(data, cps[0].network.config.image_size)?;
    *records = records_of(&loaded.manifest, args.split)?;
    let predict = |cp: &Checkpoint| predict_branch(&cp.network, records, &loaded.images, &loaded.partition, cp.branch);
    let scored = if args.ensemble {
        let slot = |b: Branch| -> Result<&Checkpoint> {
            let found: Vec<&Checkpoint> = cps.iter().filter(|c| c.branch == b).collect();
            match found.as_slice() {
                [one] => Ok(one),
                _ => bail!("--ensemble needs exactly one {b} checkpoint, got {}", found.len()),
            }
        };
        if cps.len() != 3 {
            bail!("--ensemble needs three checkpoints (head, tail, all), got {}", cps.len());
        }
        let a = predict(slot(Branch::All)?)?;
        let h = predict(slot(Branch::Head)?)?;
        let t = predict(slot(Branch::Tail)?)?;
        let baseline = ScoreMatrix::new(a.scores.clone(), a.class_names.clone());
        Scored {
            scores: combine_scores(&a, &h, &t, &loaded.partition)?,
            classes: loaded.partition.all_indices.clone(),
            baseline: Some(baseline),
        }
    } else {
        if cps.len() != 1 {
            bail!("several checkpoints need --ensemble");
        }
        let p = predict(&cps[0])?;
        Scored { scores: ScoreMatrix::new(p.scores, p.class_names), classes: p.class_indices, baseline: None }
    };
    *d = Some(loaded);
    Ok(scored)
}

fn score_file(path: &Path, args: &EvalArgs, data: &DataArgs, records: &mut Vec<Record>, d: &mut Option<Data>) -> Result<Scored> {
    let manifest = load_manifest(&data.manifest)?;
    let counts = class_counts(&manifest, Split::Train)?;
    let partition = partition_classes(&counts, &manifest.class_names, &data.support_device, data.head_size)?;
    *records = records_of(&manifest, args.split)?;
    let pred = read_branch_csv(path, Branch::All, &manifest.class_names)?;
    let ids: Vec<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    if pred.sample_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
        bail!("{} rows do not match the {} split of the manifest", path.display(), args.split.as_str());
    }
    let scored = Scored { scores: ScoreMatrix::new(pred.scores, pred.class_names), classes: pred.class_indices, baseline: None };
    *d = Some(Data { manifest, images: ImageSource { store: None, base_dir: PathBuf::from("."), image_size: 0 }, partition });
    Ok(scored)
}

pub fn eval(args: EvalArgs, data: &DataArgs, out: &Path) -> Result<()> {
    let f1_threshold = parse_f1_threshold(&args.f1_threshold)?;
    let mut records = Vec::new();
    let mut loaded = None;
    let scored = match &args.scores {
        Some(p) => score_file(p, &args, data, &mut records, &mut loaded)?,
        None => score_checkpoints(&args, data, &mut records, &mut loaded)?,
    };
    let d = loaded.expect("data loaded with the scores");
    let labels = LabelMatrix::from_records(&records, d.manifest.class_names.clone()).select_classes(&scored.classes);
    let local = |global: &[usize]| -> Vec<usize> { global.iter().filter_map(|g| scored.classes.iter().position(|c| c == g)).collect() };
    let mut subsets = Vec::new();
    for b in Branch::ALL {
        let cols = local(b.indices(&d.partition));
        if !cols.is_empty() {
            subsets.push((b.as_str().to_string(), cols));
        }
    }
    let options = ReportOptions { f1_threshold, subsets };
    let mut report = build_report(&scored.scores, &labels, &options)?;
    let all_cols: Vec<usize> = (0..scored.classes.len()).collect();
    for &attribute in &args.fairness {
        let fr = fairness_for_records(&scored.scores, &labels, &records, attribute, &all_cols)
            .with_context(|| format!("fairness over {}", attribute.as_str()))?;
        report.fairness.push(fr);
    }

    fs::create_dir_all(out)?;
    write_report(&report, out.join("report.json"))?;
    write_curves(&scored.scores, &labels, out.join("curves"))?;
    fs::write(out.join("roc.svg"), render_roc_grid(&scored.scores, &labels))?;
    let ap_of = |r: &ltcx_core::metrics::EvalReport| r.classes.iter().map(|c| c.ap).collect::<Vec<_>>();
    let mut series = Vec::new();
    if let Some(base) = &scored.baseline {
        series.push(("all".to_string(), ap_of(&build_report(base, &labels, &options)?)));
        series.push(("ensemble".to_string(), ap_of(&report)));
    } else {
        series.push(("model".to_string(), ap_of(&report)));
    }
    fs::write(out.join("ap.svg"), render_ap_bars(&scored.scores.class_names, &series))?;
    let sample_ids = records.iter().map(|r| r.sample_id.clone()).collect();
    let pred = BranchPrediction {
        branch: Branch::All,
        class_indices: scored.classes.clone(),
        class_names: scored.scores.class_names.clone(),
        sample_ids,
        scores: scored.scores.values.clone(),
    };
    write_branch_csv(&pred, out.join("scores.csv"))?;

    println!("samples {}  mAP {:.4}  mF1 {:.4}", report.num_samples, report.mean_ap, report.macro_f1);
    for (name, v) in &report.subset_map {
        println!("  {name} mAP {v:.4}");
    }
    for f in &report.fairness {
        println!(
            "  EO[{}] {:.4} ± {:.4} over {} classes",
            f.attribute.as_deref().unwrap_or("?"),
            f.eo_mean,
            f.eo_std,
            f.included_classes.len()
        );
    }
    Ok(())
}

fn class_position(spec: &str, manifest: &DatasetManifest, cp: &Checkpoint) -> Result<usize> {
    let global = match spec.parse::<usize>() {
        Ok(i) if i < manifest.num_classes() => i,
        Ok(i) => bail!("class index {i} out of range (0..{})", manifest.num_classes()),
        Err(_) => manifest.class_index(spec).ok_or_else(|| anyhow!("unknown class `{spec}`"))?,
    };
    cp.network
        .class_indices
        .iter()
        .position(|&c| c == global)
        .ok_or_else(|| anyhow!("the {} checkpoint does not cover class `{}`", cp.branch, manifest.class_names[global]))
}

pub fn gradcam(checkpoint: &Path, sample_id: &str, class: &str, data: &DataArgs, alpha: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!("--alpha {alpha} outside [0, 1]");
    }
    let cp = load_checkpoint(checkpoint)?;
    let d = load_data(data, cp.network.config.image_size)?;
    let record = d
        .manifest
        .records
        .iter()
        .find(|r| r.sample_id == sample_id)
        .ok_or_else(|| anyhow!("sample `{sample_id}` not in the manifest"))?;
    let k = class_position(class, &d.manifest, &cp)?;
    let image = d.images.load(&record.image_ref)?;
    let heat = grad_cam(&cp.network, &image, k)?;
    overlay::write_overlay(&image, &heat, alpha, out)?;
    Ok(())
}

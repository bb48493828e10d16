//! `amc`: synthetic data, plugin training, inference, heatmaps, calibration,
//! ensembling, and evaluation over the shared frozen backbone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amc3d::backbone::{BackboneConfig, BackboneWeights};
use amc3d::fusion::{classify_volume, Activation};
use amc3d::interpret::{compute_heatmap, HeatmapMode};
use amc3d::io::manifest::{load_split, DatasetManifest, LabelMode, LoadedRecord, Split};
use amc3d::io::plugin::{init_plugin, load_plugin, save_plugin, TaskPlugin};
use amc3d::io::synth::{generate_synthetic_dataset, SynthSpec};
use amc3d::io::volume::{write_volume, Volume};
use amc3d::tensor::{Scalar, Tensor};
use amc3d::train::calib::{calibrated_logits, fit_platt};
use amc3d::train::fit::{train_plugin, TrainConfig};
use amc3d::train::metrics::{metrics_report, youden_threshold};
use amc3d::train::FocalLossConfig;
use amc3d::{AmcError, Result};

#[derive(Parser)]
#[command(name = "amc", version, about = "volumetric plugin classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic lesion dataset with manifest.
    Synth(SynthArgs),
    /// Initialize and save a random frozen backbone.
    BackboneInit(BackboneInitArgs),
    /// Train a task plugin against a frozen backbone.
    Train(TrainArgs),
    /// Run inference over a manifest split, writing score/logit/label files.
    Infer(InferArgs),
    /// Emit a voxel saliency volume for one record.
    Heatmap(HeatmapArgs),
    /// Fit per-class Platt calibration from logits and store it in a plugin.
    Calibrate(CalibrateArgs),
    /// Mean-logit ensemble of several plugins over a manifest split.
    Ensemble(EnsembleArgs),
    /// Compute AUROC and threshold metrics from prediction files.
    Eval(EvalArgs),
}

#[derive(Args, serde::Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    pos_rate: f64,
    #[arg(long, default_value_t = 1)]
    views: usize,
    #[arg(long)]
    masks: bool,
    /// H,W,S voxel geometry.
    #[arg(long, default_value = "64,64,16", value_parser = parse_geometry)]
    geometry: Geometry,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, serde::Serialize)]
struct Geometry([usize; 3]);

fn parse_geometry(s: &str) -> std::result::Result<Geometry, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [h, w, d] => Ok(Geometry([h, w, d])),
        _ => Err("geometry must be H,W,S".to_string()),
    }
}

#[derive(Args, serde::Serialize)]
struct BackboneInitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    registers: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, serde::Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    plugin_out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda_seg: f64,
    #[arg(long, default_value_t = 2.0)]
    focal_gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    focal_alpha: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 16)]
    decoder_width: usize,
    /// Disable data augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value = "lesion-task")]
    task_id: String,
}

#[derive(Args, serde::Serialize)]
struct InferArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    plugin: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err("split must be train, val, or test".to_string()),
    }
}

#[derive(Args, serde::Serialize)]
struct HeatmapArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    plugin: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    record: String,
    #[arg(long, default_value = "last")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
    /// Keep raw values instead of max-normalizing.
    #[arg(long)]
    raw: bool,
    /// Also write a per-slice ASCII matrix dump.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, serde::Serialize)]
struct CalibrateArgs {
    /// Logit file from `amc infer` (logits.tsv).
    #[arg(long)]
    preds: PathBuf,
    /// Label file from `amc infer` (labels.tsv).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    plugin: PathBuf,
    /// Where to write the calibrated plugin (default: overwrite in place).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct EnsembleArgs {
    /// Comma-separated plugin paths.
    #[arg(long, value_delimiter = ',')]
    plugins: Vec<PathBuf>,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args, serde::Serialize)]
struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Also print Youden-selected operating points per class.
    #[arg(long)]
    youden: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("AMC_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let precision = std::env::var("AMC_PRECISION").unwrap_or_else(|_| "f32".to_string());
    let outcome = match precision.as_str() {
        "f32" => run::<f32>(cli.cmd),
        "f64" => run::<f64>(cli.cmd),
        other => Err(AmcError::Contract(format!(
            "AMC_PRECISION must be f32 or f64, got '{other}'"
        ))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn env_seed(flag: Option<u64>, default: u64) -> u64 {
    flag.or_else(|| std::env::var("AMC_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(default)
}

/// Append-only run directory: never reuse an existing path, suffix instead.
fn run_dir(requested: &Path) -> Result<PathBuf> {
    let mut path = requested.to_path_buf();
    let mut idx = 0usize;
    while path.exists() {
        idx += 1;
        path = requested.with_file_name(format!(
            "{}-{idx}",
            requested
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string())
        ));
    }
    std::fs::create_dir_all(&path)?;
    Ok(path)
}

/// Echo the resolved configuration to stdout and persist it in the run dir.
fn echo_config(dir: Option<&Path>, command: &str, config: &impl serde::Serialize) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("command".into(), command.into());
    doc.insert("config".into(), serde_json::to_value(config)?);
    doc.insert(
        "precision".into(),
        std::env::var("AMC_PRECISION").unwrap_or_else(|_| "f32".into()).into(),
    );
    let text = serde_json::to_string_pretty(&doc)?;
    println!("{text}");
    if let Some(dir) = dir {
        std::fs::write(dir.join("config.json"), &text)?;
    }
    Ok(())
}

fn write_table(path: &Path, header: &[String], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = format!("id\t{}\n", header.join("\t"));
    for (id, vals) in rows {
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.17}")).collect();
        out.push_str(&format!("{id}\t{}\n", cells.join("\t")));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| AmcError::Format {
            path: path.display().to_string(),
            detail: "empty prediction file".into(),
        })?
        .split('\t')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let id = cells.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = cells
            .map(|c| {
                c.parse::<f64>().map_err(|_| AmcError::Format {
                    path: path.display().to_string(),
                    detail: format!("non-numeric cell '{c}' in record {id}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != header.len() {
            return Err(AmcError::Format {
                path: path.display().to_string(),
                detail: format!("record {id} has {} cells for {} classes", vals.len(), header.len()),
            });
        }
        rows.push((id, vals));
    }
    Ok((header, rows))
}

fn record_logits<T: Scalar>(
    rec: &LoadedRecord<T>,
    plugin: &TaskPlugin<T>,
    bb: &BackboneWeights<T>,
) -> Result<Vec<f64>> {
    let views: Vec<&Volume<T>> = rec.views.iter().collect();
    let res = classify_volume(&views, plugin, bb)?;
    Ok(res.logits.data().iter().map(|v| v.to_f64()).collect())
}

fn scores_from_logits<T: Scalar>(plugin: &TaskPlugin<T>, logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(platt) = &plugin.platt {
        return amc3d::train::calib::apply_calibration(logits, platt);
    }
    let t = Tensor::<T>::from_f64_slice(vec![logits.len()], logits)?;
    Ok(plugin.head.probabilities(&t)?.data().iter().map(|v| v.to_f64()).collect())
}

fn run<T: Scalar>(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => {
            let dir = run_dir(&a.out)?;
            let spec = SynthSpec {
                n: a.n,
                geometry: a.geometry.0,
                pos_rate: a.pos_rate,
                views: a.views,
                masks: a.masks,
                ..Default::default()
            };
            let seed = env_seed(a.seed, 7);
            echo_config(Some(&dir), "synth", &serde_json::json!({"spec": spec, "seed": seed, "dir": dir}))?;
            let manifest = generate_synthetic_dataset(&spec, seed, &dir)?;
            let positives = manifest
                .records
                .iter()
                .filter(|r| r.labels.iter().any(|&l| l == 1))
                .count();
            println!("wrote {} records ({} positive) to {}", manifest.records.len(), positives, dir.display());
            Ok(())
        }
        Cmd::BackboneInit(a) => {
            let config = BackboneConfig {
                image_h: a.image,
                image_w: a.image,
                patch_size: a.patch,
                embed_dim: a.embed_dim,
                depth: a.depth,
                heads: a.heads,
                register_tokens: a.registers,
                mlp_ratio: 4.0,
            };
            let seed = env_seed(a.seed, 7);
            echo_config(None, "backbone-init", &serde_json::json!({"config": config, "seed": seed}))?;
            let bb: BackboneWeights<T> = amc3d::backbone::init_random_backbone(&config, seed)?;
            amc3d::backbone::save_backbone(&a.out, &bb)?;
            println!("backbone fingerprint {}", bb.fingerprint());
            Ok(())
        }
        Cmd::Train(a) => {
            let seed = env_seed(a.seed, 7);
            let manifest = DatasetManifest::load(&a.manifest)?;
            let bb: BackboneWeights<T> = amc3d::backbone::load_backbone(&a.backbone)?;
            let train: Vec<LoadedRecord<T>> = load_split(&manifest, &a.manifest, Split::Train)?;
            let val: Vec<LoadedRecord<T>> = load_split(&manifest, &a.manifest, Split::Val)?;
            let views = train
                .first()
                .map(|r| r.views.len())
                .ok_or_else(|| AmcError::Contract("training split is empty".into()))?;
            let has_masks = train.iter().any(|r| r.mask.is_some());
            let decoder = if has_masks && a.lambda_seg > 0.0 {
                Some(amc3d::auxseg::SegDecoderConfig::for_backbone(&bb.config, 2, a.decoder_width)?)
            } else {
                None
            };
            let activation = match manifest.label_mode {
                LabelMode::MultiLabel => Activation::Sigmoid,
                LabelMode::MultiClass => Activation::Softmax,
            };
            let plugin = init_plugin(
                &a.task_id,
                &bb,
                views,
                &manifest.class_names,
                activation,
                a.rank,
                a.alpha,
                decoder,
                seed,
            )?;
            let cfg = TrainConfig {
                epochs: a.epochs,
                seed,
                lambda_seg: a.lambda_seg,
                focal: FocalLossConfig {
                    gamma: a.focal_gamma,
                    alpha: a.focal_alpha,
                },
                augment: if a.no_augment {
                    amc3d::train::augment::AugmentPolicy::off()
                } else {
                    Default::default()
                },
                batch_size: a.batch_size,
                patience: a.patience,
                log: true,
                ..Default::default()
            };
            echo_config(None, "train", &serde_json::json!({"args": a, "seed": seed}))?;
            let outcome = train_plugin(&bb, plugin, &train, &val, manifest.label_mode, &cfg)?;
            save_plugin(&a.plugin_out, &outcome.plugin)?;
            match outcome.best_val_auroc {
                Some(auc) => println!(
                    "saved {} (best epoch {} val AUROC {auc:.4})",
                    a.plugin_out.display(),
                    outcome.best_epoch
                ),
                None => println!("saved {}", a.plugin_out.display()),
            }
            Ok(())
        }
        Cmd::Infer(a) => {
            let dir = run_dir(&a.out)?;
            echo_config(Some(&dir), "infer", &a)?;
            let bb: BackboneWeights<T> = amc3d::backbone::load_backbone(&a.backbone)?;
            let plugin: TaskPlugin<T> = load_plugin(&a.plugin)?;
            if plugin.backbone_fingerprint != bb.fingerprint() {
                return Err(AmcError::FingerprintMismatch {
                    expected: plugin.backbone_fingerprint.clone(),
                    actual: bb.fingerprint(),
                });
            }
            let manifest = DatasetManifest::load(&a.manifest)?;
            let records: Vec<LoadedRecord<T>> = load_split(&manifest, &a.manifest, a.split)?;
            let mut score_rows = Vec::new();
            let mut logit_rows = Vec::new();
            let mut label_rows = Vec::new();
            for rec in &records {
                let logits = record_logits(rec, &plugin, &bb)?;
                score_rows.push((rec.id.clone(), scores_from_logits(&plugin, &logits)?));
                logit_rows.push((rec.id.clone(), logits));
                label_rows.push((rec.id.clone(), rec.labels.iter().map(|&l| l as f64).collect()));
            }
            write_table(&dir.join("predictions.tsv"), &plugin.class_names, &score_rows)?;
            write_table(&dir.join("logits.tsv"), &plugin.class_names, &logit_rows)?;
            write_table(&dir.join("labels.tsv"), &plugin.class_names, &label_rows)?;
            println!("wrote {} predictions to {}", score_rows.len(), dir.display());
            Ok(())
        }
        Cmd::Heatmap(a) => {
            let dir = run_dir(&a.out)?;
            echo_config(Some(&dir), "heatmap", &a)?;
            let mode = HeatmapMode::parse(&a.mode)?;
            let bb: BackboneWeights<T> = amc3d::backbone::load_backbone(&a.backbone)?;
            let plugin: TaskPlugin<T> = load_plugin(&a.plugin)?;
            let manifest = DatasetManifest::load(&a.manifest)?;
            let base = a.manifest.parent().unwrap_or(Path::new("."));
            let rec = manifest
                .records
                .iter()
                .find(|r| r.id == a.record)
                .ok_or_else(|| AmcError::Contract(format!("record '{}' not in manifest", a.record)))?;
            let views: Vec<Volume<T>> = rec
                .views
                .iter()
                .map(|p| amc3d::io::volume::read_volume(&base.join(p)))
                .collect::<Result<_>>()?;
            let view_refs: Vec<&Volume<T>> = views.iter().collect();
            let mut hm = compute_heatmap(&view_refs, a.view, a.class, mode, &plugin, &bb)?;
            if !a.raw {
                hm = hm.max_normalized();
            }
            let shape = hm.values.shape().to_vec();
            let vol = Volume::new(
                hm.values.reshaped(vec![1, shape[0], shape[1], shape[2]])?,
                views[a.view].spacing,
                &format!("heatmap:{}", mode.tag()),
            )?;
            write_volume(&dir.join(format!("{}_heatmap.amcv", a.record)), &vol)?;
            if a.ascii {
                std::fs::write(dir.join(format!("{}_heatmap.txt", a.record)), hm.ascii_slices())?;
            }
            println!("wrote heatmap ({}) to {}", mode.tag(), dir.display());
            Ok(())
        }
        Cmd::Calibrate(a) => {
            echo_config(None, "calibrate", &a)?;
            let (_, logit_rows) = read_table(&a.preds)?;
            let (_, label_rows) = read_table(&a.labels)?;
            if logit_rows.len() != label_rows.len() {
                return Err(AmcError::Calibration(format!(
                    "{} logit rows vs {} label rows",
                    logit_rows.len(),
                    label_rows.len()
                )));
            }
            let logits: Vec<Vec<f64>> = logit_rows.into_iter().map(|(_, v)| v).collect();
            let labels: Vec<Vec<bool>> = label_rows
                .into_iter()
                .map(|(_, v)| v.iter().map(|&x| x >= 0.5).collect())
                .collect();
            let params = fit_platt(&logits, &labels)?;
            let mut plugin: TaskPlugin<T> = load_plugin(&a.plugin)?;
            plugin.platt = Some(params.clone());
            let out = a.out.unwrap_or(a.plugin);
            save_plugin(&out, &plugin)?;
            for (c, p) in plugin.class_names.iter().zip(&params.per_class) {
                println!("{c}: a {:.6} b {:.6} threshold {:.6}", p.a, p.b, p.threshold);
            }
            println!("wrote calibrated plugin {}", out.display());
            Ok(())
        }
        Cmd::Ensemble(a) => {
            let dir = run_dir(&a.out)?;
            echo_config(Some(&dir), "ensemble", &a)?;
            if a.plugins.is_empty() {
                return Err(AmcError::Contract("ensemble needs ≥1 plugin".into()));
            }
            let bb: BackboneWeights<T> = amc3d::backbone::load_backbone(&a.backbone)?;
            let plugins: Vec<TaskPlugin<T>> = a
                .plugins
                .iter()
                .map(|p| load_plugin(p))
                .collect::<Result<_>>()?;
            for p in &plugins {
                if p.backbone_fingerprint != bb.fingerprint() {
                    return Err(AmcError::FingerprintMismatch {
                        expected: p.backbone_fingerprint.clone(),
                        actual: bb.fingerprint(),
                    });
                }
            }
            let manifest = DatasetManifest::load(&a.manifest)?;
            let records: Vec<LoadedRecord<T>> = load_split(&manifest, &a.manifest, a.split)?;
            let mut score_rows = Vec::new();
            let mut label_rows = Vec::new();
            for rec in &records {
                let members: Vec<Vec<f64>> = plugins
                    .iter()
                    .map(|p| {
                        let logits = record_logits(rec, p, &bb)?;
                        match &p.platt {
                            Some(params) => calibrated_logits(&logits, params),
                            None => Ok(logits),
                        }
                    })
                    .collect::<Result<_>>()?;
                let mean = amc3d::train::calib::ensemble_logits(&members)?;
                score_rows.push((rec.id.clone(), scores_from_mean_logits(&plugins[0], &mean)?));
                label_rows.push((rec.id.clone(), rec.labels.iter().map(|&l| l as f64).collect()));
            }
            write_table(&dir.join("predictions.tsv"), &plugins[0].class_names, &score_rows)?;
            write_table(&dir.join("labels.tsv"), &plugins[0].class_names, &label_rows)?;
            println!(
                "wrote {}-member ensemble predictions to {}",
                plugins.len(),
                dir.display()
            );
            Ok(())
        }
        Cmd::Eval(a) => {
            echo_config(None, "eval", &a)?;
            let (classes, pred_rows) = read_table(&a.preds)?;
            let (_, label_rows) = read_table(&a.labels)?;
            let labels_by_id: BTreeMap<&String, &Vec<f64>> =
                label_rows.iter().map(|(id, v)| (id, v)).collect();
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (id, s) in &pred_rows {
                let l = labels_by_id.get(id).ok_or_else(|| AmcError::Contract(format!(
                    "record '{id}' missing from label file"
                )))?;
                scores.push(s.clone());
                labels.push(l.iter().map(|&x| x >= 0.5).collect::<Vec<bool>>());
            }
            let report = metrics_report(&scores, &labels, &classes)?;
            let mut doc = serde_json::to_value(&report)?;
            if a.youden {
                let points: Vec<serde_json::Value> = (0..classes.len())
                    .map(|c| {
                        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
                        let op = youden_threshold(&s, &l)?;
                        Ok(serde_json::json!({"class": classes[c], "operating_point": op}))
                    })
                    .collect::<Result<_>>()?;
                doc["youden"] = serde_json::Value::Array(points);
            }
            let text = serde_json::to_string_pretty(&doc)?;
            println!("{text}");
            if let Some(out) = a.out {
                std::fs::write(out, text)?;
            }
            Ok(())
        }
    }
}

/// Probabilities from ensemble-mean logits using the head activation of a
/// representative member (class layout is validated to match).
fn scores_from_mean_logits<T: Scalar>(plugin: &TaskPlugin<T>, mean: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::<T>::from_f64_slice(vec![mean.len()], mean)?;
    Ok(plugin.head.probabilities(&t)?.data().iter().map(|v| v.to_f64()).collect())
}

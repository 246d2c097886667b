//! Cross-validated experiments: one encoder per fold (or one global encoder),
//! `cv.runs` MIL runs per fold, per-run records and the aggregate report.
//!
//! Experiment directory layout:
//!
//! ```text
//! config.toml                     resolved config, written first
//! encoders/fold{f}.{json,bin}     encoder checkpoints (global.* when global)
//! encoders/fold{f}_curve.csv      pre-training loss per epoch
//! runs/fold{f}_run{r}/            one directory per MIL run
//!     mil.{json,bin}              MIL head checkpoint
//!     encoder.{json,bin}          encoder used, unless it is the fold's shared checkpoint
//!     record.json                 RunRecord
//!     predictions.csv attention.csv confusion.csv roc.csv pr.csv curve.csv
//! report.txt                      aggregate report
//! confusion.csv                   confusion matrix summed over runs
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SslMethod};
use crate::data::{stratified_kfold, Dataset, FoldSplit, PlantedTruth};
use crate::encoder::{load_checkpoint_into, load_checkpoint_manifest, save_checkpoint, Mlp, MlpConfig};
use crate::error::{Error, Result};
use crate::io::{read_string, write_bytes};
use crate::linalg::Matrix;
use crate::metrics::{
    aggregate, attention_rank_auc, write_attention_csv, write_confusion_csv, write_pr_csv,
    write_predictions_csv, write_roc_csv, AggregateReport, AttentionRecord, MetricsReport,
    PredictionSet,
};
use crate::mil::{MilConfig, MilModel};
use crate::params::{param_hash, round_to_f32};
use crate::train::{
    curve_csv, embed_bags, evaluate_bags, pretrain, pretrain_supervised_proxy, random_encoder,
    train_mil, EpochLoss, MilEpoch,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.txt";
pub const ENCODERS_DIR: &str = "encoders";
pub const RUNS_DIR: &str = "runs";
pub const RECORD_FILE: &str = "record.json";

/// splitmix64 over the base seed and each tag.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Instance pseudo-labels for the supervised proxy: planted instances take
/// their bag's class, everything else the control class.
pub fn proxy_pseudo_labels(dataset: &Dataset, truth: &PlantedTruth, control_class: usize, bags: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &b in bags {
        let rec = &dataset.manifest().bags[b];
        if !truth.planted.contains_key(&rec.bag_id) {
            return Err(Error::InvalidParameter(format!("no planted truth for bag {}", rec.bag_id)));
        }
        out.extend((0..rec.n_instances).map(|i| {
            if truth.is_planted(&rec.bag_id, i as u32) {
                rec.label
            } else {
                control_class
            }
        }));
    }
    Ok(out)
}

/// Builds the encoder named by `ssl.method` from the instances of `bags`.
/// Only the self-supervised methods and the random encoder are label-blind;
/// the supervised proxy needs the planted truth.
pub fn build_encoder(
    config: &ExperimentConfig,
    dataset: &Dataset,
    truth: Option<&PlantedTruth>,
    bags: &[usize],
    seed: u64,
) -> Result<(Mlp, Vec<EpochLoss>)> {
    match config.ssl.method {
        SslMethod::NoneRandom => Ok((random_encoder(dataset.feature_dim(), seed)?, Vec::new())),
        SslMethod::NoneSupervisedProxy => {
            let truth = truth.ok_or_else(|| Error::Config("the supervised proxy needs planted truth".into()))?;
            let control = config.dataset.synthetic.control_class;
            let labels = proxy_pseudo_labels(dataset, truth, control, bags)?;
            let pool = dataset.instance_pool(bags);
            let out = pretrain_supervised_proxy(&config.ssl, pool.features(), &labels, dataset.n_classes(), seed)?;
            Ok((out.encoder, out.curve))
        }
        _ => {
            let out = pretrain(&config.ssl, &dataset.instance_pool(bags), seed)?;
            Ok((out.encoder, out.curve))
        }
    }
}

pub fn folds(config: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<FoldSplit>> {
    stratified_kfold(&dataset.labels(), config.cv.k, config.cv.seed)
}

/// Checkpoint stem of the encoder used by a fold.
pub fn encoder_stem(out_dir: &Path, config: &ExperimentConfig, fold: usize) -> PathBuf {
    let name = if config.ssl.global_pretrain { "global".to_string() } else { format!("fold{fold}") };
    out_dir.join(ENCODERS_DIR).join(name)
}

pub fn save_encoder(stem: &Path, encoder: &Mlp) -> Result<()> {
    let meta = serde_json::json!({ "kind": "encoder", "config": encoder.config() });
    save_checkpoint(stem, encoder, meta)
}

fn meta_config<T: serde::de::DeserializeOwned>(stem: &Path, kind: &str) -> Result<T> {
    let manifest = load_checkpoint_manifest(stem)?;
    if manifest.meta.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::format("checkpoint manifest", format!("{} is not a {kind} checkpoint", stem.display())));
    }
    serde_json::from_value(manifest.meta["config"].clone())
        .map_err(|e| Error::format("checkpoint manifest", format!("{kind} config: {e}")))
}

pub fn load_encoder(stem: &Path) -> Result<Mlp> {
    let config: MlpConfig = meta_config(stem, "encoder")?;
    let mut encoder = Mlp::init(&config, 0)?;
    load_checkpoint_into(stem, &mut encoder)?;
    Ok(encoder)
}

pub fn save_mil(stem: &Path, model: &MilModel) -> Result<()> {
    let meta = serde_json::json!({ "kind": "mil", "config": model.config() });
    save_checkpoint(stem, model, meta)
}

pub fn load_mil(stem: &Path) -> Result<MilModel> {
    let config: MilConfig = meta_config(stem, "mil")?;
    let mut model = MilModel::init(&config, 0)?;
    load_checkpoint_into(stem, &mut model)?;
    Ok(model)
}

/// Writes the resolved config; every command does this before any work.
pub fn write_config(out_dir: &Path, config: &ExperimentConfig) -> Result<()> {
    write_bytes(&out_dir.join(CONFIG_FILE), config.to_flat_string().as_bytes())
}

pub fn read_config(out_dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&read_string(&out_dir.join(CONFIG_FILE))?)
}

/// One encoder per fold. With `global_pretrain` a single encoder is built
/// from every bag and shared. Encoders are rounded to checkpoint precision,
/// so reloading one reproduces it exactly. Checkpoints and loss curves go to
/// `out_dir`.
pub fn prepare_encoders(
    config: &ExperimentConfig,
    dataset: &Dataset,
    truth: Option<&PlantedTruth>,
    splits: &[FoldSplit],
    out_dir: Option<&Path>,
) -> Result<Vec<Mlp>> {
    let save = |fold: usize, encoder: &Mlp, curve: &[EpochLoss]| -> Result<()> {
        if let Some(dir) = out_dir {
            let stem = encoder_stem(dir, config, fold);
            save_encoder(&stem, encoder)?;
            let name = format!("{}_curve.csv", stem.file_name().unwrap().to_string_lossy());
            write_bytes(&stem.with_file_name(name), curve_csv(curve).as_bytes())?;
        }
        Ok(())
    };
    if config.ssl.global_pretrain {
        let all: Vec<usize> = (0..dataset.n_bags()).collect();
        let t = Instant::now();
        let (mut encoder, curve) = build_encoder(config, dataset, truth, &all, config.ssl.seed)?;
        round_to_f32(&mut encoder);
        info!("{} global encoder ready in {:.1?}", config.ssl.method, t.elapsed());
        save(0, &encoder, &curve)?;
        return Ok(vec![encoder; splits.len()]);
    }
    splits
        .iter()
        .map(|s| {
            let t = Instant::now();
            let seed = derive_seed(config.ssl.seed, &[s.fold_index as u64]);
            let (mut encoder, curve) = build_encoder(config, dataset, truth, &s.train, seed)?;
            round_to_f32(&mut encoder);
            info!("{} fold {} encoder ready in {:.1?}", config.ssl.method, s.fold_index, t.elapsed());
            save(s.fold_index, &encoder, &curve)?;
            Ok(encoder)
        })
        .collect()
}

/// Reads the encoders written by [`prepare_encoders`].
pub fn load_encoders(out_dir: &Path, config: &ExperimentConfig, n_folds: usize) -> Result<Vec<Mlp>> {
    (0..n_folds).map(|f| load_encoder(&encoder_stem(out_dir, config, f))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub fold_index: usize,
    pub run_index: usize,
    pub seed: u64,
    pub config_hash: String,
    pub encoder_checkpoint: Option<String>,
    pub mil_checkpoint: Option<String>,
    /// Parameter hash of the encoder before and after MIL training.
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: MetricsReport,
    pub duration_secs: f64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateReport,
    pub report: String,
}

/// Predictions, attention and metrics of a MIL model on some bags.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: PredictionSet,
    pub attention: Vec<AttentionRecord>,
    pub metrics: MetricsReport,
}

pub fn evaluate(
    model: &MilModel,
    encoder: &Mlp,
    frozen_z: Option<&[Matrix]>,
    dataset: &Dataset,
    bags: &[usize],
    truth: Option<&PlantedTruth>,
) -> Result<Evaluation> {
    let (predictions, attention) = evaluate_bags(model, encoder, frozen_z, dataset, bags)?;
    let att = truth.map(|t| attention_rank_auc(&attention, t)).transpose()?;
    let metrics = MetricsReport::compute(&predictions, att)?;
    Ok(Evaluation {
        predictions,
        attention,
        metrics,
    })
}

/// Writes predictions, attention, confusion, ROC and PR exports into `dir`.
pub fn write_exports(dir: &Path, eval: &Evaluation) -> Result<()> {
    let n = eval.predictions.n_classes();
    write_bytes(&dir.join("predictions.csv"), write_predictions_csv(&eval.predictions)?.as_bytes())?;
    write_bytes(&dir.join("attention.csv"), write_attention_csv(&eval.attention, n)?.as_bytes())?;
    write_bytes(&dir.join("confusion.csv"), write_confusion_csv(&eval.metrics.confusion).as_bytes())?;
    write_bytes(&dir.join("roc.csv"), write_roc_csv(&eval.predictions).as_bytes())?;
    write_bytes(&dir.join("pr.csv"), write_pr_csv(&eval.predictions).as_bytes())
}

fn mil_curve_csv(curve: &[MilEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in curve {
        writeln!(s, "{},{:?},{:?},{:?}", e.epoch, e.train_loss, e.val_loss, e.lr).unwrap();
    }
    s
}

pub fn run_id(fold: usize, run: usize) -> String {
    format!("fold{fold}_run{run}")
}

/// Trains and evaluates `cv.runs` MIL models on every fold, using
/// `encoders[f]` for fold `f`. Frozen encoders are embedded once per fold.
pub fn run_cv(
    config: &ExperimentConfig,
    dataset: &Dataset,
    truth: Option<&PlantedTruth>,
    splits: &[FoldSplit],
    encoders: &[Mlp],
    out_dir: Option<&Path>,
) -> Result<Experiment> {
    if encoders.len() != splits.len() {
        return Err(Error::ShapeMismatch(format!("{} encoders for {} folds", encoders.len(), splits.len())));
    }
    let config_hash = config.hash();
    let mut records = Vec::new();
    for (split, given) in splits.iter().zip(encoders) {
        // checkpoints hold f32, so train on exactly what a reload will give
        let mut encoder = given.clone();
        round_to_f32(&mut encoder);
        let encoder = &encoder;
        let frozen = config.mil.frozen.then(|| embed_bags(encoder, dataset)).transpose()?;
        let hash_before = param_hash(encoder);
        // frozen runs point at the fold's shared checkpoint only if it holds this encoder
        let shared = match out_dir {
            Some(dir) if config.mil.frozen => load_encoder(&encoder_stem(dir, config, split.fold_index))
                .is_ok_and(|e| param_hash(&e) == hash_before),
            _ => false,
        };
        for run in 0..config.cv.runs {
            let t = Instant::now();
            let seed = derive_seed(config.cv.seed, &[split.fold_index as u64, run as u64]);
            let mut outcome = train_mil(&config.mil, dataset, encoder, frozen.as_deref(), split, seed)?;
            round_to_f32(&mut outcome.model);
            if !config.mil.frozen {
                round_to_f32(&mut outcome.encoder);
            }
            let eval = evaluate(&outcome.model, &outcome.encoder, frozen.as_deref(), dataset, &split.test, truth)?;
            let id = run_id(split.fold_index, run);
            let mut record = RunRecord {
                run_id: id.clone(),
                fold_index: split.fold_index,
                run_index: run,
                seed,
                config_hash: config_hash.clone(),
                encoder_checkpoint: None,
                mil_checkpoint: None,
                encoder_hash_before: hash_before.clone(),
                encoder_hash_after: param_hash(&outcome.encoder),
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.curve.len(),
                metrics: eval.metrics.clone(),
                duration_secs: 0.0,
            };
            if let Some(dir) = out_dir {
                let run_dir = dir.join(RUNS_DIR).join(&id);
                save_mil(&run_dir.join("mil"), &outcome.model)?;
                record.mil_checkpoint = Some(format!("{RUNS_DIR}/{id}/mil"));
                record.encoder_checkpoint = Some(if shared {
                    let stem = encoder_stem(Path::new(""), config, split.fold_index);
                    stem.to_string_lossy().into_owned()
                } else {
                    save_encoder(&run_dir.join("encoder"), &outcome.encoder)?;
                    format!("{RUNS_DIR}/{id}/encoder")
                });
                write_exports(&run_dir, &eval)?;
                write_bytes(&run_dir.join("curve.csv"), mil_curve_csv(&outcome.curve).as_bytes())?;
            }
            record.duration_secs = t.elapsed().as_secs_f64();
            info!(
                "{id}: f1 {:.3}, best epoch {}, {:.1}s",
                record.metrics.f1_macro, record.best_epoch, record.duration_secs
            );
            if let Some(dir) = out_dir {
                let json = serde_json::to_vec_pretty(&record).expect("record serializes");
                write_bytes(&dir.join(RUNS_DIR).join(&id).join(RECORD_FILE), &json)?;
            }
            records.push(record);
        }
    }
    let experiment = summarize(config, records)?;
    if let Some(dir) = out_dir {
        write_summary(dir, &experiment)?;
    }
    Ok(experiment)
}

/// Aggregates records into the report. Records must share the config hash.
pub fn summarize(config: &ExperimentConfig, records: Vec<RunRecord>) -> Result<Experiment> {
    let hash = config.hash();
    if let Some(r) = records.iter().find(|r| r.config_hash != hash) {
        return Err(Error::Config(format!("run {} was produced by a different config", r.run_id)));
    }
    let reports: Vec<MetricsReport> = records.iter().map(|r| r.metrics.clone()).collect();
    let aggregate = aggregate(&reports)?;
    let report = format_report(config, &records, &aggregate);
    Ok(Experiment {
        records,
        aggregate,
        report,
    })
}

pub fn write_summary(out_dir: &Path, experiment: &Experiment) -> Result<()> {
    write_bytes(&out_dir.join(REPORT_FILE), experiment.report.as_bytes())?;
    write_bytes(
        &out_dir.join("confusion.csv"),
        write_confusion_csv(&experiment.aggregate.confusion).as_bytes(),
    )
}

pub fn read_record(run_dir: &Path) -> Result<RunRecord> {
    serde_json::from_str(&read_string(&run_dir.join(RECORD_FILE))?)
        .map_err(|e| Error::format("run record", e.to_string()))
}

/// Reads every `runs/*/record.json`, ordered by fold then run.
pub fn read_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = out_dir.join(RUNS_DIR);
    let entries = std::fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&runs, e))?.path().join(RECORD_FILE);
        if path.exists() {
            records.push(read_record(path.parent().expect("record has a parent"))?);
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no run records under {}", runs.display())));
    }
    records.sort_by_key(|r| (r.fold_index, r.run_index));
    Ok(records)
}

fn encoder_label(method: SslMethod) -> &'static str {
    match method {
        SslMethod::Simclr => "SimCLR pre-trained",
        SslMethod::Swav => "SwAV pre-trained",
        SslMethod::Dino => "DINO pre-trained",
        SslMethod::NoneRandom => "random (untrained)",
        SslMethod::NoneSupervisedProxy => "supervised proxy (trained on planted-instance pseudo-labels)",
    }
}

/// Machine-parseable `key = value` report. Timings are left out so that
/// repeated runs give identical text.
pub fn format_report(config: &ExperimentConfig, records: &[RunRecord], agg: &AggregateReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
    kv("method", config.ssl.method.name().into());
    kv("encoder", encoder_label(config.ssl.method).into());
    kv("encoder_frozen", config.mil.frozen.to_string());
    kv("global_pretrain", config.ssl.global_pretrain.to_string());
    kv("config_hash", config.hash());
    kv("prediction_sets", agg.n_reports.to_string());
    let ms = |m: &crate::metrics::MeanSd| format!("{:.6} ± {:.6}", m.mean, m.sd);
    kv("f1_macro", ms(&agg.f1_macro));
    kv("roc_auc_macro", ms(&agg.roc_auc_macro));
    kv("pr_auc_macro", ms(&agg.pr_auc_macro));
    kv("attention_rank_auc", agg.attention_rank_auc.as_ref().map_or("n/a".into(), ms));
    for (i, row) in agg.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        kv(&format!("confusion.{i}"), cells.join(" "));
    }
    for r in records {
        let m = &r.metrics;
        let att = m.attention_rank_auc.map_or("n/a".into(), |a| format!("{a:?}"));
        kv(
            &format!("run.{}", r.run_id),
            format!(
                "seed {} best_epoch {} f1 {:?} roc_auc {:?} pr_auc {:?} attention_auc {att}",
                r.seed, r.best_epoch, m.f1_macro, m.roc_auc_macro, m.pr_auc_macro
            ),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn derived_seeds_differ_by_tag() {
        let a = derive_seed(0, &[0, 1]);
        assert_ne!(a, derive_seed(0, &[1, 0]));
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_eq!(a, derive_seed(0, &[0, 1]));
    }

    #[test]
    fn proxy_labels_follow_truth() {
        let cfg = SyntheticConfig {
            n_bags_per_class: 2,
            ..SyntheticConfig::default()
        };
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        let bags: Vec<usize> = (0..ds.n_bags()).collect();
        let labels = proxy_pseudo_labels(&ds, &truth, 0, &bags).unwrap();
        assert_eq!(labels.len(), ds.instance_pool(&bags).len());
        let planted: usize = truth.planted.values().map(Vec::len).sum();
        assert_eq!(labels.iter().filter(|&&l| l != 0).count(), planted);
        assert!(proxy_pseudo_labels(&ds, &PlantedTruth::default(), 0, &bags).is_err());
    }
}

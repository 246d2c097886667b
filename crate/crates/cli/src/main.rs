//! `sslmil` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (divergence, failed gradient check), 3 I/O or malformed file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sslmil::config::{ExperimentConfig, SslMethod};
use sslmil::data::{generate_synthetic, write_with_truth, Dataset, PlantedTruth, TRUTH_FILE};
use sslmil::experiment::{
    self, derive_seed, evaluate, folds, load_encoder, load_encoders, load_mil, prepare_encoders,
    read_config, read_record, read_records, run_cv, summarize, write_config, write_exports,
    write_summary, RunRecord,
};
use sslmil::gradcheck::{run_gradcheck, Component, GradcheckOptions};
use sslmil::io::{read_string, write_bytes};
use sslmil::metrics::write_embeddings_csv;
use sslmil::train::{embed_bags, random_encoder};
use sslmil::Error;

#[derive(Parser, Debug)]
#[command(name = "sslmil", version, about = "Self-supervised pre-training and attention MIL experiments")]
struct Cli {
    /// Config file with flat dotted keys (`mil.epochs = 50`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set ssl.method=dino`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory; defaults to `dataset.path`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (manifest, blob and planted truth).
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the encoders of every fold (or one global encoder).
    Pretrain {
        #[command(flatten)]
        data: DataArg,
    },
    /// Cross-validated MIL training and test-fold evaluation.
    TrainMil {
        #[command(flatten)]
        data: DataArg,
        /// Use this encoder checkpoint stem for every fold.
        #[arg(long, conflicts_with = "random_encoder")]
        encoder: Option<PathBuf>,
        /// Use untrained encoders instead of pre-trained checkpoints.
        #[arg(long)]
        random_encoder: bool,
    },
    /// Evaluate one trained run and write all exports.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Run directory (`<experiment>/runs/fold0_run0`).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        bags: Split,
        /// Allow scoring bags the run was trained or early-stopped on.
        #[arg(long)]
        allow_train_fold: bool,
        /// Export directory; defaults to `<run>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Components to check (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        scope: Vec<String>,
        #[arg(long, default_value_t = 20)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: corrupt this component's analytic gradient.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Re-aggregate the run records of an experiment directory.
    Report {
        /// Experiment directory; defaults to `output.dir`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
    All,
}

fn load_config(cli: &Cli) -> sslmil::Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => read_string(p)?,
        None => String::new(),
    };
    ExperimentConfig::parse_with_overrides(&text, &cli.overrides)
}

fn data_dir(arg: &DataArg, config: &ExperimentConfig) -> sslmil::Result<PathBuf> {
    match (&arg.data, config.dataset.path.as_str()) {
        (Some(p), _) => Ok(p.clone()),
        (None, "") => Err(Error::Config("no dataset: pass --data or set dataset.path".into())),
        (None, p) => Ok(PathBuf::from(p)),
    }
}

/// Truth is read only for evaluation and the supervised proxy, never for
/// self-supervised pre-training.
fn optional_truth(dir: &Path) -> sslmil::Result<Option<PlantedTruth>> {
    if dir.join(TRUTH_FILE).exists() {
        PlantedTruth::read(dir).map(Some)
    } else {
        Ok(None)
    }
}

fn cmd_generate(config: &ExperimentConfig, out: Option<PathBuf>) -> sslmil::Result<()> {
    let dir = match (out, config.dataset.path.as_str()) {
        (Some(p), _) => p,
        (None, "") => return Err(Error::Config("pass --out or set dataset.path".into())),
        (None, p) => PathBuf::from(p),
    };
    let (dataset, truth) = generate_synthetic(&config.dataset.synthetic)?;
    write_with_truth(&dir, &dataset, &truth)?;
    println!(
        "wrote {} bags, {} instances to {}",
        dataset.n_bags(),
        dataset.manifest().total_instances(),
        dir.display()
    );
    Ok(())
}

fn cmd_pretrain(config: &ExperimentConfig, data: &DataArg) -> sslmil::Result<()> {
    let dir = data_dir(data, config)?;
    let out = PathBuf::from(&config.output.dir);
    write_config(&out, config)?;
    let dataset = Dataset::read(&dir)?;
    let truth = match config.ssl.method {
        SslMethod::NoneSupervisedProxy => Some(PlantedTruth::read(&dir)?),
        _ => None,
    };
    let splits = folds(config, &dataset)?;
    prepare_encoders(config, &dataset, truth.as_ref(), &splits, Some(&out))?;
    println!("encoders written to {}", out.join(experiment::ENCODERS_DIR).display());
    Ok(())
}

fn cmd_train_mil(
    config: &ExperimentConfig,
    data: &DataArg,
    encoder: Option<&Path>,
    random: bool,
) -> sslmil::Result<()> {
    let dir = data_dir(data, config)?;
    let out = PathBuf::from(&config.output.dir);
    write_config(&out, config)?;
    let dataset = Dataset::read(&dir)?;
    let truth = optional_truth(&dir)?;
    let splits = folds(config, &dataset)?;
    let encoders = if random {
        splits
            .iter()
            .map(|s| random_encoder(dataset.feature_dim(), derive_seed(config.ssl.seed, &[s.fold_index as u64])))
            .collect::<sslmil::Result<Vec<_>>>()?
    } else if let Some(stem) = encoder {
        vec![load_encoder(stem)?; splits.len()]
    } else {
        load_encoders(&out, config, splits.len()).map_err(|e| match e {
            Error::Io { path, .. } => Error::Config(format!(
                "missing encoder checkpoint {}; run `pretrain`, or pass --encoder or --random-encoder",
                path.display()
            )),
            other => other,
        })?
    };
    let exp = run_cv(config, &dataset, truth.as_ref(), &splits, &encoders, Some(&out))?;
    print!("{}", exp.report);
    Ok(())
}

fn cmd_eval(
    data: &DataArg,
    run: &Path,
    bags: Split,
    allow_train_fold: bool,
    out: Option<PathBuf>,
    cli_config: &ExperimentConfig,
) -> sslmil::Result<()> {
    let record = read_record(run)?;
    let exp_dir = run
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::Config(format!("{} is not inside an experiment directory", run.display())))?;
    let config = read_config(exp_dir)?;
    if config.hash() != record.config_hash {
        return Err(Error::Config("run record does not match the experiment config".into()));
    }
    let dir = match &data.data {
        Some(_) => data_dir(data, cli_config)?,
        None => data_dir(data, &config)?,
    };
    let dataset = Dataset::read(&dir)?;
    let truth = optional_truth(&dir)?;
    let split = folds(&config, &dataset)?
        .into_iter()
        .find(|s| s.fold_index == record.fold_index)
        .ok_or_else(|| Error::Config(format!("fold {} not in this dataset", record.fold_index)))?;
    let chosen: Vec<usize> = match bags {
        Split::Train => split.train.clone(),
        Split::Validation => split.validation.clone(),
        Split::Test => split.test.clone(),
        Split::All => (0..dataset.n_bags()).collect(),
    };
    let seen: BTreeSet<usize> = split.train.iter().chain(&split.validation).copied().collect();
    if !allow_train_fold && chosen.iter().any(|b| seen.contains(b)) {
        return Err(Error::Refused(format!(
            "{} includes bags that fold {} trained on; pass --allow-train-fold to score them anyway",
            format!("{bags:?}").to_lowercase(),
            record.fold_index
        )));
    }
    let stem = |rel: &Option<String>, what: &str| {
        rel.as_ref()
            .map(|r| exp_dir.join(r))
            .ok_or_else(|| Error::Config(format!("run record names no {what} checkpoint")))
    };
    let encoder = load_encoder(&stem(&record.encoder_checkpoint, "encoder")?)?;
    let model = load_mil(&stem(&record.mil_checkpoint, "mil")?)?;
    if encoder.input_dim() != dataset.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} features, dataset has {}",
            encoder.input_dim(),
            dataset.feature_dim()
        )));
    }
    if model.config().k != encoder.output_dim() || model.n_classes() != dataset.n_classes() {
        return Err(Error::ShapeMismatch("MIL checkpoint does not fit the encoder or the class count".into()));
    }
    let z = embed_bags(&encoder, &dataset)?;
    let eval = evaluate(&model, &encoder, Some(&z), &dataset, &chosen, truth.as_ref())?;
    let out = out.unwrap_or_else(|| run.join("eval"));
    write_exports(&out, &eval)?;
    let rows: Vec<(String, _)> = chosen.iter().map(|&b| (dataset.bag_id(b).to_string(), z[b].clone())).collect();
    write_bytes(&out.join("embeddings.csv"), write_embeddings_csv(&rows)?.as_bytes())?;
    let summary = summarize(
        &config,
        vec![RunRecord {
            metrics: eval.metrics.clone(),
            ..record
        }],
    )?;
    write_summary(&out, &summary)?;
    print!("{}", summary.report);
    Ok(())
}

fn cmd_gradcheck(scope: &[String], shapes: usize, seed: u64, fault: Option<&str>) -> sslmil::Result<bool> {
    let components = if scope.is_empty() {
        Component::ALL.to_vec()
    } else {
        scope.iter().map(|s| s.parse()).collect::<sslmil::Result<_>>()?
    };
    let options = GradcheckOptions {
        components,
        shapes_per_component: shapes,
        seed,
        fault: fault.map(str::parse).transpose()?,
    };
    let report = run_gradcheck(&options)?;
    print!("{}", report.to_text());
    Ok(report.passed())
}

fn cmd_report(config: &ExperimentConfig, dir: Option<PathBuf>) -> sslmil::Result<()> {
    let dir = dir.unwrap_or_else(|| PathBuf::from(&config.output.dir));
    let stored = read_config(&dir)?;
    let exp = summarize(&stored, read_records(&dir)?)?;
    write_summary(&dir, &exp)?;
    print!("{}", exp.report);
    Ok(())
}

fn run(cli: Cli) -> sslmil::Result<ExitCode> {
    let config = load_config(&cli)?;
    info!("config hash {}", config.hash());
    match cli.command {
        Command::Generate { out } => cmd_generate(&config, out)?,
        Command::Pretrain { ref data } => cmd_pretrain(&config, data)?,
        Command::TrainMil {
            ref data,
            ref encoder,
            random_encoder,
        } => cmd_train_mil(&config, data, encoder.as_deref(), random_encoder)?,
        Command::Eval {
            ref data,
            ref run,
            bags,
            allow_train_fold,
            ref out,
        } => cmd_eval(data, run, bags, allow_train_fold, out.clone(), &config)?,
        Command::Gradcheck {
            ref scope,
            shapes,
            seed,
            ref inject_fault,
        } => {
            if !cmd_gradcheck(scope, shapes, seed, inject_fault.as_deref())? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { dir } => cmd_report(&config, dir)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use claf::checkpoint::{file_sha256, Checkpoint};
use claf::config::{preset, Ablation, RunConfig, PRESETS};
use claf::data::SplitManifest;
use claf::evaluation::{aggregate, evaluate, export_features, report_csv, RunSummary};
use claf::experiment::{
    load_sources, prepare_manifest, Experiment, RunOptions, CHECKPOINT_FILE, CONFIG_FILE, MANIFEST_FILE, SUMMARY_FILE,
};
use claf::ClafError;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "claf", version, about = "Imbalanced semi-supervised training with CLAF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the long-tailed labeled/unlabeled split and write its manifest.
    PrepareData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train to completion (or --stop-at), evaluating periodically.
    Train(TrainArgs),
    /// Evaluate a checkpoint's EMA model on the test set; prints JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config the checkpoint must have been written with.
        #[arg(long)]
        expect_config: Option<PathBuf>,
        /// Overrides applied to the stored config when loading the test set.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Write EMA encoder features of a split to a binary file.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run summaries below the given directories into a CSV table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in presets.
    Presets,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset name (see `claf presets`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set fa.mu=0.9`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `no-fa` or `no-contrastive`; repeatable.
    #[arg(long = "ablate", value_name = "NAME")]
    ablations: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/checkpoint.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Stop and checkpoint after this many completed steps.
    #[arg(long)]
    stop_at: Option<usize>,
    /// Setting label recorded in the summary (defaults to the preset name).
    #[arg(long)]
    setting: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

impl ConfigArgs {
    fn resolve(&self) -> claf::Result<RunConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), _) => preset(name)?,
            (None, Some(path)) => RunConfig::load(path)?,
            (None, None) => RunConfig::default(),
        };
        cfg.apply_overrides(&self.sets)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for a in &self.ablations {
            cfg.apply_ablation(a.parse::<Ablation>()?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn method(&self, cfg: &RunConfig) -> String {
        let pipeline = serde_json::to_value(cfg.trainer.pipeline)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        std::iter::once(pipeline).chain(self.ablations.iter().cloned()).collect::<Vec<_>>().join("/")
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    Ok(())
}

/// Reuses `<out>/manifest.json` when present, otherwise builds and writes it.
fn manifest_for(cfg: &RunConfig, out: &Path, train: &dyn claf::data::SourceDataset) -> anyhow::Result<SplitManifest> {
    let path = out.join(MANIFEST_FILE);
    if path.exists() {
        return Ok(SplitManifest::read(&path)?);
    }
    let manifest = prepare_manifest(cfg, train)?;
    fs::create_dir_all(out)?;
    manifest.write(&path)?;
    Ok(manifest)
}

fn prepare_data(args: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let sources = load_sources(&cfg.data)?;
    let manifest = prepare_manifest(&cfg, sources.train.as_ref())?;
    fs::create_dir_all(out)?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    write_config(out, &cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "manifest": out.join(MANIFEST_FILE),
            "labeled_counts": manifest.labeled_counts,
            "unlabeled_counts": manifest.unlabeled_counts,
        })
    );
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve()?;
    let sources = load_sources(&cfg.data)?;
    let manifest = manifest_for(&cfg, &args.out, sources.train.as_ref())?;
    let mut exp = if args.resume {
        let path = args.out.join(CHECKPOINT_FILE);
        let ckpt = Checkpoint::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Experiment::resume(&ckpt, Some(&cfg), &sources, &manifest)?
    } else {
        Experiment::new(cfg.clone(), &sources, &manifest)?
    };
    write_config(&args.out, &cfg)?;
    log::info!(
        "training {} params for {} iterations from step {}",
        exp.trainer.num_params(),
        cfg.trainer.total_iters,
        exp.trainer.iter
    );
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        setting: args
            .setting
            .clone()
            .or_else(|| args.config.preset.clone())
            .unwrap_or_else(|| "custom".into()),
        method: args.config.method(&cfg),
        stop_at: args.stop_at,
    };
    let summary = exp.run(&opts)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(checkpoint: &Path, expect: Option<&Path>, sets: &[String]) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let expected = expect.map(RunConfig::load).transpose()?;
    let trainer = ckpt.restore_trainer(expected.as_ref())?;
    let mut data_cfg = trainer.config.clone();
    data_cfg.apply_overrides(sets)?;
    let sources = load_sources(&data_cfg.data)?;
    let record = evaluate(
        &trainer.model,
        sources.test.as_ref(),
        &data_cfg.data.normalization(),
        &ckpt.header.labeled_counts,
        &trainer.config.eval,
        trainer.iter,
    )?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn export(checkpoint: &Path, split: Split, out: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let trainer = ckpt.restore_trainer(None)?;
    let cfg = &trainer.config;
    let sources = load_sources(&cfg.data)?;
    let dataset = match split {
        Split::Train => sources.train,
        Split::Test => sources.test,
    };
    let header = export_features(
        &trainer.model,
        dataset.as_ref(),
        &cfg.data.normalization(),
        &file_sha256(checkpoint)?,
        out,
    )?;
    println!("{}", serde_json::to_string_pretty(&header)?);
    Ok(())
}

fn collect_summaries(dir: &Path, out: &mut Vec<RunSummary>) -> anyhow::Result<()> {
    let summary = dir.join(SUMMARY_FILE);
    if summary.is_file() {
        let s = fs::read(&summary).with_context(|| format!("reading {}", summary.display()))?;
        out.push(serde_json::from_slice(&s).with_context(|| format!("parsing {}", summary.display()))?);
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        collect_summaries(&c, out)?;
    }
    Ok(())
}

fn report(dirs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let mut summaries = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            bail!(ClafError::Config(format!("{} is not a directory", d.display())));
        }
        collect_summaries(d, &mut summaries)?;
    }
    if summaries.is_empty() {
        bail!(ClafError::Config("no summary.json found".into()));
    }
    let csv = report_csv(&aggregate(&summaries));
    match out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PrepareData { config, out } => prepare_data(&config, &out),
        Command::Train(args) => train(&args),
        Command::Eval {
            checkpoint,
            expect_config,
            sets,
        } => eval(&checkpoint, expect_config.as_deref(), &sets),
        Command::ExportFeatures { checkpoint, split, out } => export(&checkpoint, split, &out),
        Command::Report { dirs, out } => report(&dirs, out.as_deref()),
        Command::Presets => {
            PRESETS.iter().for_each(|p| println!("{p}"));
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<ClafError>()) {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

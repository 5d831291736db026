//! Command-line front end. Every command reads one TOML config; outputs go
//! under `io.out_dir` (or `--out`) next to the effective config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::model::checkpoint::{embedded_vae, load_demonet, load_vae, read_manifest};
use crate::model::Vae;
use crate::pipeline::corpus::generate;
use crate::pipeline::reports::{cosine_similarity_report, seed_sweep, write_rows, Confusion, RoutingReport};
use crate::pipeline::train::{predict, ClassifierInputs};
use crate::pipeline::{train_stage1, train_stage2, Dataset, Manifest, Split, Wanted};

pub const CACHE_ENV: &str = "DEMONET_CACHE_DIR";
pub const THREADS_ENV: &str = "DEMONET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "demonet", version, about = "DEMON-routed multi-expert ship-noise classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `io.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus described by the `[synth]` section.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Compute and cache features for every manifest segment.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Defaults to the configured spectrogram plus DEMON spectra.
        #[arg(long)]
        feature: Option<FeatureArg>,
    },
    /// Stage 1: train the cross-temporal VAE.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Stage 2: train the routed classifier (runs Stage 1 first when no VAE
    /// checkpoint exists) and score the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// VAE checkpoint to use for every seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test accuracy and confusion matrix of a classifier checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cosine-similarity or routing report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: ReportKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    Stft,
    Mel,
    Cqt,
    Demon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Cosine,
    Routing,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Extract { common, .. }
            | Command::TrainVae { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Applies flag and environment overrides and validates the result.
pub fn effective_config(common: &Common, cache_env: Option<String>) -> Result<Config> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.io.out_dir = out.clone();
    }
    if let Some(dir) = cache_env.filter(|d| !d.is_empty()) {
        cfg.io.cache_dir = dir.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_count(var: Option<String>) -> Result<Option<usize>> {
    match var {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
    }
}

fn prepare_out(cfg: &Config) -> Result<PathBuf> {
    let out = cfg.io.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
    let p = out.join("effective-config.toml");
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::file(&p, e))?;
    Ok(out)
}

fn require_dir(flag: &str, p: Option<&PathBuf>) -> Result<PathBuf> {
    let p = p.ok_or_else(|| Error::Config(format!("{flag} is required")))?;
    if !p.join("manifest.json").is_file() {
        return Err(Error::Config(format!("checkpoint not found: {}", p.display())));
    }
    Ok(p.clone())
}

fn load_manifest(cfg: &Config) -> Result<Manifest> {
    if !cfg.io.manifest.is_file() {
        return Err(Error::Config(format!("manifest not found: {}", cfg.io.manifest.display())));
    }
    let mut m = Manifest::load(&cfg.io.manifest)?;
    crate::pipeline::manifest::validate_split(&m)?;
    m.ensure_validation(cfg.train.val_fraction, cfg.train.seeds[0]);
    Ok(m)
}

fn training_data(cfg: &Config) -> Result<Dataset> {
    Dataset::build(&load_manifest(cfg)?, cfg, Wanted::training(cfg))?.require_complete()
}

#[derive(Serialize)]
struct ShapeRow<'a> {
    path: String,
    track_id: &'a str,
    split: Split,
    window: usize,
    feature: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize)]
struct ErrorRow {
    path: String,
    error: String,
}

fn extract(cfg: &Config, out: &Path, feature: Option<FeatureArg>) -> Result<()> {
    let want = match feature {
        None => Wanted::training(cfg),
        Some(FeatureArg::Demon) => Wanted { spectrogram: None, demon: true },
        Some(f) => Wanted {
            spectrogram: Some(match f {
                FeatureArg::Stft => FeatureKind::Stft,
                FeatureArg::Mel => FeatureKind::Mel,
                _ => FeatureKind::Cqt,
            }),
            demon: false,
        },
    };
    let ds = Dataset::build(&load_manifest(cfg)?, cfg, want)?;
    let mut shapes = Vec::new();
    for s in &ds.segments {
        let rec = &ds.records[s.record];
        let mut push = |name: String, a: &ndarray::Array2<f64>| {
            shapes.push(ShapeRow {
                path: rec.path.display().to_string(),
                track_id: &rec.track_id,
                split: rec.split,
                window: s.window,
                feature: name,
                rows: a.nrows(),
                cols: a.ncols(),
            })
        };
        if let (Some(k), Some(a)) = (ds.spectrogram_kind, &s.spectrogram) {
            push(k.to_string(), a);
        }
        if let Some(a) = &s.demon {
            push("demon".into(), a);
        }
    }
    write_rows(&out.join("extract-shapes.csv"), &shapes)?;
    let errors: Vec<ErrorRow> = ds
        .errors
        .iter()
        .map(|(p, e)| ErrorRow {
            path: p.display().to_string(),
            error: e.clone(),
        })
        .collect();
    let p = out.join("extract-errors.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::file(&p, e))?;
    w.write_record(["path", "error"])?;
    for r in &errors {
        w.write_record([&r.path, &r.error])?;
    }
    w.flush()?;
    println!(
        "{} segments from {} recordings; cache read {} written {}; {} errors",
        ds.segments.len(),
        ds.records.len() - errors.len(),
        ds.cache.files_read,
        ds.cache.files_written,
        errors.len()
    );
    match errors.first() {
        Some(e) => Err(Error::File {
            path: e.path.clone().into(),
            msg: format!("{} (and {} more, see {})", e.error, errors.len() - 1, p.display()),
        }),
        None => Ok(()),
    }
}

fn vae_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("vae-seed{seed}"))
}

fn demonet_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("demonet-seed{seed}"))
}

fn train_vae(cfg: &Config, out: &Path, ds: &Dataset, seed: u64) -> Result<Vae> {
    let dir = vae_dir(out, seed);
    let s1 = train_stage1(ds, cfg, seed, Some(&dir))?;
    s1.report.write_jsonl(&out.join(format!("train-vae-seed{seed}.jsonl")))?;
    println!("seed {seed}: VAE best epoch {} saved to {}", s1.best_epoch, dir.display());
    Ok(s1.vae)
}

fn train(cfg: &Config, out: &Path, seeds: &[u64], checkpoint: Option<&PathBuf>) -> Result<()> {
    let given = checkpoint.map(|p| require_dir("--checkpoint", Some(p))).transpose()?;
    let ds = training_data(cfg)?;
    let test = ds.indices(Split::Test);
    let sweep = seed_sweep(seeds, |seed| {
        let mut vae = match &given {
            Some(dir) => load_any_vae(dir)?,
            None if vae_dir(out, seed).join("manifest.json").is_file() => load_vae(&vae_dir(out, seed))?.0,
            None => train_vae(cfg, out, &ds, seed)?,
        };
        let mut s2 = train_stage2(&ds, &mut vae, cfg, seed, Some(&demonet_dir(out, seed)))?;
        s2.report.write_jsonl(&out.join(format!("train-seed{seed}.jsonl")))?;
        let p = predict(&mut s2.model, &s2.inputs, &test)?;
        let conf = Confusion::new(&ds.classes, &p);
        conf.write_csv(&out.join(format!("confusion-seed{seed}.csv")))?;
        println!("seed {seed}: best epoch {}, test accuracy {:.4}", s2.best_epoch, conf.accuracy());
        Ok(conf.accuracy())
    })?;
    sweep.write_csv(&out.join("seed-sweep.csv"))?;
    println!("test accuracy {}", sweep.summary());
    Ok(())
}

/// A VAE checkpoint directory, or the one embedded in a classifier checkpoint.
fn load_any_vae(dir: &Path) -> Result<Vae> {
    let m = read_manifest(dir)?;
    Ok(if m.kind == "demonet" {
        load_vae(&embedded_vae(dir))?.0
    } else {
        load_vae(dir)?.0
    })
}

fn check_classes(ds: &Dataset, extra: &serde_json::Value) -> Result<()> {
    if let Some(c) = extra.get("classes") {
        let saved: Vec<String> = serde_json::from_value(c.clone())?;
        if saved != ds.classes {
            return Err(Error::Config(format!(
                "checkpoint classes {saved:?} differ from manifest classes {:?}",
                ds.classes
            )));
        }
    }
    Ok(())
}

fn eval(cfg: &Config, out: &Path, checkpoint: Option<&PathBuf>) -> Result<()> {
    let dir = require_dir("--checkpoint", checkpoint)?;
    let (mut model, m, mut vae, _) = load_demonet(&dir)?;
    let ds = training_data(cfg)?;
    check_classes(&ds, &m.extra)?;
    let inputs = ClassifierInputs::new(&ds, &mut vae)?;
    let p = predict(&mut model, &inputs, &ds.indices(Split::Test))?;
    let conf = Confusion::new(&ds.classes, &p);
    conf.write_csv(&out.join("confusion.csv"))?;
    println!("test accuracy {:.4} over {} segments", conf.accuracy(), p.indices.len());
    Ok(())
}

fn report(cfg: &Config, out: &Path, kind: ReportKind, checkpoint: Option<&PathBuf>) -> Result<()> {
    let dir = require_dir("--checkpoint", checkpoint)?;
    let ds = training_data(cfg)?;
    match kind {
        ReportKind::Cosine => {
            let mut vae = load_any_vae(&dir)?;
            let r = cosine_similarity_report(&ds, &mut vae, &[Split::Test])?;
            let p = out.join("report-cosine.csv");
            r.write_csv(&p)?;
            let (raw, rec) = r.means();
            println!("mean cosine similarity: raw {raw:.4}, reconstructed {rec:.4} ({} recordings)", r.rows.len());
        }
        ReportKind::Routing => {
            let (mut model, m, mut vae, _) = load_demonet(&dir)?;
            check_classes(&ds, &m.extra)?;
            let inputs = ClassifierInputs::new(&ds, &mut vae)?;
            let p = predict(&mut model, &inputs, &ds.indices(Split::Test))?;
            let r = RoutingReport::new(&ds.classes, model.net.cfg.n_experts, &p);
            r.write_csv(&out.join("report-routing.csv"))?;
            println!("segments per expert: {:?}", r.expert_totals());
        }
    }
    Ok(())
}

/// Runs a parsed command; the environment is passed in for testability.
pub fn run(cli: Cli, cache_env: Option<String>, threads_env: Option<String>) -> Result<()> {
    let threads = thread_count(threads_env)?;
    let cfg = effective_config(cli.command.common(), cache_env)?;
    if let Some(n) = threads {
        // Fails only if a pool was already installed in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = prepare_out(&cfg)?;
    let seeds = |s: &Option<Vec<u64>>| s.clone().unwrap_or_else(|| cfg.train.seeds.clone());
    match &cli.command {
        Command::Synth { .. } => {
            let synth = cfg
                .synth
                .as_ref()
                .ok_or_else(|| Error::Config("the config has no [synth] section".into()))?;
            let m = generate(synth, &cfg.io.manifest)?;
            println!("{} recordings written; manifest {}", m.records.len(), cfg.io.manifest.display());
            Ok(())
        }
        Command::Extract { feature, .. } => extract(&cfg, &out, *feature),
        Command::TrainVae { seeds: s, .. } => {
            let ds = training_data(&cfg)?;
            for seed in seeds(s) {
                train_vae(&cfg, &out, &ds, seed)?;
            }
            Ok(())
        }
        Command::Train { seeds: s, checkpoint, .. } => train(&cfg, &out, &seeds(s), checkpoint.as_ref()),
        Command::Eval { checkpoint, .. } => eval(&cfg, &out, checkpoint.as_ref()),
        Command::Report { kind, checkpoint, .. } => report(&cfg, &out, *kind, checkpoint.as_ref()),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, std::env::var(CACHE_ENV).ok(), std::env::var(THREADS_ENV).ok()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

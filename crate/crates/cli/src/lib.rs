//! Command implementations behind the `mr2pet` binary.
//!
//! Every command writes a `manifest.json` into its output directory with the
//! resolved configuration, the seed, the command arguments and the artifact
//! list, so a run can be repeated from the manifest alone.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mr2pet::checkpoint::Archive;
use mr2pet::config::RunConfig;
use mr2pet::metrics::{histogram, HistogramReport, MetricsReport, PairMetrics};
use mr2pet::synth::synth_pair;
use mr2pet::tokenizer::plan_mask;
use mr2pet::train::{
    check_data, evaluate, generate, generate_restored, loss_csv, pair_sequence, prepare_all, train_step,
    PreparedPair, TrainState,
};
use mr2pet::volume::{load_volume, save_volume};
use mr2pet::{Error, PairSample, Volume};

pub mod plot;

/// Process exit codes. Stable; documented in the README.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const MISSING_DATA: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const CHECKPOINT: u8 = 7;
}

/// An error carrying the exit code it should terminate the process with.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

fn coded(code: u8, message: impl Into<String>) -> anyhow::Error {
    Coded {
        code,
        message: message.into(),
    }
    .into()
}

/// Exit code for an error chain: an explicit [`Coded`] wins, then the core
/// error kind, then I/O.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => exit::CONFIG,
                Error::Io(_) => exit::IO,
                Error::NoData => exit::MISSING_DATA,
                Error::Diverged { .. } | Error::NonFiniteLoss { .. } => exit::DIVERGED,
                Error::CheckpointMismatch(_) | Error::VersionMismatch { .. } => exit::CHECKPOINT,
                Error::BadMagic { what: "checkpoint" } => exit::CHECKPOINT,
                _ => exit::OTHER,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::OTHER
}

#[derive(Debug, Parser)]
#[command(name = "mr2pet", version, about = "MRI to PET synthesis: data, training, evaluation")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, env = "MR2PET_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic MRI/PET pairs.
    SynthData(SynthArgs),
    /// Train the generator against the transformer discriminator.
    Train(TrainArgs),
    /// Metrics, histograms and plots of a checkpoint on a dataset.
    Evaluate(EvalArgs),
    /// Intensity histogram of the PET volumes in a dataset.
    Hist(HistArgs),
    /// Print a pair's token sequence, one id per line.
    DumpTokens(DumpArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, env = "MR2PET_OUT")]
    pub out: PathBuf,
    #[arg(long, short, default_value_t = 4, env = "MR2PET_N")]
    pub n: usize,
    /// Dataset seed (overrides `data.seed`).
    #[arg(long, env = "MR2PET_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long, env = "MR2PET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "MR2PET_OUT")]
    pub out: PathBuf,
    /// Training seed (overrides `train.seed`).
    #[arg(long, env = "MR2PET_SEED")]
    pub seed: Option<u64>,
    /// Total steps (overrides `train.total_steps`).
    #[arg(long, env = "MR2PET_STEPS")]
    pub steps: Option<u64>,
    /// Continue from a training checkpoint; its stored configuration is used
    /// with these flags applied on top.
    #[arg(long, env = "MR2PET_RESUME")]
    pub resume: Option<PathBuf>,
    #[arg(long, env = "MR2PET_LAMBDA_NSP")]
    pub lambda_nsp: Option<f64>,
    #[arg(long, env = "MR2PET_LAMBDA_MLM")]
    pub lambda_mlm: Option<f64>,
    #[arg(long, env = "MR2PET_LAMBDA_L1")]
    pub lambda_l1: Option<f64>,
    #[arg(long, env = "MR2PET_USE_CNN_D")]
    pub use_cnn_d: bool,
    /// Progress line every N steps on stderr (0 = silent).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, env = "MR2PET_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "MR2PET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "MR2PET_OUT")]
    pub out: PathBuf,
    /// Score the real PET against itself (no checkpoint needed).
    #[arg(long)]
    pub sanity: bool,
    #[arg(long, default_value_t = 110)]
    pub bins: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct HistArgs {
    #[arg(long, env = "MR2PET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "MR2PET_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 110)]
    pub bins: usize,
    /// Histogram range; defaults to `data.pet_range`.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct DumpArgs {
    #[arg(long, env = "MR2PET_DATA")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Use the PET generated by this checkpoint instead of the real one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Apply a seeded mask plan.
    #[arg(long)]
    pub mask: bool,
    #[arg(long, default_value_t = 0, env = "MR2PET_SEED")]
    pub seed: u64,
    /// Output file (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub mri: String,
    pub pet: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Resolved command-line arguments.
    pub args: serde_json::Value,
    /// Files written, relative to the manifest's directory.
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairEntry>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: &RunConfig, args: &impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: config.clone(),
            args: serde_json::to_value(args)?,
            artifacts: Vec::new(),
            pairs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        })
    }

    fn finish(mut self, dir: &Path) -> anyhow::Result<()> {
        self.finished_unix = unix_now();
        write(dir.join(MANIFEST), serde_json::to_string_pretty(&self)?)
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| coded(exit::MISSING_DATA, format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub const MANIFEST: &str = "manifest.json";

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| coded(exit::IO, format!("writing {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| coded(exit::IO, format!("creating {}: {e}", dir.display())))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| coded(exit::CONFIG, format!("{}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::SynthData(a) => synth_data(config, &a),
        Command::Train(a) => train(config, &a),
        Command::Evaluate(a) => evaluate_cmd(config, &a),
        Command::Hist(a) => hist(config, &a),
        Command::DumpTokens(a) => dump_tokens(&a),
    }
}

pub fn synth_data(config: Option<&Path>, a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("synth-data", cfg.data.seed, &cfg, a)?;
    for i in 0..a.n {
        let pair = synth_pair(cfg.data.sample_seed(i as u64), &cfg.data)?;
        let entry = PairEntry {
            id: pair.id.clone(),
            mri: format!("pair_{i:04}.mri.vol"),
            pet: format!("pair_{i:04}.pet.vol"),
        };
        save_volume(a.out.join(&entry.mri), &pair.mri).with_context(|| entry.mri.clone())?;
        save_volume(a.out.join(&entry.pet), &pair.pet).with_context(|| entry.pet.clone())?;
        m.artifacts.extend([entry.mri.clone(), entry.pet.clone()]);
        m.pairs.push(entry);
    }
    m.finish(&a.out)
}

/// Loads the pairs listed in a dataset manifest.
pub fn load_dataset(dir: &Path) -> anyhow::Result<Vec<PairSample>> {
    let m = RunManifest::load(dir)?;
    let load = |name: &str| -> anyhow::Result<Volume> {
        let path = dir.join(name);
        match load_volume(&path) {
            Ok(v) => Ok(v),
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(coded(exit::MISSING_DATA, format!("missing {}", path.display())))
            }
            Err(e) => Err(coded(exit::IO, format!("{}: {e}", path.display()))),
        }
    };
    m.pairs
        .iter()
        .map(|e| Ok(PairSample::new(e.id.clone(), load(&e.mri)?, load(&e.pet)?)?))
        .collect()
}

fn prepared(dir: &Path) -> anyhow::Result<(Vec<PairSample>, Vec<PreparedPair<f32>>)> {
    let pairs = load_dataset(dir)?;
    if pairs.is_empty() {
        return Err(coded(exit::MISSING_DATA, format!("{} holds no pairs", dir.display())));
    }
    let prep = prepare_all(&pairs)?;
    Ok((pairs, prep))
}

/// Training checkpoint plus the run configuration stored inside it.
pub fn load_checkpoint(path: &Path) -> anyhow::Result<(RunConfig, TrainState<f32>)> {
    let archive = Archive::<f32>::load(path).map_err(|e| match e {
        Error::Io(io) => coded(exit::IO, format!("{}: {io}", path.display())),
        e => coded(exit::CHECKPOINT, format!("{}: {e}", path.display())),
    })?;
    let cfg: RunConfig = serde_json::from_value(archive.meta["run"].clone())
        .map_err(|e| coded(exit::CHECKPOINT, format!("{}: stored config: {e}", path.display())))?;
    let models = cfg.build_models()?;
    let state = TrainState::from_archive(&archive, models, cfg.train.adam)
        .with_context(|| format!("restoring {}", path.display()))?;
    Ok((cfg, state))
}

fn save_checkpoint(path: &Path, state: &TrainState<f32>, cfg: &RunConfig) -> anyhow::Result<()> {
    let bytes = state.to_archive(serde_json::to_value(cfg)?).encode()?;
    write(path, bytes)
}

pub fn train(config: Option<&Path>, a: &TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, resumed) = match &a.resume {
        Some(p) => {
            let (cfg, state) = load_checkpoint(p)?;
            (cfg, Some(state))
        }
        None => (load_config(config)?, None),
    };
    let t = &mut cfg.train;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(n) = a.steps {
        t.total_steps = n;
    }
    if let Some(v) = a.lambda_nsp {
        t.weights.lambda_nsp = v;
    }
    if let Some(v) = a.lambda_mlm {
        t.weights.lambda_mlm = v;
    }
    if let Some(v) = a.lambda_l1 {
        t.weights.lambda_l1 = v;
    }
    if a.use_cnn_d {
        t.use_cnn_d = true;
    }
    cfg.validate()?;

    let mut state = match resumed {
        Some(s) => {
            if s.models.cnn_d.is_some() != cfg.train.use_cnn_d {
                return Err(coded(exit::CHECKPOINT, "--use-cnn-d differs from the checkpoint"));
            }
            s
        }
        None => TrainState::new(cfg.build_models()?, cfg.train.adam),
    };
    let (pairs, data) = prepared(&a.data)?;
    check_data(&state.models, &data).map_err(|e| coded(exit::CONFIG, format!("data vs model: {e}")))?;

    create_dir(&a.out)?;
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut m = RunManifest::new("train", cfg.train.seed, &cfg, a)?;
    write(a.out.join("config.toml"), cfg.to_toml_string()?)?;
    m.artifacts.push("config.toml".into());

    let tc = cfg.train.clone();
    let mut outcome = Ok(());
    while state.step < tc.total_steps {
        match train_step(&mut state, &data, &tc) {
            Ok(r) => {
                if a.log_every > 0 && (r.step == 1 || r.step % a.log_every == 0) {
                    eprintln!(
                        "step {:>5}  lr {:.2e}  g {:.4} (nsp {:.4} mlm {:.4} l1 {:.4})  d_nsp {:.4} d_mlm {:.4}",
                        r.step, r.lr, r.g_total, r.g_nsp, r.g_mlm, r.g_l1, r.d_nsp, r.d_mlm
                    );
                }
            }
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
        if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
            let name = format!("checkpoints/step_{:06}.ckpt", state.step);
            save_checkpoint(&a.out.join(&name), &state, &cfg)?;
            m.artifacts.push(name);
        }
    }
    // the loss log is written even when training aborts
    write(a.out.join("loss.csv"), loss_csv(&state.history))?;
    m.artifacts.push("loss.csv".into());
    if let Err(e) = outcome {
        m.finish(&a.out)?;
        return Err(e.into());
    }
    save_checkpoint(&a.out.join("checkpoints/final.ckpt"), &state, &cfg)?;
    m.artifacts.push("checkpoints/final.ckpt".into());

    let report = evaluate(&state.models.generator, &data)?;
    write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    m.artifacts.push("metrics.json".into());
    eprintln!(
        "trained {} steps on {} pairs: psnr {:.3} dB  ssim {:.4}  rmse {:.4}",
        state.step,
        pairs.len(),
        report.psnr,
        report.ssim,
        report.rmse
    );
    m.finish(&a.out)
}

/// Distribution summary of a set of volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub max: f64,
    pub frac_abs_below_1: f64,
    pub voxels: u64,
}

impl Distribution {
    fn of(vols: &[Volume]) -> Self {
        let mut d = Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            frac_abs_below_1: 0.0,
            voxels: 0,
        };
        let mut small = 0u64;
        for v in vols.iter().flat_map(|v| v.values()) {
            let v = *v as f64;
            d.min = d.min.min(v);
            d.max = d.max.max(v);
            small += u64::from(v.abs() < 1.0);
            d.voxels += 1;
        }
        d.frac_abs_below_1 = small as f64 / d.voxels.max(1) as f64;
        d
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub real: Distribution,
    pub generated: Distribution,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramPair {
    pub real: HistogramReport,
    pub generated: HistogramReport,
}

fn pooled_histogram(vols: &[Volume], bins: usize, range: (f64, f64)) -> anyhow::Result<HistogramReport> {
    let mut acc: Option<HistogramReport> = None;
    for v in vols {
        let h = histogram(v.values(), bins, range)?;
        match &mut acc {
            Some(a) => a.merge(&h)?,
            None => acc = Some(h),
        }
    }
    acc.ok_or_else(|| coded(exit::MISSING_DATA, "no volumes to histogram"))
}

pub fn evaluate_cmd(config: Option<&Path>, a: &EvalArgs) -> anyhow::Result<()> {
    let (cfg, generator) = match (&a.checkpoint, a.sanity) {
        (_, true) => (load_config(config)?, None),
        (Some(p), false) => {
            let (cfg, state) = load_checkpoint(p)?;
            if let Some(c) = config {
                let given = load_config(Some(c))?;
                if given.generator != cfg.generator || given.bert != cfg.bert {
                    return Err(coded(exit::CHECKPOINT, "--config model sections differ from the checkpoint"));
                }
            }
            (cfg, Some(state.models.generator))
        }
        (None, false) => return Err(coded(exit::USAGE, "evaluate needs --checkpoint or --sanity")),
    };
    let (pairs, data) = prepared(&a.data)?;
    let mut real = Vec::with_capacity(pairs.len());
    let mut gen = Vec::with_capacity(pairs.len());
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (pair, prep) in pairs.iter().zip(&data) {
        let g = match &generator {
            Some(model) => {
                if prep.pet.shape() != model.config.output_dims || prep.mri.shape()[1..] != model.config.input_dims {
                    return Err(coded(
                        exit::CHECKPOINT,
                        format!("pair {} does not match the checkpoint's dims", pair.id),
                    ));
                }
                generate_restored(model, prep)?
            }
            None => pair.pet.clone(),
        };
        per_pair.push(PairMetrics::compute(pair.id.clone(), &pair.pet, &g)?);
        real.push(pair.pet.clone());
        gen.push(g);
    }
    let report = EvalReport {
        metrics: MetricsReport::from_pairs(per_pair)?,
        real: Distribution::of(&real),
        generated: Distribution::of(&gen),
    };
    let range = (cfg.data.pet_range[0] as f64, cfg.data.pet_range[1] as f64);
    let hists = HistogramPair {
        real: pooled_histogram(&real, a.bins, range)?,
        generated: pooled_histogram(&gen, a.bins, range)?,
    };

    create_dir(&a.out)?;
    let mut m = RunManifest::new("evaluate", cfg.train.seed, &cfg, a)?;
    write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    write(a.out.join("histograms.json"), serde_json::to_string_pretty(&hists)?)?;
    plot::histograms(&[(&hists.real, plot::REAL), (&hists.generated, plot::GENERATED)])
        .save(a.out.join("histograms.png"))
        .map_err(|e| coded(exit::IO, format!("histograms.png: {e}")))?;
    m.artifacts
        .extend(["metrics.json", "histograms.json", "histograms.png"].map(String::from));
    eprintln!(
        "{} pairs: psnr {:.3} dB  ssim {:.4}  rmse {:.4}",
        report.metrics.n_pairs, report.metrics.psnr, report.metrics.ssim, report.metrics.rmse
    );
    m.finish(&a.out)
}

pub fn hist(config: Option<&Path>, a: &HistArgs) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let range = match a.range.as_deref() {
        Some([lo, hi]) => (*lo, *hi),
        Some(_) => return Err(coded(exit::USAGE, "--range takes two values")),
        None => (cfg.data.pet_range[0] as f64, cfg.data.pet_range[1] as f64),
    };
    let pets: Vec<Volume> = load_dataset(&a.data)?.into_iter().map(|p| p.pet).collect();
    let h = pooled_histogram(&pets, a.bins, range)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("hist", cfg.data.seed, &cfg, a)?;
    write(a.out.join("histogram.json"), serde_json::to_string_pretty(&h)?)?;
    plot::histograms(&[(&h, plot::REAL)])
        .save(a.out.join("histogram.png"))
        .map_err(|e| coded(exit::IO, format!("histogram.png: {e}")))?;
    m.artifacts.extend(["histogram.json", "histogram.png"].map(String::from));
    m.finish(&a.out)
}

pub fn dump_tokens(a: &DumpArgs) -> anyhow::Result<()> {
    let pairs = load_dataset(&a.data)?;
    let pair = pairs
        .get(a.index)
        .ok_or_else(|| coded(exit::MISSING_DATA, format!("no pair {} in {}", a.index, a.data.display())))?;
    let prep = PreparedPair::<f32>::new(pair)?;
    let seq = match &a.checkpoint {
        Some(p) => {
            let (_, state) = load_checkpoint(p)?;
            check_data(&state.models, std::slice::from_ref(&prep))
                .map_err(|e| coded(exit::CHECKPOINT, e.to_string()))?;
            pair_sequence(&prep, Some(&generate(&state.models.generator, &prep)))?
        }
        None => pair_sequence(&prep, None)?,
    };
    let seq = if a.mask { plan_mask(&seq, a.seed).0 } else { seq };
    let text = seq.to_lines();
    match &a.out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

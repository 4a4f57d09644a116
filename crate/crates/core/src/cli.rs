//! Command-line front end. `main.rs` only forwards to [`main`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapt::{AdaptConfig, Optimizer};
use crate::datagen::SensorProfile;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::metrics::Protocol;
use crate::model::{Arch, ModelConfig};
use crate::pipeline::{self, RunConfig, RunPaths, SampleParams};
use crate::sampler::{SampleMethod, Sigma};
use crate::sensitivity::SensitivityConfig;

#[derive(Parser, Debug)]
#[command(name = "swiftpan", version, about = "Cross-sensor pansharpening adaptation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset for one sensor profile.
    GenData(GenDataArgs),
    /// Train a fresh model on a dataset.
    Pretrain(PretrainArgs),
    /// Select an essence subset of a dataset.
    Sample(SampleArgs),
    /// Score parameter tensors on a subset and write the selection mask.
    Analyze(AnalyzeArgs),
    /// Fine-tune the masked tensors on a subset.
    Adapt(AdaptArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Run the full comparison plus both ablations.
    Reproduce(RunArgs),
    /// MMD² of DA-FPS and random subsets across sampling ratios.
    AblateSampling(AblateSamplingArgs),
    /// Fixed-ratio versus dynamic parameter selection.
    AblateRatio(AblateRatioArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Profile file (`key = value`); overrides `--preset`.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Built-in profile: `source` or `target`.
    #[arg(long, default_value = "source")]
    pub preset: String,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainFlags {
    fn config(&self) -> AdaptConfig {
        AdaptConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "tiny_residual")]
    pub arch: Arch,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.03)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_density: f64,
    /// `auto` or a positive bandwidth.
    #[arg(long, default_value = "auto")]
    pub sigma: Sigma,
    #[arg(long, default_value = "dafps")]
    pub method: SampleMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "subset.txt")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset the subset ids refer to.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub subset: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub microbatches: usize,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.10)]
    pub eta_min: f64,
    #[arg(long, default_value_t = 0.60)]
    pub eta_max: f64,
    #[arg(long, default_value_t = 0.0)]
    pub h_min: f64,
    #[arg(long, default_value_t = 1.5)]
    pub h_max: f64,
    #[arg(long, default_value = "mask.txt")]
    pub out: PathBuf,
    /// Per-tensor statistics CSV; defaults to the mask path with a `.csv` extension.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub subset: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "reduced")]
    pub protocol: Protocol,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
}

/// Shared by the run-level commands: a config file plus per-key overrides.
#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set target-n=256`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut kv = KeyValues::default();
        for item in &self.overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {item}`: expected KEY=VALUE")))?;
            kv.set(k.trim(), v.trim());
        }
        if let Some(seed) = self.seed {
            kv.set("seed", seed);
        }
        if let Some(out) = &self.out {
            kv.set("out", out.display());
        }
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct AblateSamplingArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset to sweep; generated from the config's target profile when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output CSV; defaults to `<out>/ablation_sampling.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Inputs default to the artifacts of a previous run in `<out>`.
#[derive(Args, Debug)]
pub struct AblateRatioArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub subset: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn bands_of(manifest: &Path) -> Result<usize> {
    let first = crate::datagen::read_manifest(manifest)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data(format!("{} lists no scenes", manifest.display())))?;
    Ok(crate::datagen::load_scene(&first)?.bands())
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let profile = match (&a.profile, a.preset.as_str()) {
                (Some(p), _) => SensorProfile::load(p)?,
                (None, "source") => SensorProfile::source(a.bands),
                (None, "target") => SensorProfile::target(a.bands),
                (None, other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
            };
            let manifest = pipeline::gen_data_stage(&profile, a.n, a.size, a.seed, &a.out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain(a) => {
            let bands = pipeline_stage("pretrain", &a.manifest, || bands_of(&a.manifest))?;
            let config = ModelConfig {
                arch: a.arch,
                bands,
                channels: a.channels,
                depth: a.depth,
            };
            pipeline::pretrain_stage(&a.manifest, config, &a.train.config(), &a.out)?;
            println!("{}", a.out.display());
        }
        Command::Sample(a) => {
            let params = SampleParams {
                ratio: a.ratio,
                alpha_density: a.alpha_density,
                sigma: a.sigma,
                method: a.method,
                seed: a.seed,
            };
            let subset = pipeline::sample_stage(&a.manifest, &params, &a.out)?;
            println!("{} scenes -> {}", subset.ids.len(), a.out.display());
        }
        Command::Analyze(a) => {
            let cfg = SensitivityConfig {
                alpha_mag: a.alpha,
                beta_std: a.beta,
                gamma_gdc: a.gamma,
                eta_min: a.eta_min,
                eta_max: a.eta_max,
                h_min: a.h_min,
                h_max: a.h_max,
                microbatches: a.microbatches,
            };
            let stats = a.stats.clone().unwrap_or_else(|| a.out.with_extension("csv"));
            let analysis = pipeline::analyze_stage(&a.model, &a.manifest, &a.subset, &cfg, &a.out, &stats)?;
            let m = &analysis.mask;
            println!(
                "p_select={:.4} H={:.4} scalar_fraction={:.4} tensors={}",
                m.p_select,
                m.sharpness,
                m.scalar_fraction,
                m.selected.len()
            );
        }
        Command::Adapt(a) => {
            pipeline::adapt_stage(&a.model, &a.manifest, &a.mask, &a.subset, &a.train.config(), &a.out)?;
            println!("{}", a.out.display());
        }
        Command::Eval(a) => {
            let report = pipeline::eval_stage(&a.model, &a.manifest, a.protocol, &a.out)?;
            for (name, (mean, std)) in report.metric_names().iter().zip(report.aggregate()) {
                println!("{name}: {mean:.6} ± {std:.6}");
            }
        }
        Command::Reproduce(a) => {
            let cfg = a.resolve()?;
            let r = pipeline::reproduce(&cfg)?;
            print!("{}", pipeline::summary_csv(&r.pipeline.arms));
            print!("{}", pipeline::timing_csv(&r.pipeline.arms));
            println!("artifacts in {}", cfg.out.display());
        }
        Command::AblateSampling(a) => {
            let cfg = a.run.resolve()?;
            let paths = RunPaths::new(&cfg.out);
            let manifest = match a.manifest {
                Some(m) => m,
                None => pipeline::generate_target(&cfg, &paths.data("target"))?,
            };
            let csv = a.csv.unwrap_or_else(|| paths.file("ablation_sampling.csv"));
            let rows = pipeline::ablation_sampling(&cfg, &manifest, &csv)?;
            print!("{}", pipeline::sampling_csv(&rows));
        }
        Command::AblateRatio(a) => {
            let cfg = a.run.resolve()?;
            let paths = RunPaths::new(&cfg.out);
            let rows = pipeline::ablation_ratio(
                &cfg,
                &a.model.unwrap_or_else(|| paths.model("pretrained")),
                &a.manifest.unwrap_or_else(|| paths.manifest("target")),
                &a.subset.unwrap_or_else(|| paths.file("subset.txt")),
                &a.test_manifest.unwrap_or_else(|| paths.manifest("target_test")),
                &a.csv.unwrap_or_else(|| paths.file("ablation_ratio.csv")),
            )?;
            print!("{}", pipeline::ratio_csv(&rows));
        }
    }
    Ok(())
}

fn pipeline_stage<T>(stage: &'static str, path: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage,
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Parse arguments, run, and return the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

//! File-backed pipeline stages, the end-to-end comparison run and the two
//! ablation sweeps.
//!
//! Every stage reads its inputs from disk and writes its outputs to disk, so
//! any stage can be rerun from the artifacts of the previous one. Timing is
//! kept out of the comparison tables: `summary.csv` and the ablation tables
//! are byte-stable for a fixed seed, and wall/CPU seconds go to separate
//! `*timing.csv` files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adapt::{adapt, full_retrain, mean_l1, pretrain, trace_csv, AdaptConfig, Optimizer};
use crate::datagen::{load_dataset, make_dataset, ScenePair, SensorProfile};
use crate::error::{Error, Result};
use crate::kv::{join, KeyValues};
use crate::metrics::{evaluate, Protocol, FULL_METRICS, REDUCED_METRICS};
use crate::model::{prepare_all, Arch, Model, ModelConfig, Prepared};
use crate::sampler::{
    compute_density, da_fps, featurize, random_sample, read_subset, write_subset, DensityLabeledSet,
    EssenceSubset, SampleMethod, Sigma,
};
use crate::seed::{derive_seed, stream};
use crate::sensitivity::{
    analyze, fixed_ratio_mask, random_mask, read_mask, stats_csv, write_mask, Analysis, SelectionMask,
    SensitivityConfig,
};

/// Wall and process CPU seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub wall_s: f64,
    pub cpu_s: f64,
}

impl std::ops::Add for Timing {
    type Output = Timing;

    fn add(self, o: Timing) -> Timing {
        Timing {
            wall_s: self.wall_s + o.wall_s,
            cpu_s: self.cpu_s + o.cpu_s,
        }
    }
}

fn cpu_seconds() -> f64 {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage fills the struct it is handed; RUSAGE_SELF is always valid.
    let usage = unsafe {
        if libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) != 0 {
            return 0.0;
        }
        usage.assume_init()
    };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(usage.ru_utime) + tv(usage.ru_stime)
}

/// Run `f` and report how long it took.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Timing)> {
    let (wall, cpu) = (Instant::now(), cpu_seconds());
    let out = f()?;
    Ok((
        out,
        Timing {
            wall_s: wall.elapsed().as_secs_f64(),
            cpu_s: cpu_seconds() - cpu,
        },
    ))
}

fn in_stage<T>(stage: &'static str, path: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            path: path.to_path_buf(),
            source: Box::new(e),
        },
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input artifact is missing"),
        ))
    }
}

/// Every knob of a run. Keys in the `key = value` file use the same
/// spelling as the command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub source_n: usize,
    pub target_n: usize,
    pub test_n: usize,
    pub source_profile: Option<PathBuf>,
    pub target_profile: Option<PathBuf>,
    pub model: ModelConfig,
    pub pretrain: AdaptConfig,
    pub adapt: AdaptConfig,
    pub ratio: f64,
    pub alpha_density: f64,
    pub sigma: Sigma,
    pub method: SampleMethod,
    pub sensitivity: SensitivityConfig,
    pub sweep_ratios: Vec<f64>,
    pub sweep_runs: usize,
    pub fixed_ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("run"),
            seed: 0,
            size: 32,
            source_n: 128,
            target_n: 512,
            test_n: 64,
            source_profile: None,
            target_profile: None,
            model: ModelConfig::default(),
            pretrain: AdaptConfig {
                epochs: 60,
                ..AdaptConfig::default()
            },
            adapt: AdaptConfig::default(),
            ratio: 0.03,
            alpha_density: 0.5,
            sigma: Sigma::Auto,
            method: SampleMethod::DaFps,
            sensitivity: SensitivityConfig::default(),
            sweep_ratios: vec![0.01, 0.02, 0.03, 0.05, 0.10],
            sweep_runs: 20,
            fixed_ratios: (1..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

/// Recognized configuration keys.
pub const CONFIG_KEYS: &[&str] = &[
    "out", "seed", "size", "bands", "source-n", "target-n", "test-n", "source-profile",
    "target-profile", "arch", "channels", "depth", "pretrain-epochs", "pretrain-lr", "epochs", "lr",
    "batch", "optimizer", "ratio", "alpha-density", "sigma", "method", "microbatches", "alpha",
    "beta", "gamma", "eta-min", "eta-max", "h-min", "h-max", "sweep-ratios", "sweep-runs",
    "fixed-ratios",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&KeyValues::load(path)?)?;
        Ok(cfg)
    }

    /// Override fields with whatever keys `kv` carries.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(bad) = kv.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key `{bad}`")));
        }
        let c = self;
        c.out = kv.get_or("out", c.out.clone())?;
        c.seed = kv.get_or("seed", c.seed)?;
        c.size = kv.get_or("size", c.size)?;
        c.model.bands = kv.get_or("bands", c.model.bands)?;
        c.source_n = kv.get_or("source-n", c.source_n)?;
        c.target_n = kv.get_or("target-n", c.target_n)?;
        c.test_n = kv.get_or("test-n", c.test_n)?;
        if let Some(p) = kv.get("source-profile")? {
            c.source_profile = Some(p);
        }
        if let Some(p) = kv.get("target-profile")? {
            c.target_profile = Some(p);
        }
        c.model.arch = kv.get_or::<Arch>("arch", c.model.arch)?;
        c.model.channels = kv.get_or("channels", c.model.channels)?;
        c.model.depth = kv.get_or("depth", c.model.depth)?;
        c.pretrain.epochs = kv.get_or("pretrain-epochs", c.pretrain.epochs)?;
        c.pretrain.lr = kv.get_or("pretrain-lr", c.pretrain.lr)?;
        c.adapt.epochs = kv.get_or("epochs", c.adapt.epochs)?;
        c.adapt.lr = kv.get_or("lr", c.adapt.lr)?;
        let batch = kv.get_or("batch", c.adapt.batch)?;
        let optimizer = kv.get_or::<Optimizer>("optimizer", c.adapt.optimizer)?;
        for t in [&mut c.pretrain, &mut c.adapt] {
            t.batch = batch;
            t.optimizer = optimizer;
        }
        c.ratio = kv.get_or("ratio", c.ratio)?;
        c.alpha_density = kv.get_or("alpha-density", c.alpha_density)?;
        c.sigma = kv.get_or("sigma", c.sigma)?;
        c.method = kv.get_or("method", c.method)?;
        let s = &mut c.sensitivity;
        s.microbatches = kv.get_or("microbatches", s.microbatches)?;
        s.alpha_mag = kv.get_or("alpha", s.alpha_mag)?;
        s.beta_std = kv.get_or("beta", s.beta_std)?;
        s.gamma_gdc = kv.get_or("gamma", s.gamma_gdc)?;
        s.eta_min = kv.get_or("eta-min", s.eta_min)?;
        s.eta_max = kv.get_or("eta-max", s.eta_max)?;
        s.h_min = kv.get_or("h-min", s.h_min)?;
        s.h_max = kv.get_or("h-max", s.h_max)?;
        if let Some(v) = kv.get_list("sweep-ratios")? {
            c.sweep_ratios = v;
        }
        c.sweep_runs = kv.get_or("sweep-runs", c.sweep_runs)?;
        if let Some(v) = kv.get_list("fixed-ratios")? {
            c.fixed_ratios = v;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("out", self.out.display());
        kv.set("seed", self.seed);
        kv.set("size", self.size);
        kv.set("bands", self.model.bands);
        kv.set("source-n", self.source_n);
        kv.set("target-n", self.target_n);
        kv.set("test-n", self.test_n);
        if let Some(p) = &self.source_profile {
            kv.set("source-profile", p.display());
        }
        if let Some(p) = &self.target_profile {
            kv.set("target-profile", p.display());
        }
        kv.set("arch", self.model.arch);
        kv.set("channels", self.model.channels);
        kv.set("depth", self.model.depth);
        kv.set("pretrain-epochs", self.pretrain.epochs);
        kv.set("pretrain-lr", self.pretrain.lr);
        kv.set("epochs", self.adapt.epochs);
        kv.set("lr", self.adapt.lr);
        kv.set("batch", self.adapt.batch);
        kv.set("optimizer", self.adapt.optimizer);
        kv.set("ratio", self.ratio);
        kv.set("alpha-density", self.alpha_density);
        kv.set("sigma", self.sigma);
        kv.set("method", self.method);
        let s = &self.sensitivity;
        kv.set("microbatches", s.microbatches);
        kv.set("alpha", s.alpha_mag);
        kv.set("beta", s.beta_std);
        kv.set("gamma", s.gamma_gdc);
        kv.set("eta-min", s.eta_min);
        kv.set("eta-max", s.eta_max);
        kv.set("h-min", s.h_min);
        kv.set("h-max", s.h_max);
        kv.set("sweep-ratios", join(&self.sweep_ratios));
        kv.set("sweep-runs", self.sweep_runs);
        kv.set("fixed-ratios", join(&self.fixed_ratios));
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.sensitivity.validate()?;
        if self.size == 0 || self.source_n == 0 || self.target_n < 2 || self.test_n == 0 {
            return Err(Error::Config("size and dataset sizes must be positive (target-n >= 2)".into()));
        }
        if self.sweep_runs == 0 {
            return Err(Error::Config("sweep-runs must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed of one pipeline stage, derived from the run seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, &[stream::RUN, stage])
    }

    pub fn source_profile(&self) -> Result<SensorProfile> {
        self.profile(self.source_profile.as_deref(), SensorProfile::source)
    }

    pub fn target_profile(&self) -> Result<SensorProfile> {
        self.profile(self.target_profile.as_deref(), SensorProfile::target)
    }

    fn profile(&self, path: Option<&Path>, preset: fn(usize) -> SensorProfile) -> Result<SensorProfile> {
        let p = match path {
            Some(p) => SensorProfile::load(p)?,
            None => preset(self.model.bands),
        };
        if p.bands != self.model.bands {
            return Err(Error::Config(format!(
                "profile `{}` has {} bands, model expects {}",
                p.name, p.bands, self.model.bands
            )));
        }
        Ok(p)
    }

    /// Pretraining settings with the run's pretraining seed.
    pub fn pretrain_cfg(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.stage_seed(stage::PRETRAIN),
            ..self.pretrain
        }
    }

    /// Adaptation settings with the run's adaptation seed.
    pub fn adapt_cfg(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.stage_seed(stage::ADAPT),
            ..self.adapt
        }
    }
}

/// Stage coordinates for [`RunConfig::stage_seed`].
pub mod stage {
    pub const SOURCE: u64 = 0;
    pub const TARGET: u64 = 1;
    pub const TEST: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const ADAPT: u64 = 6;
    pub const SWEEP: u64 = 7;
}

// ---------------------------------------------------------------------------
// Stages

pub fn gen_data_stage(profile: &SensorProfile, n: usize, size: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    in_stage("gen-data", out, || Ok(make_dataset(profile, n, size, seed, out)?.1))
}

/// The run's target-domain pool, the one sampled from.
pub fn generate_target(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    gen_data_stage(&cfg.target_profile()?, cfg.target_n, cfg.size, cfg.stage_seed(stage::TARGET), out)
}

/// Train a fresh model on a dataset; writes the model and `trace.csv`.
pub fn pretrain_stage(manifest: &Path, config: ModelConfig, cfg: &AdaptConfig, out: &Path) -> Result<Model> {
    in_stage("pretrain", manifest, || {
        require(manifest)?;
        let scenes = prepare_all(&load_dataset(manifest)?)?;
        let trained = pretrain(config, &scenes, cfg)?;
        trained.model.save(out)?;
        write_file(&out.join("trace.csv"), &trace_csv(&trained.trace))?;
        Ok(trained.model)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub ratio: f64,
    pub alpha_density: f64,
    pub sigma: Sigma,
    pub method: SampleMethod,
    pub seed: u64,
}

/// Draw a subset from an in-memory scene set.
pub fn sample_scenes(scenes: &[ScenePair], p: &SampleParams) -> Result<EssenceSubset> {
    match p.method {
        SampleMethod::DaFps => {
            let labeled = compute_density(featurize(scenes)?, p.sigma)?;
            da_fps(&labeled, p.ratio, p.alpha_density)
        }
        SampleMethod::Random => {
            let ids: Vec<usize> = scenes.iter().map(|s| s.id).collect();
            random_sample(&ids, p.ratio, p.seed)
        }
    }
}

pub fn sample_stage(manifest: &Path, p: &SampleParams, out: &Path) -> Result<EssenceSubset> {
    in_stage("sample", manifest, || {
        require(manifest)?;
        let subset = sample_scenes(&load_dataset(manifest)?, p)?;
        write_subset(out, &subset)?;
        Ok(subset)
    })
}

/// Scenes of `manifest` listed in `subset_path`, in subset order.
pub fn load_subset(manifest: &Path, subset_path: &Path) -> Result<Vec<Prepared>> {
    require(manifest)?;
    require(subset_path)?;
    let ids = read_subset(subset_path)?;
    let scenes = load_dataset(manifest)?;
    pick(&scenes, &ids)
}

fn pick(scenes: &[ScenePair], ids: &[usize]) -> Result<Vec<Prepared>> {
    ids.iter()
        .map(|id| {
            let s = scenes
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| Error::Data(format!("subset id {id} is not in the dataset")))?;
            Prepared::new(s)
        })
        .collect()
}

/// Sensitivity analysis; writes the mask and, next to it, a stats CSV.
pub fn analyze_stage(
    model_dir: &Path,
    manifest: &Path,
    subset_path: &Path,
    cfg: &SensitivityConfig,
    out_mask: &Path,
    out_stats: &Path,
) -> Result<Analysis> {
    in_stage("analyze", model_dir, || {
        let model = Model::load(model_dir)?;
        let subset = load_subset(manifest, subset_path)?;
        let analysis = analyze(&model, &subset, cfg)?;
        write_mask(out_mask, &analysis.mask)?;
        write_file(out_stats, &stats_csv(&analysis.stats, &analysis.mask))?;
        Ok(analysis)
    })
}

/// Masked adaptation; writes the adapted model and its `trace.csv`.
pub fn adapt_stage(
    model_dir: &Path,
    manifest: &Path,
    mask_path: &Path,
    subset_path: &Path,
    cfg: &AdaptConfig,
    out: &Path,
) -> Result<Model> {
    in_stage("adapt", model_dir, || {
        let model = Model::load(model_dir)?;
        require(mask_path)?;
        let mask = read_mask(mask_path)?;
        let subset = load_subset(manifest, subset_path)?;
        let outcome = adapt(&model, &mask, &subset, cfg)?;
        outcome.model.save(out)?;
        write_file(&out.join("trace.csv"), &trace_csv(&outcome.trace))?;
        Ok(outcome.model)
    })
}

pub fn eval_stage(model_dir: &Path, manifest: &Path, protocol: Protocol, out: &Path) -> Result<crate::metrics::EvalReport> {
    in_stage("eval", model_dir, || {
        let model = Model::load(model_dir)?;
        require(manifest)?;
        let report = evaluate(&model, &load_dataset(manifest)?, protocol)?;
        write_file(out, &report.to_csv())?;
        Ok(report)
    })
}

// ---------------------------------------------------------------------------
// End-to-end comparison

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Direct,
    Swift,
    RandomMask,
    FullRetrain,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Direct, Arm::Swift, Arm::RandomMask, Arm::FullRetrain];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Direct => "direct",
            Arm::Swift => "swift",
            Arm::RandomMask => "random_mask",
            Arm::FullRetrain => "full_retrain",
        }
    }
}

/// Test-set scores of one model: the reduced metrics, the full-resolution
/// metrics and mean L1 against GT.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub metrics: Vec<f64>,
    pub l1: f64,
}

impl Scores {
    pub fn get(&self, metric: &str) -> Option<f64> {
        summary_metric_names()
            .position(|m| m == metric)
            .map(|k| self.metrics[k])
    }
}

fn summary_metric_names() -> impl Iterator<Item = &'static str> {
    REDUCED_METRICS.iter().chain(FULL_METRICS.iter()).copied()
}

/// Score `model` on held-out scenes; optionally write both reports.
pub fn score_model(model: &Model, test: &[ScenePair], batch: usize, report_prefix: Option<&Path>) -> Result<Scores> {
    let mut metrics = Vec::new();
    for protocol in [Protocol::Reduced, Protocol::Full] {
        let report = evaluate(model, test, protocol)?;
        if let Some(prefix) = report_prefix {
            let path = PathBuf::from(format!("{}_{protocol}.csv", prefix.display()));
            write_file(&path, &report.to_csv())?;
        }
        metrics.extend(report.aggregate().into_iter().map(|(mean, _)| mean));
    }
    Ok(Scores {
        metrics,
        l1: mean_l1(model, &prepare_all(test)?, batch)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub scores: Scores,
    /// Tensors updated / total trainable scalars.
    pub scalar_fraction: f64,
    /// Scene forward/backward passes spent adapting.
    pub scene_passes: usize,
    pub timing: Timing,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub arms: Vec<ArmResult>,
    pub subset: EssenceSubset,
    pub analysis: Analysis,
    pub random_mask: SelectionMask,
    pub total: Timing,
}

impl PipelineResult {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is run")
    }
}

pub fn summary_csv(arms: &[ArmResult]) -> String {
    let mut out = format!(
        "arm,{},target_l1,scalar_fraction,scene_passes\n",
        summary_metric_names().collect::<Vec<_>>().join(",")
    );
    for a in arms {
        let cells: Vec<String> = a.scores.metrics.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            a.arm.name(),
            cells.join(","),
            a.scores.l1,
            a.scalar_fraction,
            a.scene_passes
        );
    }
    out
}

pub fn timing_csv(arms: &[ArmResult]) -> String {
    let mut out = String::from("arm,wall_s,cpu_s\n");
    for a in arms {
        let _ = writeln!(out, "{},{:.3},{:.3}", a.arm.name(), a.timing.wall_s, a.timing.cpu_s);
    }
    out
}

/// Layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }
    pub fn data(&self, which: &str) -> PathBuf {
        self.root.join("data").join(which)
    }
    pub fn manifest(&self, which: &str) -> PathBuf {
        self.data(which).join(crate::datagen::MANIFEST_FILE)
    }
    pub fn model(&self, which: &str) -> PathBuf {
        self.root.join("models").join(which)
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
    pub fn report_prefix(&self, arm: Arm) -> PathBuf {
        self.root.join("reports").join(arm.name())
    }
}

/// gen-data(source) → pretrain → gen-data(target) → sample → analyze →
/// adapt → eval, plus the random-mask and full-retrain comparison arms.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    let start = (Instant::now(), cpu_seconds());
    write_file(&paths.file("config.txt"), &cfg.to_kv().to_text())?;

    let (source_p, target_p) = (cfg.source_profile()?, cfg.target_profile()?);
    let source = gen_data_stage(&source_p, cfg.source_n, cfg.size, cfg.stage_seed(stage::SOURCE), &paths.data("source"))?;
    let pre_dir = paths.model("pretrained");
    log::info!("pretraining on {} source scenes", cfg.source_n);
    pretrain_stage(&source, cfg.model, &cfg.pretrain_cfg(), &pre_dir)?;
    let target = generate_target(cfg, &paths.data("target"))?;
    let test_manifest = gen_data_stage(&target_p, cfg.test_n, cfg.size, cfg.stage_seed(stage::TEST), &paths.data("target_test"))?;
    let test = in_stage("eval", &test_manifest, || load_dataset(&test_manifest))?;

    let sample = SampleParams {
        ratio: cfg.ratio,
        alpha_density: cfg.alpha_density,
        sigma: cfg.sigma,
        method: cfg.method,
        seed: cfg.stage_seed(stage::SAMPLE),
    };
    let (subset_file, mask_file) = (paths.file("subset.txt"), paths.file("mask.txt"));
    let (subset, t_sample) = timed(|| sample_stage(&target, &sample, &subset_file))?;
    log::info!("sampled {} of {} target scenes", subset.ids.len(), cfg.target_n);
    let (analysis, t_analyze) = timed(|| {
        analyze_stage(&pre_dir, &target, &subset_file, &cfg.sensitivity, &mask_file, &paths.file("sensitivity.csv"))
    })?;
    log::info!(
        "selected {} tensors, P_select {:.3}, scalar fraction {:.3}",
        analysis.mask.selected.len(),
        analysis.mask.p_select,
        analysis.mask.scalar_fraction
    );
    let adapt_cfg = cfg.adapt_cfg();
    let (_, t_adapt) = timed(|| adapt_stage(&pre_dir, &target, &mask_file, &subset_file, &adapt_cfg, &paths.model("swift")))?;

    let pretrained = in_stage("eval", &pre_dir, || Model::load(&pre_dir))?;
    let rm = random_mask(pretrained.params(), analysis.mask.scalar_fraction, cfg.stage_seed(stage::MASK))?;
    let rm_file = paths.file("random_mask.txt");
    write_mask(&rm_file, &rm)?;
    let (_, t_random) = timed(|| adapt_stage(&pre_dir, &target, &rm_file, &subset_file, &adapt_cfg, &paths.model("random_mask")))?;

    log::info!("full retrain on {} target scenes", cfg.target_n);
    let full_dir = paths.model("full_retrain");
    let (_, t_full) = timed(|| {
        in_stage("adapt", &target, || {
            let scenes = prepare_all(&load_dataset(&target)?)?;
            let outcome = full_retrain(&pretrained, &scenes, &adapt_cfg)?;
            outcome.model.save(&full_dir)?;
            write_file(&full_dir.join("trace.csv"), &trace_csv(&outcome.trace))
        })
    })?;

    let subset_passes = cfg.adapt.epochs * subset.ids.len();
    let runs = [
        (Arm::Direct, pre_dir.clone(), 0.0, 0, Timing::default()),
        (
            Arm::Swift,
            paths.model("swift"),
            analysis.mask.scalar_fraction,
            subset_passes,
            t_sample + t_analyze + t_adapt,
        ),
        (Arm::RandomMask, paths.model("random_mask"), rm.scalar_fraction, subset_passes, t_random),
        (Arm::FullRetrain, full_dir.clone(), 1.0, cfg.adapt.epochs * cfg.target_n, t_full),
    ];
    let mut arms = Vec::new();
    for (arm, dir, scalar_fraction, scene_passes, timing) in runs {
        let scores = in_stage("eval", &dir, || {
            score_model(&Model::load(&dir)?, &test, cfg.adapt.batch, Some(&paths.report_prefix(arm)))
        })?;
        arms.push(ArmResult {
            arm,
            scores,
            scalar_fraction,
            scene_passes,
            timing,
        });
    }
    write_file(&paths.file("summary.csv"), &summary_csv(&arms))?;
    write_file(&paths.file("timing.csv"), &timing_csv(&arms))?;
    Ok(PipelineResult {
        arms,
        subset,
        analysis,
        random_mask: rm,
        total: Timing {
            wall_s: start.0.elapsed().as_secs_f64(),
            cpu_s: cpu_seconds() - start.1,
        },
    })
}

// ---------------------------------------------------------------------------
// Sampling ablation

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingRow {
    pub ratio: f64,
    pub method: SampleMethod,
    pub n_selected: usize,
    pub mmd2_mean: f64,
    pub mmd2_std: f64,
    pub runs: usize,
}

fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// MMD² of DA-FPS (deterministic, one run) and of `runs` random draws at each ratio.
pub fn sampling_sweep(
    labeled: &DensityLabeledSet,
    ratios: &[f64],
    alpha_density: f64,
    runs: usize,
    seed: u64,
) -> Result<Vec<SamplingRow>> {
    let ids = labeled.ids();
    let mut rows = Vec::new();
    for &r in ratios {
        let sub = da_fps(labeled, r, alpha_density)?;
        rows.push(SamplingRow {
            ratio: r,
            method: SampleMethod::DaFps,
            n_selected: sub.ids.len(),
            mmd2_mean: labeled.mmd_of(&sub.ids)?,
            mmd2_std: 0.0,
            runs: 1,
        });
        let mut vals = Vec::with_capacity(runs);
        let mut n_selected = 0;
        for k in 0..runs {
            let sub = random_sample(&ids, r, derive_seed(seed, &[k as u64]))?;
            n_selected = sub.ids.len();
            vals.push(labeled.mmd_of(&sub.ids)?);
        }
        let (mmd2_mean, mmd2_std) = mean_and_std(&vals);
        rows.push(SamplingRow {
            ratio: r,
            method: SampleMethod::Random,
            n_selected,
            mmd2_mean,
            mmd2_std,
            runs,
        });
    }
    Ok(rows)
}

pub fn sampling_csv(rows: &[SamplingRow]) -> String {
    let mut out = String::from("ratio,method,n_selected,mmd2_mean,mmd2_std,runs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.ratio, r.method, r.n_selected, r.mmd2_mean, r.mmd2_std, r.runs
        );
    }
    out
}

/// Sweep sampling ratios over the scenes of `manifest`; writes `out`.
pub fn ablation_sampling(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Vec<SamplingRow>> {
    in_stage("ablate-sampling", manifest, || {
        cfg.validate()?;
        require(manifest)?;
        let labeled = compute_density(featurize(&load_dataset(manifest)?)?, cfg.sigma)?;
        let rows = sampling_sweep(
            &labeled,
            &cfg.sweep_ratios,
            cfg.alpha_density,
            cfg.sweep_runs,
            cfg.stage_seed(stage::SWEEP),
        )?;
        write_file(out, &sampling_csv(&rows))?;
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// Parameter-ratio ablation

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    /// `fixed_<percent>` or `dynamic`.
    pub label: String,
    pub p_select: f64,
    pub scalar_fraction: f64,
    pub scores: Scores,
    pub timing: Timing,
}

/// Adapt on `subset` with every fixed fraction in `fixed` and with the
/// dynamic mask of `analysis`, scoring each on `test`.
pub fn ratio_sweep(
    model: &Model,
    analysis: &Analysis,
    subset: &[Prepared],
    test: &[ScenePair],
    fixed: &[f64],
    cfg: &AdaptConfig,
) -> Result<Vec<RatioRow>> {
    let mut masks: Vec<(String, SelectionMask)> = fixed
        .iter()
        .map(|&p| Ok((format!("fixed_{:.0}", p * 100.0), fixed_ratio_mask(analysis, p)?)))
        .collect::<Result<_>>()?;
    masks.push(("dynamic".into(), analysis.mask.clone()));
    masks
        .into_iter()
        .map(|(label, mask)| {
            let (outcome, timing) = timed(|| adapt(model, &mask, subset, cfg))?;
            log::info!("{label}: {} tensors, {:.1}s", mask.selected.len(), timing.wall_s);
            Ok(RatioRow {
                label,
                p_select: mask.p_select,
                scalar_fraction: mask.scalar_fraction,
                scores: score_model(&outcome.model, test, cfg.batch, None)?,
                timing,
            })
        })
        .collect()
}

pub fn ratio_csv(rows: &[RatioRow]) -> String {
    let mut out = String::from("label,p_select,scalar_fraction,HQNR,Q2N,target_l1\n");
    for r in rows {
        let get = |m: &str| r.scores.get(m).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            r.p_select,
            r.scalar_fraction,
            get("HQNR"),
            get("Q2N"),
            r.scores.l1
        );
    }
    out
}

pub fn ratio_timing_csv(rows: &[RatioRow]) -> String {
    let mut out = String::from("label,wall_s,cpu_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.3},{:.3}", r.label, r.timing.wall_s, r.timing.cpu_s);
    }
    out
}

/// Fixed-versus-dynamic sweep from a run's artifacts. Writes `out` and a
/// sibling `<stem>_timing.csv`.
pub fn ablation_ratio(
    cfg: &RunConfig,
    model_dir: &Path,
    target_manifest: &Path,
    subset_path: &Path,
    test_manifest: &Path,
    out: &Path,
) -> Result<Vec<RatioRow>> {
    in_stage("ablate-ratio", model_dir, || {
        cfg.validate()?;
        let model = Model::load(model_dir)?;
        let subset = load_subset(target_manifest, subset_path)?;
        require(test_manifest)?;
        let test = load_dataset(test_manifest)?;
        let analysis = analyze(&model, &subset, &cfg.sensitivity)?;
        let rows = ratio_sweep(&model, &analysis, &subset, &test, &cfg.fixed_ratios, &cfg.adapt_cfg())?;
        write_file(out, &ratio_csv(&rows))?;
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ablation_ratio");
        write_file(&out.with_file_name(format!("{stem}_timing.csv")), &ratio_timing_csv(&rows))?;
        Ok(rows)
    })
}

#[derive(Clone, Debug)]
pub struct Reproduction {
    pub pipeline: PipelineResult,
    pub sampling: Vec<SamplingRow>,
    pub ratio: Vec<RatioRow>,
}

/// The comparison run followed by both ablations on its artifacts.
pub fn reproduce(cfg: &RunConfig) -> Result<Reproduction> {
    let pipeline = run_pipeline(cfg)?;
    let paths = RunPaths::new(&cfg.out);
    let sampling = ablation_sampling(cfg, &paths.manifest("target"), &paths.file("ablation_sampling.csv"))?;
    let ratio = ablation_ratio(
        cfg,
        &paths.model("pretrained"),
        &paths.manifest("target"),
        &paths.file("subset.txt"),
        &paths.manifest("target_test"),
        &paths.file("ablation_ratio.csv"),
    )?;
    Ok(Reproduction {
        pipeline,
        sampling,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.model.channels = 8;
        cfg.sweep_ratios = vec![0.05, 0.1];
        cfg.source_profile = Some("p.txt".into());
        let kv = KeyValues::parse(&cfg.to_kv().to_text(), Path::new("cfg")).unwrap();
        let mut back = RunConfig::default();
        back.apply(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KeyValues::parse("epochz = 3", Path::new("cfg")).unwrap();
        assert!(RunConfig::default().apply(&kv).is_err());
    }

    #[test]
    fn stage_seeds_follow_the_run_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.stage_seed(stage::TARGET), b.stage_seed(stage::TARGET));
        assert_ne!(a.stage_seed(stage::TARGET), a.stage_seed(stage::TEST));
        assert_eq!(a.stage_seed(stage::ADAPT), RunConfig::default().stage_seed(stage::ADAPT));
    }

    #[test]
    fn stage_errors_carry_stage_and_path() {
        let e = pretrain_stage(
            Path::new("/nonexistent/manifest.tsv"),
            ModelConfig::default(),
            &AdaptConfig::default(),
            Path::new("/nonexistent/out"),
        )
        .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("stage `pretrain`"), "{msg}");
        assert!(msg.contains("/nonexistent/manifest.tsv"), "{msg}");
    }

    #[test]
    fn timing_adds_componentwise() {
        let t = Timing { wall_s: 1.0, cpu_s: 2.0 } + Timing { wall_s: 0.5, cpu_s: 0.25 };
        assert_eq!(t, Timing { wall_s: 1.5, cpu_s: 2.25 });
    }
}

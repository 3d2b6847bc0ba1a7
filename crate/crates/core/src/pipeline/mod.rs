//! End-to-end commands: source-domain pretraining, the two training stages,
//! evaluation, the three-row ablation and trajectory export.
//!
//! Every command is a pure function of its configuration, seed and input
//! files. Randomness is drawn from substreams keyed by stage, epoch and item
//! so reruns reproduce artifacts byte for byte.

mod evaluate;
mod train;
mod trajectory;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use evaluate::{evaluate, predict, EvalReport, Predictor, Reference, FULL_METHOD_REFERENCE};
pub use train::{pretrain_base, train_stage1, train_stage2, TrainLog};
pub use trajectory::{export_trajectory, silhouette_path, write_trajectory, Trajectory, TrajectoryPoint};

use crate::checkpoint::{self, DenoiserCheckpoint, GuidanceCheckpoint};
use crate::data::{self, Dataset, Split, SyntheticConfig};
use crate::diffusion::{make_schedule, NoiseSchedule, DEFAULT_SAMPLES};
use crate::guidance::{GuidanceModel, GuidanceTrainConfig};
use crate::{Error, Result};

const KEY_PRETRAIN_INIT: u64 = 0x01;
const KEY_PRETRAIN: u64 = 0x02;
const KEY_STAGE1: u64 = 0x11;
const KEY_STAGE2_INIT: u64 = 0x21;
const KEY_STAGE2: u64 = 0x22;
const KEY_TRAJECTORY: u64 = 0x31;

/// Fraction of the target domain used for training; the rest is the test
/// split shared by every evaluation.
pub const TRAIN_FRACTION: f64 = 0.7;
/// Benchmark size used by the desk preset.
pub const DESK_N: usize = 1200;
/// Reference schedule endpoints for `T = 1000`.
const REFERENCE_T: usize = 1000;
const REFERENCE_BETA: (f64, f64) = (1e-4, 0.02);

/// Source-domain training of the base encoder and prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Decoupled decay applied to the two weight matrices.
    pub weight_decay: f64,
    pub lambda_rank: f64,
    pub margin: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            weight_decay: 3.0,
            lambda_rank: 1.0,
            margin: 0.05,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("pretraining needs batch >= 1 and lr > 0".into()));
        }
        if !(self.lambda_rank >= 0.0) || !(self.margin >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda_rank, margin and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to produce a frozen guidance checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRunConfig {
    pub rank: usize,
    pub alpha: f64,
    pub pretrain: PretrainConfig,
    pub stage1: GuidanceTrainConfig,
}

impl Default for GuidanceRunConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            pretrain: PretrainConfig::default(),
            stage1: GuidanceTrainConfig::default(),
        }
    }
}

/// Stage-2 schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub clip: f64,
    pub ema_mu: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_total: REFERENCE_T,
            beta_start: REFERENCE_BETA.0,
            beta_end: REFERENCE_BETA.1,
            epochs: 500,
            batch: 32,
            lr: 3e-4,
            lr_min: 1e-5,
            clip: 1.0,
            ema_mu: 0.9999,
            seed: 42,
        }
    }
}

impl DiffusionConfig {
    /// Sets `T` and scales the reference beta endpoints by `1000 / T`.
    pub fn with_timesteps(mut self, t_total: usize) -> Self {
        let f = REFERENCE_T as f64 / t_total.max(1) as f64;
        self.t_total = t_total;
        self.beta_start = REFERENCE_BETA.0 * f;
        self.beta_end = REFERENCE_BETA.1 * f;
        self
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_total, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr, got lr = {}, lr_min = {}",
                self.lr, self.lr_min
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be > 0, got {}", self.clip)));
        }
        if !(0.0..=1.0).contains(&self.ema_mu) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {}", self.ema_mu)));
        }
        self.schedule().map(|_| ())
    }
}

/// Paths, both stage configurations and the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub guidance_path: Option<PathBuf>,
    pub denoiser_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub guidance: GuidanceRunConfig,
    pub diffusion: DiffusionConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub desk_preset: bool,
    /// Fan evaluation out over worker threads (same results either way).
    pub parallel: bool,
}

impl RunConfig {
    pub fn new(data_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let mut guidance = GuidanceRunConfig::default();
        guidance.stage1.seed = seed;
        Self {
            data_dir: data_dir.into(),
            guidance_path: None,
            denoiser_path: None,
            report_path: None,
            guidance,
            diffusion: DiffusionConfig {
                seed,
                ..DiffusionConfig::default()
            },
            n_samples: DEFAULT_SAMPLES,
            seed,
            desk_preset: false,
            parallel: cfg!(feature = "parallel"),
        }
    }

    /// `T = 100`, 40 stage-1 and 60 stage-2 epochs.
    pub fn desk(data_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let mut cfg = Self::new(data_dir, seed);
        cfg.desk_preset = true;
        cfg.guidance.stage1.epochs = 40;
        cfg.diffusion = cfg.diffusion.with_timesteps(100);
        cfg.diffusion.epochs = 60;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let paths: Vec<&PathBuf> = std::iter::once(&self.data_dir)
            .chain(&self.guidance_path)
            .chain(&self.denoiser_path)
            .chain(&self.report_path)
            .collect();
        for (i, a) in paths.iter().enumerate() {
            if paths[i + 1..].contains(a) {
                return Err(Error::Config(format!("path {} is used twice", a.display())));
            }
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        self.guidance.pretrain.validate()?;
        self.guidance.stage1.validate()?;
        self.diffusion.validate()
    }

    /// Digest of every setting that affects results (paths excluded).
    pub fn digest(&self) -> String {
        checkpoint::digest(&(
            &self.guidance,
            &self.diffusion,
            self.n_samples,
            self.seed,
            self.desk_preset,
        ))
    }
}

/// Source and target domains with the fixed target split.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source: Dataset,
    pub target: Dataset,
    pub split: Split,
    pub train: Dataset,
    pub test: Dataset,
}

impl Benchmark {
    /// The split is seeded by the target's generation seed, so it is a
    /// property of the data rather than of any training run.
    pub fn new(source: Dataset, target: Dataset) -> Result<Self> {
        if source.k != target.k || source.d_in() != target.d_in() {
            return Err(Error::Data("source and target domains disagree on shape".into()));
        }
        let split = data::stratified_split(&target, TRAIN_FRACTION, target.seed)?;
        let train = target.subset(&split.train)?;
        let test = target.subset(&split.test)?;
        Ok(Self {
            source,
            target,
            split,
            train,
            test,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (source, target) = data::read_benchmark(dir)?;
        Self::new(source, target)
    }

    /// Target indices of the test items; these key the sampling streams.
    pub fn test_items(&self) -> Vec<u64> {
        self.split.test.iter().map(|&i| i as u64).collect()
    }

    pub fn split_hash(&self) -> String {
        checkpoint::digest(&(&self.split.train, &self.split.test))
    }
}

/// Generates and writes a benchmark directory.
pub fn gen_data(out: &Path, cfg: &SyntheticConfig) -> Result<Benchmark> {
    let (source, target) = data::gen_synthetic(cfg)?;
    data::write_benchmark(out, &source, &target)?;
    Benchmark::new(source, target)
}

/// Pretrains on the source domain, then runs stage 1 on the target train
/// split.
pub fn fit_guidance(
    bench: &Benchmark,
    cfg: &GuidanceRunConfig,
    seed: u64,
) -> Result<(GuidanceModel, GuidanceCheckpoint, TrainLog)> {
    let (base, mut log) = pretrain_base(&bench.source, cfg.rank, cfg.alpha, &cfg.pretrain, seed)?;
    let (ckpt, stage1) = train_stage1(&base, &bench.train, &cfg.stage1)?;
    log.extend(stage1);
    Ok((base, ckpt, log))
}

fn eval_digest(
    mode: &str,
    n_samples: usize,
    seed: u64,
    guidance: &GuidanceCheckpoint,
    denoiser: Option<&DenoiserCheckpoint>,
    split_hash: &str,
) -> String {
    checkpoint::digest(&serde_json::json!({
        "mode": mode,
        "n_samples": n_samples,
        "seed": seed,
        "guidance": checkpoint::digest(guidance),
        "denoiser": denoiser.map(checkpoint::digest),
        "split": split_hash,
    }))
}

/// Scores a guidance checkpoint, optionally with a denoiser, on the test
/// split.
pub fn evaluate_checkpoints(
    bench: &Benchmark,
    guidance: &GuidanceCheckpoint,
    denoiser: Option<&DenoiserCheckpoint>,
    n_samples: usize,
    seed: u64,
    parallel: bool,
) -> Result<EvalReport> {
    let model = guidance.clone().into_model()?;
    let items = bench.test_items();
    let loaded = match denoiser {
        Some(dc) => Some((dc.inference_net()?, dc.schedule.build()?)),
        None => None,
    };
    let predictor = match &loaded {
        Some((net, sched)) => Predictor::Diffusion {
            net,
            sched,
            n_samples,
        },
        None => Predictor::ZeroShot,
    };
    let metrics = evaluate(&model, predictor, &bench.test, &items, seed, parallel)?;
    let digest = eval_digest(predictor.mode(), n_samples, seed, guidance, denoiser, &bench.split_hash());
    Ok(EvalReport::new(predictor.mode(), &metrics, seed, digest))
}

pub fn report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Published figure for the matching configuration; metadata only.
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub split_hash: String,
    pub n_test: usize,
    pub seed: u64,
    pub desk_preset: bool,
    pub config_digest: String,
}

/// Published accuracy / macro-F1 of the three ablation rows.
pub const ABLATION_REFERENCE: [(&str, Reference); 3] = [
    (
        "zero-shot pretrained guidance",
        Reference {
            accuracy: 0.773,
            macro_f1: 0.540,
        },
    ),
    (
        "+ LoRA and prompt adaptation",
        Reference {
            accuracy: 0.847,
            macro_f1: 0.686,
        },
    ),
    (
        "+ label diffusion",
        Reference {
            accuracy: 0.875,
            macro_f1: 0.731,
        },
    ),
];

/// Every artifact produced by an ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub report: AblationReport,
    pub base: GuidanceModel,
    pub guidance: GuidanceCheckpoint,
    pub denoiser: DenoiserCheckpoint,
    pub log: TrainLog,
}

/// Trains all stages on `bench` and scores the three rows on one split.
pub fn run_ablation(bench: &Benchmark, cfg: &RunConfig) -> Result<AblationRun> {
    cfg.validate()?;
    let (base, guidance, mut log) = fit_guidance(bench, &cfg.guidance, cfg.seed)?;
    let (denoiser, stage2) = train_stage2(&guidance, &bench.train, &cfg.diffusion)?;
    log.extend(stage2);

    let base_ckpt = GuidanceCheckpoint::from_model(&base, false);
    let reports = [
        evaluate_checkpoints(bench, &base_ckpt, None, cfg.n_samples, cfg.seed, cfg.parallel)?,
        evaluate_checkpoints(bench, &guidance, None, cfg.n_samples, cfg.seed, cfg.parallel)?,
        evaluate_checkpoints(bench, &guidance, Some(&denoiser), cfg.n_samples, cfg.seed, cfg.parallel)?,
    ];
    let rows = reports
        .iter()
        .zip(ABLATION_REFERENCE)
        .map(|(r, (name, reference))| AblationRow {
            name: name.into(),
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            per_class_f1: r.per_class_f1.clone(),
            reference,
        })
        .collect();
    let report = AblationReport {
        rows,
        split_hash: bench.split_hash(),
        n_test: bench.test.n(),
        seed: cfg.seed,
        desk_preset: cfg.desk_preset,
        config_digest: cfg.digest(),
    };
    Ok(AblationRun {
        report,
        base,
        guidance,
        denoiser,
        log,
    })
}

/// Loads the benchmark in `cfg.data_dir`; under the desk preset a missing
/// directory is generated first with the default generator at `n = 1200`.
pub fn ablate(cfg: &RunConfig) -> Result<AblationRun> {
    let bench = if cfg.desk_preset && !data::target_path(&cfg.data_dir).exists() {
        gen_data(&cfg.data_dir, &desk_benchmark(cfg.seed))?
    } else {
        Benchmark::load(&cfg.data_dir)?
    };
    run_ablation(&bench, cfg)
}

/// Default generator settings at desk size.
pub fn desk_benchmark(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n: DESK_N,
        seed,
        ..SyntheticConfig::default()
    }
}

/// Runs the chains for a trained pair of checkpoints and writes the
/// trajectory CSV plus its silhouette sidecar.
pub fn export_trajectory_files(
    bench: &Benchmark,
    guidance: &GuidanceCheckpoint,
    denoiser: &DenoiserCheckpoint,
    steps: &[usize],
    out: &Path,
    seed: u64,
) -> Result<Trajectory> {
    let model = guidance.clone().into_model()?;
    let net = denoiser.inference_net()?;
    let sched = denoiser.schedule.build()?;
    let traj = export_trajectory(&model, &net, &sched, &bench.test, &bench.test_items(), steps, seed)?;
    write_trajectory(out, &traj)?;
    Ok(traj)
}

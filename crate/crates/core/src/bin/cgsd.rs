//! Command-line front end.
//!
//! Every subcommand also accepts `--config FILE`, a JSON object whose keys are
//! the subcommand's long flag names. Flags given on the command line win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use cgsd::checkpoint::{self, GuidanceCheckpoint};
use cgsd::data::SyntheticConfig;
use cgsd::pipeline::{self, Benchmark, DiffusionConfig, GuidanceRunConfig, RunConfig};
use cgsd::{Error, Result};

#[derive(Parser)]
#[command(name = "cgsd", version, about = "Semantic-guided label diffusion on a synthetic ordinal benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target benchmark.
    GenData(GenData),
    /// Pretrain on the source domain, then adapt the guidance model.
    TrainGuidance(TrainGuidance),
    /// Train the label denoiser against frozen guidance.
    TrainDiffusion(TrainDiffusion),
    /// Score checkpoints on the target test split.
    Eval(Eval),
    /// Train every stage and report the three ablation rows.
    Ablate(Ablate),
    /// Write per-step 2-D projections of reverse chains.
    ExportTrajectory(ExportTrajectory),
}

macro_rules! config_args {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? } $(flags { $($flag:ident),* })?) => {
        #[derive(Args, Deserialize, Default)]
        #[serde(rename_all = "kebab-case", deny_unknown_fields)]
        struct $name {
            $(#[arg(long)] $field: Option<$ty>,)*
            $($(#[arg(long)] #[serde(default)] $flag: bool,)*)?
            /// JSON file with defaults for any of the flags.
            #[arg(long)]
            #[serde(skip)]
            config: Option<PathBuf>,
        }

        impl $name {
            fn resolve(self) -> Result<Self> {
                let Some(path) = self.config.clone() else {
                    return Ok(self);
                };
                let file: Self = read_config(&path)?;
                Ok(Self {
                    $($field: self.$field.or(file.$field),)*
                    $($($flag: self.$flag || file.$flag,)*)?
                    config: self.config,
                })
            }
        }
    };
}

config_args!(GenData {
    out: PathBuf,
    n: usize,
    d: usize,
    k: usize,
    proportions: String,
    delta: f64,
    sigma: f64,
    shift_angle: f64,
    shift_bias: f64,
    seed: u64,
});

config_args!(TrainGuidance {
    data: PathBuf,
    out: PathBuf,
    rank: usize,
    alpha: f64,
    epochs: usize,
    batch: usize,
    lr_lora: f64,
    lr_prompt: f64,
    warmup: usize,
    lambda_rank: f64,
    margin: f64,
    seed: u64,
});

config_args!(TrainDiffusion {
    data: PathBuf,
    guidance: PathBuf,
    out: PathBuf,
    timesteps: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    lr_min: f64,
    clip: f64,
    ema: f64,
    seed: u64,
});

config_args!(Eval {
    data: PathBuf,
    guidance: PathBuf,
    diffusion: PathBuf,
    samples: usize,
    report: PathBuf,
    seed: u64,
} flags { serial });

config_args!(Ablate {
    data: PathBuf,
    out: PathBuf,
    seed: u64,
} flags { desk_preset, serial });

config_args!(ExportTrajectory {
    data: PathBuf,
    guidance: PathBuf,
    diffusion: PathBuf,
    steps: String,
    out: PathBuf,
    seed: u64,
});

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--{flag}: cannot parse {p:?}")))
        })
        .collect()
}

fn gen_data(a: GenData) -> Result<()> {
    let a = a.resolve()?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        n: a.n.unwrap_or(d.n),
        d_in: a.d.unwrap_or(d.d_in),
        k: a.k.unwrap_or(d.k),
        seed: a.seed.unwrap_or(d.seed),
        proportions: match &a.proportions {
            Some(p) => parse_list(p, "proportions")?,
            None => d.proportions,
        },
        delta: a.delta.unwrap_or(d.delta),
        sigma: a.sigma.unwrap_or(d.sigma),
        shift_angle: a.shift_angle.unwrap_or(d.shift_angle),
        shift_bias: a.shift_bias.unwrap_or(d.shift_bias),
    };
    let out = required(a.out, "out")?;
    let bench = pipeline::gen_data(&out, &cfg)?;
    println!(
        "wrote {} source and {} target samples to {}",
        bench.source.n(),
        bench.target.n(),
        out.display()
    );
    Ok(())
}

fn train_guidance(a: TrainGuidance) -> Result<()> {
    let a = a.resolve()?;
    let mut cfg = GuidanceRunConfig::default();
    let s = &mut cfg.stage1;
    cfg.rank = a.rank.unwrap_or(cfg.rank);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    s.epochs = a.epochs.unwrap_or(s.epochs);
    s.batch = a.batch.unwrap_or(s.batch);
    s.lr_lora = a.lr_lora.unwrap_or(s.lr_lora);
    s.lr_prompt = a.lr_prompt.unwrap_or(s.lr_prompt);
    s.warmup_epochs = a.warmup.unwrap_or(s.warmup_epochs);
    s.lambda_rank = a.lambda_rank.unwrap_or(s.lambda_rank);
    s.margin = a.margin.unwrap_or(s.margin);
    s.seed = a.seed.unwrap_or(s.seed);
    cfg.pretrain.lambda_rank = s.lambda_rank;
    cfg.pretrain.margin = s.margin;
    let seed = s.seed;

    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    if data == out {
        return Err(Error::Config("--data and --out must differ".into()));
    }
    let bench = Benchmark::load(&data)?;
    let (_, ckpt, log) = pipeline::fit_guidance(&bench, &cfg, seed)?;
    log.lines.iter().for_each(|l| println!("{l}"));
    checkpoint::save_guidance(&out, &ckpt)
}

fn train_diffusion(a: TrainDiffusion) -> Result<()> {
    let a = a.resolve()?;
    let d = DiffusionConfig::default();
    let mut cfg = match a.timesteps {
        Some(t) => d.with_timesteps(t),
        None => d,
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.lr_min = a.lr_min.unwrap_or(cfg.lr_min);
    cfg.clip = a.clip.unwrap_or(cfg.clip);
    cfg.ema_mu = a.ema.unwrap_or(cfg.ema_mu);
    cfg.seed = a.seed.unwrap_or(cfg.seed);

    let data = required(a.data, "data")?;
    let gpath = required(a.guidance, "guidance")?;
    let out = required(a.out, "out")?;
    if gpath == out {
        return Err(Error::Config("--guidance and --out must differ".into()));
    }
    let bench = Benchmark::load(&data)?;
    let guidance = checkpoint::load_guidance(&gpath)?;
    let (ckpt, log) = pipeline::train_stage2(&guidance, &bench.train, &cfg)?;
    log.lines.iter().for_each(|l| println!("{l}"));
    checkpoint::save_denoiser(&out, &ckpt)
}

fn eval(a: Eval) -> Result<()> {
    let a = a.resolve()?;
    let data = required(a.data, "data")?;
    let guidance: GuidanceCheckpoint = checkpoint::load_guidance(&required(a.guidance, "guidance")?)?;
    let denoiser = a.diffusion.as_deref().map(checkpoint::load_denoiser).transpose()?;
    let report_path = required(a.report, "report")?;
    let samples = a.samples.unwrap_or(cgsd::diffusion::DEFAULT_SAMPLES);
    if samples == 0 {
        return Err(Error::Config("--samples must be >= 1".into()));
    }
    let bench = Benchmark::load(&data)?;
    let report = pipeline::evaluate_checkpoints(
        &bench,
        &guidance,
        denoiser.as_ref(),
        samples,
        a.seed.unwrap_or(42),
        !a.serial,
    )?;
    let json = pipeline::report_json(&report)?;
    pipeline::write_text(&report_path, &json)?;
    println!(
        "{}: accuracy {:.4}, macro-F1 {:.4} over {} items",
        report.mode, report.accuracy, report.macro_f1, report.n_eval
    );
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let a = a.resolve()?;
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(42);
    let mut cfg = if a.desk_preset {
        RunConfig::desk(data, seed)
    } else {
        RunConfig::new(data, seed)
    };
    cfg.report_path = Some(out.clone());
    cfg.parallel = !a.serial;
    let run = pipeline::ablate(&cfg)?;
    for row in &run.report.rows {
        println!("{:<32} accuracy {:.4}  macro-F1 {:.4}", row.name, row.accuracy, row.macro_f1);
    }
    pipeline::write_text(&out, &pipeline::report_json(&run.report)?)
}

fn export_trajectory(a: ExportTrajectory) -> Result<()> {
    let a = a.resolve()?;
    let data = required(a.data, "data")?;
    let guidance = checkpoint::load_guidance(&required(a.guidance, "guidance")?)?;
    let denoiser = checkpoint::load_denoiser(&required(a.diffusion, "diffusion")?)?;
    let out = required(a.out, "out")?;
    let t_total = denoiser.schedule.t_total;
    let steps: Vec<usize> = match &a.steps {
        Some(s) if s.trim().is_empty() => Vec::new(),
        Some(s) => parse_list(s, "steps")?,
        None => (0..=5).rev().map(|i| i * t_total / 5).collect(),
    };
    let bench = Benchmark::load(&data)?;
    let traj = pipeline::export_trajectory_files(&bench, &guidance, &denoiser, &steps, &out, a.seed.unwrap_or(42))?;
    for (t, s) in &traj.silhouettes {
        println!("t={t:<5} silhouette {s:.4}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainGuidance(a) => train_guidance(a),
        Command::TrainDiffusion(a) => train_diffusion(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportTrajectory(a) => export_trajectory(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

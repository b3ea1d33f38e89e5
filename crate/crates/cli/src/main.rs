mod config;
mod jobs;
mod manifest;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avsep::toyworld::{HardCase, TestMode};
use avsep::training::{GeneratorObjective, TrainMode};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use jobs::Job;
use manifest::RunManifest;

/// Audio-visual speech separation on a synthetic world: data generation,
/// extractor pretraining, separator training, evaluation and correlation
/// scatter export.
#[derive(Debug, Parser)]
#[command(name = "avsep", version)]
struct Cli {
    /// Artifact root; relative default paths resolve against it.
    #[arg(long, global = true, env = "AVSEP_ROOT", default_value = "avsep-runs")]
    root: PathBuf,

    /// Flat TOML key-value configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Where to write the run manifest (default: <root>/manifests/<job>.json).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the speaker population and write the dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_speakers: Option<usize>,
        #[arg(long, value_parser = config::parse_test_mode)]
        test_mode: Option<TestMode>,
    },
    /// Pretrain and freeze the identity and phonetic extractors.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a separator.
    Train(TrainArgs),
    /// Score a trained separator on the seeded test mixtures.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mixtures: Option<usize>,
    },
    /// Export positive/negative pair correlations of separated outputs.
    Scatter {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        extractors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render the scatter as an SVG image.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        mixtures: Option<usize>,
        #[arg(long, value_parser = config::parse_hard_case)]
        hard_case: Option<HardCase>,
    },
    /// Re-execute the job recorded in a run manifest.
    Rerun { manifest: PathBuf },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    mode: TrainMode,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    extractors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda_corr: Option<f64>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    d_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Separation-only steps before correlation terms switch on.
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Let correlation gradients reach the face/lip encoders.
    #[arg(long)]
    corr_grad_video_encoders: bool,
    #[arg(long, value_parser = config::parse_hard_case)]
    hard_case: Option<HardCase>,
    #[arg(long, value_parser = config::parse_objective)]
    generator_objective: Option<GeneratorObjective>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing dependency: {0}")]
    Missing(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Other(_) => 1,
            CliError::Missing(_) | CliError::Artifact(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn artifact(path: &Path, e: avsep::Error) -> Self {
        match CliError::from(e) {
            CliError::Other(msg) => CliError::Artifact(format!("{}: {msg}", path.display())),
            other => other,
        }
    }
}

impl From<avsep::Error> for CliError {
    fn from(e: avsep::Error) -> Self {
        use avsep::Error as E;
        let msg = e.to_string();
        match e {
            E::NumericalFailure { .. } | E::NonFiniteActivation { .. } | E::NonFinite(_) | E::AccuracyFloor { .. } => {
                CliError::Numerical(msg)
            }
            E::CorruptCheckpoint(_) | E::CheckpointVersion { .. } | E::Io(_) | E::Wav(_) | E::Json(_) => {
                CliError::Artifact(msg)
            }
            E::InvalidInput(_) => CliError::Usage(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}

fn resolve(root: &Path, given: Option<PathBuf>, default: &str) -> PathBuf {
    given.unwrap_or_else(|| root.join(default))
}

/// Turns parsed arguments into a fully resolved job and configuration.
fn plan(cli: Cli) -> Result<(Job, RunConfig, Option<PathBuf>), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let root = cli.root;
    let data = |d: Option<PathBuf>| resolve(&root, d, "data");
    let job = match cli.command {
        Command::GenData {
            out,
            n_speakers,
            test_mode,
        } => {
            if let Some(n) = n_speakers {
                cfg.n_speakers = n;
            }
            if let Some(m) = test_mode {
                cfg.test_mode = m;
            }
            Job::GenData { out: data(out) }
        }
        Command::Pretrain { data: d, out } => Job::Pretrain {
            data: data(d),
            out: resolve(&root, out, "extractors.ckpt"),
            report: root.join("extractors_report.json"),
        },
        Command::Train(a) => {
            macro_rules! set {
                ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
            }
            set!(steps => steps, batch_size => batch_size, step_size => step_size, margin => margin,
                 lambda_corr => lambda_corr, lambda_adv => lambda_adv, d_steps => d_steps_per_g_step,
                 eval_every => eval_every, warmup_steps => corr_warmup_steps, hard_case => hard_case,
                 generator_objective => generator_objective);
            if a.corr_grad_video_encoders {
                cfg.corr_grad_video_encoders = true;
            }
            let mode = a.mode;
            Job::Train {
                mode,
                data: data(a.data),
                extractors: mode
                    .uses_extractors()
                    .then(|| resolve(&root, a.extractors, "extractors.ckpt")),
                out: resolve(&root, a.out, &format!("separator_{mode}.ckpt")),
                log: root.join(format!("trainlog_{mode}.csv")),
                checkpoints: root.join("checkpoints").join(mode.as_str()),
                discriminator: (mode == TrainMode::Adversarial).then(|| root.join("discriminator_adversarial.ckpt")),
            }
        }
        Command::Eval {
            data: d,
            params,
            out,
            mixtures,
        } => {
            if let Some(n) = mixtures {
                cfg.test_mixtures = n;
            }
            let stem = params.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Job::Eval {
                data: data(d),
                out: resolve(&root, out, &format!("eval_{stem}.csv")),
                params,
            }
        }
        Command::Scatter {
            data: d,
            params,
            extractors,
            out,
            svg,
            mixtures,
            hard_case,
        } => {
            if let Some(n) = mixtures {
                cfg.scatter_mixtures = n;
            }
            if let Some(h) = hard_case {
                cfg.scatter_hard_case = h;
            }
            let stem = params.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Job::Scatter {
                data: data(d),
                extractors: resolve(&root, extractors, "extractors.ckpt"),
                out: resolve(&root, out, &format!("scatter_{stem}.csv")),
                svg,
                params,
            }
        }
        Command::Rerun { manifest } => {
            let m = RunManifest::read(&manifest)?;
            return Ok((m.job, m.config, None));
        }
    };
    let manifest = cli.manifest.unwrap_or_else(|| root.join("manifests").join(format!("{}.json", job.name())));
    Ok((job, cfg, Some(manifest)))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (job, cfg, manifest_path) = plan(cli)?;
    if let Some(path) = manifest_path {
        RunManifest::new(job.clone(), cfg.clone()).write(&path)?;
    }
    jobs::run(&job, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("avsep: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

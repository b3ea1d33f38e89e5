//! Resolved commands and their execution.

use std::path::{Path, PathBuf};

use avsep::extractors::{pretrain_extractors, ExtractorConfig};
use avsep::report::{
    correlation_scatter, eval_csv, evaluate, mean_metrics, scatter_auc, scatter_csv, seeded_mixtures, test_mixtures,
};
use avsep::rng::Domain;
use avsep::separator::ArchConfig;
use avsep::signal::{StftConfig, StftPlan};
use avsep::toyworld::{generate_dataset, read_dataset, write_dataset, HardCase};
use avsep::training::{train, TrainMode};
use avsep::{Dataset32, Discriminator32, Extractors32, Separator32};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::svg::scatter_svg;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenData {
        out: PathBuf,
    },
    Pretrain {
        data: PathBuf,
        out: PathBuf,
        report: PathBuf,
    },
    Train {
        mode: TrainMode,
        data: PathBuf,
        extractors: Option<PathBuf>,
        out: PathBuf,
        log: PathBuf,
        checkpoints: PathBuf,
        discriminator: Option<PathBuf>,
    },
    Eval {
        data: PathBuf,
        params: PathBuf,
        out: PathBuf,
    },
    Scatter {
        data: PathBuf,
        params: PathBuf,
        extractors: PathBuf,
        out: PathBuf,
        svg: Option<PathBuf>,
    },
}

impl Job {
    /// Short stable name, used for the manifest file.
    pub fn name(&self) -> String {
        let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match self {
            Job::GenData { .. } => "gen-data".into(),
            Job::Pretrain { .. } => "pretrain".into(),
            Job::Train { mode, .. } => format!("train-{mode}"),
            Job::Eval { out, .. } => format!("eval-{}", stem(out)),
            Job::Scatter { out, .. } => format!("scatter-{}", stem(out)),
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Job::GenData { .. } => vec![],
            Job::Pretrain { data, .. } => vec![data.clone()],
            Job::Train { data, extractors, .. } => std::iter::once(data.clone()).chain(extractors.clone()).collect(),
            Job::Eval { data, params, .. } => vec![data.clone(), params.clone()],
            Job::Scatter {
                data,
                params,
                extractors,
                ..
            } => vec![data.clone(), params.clone(), extractors.clone()],
        }
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Job::GenData { out } => ["dataset.json", "speakers.json", "manifest.csv", "audio", "streams"]
                .iter()
                .map(|f| out.join(f))
                .collect(),
            Job::Pretrain { out, report, .. } => vec![out.clone(), report.clone()],
            Job::Train {
                out,
                log,
                checkpoints,
                discriminator,
                ..
            } => [out.clone(), log.clone(), checkpoints.clone()]
                .into_iter()
                .chain(discriminator.clone())
                .collect(),
            Job::Eval { out, .. } => vec![out.clone()],
            Job::Scatter { out, svg, .. } => std::iter::once(out.clone()).chain(svg.clone()).collect(),
        }
    }

    /// Fails with a missing-dependency error when an input artifact is absent.
    pub fn check_inputs(&self) -> Result<(), CliError> {
        for p in self.inputs() {
            if !p.exists() {
                let producer = match self {
                    Job::Train { extractors: Some(e), .. } | Job::Scatter { extractors: e, .. } if *e == p => "pretrain",
                    Job::Eval { params, .. } | Job::Scatter { params, .. } if *params == p => "train",
                    _ => "gen-data",
                };
                let hint = format!(" (run `avsep {producer}` first)");
                return Err(CliError::Missing(format!("{}{hint}", p.display())));
            }
        }
        Ok(())
    }
}

fn load_data(dir: &Path) -> Result<Dataset32, CliError> {
    read_dataset(dir).map_err(|e| CliError::artifact(dir, e))
}

fn load_extractors(path: &Path) -> Result<Extractors32, CliError> {
    Extractors32::load(path).map_err(|e| CliError::artifact(path, e))
}

fn load_params(path: &Path) -> Result<Separator32, CliError> {
    Separator32::load(path).map_err(|e| CliError::artifact(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn arch_for(ds: &Dataset32) -> ArchConfig {
    ArchConfig {
        n_freq: StftConfig::default().n_freq(),
        d_face: ds.config.d_face,
        d_lip: ds.config.d_lip(),
        ..ArchConfig::default()
    }
}

pub fn run(job: &Job, cfg: &RunConfig) -> Result<(), CliError> {
    job.check_inputs()?;
    match job {
        Job::GenData { out } => {
            let ds = generate_dataset::<f32>(&cfg.world(), cfg.seed)?;
            let rows = write_dataset(&ds, out)?;
            eprintln!("wrote {} utterances to {}", rows.len(), out.display());
        }
        Job::Pretrain { data, out, report } => {
            let ds = load_data(data)?;
            let xcfg = ExtractorConfig {
                min_epochs: cfg.extractor_min_epochs,
                max_epochs: cfg.extractor_max_epochs,
                ..ExtractorConfig::default()
            };
            let ex = pretrain_extractors(&ds, &xcfg, cfg.seed)?;
            ex.save(out)?;
            write(report, &(serde_json::to_string_pretty(ex.report())? + "\n"))?;
            eprintln!("extractor accuracy: {:?}", ex.report());
        }
        Job::Train {
            mode,
            data,
            extractors,
            out,
            log,
            checkpoints,
            discriminator,
        } => {
            let ds = load_data(data)?;
            let ex = match (mode.uses_extractors(), extractors) {
                (true, Some(p)) => Some(load_extractors(p)?),
                (true, None) => return Err(CliError::Missing(format!("{mode} mode needs an extractors checkpoint"))),
                (false, _) => None,
            };
            std::fs::create_dir_all(checkpoints)?;
            let tcfg = avsep::training::TrainConfig {
                checkpoint_dir: Some(checkpoints.clone()),
                ..cfg.train(*mode)
            };
            let outcome = train(&ds, ex.as_ref(), &arch_for(&ds), &tcfg)?;
            outcome
                .params
                .to_checkpoint(serde_json::json!({ "mode": mode, "steps": tcfg.steps, "seed": tcfg.seed }))
                .save(out)?;
            outcome.log.write_csv(log)?;
            if let (Some(path), Some(d)) = (discriminator, &outcome.discriminator) {
                save_discriminator(d, path)?;
            }
            if let Some(v) = outcome.log.records().iter().rev().find_map(|r| r.val_si_snr) {
                eprintln!("{mode}: final validation SI-SNR {v:.3} dB");
            }
        }
        Job::Eval { data, params, out } => {
            let ds = load_data(data)?;
            let p = load_params(params)?;
            let plan = StftPlan::new(StftConfig::default())?;
            let set = test_mixtures(&ds, cfg.test_mixtures, cfg.seed, HardCase::None)?;
            let rows = evaluate(&p, &plan, &set)?;
            write(out, &eval_csv(&rows))?;
            eprintln!("mean SI-SNR {:.3} dB over {} mixtures", mean_metrics(&rows).si_snr, rows.len());
        }
        Job::Scatter {
            data,
            params,
            extractors,
            out,
            svg,
        } => {
            let ds = load_data(data)?;
            let p = load_params(params)?;
            let ex = load_extractors(extractors)?;
            let plan = StftPlan::new(StftConfig::default())?;
            let set = seeded_mixtures(&ds.test, cfg.scatter_mixtures, cfg.seed, Domain::Scatter, cfg.scatter_hard_case)?;
            let rows = correlation_scatter(&p, &ex, &plan, &set)?;
            write(out, &scatter_csv(&rows))?;
            if let Some(svg) = svg {
                write(svg, &scatter_svg(&rows))?;
            }
            eprintln!("pos/neg AUC {:.4} over {} pairs", scatter_auc(&rows)?, rows.len());
        }
    }
    Ok(())
}

fn save_discriminator(d: &Discriminator32, path: &Path) -> Result<(), CliError> {
    d.to_checkpoint().save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_round_trips_through_json() {
        let job = Job::Train {
            mode: TrainMode::Triplet,
            data: "d".into(),
            extractors: Some("e.ckpt".into()),
            out: "s.ckpt".into(),
            log: "l.csv".into(),
            checkpoints: "ck".into(),
            discriminator: None,
        };
        let text = serde_json::to_string(&job).unwrap();
        assert!(text.contains("\"command\":\"train\""));
        assert_eq!(serde_json::from_str::<Job>(&text).unwrap(), job);
        assert_eq!(job.name(), "train-triplet");
        assert_eq!(job.inputs(), vec![PathBuf::from("d"), PathBuf::from("e.ckpt")]);
    }
}

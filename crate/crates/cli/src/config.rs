//! Run configuration: a flat TOML key-value file, with command-line flags
//! layered on top.

use std::path::Path;

use avsep::correlation::TrainWeights;
use avsep::toyworld::{HardCase, TestMode, WorldConfig};
use avsep::training::{GeneratorObjective, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub test_utterances_per_speaker: usize,
    pub test_mode: TestMode,
    pub visual_noise: f64,

    pub extractor_min_epochs: usize,
    pub extractor_max_epochs: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub margin: f64,
    pub lambda_corr: f64,
    pub lambda_adv: f64,
    pub d_steps_per_g_step: usize,
    pub eval_every: usize,
    pub val_mixtures: usize,
    pub hard_case: HardCase,
    pub corr_warmup_steps: usize,
    pub corr_grad_video_encoders: bool,
    pub generator_objective: GeneratorObjective,
    pub disc_hidden: usize,
    pub disc_step_size: f64,

    pub test_mixtures: usize,
    pub scatter_mixtures: usize,
    pub scatter_hard_case: HardCase,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 1,
            n_speakers: w.n_speakers,
            utterances_per_speaker: w.utterances_per_speaker,
            test_utterances_per_speaker: w.test_utterances_per_speaker,
            test_mode: w.test_mode,
            visual_noise: w.visual_noise,
            extractor_min_epochs: 6,
            extractor_max_epochs: 40,
            steps: t.steps,
            batch_size: t.batch_size,
            step_size: t.step_size,
            margin: t.weights.margin,
            lambda_corr: t.weights.lambda_corr,
            lambda_adv: t.weights.lambda_adv,
            d_steps_per_g_step: t.d_steps_per_g_step,
            eval_every: t.eval_every,
            val_mixtures: t.val_mixtures,
            hard_case: t.hard_case,
            corr_warmup_steps: t.corr_warmup_steps,
            corr_grad_video_encoders: t.corr_grad_video_encoders,
            generator_objective: t.generator_objective,
            disc_hidden: t.disc_hidden,
            disc_step_size: t.disc_step_size,
            test_mixtures: 200,
            scatter_mixtures: 200,
            scatter_hard_case: HardCase::None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            n_speakers: self.n_speakers,
            utterances_per_speaker: self.utterances_per_speaker,
            test_utterances_per_speaker: self.test_utterances_per_speaker,
            test_mode: self.test_mode,
            visual_noise: self.visual_noise,
            ..WorldConfig::default()
        }
    }

    pub fn train(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: self.steps,
            batch_size: self.batch_size,
            step_size: self.step_size,
            seed: self.seed,
            weights: TrainWeights {
                margin: self.margin,
                lambda_corr: self.lambda_corr,
                lambda_adv: self.lambda_adv,
            },
            d_steps_per_g_step: self.d_steps_per_g_step,
            eval_every: self.eval_every,
            val_mixtures: self.val_mixtures,
            hard_case: self.hard_case,
            corr_warmup_steps: self.corr_warmup_steps,
            corr_grad_video_encoders: self.corr_grad_video_encoders,
            generator_objective: self.generator_objective,
            disc_hidden: self.disc_hidden,
            disc_step_size: self.disc_step_size,
            ..TrainConfig::default()
        }
    }
}

/// Parses the value spellings accepted on the command line.
pub fn parse_hard_case(s: &str) -> Result<HardCase, String> {
    match s {
        "none" => Ok(HardCase::None),
        "same-cluster" | "same_cluster" => Ok(HardCase::SameCluster),
        "same-sentence" | "same_sentence" => Ok(HardCase::SameSentence),
        _ => Err(format!("expected none, same-cluster or same-sentence, got `{s}`")),
    }
}

pub fn parse_test_mode(s: &str) -> Result<TestMode, String> {
    match s {
        "closed" => Ok(TestMode::Closed),
        "open" => Ok(TestMode::Open),
        _ => Err(format!("expected closed or open, got `{s}`")),
    }
}

pub fn parse_objective(s: &str) -> Result<GeneratorObjective, String> {
    match s {
        "minimax" => Ok(GeneratorObjective::Minimax),
        "non-saturating" | "non_saturating" => Ok(GeneratorObjective::NonSaturating),
        _ => Err(format!("expected minimax or non-saturating, got `{s}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_defaults_merge() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 9\nsteps = 12\nhard_case = \"same_cluster\"\n").unwrap();
        let c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!((c.seed, c.steps, c.hard_case), (9, 12, HardCase::SameCluster));
        assert_eq!(c.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "stepz = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Usage(_))));
    }
}

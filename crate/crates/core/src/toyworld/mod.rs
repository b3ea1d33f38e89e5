//! Procedural bimodal world: parametric harmonic speakers with formant
//! filtering, phoneme-sequence utterances, parallel face/lip proxy streams,
//! and the mixture and triplet samplers used for training and evaluation.

mod dataset;
mod sampler;
mod speaker;
mod synth;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, ManifestRow, TestMode};
pub use sampler::{
    sample_mixture, sample_mixture_indices, sample_triplet, HardCase, MixtureSample, TripletKind,
    TripletSample,
};
pub use speaker::{make_speaker, Formant, SpeakerProfile};
pub use synth::{phoneme_at, synth_utterance, Utterance, VisualStreams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and population knobs of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub sample_rate: u32,
    /// Utterance length in seconds.
    pub duration: f64,
    /// Video frame rate of the visual proxy streams.
    pub fps: f64,
    /// Phoneme alphabet size.
    pub n_phonemes: usize,
    pub phonemes_per_utterance: usize,
    pub d_face: usize,
    /// Extra lip-stream channels beyond the phoneme indicator block.
    pub lip_extra: usize,
    /// Standard deviation of the additive Gaussian noise on visual streams.
    pub visual_noise: f64,
    pub n_clusters: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub test_utterances_per_speaker: usize,
    pub n_sentences: usize,
    pub test_mode: TestMode,
    /// Speakers reserved for the test pool in open-speaker mode.
    pub open_test_speakers: usize,
    pub breath_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            duration: 2.56,
            fps: 25.0,
            n_phonemes: 8,
            phonemes_per_utterance: 8,
            d_face: 32,
            lip_extra: 4,
            visual_noise: 0.1,
            n_clusters: 4,
            f0_min: 80.0,
            f0_max: 300.0,
            n_speakers: 16,
            utterances_per_speaker: 20,
            test_utterances_per_speaker: 5,
            n_sentences: 32,
            test_mode: TestMode::Closed,
            open_test_speakers: 4,
            breath_noise: 0.003,
        }
    }
}

impl WorldConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn n_video_frames(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn d_lip(&self) -> usize {
        self.n_phonemes + self.lip_extra
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("world config: {m}")));
        if self.sample_rate == 0 || self.duration <= 0.0 || self.fps <= 0.0 {
            return bad("sample_rate, duration and fps must be positive");
        }
        if self.n_phonemes < 2 || self.n_phonemes > 255 || self.phonemes_per_utterance == 0 {
            return bad("need 2..=255 phonemes and a nonempty sentence length");
        }
        if self.lip_extra < 1 {
            return bad("lip_extra must be at least 1");
        }
        if !(80.0..=300.0).contains(&self.f0_min) || !(80.0..=300.0).contains(&self.f0_max) || self.f0_min >= self.f0_max {
            return bad("f0 range must lie within [80, 300] Hz");
        }
        if self.n_clusters == 0 || self.n_speakers < 2 || self.n_sentences < 2 {
            return bad("need clusters, at least two speakers and two sentences");
        }
        let distinct = (self.n_phonemes as f64).powi(self.phonemes_per_utterance.min(16) as i32);
        if (self.n_sentences as f64) > distinct {
            return bad("sentence bank larger than the number of distinct sentences");
        }
        if self.visual_noise < 0.0 || self.breath_noise < 0.0 {
            return bad("noise levels must be nonnegative");
        }
        Ok(())
    }
}

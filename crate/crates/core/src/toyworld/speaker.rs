use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    /// Center frequency in Hz.
    pub center: f64,
    /// -3 dB bandwidth in Hz.
    pub bandwidth: f64,
}

/// Parametric voice plus the face/lip traits that accompany it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Fundamental frequency in Hz.
    pub f0: f64,
    /// Neutral-vowel formants, strictly increasing.
    pub formants: [Formant; 3],
    /// Amplitude ratio between consecutive harmonics.
    pub harmonic_decay: f64,
    /// Coarse voice class used for hard-case sampling (a gender analogue).
    pub timbre_cluster: usize,
    /// Slow pitch-contour parameters: relative depth and rate in Hz.
    pub intonation_depth: f64,
    pub intonation_rate: f64,
    /// Per-speaker face descriptor emitted on every video frame.
    pub face_code: Vec<f64>,
    /// Static per-speaker lip-shape offsets.
    pub lip_style: Vec<f64>,
}

impl SpeakerProfile {
    pub fn with_id(mut self, id: u32) -> Self {
        self.speaker_id = id;
        self
    }

    /// Numeric timbre description `[f0, F1, F2, F3, B1, B2, B3, decay]`.
    pub fn timbre_vector(&self) -> [f64; 8] {
        let f = &self.formants;
        [
            self.f0,
            f[0].center,
            f[1].center,
            f[2].center,
            f[0].bandwidth,
            f[1].bandwidth,
            f[2].bandwidth,
            self.harmonic_decay,
        ]
    }
}

pub(crate) const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (1000.0, 2100.0), (2200.0, 3400.0)];
const NEUTRAL: [f64; 3] = [500.0, 1500.0, 2500.0];

/// World-constant mixing matrix tying face codes to voice parameters, so the
/// face carries partial information about the voice.
fn face_projection(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFACE);
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Deterministic speaker from `seed`. The returned id is 0; datasets assign
/// ids with [`SpeakerProfile::with_id`].
pub fn make_speaker(seed: u64, cfg: &WorldConfig) -> SpeakerProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster = rng.random_range(0..cfg.n_clusters);
    let width = (cfg.f0_max - cfg.f0_min) / cfg.n_clusters as f64;
    let lo = cfg.f0_min + width * cluster as f64;
    let f0 = rng.random_range(lo..lo + width);
    let tract_scale = 1.0 + 0.06 * cluster as f64;
    let bw_ranges = [(60.0, 110.0), (80.0, 150.0), (110.0, 200.0)];
    let mut formants = [Formant {
        center: 0.0,
        bandwidth: 0.0,
    }; 3];
    for i in 0..3 {
        let jitter = rng.random_range(0.93..1.07);
        let (lo, hi) = FORMANT_RANGES[i];
        formants[i] = Formant {
            center: (NEUTRAL[i] * tract_scale * jitter).clamp(lo, hi),
            bandwidth: rng.random_range(bw_ranges[i].0..bw_ranges[i].1),
        };
    }
    let harmonic_decay = rng.random_range(0.85..0.95);
    let intonation_depth = rng.random_range(0.01..0.03);
    let intonation_rate = rng.random_range(0.4..0.9);

    // Voice summary, roughly standardized, drives part of the face code.
    let mut voice = vec![0.0; cfg.n_clusters];
    voice[cluster] = 1.0;
    voice.push((f0 - 190.0) / 60.0);
    for (i, f) in formants.iter().enumerate() {
        voice.push((f.center - NEUTRAL[i]) / (0.1 * NEUTRAL[i]));
    }
    voice.push((harmonic_decay - 0.9) / 0.03);
    let proj = face_projection(cfg.d_face, voice.len());
    let mut face_code: Vec<f64> = proj
        .iter()
        .map(|row| {
            let v: f64 = row.iter().zip(&voice).map(|(a, b)| a * b).sum();
            let own: f64 = StandardNormal.sample(&mut rng);
            0.5 * v / (voice.len() as f64).sqrt() + own
        })
        .collect();
    let rms = (face_code.iter().map(|x| x * x).sum::<f64>() / face_code.len() as f64).sqrt();
    for x in &mut face_code {
        *x *= 0.3 / rms;
    }
    let lip_style = (0..cfg.lip_extra.saturating_sub(1))
        .map(|_| rng.random_range(-0.3..0.3))
        .collect();

    SpeakerProfile {
        speaker_id: 0,
        f0,
        formants,
        harmonic_decay,
        timbre_cluster: cluster,
        intonation_depth,
        intonation_rate,
        face_code,
        lip_style,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_profile() {
        let cfg = WorldConfig::default();
        let a = serde_json::to_vec(&make_speaker(7, &cfg)).unwrap();
        let b = serde_json::to_vec(&make_speaker(7, &cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn population_within_ranges() {
        let cfg = WorldConfig::default();
        for seed in 0..100 {
            let s = make_speaker(seed, &cfg);
            assert!((80.0..=300.0).contains(&s.f0));
            for (i, f) in s.formants.iter().enumerate() {
                assert!((300.0..=3500.0).contains(&f.center));
                let (lo, hi) = FORMANT_RANGES[i];
                assert!((lo..=hi).contains(&f.center));
            }
            assert!(s.formants[0].center < s.formants[1].center);
            assert!(s.formants[1].center < s.formants[2].center);
            assert!(s.timbre_cluster < cfg.n_clusters);
            assert_eq!(s.face_code.len(), cfg.d_face);
        }
    }

    #[test]
    fn population_timbres_distinct() {
        let cfg = WorldConfig::default();
        let v: Vec<[f64; 8]> = (0..100).map(|s| make_speaker(s, &cfg).timbre_vector()).collect();
        let mut distinct = 0;
        for i in 0..v.len() {
            if (0..v.len()).all(|j| j == i || v[j] != v[i]) {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct}");
    }
}

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{SpeakerProfile, WorldConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::signal::Waveform;

/// Per-frame visual proxies of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStreams<T> {
    /// `T_v x d_face` identity descriptor per frame.
    pub face: Array2<T>,
    /// `T_v x d_lip`: noisy phoneme indicator block, mouth opening, lip style.
    pub lip: Array2<T>,
    pub fps: f64,
}

impl<T: Real> VisualStreams<T> {
    pub fn n_frames(&self) -> usize {
        self.face.nrows()
    }

    pub fn cast<D: Real>(&self) -> VisualStreams<D> {
        VisualStreams {
            face: self.face.mapv(|v| D::lit(v.as_f64())),
            lip: self.lip.mapv(|v| D::lit(v.as_f64())),
            fps: self.fps,
        }
    }

    pub fn zeros(frames: usize, d_face: usize, d_lip: usize, fps: f64) -> Self {
        Self {
            face: Array2::zeros((frames, d_face)),
            lip: Array2::zeros((frames, d_lip)),
            fps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<T> {
    pub utterance_id: u32,
    pub speaker_id: u32,
    pub timbre_cluster: usize,
    /// Index into the dataset's sentence bank, when drawn from one.
    pub sentence_id: Option<u32>,
    pub phonemes: Vec<u8>,
    /// Seconds per phoneme; sums to the utterance duration.
    pub durations: Vec<f64>,
    pub audio: Waveform<T>,
    pub visuals: VisualStreams<T>,
}

impl<T> Utterance<T> {
    /// Phoneme active at `time` seconds.
    pub fn phoneme_at(&self, time: f64) -> u8 {
        phoneme_at(&self.phonemes, &self.durations, time)
    }
}

/// Phoneme active at `time` for a sequence with the given segment durations.
pub fn phoneme_at(phonemes: &[u8], durations: &[f64], time: f64) -> u8 {
    let mut end = 0.0;
    for (p, d) in phonemes.iter().zip(durations) {
        end += d;
        if time < end {
            return *p;
        }
    }
    *phonemes.last().expect("nonempty phoneme sequence")
}

/// Formant multipliers (relative to the speaker's neutral vowel) and level
/// for each phoneme.
struct PhonemeShape {
    mult: [f64; 3],
    level: f64,
}

const VOWELS: [PhonemeShape; 8] = [
    PhonemeShape { mult: [1.46, 0.73, 0.98], level: 1.0 },
    PhonemeShape { mult: [0.54, 1.53, 1.20], level: 0.75 },
    PhonemeShape { mult: [0.60, 0.58, 0.90], level: 0.8 },
    PhonemeShape { mult: [1.06, 1.23, 0.99], level: 0.9 },
    PhonemeShape { mult: [1.14, 0.56, 0.96], level: 0.95 },
    PhonemeShape { mult: [1.32, 1.15, 0.96], level: 1.0 },
    PhonemeShape { mult: [1.04, 0.79, 0.96], level: 0.85 },
    PhonemeShape { mult: [0.78, 1.33, 1.02], level: 0.8 },
];

fn phoneme_shape(p: u8) -> PhonemeShape {
    if let Some(v) = VOWELS.get(p as usize) {
        return PhonemeShape { mult: v.mult, level: v.level };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + p as u64);
    PhonemeShape {
        mult: [
            rng.random_range(0.55..1.45),
            rng.random_range(0.6..1.5),
            rng.random_range(0.9..1.15),
        ],
        level: rng.random_range(0.75..1.0),
    }
}

const CROSSFADE: f64 = 0.02;

/// Sequence positions and blend weights active at `t` (linear crossfade of
/// `2 * CROSSFADE` seconds around each boundary).
fn segment_weights(t: f64, n: usize, seg: f64) -> [(usize, f64); 2] {
    let idx = ((t / seg).floor().max(0.0) as usize).min(n - 1);
    let start = idx as f64 * seg;
    let end = start + seg;
    if idx + 1 < n && t > end - CROSSFADE {
        let w = ((t - (end - CROSSFADE)) / (2.0 * CROSSFADE)).min(0.5);
        return [(idx, 1.0 - w), (idx + 1, w)];
    }
    if idx > 0 && t < start + CROSSFADE {
        let w = (((start + CROSSFADE) - t) / (2.0 * CROSSFADE)).min(0.5);
        return [(idx, 1.0 - w), (idx - 1, w)];
    }
    [(idx, 1.0), (idx, 0.0)]
}

/// Syllable-like level contour at time `t`.
fn envelope(t: f64, phonemes: &[u8], seg: f64) -> f64 {
    let frac = (t / seg).fract();
    let ws = segment_weights(t, phonemes.len(), seg);
    let level: f64 = ws.iter().map(|&(i, w)| w * phoneme_shape(phonemes[i]).level).sum();
    level * (0.55 + 0.45 * (std::f64::consts::PI * frac).sin())
}

fn resonance(f: f64, center: f64, bandwidth: f64) -> f64 {
    let x = (f - center) / (0.5 * bandwidth);
    1.0 / (1.0 + x * x).sqrt()
}

/// Renders one utterance of `phonemes` by `speaker`: a harmonic source at
/// the speaker's (slowly intoned) pitch, shaped by phoneme-shifted speaker
/// formants, peak-normalized to 0.9, together with its visual streams.
pub fn synth_utterance<T: Real>(
    speaker: &SpeakerProfile,
    phonemes: &[u8],
    seed: u64,
    cfg: &WorldConfig,
) -> Result<Utterance<T>> {
    if phonemes.is_empty() {
        return Err(Error::InvalidInput("empty phoneme sequence".into()));
    }
    if let Some(&p) = phonemes.iter().find(|&&p| p as usize >= cfg.n_phonemes) {
        return Err(Error::InvalidInput(format!(
            "phoneme {p} outside alphabet of size {}",
            cfg.n_phonemes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = cfg.sample_rate as f64;
    let n = cfg.n_samples();
    let seg = cfg.duration / phonemes.len() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let pitch_phase = rng.random_range(0.0..two_pi);
    let start_phase = rng.random_range(0.0..two_pi);

    let ctrl_hop = (sr / 100.0).round().max(1.0) as usize;
    let n_ctrl = n / ctrl_hop + 2;
    let upper = 0.475 * sr;
    let lowest_f0 = speaker.f0 * (1.0 - speaker.intonation_depth);
    let n_harm = ((upper / lowest_f0).floor() as usize).max(1);
    let gains = [1.0, 0.6, 0.35];

    let mut f0_ctrl = Vec::with_capacity(n_ctrl);
    let mut env_ctrl = Vec::with_capacity(n_ctrl);
    let mut amp_ctrl = Array2::<f64>::zeros((n_ctrl, n_harm));
    for c in 0..n_ctrl {
        let t = (c * ctrl_hop) as f64 / sr;
        let f0 = speaker.f0
            * (1.0 + speaker.intonation_depth * (two_pi * speaker.intonation_rate * t + pitch_phase).sin());
        let ws = segment_weights(t.min(cfg.duration), phonemes.len(), seg);
        let mut mult = [0.0; 3];
        for &(i, w) in &ws {
            let shape = phoneme_shape(phonemes[i]);
            for k in 0..3 {
                mult[k] += w * shape.mult[k];
            }
        }
        let env = envelope(t.min(cfg.duration), phonemes, seg);
        let mut decay = 1.0;
        for h in 0..n_harm {
            let f = (h + 1) as f64 * f0;
            if f < upper {
                let g: f64 = (0..3)
                    .map(|k| {
                        let fm = &speaker.formants[k];
                        gains[k] * resonance(f, fm.center * mult[k], fm.bandwidth)
                    })
                    .sum();
                amp_ctrl[[c, h]] = env * decay * (g + 0.01);
            }
            decay *= speaker.harmonic_decay;
        }
        f0_ctrl.push(f0);
        env_ctrl.push(env);
    }

    let breath = Normal::new(0.0, cfg.breath_noise.max(0.0)).expect("valid sigma");
    let mut samples = vec![0.0f64; n];
    let mut phase = start_phase;
    for (i, out) in samples.iter_mut().enumerate() {
        let c = i / ctrl_hop;
        let a = (i % ctrl_hop) as f64 / ctrl_hop as f64;
        let f0 = f0_ctrl[c] * (1.0 - a) + f0_ctrl[c + 1] * a;
        phase = (phase + two_pi * f0 / sr) % two_pi;
        let (s1, c1) = phase.sin_cos();
        let two_c = 2.0 * c1;
        let (row0, row1) = (amp_ctrl.row(c), amp_ctrl.row(c + 1));
        let mut prev = 0.0;
        let mut cur = s1;
        let mut acc = 0.0;
        for h in 0..n_harm {
            let amp = row0[h] * (1.0 - a) + row1[h] * a;
            acc += amp * cur;
            let next = two_c * cur - prev;
            prev = cur;
            cur = next;
        }
        let env = env_ctrl[c] * (1.0 - a) + env_ctrl[c + 1] * a;
        *out = acc + env * breath.sample(&mut rng);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in &mut samples {
            *s *= 0.9 / peak;
        }
    }
    let audio = Waveform::new(samples.iter().map(|&s| T::lit(s)).collect(), cfg.sample_rate)?;

    let frames = cfg.n_video_frames();
    let d_lip = cfg.d_lip();
    let mut face = Array2::<T>::zeros((frames, cfg.d_face));
    let mut lip = Array2::<T>::zeros((frames, d_lip));
    for k in 0..frames {
        let t = ((k as f64 + 0.5) / cfg.fps).min(cfg.duration);
        for d in 0..cfg.d_face {
            let noise: f64 = StandardNormal.sample(&mut rng);
            face[[k, d]] = T::lit(speaker.face_code[d] + cfg.visual_noise * noise);
        }
        let mut row = vec![0.0; d_lip];
        for (i, w) in segment_weights(t, phonemes.len(), seg) {
            row[phonemes[i] as usize] += w;
        }
        row[cfg.n_phonemes] = envelope(t, phonemes, seg);
        for (j, s) in speaker.lip_style.iter().enumerate() {
            row[cfg.n_phonemes + 1 + j] = *s;
        }
        for (d, v) in row.into_iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            lip[[k, d]] = T::lit(v + cfg.visual_noise * noise);
        }
    }

    Ok(Utterance {
        utterance_id: 0,
        speaker_id: speaker.speaker_id,
        timbre_cluster: speaker.timbre_cluster,
        sentence_id: None,
        phonemes: phonemes.to_vec(),
        durations: vec![seg; phonemes.len()],
        audio,
        visuals: VisualStreams {
            face,
            lip,
            fps: cfg.fps,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::make_speaker;

    fn sentence(seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8).map(|_| rng.random_range(0..8u8)).collect()
    }

    #[test]
    fn default_geometry() {
        let cfg = WorldConfig::default();
        let spk = make_speaker(1, &cfg);
        let u: Utterance<f32> = synth_utterance(&spk, &sentence(1), 5, &cfg).unwrap();
        assert_eq!(u.audio.len(), 40960);
        assert_eq!(u.visuals.n_frames(), 64);
        assert_eq!(u.visuals.lip.ncols(), 12);
        let total: f64 = u.durations.iter().sum();
        assert!((total - 2.56).abs() < 1e-12);
        assert!(u.audio.peak() <= 1.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = WorldConfig::default();
        let spk = make_speaker(3, &cfg);
        let a: Utterance<f64> = synth_utterance(&spk, &sentence(2), 9, &cfg).unwrap();
        let b: Utterance<f64> = synth_utterance(&spk, &sentence(2), 9, &cfg).unwrap();
        assert_eq!(a, b);
        let c: Utterance<f64> = synth_utterance(&spk, &sentence(2), 10, &cfg).unwrap();
        assert_ne!(a.audio, c.audio);
    }

    #[test]
    fn rms_within_band() {
        let cfg = WorldConfig::default();
        for i in 0..100 {
            let spk = make_speaker(100 + i, &cfg);
            let u: Utterance<f32> = synth_utterance(&spk, &sentence(i), i, &cfg).unwrap();
            let rms = u.audio.rms();
            assert!((0.05..=0.5).contains(&rms), "rms {rms} for {i}");
        }
    }

    #[test]
    fn empty_or_out_of_alphabet_rejected() {
        let cfg = WorldConfig::default();
        let spk = make_speaker(1, &cfg);
        assert!(synth_utterance::<f32>(&spk, &[], 0, &cfg).is_err());
        assert!(synth_utterance::<f32>(&spk, &[1, 8], 0, &cfg).is_err());
    }

    #[test]
    fn crossfade_weights_are_continuous() {
        let seg = 0.32;
        for b in 1..8 {
            let t = b as f64 * seg;
            let left = segment_weights(t - 1e-9, 8, seg);
            let right = segment_weights(t + 1e-9, 8, seg);
            let weight_of = |ws: [(usize, f64); 2], i: usize| -> f64 {
                ws.iter().filter(|(j, _)| *j == i).map(|(_, w)| w).sum()
            };
            assert!((weight_of(left, b) - weight_of(right, b)).abs() < 1e-6);
        }
    }

    #[test]
    fn phoneme_lookup_by_time() {
        let ph = [3u8, 1, 4];
        let d = [0.5, 0.5, 0.5];
        assert_eq!(phoneme_at(&ph, &d, 0.0), 3);
        assert_eq!(phoneme_at(&ph, &d, 0.7), 1);
        assert_eq!(phoneme_at(&ph, &d, 1.49), 4);
        assert_eq!(phoneme_at(&ph, &d, 9.0), 4);
    }
}

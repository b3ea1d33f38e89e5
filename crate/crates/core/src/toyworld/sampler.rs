use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::signal::{mix, Waveform};

/// Constraint on the interfering source of a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardCase {
    #[default]
    None,
    /// Interferer shares the target's timbre cluster.
    SameCluster,
    /// Interferer speaks the same phoneme sequence as the target.
    SameSentence,
}

impl std::str::FromStr for HardCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "same_cluster" | "same-cluster" => Ok(Self::SameCluster),
            "same_sentence" | "same-sentence" => Ok(Self::SameSentence),
            other => Err(Error::InvalidInput(format!("unknown hard case `{other}`"))),
        }
    }
}

/// Two-speaker mixture; `sources[0]` is always the target.
#[derive(Debug, Clone)]
pub struct MixtureSample<T> {
    pub mixture: Waveform<T>,
    pub sources: [Arc<Utterance<T>>; 2],
    pub target_index: usize,
}

impl<T: Real> MixtureSample<T> {
    pub fn from_sources(target: Arc<Utterance<T>>, interferer: Arc<Utterance<T>>) -> Result<Self> {
        let mixture = mix(&target.audio, &interferer.audio)?;
        Ok(Self {
            mixture,
            sources: [target, interferer],
            target_index: 0,
        })
    }

    pub fn target(&self) -> &Utterance<T> {
        &self.sources[0]
    }

    pub fn interferer(&self) -> &Utterance<T> {
        &self.sources[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletKind {
    Identity,
    Phonetic,
}

#[derive(Debug, Clone)]
pub struct TripletSample<T> {
    pub anchor: Arc<Utterance<T>>,
    pub positive: Arc<Utterance<T>>,
    pub negative: Arc<Utterance<T>>,
    pub kind: TripletKind,
}

fn pick<'a, R: Rng + ?Sized>(candidates: &[&'a usize], rng: &mut R) -> usize {
    *candidates[rng.random_range(0..candidates.len())]
}

/// Draws a target and an interferer from `pool` and mixes them.
pub fn sample_mixture<T: Real, R: Rng + ?Sized>(
    pool: &[Arc<Utterance<T>>],
    rng: &mut R,
    hard_case: HardCase,
) -> Result<MixtureSample<T>> {
    let (t, i) = sample_mixture_indices(pool, rng, hard_case)?;
    MixtureSample::from_sources(pool[t].clone(), pool[i].clone())
}

fn compatible<T>(a: &Utterance<T>, b: &Utterance<T>, hard_case: HardCase) -> bool {
    a.speaker_id != b.speaker_id
        && match hard_case {
            HardCase::None => true,
            HardCase::SameCluster => a.timbre_cluster == b.timbre_cluster,
            HardCase::SameSentence => a.phonemes == b.phonemes,
        }
}

/// Index form of [`sample_mixture`]: `(target, interferer)` positions in `pool`.
pub fn sample_mixture_indices<T, R: Rng + ?Sized>(
    pool: &[Arc<Utterance<T>>],
    rng: &mut R,
    hard_case: HardCase,
) -> Result<(usize, usize)> {
    let idx: Vec<usize> = (0..pool.len()).collect();
    let targets: Vec<&usize> = if hard_case == HardCase::None {
        let first = pool.first().map(|u| u.speaker_id);
        if pool.iter().any(|u| Some(u.speaker_id) != first) {
            idx.iter().collect()
        } else {
            Vec::new()
        }
    } else {
        idx.iter()
            .filter(|&&a| pool.iter().any(|b| compatible(&pool[a], b, hard_case)))
            .collect()
    };
    if targets.is_empty() {
        return Err(Error::PoolTooSmall(format!(
            "no utterance pair in a pool of {} satisfies {hard_case:?}",
            pool.len()
        )));
    }
    let t = pick(&targets, rng);
    let partners: Vec<&usize> = idx
        .iter()
        .filter(|&&b| compatible(&pool[t], &pool[b], hard_case))
        .collect();
    Ok((t, pick(&partners, rng)))
}

/// Draws an identity or phonetic triplet.
///
/// Identity: anchor and positive are distinct utterances of one speaker,
/// the negative comes from another speaker. Phonetic: the positive is the
/// anchor utterance itself (its own audio/video pairing), the negative is
/// any utterance with a different phoneme sequence.
pub fn sample_triplet<T, R: Rng + ?Sized>(
    pool: &[Arc<Utterance<T>>],
    rng: &mut R,
    kind: TripletKind,
) -> Result<TripletSample<T>> {
    let idx: Vec<usize> = (0..pool.len()).collect();
    match kind {
        TripletKind::Identity => {
            let anchors: Vec<&usize> = idx
                .iter()
                .filter(|&&a| {
                    let same = pool
                        .iter()
                        .enumerate()
                        .any(|(b, u)| b != a && u.speaker_id == pool[a].speaker_id);
                    let other = pool.iter().any(|u| u.speaker_id != pool[a].speaker_id);
                    same && other
                })
                .collect();
            if anchors.is_empty() {
                return Err(Error::PoolTooSmall(
                    "identity triplets need two speakers, one with two utterances".into(),
                ));
            }
            let a = pick(&anchors, rng);
            let spk = pool[a].speaker_id;
            let pos: Vec<&usize> = idx.iter().filter(|&&b| b != a && pool[b].speaker_id == spk).collect();
            let neg: Vec<&usize> = idx.iter().filter(|&&b| pool[b].speaker_id != spk).collect();
            let p = pick(&pos, rng);
            let n = pick(&neg, rng);
            Ok(TripletSample {
                anchor: pool[a].clone(),
                positive: pool[p].clone(),
                negative: pool[n].clone(),
                kind,
            })
        }
        TripletKind::Phonetic => {
            let anchors: Vec<&usize> = idx
                .iter()
                .filter(|&&a| pool.iter().any(|u| u.phonemes != pool[a].phonemes))
                .collect();
            if anchors.is_empty() {
                return Err(Error::PoolTooSmall(
                    "phonetic triplets need two distinct sentences".into(),
                ));
            }
            let a = pick(&anchors, rng);
            let neg: Vec<&usize> = idx
                .iter()
                .filter(|&&b| pool[b].phonemes != pool[a].phonemes)
                .collect();
            let n = pick(&neg, rng);
            Ok(TripletSample {
                anchor: pool[a].clone(),
                positive: pool[a].clone(),
                negative: pool[n].clone(),
                kind,
            })
        }
    }
}

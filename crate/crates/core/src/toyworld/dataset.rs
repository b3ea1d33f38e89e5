use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_speaker, synth_utterance, SpeakerProfile, Utterance, VisualStreams, WorldConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derived_rng, Domain};
use crate::signal::{read_wav, write_wav};

/// Which speakers populate the test pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    /// Fresh utterances of the training speakers.
    #[default]
    Closed,
    /// Utterances of speakers never seen in training.
    Open,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub config: WorldConfig,
    pub seed: u64,
    pub speakers: Vec<SpeakerProfile>,
    pub sentences: Vec<Vec<u8>>,
    pub train: Vec<Arc<Utterance<T>>>,
    pub val: Vec<Arc<Utterance<T>>>,
    pub test: Vec<Arc<Utterance<T>>>,
}

impl<T> Dataset<T> {
    pub fn all(&self) -> impl Iterator<Item = &Arc<Utterance<T>>> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn n_train_speakers(&self) -> usize {
        self.config.n_speakers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn sentence_bank(cfg: &WorldConfig, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = derived_rng(seed, Domain::Sentence, 0);
    let mut bank: Vec<Vec<u8>> = Vec::with_capacity(cfg.n_sentences);
    while bank.len() < cfg.n_sentences {
        let s: Vec<u8> = (0..cfg.phonemes_per_utterance)
            .map(|_| rng.random_range(0..cfg.n_phonemes as u8))
            .collect();
        if !bank.contains(&s) {
            bank.push(s);
        }
    }
    bank
}

/// Generates speakers, the sentence bank and all utterances. Output is a
/// pure function of `(cfg, seed)`; utterances are synthesized in parallel
/// from per-utterance RNG streams.
pub fn generate_dataset<T: Real>(cfg: &WorldConfig, seed: u64) -> Result<Dataset<T>> {
    cfg.validate()?;
    let n_total_speakers = match cfg.test_mode {
        TestMode::Closed => cfg.n_speakers,
        TestMode::Open => cfg.n_speakers + cfg.open_test_speakers,
    };
    let speakers: Vec<SpeakerProfile> = (0..n_total_speakers)
        .map(|s| {
            let spk_seed = derived_rng(seed, Domain::Speaker, s as u64).next_u64();
            make_speaker(spk_seed, cfg).with_id(s as u32)
        })
        .collect();
    let sentences = sentence_bank(cfg, seed);

    let mut jobs: Vec<(usize, Split)> = Vec::new();
    for s in 0..cfg.n_speakers {
        for j in 0..cfg.utterances_per_speaker {
            let split = if j % 5 == 4 { Split::Val } else { Split::Train };
            jobs.push((s, split));
        }
    }
    let test_speakers = match cfg.test_mode {
        TestMode::Closed => 0..cfg.n_speakers,
        TestMode::Open => cfg.n_speakers..n_total_speakers,
    };
    for s in test_speakers {
        for _ in 0..cfg.test_utterances_per_speaker {
            jobs.push((s, Split::Test));
        }
    }

    let made: Vec<Result<(Split, Utterance<T>)>> = jobs
        .par_iter()
        .enumerate()
        .map(|(uid, &(s, split))| {
            let mut rng = derived_rng(seed, Domain::Utterance, uid as u64);
            let sid = rng.random_range(0..sentences.len());
            let mut utt = synth_utterance::<T>(&speakers[s], &sentences[sid], rng.next_u64(), cfg)?;
            utt.utterance_id = uid as u32;
            utt.sentence_id = Some(sid as u32);
            Ok((split, utt))
        })
        .collect();

    let mut ds = Dataset {
        config: cfg.clone(),
        seed,
        speakers,
        sentences,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for item in made {
        let (split, utt) = item?;
        let slot = match split {
            Split::Train => &mut ds.train,
            Split::Val => &mut ds.val,
            Split::Test => &mut ds.test,
        };
        slot.push(Arc::new(utt));
    }
    Ok(ds)
}

/// One line of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utterance_id: u32,
    pub speaker_id: u32,
    pub split: String,
    pub sentence_id: Option<u32>,
    /// Phoneme symbols joined with `-`.
    pub phonemes: String,
    pub wav: String,
    pub face: String,
    pub lip: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    seed: u64,
    config: WorldConfig,
    sentences: Vec<Vec<u8>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamHeader {
    rows: usize,
    cols: usize,
    dtype: String,
    byte_order: String,
    fps: f64,
}

const DATASET_FORMAT: u32 = 1;

fn write_stream<T: Real>(dir: &Path, rel: &str, data: &Array2<T>, fps: f64) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(dir.join(rel), bytes)?;
    let header = StreamHeader {
        rows: data.nrows(),
        cols: data.ncols(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        fps,
    };
    fs::write(dir.join(format!("{rel}.json")), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

fn read_stream<T: Real>(dir: &Path, rel: &str) -> Result<(Array2<T>, f64)> {
    let header: StreamHeader = serde_json::from_slice(&fs::read(dir.join(format!("{rel}.json")))?)?;
    if header.dtype != "float32" || header.byte_order != "little" {
        return Err(Error::InvalidInput(format!("unsupported stream encoding in {rel}")));
    }
    let bytes = fs::read(dir.join(rel))?;
    if bytes.len() != header.rows * header.cols * 4 {
        return Err(Error::InvalidInput(format!(
            "stream {rel}: expected {} bytes, found {}",
            header.rows * header.cols * 4,
            bytes.len()
        )));
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let arr = Array2::from_shape_vec((header.rows, header.cols), values)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((arr, header.fps))
}

/// Writes the dataset under `dir`: `dataset.json`, `speakers.json`,
/// `manifest.csv`, 16-bit WAV audio and float32 visual streams with JSON
/// sidecars. Returns the manifest rows in write order.
pub fn write_dataset<T: Real>(ds: &Dataset<T>, dir: &Path) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir.join("audio"))?;
    fs::create_dir_all(dir.join("streams"))?;
    let header = DatasetHeader {
        format_version: DATASET_FORMAT,
        seed: ds.seed,
        config: ds.config.clone(),
        sentences: ds.sentences.clone(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&header)?)?;
    fs::write(dir.join("speakers.json"), serde_json::to_vec_pretty(&ds.speakers)?)?;

    let mut rows = Vec::new();
    let splits = [
        (Split::Train, &ds.train),
        (Split::Val, &ds.val),
        (Split::Test, &ds.test),
    ];
    for (split, utts) in splits {
        for u in utts {
            let stem = format!("u{:05}", u.utterance_id);
            let row = ManifestRow {
                utterance_id: u.utterance_id,
                speaker_id: u.speaker_id,
                split: split.as_str().into(),
                sentence_id: u.sentence_id,
                phonemes: u.phonemes.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-"),
                wav: format!("audio/{stem}.wav"),
                face: format!("streams/{stem}.face.f32"),
                lip: format!("streams/{stem}.lip.f32"),
            };
            write_wav(dir.join(&row.wav), &u.audio)?;
            write_stream(dir, &row.face, &u.visuals.face, u.visuals.fps)?;
            write_stream(dir, &row.lip, &u.visuals.lip, u.visuals.fps)?;
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    let header: DatasetHeader = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    if header.format_version != DATASET_FORMAT {
        return Err(Error::InvalidInput(format!(
            "dataset format {} not supported",
            header.format_version
        )));
    }
    let speakers: Vec<SpeakerProfile> = serde_json::from_slice(&fs::read(dir.join("speakers.json"))?)?;
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    let rows: Vec<ManifestRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    let cfg = header.config;
    let mut ds = Dataset {
        config: cfg.clone(),
        seed: header.seed,
        speakers,
        sentences: header.sentences,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for row in rows {
        let speaker = ds
            .speakers
            .iter()
            .find(|s| s.speaker_id == row.speaker_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown speaker {}", row.speaker_id)))?;
        let phonemes = row
            .phonemes
            .split('-')
            .map(|p| p.parse::<u8>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidInput(format!("phoneme string: {e}")))?;
        let (face, fps) = read_stream(dir, &row.face)?;
        let (lip, _) = read_stream(dir, &row.lip)?;
        let seg = cfg.duration / phonemes.len() as f64;
        let utt = Utterance {
            utterance_id: row.utterance_id,
            speaker_id: row.speaker_id,
            timbre_cluster: speaker.timbre_cluster,
            sentence_id: row.sentence_id,
            durations: vec![seg; phonemes.len()],
            phonemes,
            audio: read_wav(dir.join(&row.wav))?,
            visuals: VisualStreams { face, lip, fps },
        };
        let slot = match row.split.as_str() {
            "train" => &mut ds.train,
            "val" => &mut ds.val,
            "test" => &mut ds.test,
            other => return Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        };
        slot.push(Arc::new(utt));
    }
    Ok(ds)
}

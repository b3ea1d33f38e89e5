//! Frozen proxy embedding networks: audio/visual identity and audio/visual
//! phonetic extractors.
//!
//! Each extractor is a per-frame two-layer network whose outputs are
//! projected to the unit sphere, mean-pooled over time and renormalized.
//! Identity nets are trained as utterance-level speaker classifiers and
//! phonetic nets as frame-level phoneme classifiers. The two modalities of
//! each kind share one cosine-classifier head and are additionally pulled
//! together utterance by utterance, so that audio and visual embeddings of
//! the same utterance live in one space and cosine distances between them
//! are meaningful.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{log_power, log_power_backward, KAPPA, SCALE};
use crate::instrument::{self, Op};
use crate::nn::{silu, silu_backward, Adam, AdamConfig, Dense, Parameters};
use crate::real::Real;
use crate::rng::{derived_rng, Domain};
use crate::signal::{StftConfig, StftPlan, Waveform};
use crate::toyworld::{Dataset, Utterance, VisualStreams};

const NORM_FLOOR: f64 = 1e-12;
const CHECKPOINT_KIND: &str = "extractors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub hidden: usize,
    pub d_id: usize,
    pub d_ph: usize,
    /// Inverse temperature of the cosine classifiers.
    pub logit_scale: f64,
    /// Weight of the per-utterance audio/visual agreement term.
    pub align_weight: f64,
    pub step_size: f64,
    pub batch_utterances: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub speaker_floor: f64,
    pub audio_phoneme_floor: f64,
    pub visual_phoneme_floor: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            d_id: 64,
            d_ph: 64,
            logit_scale: 10.0,
            align_weight: 1.0,
            step_size: 3e-3,
            batch_utterances: 8,
            min_epochs: 6,
            max_epochs: 40,
            speaker_floor: 0.90,
            audio_phoneme_floor: 0.80,
            visual_phoneme_floor: 0.75,
        }
    }
}

/// Held-out accuracies measured on the validation split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub speaker_audio: f64,
    pub speaker_visual: f64,
    pub phoneme_audio: f64,
    pub phoneme_visual: f64,
    pub epochs: usize,
}

/// Unit-norm embeddings of one (audio, visuals) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub i_a: Array1<T>,
    pub i_v: Array1<T>,
    pub p_a: Array1<T>,
    pub p_v: Array1<T>,
}

/// Per-frame network: affine input normalization, SiLU hidden layer and a
/// linear output projected onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameNet<T> {
    pub(crate) shift: Array2<T>,
    pub(crate) inv_scale: Array2<T>,
    pub(crate) hidden: Dense<T>,
    pub(crate) out: Dense<T>,
}

pub(crate) struct FramePass<T> {
    xn: Array2<T>,
    pre: Array2<T>,
    h: Array2<T>,
    z: Array2<T>,
    norms: Array1<T>,
    u: Array2<T>,
}

impl<T: Real> FrameNet<T> {
    fn new<R: rand::Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            shift: Array2::zeros((1, input)),
            inv_scale: Array2::ones((1, input)),
            hidden: Dense::new(input, hidden, rng),
            out: Dense::new(hidden, output, rng),
        }
    }

    fn empty(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            shift: Array2::zeros((1, input)),
            inv_scale: Array2::ones((1, input)),
            hidden: Dense::zeros(input, hidden),
            out: Dense::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    /// Sets the input normalization to the per-feature mean and spread of `x`.
    fn fit_normalization(&mut self, x: &Array2<T>) {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), T::zero());
        self.shift = mean.insert_axis(Axis(0));
        self.inv_scale = var.mapv(|v| T::one() / (v.sqrt() + T::lit(1e-3))).insert_axis(Axis(0));
    }

    fn forward(&self, x: &ArrayView2<T>) -> FramePass<T> {
        instrument::record(Op::Extractor);
        let xn = (x - &self.shift) * &self.inv_scale;
        let pre = self.hidden.forward(&xn.view());
        let h = pre.mapv(silu);
        let z = self.out.forward(&h.view());
        let (u, norms) = unit_rows(&z);
        FramePass { xn, pre, h, z, norms, u }
    }

    /// Backpropagates a gradient on the unit rows `u`.
    fn backward(&self, pass: &FramePass<T>, du: &Array2<T>, grad: Option<&mut FrameNet<T>>, need_input: bool) -> Option<Array2<T>> {
        let dz = unit_rows_backward(&pass.z, &pass.norms, du);
        let (g_hidden, g_out) = match grad {
            Some(g) => (Some(&mut g.hidden), Some(&mut g.out)),
            None => (None, None),
        };
        let dh = self.out.backward(&pass.h.view(), &dz, g_out, true).expect("requested");
        let mut dpre = dh;
        ndarray::Zip::from(&mut dpre).and(&pass.pre).for_each(|g, &p| *g = silu_backward(p, *g));
        let need = need_input;
        let dxn = self.hidden.backward(&pass.xn.view(), &dpre, g_hidden, need);
        dxn.map(|d| d * &self.inv_scale)
    }
}

impl<T: Real> Parameters<T> for FrameNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        self.hidden.visit("hidden", f);
        self.out.visit("out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        self.hidden.visit_mut("hidden", f);
        self.out.visit_mut("out", f);
    }
}

fn unit_rows<T: Real>(z: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let floor = T::lit(NORM_FLOOR);
    let norms = z.map_axis(Axis(1), |r| (r.dot(&r) + floor).sqrt());
    let u = z / &norms.view().insert_axis(Axis(1));
    (u, norms)
}

fn unit_rows_backward<T: Real>(z: &Array2<T>, norms: &Array1<T>, du: &Array2<T>) -> Array2<T> {
    let mut dz = Array2::zeros(z.dim());
    for ((mut out, zr), (dur, &n)) in dz
        .outer_iter_mut()
        .zip(z.outer_iter())
        .zip(du.outer_iter().zip(norms.iter()))
    {
        let proj = zr.dot(&dur) / (n * n * n);
        out.assign(&(&dur / n));
        out.scaled_add(-proj, &zr);
    }
    dz
}

/// Time pooling followed by renormalization.
struct Pool<T> {
    m: Array1<T>,
    n: T,
    e: Array1<T>,
}

fn pool<T: Real>(u: &Array2<T>) -> Pool<T> {
    let m = u.mean_axis(Axis(0)).expect("non-empty");
    let n = (m.dot(&m) + T::lit(NORM_FLOOR)).sqrt();
    let e = &m / n;
    Pool { m, n, e }
}

fn pool_backward<T: Real>(p: &Pool<T>, de: &Array1<T>, frames: usize) -> Array2<T> {
    let proj = p.m.dot(de) / (p.n * p.n * p.n);
    let mut dm = de / p.n;
    dm.scaled_add(-proj, &p.m);
    dm /= T::from_usize(frames).unwrap();
    let mut du = Array2::zeros((frames, dm.len()));
    du.rows_mut().into_iter().for_each(|mut r| r.assign(&dm));
    du
}

/// Forward state of the two audio extractors on one spectrogram, kept for
/// backpropagation into the audio.
pub struct AudioPass<T> {
    id: FramePass<T>,
    id_pool: Pool<T>,
    ph: FramePass<T>,
    ph_pool: Pool<T>,
}

impl<T: Real> AudioPass<T> {
    pub fn i_a(&self) -> &Array1<T> {
        &self.id_pool.e
    }

    pub fn p_a(&self) -> &Array1<T> {
        &self.ph_pool.e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenExtractors<T> {
    pub(crate) config: ExtractorConfig,
    pub(crate) stft: StftConfig,
    pub(crate) sample_rate: u32,
    pub(crate) seed: u64,
    pub(crate) audio_id: FrameNet<T>,
    pub(crate) visual_id: FrameNet<T>,
    pub(crate) audio_ph: FrameNet<T>,
    pub(crate) visual_ph: FrameNet<T>,
    /// `d_id x n_speakers` shared identity classifier.
    pub(crate) id_head: Array2<T>,
    /// `d_ph x n_phonemes` shared phoneme classifier.
    pub(crate) ph_head: Array2<T>,
    pub(crate) report: AccuracyReport,
    frozen: bool,
}

impl<T: Real> FrozenExtractors<T> {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn report(&self) -> &AccuracyReport {
        &self.report
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft
    }

    pub fn d_id(&self) -> usize {
        self.audio_id.output_dim()
    }

    pub fn d_ph(&self) -> usize {
        self.audio_ph.output_dim()
    }

    /// Every network and head, flattened in a fixed order; used to audit
    /// that parameters never change after freezing.
    pub fn fingerprint(&self) -> Vec<T> {
        let mut v = Vec::new();
        for net in [&self.audio_id, &self.visual_id, &self.audio_ph, &self.visual_ph] {
            v.extend(net.flatten());
            v.extend(net.shift.iter().copied());
            v.extend(net.inv_scale.iter().copied());
        }
        v.extend(self.id_head.iter().copied());
        v.extend(self.ph_head.iter().copied());
        v
    }

    fn check_ready(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::NotFrozen)
        }
    }

    /// Runs both audio extractors on a complex spectrogram.
    pub fn audio_forward(&self, spec: &Array2<Complex<T>>) -> Result<AudioPass<T>> {
        self.check_ready()?;
        let f = self.audio_id.input_dim();
        if spec.ncols() != f || spec.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                what: "audio extractor input",
                expected: (spec.nrows().max(1), f),
                got: spec.dim(),
            });
        }
        let feats = log_power(spec);
        let id = self.audio_id.forward(&feats.view());
        let ph = self.audio_ph.forward(&feats.view());
        Ok(AudioPass {
            id_pool: pool(&id.u),
            ph_pool: pool(&ph.u),
            id,
            ph,
        })
    }

    /// Gradient of `<d_i_a, i_a> + <d_p_a, p_a>` with respect to the
    /// spectrogram the pass was computed on.
    pub fn audio_backward(
        &self,
        spec: &Array2<Complex<T>>,
        pass: &AudioPass<T>,
        d_i_a: &Array1<T>,
        d_p_a: &Array1<T>,
    ) -> Array2<Complex<T>> {
        let frames = spec.nrows();
        let du_id = pool_backward(&pass.id_pool, d_i_a, frames);
        let du_ph = pool_backward(&pass.ph_pool, d_p_a, frames);
        let mut dfeat = self.audio_id.backward(&pass.id, &du_id, None, true).expect("requested");
        dfeat += &self.audio_ph.backward(&pass.ph, &du_ph, None, true).expect("requested");
        log_power_backward(spec, &dfeat)
    }

    fn check_visuals(&self, visuals: &VisualStreams<T>) -> Result<()> {
        let (fd, ld) = (self.visual_id.input_dim(), self.visual_ph.input_dim());
        if visuals.face.ncols() != fd || visuals.n_frames() == 0 {
            return Err(Error::ShapeMismatch {
                what: "face stream",
                expected: (visuals.n_frames().max(1), fd),
                got: visuals.face.dim(),
            });
        }
        if visuals.lip.ncols() != ld || visuals.lip.nrows() != visuals.face.nrows() {
            return Err(Error::ShapeMismatch {
                what: "lip stream",
                expected: (visuals.face.nrows(), ld),
                got: visuals.lip.dim(),
            });
        }
        Ok(())
    }

    /// `(i_v, p_v)` for one visual stream pair.
    pub fn visual_embeddings(&self, visuals: &VisualStreams<T>) -> Result<(Array1<T>, Array1<T>)> {
        self.check_ready()?;
        self.check_visuals(visuals)?;
        let id = self.visual_id.forward(&visuals.face.view());
        let ph = self.visual_ph.forward(&visuals.lip.view());
        Ok((pool(&id.u).e, pool(&ph.u).e))
    }

    fn spectrogram(&self, audio: &Waveform<T>) -> Result<Array2<Complex<T>>> {
        if audio.sample_rate != self.sample_rate {
            return Err(Error::RateMismatch(audio.sample_rate, self.sample_rate));
        }
        if audio.len() < self.stft.window_size {
            return Err(Error::TooShort {
                what: "audio extractor",
                need: self.stft.window_size,
                got: audio.len(),
            });
        }
        StftPlan::new(self.stft)?.forward(&audio.samples)
    }

    /// `(i_a, p_a)` of a waveform.
    pub fn audio_embeddings(&self, audio: &Waveform<T>) -> Result<(Array1<T>, Array1<T>)> {
        let spec = self.spectrogram(audio)?;
        let pass = self.audio_forward(&spec)?;
        Ok((pass.id_pool.e, pass.ph_pool.e))
    }

    /// Gradient of `<d_i_a, i_a(audio)> + <d_p_a, p_a(audio)>` with respect to
    /// the waveform samples.
    pub fn audio_embedding_vjp(&self, audio: &Waveform<T>, d_i_a: &Array1<T>, d_p_a: &Array1<T>) -> Result<Vec<T>> {
        let spec = self.spectrogram(audio)?;
        let pass = self.audio_forward(&spec)?;
        let dspec = self.audio_backward(&spec, &pass, d_i_a, d_p_a);
        StftPlan::new(self.stft)?.forward_adjoint(&dspec, audio.len())
    }

    /// Speaker posteriors argmax from the audio identity embedding.
    pub fn classify_speaker(&self, i_a: &Array1<T>) -> usize {
        argmax(&i_a.dot(&self.id_head))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let meta = serde_json::json!({
            "config": self.config,
            "stft": self.stft,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "report": self.report,
            "dims": {
                "audio": self.audio_id.input_dim(),
                "face": self.visual_id.input_dim(),
                "lip": self.visual_ph.input_dim(),
                "n_speakers": self.id_head.ncols(),
                "n_phonemes": self.ph_head.ncols(),
            },
            "features": {"kappa": KAPPA, "scale": SCALE},
        });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, meta);
        for (name, net) in self.nets() {
            ck.push(format!("{name}.shift"), &net.shift);
            ck.push(format!("{name}.inv_scale"), &net.inv_scale);
            ck.push_params(&format!("{name}."), net);
        }
        ck.push("id_head", &self.id_head);
        ck.push("ph_head", &self.ph_head);
        ck
    }

    fn nets(&self) -> [(&'static str, &FrameNet<T>); 4] {
        [
            ("audio_id", &self.audio_id),
            ("visual_id", &self.visual_id),
            ("audio_ph", &self.audio_ph),
            ("visual_ph", &self.visual_ph),
        ]
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, CHECKPOINT_KIND)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Dims {
            audio: usize,
            face: usize,
            lip: usize,
            n_speakers: usize,
            n_phonemes: usize,
        }
        let m = &ck.meta;
        let config: ExtractorConfig = serde_json::from_value(m["config"].clone())?;
        let dims: Dims = serde_json::from_value(m["dims"].clone())?;
        let mut ex = Self {
            stft: serde_json::from_value(m["stft"].clone())?,
            sample_rate: serde_json::from_value(m["sample_rate"].clone())?,
            seed: serde_json::from_value(m["seed"].clone())?,
            report: serde_json::from_value(m["report"].clone())?,
            audio_id: FrameNet::empty(dims.audio, config.hidden, config.d_id),
            visual_id: FrameNet::empty(dims.face, config.hidden, config.d_id),
            audio_ph: FrameNet::empty(dims.audio, config.hidden, config.d_ph),
            visual_ph: FrameNet::empty(dims.lip, config.hidden, config.d_ph),
            id_head: ck.get("id_head")?.clone(),
            ph_head: ck.get("ph_head")?.clone(),
            config,
            frozen: true,
        };
        if ex.id_head.dim() != (ex.config.d_id, dims.n_speakers) || ex.ph_head.dim() != (ex.config.d_ph, dims.n_phonemes) {
            return Err(Error::CorruptCheckpoint("classifier head shape".into()));
        }
        for (name, net) in [
            ("audio_id", &mut ex.audio_id),
            ("visual_id", &mut ex.visual_id),
            ("audio_ph", &mut ex.audio_ph),
            ("visual_ph", &mut ex.visual_ph),
        ] {
            ck.load_params(&format!("{name}."), net)?;
            for (suffix, t) in [("shift", &mut net.shift), ("inv_scale", &mut net.inv_scale)] {
                let src = ck.get(&format!("{name}.{suffix}"))?;
                if src.dim() != t.dim() {
                    return Err(Error::CorruptCheckpoint(format!("{name}.{suffix} shape")));
                }
                t.assign(src);
            }
        }
        Ok(ex)
    }
}

/// Embeddings of `audio` paired with `visuals`.
pub fn extract_embeddings<T: Real>(
    ex: &FrozenExtractors<T>,
    audio: &Waveform<T>,
    visuals: &VisualStreams<T>,
) -> Result<EmbeddingSet<T>> {
    let (i_a, p_a) = ex.audio_embeddings(audio)?;
    let (i_v, p_v) = ex.visual_embeddings(visuals)?;
    Ok(EmbeddingSet { i_a, i_v, p_a, p_v })
}

fn argmax<T: Real>(v: &Array1<T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trainable state during pretraining.
#[derive(Clone)]
struct Bundle<T> {
    a_id: FrameNet<T>,
    v_id: FrameNet<T>,
    a_ph: FrameNet<T>,
    v_ph: FrameNet<T>,
    id_head: Array2<T>,
    ph_head: Array2<T>,
}

impl<T: Real> Parameters<T> for Bundle<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        self.a_id.visit(f);
        self.v_id.visit(f);
        self.a_ph.visit(f);
        self.v_ph.visit(f);
        f("id_head", &self.id_head);
        f("ph_head", &self.ph_head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        self.a_id.visit_mut(f);
        self.v_id.visit_mut(f);
        self.a_ph.visit_mut(f);
        self.v_ph.visit_mut(f);
        f("id_head", &mut self.id_head);
        f("ph_head", &mut self.ph_head);
    }
}

/// Per-utterance inputs and frame labels.
struct Example<T> {
    feats: Array2<T>,
    speaker: usize,
    audio_labels: Vec<usize>,
    video_labels: Vec<usize>,
    utt: Arc<Utterance<T>>,
}

fn softmax_ce_grad<T: Real>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let mut g = Array2::zeros(logits.dim());
    let mut loss = T::zero();
    for ((row, mut grow), &y) in logits.outer_iter().zip(g.outer_iter_mut()).zip(labels) {
        let mx = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let ex = row.mapv(|v| (v - mx).exp());
        let z = ex.sum();
        loss += z.ln() + mx - row[y];
        grow.assign(&(ex / z));
        grow[y] -= T::one();
    }
    (loss, g)
}

fn frame_labels<T>(utt: &Utterance<T>, times: impl Iterator<Item = f64>) -> Vec<usize> {
    times.map(|t| utt.phoneme_at(t) as usize).collect()
}

fn build_examples<T: Real>(utts: &[Arc<Utterance<T>>], plan: &StftPlan<T>, speaker_index: &[usize]) -> Result<Vec<Example<T>>> {
    let cfg = *plan.config();
    utts.iter()
        .map(|u| {
            let spec = plan.forward(&u.audio.samples)?;
            let sr = u.audio.sample_rate as f64;
            let fps = u.visuals.fps;
            Ok(Example {
                feats: log_power(&spec),
                speaker: speaker_index[u.speaker_id as usize],
                audio_labels: frame_labels(u, (0..spec.nrows()).map(|t| (t * cfg.hop) as f64 / sr)),
                video_labels: frame_labels(u, (0..u.visuals.n_frames()).map(|k| (k as f64 + 0.5) / fps)),
                utt: u.clone(),
            })
        })
        .collect()
}

/// Loss and accumulated gradients for one utterance.
fn example_step<T: Real>(b: &Bundle<T>, ex: &Example<T>, cfg: &ExtractorConfig, grad: &mut Bundle<T>) -> T {
    let s = T::lit(cfg.logit_scale);
    let beta = T::lit(cfg.align_weight);
    let mut loss = T::zero();

    // identity: utterance-level classification of both modalities plus agreement
    let pa = b.a_id.forward(&ex.feats.view());
    let pv = b.v_id.forward(&ex.utt.visuals.face.view());
    let (qa, qv) = (pool(&pa.u), pool(&pv.u));
    let mut de = [Array1::zeros(qa.e.len()), Array1::zeros(qv.e.len())];
    for (k, q) in [&qa, &qv].into_iter().enumerate() {
        let e2 = q.e.view().insert_axis(Axis(0));
        let logits = e2.dot(&b.id_head) * s;
        let (l, dl) = softmax_ce_grad(&logits, &[ex.speaker]);
        loss += l;
        de[k] += &(dl.dot(&b.id_head.t()).row(0).to_owned() * s);
        grad.id_head.scaled_add(s, &e2.t().dot(&dl));
    }
    loss += beta * (T::one() - qa.e.dot(&qv.e));
    de[0].scaled_add(-beta, &qv.e);
    de[1].scaled_add(-beta, &qa.e);
    b.a_id.backward(&pa, &pool_backward(&qa, &de[0], pa.u.nrows()), Some(&mut grad.a_id), false);
    b.v_id.backward(&pv, &pool_backward(&qv, &de[1], pv.u.nrows()), Some(&mut grad.v_id), false);

    // phonetic: frame-level classification plus pooled agreement
    let pa = b.a_ph.forward(&ex.feats.view());
    let pv = b.v_ph.forward(&ex.utt.visuals.lip.view());
    let (qa, qv) = (pool(&pa.u), pool(&pv.u));
    let mut du = Vec::with_capacity(2);
    for (pass, labels) in [(&pa, &ex.audio_labels), (&pv, &ex.video_labels)] {
        let inv_n = T::one() / T::from_usize(labels.len()).unwrap();
        let logits = pass.u.dot(&b.ph_head) * s;
        let (l, dl) = softmax_ce_grad(&logits, labels);
        loss += l * inv_n;
        let dl = dl * (s * inv_n);
        du.push(dl.dot(&b.ph_head.t()));
        ndarray::linalg::general_mat_mul(T::one(), &pass.u.t(), &dl, T::one(), &mut grad.ph_head);
    }
    loss += beta * (T::one() - qa.e.dot(&qv.e));
    du[0] += &pool_backward(&qa, &(&qv.e * -beta), pa.u.nrows());
    du[1] += &pool_backward(&qv, &(&qa.e * -beta), pv.u.nrows());
    b.a_ph.backward(&pa, &du[0], Some(&mut grad.a_ph), false);
    b.v_ph.backward(&pv, &du[1], Some(&mut grad.v_ph), false);
    loss
}

fn evaluate<T: Real>(b: &Bundle<T>, examples: &[Example<T>]) -> AccuracyReport {
    let frac = |hit: usize, n: usize| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    let (mut spk_a, mut spk_v) = (0, 0);
    let (mut ph_a, mut n_a, mut ph_v, mut n_v) = (0, 0, 0, 0);
    for ex in examples {
        let ea = pool(&b.a_id.forward(&ex.feats.view()).u).e;
        let ev = pool(&b.v_id.forward(&ex.utt.visuals.face.view()).u).e;
        spk_a += (argmax(&ea.dot(&b.id_head)) == ex.speaker) as usize;
        spk_v += (argmax(&ev.dot(&b.id_head)) == ex.speaker) as usize;
        for (net, input, labels, hit, n) in [
            (&b.a_ph, &ex.feats, &ex.audio_labels, &mut ph_a, &mut n_a),
            (&b.v_ph, &ex.utt.visuals.lip, &ex.video_labels, &mut ph_v, &mut n_v),
        ] {
            let logits = net.forward(&input.view()).u.dot(&b.ph_head);
            for (row, &y) in logits.outer_iter().zip(labels) {
                *hit += (argmax(&row.to_owned()) == y) as usize;
            }
            *n += labels.len();
        }
    }
    AccuracyReport {
        speaker_audio: frac(spk_a, examples.len()),
        speaker_visual: frac(spk_v, examples.len()),
        phoneme_audio: frac(ph_a, n_a),
        phoneme_visual: frac(ph_v, n_v),
        epochs: 0,
    }
}

/// Trains the four extractors on the training split and checks held-out
/// accuracy on the validation split. Fails with [`Error::AccuracyFloor`]
/// naming the weakest net if a floor is still missed after `max_epochs`.
pub fn pretrain_extractors<T: Real>(ds: &Dataset<T>, cfg: &ExtractorConfig, seed: u64) -> Result<FrozenExtractors<T>> {
    let n_speakers = ds.train.iter().map(|u| u.speaker_id).collect::<std::collections::BTreeSet<_>>();
    if n_speakers.len() < 8 || ds.train.len() + ds.val.len() < 200 {
        return Err(Error::PoolTooSmall(format!(
            "extractor pretraining needs >= 8 speakers and >= 200 utterances, got {} and {}",
            n_speakers.len(),
            ds.train.len() + ds.val.len()
        )));
    }
    if ds.val.is_empty() {
        return Err(Error::EmptyBatch("validation split"));
    }
    // Speaker ids need not be contiguous (open test speakers are excluded).
    let max_id = ds.speakers.iter().map(|s| s.speaker_id as usize).max().unwrap_or(0);
    let mut speaker_index = vec![usize::MAX; max_id + 1];
    for (k, &id) in n_speakers.iter().enumerate() {
        speaker_index[id as usize] = k;
    }
    let stft = StftConfig::default();
    let plan = StftPlan::<T>::new(stft)?;
    let train = build_examples(&ds.train, &plan, &speaker_index)?;
    let val = build_examples(&ds.val, &plan, &speaker_index)?;

    let mut rng = derived_rng(seed, Domain::Pretrain, 0);
    let n_freq = stft.n_freq();
    let (face, lip) = (ds.config.d_face, ds.config.d_lip());
    let mut b = Bundle {
        a_id: FrameNet::new(n_freq, cfg.hidden, cfg.d_id, &mut rng),
        v_id: FrameNet::new(face, cfg.hidden, cfg.d_id, &mut rng),
        a_ph: FrameNet::new(n_freq, cfg.hidden, cfg.d_ph, &mut rng),
        v_ph: FrameNet::new(lip, cfg.hidden, cfg.d_ph, &mut rng),
        id_head: crate::nn::glorot(cfg.d_id, n_speakers.len(), cfg.d_id, n_speakers.len(), &mut rng),
        ph_head: crate::nn::glorot(cfg.d_ph, ds.config.n_phonemes, cfg.d_ph, ds.config.n_phonemes, &mut rng),
    };
    let stack = |f: &dyn Fn(&Example<T>) -> ArrayView2<T>| {
        let views: Vec<_> = train.iter().map(f).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    let audio_all = stack(&|e| e.feats.view());
    b.a_id.fit_normalization(&audio_all);
    b.a_ph.fit_normalization(&audio_all);
    b.v_id.fit_normalization(&stack(&|e| e.utt.visuals.face.view()));
    b.v_ph.fit_normalization(&stack(&|e| e.utt.visuals.lip.view()));
    drop(audio_all);

    let mut adam = Adam::new(AdamConfig {
        step_size: cfg.step_size,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = AccuracyReport::default();
    let batch = cfg.batch_utterances.max(1);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = b.zeros_like();
            for &i in chunk {
                example_step(&b, &train[i], cfg, &mut grad);
            }
            let inv = T::one() / T::from_usize(chunk.len()).unwrap();
            grad.visit_mut(&mut |_, t| t.mapv_inplace(|v| v * inv));
            adam.step(&mut b, &grad);
        }
        report = evaluate(&b, &val);
        report.epochs = epoch;
        let floors_met = report.speaker_audio >= cfg.speaker_floor
            && report.phoneme_audio >= cfg.audio_phoneme_floor
            && report.phoneme_visual >= cfg.visual_phoneme_floor;
        if floors_met && epoch >= cfg.min_epochs {
            break;
        }
    }
    let checks = [
        ("audio_speaker", report.speaker_audio, cfg.speaker_floor),
        ("audio_phoneme", report.phoneme_audio, cfg.audio_phoneme_floor),
        ("visual_phoneme", report.phoneme_visual, cfg.visual_phoneme_floor),
    ];
    if let Some(&(net, achieved, floor)) = checks.iter().find(|c| c.1 < c.2) {
        return Err(Error::AccuracyFloor {
            net,
            achieved,
            floor,
            epochs: report.epochs,
        });
    }
    Ok(FrozenExtractors {
        config: cfg.clone(),
        stft,
        sample_rate: ds.config.sample_rate,
        seed,
        audio_id: b.a_id,
        visual_id: b.v_id,
        audio_ph: b.a_ph,
        visual_ph: b.v_ph,
        id_head: b.id_head,
        ph_head: b.ph_head,
        report,
        frozen: true,
    })
}

/// Extractors with random weights, for gradient checks and smoke tests on
/// tiny geometries.
pub fn random_extractors<T: Real>(
    stft: StftConfig,
    sample_rate: u32,
    face_dim: usize,
    lip_dim: usize,
    cfg: &ExtractorConfig,
    seed: u64,
) -> Result<FrozenExtractors<T>> {
    stft.validate()?;
    let mut rng = derived_rng(seed, Domain::Init, 77);
    let f = stft.n_freq();
    Ok(FrozenExtractors {
        config: cfg.clone(),
        stft,
        sample_rate,
        seed,
        audio_id: FrameNet::new(f, cfg.hidden, cfg.d_id, &mut rng),
        visual_id: FrameNet::new(face_dim, cfg.hidden, cfg.d_id, &mut rng),
        audio_ph: FrameNet::new(f, cfg.hidden, cfg.d_ph, &mut rng),
        visual_ph: FrameNet::new(lip_dim, cfg.hidden, cfg.d_ph, &mut rng),
        id_head: Array2::zeros((cfg.d_id, 1)),
        ph_head: Array2::zeros((cfg.d_ph, 1)),
        report: AccuracyReport::default(),
        frozen: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (FrozenExtractors<f64>, StftConfig) {
        let stft = StftConfig {
            nfft: 32,
            hop: 8,
            window_size: 32,
            center: true,
        };
        let cfg = ExtractorConfig {
            hidden: 6,
            d_id: 5,
            d_ph: 4,
            ..ExtractorConfig::default()
        };
        (random_extractors(stft, 16000, 3, 2, &cfg, 4).unwrap(), stft)
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let (ex, _) = tiny();
        let audio = Waveform::new(noise(120, 1), 16000).unwrap();
        let mut vis = VisualStreams::zeros(5, 3, 2, 25.0);
        vis.face.mapv_inplace(|_| 0.3);
        vis.lip[(1, 1)] = 1.0;
        let a = extract_embeddings(&ex, &audio, &vis).unwrap();
        let b = extract_embeddings(&ex, &audio, &vis).unwrap();
        assert_eq!(a, b);
        for v in [&a.i_a, &a.i_v, &a.p_a, &a.p_v] {
            assert!((v.dot(v).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn geometry_errors() {
        let (ex, _) = tiny();
        let short = Waveform::new(vec![0.1; 10], 16000).unwrap();
        assert!(matches!(ex.audio_embeddings(&short), Err(Error::TooShort { .. })));
        let wrong_rate = Waveform::new(vec![0.1; 100], 8000).unwrap();
        assert!(matches!(ex.audio_embeddings(&wrong_rate), Err(Error::RateMismatch(..))));
        let vis = VisualStreams::<f64>::zeros(5, 4, 2, 25.0);
        assert!(matches!(ex.visual_embeddings(&vis), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unfrozen_extractors_refuse_to_run() {
        let (mut ex, _) = tiny();
        ex.frozen = false;
        let audio = Waveform::new(noise(120, 1), 16000).unwrap();
        assert!(matches!(ex.audio_embeddings(&audio), Err(Error::NotFrozen)));
    }

    #[test]
    fn audio_gradient_matches_finite_differences() {
        let (ex, _) = tiny();
        let x = noise(100, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gi = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let gp = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
        let f = |s: &[f64]| {
            let (i, p) = ex.audio_embeddings(&Waveform::new(s.to_vec(), 16000).unwrap()).unwrap();
            i.dot(&gi) + p.dot(&gp)
        };
        let grad = ex
            .audio_embedding_vjp(&Waveform::new(x.clone(), 16000).unwrap(), &gi, &gp)
            .unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in (0..100).step_by(2) {
            let mut p = x.clone();
            let mut m = x.clone();
            p[k] += h;
            m[k] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            worst = worst.max((num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn frame_net_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FrameNet::<f64>::new(4, 5, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let de = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let loss = |n: &FrameNet<f64>| pool(&n.forward(&x.view()).u).e.dot(&de);
        let pass = net.forward(&x.view());
        let q = pool(&pass.u);
        let mut g = net.zeros_like();
        net.backward(&pass, &pool_backward(&q, &de, 6), Some(&mut g), false);
        let analytic = g.flatten();
        let base = net.flatten();
        let h = 1e-6;
        for k in 0..base.len() {
            let bump = |d: f64| {
                let mut n = net.clone();
                let mut i = 0;
                n.visit_mut(&mut |_, t| {
                    for v in t.iter_mut() {
                        if i == k {
                            *v += d;
                        }
                        i += 1;
                    }
                });
                loss(&n)
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((num - analytic[k]).abs() <= 1e-6 * (1.0 + num.abs()), "coord {k}: {num} vs {}", analytic[k]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ex, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.ckpt");
        ex.save(&path).unwrap();
        let back = FrozenExtractors::<f64>::load(&path).unwrap();
        assert_eq!(back, ex);
        assert_eq!(back.to_checkpoint().to_bytes().unwrap(), ex.to_checkpoint().to_bytes().unwrap());
    }
}

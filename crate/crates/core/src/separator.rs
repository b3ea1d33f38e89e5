//! Audio-visual mask-predicting separator.
//!
//! Audio, face and lip encoders are per-frame dense layers. Visual features
//! are repeated onto the audio frame grid (each audio frame takes the video
//! frame covering its center time) and channel-concatenated with the audio
//! features. A temporal encoder–decoder with skip connections maps the
//! concatenation to a logistic mask that scales the mixture spectrogram;
//! the mixture phase is reused for resynthesis.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::log_power;
use crate::instrument::{self, Op};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat_cols, sigmoid, silu, silu_backward, split_cols, upsample2,
    upsample2_backward, Conv1d, Dense, Parameters,
};
use crate::real::Real;
use crate::signal::{Spectrogram, StftConfig, StftPlan, Waveform};
use crate::toyworld::VisualStreams;

const CHECKPOINT_KIND: &str = "separator";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_freq: usize,
    pub d_face: usize,
    pub d_lip: usize,
    pub c_audio: usize,
    pub c_face: usize,
    pub c_lip: usize,
    /// Channel width of each encoder level; depth is `widths.len()`.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_freq: 257,
            d_face: 32,
            d_lip: 12,
            c_audio: 64,
            c_face: 16,
            c_lip: 16,
            widths: vec![64, 128],
            kernel: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_freq, self.d_face, self.d_lip, self.c_audio, self.c_face, self.c_lip];
        if dims.contains(&0) || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidInput("architecture dimensions must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidInput(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.c_audio + self.c_face + self.c_lip
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorParams<T> {
    pub arch: ArchConfig,
    pub audio_encoder: Dense<T>,
    pub face_encoder: Dense<T>,
    pub lip_encoder: Dense<T>,
    pub encoder: Vec<Conv1d<T>>,
    /// `decoder[i]` merges level `i + 1` back into level `i`.
    pub decoder: Vec<Conv1d<T>>,
    pub output: Dense<T>,
}

impl<T: Real> SeparatorParams<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let w = &arch.widths;
        let k = arch.kernel;
        let mut encoder = Vec::with_capacity(w.len());
        let mut prev = arch.embed_dim();
        for &wi in w {
            encoder.push(Conv1d::new(prev, wi, k, rng));
            prev = wi;
        }
        let decoder = (0..w.len() - 1).map(|i| Conv1d::new(w[i + 1] + w[i], w[i], k, rng)).collect();
        Ok(Self {
            audio_encoder: Dense::new(arch.n_freq, arch.c_audio, rng),
            face_encoder: Dense::new(arch.d_face, arch.c_face, rng),
            lip_encoder: Dense::new(arch.d_lip, arch.c_lip, rng),
            encoder,
            decoder,
            output: Dense::new(w[0], arch.n_freq, rng),
            arch: arch.clone(),
        })
    }

    /// Same shapes, every parameter zero.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut p = Self::new(arch, &mut rng)?;
        p.fill_zero();
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(serde_json::Value::Null).save(path)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, serde_json::json!({ "arch": self.arch, "extra": extra }));
        ck.push_params("", self);
        ck
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, CHECKPOINT_KIND)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let arch: ArchConfig = serde_json::from_value(ck.meta["arch"].clone())?;
        let mut p = Self::zeros(&arch)?;
        ck.load_params("", &mut p)?;
        Ok(p)
    }
}

impl<T: Real> Parameters<T> for SeparatorParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        self.audio_encoder.visit("audio_encoder", f);
        self.face_encoder.visit("face_encoder", f);
        self.lip_encoder.visit("lip_encoder", f);
        for (i, c) in self.encoder.iter().enumerate() {
            c.visit(&format!("backbone.enc{i}"), f);
        }
        for (i, c) in self.decoder.iter().enumerate() {
            c.visit(&format!("backbone.dec{i}"), f);
        }
        self.output.visit("backbone.out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        self.audio_encoder.visit_mut("audio_encoder", f);
        self.face_encoder.visit_mut("face_encoder", f);
        self.lip_encoder.visit_mut("lip_encoder", f);
        for (i, c) in self.encoder.iter_mut().enumerate() {
            c.visit_mut(&format!("backbone.enc{i}"), f);
        }
        for (i, c) in self.decoder.iter_mut().enumerate() {
            c.visit_mut(&format!("backbone.dec{i}"), f);
        }
        self.output.visit_mut("backbone.out", f);
    }
}

/// Concatenated audio/face/lip features on the audio frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AVEmbedding<T> {
    pub values: Array2<T>,
}

impl<T> AVEmbedding<T> {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask<T> {
    pub values: Array2<T>,
}

/// Video frame index for every audio frame: the frame whose display interval
/// contains the audio frame's center time, clamped to the last frame.
pub fn video_frame_map(audio_frames: usize, video_frames: usize, hop: usize, sample_rate: u32, fps: f64) -> Vec<usize> {
    (0..audio_frames)
        .map(|t| {
            // multiply before dividing so exact boundaries stay exact
            let pos = (t * hop) as f64 * fps / sample_rate as f64;
            ((pos + 1e-9).floor() as usize).min(video_frames.saturating_sub(1))
        })
        .collect()
}

fn gather_rows<T: Real>(x: &Array2<T>, map: &[usize]) -> Array2<T> {
    x.select(Axis(0), map)
}

fn scatter_rows<T: Real>(dy: &Array2<T>, map: &[usize], rows: usize) -> Array2<T> {
    let mut dx = Array2::zeros((rows, dy.ncols()));
    for (t, &j) in map.iter().enumerate() {
        let mut r = dx.row_mut(j);
        r += &dy.row(t);
    }
    dx
}

fn silu_grad_inplace<T: Real>(g: &mut Array2<T>, pre: &Array2<T>) {
    Zip::from(g).and(pre).for_each(|g, &p| *g = silu_backward(p, *g));
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct SeparatorPass<T> {
    feats: Array2<T>,
    face_in: Array2<T>,
    lip_in: Array2<T>,
    audio_pre: Array2<T>,
    face_pre: Array2<T>,
    lip_pre: Array2<T>,
    frame_map: Vec<usize>,
    enc: Vec<ConvState<T>>,
    dec: Vec<ConvState<T>>,
    top: Array2<T>,
    pub av: AVEmbedding<T>,
    pub mask: Mask<T>,
}

#[derive(Debug, Clone)]
struct ConvState<T> {
    cols: Array2<T>,
    pre: Array2<T>,
    out: Array2<T>,
}

fn conv_silu<T: Real>(conv: &Conv1d<T>, x: &ArrayView2<T>) -> ConvState<T> {
    let (cols, pre) = conv.forward(x);
    let out = pre.mapv(silu);
    ConvState { cols, pre, out }
}

fn check_inputs<T: Real>(arch: &ArchConfig, spec: &Array2<Complex<T>>, visuals: &VisualStreams<T>) -> Result<()> {
    if spec.ncols() != arch.n_freq || spec.nrows() == 0 {
        return Err(Error::ShapeMismatch {
            what: "mixture spectrogram",
            expected: (spec.nrows().max(1), arch.n_freq),
            got: spec.dim(),
        });
    }
    if visuals.face.ncols() != arch.d_face || visuals.n_frames() == 0 {
        return Err(Error::ShapeMismatch {
            what: "face stream",
            expected: (visuals.n_frames().max(1), arch.d_face),
            got: visuals.face.dim(),
        });
    }
    if visuals.lip.dim() != (visuals.n_frames(), arch.d_lip) {
        return Err(Error::ShapeMismatch {
            what: "lip stream",
            expected: (visuals.n_frames(), arch.d_lip),
            got: visuals.lip.dim(),
        });
    }
    Ok(())
}

struct EncodeState<T> {
    feats: Array2<T>,
    audio_pre: Array2<T>,
    face_pre: Array2<T>,
    lip_pre: Array2<T>,
    frame_map: Vec<usize>,
    av: Array2<T>,
}

fn encode<T: Real>(
    params: &SeparatorParams<T>,
    spec: &Array2<Complex<T>>,
    stft: &StftConfig,
    sample_rate: u32,
    visuals: &VisualStreams<T>,
) -> Result<EncodeState<T>> {
    check_inputs(&params.arch, spec, visuals)?;
    let feats = log_power(spec);
    let audio_pre = params.audio_encoder.forward(&feats.view());
    let face_pre = params.face_encoder.forward(&visuals.face.view());
    let lip_pre = params.lip_encoder.forward(&visuals.lip.view());
    let frame_map = video_frame_map(spec.nrows(), visuals.n_frames(), stft.hop, sample_rate, visuals.fps);
    let av = concat_cols(&[
        audio_pre.mapv(silu).view(),
        gather_rows(&face_pre.mapv(silu), &frame_map).view(),
        gather_rows(&lip_pre.mapv(silu), &frame_map).view(),
    ]);
    Ok(EncodeState {
        feats,
        audio_pre,
        face_pre,
        lip_pre,
        frame_map,
        av,
    })
}

struct BackboneState<T> {
    enc: Vec<ConvState<T>>,
    dec: Vec<ConvState<T>>,
    top: Array2<T>,
    mask: Array2<T>,
}

fn backbone<T: Real>(params: &SeparatorParams<T>, av: &Array2<T>) -> Result<BackboneState<T>> {
    instrument::record(Op::Separator);
    let depth = params.arch.widths.len();
    let mut enc: Vec<ConvState<T>> = Vec::with_capacity(depth);
    for (i, conv) in params.encoder.iter().enumerate() {
        let state = if i == 0 {
            conv_silu(conv, &av.view())
        } else {
            conv_silu(conv, &avg_pool2(&enc[i - 1].out).view())
        };
        enc.push(state);
    }
    // decoder runs from the deepest merge (level depth-2) up to level 0
    let mut dec: Vec<Option<ConvState<T>>> = (0..depth - 1).map(|_| None).collect();
    for i in (0..depth - 1).rev() {
        let coarse = if i == depth - 2 { &enc[i + 1].out } else { &dec[i + 1].as_ref().expect("computed").out };
        let up = upsample2(coarse, enc[i].out.nrows());
        let merged = concat_cols(&[up.view(), enc[i].out.view()]);
        dec[i] = Some(conv_silu(&params.decoder[i], &merged.view()));
    }
    let dec: Vec<ConvState<T>> = dec.into_iter().map(|d| d.expect("computed")).collect();
    let top = if depth == 1 { enc[0].out.clone() } else { dec[0].out.clone() };
    for (name, st) in enc.iter().enumerate().map(|(i, s)| (format!("backbone.enc{i}"), s)).chain(
        dec.iter().enumerate().map(|(i, s)| (format!("backbone.dec{i}"), s)),
    ) {
        if st.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: name });
        }
    }
    let logits = params.output.forward(&top.view());
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: "backbone.out".into(),
        });
    }
    Ok(BackboneState {
        enc,
        dec,
        top,
        mask: logits.mapv(sigmoid),
    })
}

/// Full forward pass on a mixture spectrogram, keeping intermediates.
pub fn forward_pass<T: Real>(
    params: &SeparatorParams<T>,
    spec: &Array2<Complex<T>>,
    stft: &StftConfig,
    sample_rate: u32,
    visuals: &VisualStreams<T>,
) -> Result<SeparatorPass<T>> {
    let e = encode(params, spec, stft, sample_rate, visuals)?;
    let b = backbone(params, &e.av)?;
    Ok(SeparatorPass {
        feats: e.feats,
        face_in: visuals.face.clone(),
        lip_in: visuals.lip.clone(),
        audio_pre: e.audio_pre,
        face_pre: e.face_pre,
        lip_pre: e.lip_pre,
        frame_map: e.frame_map,
        enc: b.enc,
        dec: b.dec,
        top: b.top,
        av: AVEmbedding { values: e.av },
        mask: Mask { values: b.mask },
    })
}

/// Accumulates into `grad` the parameter gradient for an upstream gradient
/// `dmask` on the mask. With `video_encoders` false the face and lip encoder
/// gradients are left untouched.
pub fn backward_pass<T: Real>(
    params: &SeparatorParams<T>,
    pass: &SeparatorPass<T>,
    dmask: &Array2<T>,
    grad: &mut SeparatorParams<T>,
    video_encoders: bool,
) {
    let arch = &params.arch;
    let depth = arch.widths.len();
    let mut dlogits = dmask.clone();
    Zip::from(&mut dlogits)
        .and(&pass.mask.values)
        .for_each(|g, &m| *g = *g * m * (T::one() - m));
    let dtop = params
        .output
        .backward(&pass.top.view(), &dlogits, Some(&mut grad.output), true)
        .expect("requested");

    let mut d_enc: Vec<Array2<T>> = pass.enc.iter().map(|s| Array2::zeros(s.out.dim())).collect();
    if depth == 1 {
        d_enc[0] += &dtop;
    } else {
        let mut d_out = dtop;
        for i in 0..depth - 1 {
            let st = &pass.dec[i];
            silu_grad_inplace(&mut d_out, &st.pre);
            let dmerged = params.decoder[i]
                .backward(&st.cols, &d_out, Some(&mut grad.decoder[i]), true)
                .expect("requested");
            let parts = split_cols(&dmerged, &[arch.widths[i + 1], arch.widths[i]]);
            d_enc[i] += &parts[1];
            let coarse_rows = if i == depth - 2 { pass.enc[i + 1].out.nrows() } else { pass.dec[i + 1].out.nrows() };
            let dcoarse = upsample2_backward(&parts[0], coarse_rows);
            if i == depth - 2 {
                d_enc[i + 1] += &dcoarse;
            } else {
                d_out = dcoarse;
            }
        }
    }
    let mut dav = None;
    for i in (0..depth).rev() {
        let st = &pass.enc[i];
        let mut d = std::mem::replace(&mut d_enc[i], Array2::zeros((0, 0)));
        silu_grad_inplace(&mut d, &st.pre);
        let din = params.encoder[i]
            .backward(&st.cols, &d, Some(&mut grad.encoder[i]), true)
            .expect("requested");
        if i > 0 {
            let rows = pass.enc[i - 1].out.nrows();
            d_enc[i - 1] += &avg_pool2_backward(&din, rows);
        } else {
            dav = Some(din);
        }
    }
    let dav = dav.expect("level 0 visited");
    let parts = split_cols(&dav, &[arch.c_audio, arch.c_face, arch.c_lip]);
    let mut da = parts[0].clone();
    silu_grad_inplace(&mut da, &pass.audio_pre);
    params
        .audio_encoder
        .backward(&pass.feats.view(), &da, Some(&mut grad.audio_encoder), false);
    if video_encoders {
        for (part, input, pre, enc, g) in [
            (&parts[1], &pass.face_in, &pass.face_pre, &params.face_encoder, &mut grad.face_encoder),
            (&parts[2], &pass.lip_in, &pass.lip_pre, &params.lip_encoder, &mut grad.lip_encoder),
        ] {
            let mut dv = scatter_rows(part, &pass.frame_map, pre.nrows());
            silu_grad_inplace(&mut dv, pre);
            enc.backward(&input.view(), &dv, Some(g), false);
        }
    }
}

/// Audio features plus repeated visual features.
pub fn encode_inputs<T: Real>(
    params: &SeparatorParams<T>,
    spec: &Spectrogram<T>,
    visuals: &VisualStreams<T>,
) -> Result<AVEmbedding<T>> {
    let e = encode(params, &spec.values, &spec.config, spec.sample_rate, visuals)?;
    Ok(AVEmbedding { values: e.av })
}

/// Runs the backbone on an embedding and returns the logistic mask.
pub fn predict_mask<T: Real>(params: &SeparatorParams<T>, av: &AVEmbedding<T>) -> Result<Mask<T>> {
    let arch = &params.arch;
    if av.values.ncols() != arch.embed_dim() || av.values.nrows() == 0 {
        return Err(Error::ShapeMismatch {
            what: "av embedding",
            expected: (av.values.nrows().max(1), arch.embed_dim()),
            got: av.values.dim(),
        });
    }
    Ok(Mask {
        values: backbone(params, &av.values)?.mask,
    })
}

/// Scales every mixture bin by the real mask, keeping the mixture phase.
pub fn apply_mask<T: Real>(mask: &Mask<T>, spec: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    if mask.values.dim() != spec.values.dim() {
        return Err(Error::ShapeMismatch {
            what: "mask vs spectrogram",
            expected: spec.values.dim(),
            got: mask.values.dim(),
        });
    }
    let mut out = spec.clone();
    Zip::from(&mut out.values).and(&mask.values).for_each(|x, &m| *x = *x * m);
    Ok(out)
}

/// STFT, encode, mask, inverse STFT. Output has the mixture's length.
pub fn separate<T: Real>(
    params: &SeparatorParams<T>,
    mixture: &Waveform<T>,
    visuals: &VisualStreams<T>,
    stft: &StftConfig,
) -> Result<Waveform<T>> {
    let plan = StftPlan::new(*stft)?;
    separate_with_plan(params, mixture, visuals, &plan)
}

pub fn separate_with_plan<T: Real>(
    params: &SeparatorParams<T>,
    mixture: &Waveform<T>,
    visuals: &VisualStreams<T>,
    plan: &StftPlan<T>,
) -> Result<Waveform<T>> {
    let spec = Spectrogram {
        values: plan.forward(&mixture.samples)?,
        config: *plan.config(),
        sample_rate: mixture.sample_rate,
        signal_len: mixture.len(),
    };
    let av = encode_inputs(params, &spec, visuals)?;
    let mask = predict_mask(params, &av)?;
    let est = apply_mask(&mask, &spec)?;
    Waveform::new(plan.inverse(&est.values, mixture.len())?, mixture.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument;
    use crate::training::tiny;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_map_matches_integer_oracle_at_defaults() {
        // 160-sample hop at 16 kHz against 25 fps: four audio frames per video frame
        let map = video_frame_map(257, 64, 160, 16000, 25.0);
        for (t, &j) in map.iter().enumerate() {
            assert_eq!(j, (t / 4).min(63));
        }
        assert_eq!(map[256], 63);
        assert!(video_frame_map(10, 1, 160, 16000, 25.0).iter().all(|&j| j == 0));
    }

    #[test]
    fn zero_parameters_give_half_mask() {
        let fx = tiny::fixture(1).unwrap();
        let zero = SeparatorParams::<f64>::zeros(&tiny::arch()).unwrap();
        let est = separate_with_plan(&zero, &fx.mixture, &fx.visuals, &fx.plan).unwrap();
        assert_eq!(est.len(), fx.mixture.len());
        for (e, m) in est.samples.iter().zip(&fx.mixture.samples) {
            assert!((e - 0.5 * m).abs() < 1e-10);
        }
    }

    #[test]
    fn training_pass_agrees_with_inference_path() {
        let fx = tiny::fixture(2).unwrap();
        let spec = fx.plan.forward(&fx.mixture.samples).unwrap();
        let pass = forward_pass(&fx.params, &spec, fx.plan.config(), tiny::SAMPLE_RATE, &fx.visuals).unwrap();
        let s = Spectrogram {
            values: spec,
            config: *fx.plan.config(),
            sample_rate: tiny::SAMPLE_RATE,
            signal_len: fx.mixture.len(),
        };
        let av = encode_inputs(&fx.params, &s, &fx.visuals).unwrap();
        assert_eq!(av.values, pass.av.values);
        let mask = predict_mask(&fx.params, &av).unwrap();
        assert_eq!(mask.values, pass.mask.values);
        assert!(mask.values.iter().all(|&m| m > 0.0 && m < 1.0));
        assert_eq!(mask.values.dim(), (s.n_frames(), tiny::arch().n_freq));
    }

    #[test]
    fn inference_touches_only_the_separator() {
        let fx = tiny::fixture(3).unwrap();
        instrument::reset();
        separate_with_plan(&fx.params, &fx.mixture, &fx.visuals, &fx.plan).unwrap();
        let c = instrument::snapshot();
        assert!(c.separator > 0);
        assert_eq!((c.extractor, c.discriminator), (0, 0));
    }

    #[test]
    fn wrong_visual_width_is_rejected() {
        let fx = tiny::fixture(4).unwrap();
        let bad = VisualStreams::zeros(tiny::VIDEO_FRAMES, 5, 4, tiny::FPS);
        assert!(matches!(
            separate_with_plan(&fx.params, &fx.mixture, &bad, &fx.plan),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut arch = tiny::arch();
        arch.widths.clear();
        assert!(SeparatorParams::<f64>::new(&arch, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let a = SeparatorParams::<f32>::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = SeparatorParams::<f32>::new(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sep.ckpt");
        a.save(&path).unwrap();
        let c = SeparatorParams::<f32>::load(&path).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.arch, c.arch);
    }
}

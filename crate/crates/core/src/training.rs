//! Separator training in three regimes — plain separation, separation plus
//! triplet correlation terms, and separation plus the adversarial game —
//! together with finite-difference gradient verification.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis, Zip};
use num_complex::Complex;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{adversarial_value_grad, generator_term, triplet_loss_grad, DiscriminatorParams, TrainWeights};
use crate::error::{Error, Result};
use crate::extractors::{AudioPass, FrozenExtractors};
use crate::metrics::si_snr_grad;
use crate::nn::{Adam, AdamConfig, Parameters};
use crate::real::Real;
use crate::rng::{derived_rng, Domain};
use crate::separator::{backward_pass, forward_pass, separate_with_plan, ArchConfig, SeparatorParams, SeparatorPass};
use crate::signal::{StftPlan, Waveform};
use crate::toyworld::{sample_mixture_indices, Dataset, HardCase, MixtureSample, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Baseline,
    Triplet,
    Adversarial,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Baseline, TrainMode::Triplet, TrainMode::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Triplet => "triplet",
            TrainMode::Adversarial => "adversarial",
        }
    }

    pub fn uses_extractors(self) -> bool {
        self != TrainMode::Baseline
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "triplet" => Ok(Self::Triplet),
            "adversarial" => Ok(Self::Adversarial),
            other => Err(Error::InvalidInput(format!("unknown training mode `{other}`"))),
        }
    }
}

/// Generator-side form of the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// Minimize `log(1 - D(a))`, the same expression the discriminator maximizes.
    #[default]
    Minimax,
    /// Minimize `-log D(a)`; same fixed point, stronger early gradients.
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub weights: TrainWeights,
    pub d_steps_per_g_step: usize,
    pub eval_every: usize,
    pub val_mixtures: usize,
    pub hard_case: HardCase,
    /// Steps of separation-only training before correlation terms switch on.
    pub corr_warmup_steps: usize,
    /// Let correlation and adversarial gradients reach the face/lip encoders.
    pub corr_grad_video_encoders: bool,
    pub generator_objective: GeneratorObjective,
    pub disc_hidden: usize,
    pub disc_step_size: f64,
    /// Where periodic checkpoints go; none are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Baseline,
            steps: 500,
            batch_size: 8,
            step_size: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 0,
            weights: TrainWeights::default(),
            d_steps_per_g_step: 1,
            eval_every: 100,
            val_mixtures: 64,
            hard_case: HardCase::None,
            corr_warmup_steps: 0,
            corr_grad_video_encoders: false,
            generator_objective: GeneratorObjective::Minimax,
            disc_hidden: 64,
            disc_step_size: 1e-3,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.val_mixtures == 0 {
            return Err(Error::InvalidInput("steps, batch_size, eval_every and val_mixtures must be positive".into()));
        }
        if !(self.step_size > 0.0) || !(self.disc_step_size > 0.0) {
            return Err(Error::InvalidInput("step sizes must be positive".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::InvalidInput("d_steps_per_g_step must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::InvalidInput(format!("adam betas {:?} outside [0, 1)", self.adam_betas)));
        }
        self.weights.validate()
    }

    fn adam(&self, step_size: f64) -> AdamConfig {
        AdamConfig {
            step_size,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub sep_loss: f64,
    pub corr_loss: Option<f64>,
    pub adv_value: Option<f64>,
    pub val_si_snr: Option<f64>,
}

/// Append-only per-step training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<TrainRecord>,
    /// Discriminator updates between consecutive generator updates.
    pub d_updates_per_g_update: Vec<usize>,
}

pub const TRAINLOG_HEADER: &str = "# avsep trainlog v1";

impl TrainLog {
    pub fn push(&mut self, r: TrainRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::InvalidInput(format!("train log step {} after {}", r.step, last.step)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = format!("{TRAINLOG_HEADER}\nstep,sep_loss,corr_loss,adv_value,val_si_snr\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.6},{},{},{}\n",
                r.step,
                r.sep_loss,
                opt(r.corr_loss),
                opt(r.adv_value),
                opt(r.val_si_snr)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Which generator terms are active for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms {
    pub margin: f64,
    pub lambda_corr: Option<f64>,
    pub lambda_adv: Option<f64>,
    pub objective: GeneratorObjective,
    pub corr_into_video_encoders: bool,
}

impl GeneratorTerms {
    pub fn separation_only() -> Self {
        Self {
            margin: 0.5,
            lambda_corr: None,
            lambda_adv: None,
            objective: GeneratorObjective::Minimax,
            corr_into_video_encoders: true,
        }
    }

    fn needs_audio_embeddings(&self) -> bool {
        self.lambda_corr.is_some() || self.lambda_adv.is_some()
    }
}

/// Visual-side embeddings the correlation terms compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrTargets<T> {
    /// Visual identity of another utterance by the target speaker.
    pub id_pos: Array1<T>,
    /// Visual identity of the interferer.
    pub id_neg: Array1<T>,
    /// Target's own lip-derived phonetic embedding.
    pub ph_pos: Array1<T>,
    pub ph_neg: Array1<T>,
}

/// One training example: mixture, clean target and conditioning visuals.
pub struct Example<'a, T> {
    pub mixture: &'a Waveform<T>,
    pub target: &'a Waveform<T>,
    pub visuals: &'a crate::toyworld::VisualStreams<T>,
    pub corr: Option<&'a CorrTargets<T>>,
}

/// Forward state of one example.
pub struct ExampleForward<T: Real> {
    spec: Array2<Complex<T>>,
    pass: SeparatorPass<T>,
    pub estimate: Vec<T>,
    pub si_snr: T,
    d_si_snr: Vec<T>,
    audio: Option<(Array2<Complex<T>>, AudioPass<T>)>,
}

impl<T: Real> ExampleForward<T> {
    pub fn i_a(&self) -> Option<&Array1<T>> {
        self.audio.as_ref().map(|(_, p)| p.i_a())
    }

    pub fn p_a(&self) -> Option<&Array1<T>> {
        self.audio.as_ref().map(|(_, p)| p.p_a())
    }
}

/// Loss breakdown of one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub sep: T,
    /// Identity plus phonetic hinge, when targets were supplied.
    pub corr: Option<T>,
    /// Generator-side adversarial term summed over both discriminators.
    pub adv: Option<T>,
}

pub fn forward_example<T: Real>(
    params: &SeparatorParams<T>,
    extractors: Option<&FrozenExtractors<T>>,
    plan: &StftPlan<T>,
    ex: &Example<'_, T>,
    terms: &GeneratorTerms,
) -> Result<ExampleForward<T>> {
    let spec = plan.forward(&ex.mixture.samples)?;
    let pass = forward_pass(params, &spec, plan.config(), ex.mixture.sample_rate, ex.visuals)?;
    let mut masked = spec.clone();
    Zip::from(&mut masked).and(&pass.mask.values).for_each(|x, &m| *x = *x * m);
    let estimate = plan.inverse(&masked, ex.mixture.len())?;
    let (si_snr, d_si_snr) = si_snr_grad(&ex.target.samples, &estimate)?;
    let audio = if terms.needs_audio_embeddings() || ex.corr.is_some() && extractors.is_some() {
        let exr = extractors.ok_or_else(|| Error::InvalidInput("correlation terms need extractors".into()))?;
        let spec_est = plan.forward(&estimate)?;
        let apass = exr.audio_forward(&spec_est)?;
        Some((spec_est, apass))
    } else {
        None
    };
    Ok(ExampleForward {
        spec,
        pass,
        estimate,
        si_snr,
        d_si_snr,
        audio,
    })
}

fn dmask_from_estimate_grad<T: Real>(plan: &StftPlan<T>, spec: &Array2<Complex<T>>, dy: &[T]) -> Result<Array2<T>> {
    let dspec = plan.inverse_adjoint(dy, spec.nrows())?;
    let mut dm = Array2::zeros(spec.dim());
    Zip::from(&mut dm)
        .and(spec)
        .and(&dspec)
        .for_each(|d, x, g| *d = x.re * g.re + x.im * g.im);
    Ok(dm)
}

fn generator_adv_term<T: Real>(d: &crate::correlation::Mlp<T>, e: &Array1<T>, objective: GeneratorObjective) -> Result<(T, Array1<T>)> {
    let x = e.view().insert_axis(Axis(0));
    match objective {
        GeneratorObjective::Minimax => {
            let (v, g) = generator_term(d, &x)?;
            Ok((v, g.row(0).to_owned()))
        }
        GeneratorObjective::NonSaturating => {
            // -log D(a): value and gradient through the logit
            let pass = d.forward(&x)?;
            let p = pass.prob[0];
            let floor = T::lit(crate::correlation::LOG_FLOOR);
            let (v, dz) = if p > floor { (-p.ln(), p - T::one()) } else { (-floor.ln(), T::zero()) };
            let g = d.backward(&x, &pass, &Array1::from_elem(1, dz), None);
            Ok((v, g.row(0).to_owned()))
        }
    }
}

/// Evaluates the generator loss of a forward state and accumulates
/// `scale * d(loss)/d(params)` into `grad`.
///
/// `loss = -SI-SNR + lambda_corr (L_id + L_ph) + lambda_adv (G_id + G_ph)`.
#[allow(clippy::too_many_arguments)]
pub fn backward_example<T: Real>(
    params: &SeparatorParams<T>,
    extractors: Option<&FrozenExtractors<T>>,
    disc: Option<&DiscriminatorParams<T>>,
    plan: &StftPlan<T>,
    ex: &Example<'_, T>,
    fwd: &ExampleForward<T>,
    terms: &GeneratorTerms,
    scale: T,
    grad: &mut SeparatorParams<T>,
) -> Result<LossParts<T>> {
    let sep = -fwd.si_snr;
    let mut total = sep;
    let dy_sep: Vec<T> = fwd.d_si_snr.iter().map(|&g| -g * scale).collect();
    let mut corr = None;
    let mut adv = None;
    let mut dy_corr: Option<Vec<T>> = None;
    if let Some((spec_est, apass)) = &fwd.audio {
        let d = apass.i_a().len();
        let mut d_i_a = Array1::zeros(d);
        let mut d_p_a = Array1::zeros(apass.p_a().len());
        if let Some(t) = ex.corr {
            let m = T::lit(terms.margin);
            let g1 = triplet_loss_grad(&apass.i_a().view(), &t.id_pos.view(), &t.id_neg.view(), m)?;
            let g2 = triplet_loss_grad(&apass.p_a().view(), &t.ph_pos.view(), &t.ph_neg.view(), m)?;
            let l = g1.value + g2.value;
            corr = Some(l);
            if let Some(lc) = terms.lambda_corr {
                let lc = T::lit(lc);
                total += lc * l;
                d_i_a.scaled_add(lc * scale, &g1.anchor);
                d_p_a.scaled_add(lc * scale, &g2.anchor);
            }
        } else if terms.lambda_corr.is_some() {
            return Err(Error::InvalidInput("triplet terms need correlation targets".into()));
        }
        if let Some(la) = terms.lambda_adv {
            let disc = disc.ok_or_else(|| Error::InvalidInput("adversarial term needs discriminators".into()))?;
            let la = T::lit(la);
            let (v1, g1) = generator_adv_term(&disc.identity, apass.i_a(), terms.objective)?;
            let (v2, g2) = generator_adv_term(&disc.phonetic, apass.p_a(), terms.objective)?;
            adv = Some(v1 + v2);
            total += la * (v1 + v2);
            d_i_a.scaled_add(la * scale, &g1);
            d_p_a.scaled_add(la * scale, &g2);
        }
        if terms.needs_audio_embeddings() {
            let exr = extractors.ok_or_else(|| Error::InvalidInput("correlation terms need extractors".into()))?;
            let dspec = exr.audio_backward(spec_est, apass, &d_i_a, &d_p_a);
            dy_corr = Some(plan.forward_adjoint(&dspec, fwd.estimate.len())?);
        }
    }
    match dy_corr {
        None => {
            let dm = dmask_from_estimate_grad(plan, &fwd.spec, &dy_sep)?;
            backward_pass(params, &fwd.pass, &dm, grad, true);
        }
        Some(dc) if terms.corr_into_video_encoders => {
            let dy: Vec<T> = dy_sep.iter().zip(&dc).map(|(&a, &b)| a + b).collect();
            let dm = dmask_from_estimate_grad(plan, &fwd.spec, &dy)?;
            backward_pass(params, &fwd.pass, &dm, grad, true);
        }
        Some(dc) => {
            let dm = dmask_from_estimate_grad(plan, &fwd.spec, &dy_sep)?;
            backward_pass(params, &fwd.pass, &dm, grad, true);
            let dm = dmask_from_estimate_grad(plan, &fwd.spec, &dc)?;
            backward_pass(params, &fwd.pass, &dm, grad, false);
        }
    }
    Ok(LossParts { total, sep, corr, adv })
}

/// Loss and gradient of one example in a single call.
#[allow(clippy::too_many_arguments)]
pub fn example_loss_grad<T: Real>(
    params: &SeparatorParams<T>,
    extractors: Option<&FrozenExtractors<T>>,
    disc: Option<&DiscriminatorParams<T>>,
    plan: &StftPlan<T>,
    ex: &Example<'_, T>,
    terms: &GeneratorTerms,
) -> Result<(LossParts<T>, SeparatorParams<T>)> {
    let fwd = forward_example(params, extractors, plan, ex, terms)?;
    let mut grad = params.zeros_like();
    let parts = backward_example(params, extractors, disc, plan, ex, &fwd, terms, T::one(), &mut grad)?;
    Ok((parts, grad))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: SeparatorParams<T>,
    pub discriminator: Option<DiscriminatorParams<T>>,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

/// Cached visual embeddings of a pool, aligned with the pool order.
pub fn visual_embedding_table<T: Real>(
    ex: &FrozenExtractors<T>,
    pool: &[Arc<Utterance<T>>],
) -> Result<Vec<(Array1<T>, Array1<T>)>> {
    pool.iter().map(|u| ex.visual_embeddings(&u.visuals)).collect()
}

/// Index of another utterance by `pool[target]`'s speaker, or the target
/// itself when the speaker has a single utterance in the pool.
pub fn pick_identity_positive<T, R: Rng + ?Sized>(pool: &[Arc<Utterance<T>>], target: usize, rng: &mut R) -> usize {
    let spk = pool[target].speaker_id;
    let others: Vec<usize> = (0..pool.len())
        .filter(|&i| i != target && pool[i].speaker_id == spk)
        .collect();
    others.choose(rng).copied().unwrap_or(target)
}

/// Correlation targets for a `(target, interferer)` pair of pool indices.
pub fn corr_targets<T: Real>(table: &[(Array1<T>, Array1<T>)], target: usize, positive: usize, interferer: usize) -> CorrTargets<T> {
    CorrTargets {
        id_pos: table[positive].0.clone(),
        id_neg: table[interferer].0.clone(),
        ph_pos: table[target].1.clone(),
        ph_neg: table[interferer].1.clone(),
    }
}

/// Fixed seeded validation mixtures.
pub fn validation_set<T: Real>(ds: &Dataset<T>, n: usize, seed: u64, hard_case: HardCase) -> Result<Vec<MixtureSample<T>>> {
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(seed, Domain::Validation, i as u64);
            let (t, j) = sample_mixture_indices(&ds.val, &mut rng, hard_case)?;
            MixtureSample::from_sources(ds.val[t].clone(), ds.val[j].clone())
        })
        .collect()
}

/// Mean SI-SNR of the separated targets over `set`, in dB.
pub fn mean_si_snr<T: Real>(params: &SeparatorParams<T>, plan: &StftPlan<T>, set: &[MixtureSample<T>]) -> Result<f64> {
    let mut total = 0.0;
    for m in set {
        let est = separate_with_plan(params, &m.mixture, &m.target().visuals, plan)?;
        total += crate::metrics::si_snr(&m.target().audio, &est)?;
    }
    Ok(total / set.len() as f64)
}

fn numerical(step: usize, last_good: &Option<PathBuf>) -> Error {
    Error::NumericalFailure {
        step,
        last_good: last_good.clone(),
    }
}

/// Trains a separator from a seeded initialization.
///
/// Batches, identity positives and initial weights depend only on the seed,
/// so runs of different modes with one seed see identical data.
pub fn train<T: Real>(
    ds: &Dataset<T>,
    extractors: Option<&FrozenExtractors<T>>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::EmptyBatch("training or validation split"));
    }
    let ex = match (cfg.mode.uses_extractors(), extractors) {
        (true, None) => return Err(Error::InvalidInput(format!("{} mode needs pretrained extractors", cfg.mode))),
        (_, Some(e)) if !e.is_frozen() => return Err(Error::NotFrozen),
        (_, e) => e,
    };
    let stft = ex.map(|e| *e.stft_config()).unwrap_or_default();
    let plan = StftPlan::<T>::new(stft)?;
    let mut params = SeparatorParams::<T>::new(arch, &mut derived_rng(cfg.seed, Domain::Init, 0))?;
    let mut adam = Adam::new(cfg.adam(cfg.step_size));
    let mut disc = match (cfg.mode, ex) {
        (TrainMode::Adversarial, Some(e)) => Some(DiscriminatorParams::<T>::new(
            e.d_id(),
            e.d_ph(),
            cfg.disc_hidden,
            &mut derived_rng(cfg.seed, Domain::Init, 1),
        )),
        _ => None,
    };
    let mut disc_adam = Adam::new(cfg.adam(cfg.disc_step_size));
    let table = match ex {
        Some(e) if cfg.mode.uses_extractors() => Some(visual_embedding_table(e, &ds.train)?),
        _ => None,
    };
    let val_set = validation_set(ds, cfg.val_mixtures, cfg.seed, HardCase::None)?;
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    for step in 1..=cfg.steps {
        let corr_on = cfg.mode.uses_extractors() && step > cfg.corr_warmup_steps;
        let terms = GeneratorTerms {
            margin: cfg.weights.margin,
            lambda_corr: (corr_on && cfg.mode == TrainMode::Triplet).then_some(cfg.weights.lambda_corr),
            lambda_adv: (corr_on && cfg.mode == TrainMode::Adversarial).then_some(cfg.weights.lambda_adv),
            objective: cfg.generator_objective,
            corr_into_video_encoders: cfg.corr_grad_video_encoders,
        };
        let mut batch_rng = derived_rng(cfg.seed, Domain::Batch, step as u64);
        let mut trip_rng = derived_rng(cfg.seed, Domain::Triplet, step as u64);
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (t, i) = sample_mixture_indices(&ds.train, &mut batch_rng, cfg.hard_case)?;
            let pos = pick_identity_positive(&ds.train, t, &mut trip_rng);
            let sample = MixtureSample::from_sources(ds.train[t].clone(), ds.train[i].clone())?;
            let targets = table.as_ref().map(|tb| corr_targets(tb, t, pos, i));
            items.push((sample, targets, t));
        }
        let examples: Vec<Example<'_, T>> = items
            .iter()
            .map(|(s, c, _)| Example {
                mixture: &s.mixture,
                target: &s.target().audio,
                visuals: &s.target().visuals,
                corr: if corr_on { c.as_ref() } else { None },
            })
            .collect();
        let fwds = examples
            .iter()
            .map(|e| forward_example(&params, ex, &plan, e, &terms))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::NonFiniteActivation { .. } => numerical(step, &last_good),
                other => other,
            })?;

        let mut adv_value = None;
        if let (Some(d), true) = (disc.as_mut(), terms.lambda_adv.is_some()) {
            let tb = table.as_ref().expect("adversarial mode caches visual embeddings");
            let stack = |f: &dyn Fn(usize) -> Array1<T>| {
                let rows: Vec<Array1<T>> = (0..fwds.len()).map(f).collect();
                let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
                ndarray::concatenate(Axis(0), &views).expect("equal dims")
            };
            let vis_id = stack(&|k| tb[items[k].2].0.clone());
            let vis_ph = stack(&|k| tb[items[k].2].1.clone());
            let aud_id = stack(&|k| fwds[k].i_a().expect("audio pass").clone());
            let aud_ph = stack(&|k| fwds[k].p_a().expect("audio pass").clone());
            let mut value = T::zero();
            for _ in 0..cfg.d_steps_per_g_step {
                let g_id = adversarial_value_grad(&d.identity, &vis_id.view(), &aud_id.view(), true)?;
                let g_ph = adversarial_value_grad(&d.phonetic, &vis_ph.view(), &aud_ph.view(), true)?;
                value = (g_id.value + g_ph.value) / T::lit(2.0);
                // ascent on the value: hand Adam the negated gradient
                let mut dg = DiscriminatorParams {
                    identity: g_id.params.expect("requested"),
                    phonetic: g_ph.params.expect("requested"),
                };
                dg.visit_mut(&mut |_, t| t.mapv_inplace(|v| -v));
                disc_adam.step(d, &dg);
            }
            log.d_updates_per_g_update.push(cfg.d_steps_per_g_step);
            adv_value = Some(value.as_f64());
        }

        let scale = T::one() / T::from_usize(cfg.batch_size).unwrap();
        let mut grad = params.zeros_like();
        let (mut sep_sum, mut corr_sum, mut corr_n) = (0.0, 0.0, 0usize);
        for (e, f) in examples.iter().zip(&fwds) {
            let parts = backward_example(&params, ex, disc.as_ref(), &plan, e, f, &terms, scale, &mut grad)?;
            sep_sum += parts.sep.as_f64();
            if let Some(c) = parts.corr {
                corr_sum += c.as_f64();
                corr_n += 1;
            }
        }
        let sep_loss = sep_sum / cfg.batch_size as f64;
        if !sep_loss.is_finite() || !grad.all_finite() {
            return Err(numerical(step, &last_good));
        }
        adam.step(&mut params, &grad);
        if !params.all_finite() {
            return Err(numerical(step, &last_good));
        }

        let val_si_snr = if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = mean_si_snr(&params, &plan, &val_set).map_err(|e| match e {
                Error::NonFiniteActivation { .. } | Error::NonFinite(_) => numerical(step, &last_good),
                other => other,
            })?;
            if !v.is_finite() {
                return Err(numerical(step, &last_good));
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("{}_step{step:06}.ckpt", cfg.mode));
                params
                    .to_checkpoint(serde_json::json!({ "step": step, "mode": cfg.mode, "val_si_snr": v }))
                    .save(&path)?;
                checkpoints.push(path.clone());
                last_good = Some(path);
            }
            Some(v)
        } else {
            None
        };
        log.push(TrainRecord {
            step,
            sep_loss,
            corr_loss: (corr_n > 0).then(|| corr_sum / corr_n as f64),
            adv_value,
            val_si_snr,
        })?;
    }
    Ok(TrainOutcome {
        params,
        discriminator: disc,
        log,
        checkpoints,
    })
}

/// Losses available to [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    /// `sum_i c_i x_i^2`; finite differences are exact up to roundoff.
    Quadratic,
    /// `-SI-SNR` of the separated waveform, all separator parameters.
    SiSnrPipeline,
    /// Separation plus weighted triplet terms through the audio extractors.
    TripletPipeline,
    /// Separation plus the generator-side adversarial term.
    AdversarialPipeline,
    /// Identity hinge with respect to the anchor embedding.
    IdentityTriplet,
    /// Phonetic hinge with respect to all three embeddings.
    PhoneticTriplet,
    /// Adversarial value with respect to discriminator parameters.
    AdversarialDiscriminator,
    /// Adversarial value with respect to both embedding batches.
    AdversarialEmbeddings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords: usize,
    /// Worst relative error per parameter group.
    pub groups: Vec<(String, f64, usize)>,
}

/// Relative error with a floor on the magnitude.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-7;

/// Central differences on a random coordinate sample, at least
/// `per_group` coordinates per group (all of them for smaller groups).
/// Groups are tensor-name prefixes up to the first `.`.
pub fn check_parameter_gradient<P, F, R>(
    params: &P,
    analytic: &P,
    loss: F,
    eps: f64,
    per_group: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    P: Parameters<f64> + Clone,
    F: Fn(&P) -> Result<f64>,
    R: Rng + ?Sized,
{
    let mut groups: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    let mut t_idx = 0;
    params.visit(&mut |name, t| {
        let g = name.split('.').next().unwrap_or(name).to_string();
        let coords: Vec<(usize, usize)> = (0..t.len()).map(|k| (t_idx, k)).collect();
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, v)) => v.extend(coords),
            None => groups.push((g, coords)),
        }
        t_idx += 1;
    });
    let mut analytic_flat: Vec<Vec<f64>> = Vec::new();
    analytic.visit(&mut |_, t| analytic_flat.push(t.iter().copied().collect()));
    let bump = |tensor: usize, k: usize, d: f64| -> Result<f64> {
        let mut p = params.clone();
        let mut i = 0;
        p.visit_mut(&mut |_, t| {
            if i == tensor {
                let v = t.iter_mut().nth(k).expect("index in range");
                *v += d;
            }
            i += 1;
        });
        loss(&p)
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords: 0,
        groups: Vec::new(),
    };
    for (name, coords) in groups {
        let chosen: Vec<(usize, usize)> = if coords.len() <= per_group {
            coords
        } else {
            coords.choose_multiple(rng, per_group).copied().collect()
        };
        let mut worst: f64 = 0.0;
        for &(tensor, k) in &chosen {
            let num = (bump(tensor, k, eps)? - bump(tensor, k, -eps)?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic_flat[tensor][k], num, REL_FLOOR));
        }
        report.coords += chosen.len();
        report.max_rel_err = report.max_rel_err.max(worst);
        report.groups.push((name, worst, chosen.len()));
    }
    Ok(report)
}

/// Tiny-geometry fixture shared by the pipeline gradient checks.
pub mod tiny {
    use super::*;
    use crate::extractors::{random_extractors, ExtractorConfig};
    use crate::signal::StftConfig;
    use crate::toyworld::VisualStreams;

    pub const SAMPLE_RATE: u32 = 800;
    pub const LEN: usize = 160;
    pub const VIDEO_FRAMES: usize = 5;
    pub const FPS: f64 = 25.0;

    pub fn stft() -> StftConfig {
        StftConfig {
            nfft: 32,
            hop: 8,
            window_size: 32,
            center: true,
        }
    }

    pub fn arch() -> ArchConfig {
        ArchConfig {
            n_freq: 17,
            d_face: 3,
            d_lip: 4,
            c_audio: 4,
            c_face: 2,
            c_lip: 2,
            widths: vec![4, 6],
            kernel: 3,
        }
    }

    pub struct Fixture {
        pub params: SeparatorParams<f64>,
        pub extractors: FrozenExtractors<f64>,
        pub disc: DiscriminatorParams<f64>,
        pub mixture: Waveform<f64>,
        pub target: Waveform<f64>,
        pub visuals: VisualStreams<f64>,
        pub corr: CorrTargets<f64>,
        pub plan: StftPlan<f64>,
    }

    impl Fixture {
        pub fn example(&self, with_corr: bool) -> Example<'_, f64> {
            Example {
                mixture: &self.mixture,
                target: &self.target,
                visuals: &self.visuals,
                corr: with_corr.then_some(&self.corr),
            }
        }
    }

    fn unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
        let v: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let n = v.dot(&v).sqrt();
        v / n
    }

    pub fn fixture(seed: u64) -> Result<Fixture> {
        let mut rng = derived_rng(seed, Domain::Init, 5);
        let xcfg = ExtractorConfig {
            hidden: 5,
            d_id: 4,
            d_ph: 3,
            ..ExtractorConfig::default()
        };
        let extractors = random_extractors(stft(), SAMPLE_RATE, 3, 4, &xcfg, seed)?;
        let params = SeparatorParams::new(&arch(), &mut rng)?;
        let disc = DiscriminatorParams::new(4, 3, 5, &mut rng);
        let t: Vec<f64> = (0..LEN)
            .map(|n| (n as f64 * 0.31).sin() + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        let i: Vec<f64> = (0..LEN)
            .map(|n| 0.7 * (n as f64 * 1.7).sin() + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        let mix: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + b).collect();
        let mut visuals = VisualStreams::zeros(VIDEO_FRAMES, 3, 4, FPS);
        visuals.face.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        visuals.lip.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let corr = CorrTargets {
            id_pos: unit(4, &mut rng),
            id_neg: unit(4, &mut rng),
            ph_pos: unit(3, &mut rng),
            ph_neg: unit(3, &mut rng),
        };
        Ok(Fixture {
            params,
            extractors,
            disc,
            mixture: Waveform::new(mix, SAMPLE_RATE)?,
            target: Waveform::new(t, SAMPLE_RATE)?,
            visuals,
            corr,
            plan: StftPlan::new(stft())?,
        })
    }
}

/// Adapter so that plain arrays can be checked with
/// [`check_parameter_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors(pub Vec<(String, Array2<f64>)>);

impl Parameters<f64> for Tensors {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        for (n, t) in &self.0 {
            f(n, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (n, t) in &mut self.0 {
            f(n, t);
        }
    }
}

fn row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(0))
}

/// Runs the named gradient check on a seeded tiny configuration and reports
/// the worst relative error (floored at 1e-7 in magnitude).
pub fn gradient_check(loss: LossId, eps: f64, seed: u64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidInput(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    let mut rng = derived_rng(seed, Domain::Init, 99);
    let per_group = 50;
    match loss {
        LossId::Quadratic => {
            // magnitudes in [0.5, 2] keep every coordinate's gradient well above roundoff
            let x = Tensors(vec![(
                "x".into(),
                Array2::from_shape_simple_fn((8, 8), || {
                    let m: f64 = rng.random_range(0.5..2.0);
                    if rng.random_bool(0.5) { m } else { -m }
                }),
            )]);
            let c = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.1..3.0));
            let g = Tensors(vec![("x".into(), &x.0[0].1 * &c * 2.0)]);
            check_parameter_gradient(&x, &g, |p| Ok((&p.0[0].1 * &p.0[0].1 * &c).sum()), eps, per_group, &mut rng)
        }
        LossId::SiSnrPipeline | LossId::TripletPipeline | LossId::AdversarialPipeline => {
            let fx = tiny::fixture(seed)?;
            let terms = GeneratorTerms {
                margin: 0.5,
                lambda_corr: (loss == LossId::TripletPipeline).then_some(0.7),
                lambda_adv: (loss == LossId::AdversarialPipeline).then_some(0.6),
                objective: GeneratorObjective::Minimax,
                corr_into_video_encoders: true,
            };
            let with_corr = loss == LossId::TripletPipeline;
            let ex = fx.example(with_corr);
            let (_, g) = example_loss_grad(&fx.params, Some(&fx.extractors), Some(&fx.disc), &fx.plan, &ex, &terms)?;
            check_parameter_gradient(
                &fx.params,
                &g,
                |p| {
                    let f = forward_example(p, Some(&fx.extractors), &fx.plan, &ex, &terms)?;
                    let mut scratch = p.zeros_like();
                    Ok(backward_example(p, Some(&fx.extractors), Some(&fx.disc), &fx.plan, &ex, &f, &terms, 1.0, &mut scratch)?
                        .total)
                },
                eps,
                per_group,
                &mut rng,
            )
        }
        LossId::IdentityTriplet | LossId::PhoneticTriplet => {
            let d = if loss == LossId::IdentityTriplet { 64 } else { 16 };
            let mut v = || Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
            let (a, p, n) = (v(), v(), v());
            // margin large enough that the hinge is active
            let m = 2.5;
            let g = triplet_loss_grad(&a.view(), &p.view(), &n.view(), m)?;
            let point = Tensors(vec![("anchor".into(), row(&a)), ("positive".into(), row(&p)), ("negative".into(), row(&n))]);
            let grad = Tensors(vec![
                ("anchor".into(), row(&g.anchor)),
                ("positive".into(), row(&g.positive)),
                ("negative".into(), row(&g.negative)),
            ]);
            check_parameter_gradient(
                &point,
                &grad,
                |t| {
                    Ok(triplet_loss_grad(&t.0[0].1.row(0), &t.0[1].1.row(0), &t.0[2].1.row(0), m)?.value)
                },
                eps,
                per_group,
                &mut rng,
            )
        }
        LossId::AdversarialDiscriminator | LossId::AdversarialEmbeddings => {
            let d = crate::correlation::Mlp::<f64>::new(16, 12, &mut rng);
            let vis = Array2::from_shape_simple_fn((6, 16), || rng.random_range(-1.0..1.0));
            let aud = Array2::from_shape_simple_fn((7, 16), || rng.random_range(-1.0..1.0));
            let g = adversarial_value_grad(&d, &vis.view(), &aud.view(), true)?;
            if loss == LossId::AdversarialDiscriminator {
                check_parameter_gradient(
                    &d,
                    &g.params.expect("requested"),
                    |p| crate::correlation::adversarial_value(p, &vis.view(), &aud.view()),
                    eps,
                    per_group,
                    &mut rng,
                )
            } else {
                let point = Tensors(vec![("visual".into(), vis.clone()), ("audio".into(), aud.clone())]);
                let grad = Tensors(vec![("visual".into(), g.visual), ("audio".into(), g.audio)]);
                check_parameter_gradient(
                    &point,
                    &grad,
                    |t| crate::correlation::adversarial_value(&d, &t.0[0].1.view(), &t.0[1].1.view()),
                    eps,
                    per_group,
                    &mut rng,
                )
            }
        }
    }
}

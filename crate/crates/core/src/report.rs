//! Batch evaluation, correlation scatter sets, separability statistics and
//! the fixed CSV formats they are written in.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::correlation::Mlp;
use crate::error::{Error, Result};
use crate::extractors::FrozenExtractors;
use crate::metrics::{metric_report, si_snr, MetricReport};
use crate::nn::{Adam, AdamConfig, Parameters};
use crate::real::Real;
use crate::rng::{derived_rng, Domain};
use crate::separator::{separate_with_plan, SeparatorParams};
use crate::signal::{StftPlan, Waveform};
use crate::toyworld::{sample_mixture_indices, Dataset, HardCase, MixtureSample, Utterance};
use serde::Serialize;
use std::sync::Arc;

pub const FORMAT_VERSION: u32 = 1;

fn header(kind: &str, note: &str) -> String {
    format!(
        "# avsep {kind} v{FORMAT_VERSION} (avsep {}){note}\n",
        env!("CARGO_PKG_VERSION")
    )
}

/// Seeded mixtures drawn from `pool`; mixture `i` depends only on
/// `(seed, i)`.
pub fn seeded_mixtures<T: Real>(
    pool: &[Arc<Utterance<T>>],
    n: usize,
    seed: u64,
    domain: Domain,
    hard_case: HardCase,
) -> Result<Vec<MixtureSample<T>>> {
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(seed, domain, i as u64);
            let (t, j) = sample_mixture_indices(pool, &mut rng, hard_case)?;
            MixtureSample::from_sources(pool[t].clone(), pool[j].clone())
        })
        .collect()
}

/// The benchmark test set: `n` seeded mixtures from the test split.
pub fn test_mixtures<T: Real>(ds: &Dataset<T>, n: usize, seed: u64, hard_case: HardCase) -> Result<Vec<MixtureSample<T>>> {
    seeded_mixtures(&ds.test, n, seed, Domain::Eval, hard_case)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub mixture_id: usize,
    pub metrics: MetricReport,
}

/// Separates every mixture and scores the target estimate. Mixtures are
/// processed in parallel; rows come back in input order.
pub fn evaluate<T: Real>(params: &SeparatorParams<T>, plan: &StftPlan<T>, set: &[MixtureSample<T>]) -> Result<Vec<EvalRow>> {
    set.par_iter()
        .enumerate()
        .map(|(i, m)| {
            let est = separate_with_plan(params, &m.mixture, &m.target().visuals, plan)?;
            Ok(EvalRow {
                mixture_id: i,
                metrics: metric_report(&m.target().audio, &m.interferer().audio, &est)?,
            })
        })
        .collect()
}

pub fn mean_metrics(rows: &[EvalRow]) -> MetricReport {
    let n = rows.len().max(1) as f64;
    let mut m = MetricReport {
        si_snr: 0.0,
        sdr: 0.0,
        sir: 0.0,
        sar: 0.0,
        stoi: 0.0,
    };
    for r in rows {
        m.si_snr += r.metrics.si_snr / n;
        m.sdr += r.metrics.sdr / n;
        m.sir += r.metrics.sir / n;
        m.sar += r.metrics.sar / n;
        m.stoi += r.metrics.stoi / n;
    }
    m
}

pub const EVAL_COLUMNS: &str = "mixture_id,si_snr,sdr,sir,sar,stoi";

/// One row per mixture, then a `mean` row.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = header("eval", "");
    s.push_str(EVAL_COLUMNS);
    s.push('\n');
    let line = |id: &str, m: &MetricReport| {
        format!("{id},{:.6},{:.6},{:.6},{:.6},{:.6}\n", m.si_snr, m.sdr, m.sir, m.sar, m.stoi)
    };
    for r in rows {
        s.push_str(&line(&r.mixture_id.to_string(), &r.metrics));
    }
    s.push_str(&line("mean", &mean_metrics(rows)));
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairType {
    Pos,
    Neg,
}

impl PairType {
    pub fn as_str(self) -> &'static str {
        match self {
            PairType::Pos => "pos",
            PairType::Neg => "neg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterRow {
    pub pair_id: usize,
    pub pair_type: PairType,
    pub identity_corr: f64,
    pub phonetic_corr: f64,
    /// SI-SNR of the separated output the pair was measured on.
    pub si_snr: f64,
}

impl ScatterRow {
    pub fn score(&self) -> f64 {
        self.identity_corr + self.phonetic_corr
    }
}

fn cosine<T: Real>(a: &Array1<T>, b: &Array1<T>) -> f64 {
    let (a, b) = (a.mapv(|v| v.as_f64()), b.mapv(|v| v.as_f64()));
    let n = (a.dot(&a) * b.dot(&b)).sqrt().max(1e-12);
    (a.dot(&b) / n).clamp(-1.0, 1.0)
}

/// Correlation pairs measured on separated outputs.
///
/// For mixture `k`, the separated target is compared with the target's own
/// visual streams (positive: same speaker, same utterance) and with the
/// interferer's visual streams (negative: different speaker). Both rows
/// carry the SI-SNR of that separation.
pub fn correlation_scatter<T: Real>(
    params: &SeparatorParams<T>,
    extractors: &FrozenExtractors<T>,
    plan: &StftPlan<T>,
    set: &[MixtureSample<T>],
) -> Result<Vec<ScatterRow>> {
    if set.iter().any(|m| m.target().speaker_id == m.interferer().speaker_id) {
        return Err(Error::PoolTooSmall("negative pairs need distinct speakers".into()));
    }
    let per_mixture: Vec<[ScatterRow; 2]> = set
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let est = separate_with_plan(params, &m.mixture, &m.target().visuals, plan)?;
            let snr = si_snr(&m.target().audio, &est)?;
            let (i_a, p_a) = extractors.audio_embeddings(&est)?;
            let mut rows = [PairType::Pos, PairType::Neg].map(|pair_type| ScatterRow {
                pair_id: 2 * k + (pair_type == PairType::Neg) as usize,
                pair_type,
                identity_corr: 0.0,
                phonetic_corr: 0.0,
                si_snr: snr,
            });
            for (row, u) in rows.iter_mut().zip([m.target(), m.interferer()]) {
                let (i_v, p_v) = extractors.visual_embeddings(&u.visuals)?;
                row.identity_corr = cosine(&i_a, &i_v);
                row.phonetic_corr = cosine(&p_a, &p_v);
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_mixture.into_iter().flatten().collect())
}

pub const SCATTER_COLUMNS: &str = "pair_id,pair_type,identity_corr,phonetic_corr,si_snr";

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut s = header(
        "scatter",
        "; one positive and one negative pair per mixture, si_snr of that mixture's separated target",
    );
    s.push_str(SCATTER_COLUMNS);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.pair_id,
            r.pair_type.as_str(),
            r.identity_corr,
            r.phonetic_corr,
            r.si_snr
        ));
    }
    s
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half (the Mann–Whitney statistic).
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyBatch("auc needs both classes"));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUC of positive against negative pairs scored by
/// `identity_corr + phonetic_corr`.
pub fn scatter_auc(rows: &[ScatterRow]) -> Result<f64> {
    let pick = |t| rows.iter().filter(|r| r.pair_type == t).map(ScatterRow::score).collect::<Vec<_>>();
    auc(&pick(PairType::Pos), &pick(PairType::Neg))
}

/// Mean positive minus mean negative identity correlation.
pub fn identity_gap(rows: &[ScatterRow]) -> f64 {
    let mean = |t| {
        let v: Vec<f64> = rows.iter().filter(|r| r.pair_type == t).map(|r| r.identity_corr).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    mean(PairType::Pos) - mean(PairType::Neg)
}

/// Which embedding a probe discriminator looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeEmbedding {
    Identity,
    Phonetic,
}

/// Audio embeddings of separated targets and the matching visual
/// embeddings, one row per mixture.
pub struct EmbeddingBatch {
    pub audio: Array2<f64>,
    pub visual: Array2<f64>,
}

pub fn separated_embeddings<T: Real>(
    params: &SeparatorParams<T>,
    extractors: &FrozenExtractors<T>,
    plan: &StftPlan<T>,
    set: &[MixtureSample<T>],
    which: ProbeEmbedding,
) -> Result<EmbeddingBatch> {
    let rows: Vec<(Array1<f64>, Array1<f64>)> = set
        .par_iter()
        .map(|m| {
            let est = separate_with_plan(params, &m.mixture, &m.target().visuals, plan)?;
            let (i_a, p_a) = extractors.audio_embeddings(&est)?;
            let (i_v, p_v) = extractors.visual_embeddings(&m.target().visuals)?;
            let (a, v) = match which {
                ProbeEmbedding::Identity => (i_a, i_v),
                ProbeEmbedding::Phonetic => (p_a, p_v),
            };
            Ok((a.mapv(|x| x.as_f64()), v.mapv(|x| x.as_f64())))
        })
        .collect::<Result<_>>()?;
    let stack = |f: fn(&(Array1<f64>, Array1<f64>)) -> &Array1<f64>| {
        let views: Vec<_> = rows.iter().map(|r| f(r).view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidInput(e.to_string()))
    };
    Ok(EmbeddingBatch {
        audio: stack(|r| &r.0)?,
        visual: stack(|r| &r.1)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            step_size: 3e-3,
            seed: 0,
        }
    }
}



/// Trains a fresh discriminator (visual = 1, audio = 0) by full-batch
/// logistic regression through an MLP and returns its balanced accuracy on
/// the held-out batch.
pub fn probe_accuracy(train: &EmbeddingBatch, test: &EmbeddingBatch, cfg: &ProbeConfig) -> Result<f64> {
    let d = train.audio.ncols();
    if train.visual.ncols() != d || test.audio.ncols() != d || test.visual.ncols() != d {
        return Err(Error::InvalidInput("probe embedding widths differ".into()));
    }
    if train.audio.nrows() == 0 || train.visual.nrows() == 0 || test.audio.nrows() == 0 || test.visual.nrows() == 0 {
        return Err(Error::EmptyBatch("probe batches"));
    }
    let mut rng = derived_rng(cfg.seed, Domain::Probe, 0);
    let mut probe = Mlp::<f64>::new(d, cfg.hidden, &mut rng);
    let mut adam = Adam::new(AdamConfig {
        step_size: cfg.step_size,
        ..AdamConfig::default()
    });
    let x = ndarray::concatenate(Axis(0), &[train.visual.view(), train.audio.view()]).expect("equal widths");
    let (nv, na) = (train.visual.nrows() as f64, train.audio.nrows() as f64);
    // class-balanced binary cross-entropy: dL/dlogit = w (p - y)
    let y: Array1<f64> = (0..x.nrows()).map(|i| if i < train.visual.nrows() { 1.0 } else { 0.0 }).collect();
    let w: Array1<f64> = y.mapv(|t| if t == 1.0 { 0.5 / nv } else { 0.5 / na });
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.shuffle(&mut rng);
    let x = x.select(Axis(0), &order);
    let y = y.select(Axis(0), &order);
    let w = w.select(Axis(0), &order);
    for _ in 0..cfg.steps {
        let pass = probe.forward(&x.view())?;
        let mut dlogit = Array1::zeros(x.nrows());
        Zip::from(&mut dlogit)
            .and(&pass.prob)
            .and(&y)
            .and(&w)
            .for_each(|g, &p, &t, &wi| *g = wi * (p - t));
        let mut grad = probe.zeros_like();
        probe.backward(&x.view(), &pass, &dlogit, Some(&mut grad));
        adam.step(&mut probe, &grad);
    }
    let pv = probe.forward(&test.visual.view())?.prob;
    let pa = probe.forward(&test.audio.view())?.prob;
    let acc_v = pv.iter().filter(|&&p| p > 0.5).count() as f64 / pv.len() as f64;
    let acc_a = pa.iter().filter(|&&p| p <= 0.5).count() as f64 / pa.len() as f64;
    Ok(0.5 * (acc_v + acc_a))
}

/// Magnitude ratio floor added to the IRM denominator.
pub const IRM_EPS: f64 = 1e-8;

/// Ideal ratio mask `|S| / (|S| + |N| + eps)` applied to the mixture
/// spectrogram; returns the target estimate.
pub fn irm_separate<T: Real>(plan: &StftPlan<T>, target: &Waveform<T>, interferer: &Waveform<T>) -> Result<Waveform<T>> {
    if target.len() != interferer.len() {
        return Err(Error::LengthMismatch {
            what: "irm sources",
            left: target.len(),
            right: interferer.len(),
        });
    }
    let s = plan.forward(&target.samples)?;
    let n = plan.forward(&interferer.samples)?;
    let mut y = s.clone();
    Zip::from(&mut y).and(&s).and(&n).for_each(|y, s, n| {
        let ms = s.norm();
        *y = (*s + *n) * (ms / (ms + n.norm() + T::lit(IRM_EPS)));
    });
    Waveform::new(plan.inverse(&y, target.len())?, target.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_matches_pair_counting() {
        let pos = [0.9, 0.3, 0.5, 0.5];
        let neg = [0.1, 0.5, 0.2];
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        assert!((auc(&pos, &neg).unwrap() - wins / 12.0).abs() < 1e-15);
        assert!(auc(&[], &neg).is_err());
    }

    proptest! {
        #[test]
        fn auc_is_a_pair_probability(pos in prop::collection::vec(-1.0f64..1.0, 1..20), neg in prop::collection::vec(-1.0f64..1.0, 1..20)) {
            let a = auc(&pos, &neg).unwrap();
            let mut wins = 0.0;
            for p in &pos { for n in &neg { wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 }; } }
            prop_assert!((a - wins / (pos.len() * neg.len()) as f64).abs() < 1e-12);
            let flipped = auc(&neg, &pos).unwrap();
            prop_assert!((a + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_csv_has_mean_row() {
        let m = MetricReport {
            si_snr: 1.0,
            sdr: 2.0,
            sir: 3.0,
            sar: 4.0,
            stoi: 0.5,
        };
        let rows = [
            EvalRow { mixture_id: 0, metrics: m },
            EvalRow {
                mixture_id: 1,
                metrics: MetricReport { si_snr: 3.0, ..m },
            },
        ];
        let csv = eval_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# avsep eval v1"));
        assert_eq!(lines[1], EVAL_COLUMNS);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "mean,2.000000,2.000000,3.000000,4.000000,0.500000");
    }

    #[test]
    fn probe_separates_shifted_clouds_and_not_identical_ones() {
        let mut rng = derived_rng(1, Domain::Probe, 7);
        use rand::Rng;
        let mut cloud = |shift: f64| Array2::from_shape_fn((200, 8), |(_, j)| rng.random_range(-1.0..1.0) + if j == 0 { shift } else { 0.0 });
        let train = EmbeddingBatch {
            visual: cloud(1.5),
            audio: cloud(-1.5),
        };
        let test = EmbeddingBatch {
            visual: cloud(1.5),
            audio: cloud(-1.5),
        };
        assert!(probe_accuracy(&train, &test, &ProbeConfig::default()).unwrap() > 0.9);
        let same_train = EmbeddingBatch {
            visual: cloud(0.0),
            audio: cloud(0.0),
        };
        let same_test = EmbeddingBatch {
            visual: cloud(0.0),
            audio: cloud(0.0),
        };
        let acc = probe_accuracy(&same_train, &same_test, &ProbeConfig::default()).unwrap();
        assert!((0.35..0.65).contains(&acc), "{acc}");
    }

    #[test]
    fn irm_reconstructs_sum_when_interferer_silent() {
        let plan = StftPlan::<f64>::new(crate::training::tiny::stft()).unwrap();
        let t = Waveform::new((0..200).map(|n| (n as f64 * 0.2).sin()).collect(), 800).unwrap();
        let z = Waveform::zeros(200, 800);
        let est = irm_separate(&plan, &t, &z).unwrap();
        // each bin is off by at most eps in magnitude
        for (a, b) in est.samples.iter().zip(&t.samples) {
            assert!((a - b).abs() < 10.0 * IRM_EPS);
        }
        // identical sources get a half mask everywhere
        let half = irm_separate(&plan, &t, &t).unwrap();
        for (a, b) in half.samples.iter().zip(&t.samples) {
            assert!((a - b).abs() < 10.0 * IRM_EPS);
        }
    }
}

//! Acceptance benchmark: runs every criterion in order and prints one
//! PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use avsep::correlation::{adversarial_value, Mlp};
use avsep::extractors::{pretrain_extractors, ExtractorConfig};
use avsep::instrument;
use avsep::metrics::{bss_eval, si_snr};
use avsep::report::{
    correlation_scatter, eval_csv, evaluate, irm_separate, mean_metrics, probe_accuracy, scatter_auc, scatter_csv,
    seeded_mixtures, separated_embeddings, test_mixtures, ProbeConfig, ProbeEmbedding,
};
use avsep::rng::{derived_rng, Domain};
use avsep::separator::{separate_with_plan, ArchConfig};
use avsep::signal::{StftConfig, StftPlan, Waveform};
use avsep::toyworld::{generate_dataset, HardCase, WorldConfig};
use avsep::training::{gradient_check, train, LossId, TrainConfig, TrainMode};
use avsep::{Dataset32, Extractors32, Separator32};
use ndarray::Array2;
use rand::Rng;

const DATA_SEED: u64 = 1;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 7;
const TEST_MIXTURES: usize = 200;
const TRAIN_STEPS: usize = 1200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------------------
// independent scalar-loop oracles

fn oracle_si_snr(r: &[f64], e: &[f64]) -> f64 {
    let n = r.len() as f64;
    let (mut mr, mut me) = (0.0, 0.0);
    for i in 0..r.len() {
        mr += r[i] / n;
        me += e[i] / n;
    }
    let (mut re, mut rr) = (0.0, 0.0);
    for i in 0..r.len() {
        re += (r[i] - mr) * (e[i] - me);
        rr += (r[i] - mr) * (r[i] - mr);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r.len() {
        let t = re / rr * (r[i] - mr);
        num += t * t;
        den += (e[i] - me - t) * (e[i] - me - t);
    }
    10.0 * (num / den).log10()
}

/// SDR, SIR, SAR from explicit least squares onto `[r1, r2]`.
fn oracle_bss(r1: &[f64], r2: &[f64], e: &[f64]) -> (f64, f64, f64) {
    let mut g = [[0.0; 2]; 2];
    let mut b = [0.0; 2];
    for i in 0..e.len() {
        let r = [r1[i], r2[i]];
        for j in 0..2 {
            b[j] += r[j] * e[i];
            for k in 0..2 {
                g[j][k] += r[j] * r[k];
            }
        }
    }
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let c = [
        (g[1][1] * b[0] - g[0][1] * b[1]) / det,
        (g[0][0] * b[1] - g[1][0] * b[0]) / det,
    ];
    let a = b[0] / g[0][0];
    let (mut st, mut ei, mut ea, mut eiea, mut stei) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..e.len() {
        let s = a * r1[i];
        let p = c[0] * r1[i] + c[1] * r2[i];
        let (inter, art) = (p - s, e[i] - p);
        st += s * s;
        ei += inter * inter;
        ea += art * art;
        eiea += (inter + art) * (inter + art);
        stei += (s + inter) * (s + inter);
    }
    let db = |x: f64, y: f64| 10.0 * (x / y).log10();
    (db(st, eiea), db(st, ei), db(stei, ea))
}

fn oracle_adversarial(d: &Mlp<f64>, visual: &Array2<f64>, audio: &Array2<f64>) -> f64 {
    let prob = |x: ndarray::ArrayView1<f64>| {
        let mut z = d.out.b[[0, 0]];
        for h in 0..d.hidden.w.ncols() {
            let mut a = d.hidden.b[[0, h]];
            for i in 0..x.len() {
                a += x[i] * d.hidden.w[[i, h]];
            }
            z += a / (1.0 + (-a).exp()) * d.out.w[[h, 0]];
        }
        1.0 / (1.0 + (-z).exp())
    };
    let mut v = 0.0;
    for row in visual.rows() {
        v += prob(row).ln() / visual.nrows() as f64;
    }
    for row in audio.rows() {
        v += (1.0 - prob(row)).ln() / audio.nrows() as f64;
    }
    v
}

// ---------------------------------------------------------------------------
// criteria

fn stft_round_trip() -> Outcome {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let plan = StftPlan::<f64>::new(cfg).unwrap();
    let len = 40960;
    let mut worst: f64 = 0.0;
    let mut dims = (0, 0);
    for k in 0..100 {
        let mut rng = derived_rng(k, Domain::Mixture, 1000);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = plan.forward(&x).unwrap();
        dims = spec.dim();
        let y = plan.inverse(&spec, len).unwrap();
        worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-6 && dims == (257, 257) && within(t, 30),
        format!("max |x - istft(stft(x))| = {worst:.2e}, grid {dims:?}, {t:.1?}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for id in [
        LossId::SiSnrPipeline,
        LossId::TripletPipeline,
        LossId::AdversarialPipeline,
        LossId::IdentityTriplet,
        LossId::PhoneticTriplet,
        LossId::AdversarialDiscriminator,
        LossId::AdversarialEmbeddings,
    ] {
        let r = gradient_check(id, 1e-5, 11).unwrap();
        worst = worst.max(r.max_rel_err);
        parts.push(format!("{id:?} {:.1e}", r.max_rel_err));
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && within(t, 120),
        format!("max rel err {worst:.2e} [{}], {t:.1?}", parts.join(", ")),
    )
}

fn metric_oracles() -> Outcome {
    let mut worst_si: f64 = 0.0;
    let mut worst_bss: f64 = 0.0;
    let mut worst_adv: f64 = 0.0;
    for k in 0..50 {
        let mut rng = derived_rng(k, Domain::Mixture, 2000);
        let n = rng.random_range(32..128);
        let mut v = |scale: f64| -> Vec<f64> { (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect() };
        let (r1, r2, noise) = (v(1.0), v(1.0), v(0.3));
        let est: Vec<f64> = (0..n).map(|i| 0.8 * r1[i] + 0.3 * r2[i] + noise[i]).collect();
        let w = |x: &Vec<f64>| Waveform::new(x.clone(), 16000).unwrap();
        worst_si = worst_si.max((si_snr(&w(&r1), &w(&est)).unwrap() - oracle_si_snr(&r1, &est)).abs());
        let b = bss_eval([&w(&r1), &w(&r2)], &w(&est)).unwrap();
        let (sdr, sir, sar) = oracle_bss(&r1, &r2, &est);
        worst_bss = worst_bss
            .max((b.sdr - sdr).abs())
            .max((b.sir - sir).abs())
            .max((b.sar - sar).abs());

        let d = Mlp::<f64>::new(6, 5, &mut rng);
        let vis = Array2::from_shape_simple_fn((rng.random_range(1..8), 6), || rng.random_range(-1.0..1.0));
        let aud = Array2::from_shape_simple_fn((rng.random_range(1..8), 6), || rng.random_range(-1.0..1.0));
        let got = adversarial_value(&d, &vis.view(), &aud.view()).unwrap();
        worst_adv = worst_adv.max((got - oracle_adversarial(&d, &vis, &aud)).abs());
    }
    let mut rng = derived_rng(3, Domain::Mixture, 3000);
    let r: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e: Vec<f64> = r.iter().map(|x| x + 0.4 * rng.random_range(-1.0..1.0)).collect();
    let base = si_snr(&Waveform::new(r.clone(), 16000).unwrap(), &Waveform::new(e.clone(), 16000).unwrap()).unwrap();
    let mut worst_scale: f64 = 0.0;
    for alpha in [0.1, 3.0, -2.0] {
        let scaled = Waveform::new(e.iter().map(|x| alpha * x).collect(), 16000).unwrap();
        let v = si_snr(&Waveform::new(r.clone(), 16000).unwrap(), &scaled).unwrap();
        worst_scale = worst_scale.max((v - base).abs());
    }
    let half = Mlp::<f64>::zeros(4, 3);
    let x = Array2::from_elem((5, 4), 0.7);
    let uninformative = adversarial_value(&half, &x.view(), &x.view()).unwrap();
    let pass = worst_si < 1e-9
        && worst_bss < 1e-6
        && worst_adv < 1e-9
        && worst_scale < 1e-9
        && (uninformative + 1.38629).abs() < 1e-5;
    outcome(
        pass,
        format!(
            "si_snr {worst_si:.1e}, bss {worst_bss:.1e} dB, adversarial {worst_adv:.1e}, scale {worst_scale:.1e}, D=0.5 value {uninformative:.6}"
        ),
    )
}

struct Fixture {
    ds: Dataset32,
    extractors: Extractors32,
    extractor_time: Duration,
    plan: StftPlan<f32>,
}

fn fixture() -> Fixture {
    let start = Instant::now();
    let ds = generate_dataset::<f32>(&WorldConfig::default(), DATA_SEED).unwrap();
    let extractors = pretrain_extractors(&ds, &ExtractorConfig::default(), DATA_SEED).unwrap();
    Fixture {
        ds,
        extractors,
        extractor_time: start.elapsed(),
        plan: StftPlan::new(StftConfig::default()).unwrap(),
    }
}

fn irm_floor(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let set = test_mixtures(&fx.ds, 50, TEST_SEED, HardCase::None).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for m in &set {
        let est = irm_separate(&fx.plan, &m.target().audio, &m.interferer().audio).unwrap();
        before += si_snr(&m.target().audio, &m.mixture).unwrap() / set.len() as f64;
        after += si_snr(&m.target().audio, &est).unwrap() / set.len() as f64;
    }
    let t = start.elapsed();
    outcome(
        after - before >= 10.0 && within(t, 60),
        format!("mixture {before:.2} dB -> IRM {after:.2} dB (+{:.2}), {t:.1?}", after - before),
    )
}

fn extractor_accuracy(fx: &Fixture) -> Outcome {
    let r = fx.extractors.report();
    outcome(
        r.speaker_audio >= 0.90 && r.phoneme_audio >= 0.80 && r.phoneme_visual >= 0.75 && within(fx.extractor_time, 300),
        format!(
            "speaker {:.3} (visual {:.3}), audio phoneme {:.3}, visual phoneme {:.3}, {} epochs, {:.1?} incl. data",
            r.speaker_audio, r.speaker_visual, r.phoneme_audio, r.phoneme_visual, r.epochs, fx.extractor_time
        ),
    )
}

struct Trained {
    mode: TrainMode,
    params: Separator32,
    mean_si_snr: f64,
    train_time: Duration,
}

fn train_all(fx: &Fixture) -> (Vec<Trained>, Duration) {
    let start = Instant::now();
    let test = test_mixtures(&fx.ds, TEST_MIXTURES, TEST_SEED, HardCase::None).unwrap();
    let arch = ArchConfig::default();
    let models = TrainMode::ALL
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig {
                mode,
                steps: TRAIN_STEPS,
                eval_every: TRAIN_STEPS,
                seed: TRAIN_SEED,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let out = train(&fx.ds, Some(&fx.extractors), &arch, &cfg).unwrap();
            let train_time = t0.elapsed();
            let rows = evaluate(&out.params, &fx.plan, &test).unwrap();
            Trained {
                mode,
                params: out.params,
                mean_si_snr: mean_metrics(&rows).si_snr,
                train_time,
            }
        })
        .collect();
    (models, start.elapsed())
}

fn ordinal_separation(models: &[Trained], t: Duration) -> Outcome {
    let base = models[0].mean_si_snr;
    let (tri, adv) = (models[1].mean_si_snr, models[2].mean_si_snr);
    outcome(
        tri >= base + 0.3 && adv >= base + 0.3 && within(t, 900),
        format!(
            "baseline {base:.3} dB, triplet {tri:.3} ({:+.3}), adversarial {adv:.3} ({:+.3}) on {TEST_MIXTURES} mixtures, {t:.1?} (training {})",
            tri - base,
            adv - base,
            models
                .iter()
                .map(|m| format!("{} {:.0?}", m.mode, m.train_time))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn probe_equilibrium(fx: &Fixture, models: &[Trained]) -> Outcome {
    let train_set = seeded_mixtures(&fx.ds.train, 200, TEST_SEED, Domain::Probe, HardCase::None).unwrap();
    let test_set = test_mixtures(&fx.ds, TEST_MIXTURES, TEST_SEED, HardCase::None).unwrap();
    let acc = |m: &Trained, which| {
        let tr = separated_embeddings(&m.params, &fx.extractors, &fx.plan, &train_set, which).unwrap();
        let te = separated_embeddings(&m.params, &fx.extractors, &fx.plan, &test_set, which).unwrap();
        probe_accuracy(&tr, &te, &ProbeConfig::default()).unwrap()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for which in [ProbeEmbedding::Identity, ProbeEmbedding::Phonetic] {
        let (b, a) = (acc(&models[0], which), acc(&models[2], which));
        pass &= b >= 0.85 && (0.4..=0.65).contains(&a);
        parts.push(format!("{which:?}: baseline {b:.3}, adversarial {a:.3}"));
    }
    outcome(pass, parts.join("; "))
}

fn scatter_set(fx: &Fixture) -> Vec<avsep::toyworld::MixtureSample<f32>> {
    seeded_mixtures(&fx.ds.test, TEST_MIXTURES, TEST_SEED, Domain::Scatter, HardCase::None).unwrap()
}

fn correlation_auc(fx: &Fixture, models: &[Trained]) -> Outcome {
    let set = scatter_set(fx);
    let aucs: Vec<f64> = models
        .iter()
        .map(|m| scatter_auc(&correlation_scatter(&m.params, &fx.extractors, &fx.plan, &set).unwrap()).unwrap())
        .collect();
    outcome(
        aucs[1] - aucs[0] >= 0.10,
        format!(
            "AUC baseline {:.4}, triplet {:.4} ({:+.4}), adversarial {:.4} ({:+.4})",
            aucs[0],
            aucs[1],
            aucs[1] - aucs[0],
            aucs[2],
            aucs[2] - aucs[0]
        ),
    )
}

fn inference_parity(fx: &Fixture, models: &[Trained]) -> Outcome {
    let set = test_mixtures(&fx.ds, 16, TEST_SEED, HardCase::None).unwrap();
    let mut clean = true;
    for m in models {
        instrument::reset();
        for s in &set {
            separate_with_plan(&m.params, &s.mixture, &s.target().visuals, &fx.plan).unwrap();
        }
        let c = instrument::snapshot();
        clean &= c.extractor == 0 && c.discriminator == 0 && c.separator > 0;
    }
    // Models are interleaved per mixture and each keeps its fastest of several
    // repetitions, so host jitter hits all modes alike instead of one block.
    let mut fastest = vec![vec![Duration::MAX; set.len()]; models.len()];
    for round in 0..7 {
        for (i, s) in set.iter().enumerate() {
            for j in 0..models.len() {
                let k = (j + round + i) % models.len();
                let start = Instant::now();
                separate_with_plan(&models[k].params, &s.mixture, &s.target().visuals, &fx.plan).unwrap();
                fastest[k][i] = fastest[k][i].min(start.elapsed());
            }
        }
    }
    let best: Vec<Duration> = fastest.iter().map(|v| v.iter().sum()).collect();
    let (lo, hi) = (best.iter().min().unwrap(), best.iter().max().unwrap());
    let spread = hi.as_secs_f64() / lo.as_secs_f64() - 1.0;
    outcome(
        clean && spread <= 0.05,
        format!(
            "extractor/discriminator ops on inference path: {}; latency {} (spread {:.1}%)",
            if clean { "none" } else { "PRESENT" },
            models
                .iter()
                .zip(&best)
                .map(|(m, t)| format!("{} {:.1?}", m.mode, t))
                .collect::<Vec<_>>()
                .join(", "),
            100.0 * spread
        ),
    )
}

fn determinism(fx: &Fixture, models: &[Trained]) -> Outcome {
    let test = test_mixtures(&fx.ds, TEST_MIXTURES, TEST_SEED, HardCase::None).unwrap();
    let scatter = scatter_set(fx);
    let mut same = true;
    for m in models {
        let eval = || eval_csv(&evaluate(&m.params, &fx.plan, &test).unwrap());
        let scat = || scatter_csv(&correlation_scatter(&m.params, &fx.extractors, &fx.plan, &scatter).unwrap());
        same &= eval() == eval() && scat() == scat();
    }
    outcome(same, format!("eval and scatter CSVs of {} models regenerated twice", models.len()))
}

fn main() {
    let mut failures = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures.push(n);
        }
    };
    report(1, "stft round trip", stft_round_trip());
    report(2, "gradient suite", gradient_suite());
    report(3, "metric oracles", metric_oracles());
    let fx = fixture();
    report(4, "ideal ratio mask floor", irm_floor(&fx));
    report(5, "extractor accuracy", extractor_accuracy(&fx));
    let (models, t) = train_all(&fx);
    report(6, "ordinal separation", ordinal_separation(&models, t));
    report(7, "adversarial probe", probe_equilibrium(&fx, &models));
    report(8, "correlation auc", correlation_auc(&fx, &models));
    report(9, "inference parity", inference_parity(&fx, &models));
    report(10, "determinism", determinism(&fx, &models));
    if !failures.is_empty() {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}

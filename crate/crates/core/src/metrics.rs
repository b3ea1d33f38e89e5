//! Separation quality metrics: SI-SNR (also the training objective),
//! whole-signal BSS-eval decomposition and a 16 kHz short-time objective
//! intelligibility score.
//!
//! Log-ratio metrics are capped to `±CAP_DB` so exact recovery cannot
//! produce infinities.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::signal::Waveform;

pub const CAP_DB: f64 = 60.0;
pub const EPS: f64 = 1e-12;

fn capped_db(num: f64, den: f64) -> f64 {
    let v = 10.0 * (num / (den + EPS)).log10();
    if v.is_nan() {
        -CAP_DB
    } else {
        v.clamp(-CAP_DB, CAP_DB)
    }
}

fn check_pair<T: Real>(a: &Waveform<T>, b: &Waveform<T>, what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what,
            left: a.len(),
            right: b.len(),
        });
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::RateMismatch(a.sample_rate, b.sample_rate));
    }
    Ok(())
}

fn centered<T: Real>(x: &[T]) -> Vec<T> {
    let mean = x.iter().copied().sum::<T>() / T::from_usize(x.len().max(1)).unwrap();
    x.iter().map(|&v| v - mean).collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Scale-invariant SNR in dB, computed in `f64`.
pub fn si_snr<T: Real>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    check_pair(reference, estimate, "si_snr")?;
    let r: Vec<f64> = centered(&crate::real::cast_slice::<T, f64>(&reference.samples));
    let e: Vec<f64> = centered(&crate::real::cast_slice::<T, f64>(&estimate.samples));
    let rr = dot(&r, &r);
    if rr <= 0.0 {
        return Err(Error::ZeroNorm("si_snr reference"));
    }
    let alpha = dot(&e, &r) / rr;
    let (mut st, mut nn) = (0.0, 0.0);
    for (&ri, &ei) in r.iter().zip(&e) {
        let s = alpha * ri;
        st += s * s;
        nn += (ei - s) * (ei - s);
    }
    Ok(capped_db(st, nn))
}

/// SI-SNR and its gradient with respect to the estimate samples, in the
/// working precision. The gradient is zero where the value is capped.
pub fn si_snr_grad<T: Real>(reference: &[T], estimate: &[T]) -> Result<(T, Vec<T>)> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch {
            what: "si_snr",
            left: reference.len(),
            right: estimate.len(),
        });
    }
    let r = centered(reference);
    let e = centered(estimate);
    let rr = dot(&r, &r);
    if rr <= T::zero() {
        return Err(Error::ZeroNorm("si_snr reference"));
    }
    let alpha = dot(&e, &r) / rr;
    let s: Vec<T> = r.iter().map(|&v| alpha * v).collect();
    let n: Vec<T> = e.iter().zip(&s).map(|(&a, &b)| a - b).collect();
    let a = dot(&s, &s);
    let b = dot(&n, &n) + T::lit(EPS);
    let k = T::lit(10.0 / std::f64::consts::LN_10);
    let value = k * (a.ln() - b.ln());
    let cap = T::lit(CAP_DB);
    if !(value > -cap && value < cap) {
        let v = if value.is_nan() { -cap } else { value.max(-cap).min(cap) };
        return Ok((v, vec![T::zero(); estimate.len()]));
    }
    let two = T::lit(2.0);
    let g: Vec<T> = s.iter().zip(&n).map(|(&si, &ni)| k * two * (si / a - ni / b)).collect();
    // s and n are zero-mean, so the centering adjoint leaves g unchanged up to roundoff
    Ok((value, centered(&g)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssReport {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// Components of the whole-signal decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct BssComponents {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

/// Projects the estimate onto the target reference and onto the span of
/// both references.
pub fn bss_decompose<T: Real>(refs: [&Waveform<T>; 2], estimate: &Waveform<T>) -> Result<BssComponents> {
    check_pair(refs[0], estimate, "bss_eval")?;
    check_pair(refs[1], estimate, "bss_eval")?;
    let r1 = crate::real::cast_slice::<T, f64>(&refs[0].samples);
    let r2 = crate::real::cast_slice::<T, f64>(&refs[1].samples);
    let e = crate::real::cast_slice::<T, f64>(&estimate.samples);
    let (g11, g12, g22) = (dot(&r1, &r1), dot(&r1, &r2), dot(&r2, &r2));
    let det = g11 * g22 - g12 * g12;
    if g11 <= 0.0 || g22 <= 0.0 || det <= 1e-10 * g11 * g22 {
        return Err(Error::CollinearReferences);
    }
    let (b1, b2) = (dot(&e, &r1), dot(&e, &r2));
    let c1 = (g22 * b1 - g12 * b2) / det;
    let c2 = (g11 * b2 - g12 * b1) / det;
    let a = b1 / g11;
    let mut out = BssComponents {
        s_target: Vec::with_capacity(e.len()),
        e_interf: Vec::with_capacity(e.len()),
        e_artif: Vec::with_capacity(e.len()),
    };
    for i in 0..e.len() {
        let st = a * r1[i];
        let both = c1 * r1[i] + c2 * r2[i];
        out.s_target.push(st);
        out.e_interf.push(both - st);
        out.e_artif.push(e[i] - both);
    }
    Ok(out)
}

/// SDR, SIR and SAR of `estimate` against `refs[0]` with `refs[1]` as the
/// interference.
pub fn bss_eval<T: Real>(refs: [&Waveform<T>; 2], estimate: &Waveform<T>) -> Result<BssReport> {
    let c = bss_decompose(refs, estimate)?;
    let energy = |x: &[f64]| dot(x, x);
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    let st = energy(&c.s_target);
    Ok(BssReport {
        sdr: capped_db(st, energy(&sum(&c.e_interf, &c.e_artif))),
        sir: capped_db(st, energy(&c.e_interf)),
        sar: capped_db(energy(&sum(&c.s_target, &c.e_interf)), energy(&c.e_artif)),
    })
}

/// Analysis constants of [`stoi_desk`] at 16 kHz.
pub mod stoi {
    pub const SAMPLE_RATE: u32 = 16000;
    /// 25.6 ms Hann frames with 50% overlap.
    pub const FRAME: usize = 410;
    pub const HOP: usize = 205;
    pub const NFFT: usize = 1024;
    /// Frames per correlation segment (about 384 ms).
    pub const SEGMENT: usize = 30;
    pub const BANDS: usize = 15;
    pub const MIN_FREQ: f64 = 150.0;
    /// Lower signal-to-distortion bound of the clipping step, in dB.
    pub const BETA_DB: f64 = -15.0;
    pub const DYN_RANGE_DB: f64 = 40.0;
}

fn stoi_window() -> Vec<f64> {
    // Hann of length FRAME + 2 without its zero endpoints
    let n = stoi::FRAME + 2;
    (1..=stoi::FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Drops frames more than `DYN_RANGE_DB` below the loudest reference frame
/// from both signals and overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = (0..)
        .map(|k| k * stoi::HOP)
        .take_while(|&s| s + stoi::FRAME <= x.len())
        .collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..stoi::FRAME).map(|n| (w[n] * x[s + n]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| e > max - stoi::DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    let len = if kept.is_empty() { 0 } else { (kept.len() - 1) * stoi::HOP + stoi::FRAME };
    let mut xs = vec![0.0; len];
    let mut ys = vec![0.0; len];
    for (k, &s) in kept.iter().enumerate() {
        let o = k * stoi::HOP;
        for n in 0..stoi::FRAME {
            xs[o + n] += w[n] * x[s + n];
            ys[o + n] += w[n] * y[s + n];
        }
    }
    (xs, ys)
}

/// Third-octave band magnitudes, `bands x frames`.
fn band_envelopes(x: &[f64], w: &[f64], fft: &dyn rustfft::Fft<f64>) -> Array2<f64> {
    let n_frames = if x.len() < stoi::FRAME { 0 } else { (x.len() - stoi::FRAME) / stoi::HOP + 1 };
    let bins = stoi::NFFT / 2 + 1;
    let df = stoi::SAMPLE_RATE as f64 / stoi::NFFT as f64;
    let nearest = |f: f64| ((f / df).round() as usize).min(bins - 1);
    let edges: Vec<(usize, usize)> = (0..stoi::BANDS)
        .map(|k| {
            let lo = stoi::MIN_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
            let hi = stoi::MIN_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect();
    let mut out = Array2::zeros((stoi::BANDS, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); stoi::NFFT];
    for m in 0..n_frames {
        buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        for n in 0..stoi::FRAME {
            buf[n] = Complex::new(w[n] * x[m * stoi::HOP + n], 0.0);
        }
        fft.process(&mut buf);
        for (j, &(lo, hi)) in edges.iter().enumerate() {
            out[(j, m)] = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        }
    }
    out
}

/// Short-time objective intelligibility of `estimate` against `reference`
/// (16 kHz only). Returns a mean correlation in `[-1, 1]`.
pub fn stoi_desk<T: Real>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    check_pair(reference, estimate, "stoi")?;
    if reference.sample_rate != stoi::SAMPLE_RATE {
        return Err(Error::RateMismatch(reference.sample_rate, stoi::SAMPLE_RATE));
    }
    let x = crate::real::cast_slice::<T, f64>(&reference.samples);
    let y = crate::real::cast_slice::<T, f64>(&estimate.samples);
    let w = stoi_window();
    let (xs, ys) = remove_silent_frames(&x, &y, &w);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(stoi::NFFT);
    let xb = band_envelopes(&xs, &w, fft.as_ref());
    let yb = band_envelopes(&ys, &w, fft.as_ref());
    let frames = xb.ncols();
    if frames < stoi::SEGMENT {
        return Err(Error::TooShort {
            what: "stoi (frames after silence removal)",
            need: stoi::SEGMENT,
            got: frames,
        });
    }
    let clip = 10f64.powf(-stoi::BETA_DB / 20.0);
    let n = stoi::SEGMENT;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in n..=frames {
        for j in 0..stoi::BANDS {
            let xseg: Vec<f64> = (m - n..m).map(|t| xb[(j, t)]).collect();
            let yseg: Vec<f64> = (m - n..m).map(|t| yb[(j, t)]).collect();
            let alpha = dot(&xseg, &xseg).sqrt() / (dot(&yseg, &yseg).sqrt() + f64::EPSILON);
            let yp: Vec<f64> = yseg
                .iter()
                .zip(&xseg)
                .map(|(&yv, &xv)| (alpha * yv).min(xv * (1.0 + clip)))
                .collect();
            let xc = centered(&xseg);
            let yc = centered(&yp);
            let den = (dot(&xc, &xc).sqrt() + f64::EPSILON) * (dot(&yc, &yc).sqrt() + f64::EPSILON);
            total += dot(&xc, &yc) / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// All per-mixture metrics of one separated estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub si_snr: f64,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub stoi: f64,
}

pub fn metric_report<T: Real>(target: &Waveform<T>, interferer: &Waveform<T>, estimate: &Waveform<T>) -> Result<MetricReport> {
    let bss = bss_eval([target, interferer], estimate)?;
    Ok(MetricReport {
        si_snr: si_snr(target, estimate)?,
        sdr: bss.sdr,
        sir: bss.sir,
        sar: bss.sar,
        stoi: stoi_desk(target, estimate)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn wave(v: Vec<f64>) -> Waveform<f64> {
        Waveform::new(v, 16000).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn si_snr_known_values() {
        let r = noise(64, 1);
        let r = centered(&r);
        assert_eq!(si_snr(&wave(r.clone()), &wave(r.iter().map(|v| 2.5 * v).collect())).unwrap(), CAP_DB);
        // orthogonal residual with one tenth of the target norm
        let mut n = centered(&noise(64, 2));
        let k = dot(&n, &r) / dot(&r, &r);
        n.iter_mut().zip(&r).for_each(|(a, b)| *a -= k * b);
        let scale = (dot(&r, &r) / dot(&n, &n)).sqrt() / 10.0;
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + scale * b).collect();
        assert!((si_snr(&wave(r), &wave(est)).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn si_snr_errors() {
        assert!(matches!(si_snr(&wave(vec![0.0; 8]), &wave(vec![1.0; 8])), Err(Error::ZeroNorm(_))));
        assert!(matches!(si_snr(&wave(vec![1.0, 2.0]), &wave(vec![1.0; 3])), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn si_snr_gradient() {
        let r = noise(48, 3);
        let e = noise(48, 4);
        let (v, g) = si_snr_grad(&r, &e).unwrap();
        assert!((v - si_snr(&wave(r.clone()), &wave(e.clone())).unwrap()).abs() < 1e-9);
        let h = 1e-6;
        for k in 0..48 {
            let mut p = e.clone();
            let mut m = e.clone();
            p[k] += h;
            m[k] -= h;
            let num = (si_snr_grad(&r, &p).unwrap().0 - si_snr_grad(&r, &m).unwrap().0) / (2.0 * h);
            assert!((num - g[k]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn bss_caps_and_identity() {
        let r1 = wave(noise(256, 5));
        // interference orthogonal to the target, so it has no target component
        let mut v2 = noise(256, 6);
        let k = dot(&v2, &r1.samples) / dot(&r1.samples, &r1.samples);
        v2.iter_mut().zip(&r1.samples).for_each(|(a, b)| *a -= k * b);
        let r2 = wave(v2);
        let rep = bss_eval([&r1, &r2], &r1).unwrap();
        assert_eq!((rep.sdr, rep.sir, rep.sar), (CAP_DB, CAP_DB, CAP_DB));
        assert_eq!(bss_eval([&r1, &r2], &r2).unwrap().sir, -CAP_DB);
        let est = wave(noise(256, 7));
        let c = bss_decompose([&r1, &r2], &est).unwrap();
        for i in 0..256 {
            let rec = c.s_target[i] + c.e_interf[i] + c.e_artif[i];
            assert!((rec - est.samples[i]).abs() < 1e-9);
        }
        let col = wave(r1.samples.iter().map(|v| -3.0 * v).collect());
        assert!(matches!(bss_eval([&r1, &col], &est), Err(Error::CollinearReferences)));
    }

    fn tone_bursts(n: usize, seed: u64) -> Vec<f64> {
        // speech-like amplitude modulated noise
        let base = noise(n, seed);
        base.iter()
            .enumerate()
            .map(|(i, v)| v * (0.6 + 0.4 * (i as f64 * 2.0 * std::f64::consts::PI * 4.0 / 16000.0).sin()))
            .collect()
    }

    #[test]
    fn stoi_self_noise_and_monotonicity() {
        let x = tone_bursts(40960, 8);
        assert!(stoi_desk(&wave(x.clone()), &wave(x.clone())).unwrap() >= 0.99);
        let n = noise(40960, 9);
        assert!(stoi_desk(&wave(x.clone()), &wave(n.clone())).unwrap() < 0.2);
        let px = dot(&x, &x);
        let pn = dot(&n, &n);
        let mut last = f64::NEG_INFINITY;
        for snr in [-10.0, 0.0, 10.0, 20.0] {
            let g = (px / pn / 10f64.powf(snr / 10.0)).sqrt();
            let y: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + g * b).collect();
            let s = stoi_desk(&wave(x.clone()), &wave(y)).unwrap();
            assert!(s >= last, "stoi not monotone at {snr} dB: {s} < {last}");
            last = s;
        }
    }

    #[test]
    fn stoi_rejects_short_input() {
        let x = wave(noise(2000, 1));
        assert!(matches!(stoi_desk(&x, &x), Err(Error::TooShort { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn si_snr_ignores_estimate_gain(
                seed in any::<u64>(),
                gain in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
            ) {
                let r = noise(256, seed);
                let e: Vec<f64> = r.iter().zip(noise(256, seed ^ 1)).map(|(a, b)| a + 0.3 * b).collect();
                let scaled: Vec<f64> = e.iter().map(|v| v * gain).collect();
                let base = si_snr(&wave(r.clone()), &wave(e)).unwrap();
                let s = si_snr(&wave(r), &wave(scaled)).unwrap();
                prop_assert!((base - s).abs() < 1e-9);
                prop_assert!(base.abs() <= CAP_DB);
            }
        }
    }
}

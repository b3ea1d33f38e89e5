use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::real::Real;

/// Short-time Fourier transform geometry.
///
/// The window is a periodic Hann window of `window_size` samples, zero-padded
/// symmetrically to `nfft`. With `center` set the signal is reflect-padded by
/// `nfft / 2` samples on each side so frame `t` is centered on sample
/// `t * hop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftConfig {
    pub nfft: usize,
    pub hop: usize,
    pub window_size: usize,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            nfft: 512,
            hop: 160,
            window_size: 512,
            center: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfft < 2 || self.nfft % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "nfft must be even and >= 2, got {}",
                self.nfft
            )));
        }
        if self.hop == 0 || self.hop > self.window_size || self.window_size > self.nfft {
            return Err(Error::InvalidInput(format!(
                "require 0 < hop <= window_size <= nfft, got hop={} window_size={} nfft={}",
                self.hop, self.window_size, self.nfft
            )));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins, `nfft / 2 + 1`.
    pub fn n_freq(&self) -> usize {
        self.nfft / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.center {
            self.nfft / 2
        } else {
            0
        }
    }

    /// Frame count produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center {
            len / self.hop + 1
        } else if len < self.nfft {
            0
        } else {
            (len - self.nfft) / self.hop + 1
        }
    }

    /// Analysis/synthesis window, `nfft` long.
    pub fn window<T: Real>(&self) -> Vec<T> {
        let mut w = vec![T::zero(); self.nfft];
        let offset = (self.nfft - self.window_size) / 2;
        let two_pi = T::PI() + T::PI();
        let size = T::from_usize(self.window_size).unwrap();
        let half = T::lit(0.5);
        for n in 0..self.window_size {
            let phase = two_pi * T::from_usize(n).unwrap() / size;
            w[offset + n] = half - half * phase.cos();
        }
        w
    }
}

/// Complex STFT grid of shape `(frames, nfft / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    pub values: Array2<Complex<T>>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length of the waveform the grid was computed from; iSTFT restores it.
    pub signal_len: usize,
}

impl<T: Real> Spectrogram<T> {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_freq(&self) -> usize {
        self.values.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: Array2::from_elem(self.values.dim(), Complex::new(T::zero(), T::zero())),
            config: self.config,
            sample_rate: self.sample_rate,
            signal_len: self.signal_len,
        }
    }

    /// Entrywise magnitude.
    pub fn magnitude(&self) -> Array2<T> {
        self.values.mapv(|c| c.norm())
    }
}

/// Reusable transform state: window, FFT plans and the synthesis envelope.
pub struct StftPlan<T: Real> {
    cfg: StftConfig,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> StftPlan<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.nfft),
            inverse: planner.plan_fft_inverse(cfg.nfft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn padded(&self, x: &[T]) -> Result<Vec<T>> {
        let pad = self.cfg.pad();
        if !self.cfg.center {
            if x.len() < self.cfg.nfft {
                return Err(Error::TooShort {
                    what: "stft",
                    need: self.cfg.nfft,
                    got: x.len(),
                });
            }
            return Ok(x.to_vec());
        }
        if x.len() <= pad {
            return Err(Error::TooShort {
                what: "stft reflect padding",
                need: pad + 1,
                got: x.len(),
            });
        }
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        out.extend((1..=pad).rev().map(|j| x[j]));
        out.extend_from_slice(x);
        out.extend((1..=pad).map(|j| x[n - 1 - j]));
        Ok(out)
    }

    /// Forward transform of raw samples.
    pub fn forward(&self, x: &[T]) -> Result<Array2<Complex<T>>> {
        if let Some(i) = x.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("stft input sample {i}")));
        }
        let padded = self.padded(x)?;
        let nfft = self.cfg.nfft;
        let frames = self.cfg.n_frames(x.len());
        let nf = self.cfg.n_freq();
        let mut out = Array2::from_elem((frames, nf), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); nfft];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for n in 0..nfft {
                buf[n] = Complex::new(padded[start + n] * self.window[n], T::zero());
            }
            self.forward.process(&mut buf);
            for (k, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = buf[k];
            }
        }
        Ok(out)
    }

    /// Overlap-add envelope `sum_t w[n - t*hop]^2` over the padded time axis.
    fn envelope(&self, frames: usize) -> Vec<T> {
        let total = self.cfg.nfft + self.cfg.hop * frames.saturating_sub(1);
        let mut env = vec![T::zero(); total];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (n, &w) in self.window.iter().enumerate() {
                env[start + n] += w * w;
            }
        }
        env
    }

    fn checked_envelope(&self, frames: usize, len: usize) -> Result<(Vec<T>, usize)> {
        let env = self.envelope(frames);
        let pad = self.cfg.pad();
        let tol = T::lit(1e-11);
        for i in 0..len {
            let p = pad + i;
            if p >= env.len() || env[p] <= tol {
                return Err(Error::Cola { index: i });
            }
        }
        Ok((env, pad))
    }

    /// Inverse transform by windowed overlap-add with window-square
    /// normalization, returning `len` samples.
    pub fn inverse(&self, spec: &Array2<Complex<T>>, len: usize) -> Result<Vec<T>> {
        let nf = self.cfg.n_freq();
        if spec.ncols() != nf {
            return Err(Error::ShapeMismatch {
                what: "istft",
                expected: (spec.nrows(), nf),
                got: spec.dim(),
            });
        }
        let frames = spec.nrows();
        let (env, pad) = self.checked_envelope(frames, len)?;
        let nfft = self.cfg.nfft;
        let scale = T::one() / T::from_usize(nfft).unwrap();
        let mut acc = vec![T::zero(); env.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); nfft];
        for t in 0..frames {
            let row = spec.row(t);
            for v in buf.iter_mut() {
                *v = Complex::new(T::zero(), T::zero());
            }
            // Hermitian extension; imaginary parts of DC and Nyquist are ignored.
            buf[0] = Complex::new(row[0].re, T::zero());
            buf[nfft / 2] = Complex::new(row[nfft / 2].re, T::zero());
            for k in 1..nfft / 2 {
                buf[k] = row[k];
                buf[nfft - k] = row[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.cfg.hop;
            for n in 0..nfft {
                acc[start + n] += buf[n].re * scale * self.window[n];
            }
        }
        Ok((0..len).map(|i| acc[pad + i] / env[pad + i]).collect())
    }

    /// Adjoint of [`StftPlan::forward`]: maps a gradient on the complex grid
    /// (as `d/dRe + i d/dIm`) to a gradient on the `len` input samples.
    pub fn forward_adjoint(&self, grad: &Array2<Complex<T>>, len: usize) -> Result<Vec<T>> {
        let frames = self.cfg.n_frames(len);
        let nf = self.cfg.n_freq();
        if grad.dim() != (frames, nf) {
            return Err(Error::ShapeMismatch {
                what: "stft adjoint",
                expected: (frames, nf),
                got: grad.dim(),
            });
        }
        let pad = self.cfg.pad();
        let nfft = self.cfg.nfft;
        let mut gp = vec![T::zero(); len + 2 * pad];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); nfft];
        for t in 0..frames {
            for v in buf.iter_mut() {
                *v = Complex::new(T::zero(), T::zero());
            }
            for (k, g) in grad.row(t).iter().enumerate() {
                buf[k] = *g;
            }
            self.inverse.process(&mut buf);
            let start = t * self.cfg.hop;
            for n in 0..nfft {
                gp[start + n] += buf[n].re * self.window[n];
            }
        }
        let mut gx: Vec<T> = gp[pad..pad + len].to_vec();
        if self.cfg.center {
            for j in 1..=pad {
                gx[j] += gp[pad - j];
                gx[len - 1 - j] += gp[pad + len - 1 + j];
            }
        }
        Ok(gx)
    }

    /// Adjoint of [`StftPlan::inverse`]: maps a gradient on the output
    /// samples to a gradient on the complex grid.
    pub fn inverse_adjoint(&self, grad: &[T], frames: usize) -> Result<Array2<Complex<T>>> {
        let len = grad.len();
        let (env, pad) = self.checked_envelope(frames, len)?;
        let nfft = self.cfg.nfft;
        let nf = self.cfg.n_freq();
        let mut gb = vec![T::zero(); env.len()];
        for i in 0..len {
            gb[pad + i] = grad[i] / env[pad + i];
        }
        let inv_n = T::one() / T::from_usize(nfft).unwrap();
        let two = T::lit(2.0);
        let mut out = Array2::from_elem((frames, nf), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); nfft];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for n in 0..nfft {
                buf[n] = Complex::new(gb[start + n] * self.window[n], T::zero());
            }
            self.forward.process(&mut buf);
            let mut row = out.row_mut(t);
            for k in 0..nf {
                let c = if k == 0 || k == nfft / 2 { inv_n } else { two * inv_n };
                row[k] = if k == 0 || k == nfft / 2 {
                    Complex::new(buf[k].re * c, T::zero())
                } else {
                    buf[k] * c
                };
            }
        }
        Ok(out)
    }
}

/// Short-time Fourier transform of `wave`.
pub fn stft<T: Real>(wave: &Waveform<T>, cfg: &StftConfig) -> Result<Spectrogram<T>> {
    let plan = StftPlan::new(*cfg)?;
    Ok(Spectrogram {
        values: plan.forward(&wave.samples)?,
        config: *cfg,
        sample_rate: wave.sample_rate,
        signal_len: wave.len(),
    })
}

/// Inverse STFT restoring the originating signal length.
pub fn istft<T: Real>(spec: &Spectrogram<T>, cfg: &StftConfig) -> Result<Waveform<T>> {
    if spec.config != *cfg {
        return Err(Error::InvalidInput(
            "spectrogram was produced with a different STFT configuration".into(),
        ));
    }
    if spec.values.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("istft input".into()));
    }
    let plan = StftPlan::new(*cfg)?;
    let samples = plan.inverse(&spec.values, spec.signal_len)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Vector-Jacobian product of [`stft`].
pub fn stft_adjoint<T: Real>(
    grad: &Array2<Complex<T>>,
    len: usize,
    cfg: &StftConfig,
) -> Result<Vec<T>> {
    StftPlan::new(*cfg)?.forward_adjoint(grad, len)
}

/// Vector-Jacobian product of [`istft`].
pub fn istft_adjoint<T: Real>(
    grad: &[T],
    frames: usize,
    cfg: &StftConfig,
) -> Result<Array2<Complex<T>>> {
    StftPlan::new(*cfg)?.inverse_adjoint(grad, frames)
}

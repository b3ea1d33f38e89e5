//! Waveforms, STFT/iSTFT and the linear adjoints used to backpropagate
//! through them.

mod stft;
mod wav;

pub use stft::{istft, istft_adjoint, stft, stft_adjoint, Spectrogram, StftConfig, StftPlan};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Mono, real-valued time-domain signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    /// Wraps `samples`, rejecting NaN and infinities.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        let w = Self {
            samples,
            sample_rate,
        };
        w.check_finite()?;
        Ok(w)
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![T::zero(); len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, &s| if s.abs() > m { s.abs() } else { m })
    }

    pub fn rms(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        let n = T::from_usize(self.samples.len()).unwrap();
        (crate::real::norm_sq(&self.samples) / n).sqrt()
    }

    pub fn scaled(&self, gain: T) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Converts to another scalar type.
    pub fn cast<D: Real>(&self) -> Waveform<D> {
        Waveform {
            samples: crate::real::cast_slice(&self.samples),
            sample_rate: self.sample_rate,
        }
    }

    /// Errors on the first NaN or infinite sample.
    pub fn check_finite(&self) -> Result<()> {
        match self.samples.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("waveform sample {i}"))),
            None => Ok(()),
        }
    }
}

/// Sums two equally long, equally sampled waveforms: `x[t] = a1[t] + a2[t]`.
pub fn mix<T: Real>(a1: &Waveform<T>, a2: &Waveform<T>) -> Result<Waveform<T>> {
    if a1.sample_rate != a2.sample_rate {
        return Err(Error::RateMismatch(a1.sample_rate, a2.sample_rate));
    }
    if a1.len() != a2.len() {
        return Err(Error::LengthMismatch {
            what: "mix",
            left: a1.len(),
            right: a2.len(),
        });
    }
    let samples = a1
        .samples
        .iter()
        .zip(&a2.samples)
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: a1.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Waveform<f64> {
        Waveform::new((0..n).map(|i| (i as f64 * 0.01).sin()).collect(), 16000).unwrap()
    }

    #[test]
    fn mix_with_silence_is_identity() {
        let a = ramp(1000);
        let z = Waveform::zeros(1000, 16000);
        assert_eq!(mix(&a, &z).unwrap(), a);
    }

    #[test]
    fn mix_commutes() {
        let a = ramp(777);
        let b = Waveform::new((0..777).map(|i| (i as f64 * 0.37).cos()).collect(), 16000).unwrap();
        assert_eq!(mix(&a, &b).unwrap(), mix(&b, &a).unwrap());
    }

    #[test]
    fn mix_rejects_length_mismatch() {
        let a = Waveform::<f64>::zeros(40960, 16000);
        let b = Waveform::<f64>::zeros(40000, 16000);
        assert!(matches!(
            mix(&a, &b),
            Err(Error::LengthMismatch {
                left: 40960,
                right: 40000,
                ..
            })
        ));
    }

    #[test]
    fn mix_rejects_rate_mismatch() {
        let a = Waveform::<f32>::zeros(10, 16000);
        let b = Waveform::<f32>::zeros(10, 8000);
        assert!(matches!(mix(&a, &b), Err(Error::RateMismatch(16000, 8000))));
    }

    #[test]
    fn non_finite_samples_rejected() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![f32::INFINITY], 16000).is_err());
    }
}

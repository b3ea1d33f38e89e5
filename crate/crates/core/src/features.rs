//! Compressed log-power features shared by the separator's audio encoder and
//! the audio extractors.
//!
//! `phi = SCALE * ln(1 + |X|^2 / KAPPA)`: zero for a silent bin, smooth
//! everywhere, and logarithmic for loud bins.

use ndarray::{Array2, Zip};
use num_complex::Complex;

use crate::real::Real;

pub const KAPPA: f64 = 1e-2;
pub const SCALE: f64 = 0.1;

pub fn log_power<T: Real>(spec: &Array2<Complex<T>>) -> Array2<T> {
    let kappa = T::lit(KAPPA);
    let scale = T::lit(SCALE);
    spec.mapv(|x| scale * (x.norm_sqr() / kappa).ln_1p())
}

/// Vector-Jacobian product of [`log_power`]: the returned complex grid holds
/// `d/dRe + i d/dIm` for every bin.
pub fn log_power_backward<T: Real>(spec: &Array2<Complex<T>>, dphi: &Array2<T>) -> Array2<Complex<T>> {
    let kappa = T::lit(KAPPA);
    let two_scale = T::lit(2.0 * SCALE);
    let mut out = Array2::from_elem(spec.dim(), Complex::new(T::zero(), T::zero()));
    Zip::from(&mut out).and(spec).and(dphi).for_each(|o, &x, &g| {
        let c = two_scale * g / (kappa + x.norm_sqr());
        *o = x * c;
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_maps_to_zero() {
        let z = Array2::from_elem((3, 4), Complex::new(0.0f64, 0.0));
        assert!(log_power(&z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = Array2::from_shape_simple_fn((4, 5), || {
            Complex::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        });
        let g = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let grad = log_power_backward(&spec, &g);
        let f = |s: &Array2<Complex<f64>>| (log_power(s) * &g).sum();
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (3, 4)] {
            for imag in [false, true] {
                let mut p = spec.clone();
                let mut m = spec.clone();
                let d = if imag { Complex::new(0.0, h) } else { Complex::new(h, 0.0) };
                p[idx] += d;
                m[idx] -= d;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                let ana = if imag { grad[idx].im } else { grad[idx].re };
                assert!((num - ana).abs() < 1e-7 * (1.0 + ana.abs()), "{num} vs {ana}");
            }
        }
    }
}

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first step
/// and matched to tensors by visit order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        let mut gs: Vec<&Array2<T>> = Vec::new();
        grads.visit(&mut |_, g| gs.push(g));
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = gs.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.step_size);
        let eps = T::lit(c.eps);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            Zip::from(p)
                .and(&mut m[i])
                .and(&mut v[i])
                .and(gs[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / corr1;
                    let vh = *v / corr2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Quad(Array2<f64>);

    impl Parameters<f64> for Quad {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
            f("x", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
            f("x", &mut self.0);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Quad(Array2::from_elem((2, 2), 3.0));
        let mut opt = Adam::new(AdamConfig {
            step_size: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let g = Quad(p.0.mapv(|x| 2.0 * (x - 1.0)));
            opt.step(&mut p, &g);
        }
        assert!(p.0.iter().all(|&x| (x - 1.0).abs() < 1e-3));
        assert_eq!(opt.steps_taken(), 2000);
    }
}

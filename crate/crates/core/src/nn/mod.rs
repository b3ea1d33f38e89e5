//! Minimal dense/convolutional layers with explicit backward passes, the
//! parameter-visitor abstraction and an Adam optimizer.
//!
//! Every layer keeps its bias as a `1 x out` matrix so that all trainable
//! state is a list of `Array2` tensors; optimizers, checkpoints and the
//! gradient checker all walk that list through [`Parameters`].

mod adam;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    avg_pool2, avg_pool2_backward, concat_cols, sigmoid, silu, silu_backward, split_cols, upsample2,
    upsample2_backward, Conv1d, Dense,
};

use ndarray::Array2;
use rand::Rng;

use crate::real::Real;

/// A bundle of named trainable tensors visited in a stable order.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.fill(T::zero()));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: T)
    where
        Self: Sized,
    {
        let mut src = Vec::new();
        other.visit(&mut |_, t| src.push(t));
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            t.scaled_add(scale, src[i]);
            i += 1;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Flattened copy of every parameter, in visit order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, t| out.extend(t.iter().copied()));
        out
    }
}

/// Glorot-uniform initial weights.
pub fn glorot<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(-a..a)))
}

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::glorot;
use crate::real::Real;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Gradient of SiLU at pre-activation `x`, multiplied by upstream `g`.
#[inline]
pub fn silu_backward<T: Real>(x: T, g: T) -> T {
    let s = sigmoid(x);
    g * s * (T::one() + x * (T::one() - s))
}

/// Affine layer applied row-wise: `y = x W + b`, with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(input, output, input, output, rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        x: &ArrayView2<T>,
        dy: &Array2<T>,
        grad: Option<&mut Dense<T>>,
        need_input: bool,
    ) -> Option<Array2<T>> {
        if let Some(g) = grad {
            ndarray::linalg::general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g.w);
            g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        need_input.then(|| dy.dot(&self.w.t()))
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Temporal convolution with "same" zero padding, lowered to a matrix
/// product over an im2col buffer. Rows are time steps, columns channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub kernel: usize,
    /// `(kernel * in) x out`, tap-major.
    pub w: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            kernel,
            w: glorot(kernel * input, output, kernel * input, output, rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn im2col(&self, x: &ArrayView2<T>) -> Array2<T> {
        let (steps, ch) = x.dim();
        let half = (self.kernel / 2) as isize;
        let mut cols = Array2::zeros((steps, self.kernel * ch));
        for t in 0..steps {
            for k in 0..self.kernel {
                let src = t as isize + k as isize - half;
                if src >= 0 && (src as usize) < steps {
                    cols.slice_mut(s![t, k * ch..(k + 1) * ch])
                        .assign(&x.row(src as usize));
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, ch: usize) -> Array2<T> {
        let steps = dcols.nrows();
        let half = (self.kernel / 2) as isize;
        let mut dx = Array2::zeros((steps, ch));
        for t in 0..steps {
            for k in 0..self.kernel {
                let src = t as isize + k as isize - half;
                if src >= 0 && (src as usize) < steps {
                    let mut row = dx.row_mut(src as usize);
                    row += &dcols.slice(s![t, k * ch..(k + 1) * ch]);
                }
            }
        }
        dx
    }

    /// Returns `(im2col buffer, pre-activation output)`.
    pub fn forward(&self, x: &ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.w);
        y += &self.b;
        (cols, y)
    }

    pub fn backward(
        &self,
        cols: &Array2<T>,
        dy: &Array2<T>,
        grad: Option<&mut Conv1d<T>>,
        need_input: bool,
    ) -> Option<Array2<T>> {
        if let Some(g) = grad {
            ndarray::linalg::general_mat_mul(T::one(), &cols.t(), dy, T::one(), &mut g.w);
            g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        need_input.then(|| self.col2im(&dy.dot(&self.w.t()), self.input_dim()))
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Averages consecutive pairs of rows; an odd trailing row is kept as is.
pub fn avg_pool2<T: Real>(x: &Array2<T>) -> Array2<T> {
    let (steps, ch) = x.dim();
    let out_steps = steps.div_ceil(2);
    let half = T::lit(0.5);
    let mut y = Array2::zeros((out_steps, ch));
    for i in 0..out_steps {
        if 2 * i + 1 < steps {
            let mut row = y.row_mut(i);
            row.assign(&x.row(2 * i));
            row += &x.row(2 * i + 1);
            row *= half;
        } else {
            y.row_mut(i).assign(&x.row(2 * i));
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &Array2<T>, steps: usize) -> Array2<T> {
    let ch = dy.ncols();
    let half = T::lit(0.5);
    let mut dx = Array2::zeros((steps, ch));
    for i in 0..dy.nrows() {
        if 2 * i + 1 < steps {
            let g = dy.row(i).mapv(|v| v * half);
            dx.row_mut(2 * i).assign(&g);
            dx.row_mut(2 * i + 1).assign(&g);
        } else {
            dx.row_mut(2 * i).assign(&dy.row(i));
        }
    }
    dx
}

/// Nearest-neighbour upsampling by two, truncated to `steps` rows.
pub fn upsample2<T: Real>(x: &Array2<T>, steps: usize) -> Array2<T> {
    let mut y = Array2::zeros((steps, x.ncols()));
    for t in 0..steps {
        y.row_mut(t).assign(&x.row(t / 2));
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Array2<T>, coarse_steps: usize) -> Array2<T> {
    let mut dx = Array2::zeros((coarse_steps, dy.ncols()));
    for t in 0..dy.nrows() {
        let mut row = dx.row_mut(t / 2);
        row += &dy.row(t);
    }
    dx
}

pub fn concat_cols<T: Real>(parts: &[ArrayView2<T>]) -> Array2<T> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}

/// Splits columns at the given widths.
pub fn split_cols<T: Real>(x: &Array2<T>, widths: &[usize]) -> Vec<Array2<T>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &w in widths {
        out.push(x.slice(s![.., start..start + w]).to_owned());
        start += w;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn sum_weighted(y: &Array2<f64>, g: &Array2<f64>) -> f64 {
        (y * g).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::<f64>::new(3, 4, 3, &mut rng);
        let x = rand_mat(7, 3, &mut rng);
        let (_, y) = conv.forward(&x.view());
        for t in 0..7 {
            for o in 0..4 {
                let mut acc = conv.b[[0, o]];
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if (0..7).contains(&src) {
                        for c in 0..3 {
                            acc += x[[src as usize, c]] * conv.w[[k * 3 + c, o]];
                        }
                    }
                }
                assert!((acc - y[[t, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::<f64>::new(2, 3, 3, &mut rng);
        let x = rand_mat(5, 2, &mut rng);
        let g = rand_mat(5, 3, &mut rng);
        let (cols, _) = conv.forward(&x.view());
        let mut grad = Conv1d {
            kernel: 3,
            w: Array2::zeros(conv.w.dim()),
            b: Array2::zeros(conv.b.dim()),
        };
        let dx = conv.backward(&cols, &g, Some(&mut grad), true).unwrap();
        let eps = 1e-6;
        for t in 0..5 {
            for c in 0..2 {
                let mut xp = x.clone();
                xp[[t, c]] += eps;
                let mut xm = x.clone();
                xm[[t, c]] -= eps;
                let fd = (sum_weighted(&conv.forward(&xp.view()).1, &g)
                    - sum_weighted(&conv.forward(&xm.view()).1, &g))
                    / (2.0 * eps);
                assert!((fd - dx[[t, c]]).abs() < 1e-8);
            }
        }
        let mut cp = conv.clone();
        cp.w[[4, 1]] += eps;
        let mut cm = conv.clone();
        cm.w[[4, 1]] -= eps;
        let fd = (sum_weighted(&cp.forward(&x.view()).1, &g) - sum_weighted(&cm.forward(&x.view()).1, &g))
            / (2.0 * eps);
        assert!((fd - grad.w[[4, 1]]).abs() < 1e-8);
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for steps in [6, 7] {
            let x = rand_mat(steps, 2, &mut rng);
            let g = rand_mat(steps.div_ceil(2), 2, &mut rng);
            let lhs = sum_weighted(&avg_pool2(&x), &g);
            let rhs = sum_weighted(&x, &avg_pool2_backward(&g, steps));
            assert!((lhs - rhs).abs() < 1e-12);

            let c = rand_mat(steps.div_ceil(2), 2, &mut rng);
            let gu = rand_mat(steps, 2, &mut rng);
            let lhs = sum_weighted(&upsample2(&c, steps), &gu);
            let rhs = sum_weighted(&c, &upsample2_backward(&gu, steps.div_ceil(2)));
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let eps = 1e-6;
            let fd = (silu(x + eps) - silu(x - eps)) / (2.0 * eps);
            assert!((fd - silu_backward(x, 1.0)).abs() < 1e-9);
        }
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}

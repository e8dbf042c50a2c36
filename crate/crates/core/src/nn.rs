//! Dense building blocks with hand-written backward passes.
//!
//! Every layer here works on one sequence at a time: activations are `[T, d]`
//! row matrices and weights follow the `y = W x + b` convention with `W` stored
//! as `[d_out, d_in]`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamSet;

const LN_EPS: f64 = 1e-5;

/// Mixes a base seed with a list of stream tags (splitmix64 finaliser).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h = h.wrapping_add(t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[d_out, d_in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(d_in)`, zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: uniform_matrix(d_out, d_in, bound, rng),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `dL/dx`; accumulates weight/bias gradients when `grad` is given.
    pub fn backward_rows(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut g.weight);
            g.bias += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight)
    }

    pub fn backward_vec(
        &self,
        x: ArrayView1<f64>,
        dy: ArrayView1<f64>,
        grad: Option<&mut Linear>,
    ) -> Array1<f64> {
        if let Some(g) = grad {
            outer_add(&mut g.weight, dy, x);
            g.bias += &dy;
        }
        self.weight.t().dot(&dy)
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("weight", self.weight.shape(), slice(&self.weight));
        f("bias", self.bias.shape(), self.bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.weight.shape().to_vec();
        f("weight", &shape, self.weight.as_slice_mut().expect("contiguous"));
        let shape = self.bias.shape().to_vec();
        f("bias", &shape, self.bias.as_slice_mut().expect("contiguous"));
    }
}

/// `m += a ⊗ b`
pub fn outer_add(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    Zip::from(m.rows_mut()).and(&a).for_each(|mut row, &ai| {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    });
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
        grad: Option<&mut LayerNorm>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
            g.beta += &dy.sum_axis(Axis(0));
        }
        let d = dy.ncols() as f64;
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let is = cache.inv_std[i];
            let mut out = dx.row_mut(i);
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = is * (gi - mean_g - xi * mean_gx));
        }
        dx
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("gamma", self.gamma.shape(), self.gamma.as_slice().expect("contiguous"));
        f("beta", self.beta.shape(), self.beta.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.gamma.shape().to_vec();
        f("gamma", &shape, self.gamma.as_slice_mut().expect("contiguous"));
        let shape = self.beta.shape().to_vec();
        f("beta", &shape, self.beta.as_slice_mut().expect("contiguous"));
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Cross-entropy of `logits` against `target`; returns `(loss, dL/dlogits)`.
pub fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let loss = -(p[target].max(f64::MIN_POSITIVE)).ln();
    p[target] -= 1.0;
    (loss, Array1::from(p))
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise mean of the selected rows.
pub fn mean_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut out = Array1::zeros(x.ncols());
    for &r in rows {
        out += &x.row(r);
    }
    out / rows.len() as f64
}

pub fn head_slice(m: &Array2<f64>, h: usize, dh: usize) -> ArrayView2<'_, f64> {
    m.slice(s![.., h * dh..(h + 1) * dh])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.5, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = Array1::from(vec![0.3, -1.2, 2.0]);
        let (loss, g) = cross_entropy(logits.view(), 1);
        assert!(loss > 0.0);
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = rng_for(7, &[]);
        let mut ln = LayerNorm::new(5);
        ln.gamma = Array1::from(vec![1.0, 0.5, -0.3, 2.0, 1.1]);
        ln.beta = Array1::from(vec![0.1, 0.0, 0.2, -0.1, 0.3]);
        let x = uniform_matrix(3, 5, 1.0, &mut rng);
        let w = uniform_matrix(3, 5, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (&ln.forward(x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(x.view());
        let dx = ln.backward(&cache, w.view(), None);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(5, &[3, 4]), derive_seed(5, &[3, 4]));
    }
}

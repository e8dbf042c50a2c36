//! Named parameter traversal, the Adam optimizer, and checksums.
//!
//! Gradient buffers reuse the parameter types themselves, so a model and its
//! gradient visit tensors in the same order and Adam can pair them by offset.

use sha2::{Digest, Sha256};

pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, _, d| d.fill(0.0));
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _, _| out.push(n.to_string()));
        out
    }

    /// SHA-256 over the exact bit patterns of every tensor, in visit order.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, shape, data| {
            hasher.update(name.as_bytes());
            for &s in shape {
                hasher.update((s as u64).to_le_bytes());
            }
            for &x in data {
                hasher.update(x.to_bits().to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Visits `child` with every name prefixed by `prefix.`.
pub fn visit_child(
    prefix: &str,
    child: &dyn ParamSet,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    child.visit(&mut |n, s, d| f(&format!("{prefix}.{n}"), s, d));
}

pub fn visit_child_mut(
    prefix: &str,
    child: &mut dyn ParamSet,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    child.visit_mut(&mut |n, s, d| f(&format!("{prefix}.{n}"), s, d));
}

/// Adds `other` into `acc` tensor by tensor; both must share a layout.
pub fn accumulate(acc: &mut dyn ParamSet, other: &dyn ParamSet) {
    let flat = other.flatten();
    let mut off = 0;
    acc.visit_mut(&mut |_, _, d| {
        let n = d.len();
        for (x, g) in d.iter_mut().zip(&flat[off..off + n]) {
            *x += g;
        }
        off += n;
    });
    assert_eq!(off, flat.len(), "gradient layout mismatch");
}

pub fn scale(set: &mut dyn ParamSet, factor: f64) {
    set.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|x| *x *= factor));
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay or schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub settings: AdamSettings,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, settings: AdamSettings) -> Self {
        Self {
            lr,
            settings,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &dyn ParamSet) {
        self.step_parts(&mut [params], &[grads]);
    }

    /// Grows the moment buffers by `n` zeros at flat offset `at`, for a
    /// parameter group that gained entries.
    pub fn insert_zeros(&mut self, at: usize, n: usize) {
        if self.m.is_empty() {
            return;
        }
        self.m.splice(at..at, std::iter::repeat_n(0.0, n));
        self.v.splice(at..at, std::iter::repeat_n(0.0, n));
    }

    /// One update over several parameter groups treated as one flat vector.
    /// `grads[k]` must share the layout of `params[k]`.
    pub fn step_parts(&mut self, params: &mut [&mut dyn ParamSet], grads: &[&dyn ParamSet]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter group");
        let mut g = Vec::new();
        for part in grads {
            part.visit(&mut |_, _, d| g.extend_from_slice(d));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        assert_eq!(self.m.len(), g.len(), "optimizer bound to a different layout");
        self.t += 1;
        let AdamSettings { beta1, beta2, eps } = self.settings;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let lr = self.lr;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        for part in params.iter_mut() {
            part.visit_mut(&mut |_, _, d| {
                for (k, x) in d.iter_mut().enumerate() {
                    let i = off + k;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + eps);
                }
                off += d.len();
            });
        }
        assert_eq!(off, g.len(), "gradient layout mismatch");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Linear::zeros(2, 1);
        let mut g = Linear::zeros(2, 1);
        g.weight[[0, 0]] = 3.0;
        g.weight[[0, 1]] = -0.01;
        let mut adam = Adam::new(0.1, AdamSettings::default());
        adam.step(&mut p, &g);
        assert!((p.weight[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((p.weight[[0, 1]] - 0.1).abs() < 1e-4);
        assert_eq!(p.bias[0], 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut rng = crate::nn::rng_for(1, &[]);
        let mut p = Linear::new(3, 2, &mut rng);
        let before = p.checksum();
        let mut g = p.clone();
        g.weight.fill(1.0);
        let mut adam = Adam::new(0.0, AdamSettings::default());
        adam.step(&mut p, &g);
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn names_are_stable() {
        let p = Linear::zeros(2, 2);
        assert_eq!(p.names(), vec!["weight", "bias"]);
        assert_eq!(p.num_params(), 6);
    }
}

//! Flat parameter vectors with a named-slice index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Grads, Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / (fan_in + fan_out)`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered slices that partition a flat parameter vector exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    slices: Vec<ParamSlice>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice and returns its index.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate slice {name}");
        self.slices.push(ParamSlice {
            name,
            rows,
            cols,
            offset: self.total,
            init,
        });
        self.total += rows * cols;
        self.slices.len() - 1
    }

    /// Weight matrix `fan_in × fan_out` with Xavier init.
    pub fn weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> usize {
        self.push(name, fan_in, fan_out, Init::Xavier { fan_in, fan_out })
    }

    pub fn bias(&mut self, name: impl Into<String>, dim: usize) -> usize {
        self.push(name, 1, dim, Init::Zeros)
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// Draws initial values; deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; self.total];
        for s in &self.slices {
            let dst = &mut out[s.range()];
            match s.init {
                Init::Zeros => {}
                Init::Ones => dst.iter_mut().for_each(|v| *v = 1.0),
                Init::Xavier { fan_in, fan_out } => {
                    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    dst.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
            }
        }
        out
    }

    /// Copies a slice out of `params` as a matrix.
    pub fn matrix(&self, params: &[f64], idx: usize) -> Mat {
        let s = &self.slices[idx];
        Mat::from_shape_vec((s.rows, s.cols), params[s.range()].to_vec()).expect("slice shape")
    }

    /// Places every slice on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, params: &[f64]) -> Vec<Var> {
        (0..self.slices.len())
            .map(|i| tape.param(self.matrix(params, i)))
            .collect()
    }

    /// Collects leaf gradients into a flat vector aligned with the parameters.
    pub fn gather(&self, grads: &Grads, vars: &[Var]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for (s, &v) in self.slices.iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                out[s.range()]
                    .iter_mut()
                    .zip(g.iter())
                    .for_each(|(o, &x)| *o = x);
            }
        }
        out
    }

    /// Name of the first slice holding a non-finite value, if any.
    pub fn first_non_finite(&self, values: &[f64]) -> Option<&str> {
        self.slices
            .iter()
            .find(|s| values[s.range()].iter().any(|v| !v.is_finite()))
            .map(|s| s.name.as_str())
    }

    pub fn check_finite(&self, values: &[f64], what: &str) -> Result<()> {
        match self.first_non_finite(values) {
            Some(name) => Err(Error::NonFinite(format!("{what} slice `{name}`"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_partition_the_vector() {
        let mut l = ParamLayout::new();
        l.weight("a", 3, 4);
        l.bias("b", 4);
        l.push("g", 1, 4, Init::Ones);
        assert_eq!(l.total(), 12 + 4 + 4);
        let mut next = 0;
        for s in l.slices() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, l.total());
        let p = l.init(7);
        assert_eq!(p, l.init(7));
        assert!(p[12..16].iter().all(|&v| v == 0.0));
        assert!(p[16..20].iter().all(|&v| v == 1.0));
    }
}

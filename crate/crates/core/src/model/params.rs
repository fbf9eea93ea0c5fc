use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    /// Panics on an unknown name; parameter names are fixed by the config.
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn he(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| normal.sample(self.rng)).collect())
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: f64) {
        let w = self.he(&[cout, cin, k, k], cin * k * k, gain);
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// 3x3 convolution initialized to the identity map.
    pub fn conv_identity(&mut self, name: &str, channels: usize) {
        let mut w = Tensor::zeros(&[channels, channels, 3, 3]);
        for c in 0..channels {
            w.data_mut()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[channels]));
    }

    /// Transposed convolution, weight `(Cin, Cout, k, k)`.
    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        // Each output pixel of a stride-k, kernel-k transposed conv sees
        // exactly one input pixel, so the fan-in is `cin`.
        let w = self.he(&[cin, cout, k, k], cin, 0.5);
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn linear(&mut self, name: &str, dout: usize, din: usize) {
        let w = self.he(&[dout, din], din, 1.0);
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    pub fn linear_zero(&mut self, name: &str, dout: usize, din: usize) {
        self.store.insert(format!("{name}.w"), Tensor::zeros(&[dout, din]));
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
    }
}

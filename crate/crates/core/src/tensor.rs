//! Dense row-major tensors and named parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from `f64` rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| S::of(v)).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a parameter, marking it trainable. Replaces any previous entry of the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        let mut t = tensor;
        t.requires_grad = true;
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Sets every gradient to zeros.
    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = Some(vec![S::zero(); t.numel()]);
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grad(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    /// Weight values only; gradients are ignored.
    pub fn values_eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .entries
                .values()
                .zip(other.entries.values())
                .all(|(a, b)| a.data == b.data)
    }

    pub fn insert_xavier<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid xavier bound");
        let data = (0..fan_in * fan_out).map(|_| S::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data).expect("shape"));
    }

    pub fn insert_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| S::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(vec![rows, cols], data).expect("shape"));
    }

    pub fn insert_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![S::of(value); n]).expect("shape"));
    }
}

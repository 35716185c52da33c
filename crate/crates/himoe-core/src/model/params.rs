use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Ordered, named parameter tensors. Order is creation order and defines the
/// layout of flattened views, gradients, and checkpoint blocks.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn position(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.values[self.position(name)]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total_elements());
        for t in &self.values {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.total_elements());
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn to_f64(&self) -> ParamSet<f64> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.to_f64()).collect(),
            index: self.index.clone(),
        }
    }

    pub fn of_f64(src: &ParamSet<f64>) -> ParamSet<T> {
        ParamSet {
            names: src.names.clone(),
            values: src.values.iter().map(Tensor::of_f64).collect(),
            index: src.index.clone(),
        }
    }
}

/// Graph nodes for every parameter of a [`ParamSet`], in parameter order.
pub struct ParamNodes(pub Vec<NodeId>);

impl ParamNodes {
    pub fn emit<T: Scalar>(params: &ParamSet<T>, g: &mut Graph<T>) -> Self {
        ParamNodes(params.tensors().iter().map(|t| g.leaf(t.clone())).collect())
    }

    pub fn node(&self, params: &ParamSet<impl Scalar>, name: &str) -> NodeId {
        self.0[params.position(name)]
    }
}

/// Builds parameter tensors with fan-in-scaled normal init.
pub struct ParamInit<'a, T: Scalar> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> ParamInit<'_, T> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let normal = Normal::new(0.0f64, 1.0 / (rows as f64).sqrt()).unwrap();
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::of_f64(normal.sample(self.rng)))
            .collect();
        self.params.insert(name, Tensor::new(vec![rows, cols], data).unwrap());
    }

    pub fn zeros(&mut self, name: &str, n: usize) {
        self.params.insert(name, Tensor::zeros(vec![n]));
    }

    pub fn ones(&mut self, name: &str, n: usize) {
        self.params.insert(name, Tensor::new(vec![n], vec![T::one(); n]).unwrap());
    }

    /// Small uniform init for embeddings.
    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) {
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::of_f64(self.rng.gen_range(-0.05..0.05)))
            .collect();
        self.params.insert(name, Tensor::new(vec![rows, cols], data).unwrap());
    }
}

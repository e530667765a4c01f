//! Named parameter storage and gradient accumulation.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All learnable tensors of a model, addressable by stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.as_matrix_dims()?;
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform Glorot-style initialisation for a `rows x cols` matrix.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(name, rows, cols, bound, rng)
    }

    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(vec![rows, cols]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces tensor values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter name sets differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("assign_from", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Gradient of one parameter: dense, or a set of touched rows for lookup tables.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Vec<T>),
    Rows { cols: usize, rows: BTreeMap<usize, Vec<T>> },
}

impl<T: Scalar> ParamGrad<T> {
    fn add_assign(&mut self, other: &ParamGrad<T>) {
        match (self, other) {
            (ParamGrad::Dense(a), ParamGrad::Dense(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = *x + *y;
                }
            }
            (ParamGrad::Rows { rows: a, .. }, ParamGrad::Rows { rows: b, .. }) => {
                for (r, g) in b {
                    accumulate_row(a, *r, g);
                }
            }
            (ParamGrad::Dense(a), ParamGrad::Rows { cols, rows }) => {
                for (r, g) in rows {
                    for (x, y) in a[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
            }
            (this @ ParamGrad::Rows { .. }, ParamGrad::Dense(b)) => {
                let mut dense = b.clone();
                if let ParamGrad::Rows { cols, rows } = &*this {
                    for (r, g) in rows {
                        for (x, y) in dense[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *x = *x + *y;
                        }
                    }
                }
                *this = ParamGrad::Dense(dense);
            }
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<T> {
        match self {
            ParamGrad::Dense(v) => v.clone(),
            ParamGrad::Rows { cols, rows } => {
                let mut out = vec![T::zero(); len];
                for (r, g) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                out
            }
        }
    }

    fn scale(&mut self, s: T) {
        match self {
            ParamGrad::Dense(v) => v.iter_mut().for_each(|x| *x = *x * s),
            ParamGrad::Rows { rows, .. } => rows
                .values_mut()
                .flat_map(|r| r.iter_mut())
                .for_each(|x| *x = *x * s),
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            ParamGrad::Dense(v) => Box::new(v.iter()),
            ParamGrad::Rows { rows, .. } => Box::new(rows.values().flat_map(|r| r.iter())),
        }
    }
}

pub(crate) fn accumulate_row<T: Scalar>(rows: &mut BTreeMap<usize, Vec<T>>, r: usize, g: &[T]) {
    match rows.get_mut(&r) {
        Some(acc) => {
            for (x, y) in acc.iter_mut().zip(g) {
                *x = *x + *y;
            }
        }
        None => {
            rows.insert(r, g.to_vec());
        }
    }
}

/// Per-parameter gradients; parameters that were never touched hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<ParamGrad<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn num_params(&self) -> usize {
        self.grads.len()
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn dense(&self, id: ParamId, len: usize) -> Vec<T> {
        self.get(id)
            .map(|g| g.to_dense(len))
            .unwrap_or_else(|| vec![T::zero(); len])
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: ParamGrad<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Adds every gradient in `other` into `self`.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.grads.iter_mut().flatten().for_each(|g| g.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.values().all(|v| v.is_finite()))
    }
}

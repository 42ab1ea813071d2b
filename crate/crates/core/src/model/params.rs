use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Handle to one tensor in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies (matrices yes; biases and
    /// norm parameters no).
    pub decay: bool,
}

/// All learnable tensors, in registration order, each with a unique name.
/// Vectors are stored as `1 x n` matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    pub fn register(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self.params.iter().map(|p| Array2::zeros(p.value.dim())).collect(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; names and shapes must
    /// match this store exactly.
    pub fn load_values(&mut self, values: Vec<(String, Array2<f64>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, (name, v)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.dim() != v.dim() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    v.dim(),
                    p.name,
                    p.value.dim()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}

/// Gradient buffers laid out like the store they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.grads
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

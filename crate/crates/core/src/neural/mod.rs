//! Neural building blocks: a differentiation tape, recurrent, attention and
//! hypergraph-convolution layers, the Adam optimiser, checkpoints and a
//! finite-difference gradient checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP};
pub use graph::{elu, sigmoid, softmax_rows, Bindings, Gradients, Graph, Var};
pub use layers::{
    gru_forward, gru_param_shapes, hypergraph_conv, latent_attention, latent_attention_param_shapes, lstm_forward,
    lstm_param_shapes, mha_forward, mha_param_shapes, mlp_forward, mlp_param_shapes, mse_loss, Activation,
    ConvStructure, LstmOutput, MhaOutput,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("parameter {name}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("input {name}: expected shape {expected:?}, got {actual:?}")]
    InputShape {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("hypergraph node {0} has zero degree")]
    ZeroDegree(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A matrix value with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Option<Array2<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(value: Array2<f64>) -> Self {
        Self {
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Array2<f64>) -> Self {
        Self {
            value,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform on `±√(1/fan_in)` where `fan_in` is the row count.
    Weight,
    Zero,
}

/// Name, shape and initialiser of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: InitKind,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: (rows, cols),
            init: InitKind::Weight,
        }
    }

    pub fn zero(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: (rows, cols),
            init: InitKind::Zero,
        }
    }
}

/// Named parameters in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draw every spec with the given generator, in order.
    pub fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut out = Self::new();
        for spec in specs {
            let (r, c) = spec.shape;
            let value = match spec.init {
                InitKind::Zero => Array2::zeros((r, c)),
                InitKind::Weight => {
                    let bound = (1.0 / r.max(1) as f64).sqrt();
                    Array2::from_shape_simple_fn((r, c), || rng.random_range(-bound..=bound))
                }
            };
            out.insert(spec.name.clone(), Tensor::new(value));
        }
        out
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>, NeuralError> {
        self.get(name)
            .map(|t| &t.value)
            .ok_or_else(|| NeuralError::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn n_values(&self) -> usize {
        self.tensors.values().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Add gradients by name into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Array2<f64>>) {
        for (name, g) in grads {
            if let Some(t) = self.tensors.get_mut(name) {
                match &mut t.grad {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    /// Check that every spec is present with the right shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<(), NeuralError> {
        for spec in specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| NeuralError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape {
                return Err(NeuralError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape,
                    actual: t.shape(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_zero_biases() {
        let specs = vec![ParamSpec::weight("w", 25, 3), ParamSpec::zero("b", 1, 3)];
        let p = ParameterSet::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.value("w").unwrap().iter().all(|x| x.abs() <= 0.2));
        assert!(p.value("b").unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(p.n_values(), 78);
        let again = ParameterSet::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p, again);
    }

    #[test]
    fn check_specs_names_offender() {
        let specs = vec![ParamSpec::weight("w", 2, 3)];
        let mut p = ParameterSet::new();
        assert_eq!(p.check_specs(&specs), Err(NeuralError::MissingParam("w".into())));
        p.insert("w", Tensor::new(Array2::zeros((3, 2))));
        match p.check_specs(&specs) {
            Err(NeuralError::ParamShape { name, .. }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

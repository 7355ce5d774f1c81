use std::collections::BTreeMap;

use ndarray::Array2;

use super::{NeuralError, ParameterSet};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Array2<f64>>,
    second: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient are left alone.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Array2<f64>>) -> Result<(), NeuralError> {
        for (name, g) in grads {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(NeuralError::NonFiniteGradient(name.clone()));
            }
            let t = params
                .get(name)
                .ok_or_else(|| NeuralError::MissingParam(name.clone()))?;
            if t.shape() != g.dim() {
                return Err(NeuralError::ParamShape {
                    name: name.clone(),
                    expected: t.shape(),
                    actual: g.dim(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let tensor = params.get_mut(name).expect("checked above");
            if !tensor.requires_grad {
                continue;
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(&mut tensor.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|theta, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *theta -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

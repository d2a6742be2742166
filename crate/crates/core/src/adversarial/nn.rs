//! Fully connected layer with hand-written backward pass.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..limit));
        Dense {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// `x` is `in x n` (one column per sample); returns `out x n`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.weight.dot(x) + self.bias.view().insert_axis(Axis(1))
    }

    /// Given the forward input `x` and `dy = dL/dy`, returns parameter
    /// gradients and `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (DenseGrad, Array2<f64>) {
        let grad = DenseGrad {
            weight: dy.dot(&x.t()),
            bias: dy.sum_axis(Axis(1)),
        };
        (grad, self.weight.t().dot(dy))
    }

    pub fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn apply(&mut self, grad: &DenseGrad, lr: f64) {
        self.weight.scaled_add(-lr, &grad.weight);
        self.bias.scaled_add(-lr, &grad.bias);
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

impl DenseGrad {
    pub fn add_assign(&mut self, other: &DenseGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }
}

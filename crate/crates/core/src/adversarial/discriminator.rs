use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Dense, DenseGrad};

/// Two-layer perceptron scoring a fused ROI vector. The output is a raw
/// score: positive means "source", negative means "target".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorGrad {
    pub hidden: DenseGrad,
    pub output: DenseGrad,
}

/// Activations kept for the backward pass.
pub struct DiscriminatorTrace {
    inputs: Array2<f64>,
    hidden: Array2<f64>,
}

impl Discriminator {
    pub const DEFAULT_HIDDEN: usize = 16;

    pub fn new(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Discriminator {
            hidden: Dense::init(inputs, hidden, &mut rng),
            output: Dense::init(hidden, 1, &mut rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    /// Scores a batch of fused vectors.
    pub fn forward(&self, rois: &[Array1<f64>]) -> (Vec<f64>, DiscriminatorTrace) {
        let n = rois.len();
        let mut inputs = Array2::zeros((self.inputs(), n));
        for (j, v) in rois.iter().enumerate() {
            inputs.column_mut(j).assign(v);
        }
        let hidden = self.hidden.forward(&inputs).mapv(f64::tanh);
        let scores = self.output.forward(&hidden).row(0).to_vec();
        (scores, DiscriminatorTrace { inputs, hidden })
    }

    pub fn score(&self, roi: &Array1<f64>) -> f64 {
        self.forward(std::slice::from_ref(roi)).0[0]
    }

    /// Given `dL/dscore` per ROI, returns parameter gradients and
    /// `dL/droi` per ROI.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace,
        dscores: &[f64],
    ) -> (DiscriminatorGrad, Vec<Array1<f64>>) {
        let dy = Array1::from(dscores.to_vec()).insert_axis(Axis(0));
        let (g_out, dh) = self.output.backward(&trace.hidden, &dy);
        let dz = dh * trace.hidden.mapv(|a| 1.0 - a * a);
        let (g_hidden, dx) = self.hidden.backward(&trace.inputs, &dz);
        let drois = dx.columns().into_iter().map(|c| c.to_owned()).collect();
        (
            DiscriminatorGrad {
                hidden: g_hidden,
                output: g_out,
            },
            drois,
        )
    }

    pub fn apply(&mut self, grad: &DiscriminatorGrad, lr: f64) {
        self.hidden.apply(&grad.hidden, lr);
        self.output.apply(&grad.output, lr);
    }

    pub fn params(&self) -> Vec<f64> {
        self.hidden.params().chain(self.output.params()).copied().collect()
    }
}

impl DiscriminatorGrad {
    pub fn values(&self) -> Vec<f64> {
        self.hidden.values().chain(self.output.values()).copied().collect()
    }
}

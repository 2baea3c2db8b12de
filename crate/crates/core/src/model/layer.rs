use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// Fully connected layer `y = W x + b` with `W` stored row-major as
/// `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    outputs: usize,
    inputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weight: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init_uniform(outputs: usize, inputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..outputs * inputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            outputs,
            inputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub(crate) fn from_parts(outputs: usize, inputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        debug_assert_eq!(weight.len(), outputs * inputs);
        debug_assert_eq!(bias.len(), outputs);
        Self {
            outputs,
            inputs,
            weight,
            bias,
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weight[r * self.inputs..(r + 1) * self.inputs]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|r| self.bias[r] + dot(self.row(r), x))
            .collect()
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` and returns `Wᵀ dy`.
    pub(crate) fn backward_into(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            let grow = &mut grad.weight[r * self.inputs..(r + 1) * self.inputs];
            for ((gw, &xi), (dxi, &w)) in grow
                .iter_mut()
                .zip(x)
                .zip(dx.iter_mut().zip(self.row(r)))
            {
                *gw += g * xi;
                *dxi += g * w;
            }
        }
        dx
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Affine layer `y = x·W + b` with heavy-ball momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `d_in × d_out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub weight_velocity: Matrix,
    pub bias_velocity: Vec<f64>,
}

/// Gradient of a scalar loss with respect to one [`DenseLayer`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        DenseLayer {
            weights: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
            weight_velocity: Matrix::zeros(d_in, d_out),
            bias_velocity: vec![0.0; d_out],
        }
    }

    /// Weights and biases drawn from `U(-1/√d_in, 1/√d_in)`.
    pub fn uniform<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut layer = DenseLayer::zeros(d_in, d_out);
        for w in layer.weights.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..bound);
        }
        layer
    }

    /// Builds a layer from explicit parameters with zeroed velocities.
    pub fn from_parts(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::dims(
                "DenseLayer::from_parts",
                weights.shape(),
                (1, bias.len()),
            ));
        }
        let (d_in, d_out) = weights.shape();
        Ok(DenseLayer {
            weights,
            bias,
            weight_velocity: Matrix::zeros(d_in, d_out),
            bias_velocity: vec![0.0; d_out],
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.cols()
    }

    /// Multiply-accumulates per input row.
    pub fn mac_cost(&self) -> u64 {
        (self.d_in() * self.d_out()) as u64
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        affine_forward(self, input)
    }

    /// Back-propagates `grad_out` (dL/dy) through the layer, returning the
    /// parameter gradients and dL/dx.
    pub fn backward(&self, input: &Matrix, grad_out: &Matrix) -> Result<(DenseGrads, Matrix)> {
        if grad_out.cols() != self.d_out() || grad_out.rows() != input.rows() {
            return Err(Error::dims(
                "DenseLayer::backward",
                (input.rows(), self.d_out()),
                grad_out.shape(),
            ));
        }
        let weights = input.t_matmul(grad_out)?;
        let mut bias = vec![0.0; self.d_out()];
        for row in grad_out.iter_rows() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let grad_input = grad_out.matmul_t(&self.weights)?;
        Ok((DenseGrads { weights, bias }, grad_input))
    }
}

impl DenseGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        DenseGrads {
            weights: Matrix::zeros(layer.d_in(), layer.d_out()),
            bias: vec![0.0; layer.d_out()],
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &DenseGrads, s: f64) -> Result<()> {
        if self.bias.len() != other.bias.len() {
            return Err(Error::dims(
                "DenseGrads::add_scaled",
                (1, self.bias.len()),
                (1, other.bias.len()),
            ));
        }
        self.weights.add_scaled(&other.weights, s)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.weights.data().iter().chain(&self.bias).all(|&x| x == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .data()
            .iter()
            .chain(&self.bias)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// `input · W + b`, bias broadcast over rows.
pub fn affine_forward(layer: &DenseLayer, input: &Matrix) -> Result<Matrix> {
    if input.cols() != layer.d_in() {
        return Err(Error::dims("affine_forward", input.shape(), layer.weights.shape()));
    }
    let mut out = input.matmul(&layer.weights)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Classical momentum: `v ← momentum·v + g`, `θ ← θ − lr·v`.
pub fn sgd_momentum_step(
    layer: &mut DenseLayer,
    grads: &DenseGrads,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.weights.shape() != layer.weights.shape() || grads.bias.len() != layer.bias.len() {
        return Err(Error::dims(
            "sgd_momentum_step",
            layer.weights.shape(),
            grads.weights.shape(),
        ));
    }
    let params = layer.weights.data_mut().iter_mut().chain(layer.bias.iter_mut());
    let velocity = layer
        .weight_velocity
        .data_mut()
        .iter_mut()
        .chain(layer.bias_velocity.iter_mut());
    let grad = grads.weights.data().iter().chain(&grads.bias);
    for ((p, v), g) in params.zip(velocity).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

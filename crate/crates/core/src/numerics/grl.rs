use super::Matrix;

/// Gradient reversal: identity on the forward pass, `-lambda · g` on the
/// backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlGate {
    pub lambda: f64,
}

impl GrlGate {
    pub fn new(lambda: f64) -> Self {
        debug_assert!(lambda >= 0.0);
        GrlGate { lambda }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn backward(&self, upstream: &Matrix) -> Matrix {
        grl_backward(self, upstream)
    }
}

pub fn grl_backward(gate: &GrlGate, upstream: &Matrix) -> Matrix {
    upstream.scale(-gate.lambda)
}

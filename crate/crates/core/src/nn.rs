// SPDX-License-Identifier: Apache-2.0

//! Minimal dense layers used by the head: linear maps, two-layer perceptrons,
//! layer normalization and the scalar activations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Smallest distance kept between a sigmoid output and {0, 1}.
pub const SIGMOID_MARGIN: f64 = 1e-15;

/// Logistic function, kept strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// In-place max-shifted softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::shape("linear bias", weight.nrows(), bias.len()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Fetches `{prefix}.weight` (`out × in`) and `{prefix}.bias` (`out`).
    pub fn from_store(store: &mut ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        let init = Init::Uniform { fan_in: input };
        let w = store.fetch(&format!("{prefix}.weight"), &[output, input], init)?;
        let b = store.fetch(&format!("{prefix}.bias"), &[output], init)?;
        Ok(Linear {
            weight: Array2::from_shape_vec((output, input), w).expect("shape checked by store"),
            bias: Array1::from(b),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-wise application to an `N × in` matrix.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("linear input", self.input_dim(), x.ncols()));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("linear input", self.input_dim(), x.len()));
        }
        Ok(self.weight.dot(&x) + &self.bias)
    }
}

/// `fc2(relu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(fc1: Linear, fc2: Linear) -> Result<Self> {
        if fc1.output_dim() != fc2.input_dim() {
            return Err(Error::shape("mlp hidden width", fc1.output_dim(), fc2.input_dim()));
        }
        Ok(Mlp { fc1, fc2 })
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, output),
        }
    }

    pub fn from_store(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::from_store(store, &format!("{prefix}.fc1"), input, hidden)?,
            fc2: Linear::from_store(store, &format!("{prefix}.fc2"), hidden, output)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let hidden = self.fc1.forward(x)?.mapv_into(relu);
        self.fc2.forward(hidden.view())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn from_store(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Array1::from(store.fetch(&format!("{prefix}.gamma"), &[dim], Init::Ones)?),
            beta: Array1::from(store.fetch(&format!("{prefix}.beta"), &[dim], Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let dim = self.gamma.len();
        if x.ncols() != dim {
            return Err(Error::shape("layer norm input", dim, x.ncols()));
        }
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[k] + self.beta[k];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_is_open_interval() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1e4) < 1.0);
        assert!(sigmoid(-1e4) > 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut a = [0.3, -1.2, 2.0, 0.0];
        let mut b = a.map(|v| v + 17.5);
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_shapes() {
        let lin = Linear::new(array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]], array![0.5, 0.0, -1.0]).unwrap();
        let y = lin.forward(array![[1.0, 1.0]].view()).unwrap();
        assert_eq!(y, array![[3.5, -1.0, 2.5]]);
        assert!(lin.forward(array![[1.0, 1.0, 1.0]].view()).is_err());
        assert!(Linear::new(Array2::zeros((2, 2)), Array1::zeros(3)).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_finite() {
        let ln = LayerNorm::identity(4);
        let y = ln.forward(array![[2.0, 2.0, 2.0, 2.0], [1.0, 2.0, 3.0, 4.0]].view()).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(y.row(0).to_vec(), vec![0.0; 4]);
        assert!(y.row(1).sum().abs() < 1e-12);
    }
}

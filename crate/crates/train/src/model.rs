//! Scorer networks `g: x → ℝ^{K+J}` with hand-written backpropagation.
//!
//! Parameters live in one flat vector so the optimizer can treat them
//! uniformly. Each dense layer stores its `out × in` weight matrix row-major
//! followed by its `out` biases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    /// One rectified hidden layer of the given width.
    OneHiddenLayer { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Dense {
    fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }

    fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &params[self.offset..self.offset + self.inputs * self.outputs];
        let b = &params[self.offset + self.inputs * self.outputs..self.offset + self.len()];
        for (o, row) in out.iter_mut().zip(w.chunks_exact(self.inputs)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        for (o, bias) in out.iter_mut().zip(b) {
            *o += bias;
        }
    }

    /// Accumulates parameter gradients into `grad` and, if asked, writes the
    /// gradient with respect to the input into `dx`.
    fn backward(&self, params: &[f64], x: &[f64], dout: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let n_w = self.inputs * self.outputs;
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(n_w);
        for ((row, &d), bias) in gw.chunks_exact_mut(self.inputs).zip(dout).zip(gb.iter_mut()) {
            *bias += d;
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            let w = &params[self.offset..self.offset + n_w];
            for (row, &d) in w.chunks_exact(self.inputs).zip(dout) {
                for (g, &wi) in dx.iter_mut().zip(row) {
                    *g += d * wi;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerModel {
    architecture: Architecture,
    layers: Vec<Dense>,
    params: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ScorerModel {
    /// He-normal weights, zero biases.
    pub fn new(architecture: Architecture, input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(TrainError::Config("model dimensions must be positive".into()));
        }
        let shape: Vec<(usize, usize)> = match architecture {
            Architecture::Linear => vec![(input_dim, output_dim)],
            Architecture::OneHiddenLayer { width } if width > 0 => vec![(input_dim, width), (width, output_dim)],
            Architecture::OneHiddenLayer { .. } => {
                return Err(TrainError::Config("hidden width must be positive".into()))
            }
        };
        let mut layers = Vec::with_capacity(shape.len());
        let mut offset = 0;
        for (inputs, outputs) in shape {
            let layer = Dense { inputs, outputs, offset };
            offset += layer.len();
            layers.push(layer);
        }
        let mut params = vec![0.0; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let normal = Normal::new(0.0, (2.0 / layer.inputs as f64).sqrt()).expect("positive std");
            for w in &mut params[layer.offset..layer.offset + layer.inputs * layer.outputs] {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(Self { architecture, layers, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn forward_into(&self, x: &[f64], act: &mut Activations) {
        act.scores.resize(self.output_dim(), 0.0);
        match self.layers.as_slice() {
            [out] => out.forward(&self.params, x, &mut act.scores),
            [hidden, out] => {
                act.hidden_pre.resize(hidden.outputs, 0.0);
                act.hidden.resize(hidden.outputs, 0.0);
                hidden.forward(&self.params, x, &mut act.hidden_pre);
                for (h, &z) in act.hidden.iter_mut().zip(&act.hidden_pre) {
                    *h = z.max(0.0);
                }
                out.forward(&self.params, &act.hidden, &mut act.scores);
            }
            _ => unreachable!("one or two layers"),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut act = Activations::default();
        self.forward_into(x, &mut act);
        act.scores
    }

    /// Adds `∂(dscoresᵀ g(x)) / ∂params` to `grad`, given the activations
    /// from [`Self::forward_into`] at the same `x`.
    pub fn backward(&self, x: &[f64], act: &Activations, dscores: &[f64], grad: &mut [f64], scratch: &mut Vec<f64>) {
        match self.layers.as_slice() {
            [out] => out.backward(&self.params, x, dscores, grad, None),
            [hidden, out] => {
                scratch.resize(hidden.outputs, 0.0);
                out.backward(&self.params, &act.hidden, dscores, grad, Some(scratch));
                for (d, &z) in scratch.iter_mut().zip(&act.hidden_pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                hidden.backward(&self.params, x, scratch, grad, None);
            }
            _ => unreachable!("one or two layers"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_init() {
        let m = ScorerModel::new(Architecture::OneHiddenLayer { width: 8 }, 3, 5, 1).unwrap();
        assert_eq!(m.num_params(), 8 * 4 + 5 * 9);
        assert_eq!((m.input_dim(), m.output_dim()), (3, 5));
        assert_eq!(m.forward(&[0.1, 0.2, 0.3]).len(), 5);
        assert_eq!(m, ScorerModel::new(Architecture::OneHiddenLayer { width: 8 }, 3, 5, 1).unwrap());
        let lin = ScorerModel::new(Architecture::Linear, 2, 4, 0).unwrap();
        assert_eq!(lin.num_params(), 12);
        assert!(ScorerModel::new(Architecture::OneHiddenLayer { width: 0 }, 2, 4, 0).is_err());
    }

    #[test]
    fn linear_forward_by_hand() {
        let mut m = ScorerModel::new(Architecture::Linear, 2, 2, 0).unwrap();
        m.params_mut().copy_from_slice(&[1.0, 2.0, -1.0, 0.5, 0.25, -0.75]);
        assert_eq!(m.forward(&[3.0, 4.0]), vec![11.25, -1.75]);
    }
}

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SqnError};

/// Fully connected layer, weights stored `outputs × inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }
}

/// Multilayer perceptron with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer inputs recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Activations {
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Parameter-shaped gradient (or moment) storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradBundle {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradBundle {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| w.iter().chain(b.iter())).copied()
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub(crate) fn shape_matches(&self, mlp: &Mlp) -> bool {
        self.weights.len() == mlp.layers.len()
            && mlp
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| l.weights.len() == w.len() && l.bias.len() == b.len())
    }
}

/// Random matrix with orthonormal rows or columns, scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // Sign correction so the distribution is uniform over orthogonal matrices.
    let diag = qr.r().diagonal();
    for j in 0..c {
        if diag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if tall { q } else { q.transpose() };
    (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| gain * q[(i, j)]).collect()
}

impl Mlp {
    /// Orthogonal weights (gain √2 on hidden layers, `output_gain` on the
    /// last), zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 1 == n { output_gain } else { std::f64::consts::SQRT_2 };
                Dense { inputs: w[0], outputs: w[1], weights: orthogonal(w[1], w[0], gain, rng), bias: vec![0.0; w[1]] }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        assert!(layers.windows(2).all(|w| w[0].outputs == w[1].inputs), "layer widths do not chain");
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| (l.inputs + 1) * l.outputs).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied().collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<Activations> {
        if input.len() != self.input_dim() {
            return Err(SqnError::Dimension { expected: self.input_dim(), got: input.len() });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&x);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        Ok(Activations { inputs, output: x })
    }

    /// Reverse-mode gradients of `output · output_grad` with respect to the
    /// parameters and the input.
    pub fn backward(&self, acts: &Activations, output_grad: &[f64]) -> Result<(GradBundle, Vec<f64>)> {
        let mut grads = GradBundle::zeros_like(self);
        let input_grad = self.backward_into(acts, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// As [`Mlp::backward`], accumulating into `grads`.
    pub fn backward_into(&self, acts: &Activations, output_grad: &[f64], grads: &mut GradBundle) -> Result<Vec<f64>> {
        if output_grad.len() != self.output_dim() {
            return Err(SqnError::Dimension { expected: self.output_dim(), got: output_grad.len() });
        }
        if acts.inputs.len() != self.layers.len() {
            return Err(SqnError::Dimension { expected: self.layers.len(), got: acts.inputs.len() });
        }
        let mut delta = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let a = &acts.inputs[i];
            let gw = &mut grads.weights[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(a).for_each(|(g, ai)| *g += d * ai);
            }
            grads.biases[i].iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            let mut back = vec![0.0; layer.inputs];
            for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                back.iter_mut().zip(row).for_each(|(b, w)| *b += w * d);
            }
            if i > 0 {
                // inputs of layer i are tanh outputs of layer i - 1
                back.iter_mut().zip(a).for_each(|(b, ai)| *b *= 1.0 - ai * ai);
            }
            delta = back;
        }
        Ok(delta)
    }
}

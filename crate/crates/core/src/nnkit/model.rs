use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Matrix, NnError, Result};
use crate::exec::Exec;

/// Feed-forward classifier parameters.
///
/// `weights[l]` is row-major with shape `(layer_dims[l+1], layer_dims[l])` and
/// `biases[l]` has length `layer_dims[l+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(NnError::InvalidArgument(
            "a model needs at least an input and an output dimension".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(NnError::InvalidArgument(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl Model {
    /// Glorot-uniform weights from a seeded generator, zero biases.
    pub fn new_random(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| NnError::InvalidArgument(e.to_string()))?;
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| dist.sample(&mut rng))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| vec![0.0; p[0] * p[1]])
            .collect();
        let biases = layer_dims.windows(2).map(|p| vec![0.0; p[1]]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(NnError::Shape(format!(
                "{layers} layers need {layers} weight and bias arrays, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(NnError::Shape(format!(
                    "layer {l} expects {}x{} weights and {} biases",
                    pair[1], pair[0], pair[1]
                )));
            }
        }
        let model = Self {
            layer_dims,
            weights,
            biases,
        };
        if !model.is_finite() {
            return Err(NnError::Numeric("model parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .all(|v| v.is_finite())
    }

    /// Flattens as `w0, b0, w1, b1, ...`.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn from_flat(layer_dims: &[usize], flat: &[f64]) -> Result<Self> {
        let (weights, biases) = unflatten(layer_dims, flat)?;
        Self::from_parts(layer_dims.to_vec(), weights, biases)
    }

    /// Mutable view over every parameter in flat order, for finite-difference probes.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                return &mut w[i];
            }
            i -= w.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Batch forward pass producing `B x K` logits.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward_with(Exec::default(), inputs)
    }

    pub fn forward_with(&self, exec: Exec, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let rows = exec.map_indexed(inputs.rows(), |i| self.logits(inputs.row(i)));
        let k = self.classes();
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            data.extend(r);
        }
        Matrix::from_vec(inputs.rows(), k, data)
    }

    pub(crate) fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input width {} does not match model input dimension {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits for one sample.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let mut out = self.affine(l, &act);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            act = out;
        }
        act
    }

    /// Forward pass keeping every layer's activation: `acts[0]` is the input,
    /// `acts[l]` the output of layer `l - 1`, and the last entry the logits.
    pub(crate) fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(x.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let mut out = self.affine(l, &acts[l]);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    fn affine(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        (0..n_out)
            .map(|i| {
                let row = &w[i * n_in..(i + 1) * n_in];
                let mut acc = b[i];
                for (wij, xj) in row.iter().zip(x) {
                    acc += wij * xj;
                }
                acc
            })
            .collect()
    }

    /// Accumulates `d loss / d params` for one sample into `grads`, given the
    /// sample's activation trace and the loss gradient with respect to its logits.
    pub(crate) fn backward(&self, acts: &[Vec<f64>], dlogits: Vec<f64>, grads: &mut Gradients) {
        let mut delta = dlogits;
        for l in (0..self.num_layers()).rev() {
            let n_in = self.layer_dims[l];
            let input = &acts[l];
            let gw = &mut grads.weights[l];
            for (i, &d) in delta.iter().enumerate() {
                let row = &mut gw[i * n_in..(i + 1) * n_in];
                for (g, xj) in row.iter_mut().zip(input) {
                    *g += d * xj;
                }
                grads.biases[l][i] += d;
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut prev = vec![0.0; n_in];
                for (i, &d) in delta.iter().enumerate() {
                    for (p, wij) in prev.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                        *p += wij * d;
                    }
                }
                // tanh'(u) = 1 - tanh(u)^2, and acts[l] holds tanh(u)
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    pub(crate) fn apply_update(&mut self, grads: &Gradients, eta: f64) {
        for (p, g) in self.weights.iter_mut().zip(&grads.weights) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= eta * g);
        }
        for (p, g) in self.biases.iter_mut().zip(&grads.biases) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= eta * g);
        }
    }
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn from_flat(model: &Model, flat: &[f64]) -> Result<Self> {
        let (weights, biases) = unflatten(model.layer_dims(), flat)?;
        Ok(Self { weights, biases })
    }

    pub fn matches(&self, model: &Model) -> bool {
        self.weights.len() == model.weights.len()
            && self.biases.len() == model.biases.len()
            && self
                .weights
                .iter()
                .zip(&model.weights)
                .all(|(g, w)| g.len() == w.len())
            && self
                .biases
                .iter()
                .zip(&model.biases)
                .all(|(g, b)| g.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flatten()
            .for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .all(|v| v.is_finite())
    }
}

fn flatten(weights: &[Vec<f64>], biases: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(weights.iter().chain(biases).map(Vec::len).sum());
    for (w, b) in weights.iter().zip(biases) {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    out
}

#[allow(clippy::type_complexity)]
fn unflatten(layer_dims: &[usize], flat: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_dims(layer_dims)?;
    let expected: usize = layer_dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    if flat.len() != expected {
        return Err(NnError::Shape(format!(
            "flat parameter vector has {} values, layout {layer_dims:?} needs {expected}",
            flat.len()
        )));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut at = 0;
    for p in layer_dims.windows(2) {
        weights.push(flat[at..at + p[0] * p[1]].to_vec());
        at += p[0] * p[1];
        biases.push(flat[at..at + p[1]].to_vec());
        at += p[1];
    }
    Ok((weights, biases))
}

//! Fully convolutional micro segmentation network.
//!
//! `hidden_layers` same-padded 3x3 convolutions with ReLU followed by a 1x1
//! convolution to `classes` logit channels. Spatial size is preserved.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub hidden_layers: usize,
    pub classes: usize,
}

impl LayerSpec {
    /// Four 3x3 layers of 16 channels.
    pub fn micro(in_channels: usize, classes: usize) -> Self {
        Self {
            in_channels,
            hidden_channels: 16,
            hidden_layers: 4,
            classes,
        }
    }

    /// `(name, shape)` of every parameter tensor in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for l in 0..self.hidden_layers {
            out.push((format!("conv{l}.weight"), vec![3, 3, c, self.hidden_channels]));
            out.push((format!("conv{l}.bias"), vec![self.hidden_channels]));
            c = self.hidden_channels;
        }
        out.push(("head.weight".into(), vec![1, 1, c, self.classes]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named parameter tensors of the micro-net.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: LayerSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// He-normal weights, zero biases.
    pub fn init(spec: LayerSpec, seed: u64) -> Result<Self> {
        if spec.in_channels == 0 || spec.classes == 0 || (spec.hidden_layers > 0 && spec.hidden_channels == 0) {
            return Err(Error::Config(format!("degenerate layer spec {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in spec.param_shapes() {
            let t = if name.ends_with("weight") {
                let fan_in = shape[0] * shape[1] * shape[2];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))?
            } else {
                Tensor::zeros(shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { spec, names, tensors })
    }

    pub fn zeros(spec: LayerSpec) -> Self {
        let (names, tensors) = spec
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .unzip();
        Self { spec, names, tensors }
    }

    /// Builds parameters from explicit tensors, checking them against `spec`.
    pub fn from_tensors(spec: LayerSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self {
            spec,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in forward order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Records every parameter as a gradient-carrying leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Adds `scale * grad` of each registered parameter into its buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var], scale: f64) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g, scale)?;
            } else {
                t.accumulate_grad(&vec![0.0; t.len()], 0.0)?;
            }
        }
        Ok(())
    }

    /// Gradient buffers concatenated in forward order (zero when absent).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    /// Replaces the gradient buffers with `scale * flat`.
    pub fn set_flat_grads(&mut self, flat: &[f64], scale: f64) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} gradient values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.set_grad(flat[at..at + n].iter().map(|g| g * scale).collect())?;
            at += n;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }
}

/// Logits `[H, W, K]` for an `[H, W, C]` image using already-registered
/// parameter variables.
pub fn forward_vars(tape: &mut Tape, spec: LayerSpec, vars: &[Var], image: Var) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[2] != spec.in_channels {
        return Err(Error::Config(format!(
            "image shape {shape:?} does not match {} input channels",
            spec.in_channels
        )));
    }
    if vars.len() != 2 * (spec.hidden_layers + 1) {
        return Err(Error::Config("parameter variable count does not match layer spec".into()));
    }
    let mut h = image;
    for l in 0..spec.hidden_layers {
        h = tape.conv2d(h, vars[2 * l], vars[2 * l + 1])?;
        h = tape.relu(h)?;
    }
    let l = spec.hidden_layers;
    tape.conv2d(h, vars[2 * l], vars[2 * l + 1])
}

/// Registers `params` on `tape` and runs the forward pass.
pub fn forward(tape: &mut Tape, params: &ModelParams, image: &Tensor) -> Result<(Var, Vec<Var>)> {
    let vars = params.register(tape)?;
    let x = tape.constant(image.clone())?;
    let logits = forward_vars(tape, params.spec(), &vars, x)?;
    Ok((logits, vars))
}

/// Inference-only logits.
pub fn predict_logits(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape)?;
    let x = tape.constant(image.clone())?;
    let logits = forward_vars(&mut tape, params.spec(), &vars, x)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = LayerSpec::micro(3, 4);
        let params = ModelParams::zeros(spec);
        let img = Tensor::from_fn(vec![5, 6, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let logits = predict_logits(&params, &img).unwrap();
        assert_eq!(logits.shape(), &[5, 6, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head() {
        let spec = LayerSpec {
            in_channels: 3,
            hidden_channels: 0,
            hidden_layers: 0,
            classes: 3,
        };
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let params = ModelParams::from_tensors(
            spec,
            vec![Tensor::new(vec![1, 1, 3, 3], w).unwrap(), Tensor::zeros(vec![3])],
        )
        .unwrap();
        let img = Tensor::from_fn(vec![4, 4, 3], |i| i as f64 / 7.0).unwrap();
        let logits = predict_logits(&params, &img).unwrap();
        assert_eq!(logits.data(), img.data());
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let params = ModelParams::init(LayerSpec::micro(3, 2), 1).unwrap();
        let img = Tensor::zeros(vec![4, 4, 2]);
        assert!(matches!(predict_logits(&params, &img), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(LayerSpec::micro(3, 4), 9).unwrap();
        let b = ModelParams::init(LayerSpec::micro(3, 4), 9).unwrap();
        let c = ModelParams::init(LayerSpec::micro(3, 4), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.param_count(), LayerSpec::micro(3, 4).param_count());
        assert_eq!(a.param_count(), 27 * 16 + 16 + 3 * (144 * 16 + 16) + 16 * 4 + 4);
    }
}

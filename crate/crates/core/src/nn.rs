//! Dense feed-forward networks with hand-written reverse-mode gradients and
//! an Adam optimizer.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-limit..limit));
        layer
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim))
            .zip(&self.bias)
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations cached by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// `inputs[i]` is the input of layer `i`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Parameter gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim, l.activation))
                .collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::ShapeMismatch {
                    expected: l.in_dim * l.out_dim + l.out_dim,
                    got: l.weights.len() + l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].out_dim,
                    got: l.in_dim,
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialized network with layer widths `dims` (input first)
    /// and one activation per layer.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::ShapeMismatch {
                expected: dims.len().saturating_sub(1),
                got: activations.len(),
            });
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, a)| Dense::glorot(w[0], w[1], *a, rng))
            .collect();
        Self::from_layers(layers)
    }

    /// All-zero network with the given shape.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::ShapeMismatch {
                expected: dims.len().saturating_sub(1),
                got: activations.len(),
            });
        }
        Self::from_layers(
            dims.windows(2)
                .zip(activations)
                .map(|(w, a)| Dense::zeros(w[0], w[1], *a))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Zeroes the final layer so the network outputs exactly zero.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn flatten_params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_params_into(&mut out);
        out
    }

    /// Loads parameters from the front of `flat`; returns how many were used.
    pub fn load_params(&mut self, flat: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if flat.len() < need {
            return Err(Error::ShapeMismatch {
                expected: need,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(need)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass recording the activations needed by [`Mlp::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; l.out_dim];
            l.affine(&inputs[i], &mut z);
            let y: Vec<f64> = z.iter().map(|v| l.activation.apply(*v)).collect();
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: i });
            }
            pre.push(z);
            inputs.push(y);
        }
        let out = inputs.last().expect("non-empty").clone();
        Ok((out, Tape { inputs, pre }))
    }

    /// Forward pass without a tape.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            next.clear();
            next.resize(l.out_dim, 0.0);
            l.affine(&cur, &mut next);
            for v in next.iter_mut() {
                *v = l.activation.apply(*v);
                if !v.is_finite() {
                    return Err(Error::NonFiniteActivation { layer: i });
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Gradients of `⟨upstream, y⟩` with respect to every parameter and to
    /// the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backward_accumulate(tape, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`Mlp::backward`] but adds the parameter gradients into `grads`.
    pub fn backward_accumulate(&self, tape: &Tape, upstream: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        if tape.pre.len() != self.layers.len()
            || tape.inputs.len() != self.layers.len() + 1
            || grads.layers.len() != self.layers.len()
        {
            return Err(Error::TapeMismatch);
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let (x, z, y) = (&tape.inputs[i], &tape.pre[i], &tape.inputs[i + 1]);
            if x.len() != l.in_dim || z.len() != l.out_dim {
                return Err(Error::TapeMismatch);
            }
            for (d, (zv, yv)) in delta.iter_mut().zip(z.iter().zip(y)) {
                *d *= l.activation.derivative(*zv, *yv);
            }
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * l.in_dim..(o + 1) * l.in_dim];
                for (gw, xv) in row.iter_mut().zip(x) {
                    *gw += d * xv;
                }
            }
            let mut prev = vec![0.0; l.in_dim];
            for (row, d) in l.weights.chunks_exact(l.in_dim).zip(&delta) {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            format_version: FORMAT_VERSION,
            layers: self.layers.clone(),
        }
    }

    pub fn from_file(file: MlpFile) -> Result<Self> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(file.format_version));
        }
        Self::from_layers(file.layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

/// On-disk network representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub format_version: u32,
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - state.beta1.powf(t);
    let c2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Largest relative error between analytic and central-difference gradients
/// of `Σ y` with respect to every parameter and input coordinate.
pub fn grad_check(net: &Mlp, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step {h}")));
    }
    let (y, tape) = net.forward(x)?;
    let upstream = vec![1.0; y.len()];
    let (grads, dx) = net.backward(&tape, &upstream)?;
    let analytic = grads.flatten();
    let total = |n: &Mlp, input: &[f64]| -> Result<f64> { Ok(n.eval(input)?.iter().sum()) };
    let mut worst: f64 = 0.0;
    let base = net.flatten_params();
    let mut probe = net.clone();
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + h;
        probe.load_params(&params)?;
        let plus = total(&probe, x)?;
        params[i] = base[i] - h;
        probe.load_params(&params)?;
        let minus = total(&probe, x)?;
        params[i] = base[i];
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (analytic[i].abs() + 1e-12));
    }
    probe.load_params(&base)?;
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        xs[i] = x[i] + h;
        let plus = total(net, &xs)?;
        xs[i] = x[i] - h;
        let minus = total(net, &xs)?;
        xs[i] = x[i];
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((dx[i] - fd).abs() / (dx[i].abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], &[Activation::LeakyRelu, Activation::Tanh]).unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut l = Dense::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_layers(vec![l]).unwrap();
        assert_eq!(net.eval(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_matrix_oracle() {
        let net = Mlp::new(&[2, 3, 1], &[Activation::LeakyRelu, Activation::Tanh], &mut rng(1)).unwrap();
        let x = [0.7, -1.3];
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let z = l0.weights[j * 2] * x[0] + l0.weights[j * 2 + 1] * x[1] + l0.bias[j];
            h[j] = if z > 0.0 { z } else { 0.01 * z };
        }
        let z = (0..3).map(|j| l1.weights[j] * h[j]).sum::<f64>() + l1.bias[0];
        let y = net.eval(&x).unwrap();
        assert!((y[0] - z.tanh()).abs() < 1e-12);
        assert_eq!(net.forward(&x).unwrap().0, y);
        assert!(matches!(net.eval(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn linear_hand_derivative() {
        let mut l = Dense::zeros(1, 1, Activation::Identity);
        l.weights[0] = 2.5;
        l.bias[0] = -1.0;
        let net = Mlp::from_layers(vec![l]).unwrap();
        let (_, tape) = net.forward(&[3.0]).unwrap();
        let (g, dx) = net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, vec![3.0]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
        assert_eq!(dx, vec![2.5]);
        assert!(grad_check(&net, &[3.0], 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let net = Mlp::new(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &mut rng(2)).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, dx) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tape_mismatch_detected() {
        let a = Mlp::new(&[2, 3, 1], &[Activation::Tanh, Activation::Identity], &mut rng(3)).unwrap();
        let b = Mlp::new(&[2, 3, 3, 1], &[Activation::Tanh, Activation::Tanh, Activation::Identity], &mut rng(3)).unwrap();
        let (_, tape) = a.forward(&[1.0, 2.0]).unwrap();
        assert!(matches!(b.backward(&tape, &[1.0]), Err(Error::TapeMismatch)));
    }

    #[test]
    fn finite_difference_on_random_net() {
        let mut r = rng(4);
        let net = Mlp::new(
            &[5, 16, 16, 1],
            &[Activation::LeakyRelu, Activation::Tanh, Activation::Identity],
            &mut r,
        )
        .unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            assert!(grad_check(&net, &x, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn coarse_step_is_worse() {
        let mut r = rng(5);
        let net = Mlp::new(&[3, 8, 1], &[Activation::Tanh, Activation::Identity], &mut r).unwrap();
        let x = [0.3, -0.8, 0.5];
        let fine = grad_check(&net, &x, 1e-5).unwrap();
        let coarse = grad_check(&net, &x, 1e-1).unwrap();
        assert!(coarse > 10.0 * fine, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn activation_derivatives_match_differences() {
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.2, 1.7] {
            for act in [Activation::LeakyRelu, Activation::Tanh, Activation::Identity] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let an = act.derivative(x, act.apply(x));
                assert!((fd - an).abs() < 1e-6, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, 0.5];
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        // moments decay, parameters move only through the old momentum
        assert_eq!(s.m, vec![0.45, 0.45]);
        let mut q = vec![1.0, -2.0];
        let mut fresh = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, 1e-3).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.02, 1e3], &mut s, 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        assert!((p[1] - 1e-3).abs() < 1e-9);
        assert!((p[2] + 1e-3).abs() < 1e-10);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut s, 1e-3),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![5.0];
        let mut s = AdamState::new(1);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = 0.5 * p[0] * p[0];
            assert!(loss < last);
            last = loss;
            let g = vec![p[0]];
            adam_step(&mut p, &g, &mut s, 1e-2).unwrap();
        }
    }

    #[test]
    fn file_round_trip() {
        let net = Mlp::new(&[2, 4, 1], &[Activation::LeakyRelu, Activation::Identity], &mut rng(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
    }
}

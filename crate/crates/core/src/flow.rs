//! Real NVP normalizing flow built from affine coupling layers.
//!
//! A coupling layer copies the pass-through coordinates selected by its
//! mask and maps each remaining coordinate `x_u` to
//! `x_u · exp(α(x_pass)) + μ(x_pass)`, where `α` (scale) and `μ`
//! (translation) are small dense networks. The flow maps data to a
//! standard-normal latent; densities come from the change of variables and
//! samples from the exact algebraic inverse.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, Gradients, Mlp, Tape};
use crate::stats::LN_2PI;

pub const FORMAT_VERSION: u32 = 1;

/// Default bound on `|α|` before exponentiation.
pub const DEFAULT_SCALE_CLAMP: f64 = 5.0;

/// How coupling masks are laid out across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLayout {
    /// Layer `k` transforms coordinate `k mod D` and conditions on the rest.
    SingleCoordinate,
    /// Layers alternate between transforming the second and first half.
    Alternating,
}

/// Architecture of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowArch {
    pub n_layers: usize,
    /// Widths of the two hidden layers of every scale/translation network
    /// (LeakyReLU then Tanh).
    pub hidden: [usize; 2],
    pub layout: MaskLayout,
    /// Zero the output layer of every network so the flow starts as the
    /// identity.
    pub zero_init_last: bool,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            n_layers: 8,
            hidden: [512, 512],
            layout: MaskLayout::SingleCoordinate,
            zero_init_last: true,
        }
    }
}

/// Masks for `n_layers` layers over `dim` coordinates; `true` marks a
/// pass-through coordinate.
pub fn build_masks(dim: usize, n_layers: usize, layout: MaskLayout) -> Result<Vec<Vec<bool>>> {
    if dim < 2 {
        return Err(Error::InvalidMask(format!(
            "coupling layers need at least 2 dimensions, got {dim}"
        )));
    }
    Ok((0..n_layers)
        .map(|k| match layout {
            MaskLayout::SingleCoordinate => (0..dim).map(|i| i != k % dim).collect(),
            MaskLayout::Alternating => {
                let half = dim / 2;
                (0..dim)
                    .map(|i| if k % 2 == 0 { i < half } else { i >= half })
                    .collect()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    pass: Vec<usize>,
    transformed: Vec<usize>,
    scale_net: Mlp,
    translation_net: Mlp,
    scale_clamp: f64,
}

/// Cached intermediate values of one coupling layer for backpropagation.
struct LayerTape {
    input: Vec<f64>,
    scale_tape: Tape,
    translation_tape: Tape,
    raw: Vec<f64>,
    exp_alpha: Vec<f64>,
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, scale_net: Mlp, translation_net: Mlp, scale_clamp: f64) -> Result<Self> {
        let pass: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let transformed: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if pass.is_empty() || transformed.is_empty() {
            return Err(Error::InvalidMask(
                "mask needs at least one pass-through and one transformed coordinate".into(),
            ));
        }
        for net in [&scale_net, &translation_net] {
            if net.input_dim() != pass.len() || net.output_dim() != transformed.len() {
                return Err(Error::DimensionMismatch {
                    expected: pass.len(),
                    got: net.input_dim(),
                });
            }
        }
        if !(scale_clamp > 0.0) {
            return Err(Error::InvalidInput("scale clamp must be positive".into()));
        }
        Ok(Self {
            mask,
            pass,
            transformed,
            scale_net,
            translation_net,
            scale_clamp,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn translation_net(&self) -> &Mlp {
        &self.translation_net
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp {
        &mut self.scale_net
    }

    pub fn translation_net_mut(&mut self) -> &mut Mlp {
        &mut self.translation_net
    }

    fn dim(&self) -> usize {
        self.mask.len()
    }

    #[inline]
    fn clamp(&self, raw: f64) -> f64 {
        if self.scale_clamp.is_finite() {
            self.scale_clamp * (raw / self.scale_clamp).tanh()
        } else {
            raw
        }
    }

    #[inline]
    fn clamp_derivative(&self, raw: f64) -> f64 {
        if self.scale_clamp.is_finite() {
            let t = (raw / self.scale_clamp).tanh();
            1.0 - t * t
        } else {
            1.0
        }
    }

    fn gather(&self, x: &[f64]) -> Vec<f64> {
        self.pass.iter().map(|&i| x[i]).collect()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `(y, ln |det J|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let cond = self.gather(x);
        let raw = self.scale_net.eval(&cond)?;
        let shift = self.translation_net.eval(&cond)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (j, &i) in self.transformed.iter().enumerate() {
            let alpha = self.clamp(raw[j]);
            y[i] = x[i] * alpha.exp() + shift[j];
            logdet += alpha;
        }
        if !logdet.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling forward"));
        }
        Ok((y, logdet))
    }

    /// Exact inverse of [`CouplingLayer::forward`].
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let cond = self.gather(y);
        let raw = self.scale_net.eval(&cond)?;
        let shift = self.translation_net.eval(&cond)?;
        let mut x = y.to_vec();
        for (j, &i) in self.transformed.iter().enumerate() {
            x[i] = (y[i] - shift[j]) * (-self.clamp(raw[j])).exp();
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling inverse"));
        }
        Ok(x)
    }

    fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, f64, LayerTape)> {
        let cond = self.gather(x);
        let (raw, scale_tape) = self.scale_net.forward(&cond)?;
        let (shift, translation_tape) = self.translation_net.forward(&cond)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        let mut exp_alpha = Vec::with_capacity(raw.len());
        for (j, &i) in self.transformed.iter().enumerate() {
            let alpha = self.clamp(raw[j]);
            let e = alpha.exp();
            y[i] = x[i] * e + shift[j];
            logdet += alpha;
            exp_alpha.push(e);
        }
        Ok((
            y,
            logdet,
            LayerTape {
                input: x.to_vec(),
                scale_tape,
                translation_tape,
                raw,
                exp_alpha,
            },
        ))
    }

    /// Backpropagates `grad_y` and the log-det cotangent `grad_logdet`,
    /// accumulating parameter gradients; returns the input gradient.
    fn backward(
        &self,
        tape: &LayerTape,
        grad_y: &[f64],
        grad_logdet: f64,
        grads: &mut LayerGrads,
    ) -> Result<Vec<f64>> {
        let mut grad_x = grad_y.to_vec();
        let mut d_raw = Vec::with_capacity(self.transformed.len());
        let mut d_shift = Vec::with_capacity(self.transformed.len());
        for (j, &i) in self.transformed.iter().enumerate() {
            let e = tape.exp_alpha[j];
            grad_x[i] = grad_y[i] * e;
            let d_alpha = grad_y[i] * tape.input[i] * e + grad_logdet;
            d_raw.push(d_alpha * self.clamp_derivative(tape.raw[j]));
            d_shift.push(grad_y[i]);
        }
        let from_scale = self
            .scale_net
            .backward_accumulate(&tape.scale_tape, &d_raw, &mut grads.scale)?;
        let from_shift =
            self.translation_net
                .backward_accumulate(&tape.translation_tape, &d_shift, &mut grads.translation)?;
        for (k, &i) in self.pass.iter().enumerate() {
            grad_x[i] += from_scale[k] + from_shift[k];
        }
        Ok(grad_x)
    }
}

struct LayerGrads {
    scale: Gradients,
    translation: Gradients,
}

/// Accumulated gradients for every network of a flow.
pub struct FlowGrads {
    layers: Vec<LayerGrads>,
}

impl FlowGrads {
    pub fn zeros_like(flow: &Flow) -> Self {
        Self {
            layers: flow
                .layers
                .iter()
                .map(|l| LayerGrads {
                    scale: Gradients::zeros_like(&l.scale_net),
                    translation: Gradients::zeros_like(&l.translation_net),
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.scale.fill_zero();
            l.translation.fill_zero();
        }
    }

    /// Flattened in the same order as [`Flow::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.scale.flatten_into(&mut out);
            l.translation.flatten_into(&mut out);
        }
        out
    }
}

/// Composition `F = f_K ∘ … ∘ f_1` of coupling layers mapping data to a
/// standard-normal latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

impl Flow {
    pub fn new<R: Rng + ?Sized>(dim: usize, arch: &FlowArch, rng: &mut R) -> Result<Self> {
        if arch.n_layers == 0 {
            return Err(Error::InvalidInput("flow needs at least one coupling layer".into()));
        }
        let masks = build_masks(dim, arch.n_layers, arch.layout)?;
        let acts = [Activation::LeakyRelu, Activation::Tanh, Activation::Identity];
        let layers = masks
            .into_iter()
            .map(|mask| {
                let n_pass = mask.iter().filter(|m| **m).count();
                let n_out = dim - n_pass;
                let dims = [n_pass, arch.hidden[0], arch.hidden[1], n_out];
                let mut scale = Mlp::new(&dims, &acts, rng)?;
                let mut translation = Mlp::new(&dims, &acts, rng)?;
                if arch.zero_init_last {
                    scale.zero_last_layer();
                    translation.zero_last_layer();
                }
                CouplingLayer::new(mask, scale, translation, DEFAULT_SCALE_CLAMP)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, layers })
    }

    pub fn from_layers(layers: Vec<CouplingLayer>) -> Result<Self> {
        let dim = layers
            .first()
            .map(CouplingLayer::dim)
            .ok_or_else(|| Error::InvalidInput("flow needs at least one coupling layer".into()))?;
        if let Some(l) = layers.iter().find(|l| l.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: l.dim(),
            });
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn set_scale_clamp(&mut self, clamp: f64) -> Result<()> {
        if !(clamp > 0.0) {
            return Err(Error::InvalidInput("scale clamp must be positive".into()));
        }
        self.layers.iter_mut().for_each(|l| l.scale_clamp = clamp);
        Ok(())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `(z, Σ ln |det J_k|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let mut cur = x.to_vec();
        let mut total = 0.0;
        for l in &self.layers {
            let (y, ld) = l.forward(&cur)?;
            cur = y;
            total += ld;
        }
        Ok((cur, total))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        let mut cur = z.to_vec();
        for l in self.layers.iter().rev() {
            cur = l.inverse(&cur)?;
        }
        Ok(cur)
    }

    /// `ln q(x) = ln N(F(x); 0, I) + Σ ln |det J_k|`.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        let lp = -0.5 * (self.dim as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>()) + logdet;
        if lp.is_nan() {
            return Err(Error::NonFinite("flow log-density"));
        }
        Ok(lp)
    }

    /// Draws `z ~ N(0, I)` and returns `F⁻¹(z)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.inverse(&z)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.param_count() + l.translation_net.param_count())
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.scale_net.flatten_params_into(&mut out);
            l.translation_net.flatten_params_into(&mut out);
        }
        out
    }

    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            offset += l.scale_net.load_params(&flat[offset..])?;
            offset += l.translation_net.load_params(&flat[offset..])?;
        }
        Ok(())
    }

    /// Adds the gradient of `weight · (−ln q(x))` to `grads` and returns
    /// that loss term.
    pub fn accumulate_weighted_nll(&self, x: &[f64], weight: f64, grads: &mut FlowGrads) -> Result<f64> {
        self.check(x)?;
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let mut logdet = 0.0;
        for l in &self.layers {
            let (y, ld, tape) = l.forward_taped(&cur)?;
            cur = y;
            logdet += ld;
            tapes.push(tape);
        }
        let nll = 0.5 * (self.dim as f64 * LN_2PI + cur.iter().map(|v| v * v).sum::<f64>()) - logdet;
        if !nll.is_finite() {
            return Err(Error::NonFinite("flow negative log-likelihood"));
        }
        let mut grad: Vec<f64> = cur.iter().map(|z| weight * z).collect();
        for ((l, tape), g) in self
            .layers
            .iter()
            .zip(&tapes)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            grad = l.backward(tape, &grad, -weight, g)?;
        }
        Ok(weight * nll)
    }

    /// Mean weighted negative log-likelihood of a batch and its gradient.
    pub fn weighted_loss_and_grad(&self, samples: &[Vec<f64>], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        if samples.is_empty() {
            return Err(Error::EmptyData);
        }
        if samples.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                expected: samples.len(),
                got: weights.len(),
            });
        }
        let mut grads = FlowGrads::zeros_like(self);
        let mut loss = 0.0;
        for (x, w) in samples.iter().zip(weights) {
            loss += self.accumulate_weighted_nll(x, *w, &mut grads)?;
        }
        let n = samples.len() as f64;
        let g = grads.flatten().into_iter().map(|v| v / n).collect();
        Ok((loss / n, g))
    }

    /// Mean weighted negative log-likelihood without gradients.
    pub fn weighted_loss(&self, samples: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut total = 0.0;
        for (x, w) in samples.iter().zip(weights) {
            total -= w * self.log_pdf(x)?;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("flow")
            .to_string();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let scale = format!("{stem}.layer{k}.scale.json");
            let translation = format!("{stem}.layer{k}.translation.json");
            l.scale_net.save(&dir.join(&scale))?;
            l.translation_net.save(&dir.join(&translation))?;
            layers.push(LayerFile {
                mask: l.mask.iter().map(|&m| u8::from(m)).collect(),
                scale_clamp: l.scale_clamp,
                scale_net: PathBuf::from(scale),
                translation_net: PathBuf::from(translation),
            });
        }
        let file = FlowFile {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            layers,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let file: FlowFile = serde_json::from_str(&text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(file.format_version));
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let scale = Mlp::load(&dir.join(&l.scale_net))?;
                let translation = Mlp::load(&dir.join(&l.translation_net))?;
                CouplingLayer::new(l.mask.iter().map(|&m| m != 0).collect(), scale, translation, l.scale_clamp)
            })
            .collect::<Result<Vec<_>>>()?;
        let flow = Flow::from_layers(layers)?;
        if flow.dim != file.dim {
            return Err(Error::DimensionMismatch {
                expected: file.dim,
                got: flow.dim,
            });
        }
        Ok(flow)
    }
}

impl DensityModel for Flow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        Flow::log_pdf(self, x)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Flow::sample(self, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowFile {
    pub format_version: u32,
    pub dim: usize,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    /// 1 marks a pass-through coordinate.
    pub mask: Vec<u8>,
    pub scale_clamp: f64,
    /// Network files, relative to the flow file's directory.
    pub scale_net: PathBuf,
    pub translation_net: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub scale_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            scale_clamp: DEFAULT_SCALE_CLAMP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.scale_clamp > 0.0) {
            return Err(Error::InvalidConfig(
                "batch_size, learning_rate and scale_clamp must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Minimizes the risk-weighted negative log-likelihood
/// `Σ_i w_i · (−ln N(F(x_i)) − Σ_k ln |det J_k|)` with Adam.
///
/// Batch gradients are averaged over the batch without renormalizing the
/// weights. Returns the mean per-sample loss of every epoch.
pub fn train_flow(flow: &mut Flow, samples: &[Vec<f64>], weights: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyData);
    }
    if samples.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: samples.len(),
            got: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
        return Err(Error::InvalidInput(format!("training weight {w} outside (0, 1]")));
    }
    if let Some(x) = samples.iter().find(|x| x.len() != flow.dim) {
        return Err(Error::DimensionMismatch {
            expected: flow.dim,
            got: x.len(),
        });
    }
    flow.set_scale_clamp(cfg.scale_clamp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut params = flow.flatten_params();
    let mut adam = AdamState::new(params.len());
    let mut grads = FlowGrads::zeros_like(flow);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += flow
                    .accumulate_weighted_nll(&samples[i], weights[i], &mut grads)
                    .map_err(|_| Error::DivergedLoss { epoch })?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let g: Vec<f64> = grads.flatten().into_iter().map(|v| v * scale).collect();
            adam_step(&mut params, &g, &mut adam, cfg.learning_rate)?;
            flow.load_params(&params)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        log::debug!("flow epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(trace)
}

/// Largest relative error between the analytic gradient of the mean
/// weighted loss and central differences, over every parameter.
pub fn loss_grad_check(flow: &Flow, samples: &[Vec<f64>], weights: &[f64], h: f64) -> Result<f64> {
    let (_, analytic) = flow.weighted_loss_and_grad(samples, weights)?;
    let base = flow.flatten_params();
    let mut probe = flow.clone();
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        params[i] = base[i] + h;
        probe.load_params(&params)?;
        let plus = probe.weighted_loss(samples, weights)?;
        params[i] = base[i] - h;
        probe.load_params(&params)?;
        let minus = probe.weighted_loss(samples, weights)?;
        params[i] = base[i];
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (analytic[i].abs() + 1e-12));
    }
    Ok(worst)
}

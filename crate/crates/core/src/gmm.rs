//! Full-covariance Gaussian mixture models: EM fitting, evaluation,
//! sampling, exact marginals and exact one-dimensional conditionals.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::stats::{self, LN_2PI};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    log_weight: f64,
    mean: Vec<f64>,
    /// Row-major `dim × dim`.
    cov: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    log_det: f64,
}

impl Component {
    fn new(index: usize, weight: f64, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        let chol = cholesky(&cov, dim).ok_or(Error::SingularComponent { component: index })?;
        let log_det = 2.0 * (0..dim).map(|i| chol[i * dim + i].ln()).sum::<f64>();
        Ok(Self {
            weight,
            log_weight: weight.ln(),
            mean,
            cov,
            chol,
            log_det,
        })
    }

    /// `ln N(x; μ, Σ)` via forward substitution on the Cholesky factor.
    fn log_density(&self, x: &[f64]) -> f64 {
        let dim = self.mean.len();
        let mut y = [0.0f64; 16];
        let mut heap;
        let y: &mut [f64] = if dim <= 16 {
            &mut y[..dim]
        } else {
            heap = vec![0.0; dim];
            &mut heap
        };
        let mut maha = 0.0;
        for i in 0..dim {
            let row = &self.chol[i * dim..i * dim + i];
            let dot: f64 = row.iter().zip(y.iter()).map(|(l, v)| l * v).sum();
            let v = (x[i] - self.mean[i] - dot) / self.chol[i * dim + i];
            y[i] = v;
            maha += v * v;
        }
        -0.5 * (dim as f64 * LN_2PI + self.log_det + maha)
    }
}

/// Lower Cholesky factor of a row-major SPD matrix, `None` when the matrix
/// is not positive definite.
fn cholesky(cov: &[f64], dim: usize) -> Option<Vec<f64>> {
    if cov.len() != dim * dim || cov.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let m = DMatrix::from_row_slice(dim, dim, cov);
    let l = m.cholesky()?.unpack();
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            out[i * dim + j] = l[(i, j)];
        }
    }
    if (0..dim).any(|i| !(out[i * dim + i] > 0.0)) {
        return None;
    }
    Some(out)
}

/// A Gaussian mixture with full covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    dim: usize,
    components: Vec<Component>,
}

impl Gmm {
    /// Builds a mixture, validating the weights and factorizing every
    /// covariance.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                got: means.len().min(covariances.len()),
            });
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::EmptyDims);
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}")));
        }
        let mut components = Vec::with_capacity(k);
        for (i, ((w, mean), cov)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            if mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: mean.len(),
                });
            }
            if cov.len() != dim * dim {
                return Err(Error::ShapeMismatch {
                    expected: dim * dim,
                    got: cov.len(),
                });
            }
            components.push(Component::new(i, w, mean, cov)?);
        }
        Ok(Self { dim, components })
    }

    /// A single standard normal in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![cov]).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covariances(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.cov.clone()).collect()
    }

    /// Overall mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, m) in out.iter_mut().zip(&c.mean) {
                *o += c.weight * m;
            }
        }
        out
    }

    /// Overall mixture covariance (law of total covariance), row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mu = self.mean();
        let mut out = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] += c.weight
                        * (c.cov[i * d + j] + (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]));
                }
            }
        }
        out
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.log_pdf_unchecked(x))
    }

    fn log_pdf_unchecked(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut terms = [0.0f64; 64];
        let k = self.components.len();
        let mut heap;
        let terms: &mut [f64] = if k <= 64 {
            &mut terms[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        for (t, c) in terms.iter_mut().zip(&self.components) {
            *t = c.log_weight + c.log_density(x);
            max = max.max(*t);
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Draws the component index from the weights, then `μ + L z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| {
                c.mean[i]
                    + (0..=i)
                        .map(|j| c.chol[i * d + j] * z[j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Exact marginal over `dims` (in the given order).
    pub fn marginal(&self, dims: &[usize]) -> Result<Gmm> {
        if dims.is_empty() || dims.iter().any(|&d| d >= self.dim) {
            return Err(Error::EmptyDims);
        }
        let d = self.dim;
        let weights = self.weights();
        let means = self
            .components
            .iter()
            .map(|c| dims.iter().map(|&i| c.mean[i]).collect())
            .collect();
        let covs = self
            .components
            .iter()
            .map(|c| {
                dims.iter()
                    .flat_map(|&i| dims.iter().map(move |&j| c.cov[i * d + j]))
                    .collect()
            })
            .collect();
        Gmm::new(weights, means, covs)
    }

    pub fn to_file(&self) -> GmmFile {
        GmmFile {
            format_version: FORMAT_VERSION,
            k: self.n_components(),
            dim: self.dim,
            weights: self.weights(),
            means: self.means(),
            covariances: self
                .components
                .iter()
                .map(|c| c.cov.chunks(self.dim).map(|r| r.to_vec()).collect())
                .collect(),
        }
    }

    pub fn from_file(file: GmmFile) -> Result<Self> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(file.format_version));
        }
        if file.weights.len() != file.k {
            return Err(Error::ShapeMismatch {
                expected: file.k,
                got: file.weights.len(),
            });
        }
        let covs = file
            .covariances
            .into_iter()
            .map(|rows| rows.into_iter().flatten().collect())
            .collect();
        let g = Gmm::new(file.weights, file.means, covs)?;
        if g.dim != file.dim {
            return Err(Error::DimensionMismatch {
                expected: file.dim,
                got: g.dim,
            });
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Gmm::from_file(serde_json::from_str(&text)?)
    }
}

impl DensityModel for Gmm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        Gmm::log_pdf(self, x)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(Gmm::sample(self, rng))
    }
}

/// On-disk mixture representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFile {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Relative change in mean log-likelihood that ends EM.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Added to every covariance diagonal after each M-step.
    pub reg_covar: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_iter: 500,
            tol: 1e-6,
            restarts: 3,
            seed: 0,
            reg_covar: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: Gmm,
    /// Mean log-likelihood of the training data under `model`.
    pub mean_log_likelihood: f64,
    /// Mean log-likelihood at each EM iteration of the winning restart.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Fits a `cfg.k`-component mixture by EM, keeping the best of
/// `cfg.restarts` k-means++ initializations.
pub fn fit_gmm(data: &[Vec<f64>], cfg: &GmmConfig) -> Result<GmmFit> {
    if cfg.k == 0 || cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::InvalidInput("k, restarts and max_iter must be >= 1".into()));
    }
    let dim = data.first().map(|r| r.len()).ok_or(Error::EmptyData)?;
    if dim == 0 {
        return Err(Error::EmptyDims);
    }
    if let Some(r) = data.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    let needed = 10 * cfg.k * dim;
    if data.len() < needed {
        return Err(Error::TooFewSamples {
            needed,
            got: data.len(),
        });
    }
    let flat: Vec<f64> = data.iter().flatten().copied().collect();
    let mut best: Option<GmmFit> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let fit = run_em(&flat, dim, cfg, &mut rng)?;
        if best
            .as_ref()
            .is_none_or(|b| fit.mean_log_likelihood > b.mean_log_likelihood)
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

const CHUNK: usize = 4096;

fn run_em(flat: &[f64], dim: usize, cfg: &GmmConfig, rng: &mut ChaCha8Rng) -> Result<GmmFit> {
    let n = flat.len() / dim;
    let k = cfg.k;
    let mut model = initialize(flat, dim, k, cfg.reg_covar, rng)?;
    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut prev = f64::NEG_INFINITY;
    let mut iterations = 0;
    loop {
        let ll = e_step(&model, flat, dim, &mut resp) / n as f64;
        if !ll.is_finite() {
            return Err(Error::NonFinite("EM log-likelihood"));
        }
        trace.push(ll);
        let converged = (ll - prev).abs() <= cfg.tol * ll.abs().max(1e-12);
        if converged || iterations == cfg.max_iter {
            return Ok(GmmFit {
                model,
                mean_log_likelihood: ll,
                trace,
                iterations,
            });
        }
        prev = ll;
        model = m_step(flat, dim, k, &resp, cfg.reg_covar)?;
        iterations += 1;
    }
}

/// Fills `resp` with responsibilities and returns the total log-likelihood.
/// Chunks are reduced in a fixed order so the result is deterministic.
fn e_step(model: &Gmm, flat: &[f64], dim: usize, resp: &mut [f64]) -> f64 {
    let k = model.components.len();
    let partial: Vec<f64> = resp
        .par_chunks_mut(CHUNK * k)
        .zip(flat.par_chunks(CHUNK * dim))
        .map(|(r, x)| {
            let mut total = 0.0;
            for (rr, xx) in r.chunks_mut(k).zip(x.chunks(dim)) {
                let mut max = f64::NEG_INFINITY;
                for (slot, c) in rr.iter_mut().zip(&model.components) {
                    *slot = c.log_weight + c.log_density(xx);
                    max = max.max(*slot);
                }
                let mut sum = 0.0;
                for slot in rr.iter_mut() {
                    *slot = (*slot - max).exp();
                    sum += *slot;
                }
                for slot in rr.iter_mut() {
                    *slot /= sum;
                }
                total += max + sum.ln();
            }
            total
        })
        .collect();
    partial.iter().sum()
}

fn m_step(flat: &[f64], dim: usize, k: usize, resp: &[f64], reg: f64) -> Result<Gmm> {
    let n = flat.len() / dim;
    let mut nk = vec![0.0; k];
    let mut means = vec![vec![0.0; dim]; k];
    for (x, r) in flat.chunks(dim).zip(resp.chunks(k)) {
        for j in 0..k {
            nk[j] += r[j];
            for d in 0..dim {
                means[j][d] += r[j] * x[d];
            }
        }
    }
    for j in 0..k {
        let denom = nk[j].max(f64::MIN_POSITIVE);
        means[j].iter_mut().for_each(|m| *m /= denom);
    }
    let mut covs = vec![vec![0.0; dim * dim]; k];
    let mut diff = vec![0.0; dim];
    for (x, r) in flat.chunks(dim).zip(resp.chunks(k)) {
        for j in 0..k {
            if r[j] == 0.0 {
                continue;
            }
            for d in 0..dim {
                diff[d] = x[d] - means[j][d];
            }
            let cov = &mut covs[j];
            for a in 0..dim {
                let ra = r[j] * diff[a];
                for b in 0..=a {
                    cov[a * dim + b] += ra * diff[b];
                }
            }
        }
    }
    for j in 0..k {
        let denom = nk[j].max(f64::MIN_POSITIVE);
        let cov = &mut covs[j];
        for a in 0..dim {
            for b in 0..=a {
                let v = cov[a * dim + b] / denom;
                cov[a * dim + b] = v;
                cov[b * dim + a] = v;
            }
            cov[a * dim + a] += reg;
        }
    }
    let total: f64 = nk.iter().sum();
    let weights: Vec<f64> = nk.iter().map(|v| v / total).collect();
    debug_assert!((total - n as f64).abs() < 1e-6 * n as f64);
    Gmm::new(weights, means, covs)
}

/// k-means++ seeding of the means; every component starts from the pooled
/// covariance and equal weight.
fn initialize(flat: &[f64], dim: usize, k: usize, reg: f64, rng: &mut ChaCha8Rng) -> Result<Gmm> {
    let n = flat.len() / dim;
    let row = |i: usize| &flat[i * dim..(i + 1) * dim];
    let mut centers: Vec<Vec<f64>> = vec![row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc >= target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = row(next).to_vec();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(row(i), &c));
        }
        centers.push(c);
    }
    let mut mean = vec![0.0; dim];
    for x in flat.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for x in flat.chunks(dim) {
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] += (x[a] - mean[a]) * (x[b] - mean[b]) / n as f64;
            }
        }
    }
    for a in 0..dim {
        cov[a * dim + a] += reg;
    }
    Gmm::new(vec![1.0 / k as f64; k], centers, vec![cov; k])
        .map_err(|_| Error::SingularComponent { component: 0 })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// A univariate Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Mixture1d {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w.ln() + stats::normal_log_pdf((x - m) / s) - s.ln())
            .collect();
        stats::log_sum_exp(&terms)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * stats::normal_cdf((x - m) / s))
            .sum()
    }

    /// Probability mass in `[lo, hi]`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * interval_mass((lo - m) / s, (hi - m) / s))
            .sum()
    }

    /// Draw from the mixture truncated to `[lo, hi]` by picking a component
    /// in proportion to its in-bounds mass, then inverting its CDF.
    pub fn sample_truncated<R: Rng + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
        let masses: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * interval_mass((lo - m) / s, (hi - m) / s))
            .collect();
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NonFinite("truncated mixture has no mass in bounds"));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = masses.len() - 1;
        for (i, m) in masses.iter().enumerate() {
            acc += m;
            if target < acc {
                pick = i;
                break;
            }
        }
        let (m, s) = (self.means[pick], self.stds[pick]);
        let (a, b) = ((lo - m) / s, (hi - m) / s);
        let u: f64 = rng.random();
        // Work on whichever tail keeps the CDF values away from 1.
        let z = if a > 0.0 {
            let (sa, sb) = (stats::normal_sf(a), stats::normal_sf(b));
            -stats::normal_quantile(sa - u * (sa - sb))
        } else {
            let (ca, cb) = (stats::normal_cdf(a), stats::normal_cdf(b));
            stats::normal_quantile(ca + u * (cb - ca))
        };
        Ok((m + s * z).clamp(lo, hi))
    }
}

fn interval_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        stats::normal_sf(a) - stats::normal_sf(b)
    } else {
        stats::normal_cdf(b) - stats::normal_cdf(a)
    }
}

/// Precomputed conditioning of a mixture's coordinate `target` on all of
/// the remaining coordinates.
#[derive(Debug, Clone)]
pub struct ScalarConditional {
    target: usize,
    given: Vec<usize>,
    parts: Vec<ConditionalPart>,
}

#[derive(Debug, Clone)]
struct ConditionalPart {
    log_weight: f64,
    marginal: Component,
    mean_target: f64,
    /// Regression coefficients `Σ_tb Σ_bb⁻¹`.
    gain: Vec<f64>,
    std: f64,
}

impl ScalarConditional {
    pub fn new(gmm: &Gmm, target: usize) -> Result<Self> {
        let d = gmm.dim;
        if target >= d || d < 2 {
            return Err(Error::EmptyDims);
        }
        let given: Vec<usize> = (0..d).filter(|&i| i != target).collect();
        let b = given.len();
        let mut parts = Vec::with_capacity(gmm.components.len());
        for (idx, c) in gmm.components.iter().enumerate() {
            let sub_mean: Vec<f64> = given.iter().map(|&i| c.mean[i]).collect();
            let sub_cov: Vec<f64> = given
                .iter()
                .flat_map(|&i| given.iter().map(move |&j| c.cov[i * d + j]))
                .collect();
            let marginal = Component::new(idx, c.weight, sub_mean, sub_cov.clone())?;
            let cross = DMatrix::from_iterator(b, 1, given.iter().map(|&j| c.cov[target * d + j]));
            let sbb = DMatrix::from_row_slice(b, b, &sub_cov);
            let chol = sbb.cholesky().ok_or(Error::SingularComponent { component: idx })?;
            let gain = chol.solve(&cross);
            let var = c.cov[target * d + target] - (cross.transpose() * &gain)[(0, 0)];
            if !(var > 0.0) {
                return Err(Error::SingularComponent { component: idx });
            }
            parts.push(ConditionalPart {
                log_weight: c.log_weight,
                marginal,
                mean_target: c.mean[target],
                gain: gain.iter().copied().collect(),
                std: var.sqrt(),
            });
        }
        Ok(Self {
            target,
            given,
            parts,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// The conditional law of the target coordinate given the others
    /// (`given` in ascending index order, target omitted).
    pub fn at(&self, given: &[f64]) -> Result<Mixture1d> {
        if given.len() != self.given.len() {
            return Err(Error::DimensionMismatch {
                expected: self.given.len(),
                got: given.len(),
            });
        }
        let logs: Vec<f64> = self
            .parts
            .iter()
            .map(|p| p.log_weight + p.marginal.log_density(given))
            .collect();
        let norm = stats::log_sum_exp(&logs);
        if !norm.is_finite() {
            return Err(Error::NonFinite("conditional mixture weights"));
        }
        let weights = logs.iter().map(|l| (l - norm).exp()).collect();
        let means = self
            .parts
            .iter()
            .map(|p| {
                p.mean_target
                    + p.gain
                        .iter()
                        .zip(given.iter().zip(&p.marginal.mean))
                        .map(|(g, (x, m))| g * (x - m))
                        .sum::<f64>()
            })
            .collect();
        let stds = self.parts.iter().map(|p| p.std).collect();
        Ok(Mixture1d {
            weights,
            means,
            stds,
        })
    }
}

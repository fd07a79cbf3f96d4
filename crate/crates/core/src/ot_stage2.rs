//! Stage 2: density estimation by Sinkhorn matching to a crowd prior.
//!
//! A density head on top of the frozen FEN predicts a non-negative map per
//! crop. The per-crop sums of a batch are matched, as a one-dimensional
//! empirical distribution, to draws from a truncated power-law prior under
//! entropy-regularised optimal transport with squared-difference cost.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{crop_at, crop_random, EpochSampler};
use crate::density::{downsample_density, DensityMap};
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::mcnn_fen::{extract_fen, fen_graph, is_fen_param, FenConfig, FEN_STRIDE};
use crate::optim::{Adam, AdamConfig};
use crate::params::{add_conv, conv, conv_relu, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DENSITY_HEAD_PREFIX: &str = "density_head/";

/// Weighted atoms on the real line.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
    support: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>, support: Vec<f64>) -> Result<Self> {
        if weights.len() != support.len() || weights.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} atoms",
                weights.len(),
                support.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::BadSpec("distribution weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::BadSpec(format!("distribution weights sum to {total}, not 1")));
        }
        Ok(DiscreteDistribution { weights, support })
    }

    /// Equal mass `1/n` on each atom.
    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let n = support.len();
        DiscreteDistribution::new(vec![1.0 / n.max(1) as f64; n], support)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Dense `rows × cols` ground-cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} cost needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::BadSpec("costs must be finite and non-negative".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    /// `C[i][j] = (x_i − y_j)²`.
    pub fn squared_difference(x: &[f64], y: &[f64]) -> Self {
        let data = x.iter().flat_map(|&xi| y.iter().map(move |&yj| (xi - yj) * (xi - yj))).collect();
        CostMatrix {
            rows: x.len(),
            cols: y.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Non-negative coupling; row sums approximate the source weights and
/// column sums the target weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TransportPlan {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s
    }

    /// Largest absolute deviation of either marginal from `a`, `b`.
    pub fn marginal_violation(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = self.row_sums().iter().zip(a).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max);
        let c = self.col_sums().iter().zip(b).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max);
        r.max(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_eps() -> f64 {
    0.01
}
fn default_max_iter() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            eps: default_eps(),
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    /// `⟨P, C⟩`, without the entropy term.
    pub distance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_violation: f64,
}

/// Entropy-regularised OT by log-domain Sinkhorn iterations.
///
/// Dual potentials `f`, `g` replace the scalings `u = exp(f/eps)`,
/// `v = exp(g/eps)`. Iteration stops once both marginals of
/// `P = exp((f_i + g_j − C_ij)/eps)` are within `tol`; otherwise the iterate
/// with the smallest violation is returned with `converged = false`.
pub fn sinkhorn(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostMatrix,
    config: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let (n, m) = (a.len(), b.len());
    if cost.rows != n || cost.cols != m {
        return Err(Error::DimensionMismatch(format!(
            "cost is {}x{}, marginals are {n} and {m}",
            cost.rows, cost.cols
        )));
    }
    let eps = config.eps;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("sinkhorn eps must be positive, got {eps}")));
    }
    if a.weights.iter().chain(&b.weights).any(|&w| w <= 0.0) {
        return Err(Error::BadSpec("sinkhorn needs strictly positive weights".into()));
    }
    let log_a: Vec<f64> = a.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.weights.iter().map(|w| w.ln()).collect();
    let c = &cost.data;

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut plan = vec![0.0; n * m];
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut iterations = 0;

    for it in 0..config.max_iter.max(1) {
        iterations = it + 1;
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - c[i * m + j]) / eps;
            }
            f[i] = eps * (log_a[i] - log_sum_exp(&buf[..m]));
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - c[i * m + j]) / eps;
            }
            g[j] = eps * (log_b[j] - log_sum_exp(&buf[..n]));
        }
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = ((f[i] + g[j] - c[i * m + j]) / eps).exp();
            }
        }
        let tp = TransportPlan {
            rows: n,
            cols: m,
            data: std::mem::take(&mut plan),
        };
        let violation = tp.marginal_violation(&a.weights, &b.weights);
        plan = tp.data;
        if best.as_ref().is_none_or(|(v, _, _)| violation < *v) {
            best = Some((violation, plan.clone(), iterations));
        }
        if violation <= config.tol {
            break;
        }
    }
    let (violation, data, _) = best.expect("at least one iteration");
    let distance = data.iter().zip(c).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        plan: TransportPlan { rows: n, cols: m, data },
        distance,
        converged: violation <= config.tol,
        iterations,
        marginal_violation: violation,
    })
}

/// Truncated power law `p(c) ∝ c^(−alpha)` on `[cmin, cmax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_cmin")]
    pub cmin: f64,
    pub cmax: f64,
}

fn default_alpha() -> f64 {
    2.0
}
fn default_cmin() -> f64 {
    1.0
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            alpha: default_alpha(),
            cmin: default_cmin(),
            cmax: 100.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::BadSpec(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if !(self.cmin > 0.0 && self.cmin < self.cmax && self.cmax.is_finite()) {
            return Err(Error::BadSpec(format!(
                "need 0 < cmin < cmax, got [{}, {}]",
                self.cmin, self.cmax
            )));
        }
        Ok(())
    }

    /// `1 − (cmax/cmin)^(1−alpha)`, the normaliser in units of `cmin`.
    fn mass(&self) -> f64 {
        -((1.0 - self.alpha) * (self.cmax / self.cmin).ln()).exp_m1()
    }

    pub fn cdf(&self, c: f64) -> f64 {
        if c <= self.cmin {
            return 0.0;
        }
        if c >= self.cmax {
            return 1.0;
        }
        let t = -((1.0 - self.alpha) * (c / self.cmin).ln()).exp_m1();
        t / self.mass()
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let inner = 1.0 - u * self.mass();
        let c = self.cmin * (inner.ln() / (1.0 - self.alpha)).exp();
        c.clamp(self.cmin, self.cmax)
    }

    /// Closed-form mean.
    pub fn mean(&self) -> f64 {
        let a = self.alpha;
        let r = self.cmax / self.cmin;
        let z = self.mass() / (a - 1.0);
        let first = if (a - 2.0).abs() < 1e-12 {
            r.ln()
        } else {
            ((2.0 - a) * r.ln()).exp_m1() / (2.0 - a)
        };
        self.cmin * first / z
    }
}

/// `n` inverse-CDF draws, sorted ascending, with weights `1/n`.
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, n: usize, rng: &mut R) -> Result<DiscreteDistribution> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::BadSpec("prior sample size must be positive".into()));
    }
    let mut xs: Vec<f64> = (0..n).map(|_| spec.quantile(rng.gen::<f64>())).collect();
    xs.sort_by(f64::total_cmp);
    DiscreteDistribution::uniform(xs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingLoss {
    pub loss: f64,
    /// `∂loss/∂x_i` in the caller's order, with the plan held fixed.
    pub grad: Vec<f64>,
    pub converged: bool,
    pub prior: Vec<f64>,
}

/// Sinkhorn distance between the sorted batch sums and a fresh prior draw.
pub fn matching_loss<R: Rng + ?Sized>(
    predictions: &[f64],
    spec: &PriorSpec,
    config: &SinkhornConfig,
    rng: &mut R,
) -> Result<MatchingLoss> {
    if predictions.len() < 2 {
        return Err(Error::DegenerateBatch(predictions.len()));
    }
    let prior = sample_prior(spec, predictions.len(), rng)?;
    matching_loss_against(predictions, prior.support(), config)
}

/// [`matching_loss`] against a given prior support with uniform weights.
pub fn matching_loss_against(predictions: &[f64], prior: &[f64], config: &SinkhornConfig) -> Result<MatchingLoss> {
    let b = predictions.len();
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    if prior.len() != b {
        return Err(Error::DimensionMismatch(format!("{b} predictions, {} prior atoms", prior.len())));
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| predictions[i].total_cmp(&predictions[j]).then(i.cmp(&j)));
    let x: Vec<f64> = order.iter().map(|&i| predictions[i]).collect();
    let mut y = prior.to_vec();
    y.sort_by(f64::total_cmp);

    let cost = CostMatrix::squared_difference(&x, &y);
    let res = sinkhorn(
        &DiscreteDistribution::uniform(x.clone())?,
        &DiscreteDistribution::uniform(y.clone())?,
        &cost,
        config,
    )?;
    let mut grad = vec![0.0; b];
    for (si, &orig) in order.iter().enumerate() {
        grad[orig] = (0..b).map(|j| res.plan.at(si, j) * 2.0 * (x[si] - y[j])).sum();
    }
    Ok(MatchingLoss {
        loss: res.distance,
        grad,
        converged: res.converged,
        prior: y,
    })
}

/// Two VGG-style blocks without pooling, then a 1×1 conv to one channel and ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityHeadConfig {
    #[serde(default = "default_head_widths")]
    pub widths: Vec<usize>,
    /// 1-based blocks kept fixed during Stage-2 training.
    #[serde(default)]
    pub frozen_blocks: Vec<usize>,
}

fn default_head_widths() -> Vec<usize> {
    vec![64, 128]
}

impl Default for DensityHeadConfig {
    fn default() -> Self {
        DensityHeadConfig {
            widths: default_head_widths(),
            frozen_blocks: Vec::new(),
        }
    }
}

impl DensityHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("density head needs two positive block widths".into()));
        }
        if self.frozen_blocks.iter().any(|&b| b == 0 || b > self.widths.len()) {
            return Err(Error::InvalidConfig("frozen_blocks must name existing blocks".into()));
        }
        Ok(())
    }

    /// Head tensors updated in Stage 2.
    pub fn is_trainable(&self, name: &str) -> bool {
        name.starts_with(DENSITY_HEAD_PREFIX)
            && !self
                .frozen_blocks
                .iter()
                .any(|b| name.starts_with(&format!("density_head/block{b}/")))
    }
}

pub fn build_density_head<T: Scalar, R: Rng + ?Sized>(
    in_channels: usize,
    config: &DensityHeadConfig,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut cin = in_channels;
    for (b, &w) in config.widths.iter().enumerate() {
        for l in 1..=2 {
            add_conv(&mut store, &format!("density_head/block{}/conv{l}", b + 1), 3, cin, w, rng);
            cin = w;
        }
    }
    add_conv(&mut store, "density_head/out", 1, cin, 1, rng);
    Ok(store)
}

/// Stage-2 model: the Stage-1 FEN (rotation head dropped) plus a new density head.
pub fn init_stage2<T: Scalar, R: Rng + ?Sized>(
    stage1: &ParamStore<T>,
    fen: &FenConfig,
    head: &DensityHeadConfig,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    let mut p = extract_fen(stage1, fen)?;
    p.extend(build_density_head(fen.out_channels(), head, rng)?);
    Ok(p)
}

pub fn density_head_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, config: &DensityHeadConfig, features: Var) -> Result<Var> {
    let mut h = features;
    for b in 1..=config.widths.len() {
        for l in 1..=2 {
            h = conv_relu(g, p, &format!("density_head/block{b}/conv{l}"), h)?;
        }
    }
    let out = conv(g, p, "density_head/out", h)?;
    Ok(g.relu(out))
}

/// `[B, H/4, W/4, 1]` raw density for a `[B, H, W, C]` batch.
pub fn density_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    fen: &FenConfig,
    head: &DensityHeadConfig,
    x: Var,
) -> Result<Var> {
    let f = fen_graph(g, p, fen, x)?;
    density_head_graph(g, p, head, f)
}

pub fn raw_density<T: Scalar>(
    params: &ParamStore<T>,
    fen: &FenConfig,
    head: &DensityHeadConfig,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let x = g.input(batch.clone());
    let out = density_graph(&mut g, &bound, fen, head, x)?;
    Ok(g.value(out).clone())
}

/// Unscaled count of one `[H, W, C]` image.
pub fn raw_count<T: Scalar>(params: &ParamStore<T>, fen: &FenConfig, head: &DensityHeadConfig, image: &Tensor<T>) -> Result<f64> {
    Ok(raw_density(params, fen, head, &image.clone().unsqueeze0())?.sum_f64())
}

/// `scale × head(FEN(image))` and its integral.
pub fn predict_count<T: Scalar>(
    params: &ParamStore<T>,
    fen: &FenConfig,
    head: &DensityHeadConfig,
    image: &Tensor<T>,
    scale: f64,
) -> Result<(DensityMap<T>, f64)> {
    let s = image.shape();
    if s.len() != 3 || !s[0].is_multiple_of(FEN_STRIDE) || !s[1].is_multiple_of(FEN_STRIDE) {
        return Err(Error::Shape(format!("image {s:?} must be [H, W, C] with H, W divisible by 4")));
    }
    let raw = raw_density(params, fen, head, &image.clone().unsqueeze0())?;
    let k = T::of(scale);
    let values: Vec<T> = raw.data().iter().map(|&v| v * k).collect();
    let map = DensityMap::from_values(s[0] / FEN_STRIDE, s[1] / FEN_STRIDE, values)?;
    let count = crate::density::count_from_density(&map);
    Ok((map, count))
}

/// Fixes the otherwise arbitrary scale of the unsupervised density.
#[derive(Clone, Debug, PartialEq)]
pub enum CalibrationReference<'a> {
    /// One image with a known count and its raw predicted sum.
    Labeled { true_count: f64, raw_sum: f64 },
    /// Prior mean against the mean raw sum of a calibration pass.
    PriorMean { spec: &'a PriorSpec, raw_crop_sums: &'a [f64] },
}

pub fn calibrate_scale(reference: &CalibrationReference<'_>) -> Result<f64> {
    let (target, raw) = match reference {
        CalibrationReference::Labeled { true_count, raw_sum } => (*true_count, *raw_sum),
        CalibrationReference::PriorMean { spec, raw_crop_sums } => {
            spec.validate()?;
            if raw_crop_sums.is_empty() {
                return Err(Error::EmptyInput);
            }
            let mean = raw_crop_sums.iter().sum::<f64>() / raw_crop_sums.len() as f64;
            (spec.mean(), mean)
        }
    };
    if !(raw > 0.0) || !(target > 0.0) {
        return Err(Error::ZeroPrediction);
    }
    Ok(target / raw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default = "default_s2_steps")]
    pub steps: usize,
    #[serde(default = "default_s2_batch")]
    pub batch_size: usize,
    #[serde(default = "default_s2_crop")]
    pub crop_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
}

fn default_s2_steps() -> usize {
    1000
}
fn default_s2_batch() -> usize {
    16
}
fn default_s2_crop() -> usize {
    112
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: default_s2_steps(),
            batch_size: default_s2_batch(),
            crop_size: default_s2_crop(),
            optimizer: AdamConfig::default(),
            prior: PriorSpec::default(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: usize,
    pub loss: f64,
    pub mean_sum: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub records: Vec<Stage2Record>,
}

impl Stage2Log {
    /// `step,loss,mean_sum,converged` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,mean_sum,converged\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{}", r.step, r.loss, r.mean_sum, r.converged as u8).expect("write to string");
        }
        s
    }
}

/// Head-only optimiser over the frozen FEN.
pub struct Stage2Trainer<'a, T> {
    pub params: ParamStore<T>,
    fen: FenConfig,
    head: DensityHeadConfig,
    config: Stage2Config,
    adam: Adam<T>,
    images: &'a [Tensor<T>],
    sampler: EpochSampler,
}

impl<'a, T: Scalar> Stage2Trainer<'a, T> {
    pub fn new(
        params: ParamStore<T>,
        images: &'a [Tensor<T>],
        fen: FenConfig,
        head: DensityHeadConfig,
        config: Stage2Config,
    ) -> Result<Self> {
        head.validate()?;
        config.prior.validate()?;
        if config.batch_size < 2 {
            return Err(Error::DegenerateBatch(config.batch_size));
        }
        for img in images {
            let s = img.shape();
            if s.len() != 3 || s[0] < config.crop_size || s[1] < config.crop_size {
                return Err(Error::ImageTooSmall {
                    height: s.first().copied().unwrap_or(0),
                    width: s.get(1).copied().unwrap_or(0),
                    size: config.crop_size,
                });
            }
        }
        let adam = Adam::new(config.optimizer.clone());
        Ok(Stage2Trainer {
            params,
            fen,
            head,
            config,
            adam,
            sampler: EpochSampler::new(images.len()),
            images,
        })
    }

    fn loss_and_grads(&self, inputs: &Tensor<T>, prior: &[f64]) -> Result<(MatchingLoss, f64, BTreeMap<String, Tensor<T>>)> {
        let mut g = Graph::new();
        let head = &self.head;
        let bound = self.params.bind(&mut g, |n| head.is_trainable(n));
        let x = g.input(inputs.clone());
        let density = density_graph(&mut g, &bound, &self.fen, head, x)?;
        let sums = g.sum_per_sample(density);
        let preds: Vec<f64> = g.value(sums).data().iter().map(|v| v.as_f64()).collect();
        let ml = matching_loss_against(&preds, prior, &self.config.sinkhorn)?;
        let seed = Tensor::from_vec(&[preds.len()], ml.grad.iter().map(|&v| T::of(v)).collect())?;
        let mut grads = g.backward(sums, seed)?;
        let named = bound.gradients(&mut grads);
        let mean = preds.iter().sum::<f64>() / preds.len() as f64;
        Ok((ml, mean, named))
    }

    /// Loss of the current head on a given batch and prior, without updating.
    pub fn evaluate_fixed(&self, inputs: &Tensor<T>, prior: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grads(inputs, prior)?.0.loss)
    }

    /// One update on a given batch and prior.
    pub fn step_fixed(&mut self, step: usize, inputs: &Tensor<T>, prior: &[f64]) -> Result<Stage2Record> {
        let (ml, mean_sum, grads) = self.loss_and_grads(inputs, prior)?;
        if !ml.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: ml.loss });
        }
        self.adam.step(&mut self.params, &grads)?;
        Ok(Stage2Record {
            step,
            loss: ml.loss,
            mean_sum,
            converged: ml.converged,
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Tensor<T>> {
        let idx = self.sampler.next_batch(self.config.batch_size, rng);
        let crops = idx
            .iter()
            .map(|&i| Ok(crop_random(&self.images[i], self.config.crop_size, rng)?.unsqueeze0()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_rows(&crops)
    }

    pub fn step<R: Rng + ?Sized>(&mut self, step: usize, rng: &mut R) -> Result<Stage2Record> {
        let inputs = self.sample_batch(rng)?;
        let prior = sample_prior(&self.config.prior, self.config.batch_size, rng)?;
        self.step_fixed(step, &inputs, prior.support())
    }
}

/// Trains a fresh density head on top of the Stage-1 FEN.
pub fn train_stage2<T: Scalar, R: Rng + ?Sized>(
    stage1: &ParamStore<T>,
    images: &[Tensor<T>],
    fen: &FenConfig,
    head: &DensityHeadConfig,
    config: &Stage2Config,
    rng: &mut R,
) -> Result<(ParamStore<T>, Stage2Log)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let params = init_stage2(stage1, fen, head, rng)?;
    let mut trainer = Stage2Trainer::new(params, images, fen.clone(), head.clone(), config.clone())?;
    let mut log = Stage2Log::default();
    for step in 0..config.steps {
        log.records.push(trainer.step(step, rng)?);
    }
    Ok((trainer.params, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    #[serde(default = "default_s2_steps")]
    pub steps: usize,
    #[serde(default = "default_s2_batch")]
    pub batch_size: usize,
    #[serde(default = "default_s2_crop")]
    pub crop_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Also update the FEN.
    #[serde(default)]
    pub train_fen: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            steps: default_s2_steps(),
            batch_size: default_s2_batch(),
            crop_size: default_s2_crop(),
            optimizer: AdamConfig::default(),
            train_fen: false,
        }
    }
}

/// `(step, loss)` pairs.
pub type LossCurve = Vec<(usize, f64)>;

/// Pixel-wise MSE against ground-truth maps sum-pooled to the output stride.
///
/// Crops are taken at offsets that are multiples of 4 so the pooled target
/// aligns with the output grid.
pub fn train_supervised<T: Scalar, R: Rng + ?Sized>(
    mut params: ParamStore<T>,
    images: &[Tensor<T>],
    targets: &[DensityMap<T>],
    fen: &FenConfig,
    head: &DensityHeadConfig,
    config: &SupervisedConfig,
    rng: &mut R,
) -> Result<(ParamStore<T>, LossCurve)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != targets.len() {
        return Err(Error::LengthMismatch(images.len(), targets.len()));
    }
    let size = config.crop_size;
    if size == 0 || !size.is_multiple_of(FEN_STRIDE) {
        return Err(Error::InvalidConfig(format!("crop_size {size} must be a positive multiple of 4")));
    }
    for (img, t) in images.iter().zip(targets) {
        let s = img.shape();
        if s.len() != 3 || s[0] != t.height() || s[1] != t.width() {
            return Err(Error::Shape(format!("image {s:?} vs target {}x{}", t.height(), t.width())));
        }
        if s[0] < size || s[1] < size {
            return Err(Error::ImageTooSmall {
                height: s[0],
                width: s[1],
                size,
            });
        }
    }
    let mut adam = Adam::new(config.optimizer.clone());
    let mut sampler = EpochSampler::new(images.len());
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut crops = Vec::new();
        let mut target = Vec::new();
        for i in sampler.next_batch(config.batch_size.max(1), rng) {
            let (h, w) = (targets[i].height(), targets[i].width());
            let top = FEN_STRIDE * rng.gen_range(0..=(h - size) / FEN_STRIDE);
            let left = FEN_STRIDE * rng.gen_range(0..=(w - size) / FEN_STRIDE);
            crops.push(crop_at(&images[i], top, left, size)?.unsqueeze0());
            let tcrop = crop_at(&targets[i].to_tensor(), top, left, size)?;
            let tmap = DensityMap::from_values(size, size, tcrop.into_data())?;
            target.extend_from_slice(downsample_density(&tmap, FEN_STRIDE)?.values());
        }
        let mut g = Graph::new();
        let train_fen = config.train_fen;
        let bound = params.bind(&mut g, |n| head.is_trainable(n) || (train_fen && is_fen_param(n)));
        let x = g.input(Tensor::stack_rows(&crops)?);
        let density = density_graph(&mut g, &bound, fen, head, x)?;
        let loss_var = g.mse(density, &target)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        let mut grads = g.backward_scalar(loss_var)?;
        let named = bound.gradients(&mut grads);
        adam.step(&mut params, &named)?;
        log.push((step, loss));
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sk(eps: f64) -> SinkhornConfig {
        SinkhornConfig {
            eps,
            max_iter: 20_000,
            tol: 1e-9,
        }
    }

    #[test]
    fn identical_marginals_cost_nothing() {
        let x = vec![0.0, 1.0, 2.5, 4.0];
        let a = DiscreteDistribution::uniform(x.clone()).unwrap();
        let r = sinkhorn(&a, &a, &CostMatrix::squared_difference(&x, &x), &SinkhornConfig::default()).unwrap();
        assert!(r.distance <= 1e-6, "{}", r.distance);
        assert!(r.converged);
    }

    #[test]
    fn two_point_shift_costs_one() {
        let a = DiscreteDistribution::uniform(vec![0.0, 1.0]).unwrap();
        let b = DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap();
        let c = CostMatrix::squared_difference(a.support(), b.support());
        let r = sinkhorn(&a, &b, &c, &sk(0.001)).unwrap();
        // couplings [[t, .5-t], [.5-t, t]]: cost = t + 4(.5-t) + t·1 ... minimised at t = .5
        assert!((r.distance - 1.0).abs() < 1e-3);
        assert!(r.plan.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn marginals_match_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DiscreteDistribution::new(vec![0.2, 0.3, 0.5], vec![0.0; 3]).unwrap();
        let b = DiscreteDistribution::new(vec![0.6, 0.4], vec![0.0; 2]).unwrap();
        let c = CostMatrix::new(3, 2, (0..6).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let r = sinkhorn(&a, &b, &c, &sk(0.05)).unwrap();
        assert!(r.marginal_violation <= 1e-9);
        assert!(r.plan.marginal_violation(a.weights(), b.weights()) <= 1e-9);
        let bad = CostMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(sinkhorn(&a, &b, &bad, &sk(0.05)), Err(Error::DimensionMismatch(_))));
        assert!(DiscreteDistribution::new(vec![0.5, 0.6], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let a = DiscreteDistribution::new(vec![0.1, 0.9], vec![0.0; 2]).unwrap();
        let b = DiscreteDistribution::new(vec![0.5, 0.5], vec![0.0; 2]).unwrap();
        let c = CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let cfg = SinkhornConfig {
            eps: 1e-3,
            max_iter: 1,
            tol: 0.0,
        };
        let r = sinkhorn(&a, &b, &c, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn prior_moments_and_support() {
        let spec = PriorSpec {
            alpha: 2.0,
            cmin: 1.0,
            cmax: 100.0,
        };
        // alpha = 2: mean = ln(cmax/cmin) / (1/cmin - 1/cmax)
        let closed = 100f64.ln() / (1.0 - 0.01);
        assert!((spec.mean() - closed).abs() < 1e-12);
        let spec3 = PriorSpec { alpha: 3.0, ..spec };
        // alpha = 3: ∫c^-2 / ∫c^-3 = (1 - 1/100) / ((1 - 1/10000)/2)
        assert!((spec3.mean() - 0.99 / (0.9999 / 2.0)).abs() < 1e-12);
        assert!((spec.cdf(spec.quantile(0.37)) - 0.37).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let steep = PriorSpec {
            alpha: 10.0,
            cmin: 1.0,
            cmax: 1000.0,
        };
        let s = sample_prior(&steep, 1000, &mut rng).unwrap();
        assert!(s.support().iter().sum::<f64>() / 1000.0 <= 1.2);
        assert!((steep.mean() - 9.0 / 8.0).abs() < 1e-9);

        let narrow = PriorSpec {
            alpha: 2.0,
            cmin: 5.0,
            cmax: 5.0 + 1e-9,
        };
        let s = sample_prior(&narrow, 100, &mut rng).unwrap();
        assert!(s.support().iter().all(|&c| (5.0..=5.0 + 1e-9).contains(&c)));
        assert!(s.support().windows(2).all(|w| w[0] <= w[1]));

        assert!(sample_prior(&PriorSpec { alpha: 1.0, ..spec }, 3, &mut rng).is_err());
        assert!(sample_prior(&PriorSpec { cmin: 0.0, ..spec }, 3, &mut rng).is_err());
        assert!(sample_prior(&spec, 0, &mut rng).is_err());
    }

    #[test]
    fn matching_loss_properties() {
        let cfg = SinkhornConfig {
            eps: 0.001,
            ..Default::default()
        };
        let prior = vec![2.0, 5.0, 9.0, 30.0];
        let same = matching_loss_against(&[30.0, 2.0, 9.0, 5.0], &prior, &cfg).unwrap();
        assert!(same.loss <= 0.01);

        let spec = PriorSpec::default();
        let zero = matching_loss(&[0.0; 8], &spec, &SinkhornConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(zero.loss >= 1.0);
        assert!(zero.grad.iter().all(|&g| g < 0.0));

        assert!(matches!(
            matching_loss(&[1.0], &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn matching_loss_is_order_invariant() {
        let prior = vec![1.0, 3.0, 4.0, 8.0, 20.0];
        let preds = vec![6.0, 0.5, 12.0, 3.5, 2.0];
        let cfg = SinkhornConfig::default();
        let base = matching_loss_against(&preds, &prior, &cfg).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let shuffled: Vec<f64> = perm.iter().map(|&i| preds[i]).collect();
        let other = matching_loss_against(&shuffled, &prior, &cfg).unwrap();
        assert_eq!(base.loss, other.loss);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(other.grad[k], base.grad[i]);
        }
    }

    #[test]
    fn envelope_gradient_matches_finite_difference() {
        // at convergence the plan is stationary, so d<P,C>/dx is close to the envelope term
        let prior = vec![1.0, 2.0, 4.0];
        let preds = vec![1.3, 2.6, 3.1];
        let cfg = SinkhornConfig {
            eps: 0.05,
            max_iter: 10_000,
            tol: 1e-12,
        };
        let base = matching_loss_against(&preds, &prior, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = preds.clone();
            p[i] += h;
            let up = matching_loss_against(&p, &prior, &cfg).unwrap().loss;
            p[i] -= 2.0 * h;
            let down = matching_loss_against(&p, &prior, &cfg).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - base.grad[i]).abs() < 0.1 * (1.0 + fd.abs()), "{fd} vs {}", base.grad[i]);
        }
    }

    #[test]
    fn calibration() {
        let lab = |t, r| calibrate_scale(&CalibrationReference::Labeled { true_count: t, raw_sum: r });
        assert_eq!(lab(10.0, 10.0).unwrap(), 1.0);
        assert_eq!(lab(20.0, 5.0).unwrap(), 4.0);
        assert!(matches!(lab(20.0, 0.0), Err(Error::ZeroPrediction)));
        let spec = PriorSpec::default();
        let sums = [2.0, 4.0];
        let s = calibrate_scale(&CalibrationReference::PriorMean {
            spec: &spec,
            raw_crop_sums: &sums,
        })
        .unwrap();
        assert!((s - spec.mean() / 3.0).abs() < 1e-12);
    }

    fn tiny() -> (FenConfig, DensityHeadConfig) {
        (
            FenConfig::with_widths(&[2, 2, 2, 1], 1),
            DensityHeadConfig {
                widths: vec![3, 3],
                frozen_blocks: vec![],
            },
        )
    }

    #[test]
    fn predict_count_scales_linearly() {
        let (fen, head) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stage1 = crate::mcnn_fen::build_fen::<f32, _>(&fen, &mut rng).unwrap();
        let p = init_stage2(&stage1, &fen, &head, &mut rng).unwrap();
        let img = Tensor::from_fn(&[16, 12, 1], |i| ((i * 31) % 17) as f32 / 17.0);
        let (map, c1) = predict_count(&p, &fen, &head, &img, 1.0).unwrap();
        assert_eq!((map.height(), map.width()), (4, 3));
        assert!(map.values().iter().all(|&v| v >= 0.0));
        assert_eq!(predict_count(&p, &fen, &head, &img, 0.0).unwrap().1, 0.0);
        assert_eq!(predict_count(&p, &fen, &head, &img, 2.0).unwrap().1, 2.0 * c1);
        assert!(predict_count(&p, &fen, &head, &Tensor::zeros(&[10, 12, 1]), 1.0).is_err());
    }

    #[test]
    fn init_rejects_wrong_fen() {
        let (fen, head) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let other = crate::mcnn_fen::build_fen::<f32, _>(&FenConfig::with_widths(&[2, 2, 2, 2], 1), &mut rng).unwrap();
        assert!(matches!(init_stage2(&other, &fen, &head, &mut rng), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            init_stage2(&ParamStore::<f32>::new(), &fen, &head, &mut rng),
            Err(Error::MissingParam(_))
        ));
    }

    #[test]
    fn frozen_block_mask() {
        let head = DensityHeadConfig {
            widths: vec![4, 4],
            frozen_blocks: vec![1],
        };
        assert!(!head.is_trainable("density_head/block1/conv1/weight"));
        assert!(head.is_trainable("density_head/block2/conv1/weight"));
        assert!(head.is_trainable("density_head/out/bias"));
        assert!(!head.is_trainable("fen/col1/conv1/weight"));
    }
}

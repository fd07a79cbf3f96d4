//! Spatio-temporal violence classifier.
//!
//! Each consecutive frame pair `(t, t−1)` goes through two VGG-19 style
//! streams whose block-5 features feed a wide dense residual block (WDRB) and
//! global average pooling. The concatenated pair features drive an LSTM whose
//! last valid hidden state is classified as non-violent (0) or violent (1).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_frame, AugmentSpec};
use crate::dataset_io::CheckpointArchive;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::metrics::{precision_recall_f1, ConfusionMatrix, PrecisionRecall};
use crate::optim::{Adam, AdamConfig};
use crate::params::{add_conv, conv, conv_relu, glorot_uniform, linear, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video_frames::{ClipDatasetArrays, FrameSequence};

pub const VGG_PREFIX: &str = "vgg/";
pub const NUM_CLASSES: usize = 2;
/// Spatial reduction of the four pooled VGG blocks ahead of the tap point.
pub const VGG_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggBlock {
    pub width: usize,
    pub convs: usize,
}

/// Five 3×3 conv blocks; 2×2 max pooling after blocks 1–4. The tap is the
/// last conv of block 5, before its pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vgg19Spec {
    pub blocks: Vec<VggBlock>,
    #[serde(default = "default_in_channels")]
    pub input_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl Default for Vgg19Spec {
    fn default() -> Self {
        Vgg19Spec::with_widths(&[64, 128, 256, 512, 512], &[2, 2, 4, 4, 4])
    }
}

impl Vgg19Spec {
    pub fn with_widths(widths: &[usize], convs: &[usize]) -> Self {
        Vgg19Spec {
            blocks: widths
                .iter()
                .zip(convs)
                .map(|(&width, &convs)| VggBlock { width, convs })
                .collect(),
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 5 {
            return Err(Error::InvalidConfig(format!("VGG needs 5 blocks, got {}", self.blocks.len())));
        }
        if self.blocks.iter().any(|b| b.width == 0 || b.convs == 0) || self.input_channels == 0 {
            return Err(Error::InvalidConfig("VGG widths and conv counts must be positive".into()));
        }
        Ok(())
    }

    pub fn conv_count(&self) -> usize {
        self.blocks.iter().map(|b| b.convs).sum()
    }

    pub fn tap_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.width)
    }

    /// `(block, conv, in_channels, out_channels)`, 1-based.
    pub fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (b, block) in self.blocks.iter().enumerate() {
            for l in 0..block.convs {
                out.push((b + 1, l + 1, cin, block.width));
                cin = block.width;
            }
        }
        out
    }
}

/// Dense layers of conv3×3 → BN → ReLU at `widen_factor ×` the input width,
/// a 1×1 projection skip, then global average pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WdrbSpec {
    #[serde(default = "default_wdrb_layers")]
    pub layers: usize,
    #[serde(default = "default_widen")]
    pub widen_factor: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_wdrb_layers() -> usize {
    2
}
fn default_widen() -> usize {
    2
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}

impl Default for WdrbSpec {
    fn default() -> Self {
        WdrbSpec {
            layers: default_wdrb_layers(),
            widen_factor: default_widen(),
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }
}

impl WdrbSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.widen_factor == 0 {
            return Err(Error::InvalidConfig("WDRB layers and widen_factor must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("WDRB bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn width(&self, in_channels: usize) -> usize {
        self.widen_factor * in_channels
    }

    /// Trainable parameter count for one block over `in_channels` inputs.
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        let w = self.width(in_channels);
        let layers: usize = (0..self.layers)
            .map(|l| {
                let cin = in_channels + l * w;
                9 * cin * w + w + 2 * w
            })
            .sum();
        layers + in_channels * w + w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmSpec {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Inverted dropout on each step's input, training only.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_hidden() -> usize {
    256
}
fn default_dropout() -> f64 {
    0.2
}

impl Default for LstmSpec {
    fn default() -> Self {
        LstmSpec {
            hidden: default_hidden(),
            dropout: default_dropout(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyModelConfig {
    #[serde(default)]
    pub vgg: Vgg19Spec,
    #[serde(default)]
    pub wdrb: WdrbSpec,
    #[serde(default)]
    pub lstm: LstmSpec,
    /// One set of VGG + WDRB weights for both frames of a pair.
    #[serde(default)]
    pub share_streams: bool,
}

impl AnomalyModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vgg.validate()?;
        self.wdrb.validate()?;
        if self.lstm.hidden == 0 || !(0.0..1.0).contains(&self.lstm.dropout) {
            return Err(Error::InvalidConfig("LSTM hidden must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn streams(&self) -> &'static [&'static str] {
        if self.share_streams {
            &["shared"]
        } else {
            &["stream_a", "stream_b"]
        }
    }

    /// Per-stream feature width after the WDRB.
    pub fn stream_features(&self) -> usize {
        self.wdrb.width(self.vgg.tap_channels())
    }

    /// Width of a concatenated `(t, t−1)` pair feature.
    pub fn pair_features(&self) -> usize {
        2 * self.stream_features()
    }
}

pub fn vgg_conv_name(stream: &str, block: usize, conv: usize) -> String {
    format!("vgg/{stream}/block{block}/conv{conv}")
}

/// Running batch-norm statistics, kept alongside parameters but never trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("/running_mean") || name.ends_with("/running_var")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyModel<T> {
    pub params: ParamStore<T>,
    pub config: AnomalyModelConfig,
    /// VGG weights came from a pretrained archive and are not updated.
    pub vgg_frozen: bool,
}

fn add_wdrb<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, spec: &WdrbSpec, cin: usize, rng: &mut R) {
    let w = spec.width(cin);
    for l in 0..spec.layers {
        let lp = format!("{prefix}/layer{}", l + 1);
        add_conv(store, &format!("{lp}/conv"), 3, cin + l * w, w, rng);
        store.insert(format!("{lp}/bn/gamma"), Tensor::full(&[w], T::one()));
        store.insert(format!("{lp}/bn/beta"), Tensor::zeros(&[w]));
        store.insert(format!("{lp}/bn/running_mean"), Tensor::zeros(&[w]));
        store.insert(format!("{lp}/bn/running_var"), Tensor::full(&[w], T::one()));
    }
    add_conv(store, &format!("{prefix}/proj"), 1, cin, w, rng);
}

/// Loads `vgg/block{b}/conv{l}/{weight,bias}` from `archive`, checking shapes.
pub fn load_pretrained_vgg<T: Scalar>(archive: &CheckpointArchive, spec: &Vgg19Spec) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (b, l, cin, cout) in spec.layers() {
        for (suffix, shape) in [("weight", vec![3, 3, cin, cout]), ("bias", vec![cout])] {
            let name = format!("vgg/block{b}/conv{l}/{suffix}");
            let entry = archive.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let found: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
            if found != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found,
                });
            }
            out.insert(name, entry.to_tensor());
        }
    }
    Ok(out)
}

/// Writes one stream's VGG weights under the stream-less pretrained names.
pub fn export_vgg<T: Scalar>(model: &AnomalyModel<T>, stream: &str) -> Result<CheckpointArchive> {
    let mut archive = CheckpointArchive::new();
    for (b, l, _, _) in model.config.vgg.layers() {
        for suffix in ["weight", "bias"] {
            let t = model.params.get(&format!("{}/{suffix}", vgg_conv_name(stream, b, l)))?;
            archive.push_tensor(&format!("vgg/block{b}/conv{l}/{suffix}"), t)?;
        }
    }
    Ok(archive)
}

/// Initialises all parameters from `rng`; VGG weights come from `pretrained`
/// when given (copied into every stream and frozen).
pub fn build_anomaly_model<T: Scalar, R: Rng + ?Sized>(
    config: &AnomalyModelConfig,
    rng: &mut R,
    pretrained: Option<&CheckpointArchive>,
) -> Result<AnomalyModel<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let loaded = pretrained.map(|a| load_pretrained_vgg::<T>(a, &config.vgg)).transpose()?;
    for stream in config.streams() {
        for (b, l, cin, cout) in config.vgg.layers() {
            let name = vgg_conv_name(stream, b, l);
            match &loaded {
                Some(src) => {
                    for suffix in ["weight", "bias"] {
                        let t = src.get(&format!("vgg/block{b}/conv{l}/{suffix}"))?.clone();
                        params.insert(format!("{name}/{suffix}"), t);
                    }
                }
                None => add_conv(&mut params, &name, 3, cin, cout, rng),
            }
        }
    }
    for stream in config.streams() {
        add_wdrb(&mut params, &format!("wdrb/{stream}"), &config.wdrb, config.vgg.tap_channels(), rng);
    }
    let (d, h) = (config.pair_features(), config.lstm.hidden);
    params.insert("lstm/w_x", glorot_uniform(&[d, 4 * h], d, 4 * h, rng));
    params.insert("lstm/w_h", glorot_uniform(&[h, 4 * h], h, 4 * h, rng));
    params.insert("lstm/bias", Tensor::zeros(&[4 * h]));
    params.insert("classifier/weight", glorot_uniform(&[h, NUM_CLASSES], h, NUM_CLASSES, rng));
    params.insert("classifier/bias", Tensor::zeros(&[NUM_CLASSES]));
    Ok(AnomalyModel {
        params,
        config: config.clone(),
        vgg_frozen: pretrained.is_some(),
    })
}

impl<T: Scalar> AnomalyModel<T> {
    pub fn is_trainable(&self, name: &str) -> bool {
        !is_buffer(name) && !(self.vgg_frozen && name.starts_with(VGG_PREFIX))
    }

    pub fn to_archive(&self) -> CheckpointArchive {
        let mut meta = BTreeMap::new();
        meta.insert(
            "anomaly_config".to_string(),
            serde_json::to_string(&self.config).expect("config serialises"),
        );
        meta.insert("vgg_frozen".to_string(), self.vgg_frozen.to_string());
        self.params.to_archive(meta)
    }

    pub fn from_archive(archive: &CheckpointArchive) -> Result<Self> {
        let cfg = archive
            .metadata
            .get("anomaly_config")
            .ok_or_else(|| Error::MalformedManifest("checkpoint lacks anomaly_config metadata".into()))?;
        let config: AnomalyModelConfig =
            serde_json::from_str(cfg).map_err(|e| Error::MalformedManifest(format!("anomaly_config: {e}")))?;
        config.validate()?;
        Ok(AnomalyModel {
            params: ParamStore::from_archive(archive, |_| true),
            config,
            vgg_frozen: archive.metadata.get("vgg_frozen").is_some_and(|v| v == "true"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running averages updated by the trainer.
    Train,
    /// Stored running statistics.
    Eval,
}

/// A training-mode batch norm node and the parameter prefix of its statistics.
pub type BnTap = (String, Var);

/// VGG stream up to the last conv of block 5.
pub fn vgg_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, spec: &Vgg19Spec, stream: &str, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 4 || !s[1].is_multiple_of(VGG_STRIDE) || !s[2].is_multiple_of(VGG_STRIDE) || s[1] == 0 || s[2] == 0 || s[3] != spec.input_channels {
        return Err(Error::Shape(format!(
            "VGG input {s:?} must be [N, H, W, {}] with H, W divisible by {VGG_STRIDE}",
            spec.input_channels
        )));
    }
    let mut h = x;
    for (b, block) in spec.blocks.iter().enumerate() {
        for l in 0..block.convs {
            h = conv_relu(g, p, &vgg_conv_name(stream, b + 1, l + 1), h)?;
        }
        if b + 1 < spec.blocks.len() {
            h = g.max_pool2(h)?;
        }
    }
    Ok(h)
}

/// WDRB over `[N, H, W, C]` features, returning `[N, widen·C]`.
pub fn wdrb_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    store: &ParamStore<T>,
    spec: &WdrbSpec,
    prefix: &str,
    x: Var,
    mode: BnMode,
    taps: &mut Vec<BnTap>,
) -> Result<Var> {
    let eps = T::of(spec.bn_eps);
    let mut feats = vec![x];
    let mut last = x;
    for l in 1..=spec.layers {
        let lp = format!("{prefix}/layer{l}");
        let input = if feats.len() == 1 { x } else { g.concat(&feats)? };
        let c = conv(g, p, &format!("{lp}/conv"), input)?;
        let gamma = p.var(&format!("{lp}/bn/gamma"))?;
        let beta = p.var(&format!("{lp}/bn/beta"))?;
        let bn = match mode {
            BnMode::Train => {
                let v = g.batch_norm_train(c, gamma, beta, eps)?;
                taps.push((format!("{lp}/bn"), v));
                v
            }
            BnMode::Eval => {
                let mean = store.get(&format!("{lp}/bn/running_mean"))?.data().to_vec();
                let var = store.get(&format!("{lp}/bn/running_var"))?.data().to_vec();
                g.batch_norm_eval(c, gamma, beta, &mean, &var, eps)?
            }
        };
        last = g.relu(bn);
        feats.push(last);
    }
    let skip = conv(g, p, &format!("{prefix}/proj"), x)?;
    let sum = g.add(last, skip)?;
    g.global_avg_pool(sum)
}

/// Pair features `[N, 2F]` for stacked current and previous frames.
#[allow(clippy::too_many_arguments)]
pub fn spatial_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    store: &ParamStore<T>,
    config: &AnomalyModelConfig,
    frames_t: Var,
    frames_tm1: Var,
    mode: BnMode,
    taps: &mut Vec<BnTap>,
) -> Result<Var> {
    let n = g.value(frames_t).shape()[0];
    if g.value(frames_t).shape() != g.value(frames_tm1).shape() {
        return Err(Error::Shape("frame pair shapes differ".into()));
    }
    let (fa, fb) = if config.share_streams {
        let both = g.stack_rows(&[frames_t, frames_tm1])?;
        let v = vgg_graph(g, p, &config.vgg, "shared", both)?;
        let w = wdrb_graph(g, p, store, &config.wdrb, "wdrb/shared", v, mode, taps)?;
        (g.rows(w, 0, n)?, g.rows(w, n, n)?)
    } else {
        let va = vgg_graph(g, p, &config.vgg, "stream_a", frames_t)?;
        let wa = wdrb_graph(g, p, store, &config.wdrb, "wdrb/stream_a", va, mode, taps)?;
        let vb = vgg_graph(g, p, &config.vgg, "stream_b", frames_tm1)?;
        let wb = wdrb_graph(g, p, store, &config.wdrb, "wdrb/stream_b", vb, mode, taps)?;
        (wa, wb)
    };
    g.concat(&[fa, fb])
}

/// One LSTM step; gates in `i, f, g, o` order along the last axis.
pub fn lstm_cell<T: Scalar>(g: &mut Graph<T>, p: &Bound, hidden: usize, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let wx = p.var("lstm/w_x")?;
    let wh = p.var("lstm/w_h")?;
    let b = p.var("lstm/bias")?;
    let zx = g.matmul(x, wx)?;
    let zh = g.matmul(h, wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, b)?;
    let gate = |g: &mut Graph<T>, k: usize| g.slice_last(z, k * hidden, hidden);
    let (zi, zf, zg, zo) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// Runs the LSTM over `xs` (each `[N, D]`) from a zero state; returns every hidden state.
pub fn lstm_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound,
    spec: &LstmSpec,
    xs: &[Var],
    mut dropout_rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    let n = match xs.first() {
        Some(&x) => g.value(x).shape()[0],
        None => return Err(Error::TooFewFrames(0)),
    };
    let mut h = g.input(Tensor::zeros(&[n, spec.hidden]));
    let mut c = g.input(Tensor::zeros(&[n, spec.hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let x = match dropout_rng.as_deref_mut() {
            Some(rng) if spec.dropout > 0.0 => {
                let keep = T::of(1.0 / (1.0 - spec.dropout));
                let mask = (0..g.value(x).len())
                    .map(|_| if rng.gen::<f64>() < spec.dropout { T::zero() } else { keep })
                    .collect();
                g.mask_mul(x, mask)?
            }
            _ => x,
        };
        (h, c) = lstm_cell(g, p, spec.hidden, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Number of real frames; the mask must be a contiguous valid prefix.
pub fn valid_prefix(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&v| v).count();
    if mask[n..].iter().any(|&v| v) {
        return Err(Error::Shape("validity mask is not a contiguous prefix".into()));
    }
    Ok(n)
}

struct ClipGraph {
    logits: Vec<Var>,
    step_logits: Vec<Vec<Var>>,
    taps: Vec<BnTap>,
}

fn clips_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound,
    model: &AnomalyModel<T>,
    clips: &[&FrameSequence<T>],
    mode: BnMode,
    dropout_rng: Option<&mut R>,
    with_steps: bool,
) -> Result<ClipGraph> {
    let mut cur = Vec::new();
    let mut prev = Vec::new();
    let mut lens = Vec::with_capacity(clips.len());
    for clip in clips {
        let n = valid_prefix(&clip.valid)?;
        if n < 2 {
            return Err(Error::TooFewFrames(n));
        }
        cur.push(clip.frames.rows(1, n - 1)?);
        prev.push(clip.frames.rows(0, n - 1)?);
        lens.push(n - 1);
    }
    let ft = g.input(Tensor::stack_rows(&cur)?);
    let ftm1 = g.input(Tensor::stack_rows(&prev)?);
    let mut taps = Vec::new();
    let pairs = spatial_graph(g, p, &model.params, &model.config, ft, ftm1, mode, &mut taps)?;

    let mut rng = dropout_rng;
    let mut logits = Vec::with_capacity(clips.len());
    let mut step_logits = Vec::new();
    let mut offset = 0;
    for &len in &lens {
        let xs = (0..len).map(|t| g.rows(pairs, offset + t, 1)).collect::<Result<Vec<_>>>()?;
        offset += len;
        let hs = lstm_graph(g, p, &model.config.lstm, &xs, rng.as_deref_mut())?;
        if with_steps {
            step_logits.push(hs.iter().map(|&h| linear(g, p, "classifier", h)).collect::<Result<Vec<_>>>()?);
        }
        logits.push(linear(g, p, "classifier", *hs.last().expect("len ≥ 1"))?);
    }
    Ok(ClipGraph {
        logits,
        step_logits,
        taps,
    })
}

/// Pair feature (`2F`) for one `(t, t−1)` frame pair, inference mode.
pub fn spatial_forward<T: Scalar>(model: &AnomalyModel<T>, frame_t: &Tensor<T>, frame_tm1: &Tensor<T>) -> Result<Tensor<T>> {
    if frame_t.rank() != 3 {
        return Err(Error::Shape(format!("frame {:?} must be [H, W, C]", frame_t.shape())));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, |_| false);
    let a = g.input(frame_t.clone().unsqueeze0());
    let b = g.input(frame_tm1.clone().unsqueeze0());
    let out = spatial_graph(&mut g, &bound, &model.params, &model.config, a, b, BnMode::Eval, &mut Vec::new())?;
    g.value(out).clone().reshape(&[model.config.pair_features()])
}

/// Last valid hidden state for pair features `[T−1, 2F]` and a length-`T`
/// frame mask; padded steps are never visited.
pub fn temporal_forward<T: Scalar>(model: &AnomalyModel<T>, pair_features: &Tensor<T>, frame_valid: &[bool]) -> Result<Tensor<T>> {
    let n = valid_prefix(frame_valid)?;
    if n < 2 {
        return Err(Error::TooFewFrames(n));
    }
    let s = pair_features.shape();
    if s.len() != 2 || s[0] < n - 1 || s[1] != model.config.pair_features() {
        return Err(Error::Shape(format!(
            "pair features {s:?} for {n} valid frames of width {}",
            model.config.pair_features()
        )));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, |_| false);
    let xs: Vec<Var> = (0..n - 1)
        .map(|t| Ok(g.input(pair_features.rows(t, 1)?)))
        .collect::<Result<_>>()?;
    let hs = lstm_graph::<T, rand::rngs::mock::StepRng>(&mut g, &bound, &model.config.lstm, &xs, None)?;
    g.value(*hs.last().expect("n ≥ 2")).clone().reshape(&[model.config.lstm.hidden])
}

/// Softmax over the classifier's affine output: `[p(non-violent), p(violent)]`.
pub fn classify<T: Scalar>(model: &AnomalyModel<T>, hidden: &Tensor<T>) -> Result<[f64; 2]> {
    let w = model.params.get("classifier/weight")?;
    let b = model.params.get("classifier/bias")?;
    let h = model.config.lstm.hidden;
    if hidden.len() != h {
        return Err(Error::Shape(format!("hidden state of length {} for {h} units", hidden.len())));
    }
    let mut z = [b.data()[0].as_f64(), b.data()[1].as_f64()];
    for (k, hv) in hidden.data().iter().enumerate() {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj += hv.as_f64() * w.data()[k * NUM_CLASSES + j].as_f64();
        }
    }
    let p = softmax_rows(&z, NUM_CLASSES);
    Ok([p[0], p[1]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub probabilities: [f64; 2],
    /// Violent-class probability after each valid step.
    pub step_scores: Vec<f64>,
}

/// Inference on one clip with dropout off and running BN statistics.
pub fn predict_clip<T: Scalar>(model: &AnomalyModel<T>, clip: &FrameSequence<T>) -> Result<ClipPrediction> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, |_| false);
    let cg = clips_graph::<T, rand::rngs::mock::StepRng>(&mut g, &bound, model, &[clip], BnMode::Eval, None, true)?;
    let probs = |v: Var| {
        let z: Vec<f64> = g.value(v).data().iter().map(|x| x.as_f64()).collect();
        softmax_rows(&z, NUM_CLASSES)
    };
    let p = probs(cg.logits[0]);
    Ok(ClipPrediction {
        probabilities: [p[0], p[1]],
        step_scores: cg.step_logits[0].iter().map(|&v| probs(v)[1]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_clip_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Stops after this many optimiser steps, mid-epoch if needed.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Per-clip frame augmentation applied to training batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentSpec>,
}

fn default_epochs() -> usize {
    50
}
fn default_clip_batch() -> usize {
    8
}

impl Default for AnomalyTrainConfig {
    fn default() -> Self {
        AnomalyTrainConfig {
            epochs: default_epochs(),
            batch_size: default_clip_batch(),
            optimizer: AdamConfig::default(),
            max_steps: None,
            augment: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl AnomalyLog {
    /// `epoch,loss,acc` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,acc\n");
        for r in &self.epochs {
            writeln!(s, "{},{},{}", r.epoch, r.loss, r.accuracy).expect("write to string");
        }
        s
    }
}

/// Updates running statistics from the batch statistics of a training pass.
fn update_running_stats<T: Scalar>(g: &Graph<T>, taps: &[BnTap], store: &mut ParamStore<T>, momentum: f64) -> Result<()> {
    let m = T::of(momentum);
    for (prefix, v) in taps {
        let (mean, var) = g.batch_stats(*v).ok_or_else(|| Error::Shape("tap is not a batch norm".into()))?;
        let count = g.value(*v).len() / mean.len().max(1);
        let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
        let rm = store.get_mut(&format!("{prefix}/running_mean"))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = store.get_mut(&format!("{prefix}/running_var"))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
    Ok(())
}

/// Applies one randomly drawn augmentation to every real frame of a clip.
pub fn augment_clip<T: Scalar, R: Rng + ?Sized>(clip: &FrameSequence<T>, spec: &AugmentSpec, rng: &mut R) -> Result<FrameSequence<T>> {
    let n = valid_prefix(&clip.valid)?;
    let draw = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut out = clip.clone();
    let per = clip.frames.len() / clip.valid.len().max(1);
    for t in 0..n {
        let frame = augment_frame(&clip.frame(t)?, spec, &mut draw.clone())?;
        out.frames.data_mut()[t * per..(t + 1) * per].copy_from_slice(frame.data());
    }
    Ok(out)
}

/// Clip-level cross-entropy training with Adam; one record per epoch.
pub fn train_anomaly<T: Scalar, R: Rng + ?Sized>(
    mut model: AnomalyModel<T>,
    dataset: &ClipDatasetArrays<T>,
    config: &AnomalyTrainConfig,
    rng: &mut R,
) -> Result<(AnomalyModel<T>, AnomalyLog)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.optimizer.lr >= 0.0) {
        return Err(Error::InvalidConfig("epochs and batch_size must be positive, lr non-negative".into()));
    }
    let clips = (0..dataset.len()).map(|i| dataset.clip(i)).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(config.optimizer.clone());
    let mut log = AnomalyLog::default();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for batch in order.chunks(config.batch_size) {
            if log.steps >= max_steps {
                break;
            }
            let augmented = match &config.augment {
                Some(spec) => Some(
                    batch
                        .iter()
                        .map(|&i| augment_clip(&clips[i], spec, &mut *rng))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let members: Vec<&FrameSequence<T>> = match &augmented {
                Some(a) => a.iter().collect(),
                None => batch.iter().map(|&i| &clips[i]).collect(),
            };
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.y[i] as usize).collect();

            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, |n| model.is_trainable(n));
            let cg = clips_graph(&mut g, &bound, &model, &members, BnMode::Train, Some(&mut *rng), false)?;
            let logits = g.stack_rows(&cg.logits)?;
            let loss_var = g.softmax_cross_entropy(logits, &labels)?;
            let loss = g.value(loss_var).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: log.steps, value: loss });
            }
            let z = g.value(logits).data();
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(k, &l)| (z[k * 2 + 1] > z[k * 2]) as usize == l)
                .count();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();

            let mut grads = g.backward_scalar(loss_var)?;
            let named = bound.gradients(&mut grads);
            adam.step(&mut model.params, &named)?;
            update_running_stats(&g, &cg.taps, &mut model.params, model.config.wdrb.bn_momentum)?;
            log.steps += 1;
        }
        if seen > 0 {
            log.epochs.push(EpochRecord {
                epoch,
                loss: loss_sum / seen as f64,
                accuracy: correct as f64 / seen as f64,
            });
        }
        if log.steps >= max_steps {
            break 'epochs;
        }
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub scores: PrecisionRecall,
    pub predictions: Vec<ClipPrediction>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        EvalReport {
            confusion,
            scores: precision_recall_f1(&confusion),
            predictions: Vec::new(),
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    /// `{confusion: [[tn, fp], [fn, tp]], precision, recall, f1}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "confusion": self.confusion.as_rows(),
            "precision": self.scores.precision,
            "recall": self.scores.recall,
            "f1": self.scores.f1,
        })
    }
}

/// Thresholds the violent-class probability at 0.5.
pub fn evaluate_anomaly<T: Scalar>(model: &AnomalyModel<T>, dataset: &ClipDatasetArrays<T>) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let pred = predict_clip(model, &dataset.clip(i)?)?;
        cm.record(pred.probabilities[1] >= 0.5, dataset.y[i] == 1);
        predictions.push(pred);
    }
    Ok(EvalReport {
        predictions,
        ..EvalReport::from_confusion(cm)
    })
}

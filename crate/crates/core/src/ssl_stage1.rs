//! Stage 1: self-supervised rotation pretext training of the FEN.
//!
//! Crops are rotated by a random quarter turn and the network (FEN, two
//! VGG-style blocks, global average pooling, affine layer) predicts which.
//! Labels come from the rotation itself; annotations are never read.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{crop_random, make_rotation_example, EpochSampler, RotationLabel};
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::mcnn_fen::{build_fen, fen_graph, FenConfig};
use crate::metrics::rotation_accuracy;
use crate::optim::{Adam, AdamConfig};
use crate::params::{add_conv, conv_relu, glorot_uniform, linear, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ROT_HEAD_PREFIX: &str = "rot_head/";
pub const NUM_ROTATIONS: usize = 4;

/// Two VGG-style blocks (2 × conv3×3 + ReLU, then 2×2 max pool) with the
/// given widths, followed by global average pooling and a 4-way affine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationHeadConfig {
    pub widths: Vec<usize>,
}

impl Default for RotationHeadConfig {
    fn default() -> Self {
        RotationHeadConfig { widths: vec![64, 128] }
    }
}

impl RotationHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("rotation head needs two positive block widths".into()));
        }
        Ok(())
    }
}

pub fn build_rotation_head<T: Scalar, R: Rng + ?Sized>(
    in_channels: usize,
    config: &RotationHeadConfig,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut cin = in_channels;
    for (b, &w) in config.widths.iter().enumerate() {
        for l in 1..=2 {
            add_conv(&mut store, &format!("rot_head/block{}/conv{l}", b + 1), 3, cin, w, rng);
            cin = w;
        }
    }
    store.insert("rot_head/fc/weight", glorot_uniform(&[cin, NUM_ROTATIONS], cin, NUM_ROTATIONS, rng));
    store.insert("rot_head/fc/bias", Tensor::zeros(&[NUM_ROTATIONS]));
    Ok(store)
}

/// FEN + rotation head, initialised from one generator (FEN first).
pub fn build_stage1_model<T: Scalar, R: Rng + ?Sized>(
    fen: &FenConfig,
    head: &RotationHeadConfig,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    let mut p = build_fen(fen, rng)?;
    p.extend(build_rotation_head(fen.out_channels(), head, rng)?);
    Ok(p)
}

pub fn rotation_head_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, config: &RotationHeadConfig, features: Var) -> Result<Var> {
    let mut h = features;
    for b in 1..=config.widths.len() {
        for l in 1..=2 {
            h = conv_relu(g, p, &format!("rot_head/block{b}/conv{l}"), h)?;
        }
        h = g.max_pool2(h)?;
    }
    let pooled = g.global_avg_pool(h)?;
    linear(g, p, "rot_head/fc", pooled)
}

/// Logits `[B, 4]` for a `[B, S, S, C]` batch of crops.
pub fn stage1_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    fen: &FenConfig,
    head: &RotationHeadConfig,
    x: Var,
) -> Result<Var> {
    let f = fen_graph(g, p, fen, x)?;
    rotation_head_graph(g, p, head, f)
}

pub fn stage1_forward<T: Scalar>(
    params: &ParamStore<T>,
    fen: &FenConfig,
    head: &RotationHeadConfig,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::Shape(format!("stage-1 input {s:?} must be [B, S, S, C]")));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let x = g.input(batch.clone());
    let out = stage1_graph(&mut g, &bound, fen, head, x)?;
    Ok(g.value(out).clone())
}

/// Mean `−log softmax(logits)[label]` in nats, max-subtracted.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[RotationLabel]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != NUM_ROTATIONS || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "cross entropy logits {s:?} with {} labels",
            labels.len()
        )));
    }
    let total: f64 = logits
        .data()
        .chunks(NUM_ROTATIONS)
        .zip(labels)
        .map(|(row, l)| {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            log_sum_exp(&row) - row[l.index()]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

fn default_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    32
}
fn default_crop() -> usize {
    112
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: default_steps(),
            batch_size: default_batch(),
            crop_size: default_crop(),
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub rotation_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// `step,loss,rot_acc` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,rot_acc\n");
        for r in &self.records {
            writeln!(s, "{},{},{}", r.step, r.loss, r.rotation_accuracy).expect("write to string");
        }
        s
    }
}

/// Crops, their rotated versions and the generated labels.
pub struct RotationBatch<T> {
    pub crops: Vec<Tensor<T>>,
    pub inputs: Tensor<T>,
    pub labels: Vec<RotationLabel>,
}

/// One crop and one random quarter turn per listed image.
pub fn sample_rotation_batch<T: Scalar, R: Rng + ?Sized>(
    images: &[Tensor<T>],
    indices: &[usize],
    crop_size: usize,
    rng: &mut R,
) -> Result<RotationBatch<T>> {
    let mut crops = Vec::with_capacity(indices.len());
    let mut rotated = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let crop = crop_random(&images[i], crop_size, rng)?;
        let (img, label) = make_rotation_example(&crop, rng)?;
        crops.push(crop);
        rotated.push(img.unsqueeze0());
        labels.push(label);
    }
    Ok(RotationBatch {
        crops,
        inputs: Tensor::stack_rows(&rotated)?,
        labels,
    })
}

/// Stepwise Stage-1 optimiser; [`train_stage1`] drives it for `steps` steps.
pub struct Stage1Trainer<'a, T> {
    pub params: ParamStore<T>,
    fen: FenConfig,
    head: RotationHeadConfig,
    config: Stage1Config,
    adam: Adam<T>,
    images: &'a [Tensor<T>],
    sampler: EpochSampler,
}

impl<'a, T: Scalar> Stage1Trainer<'a, T> {
    pub fn new(
        params: ParamStore<T>,
        images: &'a [Tensor<T>],
        fen: FenConfig,
        head: RotationHeadConfig,
        config: Stage1Config,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
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
        Ok(Stage1Trainer {
            params,
            fen,
            head,
            config,
            adam,
            images,
            sampler: EpochSampler::new(images.len()),
        })
    }

    pub fn step<R: Rng + ?Sized>(&mut self, step: usize, rng: &mut R) -> Result<StepRecord> {
        let idx = self.sampler.next_batch(self.config.batch_size, rng);
        let batch = sample_rotation_batch(self.images, &idx, self.config.crop_size, rng)?;
        let labels: Vec<usize> = batch.labels.iter().map(|l| l.index()).collect();

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| true);
        let x = g.input(batch.inputs);
        let logits = stage1_graph(&mut g, &bound, &self.fen, &self.head, x)?;
        let loss_var = g.softmax_cross_entropy(logits, &labels)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        let predicted = argmax_rows(g.value(logits));
        let acc = rotation_accuracy(&predicted, &labels)?;
        let mut grads = g.backward_scalar(loss_var)?;
        let named = bound.gradients(&mut grads);
        self.adam.step(&mut self.params, &named)?;
        Ok(StepRecord {
            step,
            loss,
            rotation_accuracy: acc,
        })
    }
}

/// Initialises FEN + head from `rng` and trains on generated rotation labels.
pub fn train_stage1<T: Scalar, R: Rng + ?Sized>(
    images: &[Tensor<T>],
    fen: &FenConfig,
    head: &RotationHeadConfig,
    config: &Stage1Config,
    rng: &mut R,
) -> Result<(ParamStore<T>, TrainLog)> {
    let params = build_stage1_model(fen, head, rng)?;
    train_stage1_from(params, images, fen, head, config, rng)
}

/// Continues Stage-1 training from existing parameters.
pub fn train_stage1_from<T: Scalar, R: Rng + ?Sized>(
    params: ParamStore<T>,
    images: &[Tensor<T>],
    fen: &FenConfig,
    head: &RotationHeadConfig,
    config: &Stage1Config,
    rng: &mut R,
) -> Result<(ParamStore<T>, TrainLog)> {
    let mut trainer = Stage1Trainer::new(params, images, fen.clone(), head.clone(), config.clone())?;
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        log.records.push(trainer.step(step, rng)?);
    }
    Ok((trainer.params, log))
}

/// Accuracy of the current model over pre-rotated examples.
pub fn evaluate_rotation<T: Scalar>(
    params: &ParamStore<T>,
    fen: &FenConfig,
    head: &RotationHeadConfig,
    inputs: &[Tensor<T>],
    labels: &[RotationLabel],
    batch_size: usize,
) -> Result<f64> {
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch(inputs.len(), labels.len()));
    }
    let mut predicted = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let batch: Vec<Tensor<T>> = chunk.iter().map(|t| t.clone().unsqueeze0()).collect();
        let logits = stage1_forward(params, fen, head, &Tensor::stack_rows(&batch)?)?;
        predicted.extend(argmax_rows(&logits));
    }
    let truth: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    rotation_accuracy(&predicted, &truth)
}

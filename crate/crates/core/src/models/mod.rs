//! Task definitions, the VGG11-pattern network, training and prediction.

pub mod nn;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::r_squared;
use crate::labels::TileLabels;
use crate::rng;
use nn::{Adam, LayerSpec, Network, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    #[serde(rename = "access_3class")]
    Access3class,
    PctElecBinary,
    CountElecReg,
    PctResBinary,
    CountResReg,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Access3class,
        TaskId::PctElecBinary,
        TaskId::CountElecReg,
        TaskId::PctResBinary,
        TaskId::CountResReg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Access3class => "access_3class",
            TaskId::PctElecBinary => "pct_elec_binary",
            TaskId::CountElecReg => "count_elec_reg",
            TaskId::PctResBinary => "pct_res_binary",
            TaskId::CountResReg => "count_res_reg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn arity(&self) -> usize {
        match self {
            TaskId::Access3class => 3,
            TaskId::PctElecBinary | TaskId::PctResBinary => 2,
            TaskId::CountElecReg | TaskId::CountResReg => 1,
        }
    }

    pub fn is_regression(&self) -> bool {
        self.arity() == 1
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        match self {
            TaskId::Access3class => &["no_building", "unelectrified", "electrified"],
            TaskId::PctElecBinary | TaskId::PctResBinary => &["low", "high"],
            _ => &[],
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Count(f64),
}

/// A task together with its tile eligibility rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Regression tasks only use tiles with at least this many structures.
    pub regression_min_structures: u32,
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        TaskSpec {
            id,
            regression_min_structures: 1,
        }
    }

    pub fn is_eligible(&self, l: &TileLabels) -> bool {
        match self.id {
            TaskId::Access3class => true,
            TaskId::PctElecBinary | TaskId::PctResBinary => l.n_elec >= 1,
            TaskId::CountElecReg | TaskId::CountResReg => l.n_total >= self.regression_min_structures,
        }
    }

    /// Target for an eligible tile, `None` otherwise.
    pub fn target(&self, l: &TileLabels) -> Option<Target> {
        if !self.is_eligible(l) {
            return None;
        }
        Some(match self.id {
            TaskId::Access3class => Target::Class(l.access_class.index()),
            TaskId::PctElecBinary => Target::Class(l.pct_class_b?.index()),
            TaskId::PctResBinary => Target::Class(l.pct_class_c?.index()),
            TaskId::CountElecReg => Target::Count(l.n_elec as f64),
            TaskId::CountResReg => Target::Count(l.n_elec_res as f64),
        })
    }
}

/// Convolution widths of the VGG11 feature stack; 0 marks a max pool.
pub const VGG11: [usize; 13] = [64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0];

pub const LR_RANGE: (f64, f64) = (1e-8, 1e-4);
pub const BATCH_RANGE: (u32, u32) = (16, 32);
pub const EPOCH_RANGE: (u32, u32) = (50, 100);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    /// Channel widths are the VGG11 widths divided by this.
    pub width_divisor: u32,
    pub input_px: u32,
    /// Stride of the prepended 3x3 input adapter.
    pub adapter_stride: u32,
    /// Output side of the adaptive average pool before the dense head.
    pub head_pool: u32,
    /// Hidden width of the dense head; defaults to 4096 / width_divisor.
    pub head_hidden: Option<u32>,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub weight_decay: f64,
    pub class_weighting: bool,
    /// Caps each class at this multiple of the rarest class (training only).
    pub max_class_ratio: Option<f64>,
    /// Random flips and quarter turns of training tiles.
    pub augment: bool,
    pub grad_clip: Option<f64>,
    /// Parameter blob to start from instead of random initialisation.
    pub init_weights: Option<PathBuf>,
    /// Permit hyperparameters outside the reference ranges.
    pub allow_out_of_range: bool,
    pub regression_min_structures: u32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: "vgg11".into(),
            width_divisor: 8,
            input_px: 500,
            adapter_stride: 2,
            head_pool: 1,
            head_hidden: None,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            weight_decay: 0.0,
            class_weighting: true,
            max_class_ratio: None,
            augment: true,
            grad_clip: Some(5.0),
            init_weights: None,
            allow_out_of_range: false,
            regression_min_structures: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone != "vgg11" {
            return Err(Error::Config(format!("unknown backbone `{}`", self.backbone)));
        }
        if self.width_divisor == 0 || self.batch_size == 0 || self.epochs == 0 || self.head_pool == 0 {
            return Err(Error::Config(
                "width_divisor, batch_size, epochs and head_pool must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !self.allow_out_of_range {
            let mut bad = Vec::new();
            if !(LR_RANGE.0..=LR_RANGE.1).contains(&self.learning_rate) {
                bad.push(format!("learning_rate {} not in [1e-8, 1e-4]", self.learning_rate));
            }
            if !(BATCH_RANGE.0..=BATCH_RANGE.1).contains(&self.batch_size) {
                bad.push(format!("batch_size {} not in 16..=32", self.batch_size));
            }
            if !(EPOCH_RANGE.0..=EPOCH_RANGE.1).contains(&self.epochs) {
                bad.push(format!("epochs {} not in 50..=100", self.epochs));
            }
            if !bad.is_empty() {
                return Err(Error::Config(format!(
                    "{} (set allow_out_of_range = true to override)",
                    bad.join("; ")
                )));
            }
        }
        Ok(())
    }

    pub fn layer_specs(&self, arity: usize) -> Vec<LayerSpec> {
        let d = self.width_divisor as usize;
        let mut v = vec![
            LayerSpec::Conv {
                cout: 3,
                stride: self.adapter_stride.max(1) as usize,
            },
            LayerSpec::Relu,
        ];
        for &w in &VGG11 {
            if w == 0 {
                v.push(LayerSpec::MaxPool);
            } else {
                v.push(LayerSpec::Conv {
                    cout: (w / d).max(1),
                    stride: 1,
                });
                v.push(LayerSpec::Relu);
            }
        }
        let hidden = self.head_hidden.map_or((4096 / d).max(1), |h| h as usize);
        v.extend([
            LayerSpec::AvgPool {
                out: self.head_pool as usize,
            },
            LayerSpec::Linear { nout: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { nout: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { nout: arity },
        ]);
        v
    }
}

/// Builds an initialised, untrained network for a task.
pub fn build_model(task: TaskId, config: &ModelConfig) -> Result<Network> {
    config.validate()?;
    let px = config.input_px as usize;
    let input = Shape { c: 3, h: px, w: px };
    let mut net = Network::new(input, &config.layer_specs(task.arity()))?;
    match &config.init_weights {
        Some(path) => {
            let params = read_blob(path)?;
            if params.len() != net.n_params() {
                return Err(Error::shape(
                    format!("{} parameters", net.n_params()),
                    format!("{} in {}", params.len(), path.display()),
                ));
            }
            net.params = params;
        }
        None => net.init(&mut rng::stream(config.seed, &[rng::str_key("init")])),
    }
    Ok(net)
}

/// Per-channel mean and standard deviation in 0..255 units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit<T: AsRef<[u8]>>(images: &[T]) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0u64;
        for img in images {
            for px in img.as_ref().chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mut out = Self::identity();
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            out.mean[c] = m as f32;
            out.std[c] = var.sqrt().max(1.0) as f32;
        }
        out
    }
}

/// Converts interleaved RGB to normalised CHW, applying one of the eight
/// dihedral transforms (0 = identity).
fn to_chw(img: &[u8], px: usize, norm: &Normalization, transform: u8) -> Vec<f32> {
    let mut out = vec![0f32; 3 * px * px];
    let n = px - 1;
    for y in 0..px {
        for x in 0..px {
            let (sy, sx) = match transform & 7 {
                0 => (y, x),
                1 => (y, n - x),
                2 => (n - y, x),
                3 => (n - y, n - x),
                4 => (x, y),
                5 => (x, n - y),
                6 => (n - x, y),
                _ => (n - x, n - y),
            };
            let s = 3 * (sy * px + sx);
            for c in 0..3 {
                out[(c * px + y) * px + x] = (img[s + c] as f32 - norm.mean[c]) / norm.std[c];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_loss: Option<f64>,
    /// Accuracy for classification, R² of count estimates for regression.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub task: TaskId,
    pub config: ModelConfig,
    pub net: Network,
    pub norm: Normalization,
    pub history: Vec<EpochStats>,
    pub best_epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class { class: usize, probs: Vec<f64> },
    Count { estimate: f64, raw: f64 },
}

impl Prediction {
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Class { class, .. } => Some(*class),
            _ => None,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Prediction::Class { class, .. } => *class as f64,
            Prediction::Count { estimate, .. } => *estimate,
        }
    }
}

pub fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Turns raw head outputs into a prediction; counts are `expm1` of the head
/// output, clamped at zero.
pub fn interpret(task: TaskId, out: &[f32]) -> Prediction {
    if task.is_regression() {
        let raw = out[0] as f64;
        Prediction::Count {
            estimate: raw.exp_m1().max(0.0),
            raw,
        }
    } else {
        let probs = softmax(out);
        Prediction::Class {
            class: argmax(&probs),
            probs,
        }
    }
}

fn check_images<T: AsRef<[u8]>>(images: &[T], px: u32) -> Result<()> {
    let want = 3 * px as usize * px as usize;
    for (i, img) in images.iter().enumerate() {
        if img.as_ref().len() != want {
            return Err(Error::shape(
                format!("{px}x{px}x3 tile"),
                format!("{} bytes for tile {i}", img.as_ref().len()),
            ));
        }
    }
    Ok(())
}

fn forward_raw(net: &Network, norm: &Normalization, px: usize, img: &[u8]) -> Result<Vec<f32>> {
    net.forward(&to_chw(img, px, norm, 0))
}

pub fn predict<T: AsRef<[u8]> + Sync>(model: &TrainedModel, images: &[T]) -> Result<Vec<Prediction>> {
    check_images(images, model.config.input_px)?;
    let px = model.config.input_px as usize;
    images
        .par_iter()
        .map(|img| {
            let out = forward_raw(&model.net, &model.norm, px, img.as_ref())?;
            Ok(interpret(model.task, &out))
        })
        .collect()
}

fn target_value(task: TaskId, t: Target) -> Result<f32> {
    match (task.is_regression(), t) {
        (true, Target::Count(c)) if c >= 0.0 => Ok(c.ln_1p() as f32),
        (false, Target::Class(k)) if k < task.arity() => Ok(k as f32),
        _ => Err(Error::Input(format!("target {t:?} does not fit task {task}"))),
    }
}

fn class_weights(task: TaskId, targets: &[Target], enabled: bool) -> Vec<f32> {
    let k = task.arity();
    if task.is_regression() || !enabled {
        return vec![1.0; k];
    }
    let mut n = vec![0usize; k];
    for t in targets {
        if let Target::Class(c) = t {
            n[*c] += 1;
        }
    }
    let present = n.iter().filter(|&&c| c > 0).count().max(1);
    let total: usize = n.iter().sum();
    n.iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (total as f64 / (present * c) as f64) as f32
            }
        })
        .collect()
}

/// Loss and output gradient for one sample.
fn loss_and_grad(task: TaskId, out: &[f32], target: f32, weights: &[f32]) -> (f64, Vec<f32>) {
    if task.is_regression() {
        let d = out[0] - target;
        ((d * d) as f64, vec![2.0 * d])
    } else {
        let k = target as usize;
        let p = softmax(out);
        let w = weights[k];
        let loss = -(w as f64) * p[k].max(1e-300).ln();
        let g = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| w * (pi as f32 - if i == k { 1.0 } else { 0.0 }))
            .collect();
        (loss, g)
    }
}

/// Accuracy or count R² of predictions against targets.
fn metric(task: TaskId, preds: &[Prediction], targets: &[Target]) -> f64 {
    if task.is_regression() {
        let p: Vec<f64> = preds.iter().map(Prediction::value).collect();
        let t: Vec<f64> = targets
            .iter()
            .map(|t| match t {
                Target::Count(c) => *c,
                Target::Class(c) => *c as f64,
            })
            .collect();
        r_squared(&p, &t).unwrap_or(f64::NEG_INFINITY)
    } else {
        let correct = preds
            .iter()
            .zip(targets)
            .filter(|(p, t)| matches!(t, Target::Class(c) if p.class() == Some(*c)))
            .count();
        correct as f64 / targets.len().max(1) as f64
    }
}

fn balanced_subset(task: TaskId, targets: &[Target], ratio: Option<f64>, seed: u64) -> Vec<usize> {
    let all: Vec<usize> = (0..targets.len()).collect();
    let Some(ratio) = ratio.filter(|_| !task.is_regression()) else {
        return all;
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); task.arity()];
    for (i, t) in targets.iter().enumerate() {
        if let Target::Class(c) = t {
            by_class[*c].push(i);
        }
    }
    let rarest = by_class.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
    let cap = ((rarest as f64 * ratio).ceil() as usize).max(1);
    let mut keep = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng::stream(seed, &[rng::str_key("downsample"), c as u64]));
        keep.extend(idx.iter().take(cap));
    }
    keep.sort_unstable();
    keep
}

/// Trains one model; returns the weights of the best validation epoch.
pub fn train<T: AsRef<[u8]> + Sync>(
    task: TaskId,
    config: &ModelConfig,
    train_images: &[T],
    train_targets: &[Target],
    val_images: &[T],
    val_targets: &[Target],
) -> Result<TrainedModel> {
    config.validate()?;
    if train_images.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if train_images.len() != train_targets.len() || val_images.len() != val_targets.len() {
        return Err(Error::shape("one target per image", "mismatched lengths"));
    }
    check_images(train_images, config.input_px)?;
    check_images(val_images, config.input_px)?;
    let tv: Vec<f32> = train_targets
        .iter()
        .map(|&t| target_value(task, t))
        .collect::<Result<_>>()?;
    for &t in val_targets {
        target_value(task, t)?;
    }

    let px = config.input_px as usize;
    let norm = Normalization::fit(train_images);
    let mut net = build_model(task, config)?;
    if task.is_regression() && config.init_weights.is_none() {
        net.output_bias_mut()[0] = tv.iter().sum::<f32>() / tv.len() as f32;
    }
    let weights = class_weights(task, train_targets, config.class_weighting);
    let pool = balanced_subset(task, train_targets, config.max_class_ratio, config.seed);
    let mut adam = Adam::new(net.n_params(), config.learning_rate, config.weight_decay);
    let mut grads = vec![0f32; net.n_params()];

    let provisional = TrainedModel {
        task,
        config: config.clone(),
        net: net.clone(),
        norm,
        history: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, u32, Vec<f32>)> = None;
    let mut history = Vec::with_capacity(config.epochs as usize);
    let bs = config.batch_size as usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order = pool.clone();
        let mut er = rng::stream(config.seed, &[rng::str_key("epoch"), epoch as u64]);
        order.shuffle(&mut er);
        let mut loss_sum = 0.0;
        let mut epoch_preds = Vec::with_capacity(order.len());
        let mut epoch_targets = Vec::with_capacity(order.len());
        for batch in order.chunks(bs) {
            grads.fill(0.0);
            for &i in batch {
                let t = if config.augment { er.random_range(0..8u8) } else { 0 };
                let x = to_chw(train_images[i].as_ref(), px, &norm, t);
                let (out, loss) = net.forward_backward(&x, &mut grads, |out| {
                    loss_and_grad(task, out, tv[i], &weights)
                })?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss {loss} at epoch {epoch} on training sample {i}; \
                         lower learning_rate or check inputs"
                    )));
                }
                loss_sum += loss;
                epoch_preds.push(interpret(task, &out));
                epoch_targets.push(train_targets[i]);
            }
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            if let Some(clip) = config.grad_clip {
                let norm2: f64 = grads.iter().map(|&g| (g as f64) * (g as f64)).sum();
                let n = norm2.sqrt();
                if !n.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient at epoch {epoch}")));
                }
                if n > clip {
                    let s = (clip / n) as f32;
                    grads.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut net.params, &grads);
        }
        let train_loss = loss_sum / order.len() as f64;
        let train_metric = metric(task, &epoch_preds, &epoch_targets);

        let (val_loss, val_metric) = if val_images.is_empty() {
            (None, None)
        } else {
            let snapshot = TrainedModel {
                net: net.clone(),
                ..provisional.clone()
            };
            let outs: Vec<Vec<f32>> = val_images
                .par_iter()
                .map(|img| forward_raw(&snapshot.net, &norm, px, img.as_ref()))
                .collect::<Result<_>>()?;
            let mut vl = 0.0;
            let mut preds = Vec::with_capacity(outs.len());
            for (o, &t) in outs.iter().zip(val_targets) {
                vl += loss_and_grad(task, o, target_value(task, t)?, &weights).0;
                preds.push(interpret(task, o));
            }
            (
                Some(vl / outs.len() as f64),
                Some(metric(task, &preds, val_targets)),
            )
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            train_metric,
            val_loss,
            val_metric,
        };
        log::info!(
            "{task} epoch {epoch}/{}: train loss {:.4} metric {:.4}, val loss {} metric {} ({:.1}s)",
            config.epochs,
            stats.train_loss,
            stats.train_metric,
            fmt_opt(stats.val_loss),
            fmt_opt(stats.val_metric),
            started.elapsed().as_secs_f64()
        );
        let score = val_metric.unwrap_or(train_metric);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, net.params.clone()));
        }
        history.push(stats);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    net.params = params;
    Ok(TrainedModel {
        net,
        history,
        best_epoch,
        ..provisional
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

const BLOB_MAGIC: &[u8; 8] = b"ELECMAP1";

pub fn write_blob(path: &Path, params: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(BLOB_MAGIC).map_err(io)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for p in params {
        w.write_all(&p.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_blob(path: &Path) -> Result<Vec<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != BLOB_MAGIC {
        return Err(Error::Input(format!("{} is not a weights blob", path.display())));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Input(format!("{} is truncated", path.display())));
    }
    Ok(bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// JSON sidecar stored next to the weights blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task_id: TaskId,
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub best_epoch: u32,
    pub history: Vec<EpochStats>,
    pub n_params: usize,
    pub layers: Vec<LayerSpec>,
    pub weights_sha256: String,
    /// "random" or the path of the initial weights.
    pub init: String,
}

impl TrainedModel {
    /// Writes `<stem>.bin` and `<stem>.json`; returns both paths.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        write_blob(&bin, &self.net.params)?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let meta = CheckpointMeta {
            task_id: self.task,
            config: self.config.clone(),
            normalization: self.norm,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            n_params: self.net.n_params(),
            layers: self.net.specs(),
            weights_sha256: hex::encode(Sha256::digest(&bytes)),
            init: self
                .config
                .init_weights
                .as_ref()
                .map_or_else(|| "random".into(), |p| p.display().to_string()),
        };
        std::fs::write(&json, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&json, e))?;
        Ok((bin, json))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let px = meta.config.input_px as usize;
        let mut net = Network::new(Shape { c: 3, h: px, w: px }, &meta.layers)?;
        let params = read_blob(&bin)?;
        if params.len() != net.n_params() {
            return Err(Error::shape(
                format!("{} parameters", net.n_params()),
                format!("{} in {}", params.len(), bin.display()),
            ));
        }
        net.params = params;
        Ok(TrainedModel {
            task: meta.task_id,
            config: meta.config,
            net,
            norm: meta.normalization,
            history: meta.history,
            best_epoch: meta.best_epoch,
        })
    }
}

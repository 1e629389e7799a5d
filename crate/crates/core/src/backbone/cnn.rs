//! The SAR chip CNN: four conv/ReLU/max-pool stages (7x7x16, 5x5x32, 3x3x64,
//! 3x3x128), dropout, a ReLU dense layer producing the features, and a linear
//! classification head used only while training on the base task.
//!
//! Tensors are row-major `f64`; convolutions run as im2col + GEMM.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::SgdMomentum;
use super::{BackboneError, Differentiable, FeatureMatrix, FeatureSource, Result};
use crate::checkpoint;
use crate::datahub::{augment, AugmentMode, Image, LabeledImage, CNN_INPUT};
use crate::seed;

pub const CONV_KERNELS: [usize; 4] = [7, 5, 3, 3];
pub const CONV_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Spatial side after each pooling stage for a 70x70 input.
pub const POOLED_SIDES: [usize; 4] = [35, 17, 8, 4];
pub const DENSE_INPUT: usize = 4 * 4 * 128;

const INPUT_SIDE: usize = CNN_INPUT;

/// `c = op(a) * op(b) + beta * c` for row-major `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every strided access to the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], channels: usize, side: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let pixels = side * side;
    let mut cols = vec![0.0; channels * kernel * kernel * pixels];
    for c in 0..channels {
        let plane = &input[c * pixels..(c + 1) * pixels];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for y in 0..side {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * side..(iy as usize + 1) * side];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (side + pad).saturating_sub(kx).min(side);
                    for x in x_lo..x_hi {
                        dst[y * side + x] = src_row[x + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, side: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let pixels = side * side;
    let mut out = vec![0.0; channels * pixels];
    for c in 0..channels {
        let plane = &mut out[c * pixels..(c + 1) * pixels];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for y in 0..side {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * side..(iy as usize + 1) * side];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (side + pad).saturating_sub(kx).min(side);
                    for x in x_lo..x_hi {
                        dst_row[x + kx - pad] += src[y * side + x];
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pooling (floor); returns pooled values and argmax positions.
fn max_pool(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * side + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Inverted dropout: kept units are scaled by 1/(1-rate).
pub fn apply_dropout(values: &[f64], rate: f64, seed: u64) -> Vec<f64> {
    if rate == 0.0 {
        return values.to_vec();
    }
    let mut rng = seed::rng(seed);
    let keep = 1.0 / (1.0 - rate);
    values
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                v * keep
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    conv_w: [Range<usize>; 4],
    conv_b: [Range<usize>; 4],
    dense_w: Range<usize>,
    dense_b: Range<usize>,
}

impl Layout {
    fn new(d_cnn: usize) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let mut conv_w: [Range<usize>; 4] = Default::default();
        let mut conv_b: [Range<usize>; 4] = Default::default();
        let mut in_ch = 1;
        for l in 0..4 {
            let k = CONV_KERNELS[l];
            conv_w[l] = take(CONV_CHANNELS[l] * in_ch * k * k);
            conv_b[l] = take(CONV_CHANNELS[l]);
            in_ch = CONV_CHANNELS[l];
        }
        let dense_w = take(DENSE_INPUT * d_cnn);
        let dense_b = take(d_cnn);
        Self {
            conv_w,
            conv_b,
            dense_w,
            dense_b,
        }
    }

    fn len(&self) -> usize {
        self.dense_b.end
    }

    fn groups(&self) -> Vec<usize> {
        let mut g = Vec::new();
        for l in 0..4 {
            g.push(self.conv_w[l].len());
            g.push(self.conv_b[l].len());
        }
        g.push(self.dense_w.len());
        g.push(self.dense_b.len());
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    d_cnn: usize,
    dropout: f64,
    layout: Layout,
    body: Vec<f64>,
    /// Base-task classes scored by the head, in column order.
    classes: Vec<String>,
    /// `d_cnn x classes` weights followed by per-class biases.
    head: Vec<f64>,
}

struct ConvCache {
    cols: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<usize>,
}

struct Forward {
    convs: Vec<ConvCache>,
    /// Dense input after dropout.
    dense_in: Vec<f64>,
    /// Per-unit dropout multiplier (0 or 1/(1-rate)); empty in eval mode.
    dropout_scale: Vec<f64>,
    dense_pre: Vec<f64>,
    features: Vec<f64>,
    logits: Vec<f64>,
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, out: &mut [f64]) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    for w in out.iter_mut() {
        *w = normal.sample(rng);
    }
}

fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn cnn_init(d_cnn: usize, dropout: f64, seed: u64) -> Result<CnnModel> {
    if d_cnn == 0 {
        return Err(BackboneError::InvalidArgument(
            "d_cnn must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(BackboneError::InvalidArgument(format!(
            "dropout must be in [0,1), got {dropout}"
        )));
    }
    let layout = Layout::new(d_cnn);
    let mut body = vec![0.0; layout.len()];
    let mut rng = seed::rng(seed);
    let mut in_ch = 1;
    for l in 0..4 {
        let k = CONV_KERNELS[l];
        he_normal(&mut rng, in_ch * k * k, &mut body[layout.conv_w[l].clone()]);
        in_ch = CONV_CHANNELS[l];
    }
    he_normal(&mut rng, DENSE_INPUT, &mut body[layout.dense_w.clone()]);
    Ok(CnnModel {
        d_cnn,
        dropout,
        layout,
        body,
        classes: Vec::new(),
        head: Vec::new(),
    })
}

impl CnnModel {
    pub fn d_cnn(&self) -> usize {
        self.d_cnn
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn body_params(&self) -> &[f64] {
        &self.body
    }

    pub fn dense_weight_shape(&self) -> (usize, usize) {
        (DENSE_INPUT, self.d_cnn)
    }

    /// Attaches a freshly initialized head scoring `classes`.
    pub fn with_head(mut self, classes: Vec<String>, seed: u64) -> Self {
        let k = classes.len();
        let mut head = vec![0.0; self.d_cnn * k + k];
        he_normal(
            &mut seed::rng(seed),
            self.d_cnn,
            &mut head[..self.d_cnn * k],
        );
        self.classes = classes;
        self.head = head;
        self
    }

    fn check_input(image: &Image) -> Result<()> {
        if image.height() != INPUT_SIDE || image.width() != INPUT_SIDE {
            return Err(BackboneError::ShapeMismatch {
                expected: format!("{INPUT_SIDE}x{INPUT_SIDE} image"),
                found: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok(())
    }

    fn conv_stack(&self, image: &[f64]) -> (Vec<ConvCache>, Vec<f64>) {
        let mut caches = Vec::with_capacity(4);
        let mut act = image.to_vec();
        let mut side = INPUT_SIDE;
        let mut in_ch = 1;
        for l in 0..4 {
            let k = CONV_KERNELS[l];
            let out_ch = CONV_CHANNELS[l];
            let pixels = side * side;
            let rows = in_ch * k * k;
            let cols = im2col(&act, in_ch, side, k);
            let bias = &self.body[self.layout.conv_b[l].clone()];
            let mut pre = vec![0.0; out_ch * pixels];
            for (o, chunk) in pre.chunks_exact_mut(pixels).enumerate() {
                chunk.fill(bias[o]);
            }
            gemm(
                out_ch,
                rows,
                pixels,
                &self.body[self.layout.conv_w[l].clone()],
                false,
                &cols,
                false,
                &mut pre,
                1.0,
            );
            let relu: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let (pooled, argmax) = max_pool(&relu, out_ch, side);
            caches.push(ConvCache { cols, pre, argmax });
            act = pooled;
            side /= 2;
            in_ch = out_ch;
        }
        (caches, act)
    }

    fn forward_cached(&self, image: &[f64], dropout_seed: Option<u64>) -> Forward {
        let (convs, flat) = self.conv_stack(image);
        let (dense_in, dropout_scale) = match dropout_seed {
            Some(s) if self.dropout > 0.0 => {
                let scale = apply_dropout(&vec![1.0; flat.len()], self.dropout, s);
                let dropped = flat.iter().zip(&scale).map(|(v, m)| v * m).collect();
                (dropped, scale)
            }
            _ => (flat, Vec::new()),
        };
        let mut dense_pre = self.body[self.layout.dense_b.clone()].to_vec();
        gemm(
            1,
            DENSE_INPUT,
            self.d_cnn,
            &dense_in,
            false,
            &self.body[self.layout.dense_w.clone()],
            false,
            &mut dense_pre,
            1.0,
        );
        let features: Vec<f64> = dense_pre.iter().map(|&v| v.max(0.0)).collect();
        let k = self.classes.len();
        let logits = if k == 0 {
            Vec::new()
        } else {
            let mut logits = self.head[self.d_cnn * k..].to_vec();
            gemm(
                1,
                self.d_cnn,
                k,
                &features,
                false,
                &self.head,
                false,
                &mut logits,
                1.0,
            );
            logits
        };
        Forward {
            convs,
            dense_in,
            dropout_scale,
            dense_pre,
            features,
            logits,
        }
    }

    /// Input of the dense layer; train mode applies dropout drawn from `seed`.
    pub fn dense_input(&self, image: &Image, train_mode: bool, seed: u64) -> Result<Vec<f64>> {
        Self::check_input(image)?;
        let (_, flat) = self.conv_stack(image.pixels());
        Ok(if train_mode {
            apply_dropout(&flat, self.dropout, seed)
        } else {
            flat
        })
    }

    /// Cross-entropy loss and gradients (body, head) for one 70x70 input.
    fn sample_grad(
        &self,
        image: &[f64],
        target: usize,
        dropout_seed: Option<u64>,
    ) -> (f64, bool, Vec<f64>, Vec<f64>) {
        let fwd = self.forward_cached(image, dropout_seed);
        let (loss, dlogits) = softmax_cross_entropy(&fwd.logits, target);
        let correct = argmax(&fwd.logits) == target;
        let k = self.classes.len();
        let d = self.d_cnn;

        let mut ghead = vec![0.0; self.head.len()];
        // head weights: outer(features, dlogits)
        gemm(
            d,
            1,
            k,
            &fwd.features,
            false,
            &dlogits,
            false,
            &mut ghead[..d * k],
            0.0,
        );
        ghead[d * k..].copy_from_slice(&dlogits);
        let mut dfeat = vec![0.0; d];
        gemm(
            1,
            k,
            d,
            &dlogits,
            false,
            &self.head[..d * k],
            true,
            &mut dfeat,
            0.0,
        );

        let mut gbody = vec![0.0; self.body.len()];
        let ddense: Vec<f64> = dfeat
            .iter()
            .zip(&fwd.dense_pre)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect();
        gemm(
            DENSE_INPUT,
            1,
            d,
            &fwd.dense_in,
            false,
            &ddense,
            false,
            &mut gbody[self.layout.dense_w.clone()],
            0.0,
        );
        gbody[self.layout.dense_b.clone()].copy_from_slice(&ddense);
        let mut dflat = vec![0.0; DENSE_INPUT];
        gemm(
            1,
            d,
            DENSE_INPUT,
            &ddense,
            false,
            &self.body[self.layout.dense_w.clone()],
            true,
            &mut dflat,
            0.0,
        );
        if !fwd.dropout_scale.is_empty() {
            for (g, s) in dflat.iter_mut().zip(&fwd.dropout_scale) {
                *g *= s;
            }
        }

        let mut dpooled = dflat;
        for l in (0..4).rev() {
            let cache = &fwd.convs[l];
            let side = if l == 0 {
                INPUT_SIDE
            } else {
                POOLED_SIDES[l - 1]
            };
            let pixels = side * side;
            let out_ch = CONV_CHANNELS[l];
            let in_ch = if l == 0 { 1 } else { CONV_CHANNELS[l - 1] };
            let k = CONV_KERNELS[l];
            let rows = in_ch * k * k;

            let mut dpre = vec![0.0; out_ch * pixels];
            for (g, &pos) in dpooled.iter().zip(&cache.argmax) {
                if cache.pre[pos] > 0.0 {
                    dpre[pos] += g;
                }
            }
            gemm(
                out_ch,
                pixels,
                rows,
                &dpre,
                false,
                &cache.cols,
                true,
                &mut gbody[self.layout.conv_w[l].clone()],
                0.0,
            );
            let gb = &mut gbody[self.layout.conv_b[l].clone()];
            for (o, chunk) in dpre.chunks_exact(pixels).enumerate() {
                gb[o] = chunk.iter().sum();
            }
            if l > 0 {
                let mut dcols = vec![0.0; rows * pixels];
                gemm(
                    rows,
                    out_ch,
                    pixels,
                    &self.body[self.layout.conv_w[l].clone()],
                    true,
                    &dpre,
                    false,
                    &mut dcols,
                    0.0,
                );
                dpooled = col2im(&dcols, in_ch, side, k);
            }
        }
        (loss, correct, gbody, ghead)
    }

    fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| BackboneError::UnknownLabel(label.to_string()))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let k = self.classes.len();
        let mut tensors: Vec<(&str, Vec<usize>, &[f64])> = Vec::new();
        let names = ["conv1", "conv2", "conv3", "conv4"];
        let bias_names = ["conv1_bias", "conv2_bias", "conv3_bias", "conv4_bias"];
        let mut in_ch = 1;
        for l in 0..4 {
            let kk = CONV_KERNELS[l];
            tensors.push((
                names[l],
                vec![CONV_CHANNELS[l], in_ch, kk, kk],
                &self.body[self.layout.conv_w[l].clone()],
            ));
            tensors.push((
                bias_names[l],
                vec![CONV_CHANNELS[l]],
                &self.body[self.layout.conv_b[l].clone()],
            ));
            in_ch = CONV_CHANNELS[l];
        }
        tensors.push((
            "dense",
            vec![DENSE_INPUT, self.d_cnn],
            &self.body[self.layout.dense_w.clone()],
        ));
        tensors.push((
            "dense_bias",
            vec![self.d_cnn],
            &self.body[self.layout.dense_b.clone()],
        ));
        if k > 0 {
            tensors.push(("head", vec![self.d_cnn, k], &self.head[..self.d_cnn * k]));
            tensors.push(("head_bias", vec![k], &self.head[self.d_cnn * k..]));
        }
        checkpoint::save(
            stem,
            "cnn",
            serde_json::json!({
                "d_cnn": self.d_cnn,
                "dropout": self.dropout,
                "classes": self.classes,
            }),
            &tensors,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = checkpoint::load(stem, "cnn")?;
        let bad = |msg: &str| BackboneError::InvalidArgument(format!("cnn checkpoint: {msg}"));
        let d_cnn = ck.meta["d_cnn"]
            .as_u64()
            .ok_or_else(|| bad("missing d_cnn"))? as usize;
        let dropout = ck.meta["dropout"]
            .as_f64()
            .ok_or_else(|| bad("missing dropout"))?;
        let classes: Vec<String> = serde_json::from_value(ck.meta["classes"].clone())
            .map_err(|_| bad("missing classes"))?;
        let mut model = cnn_init(d_cnn, dropout, 0)?;
        let mut in_ch = 1;
        let names = ["conv1", "conv2", "conv3", "conv4"];
        let bias_names = ["conv1_bias", "conv2_bias", "conv3_bias", "conv4_bias"];
        for l in 0..4 {
            let kk = CONV_KERNELS[l];
            let w = ck.tensor(names[l], &[CONV_CHANNELS[l], in_ch, kk, kk])?;
            model.body[model.layout.conv_w[l].clone()].copy_from_slice(w);
            let b = ck.tensor(bias_names[l], &[CONV_CHANNELS[l]])?;
            model.body[model.layout.conv_b[l].clone()].copy_from_slice(b);
            in_ch = CONV_CHANNELS[l];
        }
        let w = ck.tensor("dense", &[DENSE_INPUT, d_cnn])?;
        model.body[model.layout.dense_w.clone()].copy_from_slice(w);
        let b = ck.tensor("dense_bias", &[d_cnn])?;
        model.body[model.layout.dense_b.clone()].copy_from_slice(b);
        let k = classes.len();
        if k > 0 {
            let mut head = ck.tensor("head", &[d_cnn, k])?.to_vec();
            head.extend_from_slice(ck.tensor("head_bias", &[k])?);
            model.head = head;
        }
        model.classes = classes;
        Ok(model)
    }
}

/// Features and head logits for one 70x70 image. Eval mode is deterministic;
/// train mode applies inverted dropout drawn from `seed` before the dense layer.
pub fn cnn_forward(
    model: &CnnModel,
    image: &Image,
    train_mode: bool,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    CnnModel::check_input(image)?;
    let fwd = model.forward_cached(image.pixels(), train_mode.then_some(seed));
    Ok((fwd.features, fwd.logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Eval-mode mean loss over the training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Eval-mode mean loss and accuracy after the last epoch.
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// One training example: an image of any size >= the crop side, and its label.
pub type CnnSample = LabeledImage;

fn eval_pass(model: &CnnModel, inputs: &[Image], targets: &[usize]) -> (f64, f64) {
    let results: Vec<(f64, bool)> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(img, &t)| {
            let fwd = model.forward_cached(img.pixels(), None);
            let (loss, _) = softmax_cross_entropy(&fwd.logits, t);
            (loss, argmax(&fwd.logits) == t)
        })
        .collect();
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    (loss, acc)
}

/// Trains body and head by softmax cross-entropy with momentum SGD. Every epoch
/// each sample goes through train-mode augmentation (crop, resize, random flip).
/// The returned model is meant to be frozen.
pub fn cnn_train(
    model: &CnnModel,
    samples: &[CnnSample],
    config: &CnnTrainConfig,
) -> Result<(CnnModel, TrainHistory)> {
    let mut classes: Vec<String> = Vec::new();
    for s in samples {
        if !classes.contains(&s.label) {
            classes.push(s.label.clone());
        }
    }
    if classes.len() < 2 {
        return Err(BackboneError::InvalidArgument(format!(
            "base task needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(BackboneError::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    if config.epochs == 0 {
        return Ok((model.clone(), TrainHistory::default()));
    }
    let mut model = if model.classes == classes {
        model.clone()
    } else {
        model
            .clone()
            .with_head(classes, seed::derive(config.seed, "cnn-head"))
    };
    let targets: Vec<usize> = samples
        .iter()
        .map(|s| model.class_index(&s.label))
        .collect::<Result<_>>()?;
    let eval_inputs: Vec<Image> = samples
        .iter()
        .map(|s| augment(s, AugmentMode::CnnEval, 0).map(|a| a.image))
        .collect::<std::result::Result<_, _>>()?;

    let (initial_loss, _) = eval_pass(&model, &eval_inputs, &targets);
    let mut history = TrainHistory {
        initial_loss,
        ..Default::default()
    };
    let n_body = model.body.len();
    let mut opt = SgdMomentum::new(
        n_body + model.head.len(),
        config.lr,
        config.momentum,
        config.weight_decay,
    );
    let mut params = Vec::with_capacity(n_body + model.head.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, "cnn-shuffle"));
    let n = samples.len() as u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let draws: Vec<u64> = batch.iter().map(|&i| epoch as u64 * n + i as u64).collect();
            let results: Vec<Result<(f64, bool, Vec<f64>, Vec<f64>)>> = batch
                .par_iter()
                .zip(draws.par_iter())
                .map(|(&i, &draw)| {
                    let aug = augment(
                        &samples[i],
                        AugmentMode::CnnTrain,
                        seed::derive_indexed(config.seed, "cnn-augment", draw),
                    )?;
                    let dropout_seed = seed::derive_indexed(config.seed, "cnn-dropout", draw);
                    Ok(model.sample_grad(aug.image.pixels(), targets[i], Some(dropout_seed)))
                })
                .collect();
            let mut grad = vec![0.0; n_body + model.head.len()];
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, ok, gb, gh) = r?;
                loss_sum += loss;
                correct += ok as usize;
                for (g, v) in grad.iter_mut().zip(gb.iter().chain(gh.iter())) {
                    *g += v * scale;
                }
            }
            params.clear();
            params.extend_from_slice(&model.body);
            params.extend_from_slice(&model.head);
            opt.step(&mut params, &grad);
            model.body.copy_from_slice(&params[..n_body]);
            model.head.copy_from_slice(&params[n_body..]);
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() {
            return Err(BackboneError::Diverged {
                stage: "cnn_train",
                epoch,
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    let (final_loss, final_accuracy) = eval_pass(&model, &eval_inputs, &targets);
    history.final_loss = final_loss;
    history.final_accuracy = final_accuracy;
    Ok((model, history))
}

/// Eval-mode dense-layer features for every image (after eval augmentation).
pub fn cnn_extract(model: &CnnModel, images: &[LabeledImage]) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|s| {
            let input = augment(s, AugmentMode::CnnEval, 0)?;
            Ok(model.forward_cached(input.image.pixels(), None).features)
        })
        .collect::<Result<_>>()?;
    let d = model.d_cnn;
    let matrix = nalgebra::DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    FeatureMatrix::new(
        matrix,
        images.iter().map(|s| s.label.clone()).collect(),
        FeatureSource::Cnn,
    )
}

impl Differentiable for CnnModel {
    /// A 70x70 input and its head class index; dropout is disabled.
    type Sample = (Image, usize);

    fn param_groups(&self) -> Vec<usize> {
        let mut g = self.layout.groups();
        let k = self.classes.len();
        g.push(self.d_cnn * k);
        g.push(k);
        g
    }

    fn param(&self, index: usize) -> f64 {
        if index < self.body.len() {
            self.body[index]
        } else {
            self.head[index - self.body.len()]
        }
    }

    fn set_param(&mut self, index: usize, value: f64) {
        if index < self.body.len() {
            self.body[index] = value;
        } else {
            let i = index - self.body.len();
            self.head[i] = value;
        }
    }

    fn loss(&self, sample: &Self::Sample) -> f64 {
        let fwd = self.forward_cached(sample.0.pixels(), None);
        softmax_cross_entropy(&fwd.logits, sample.1).0
    }

    fn loss_and_grad(&self, sample: &Self::Sample) -> (f64, Vec<f64>) {
        let (loss, _, mut gb, gh) = self.sample_grad(sample.0.pixels(), sample.1, None);
        gb.extend(gh);
        (loss, gb)
    }
}

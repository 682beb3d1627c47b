//! Desk-scale optimization: region and grade losses, stratified batch
//! assembly, Nesterov descent with a polynomial schedule, and the training
//! loops for the segmenter, the grade classifier, and the joint model.
//!
//! Everything runs single-threaded and consumes one seeded stream per
//! loop, so a (config, seed, data) triple reproduces parameters and loss
//! curves bit for bit. Losses accumulate in f64 and gradients are emitted
//! in f32, matching the parameter dtype.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::jcs::JcsTape;
use crate::network::seg::SegTape;
use crate::network::{zero_grads, Classifier, Jcs, Params, Segmenter};
use crate::tensor::Tensor;
use crate::volume::{Grade, LabelVolume, LoadedCase};

/// Epochs, batch geometry, and optimizer settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sampled batches per epoch in the segmentation loops; the
    /// classifier loop instead partitions the dataset each epoch.
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    /// Random axis flips on every drawn sample.
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn segmenter() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            iterations_per_epoch: 250,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.99,
            poly_exponent: 0.9,
            augment: true,
            seed: 0,
        }
    }

    pub fn classifier() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            iterations_per_epoch: 250,
            batch_size: 5,
            lr: 0.001,
            momentum: 0.99,
            poly_exponent: 0.9,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("train config: counts must be positive".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train config: bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "train config: momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !self.poly_exponent.is_finite() || self.poly_exponent < 0.0 {
            return Err(Error::config(format!(
                "train config: bad poly exponent {}",
                self.poly_exponent
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("train config serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss composition knobs. `pos_weight` scales the `positive` grade's
/// term in the classifier loss and is meant to be the opposite-to-positive
/// class count ratio of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub bce_weight: f64,
    pub pos_weight: f64,
    pub positive: Grade,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            dice_smooth: 1e-5,
            bce_weight: 1.0,
            pos_weight: 1.0,
            positive: Grade::Hgg,
        }
    }
}

/// Class count ratio (other / positive) of a labeled set, the weight that
/// balances the classifier loss. A set missing one of the classes gets the
/// neutral 1.0.
pub fn pos_weight_from(grades: &[Grade], positive: Grade) -> f64 {
    let pos = grades.iter().filter(|&&g| g == positive).count();
    let neg = grades.len() - pos;
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Region segmentation loss on sigmoid channels: mean over the three
/// region channels of the soft Dice complement, plus `bce_weight` times
/// the mean binary cross-entropy over all voxels. Targets must be binary.
/// Returns the scalar and its gradient with respect to the logits.
pub fn region_loss(logits: &Tensor, targets: &Tensor, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    if logits.rank() != 4 || logits.extent(0) != 3 {
        return Err(Error::shape(format!(
            "region loss: logits must be [3, D, H, W], got {:?}",
            logits.shape()
        )));
    }
    if logits.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "region loss: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let chan = logits.numel() / 3;
    let total = logits.numel() as f64;
    let eps = cfg.dice_smooth;
    let x = logits.data();
    let q = targets.data();

    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; logits.numel()];
    let mut bce_sum = 0.0f64;
    for r in 0..3 {
        let lo = r * chan;
        let hi = lo + chan;
        let mut sp = 0.0f64;
        let mut sq = 0.0f64;
        let mut spq = 0.0f64;
        for i in lo..hi {
            let xi = f64::from(x[i]);
            let qi = f64::from(q[i]);
            let p = sigmoid(xi);
            sp += p;
            sq += qi;
            spq += p * qi;
            bce_sum += xi.max(0.0) - xi * qi + (-xi.abs()).exp().ln_1p();
        }
        let denom = sp + sq + eps;
        let num = 2.0 * spq + eps;
        loss += (1.0 - num / denom) / 3.0;
        // d(1 - num/denom)/dp = (num - 2 q denom) / denom^2, then the
        // sigmoid jacobian p(1-p) and the channel mean.
        for i in lo..hi {
            let xi = f64::from(x[i]);
            let qi = f64::from(q[i]);
            let p = sigmoid(xi);
            let ddice = (num - 2.0 * qi * denom) / (denom * denom) * p * (1.0 - p) / 3.0;
            let dbce = cfg.bce_weight * (p - qi) / total;
            grad[i] = (ddice + dbce) as f32;
        }
    }
    loss += cfg.bce_weight * bce_sum / total;
    Ok((loss, Tensor::new(logits.shape(), grad).expect("gradient shape mirrors logits")))
}

/// Mean soft Dice over the three region channels of sigmoid logits
/// against binary targets, the quantity the region loss descends on.
pub fn mean_soft_dice(logits: &Tensor, targets: &Tensor, smooth: f64) -> Result<f64> {
    let cfg = LossConfig { dice_smooth: smooth, bce_weight: 0.0, ..LossConfig::default() };
    let (loss, _) = region_loss(logits, targets, &cfg)?;
    Ok(1.0 - loss)
}

/// Weighted binary cross-entropy on one logit in log-sum-exp form.
/// Returns the loss and its derivative with respect to the logit.
pub fn classifier_loss(logit: f64, positive: bool, pos_weight: f64) -> (f64, f64) {
    if positive {
        (pos_weight * softplus(-logit), -pos_weight * sigmoid(-logit))
    } else {
        (softplus(logit), sigmoid(logit))
    }
}

/// Expands a label volume into the three overlapping binary region
/// channels [3, D, H, W]: whole tumor {1, 2, 4}, tumor core {1, 4},
/// enhancing tumor {4}.
pub fn region_targets(vol: &LabelVolume) -> Result<Tensor> {
    if let Some(&bad) = vol.voxels.iter().find(|v| ![0, 1, 2, 4].contains(*v)) {
        return Err(Error::data(format!("region targets: label {bad} outside {{0, 1, 2, 4}}")));
    }
    let n = vol.voxels.len();
    let mut data = vec![0.0f32; 3 * n];
    for (i, &v) in vol.voxels.iter().enumerate() {
        if v == 1 || v == 2 || v == 4 {
            data[i] = 1.0;
        }
        if v == 1 || v == 4 {
            data[n + i] = 1.0;
        }
        if v == 4 {
            data[2 * n + i] = 1.0;
        }
    }
    Tensor::new(&[3, vol.dims[0], vol.dims[1], vol.dims[2]], data)
}

/// One segmentation training sample: modal image and region targets.
#[derive(Debug, Clone)]
pub struct SegCase {
    /// [4, D, H, W]
    pub image: Tensor,
    /// [3, D, H, W] binary
    pub regions: Tensor,
}

impl SegCase {
    pub fn from_loaded(case: &LoadedCase) -> Result<SegCase> {
        let labels = case
            .labels
            .as_ref()
            .ok_or_else(|| Error::data(format!("case {}: no label volume", case.id)))?;
        Ok(SegCase { image: case.input.clone(), regions: region_targets(labels)? })
    }
}

/// One classification training sample.
#[derive(Debug, Clone)]
pub struct ClsCase {
    /// [4, D, H, W]
    pub image: Tensor,
    pub grade: Grade,
}

impl ClsCase {
    pub fn from_loaded(case: &LoadedCase) -> Result<ClsCase> {
        let grade = case
            .grade
            .ok_or_else(|| Error::data(format!("case {}: no grade label", case.id)))?;
        Ok(ClsCase { image: case.input.clone(), grade })
    }
}

/// Reverses the chosen spatial axes of a [C, D, H, W] tensor.
pub fn flip_volume(t: &Tensor, flips: [bool; 3]) -> Result<Tensor> {
    if t.rank() != 4 {
        return Err(Error::shape(format!("flip: expected rank 4, got {:?}", t.shape())));
    }
    let (c, d, h, w) = (t.extent(0), t.extent(1), t.extent(2), t.extent(3));
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ci in 0..c {
        for di in 0..d {
            let sd = if flips[0] { d - 1 - di } else { di };
            for hi in 0..h {
                let sh = if flips[1] { h - 1 - hi } else { hi };
                let drow = ((ci * d + di) * h + hi) * w;
                let srow = ((ci * d + sd) * h + sh) * w;
                for wi in 0..w {
                    let sw = if flips[2] { w - 1 - wi } else { wi };
                    out[drow + wi] = src[srow + sw];
                }
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// Partitions one epoch into batches whose class mix tracks the global
/// HGG/LGG ratio to within one sample, with fresh within-class orders
/// from the rng. Every index appears exactly once.
pub fn stratified_batches(
    grades: &[Grade],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let n = grades.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!(
            "stratified batches: batch size {batch_size} against {n} cases"
        )));
    }
    let mut hgg: Vec<usize> = (0..n).filter(|&i| grades[i] == Grade::Hgg).collect();
    let mut lgg: Vec<usize> = (0..n).filter(|&i| grades[i] == Grade::Lgg).collect();
    hgg.shuffle(rng);
    lgg.shuffle(rng);
    let n_hgg = hgg.len();
    // Cumulative floor quotas keep every batch's class count within one
    // of the exact proportional share.
    let quota = |upto: usize| upto * n_hgg / n;
    let mut batches = Vec::new();
    let (mut hi, mut li) = (0, 0);
    let mut done = 0;
    while done < n {
        let size = batch_size.min(n - done);
        let take_h = quota(done + size) - quota(done);
        let mut batch = Vec::with_capacity(size);
        batch.extend_from_slice(&hgg[hi..hi + take_h]);
        batch.extend_from_slice(&lgg[li..li + (size - take_h)]);
        hi += take_h;
        li += size - take_h;
        batch.shuffle(rng);
        batches.push(batch);
        done += size;
    }
    Ok(batches)
}

/// lr0 · (1 − epoch/max_epochs)^exponent, the descending polynomial
/// schedule evaluated once per epoch.
pub fn poly_lr(epoch: usize, max_epochs: usize, lr0: f64, exponent: f64) -> f64 {
    let frac = 1.0 - epoch as f64 / max_epochs as f64;
    lr0 * frac.max(0.0).powf(exponent)
}

/// Per-parameter velocity buffers, keyed by parameter name and created
/// zeroed on first use.
#[derive(Debug, Default)]
pub struct SgdState {
    velocity: HashMap<String, Vec<f32>>,
}

/// One descent step over every trainable parameter with an accumulated
/// gradient: v = m·v + g, then p -= lr·(g + m·v) under Nesterov and
/// p -= lr·v otherwise. Frozen parameters and parameters without a
/// gradient buffer are untouched.
pub fn sgd_step<P: Params>(
    net: &mut P,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    nesterov: bool,
) {
    let lr = lr as f32;
    let m = momentum as f32;
    net.visit_params_mut(&mut |name, t, frozen| {
        if frozen {
            return;
        }
        let grad = match t.grad() {
            Some(g) => g.to_vec(),
            None => return,
        };
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0f32; grad.len()]);
        let data = t.data_mut();
        for i in 0..grad.len() {
            v[i] = m * v[i] + grad[i];
            let step = if nesterov { grad[i] + m * v[i] } else { v[i] };
            data[i] -= lr * step;
        }
    });
}

/// Per-iteration mean batch loss of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Tab-delimited `iteration<TAB>loss` rows. The loss column uses the
    /// shortest round-trip decimal form, so equal files mean equal bits.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (i, loss) in self.losses.iter().enumerate() {
            writeln!(text, "{i}\t{loss}").expect("string write");
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }
}

/// A segmentation network the training loop can drive: forward to region
/// logits with a tape, backward from the logit gradient.
pub trait SegModel: Params {
    type Tape;
    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Self::Tape)>;
    fn backward_acc(&mut self, tape: &Self::Tape, grad_logits: &Tensor) -> Result<Tensor>;
}

impl SegModel for Segmenter {
    type Tape = SegTape;

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, SegTape)> {
        Segmenter::forward_train(self, x)
    }

    fn backward_acc(&mut self, tape: &SegTape, grad_logits: &Tensor) -> Result<Tensor> {
        Segmenter::backward_acc(self, tape, grad_logits)
    }
}

impl SegModel for Jcs {
    type Tape = JcsTape;

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, JcsTape)> {
        Jcs::forward_train(self, x)
    }

    fn backward_acc(&mut self, tape: &JcsTape, grad_logits: &Tensor) -> Result<Tensor> {
        Jcs::backward_acc(self, tape, grad_logits)
    }
}

fn draw_flips(rng: &mut ChaCha8Rng, augment: bool) -> [bool; 3] {
    if augment {
        [rng.gen(), rng.gen(), rng.gen()]
    } else {
        [false; 3]
    }
}

/// Trains a segmentation network (plain or joint) by sampled batches,
/// recording the mean batch loss per iteration. Batches draw uniformly
/// with replacement; every sample may be axis-flipped when augmentation
/// is on. Frozen branches never move: their gradients are discarded by
/// the optimizer.
pub fn train_segmenter<M: SegModel>(
    net: &mut M,
    data: &[SegCase],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::data("segmenter training: empty dataset".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let mut log = TrainLog::default();
    let inv_batch = 1.0 / cfg.batch_size as f32;
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_exponent);
        for _ in 0..cfg.iterations_per_epoch {
            zero_grads(net);
            let mut batch_loss = 0.0f64;
            for _ in 0..cfg.batch_size {
                let case = &data[rng.gen_range(0..data.len())];
                let flips = draw_flips(&mut rng, cfg.augment);
                let image = flip_volume(&case.image, flips)?;
                let target = flip_volume(&case.regions, flips)?;
                let (logits, tape) = net.forward_train(&image)?;
                let (loss, mut grad) = region_loss(&logits, &target, loss_cfg)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "segmenter training: non-finite loss {loss} at epoch {epoch}"
                    )));
                }
                for g in grad.data_mut() {
                    *g *= inv_batch;
                }
                net.backward_acc(&tape, &grad)?;
                batch_loss += loss;
            }
            log.losses.push(batch_loss / cfg.batch_size as f64);
            sgd_step(net, &mut state, lr, cfg.momentum, true);
        }
    }
    Ok(log)
}

/// Trains the grade classifier over stratified epoch partitions,
/// recording the mean batch loss per batch. The rng stream covers batch
/// assembly, augmentation, and dropout, in that drawing order.
pub fn train_classifier(
    net: &mut Classifier,
    data: &[ClsCase],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::data("classifier training: empty dataset".to_string()));
    }
    let grades: Vec<Grade> = data.iter().map(|c| c.grade).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_exponent);
        for batch in stratified_batches(&grades, cfg.batch_size, &mut rng)? {
            zero_grads(net);
            let mut batch_loss = 0.0f64;
            let inv = 1.0 / batch.len() as f64;
            for idx in batch.iter() {
                let case = &data[*idx];
                let flips = draw_flips(&mut rng, cfg.augment);
                let image = flip_volume(&case.image, flips)?;
                let (logit_t, tape) = net.forward_train(&image, &mut rng)?;
                let logit = f64::from(logit_t.data()[0]);
                let positive = case.grade == loss_cfg.positive;
                let (loss, dlogit) = classifier_loss(logit, positive, loss_cfg.pos_weight);
                if !loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "classifier training: non-finite loss {loss} at epoch {epoch}"
                    )));
                }
                let grad = Tensor::new(logit_t.shape(), vec![(dlogit * inv) as f32])
                    .expect("logit gradient is a single value");
                net.backward_acc(&tape, &grad)?;
                batch_loss += loss * inv;
            }
            log.losses.push(batch_loss);
            sgd_step(net, &mut state, lr, cfg.momentum, true);
        }
    }
    Ok(log)
}

//! SAD-loss training of [`ScratchModel`]s with Adam.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{
    add_center, FractionalPosition, ModelBank, ScratchModel, K2_OFFSET, K3_OFFSET, L1_CHANNELS, L1_SIZE, L2_CHANNELS,
    L3_SIZE, MARGIN, WEIGHT_COUNT,
};
use crate::numerics::{full_conv_acc, xcorr_small_acc, Plane};

/// One training example: a degraded reference patch and the original block.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub frac: FractionalPosition,
    pub qp: u8,
    /// `(H+12) x (W+12)` reference samples.
    pub input: Plane<f64>,
    /// `H x W` original samples.
    pub target: Plane<f64>,
}

impl TrainingRecord {
    pub const MAX_BLOCK: usize = 32;

    pub fn new(frac: FractionalPosition, qp: u8, input: Plane<f64>, target: Plane<f64>) -> Result<Self> {
        if input.width() != target.width() + 2 * MARGIN || input.height() != target.height() + 2 * MARGIN {
            return dim_err(format!(
                "record input {}x{} must be target {}x{} grown by 12",
                input.height(),
                input.width(),
                target.height(),
                target.width()
            ));
        }
        if target.width() > Self::MAX_BLOCK || target.height() > Self::MAX_BLOCK {
            return dim_err(format!(
                "blocks are limited to {0}x{0}, got {1}x{2}",
                Self::MAX_BLOCK,
                target.height(),
                target.width()
            ));
        }
        Ok(Self { frac, qp, input, target })
    }

    pub fn block_size(&self) -> (usize, usize) {
        (self.target.height(), self.target.width())
    }

    fn scaled(&self, s: f64) -> Self {
        Self { frac: self.frac, qp: self.qp, input: self.input.map(|v| v * s), target: self.target.map(|v| v * s) }
    }
}

/// Sum of absolute differences between two equally sized planes.
pub fn sad_loss(pred: &Plane<f64>, target: &Plane<f64>) -> Result<f64> {
    if pred.width() != target.width() || pred.height() != target.height() {
        return dim_err("SAD needs planes of equal size");
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// Loss gradient for every weight, in the [`ScratchModel::params`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros() -> Self {
        Self { data: vec![0.0; WEIGHT_COUNT] }
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn k1(&self, i: usize) -> &[f64] {
        &self.data[i * 81..(i + 1) * 81]
    }

    pub fn k2(&self, j: usize, i: usize) -> f64 {
        self.data[K2_OFFSET + j * L1_CHANNELS + i]
    }

    pub fn k3(&self, j: usize) -> &[f64] {
        &self.data[K3_OFFSET + j * 25..K3_OFFSET + (j + 1) * 25]
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }
}

/// SAD gradient of one record, plus the record's loss.
///
/// The absolute value uses the subgradient `sign(pred - target)` with
/// `sign(0) = 0`.
pub fn backprop_with_loss(model: &ScratchModel, rec: &TrainingRecord) -> Result<(Gradients, f64)> {
    let (mut pred, trace) = model.residual_traced(&rec.input)?;
    add_center(&mut pred, &rec.input);
    let loss = sad_loss(&pred, &rec.target)?;

    let (oh, ow) = (pred.height(), pred.width());
    let (mh, mw) = (trace.mid_h, trace.mid_w);
    let n = mh * mw;
    let sign: Vec<f64> = pred
        .data()
        .iter()
        .zip(rec.target.data())
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();

    let mut grads = Gradients::zeros();
    let (g1, rest) = grads.data.split_at_mut(K2_OFFSET);
    let (g2, g3) = rest.split_at_mut(K3_OFFSET - K2_OFFSET);

    // Layer 3: weight gradients and the gradient flowing into each F2 map.
    let mut d_f2 = vec![0.0; L2_CHANNELS * n];
    for j in 0..L2_CHANNELS {
        let f2 = &trace.f2[j * n..(j + 1) * n];
        xcorr_small_acc(f2, mw, &sign, oh, ow, &mut g3[j * 25..(j + 1) * 25], L3_SIZE, L3_SIZE);
        full_conv_acc(&sign, oh, ow, model.k3(j), L3_SIZE, L3_SIZE, &mut d_f2[j * n..(j + 1) * n]);
    }

    // Layer 2: mixing weights, and back into the F1 maps.
    let mut d_f1 = vec![0.0; L1_CHANNELS * n];
    for j in 0..L2_CHANNELS {
        let dj = &d_f2[j * n..(j + 1) * n];
        for i in 0..L1_CHANNELS {
            let f1 = &trace.f1[i * n..(i + 1) * n];
            g2[j * L1_CHANNELS + i] = dj.iter().zip(f1).map(|(a, b)| a * b).sum();
            let w = model.k2(j, i);
            for (o, d) in d_f1[i * n..(i + 1) * n].iter_mut().zip(dj) {
                *o += w * d;
            }
        }
    }

    // Layer 1.
    let x = &rec.input;
    for i in 0..L1_CHANNELS {
        xcorr_small_acc(
            x.data(),
            x.width(),
            &d_f1[i * n..(i + 1) * n],
            mh,
            mw,
            &mut g1[i * 81..(i + 1) * 81],
            L1_SIZE,
            L1_SIZE,
        );
    }
    Ok((grads, loss))
}

/// SAD gradient of one record with respect to every weight.
pub fn backprop(model: &ScratchModel, rec: &TrainingRecord) -> Result<Gradients> {
    Ok(backprop_with_loss(model, rec)?.0)
}

/// Adam moments and hyperparameters for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len], lr, beta1, beta2, eps }
    }

    /// One bias-corrected Adam update of `weights` in place.
    pub fn step(&mut self, grads: &[f64], weights: &mut [f64]) {
        assert_eq!(grads.len(), weights.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((w, &g), m), v) in weights.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, grads: &Gradients, weights: &mut [f64]) {
    state.step(grads.as_slice(), weights);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate reached at the last step under cosine decay. `None`
    /// keeps the rate constant.
    pub lr_final: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// QPs to train. `None` trains every QP present in the dataset.
    pub qps: Option<Vec<u8>>,
    /// Positions to train. `None` trains every position present in the dataset.
    pub positions: Option<Vec<FractionalPosition>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_final: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            qps: None,
            positions: None,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_final {
            None => self.lr,
            Some(end) => {
                let t = if total > 1 { step as f64 / (total - 1) as f64 } else { 1.0 };
                end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Mean per-sample SAD (in sample units) over one epoch of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub frac: FractionalPosition,
    pub qp: u8,
    pub epoch: usize,
    pub mean_sad: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bank: ModelBank,
    pub history: Vec<EpochLoss>,
}

fn model_seed(seed: u64, frac: FractionalPosition, qp: u8) -> u64 {
    seed ^ ((frac.index() as u64) << 40) ^ ((qp as u64) << 32)
}

/// Trains one model from a prepared (already normalized) partition.
pub fn train_model(
    config: &TrainConfig,
    frac: FractionalPosition,
    qp: u8,
    records: &[TrainingRecord],
    seed: u64,
    sample_scale: f64,
) -> Result<(ScratchModel, Vec<EpochLoss>)> {
    if records.is_empty() {
        return Err(Error::EmptyPartition { dx: frac.dx, dy: frac.dy, qp });
    }
    let mut model = ScratchModel::random(frac, qp, model_seed(seed, frac, qp));
    let mut adam = AdamState::new(WEIGHT_COUNT, config.lr, config.beta1, config.beta2, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed(seed, frac, qp).wrapping_add(1));
    let batch = config.batch_size.max(1);
    let steps_per_epoch = records.len().div_ceil(batch);
    let total_steps = steps_per_epoch * config.epochs;
    let samples: usize = records.iter().map(|r| r.target.data().len()).sum();

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let parts: Vec<Result<(Gradients, f64)>> =
                chunk.par_iter().map(|&k| backprop_with_loss(&model, &records[k])).collect();
            // Ordered reduction keeps results bitwise reproducible.
            let mut grads = Gradients::zeros();
            let mut batch_loss = 0.0;
            for part in parts {
                let (g, l) = part?;
                grads.add_assign(&g);
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { step, loss: batch_loss });
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.lr = config.lr_at(step, total_steps);
            adam.step(grads.as_slice(), model.params_mut());
            epoch_loss += batch_loss;
            step += 1;
        }
        let mean_sad = epoch_loss / samples as f64 / sample_scale;
        debug!("{frac} qp {qp} epoch {epoch}: mean SAD {mean_sad:.6}");
        history.push(EpochLoss { frac, qp, epoch, mean_sad });
    }
    if let Some(last) = history.last() {
        info!("trained {frac} qp {qp}: final mean SAD {:.6}", last.mean_sad);
    }
    Ok((model, history))
}

/// Trains one model per requested (position, QP) partition of `dataset`.
///
/// Samples are normalized to `[0, 1]` by `2^bitdepth - 1` before training.
pub fn train(config: &TrainConfig, dataset: &[TrainingRecord], seed: u64) -> Result<TrainOutcome> {
    let mut partitions: BTreeMap<(FractionalPosition, u8), Vec<TrainingRecord>> = BTreeMap::new();
    let mut scale = None;
    for rec in dataset {
        let s = 1.0 / ((1u32 << rec.input.bitdepth()) - 1) as f64;
        scale.get_or_insert(s);
        partitions.entry((rec.frac, rec.qp)).or_default().push(rec.scaled(s));
    }
    let scale = scale.unwrap_or(1.0 / 255.0);

    let positions: Vec<FractionalPosition> = match &config.positions {
        Some(p) => p.clone(),
        None => {
            let mut p: Vec<_> = partitions.keys().map(|&(f, _)| f).collect();
            p.dedup();
            p
        }
    };
    let qps: Vec<u8> = match &config.qps {
        Some(q) => q.clone(),
        None => {
            let mut q: Vec<_> = partitions.keys().map(|&(_, q)| q).collect();
            q.sort_unstable();
            q.dedup();
            q
        }
    };
    if positions.is_empty() || qps.is_empty() {
        return Err(Error::InvalidArgument("nothing to train: dataset is empty".into()));
    }

    let mut bank = ModelBank::new();
    let mut history = Vec::new();
    for &frac in &positions {
        for &qp in &qps {
            let records = partitions.get(&(frac, qp)).ok_or(Error::EmptyPartition { dx: frac.dx, dy: frac.dy, qp })?;
            let (model, h) = train_model(config, frac, qp, records, seed, scale)?;
            bank.insert(model);
            history.extend(h);
        }
    }
    Ok(TrainOutcome { bank, history })
}

//! Block-based switchable motion compensation harness.
//!
//! Each inter frame is predicted from the previous original frame after it
//! has been passed through [`compress_surrogate`] at the working QP. Blocks
//! get a full-search integer motion vector refined to quarter-pel with the
//! standard filters; every block with a fractional vector then picks either
//! the standard separable filter or the learned 13x13 filter, whichever gives
//! the lower cost. Both choices carry the same one-bit flag, so `lambda * 1`
//! appears on both sides and cancels.
//!
//! Frames are padded by border replication before search, so every block can
//! be predicted. Frames whose size is not a multiple of the block grid get
//! smaller blocks along the right and bottom edges. With several block sizes
//! configured, tile row `k` uses `blocks[k % blocks.len()]`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::interpret::FilterSet;
use crate::metrics::{psnr_from_mse, sad};
use crate::model::{nearest_qp, FractionalPosition, MARGIN};
use crate::numerics::Plane;
use crate::stdfilt::{interp_std, MARGIN_AFTER, MARGIN_BEFORE};
use crate::trainer::TrainingRecord;

/// Quantization step for `qp`: `2^((qp - 4) / 6)`.
pub fn qstep(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    c
}

/// Lossy stand-in for an encode/decode round trip.
///
/// Orthonormal 8x8 DCT-II per block, uniform quantization with step
/// [`qstep`] (round to nearest), dequantization, inverse DCT, rounding and
/// clipping. Partial edge blocks are filled by replication before the
/// transform and only their valid part is written back.
pub fn compress_surrogate(frame: &Plane<u16>, qp: u8) -> Plane<u16> {
    let c = dct_matrix();
    let step = qstep(qp);
    let max = ((1u32 << frame.bitdepth()) - 1) as f64;
    let (w, h) = (frame.width(), frame.height());
    let mut out = frame.clone();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut x = [[0.0f64; 8]; 8];
            for (r, row) in x.iter_mut().enumerate() {
                for (col, v) in row.iter_mut().enumerate() {
                    *v = frame[((by + r).min(h - 1), (bx + col).min(w - 1))] as f64;
                }
            }
            // Y = C X C^T
            let mut t = [[0.0f64; 8]; 8];
            for i in 0..8 {
                for j in 0..8 {
                    t[i][j] = (0..8).map(|k| c[i][k] * x[k][j]).sum();
                }
            }
            let mut y = [[0.0f64; 8]; 8];
            for i in 0..8 {
                for j in 0..8 {
                    let coef: f64 = (0..8).map(|k| t[i][k] * c[j][k]).sum();
                    y[i][j] = (coef / step).round() * step;
                }
            }
            // X = C^T Y C
            for i in 0..8 {
                for j in 0..8 {
                    t[i][j] = (0..8).map(|k| c[k][i] * y[k][j]).sum();
                }
            }
            for r in 0..8.min(h - by) {
                for col in 0..8.min(w - bx) {
                    let v: f64 = (0..8).map(|k| t[r][k] * c[k][col]).sum();
                    out[(by + r, bx + col)] = v.round().clamp(0.0, max) as u16;
                }
            }
        }
    }
    out
}

/// Integer displacement plus quarter-pel phase. The full displacement per
/// axis, in quarter pels, is `4 * integer + phase`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionVector {
    pub ix: i32,
    pub iy: i32,
    pub frac: FractionalPosition,
}

impl MotionVector {
    pub fn integer(ix: i32, iy: i32) -> Self {
        Self { ix, iy, frac: FractionalPosition::INTEGER }
    }

    pub fn from_quarter(qx: i32, qy: i32) -> Self {
        Self {
            ix: qx.div_euclid(4),
            iy: qy.div_euclid(4),
            frac: FractionalPosition { dx: qx.rem_euclid(4) as u8, dy: qy.rem_euclid(4) as u8 },
        }
    }

    pub fn quarter(self) -> (i32, i32) {
        (4 * self.ix + self.frac.dx as i32, 4 * self.iy + self.frac.dy as i32)
    }

    fn tie_key(self) -> (i32, i32, i32, u8, u8) {
        let (qx, qy) = self.quarter();
        (qx.abs() + qy.abs(), self.iy, self.ix, self.frac.dy, self.frac.dx)
    }
}

/// Motion search outcome for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchResult {
    pub mv: MotionVector,
    pub sad: u64,
}

fn offset(base: usize, d: i32) -> usize {
    (base as i64 + d as i64) as usize
}

/// Standard-filter prediction of a block at `(top, left)` displaced by `mv`.
pub fn predict_std(
    reference: &Plane<u16>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    mv: MotionVector,
) -> Result<Plane<u16>> {
    interp_std(reference, offset(top, mv.iy), offset(left, mv.ix), h, w, mv.frac)
}

/// Full-search block motion estimation.
///
/// `cur` is the block to predict and `(top, left)` its co-located position
/// in `reference`. Every integer displacement in `[-window, window]^2` is
/// scored by SAD; then the 7x7 quarter-pel neighbourhood of the best integer
/// vector (all 15 phases plus the integer positions around it) is scored with
/// the standard filters. Ties prefer the smaller `|qx| + |qy|`, then smaller
/// `iy`, `ix`, `dy`, `dx`.
pub fn motion_search(
    cur: &Plane<u16>,
    reference: &Plane<u16>,
    top: usize,
    left: usize,
    window: i32,
) -> Result<SearchResult> {
    let (h, w) = (cur.height(), cur.width());
    let reach_before = window as usize + 1 + MARGIN_BEFORE;
    let reach_after = window as usize + MARGIN_AFTER;
    if window < 0
        || top < reach_before
        || left < reach_before
        || top + h + reach_after > reference.height()
        || left + w + reach_after > reference.width()
    {
        return dim_err(format!(
            "block {h}x{w} at ({top}, {left}) with window {window} leaves the {}x{} reference",
            reference.height(),
            reference.width()
        ));
    }

    let score = |mv: MotionVector| -> Result<SearchResult> {
        let pred = predict_std(reference, top, left, h, w, mv)?;
        Ok(SearchResult { mv, sad: sad(cur, &pred)? })
    };
    let better = |a: &SearchResult, b: &SearchResult| (a.sad, a.mv.tie_key()) < (b.sad, b.mv.tie_key());

    let mut best = score(MotionVector::integer(0, 0))?;
    for iy in -window..=window {
        for ix in -window..=window {
            let cand = integer_sad(cur, reference, offset(top, iy), offset(left, ix));
            let cand = SearchResult { mv: MotionVector::integer(ix, iy), sad: cand };
            if better(&cand, &best) {
                best = cand;
            }
        }
    }

    let (bx, by) = best.mv.quarter();
    for qy in by - 3..=by + 3 {
        for qx in bx - 3..=bx + 3 {
            let cand = score(MotionVector::from_quarter(qx, qy))?;
            if better(&cand, &best) {
                best = cand;
            }
        }
    }
    Ok(best)
}

fn integer_sad(cur: &Plane<u16>, reference: &Plane<u16>, top: usize, left: usize) -> u64 {
    let mut s = 0u64;
    for r in 0..cur.height() {
        let a = cur.row(r);
        let b = &reference.row(top + r)[left..left + cur.width()];
        s += a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as u64).sum::<u64>();
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterChoice {
    Standard,
    Learned,
}

/// Per-block filter decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDecision {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
    pub mv: MotionVector,
    pub choice: FilterChoice,
    pub cost_std: f64,
    pub cost_nn: f64,
}

struct Selection {
    decision: BlockDecision,
    pred_std: Plane<u16>,
    pred_nn: Plane<u16>,
}

#[allow(clippy::too_many_arguments)]
fn select_inner(
    cur: &Plane<u16>,
    reference: &Plane<u16>,
    top: usize,
    left: usize,
    mv: MotionVector,
    filters: &FilterSet,
    qp: u8,
    lambda: f64,
) -> Result<Selection> {
    if mv.frac.is_integer() {
        return Err(Error::InvalidArgument("integer motion vectors bypass filter selection".into()));
    }
    let (h, w) = (cur.height(), cur.width());
    let filter = filters.select(qp, mv.frac)?;
    let pred_std = predict_std(reference, top, left, h, w, mv)?;
    let pred_nn = filter.predict_block(reference, offset(top, mv.iy), offset(left, mv.ix), h, w)?;
    let flag_bits = 1.0;
    let cost_std = sad(cur, &pred_std)? as f64 + lambda * flag_bits;
    let cost_nn = sad(cur, &pred_nn)? as f64 + lambda * flag_bits;
    let choice = if cost_nn < cost_std { FilterChoice::Learned } else { FilterChoice::Standard };
    Ok(Selection { decision: BlockDecision { top, left, h, w, mv, choice, cost_std, cost_nn }, pred_std, pred_nn })
}

/// Chooses between the standard and learned filter for one fractional block.
///
/// The learned filter is the one for `mv.frac` trained at the QP nearest to
/// `qp`, applied in fixed point. Ties go to the standard filter.
#[allow(clippy::too_many_arguments)]
pub fn select_filter(
    cur: &Plane<u16>,
    reference: &Plane<u16>,
    top: usize,
    left: usize,
    mv: MotionVector,
    filters: &FilterSet,
    qp: u8,
    lambda: f64,
) -> Result<BlockDecision> {
    Ok(select_inner(cur, reference, top, left, mv, filters, qp, lambda)?.decision)
}

/// A block of the tiling as `(top, left, height, width)`.
pub type Tile = (usize, usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub qps: Vec<u8>,
    /// Block sizes as (height, width), each at most 32x32.
    pub blocks: Vec<(usize, usize)>,
    pub window: i32,
    pub lambda: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { qps: vec![22, 27, 32, 37], blocks: vec![(16, 16)], window: 8, lambda: 0.0 }
    }
}

impl HarnessConfig {
    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&(h, w)| h == 0 || w == 0 || h > 32 || w > 32) {
            return Err(Error::InvalidArgument("block sizes must lie in 1..=32".into()));
        }
        if self.window < 0 {
            return Err(Error::InvalidArgument("search window must be non-negative".into()));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        self.window as usize + 2 + MARGIN
    }

    /// Block tiling `(top, left, h, w)` of a `width x height` frame.
    pub fn tiles(&self, width: usize, height: usize) -> Vec<Tile> {
        let mut out = Vec::new();
        let mut top = 0;
        let mut k = 0;
        while top < height {
            let (bh, bw) = self.blocks[k % self.blocks.len()];
            let h = bh.min(height - top);
            let mut left = 0;
            while left < width {
                let w = bw.min(width - left);
                out.push((top, left, h, w));
                left += w;
            }
            top += h;
            k += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionUsage {
    pub dx: u8,
    pub dy: u8,
    pub blocks: u64,
    pub learned: u64,
}

/// Prediction SAD of one inter frame under each regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame: usize,
    pub sad_std_only: u64,
    pub sad_nn_only: u64,
    pub sad_switchable: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpReport {
    pub qp: u8,
    /// QP of the learned filters actually used.
    pub filter_qp: u8,
    pub blocks: u64,
    pub fractional_blocks: u64,
    pub learned_blocks: u64,
    /// Fractional blocks at a position the filter set does not cover; they
    /// use the standard filter in every regime and signal no flag.
    pub uncovered_blocks: u64,
    /// `learned_blocks / fractional_blocks`; `None` when no block is fractional.
    pub hit_ratio: Option<f64>,
    /// One flag per fractional block.
    pub flag_bits: u64,
    /// Prediction PSNR over all inter frames; `None` for a perfect prediction.
    pub psnr_std_only: Option<f64>,
    pub psnr_nn_only: Option<f64>,
    pub psnr_switchable: Option<f64>,
    pub usage: Vec<PositionUsage>,
    pub frames: Vec<FrameStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub config: HarnessConfig,
    pub per_qp: Vec<QpReport>,
}

impl SimulationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_sequence(frames: &[Plane<u16>]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {}", frames.len())));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| f.width() != w || f.height() != h) {
        return dim_err("all frames must share one size");
    }
    Ok(())
}

struct BlockOutcome {
    tile: Tile,
    mv: MotionVector,
    selection: Option<Selection>,
    pred_int: Option<Plane<u16>>,
}

fn sse(a: &Plane<u16>, b: &Plane<u16>) -> u64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| ((x as i64 - y as i64).pow(2)) as u64).sum()
}

/// Runs the switchable harness over `frames` for every configured QP.
pub fn simulate(frames: &[Plane<u16>], filters: &FilterSet, config: &HarnessConfig) -> Result<SimulationReport> {
    check_sequence(frames)?;
    config.validate()?;
    let (width, height) = (frames[0].width(), frames[0].height());
    let pad = config.pad();
    let tiles = config.tiles(width, height);
    let trained: Vec<u8> = {
        let mut q: Vec<u8> = filters.iter().map(|f| f.qp).collect();
        q.sort_unstable();
        q.dedup();
        q
    };

    let mut per_qp = Vec::with_capacity(config.qps.len());
    for &qp in &config.qps {
        let filter_qp = nearest_qp(trained.iter().copied(), qp).unwrap_or(qp);
        let mut report = QpReport {
            qp,
            filter_qp,
            blocks: 0,
            fractional_blocks: 0,
            learned_blocks: 0,
            uncovered_blocks: 0,
            hit_ratio: None,
            flag_bits: 0,
            psnr_std_only: None,
            psnr_nn_only: None,
            psnr_switchable: None,
            usage: FractionalPosition::all_fractional()
                .map(|f| PositionUsage { dx: f.dx, dy: f.dy, ..Default::default() })
                .collect(),
            frames: Vec::new(),
        };
        let mut sse_std = 0u64;
        let mut sse_nn = 0u64;
        let mut sse_sw = 0u64;
        let mut samples = 0u64;

        for t in 1..frames.len() {
            let reference = compress_surrogate(&frames[t - 1], qp).pad_replicate(pad);
            let cur = &frames[t];
            let outcomes: Vec<Result<BlockOutcome>> = tiles
                .par_iter()
                .map(|&tile| {
                    let (top, left, h, w) = tile;
                    let block = cur.crop(top, left, h, w)?;
                    let found = motion_search(&block, &reference, top + pad, left + pad, config.window)?;
                    if found.mv.frac.is_integer() || filters.select(qp, found.mv.frac).is_err() {
                        let pred = predict_std(&reference, top + pad, left + pad, h, w, found.mv)?;
                        return Ok(BlockOutcome { tile, mv: found.mv, selection: None, pred_int: Some(pred) });
                    }
                    let sel =
                        select_inner(&block, &reference, top + pad, left + pad, found.mv, filters, qp, config.lambda)?;
                    Ok(BlockOutcome { tile, mv: found.mv, selection: Some(sel), pred_int: None })
                })
                .collect();

            let mut stats = FrameStats { frame: t, sad_std_only: 0, sad_nn_only: 0, sad_switchable: 0 };
            for outcome in outcomes {
                let o = outcome?;
                let (top, left, h, w) = o.tile;
                let block = cur.crop(top, left, h, w)?;
                report.blocks += 1;
                samples += (h * w) as u64;
                match (&o.selection, &o.pred_int) {
                    (Some(sel), _) => {
                        let learned = sel.decision.choice == FilterChoice::Learned;
                        report.fractional_blocks += 1;
                        report.flag_bits += 1;
                        let usage = &mut report.usage[o.mv.frac.index() - 1];
                        usage.blocks += 1;
                        let chosen = if learned {
                            report.learned_blocks += 1;
                            usage.learned += 1;
                            &sel.pred_nn
                        } else {
                            &sel.pred_std
                        };
                        let (s_std, s_nn) = (sad(&block, &sel.pred_std)?, sad(&block, &sel.pred_nn)?);
                        stats.sad_std_only += s_std;
                        stats.sad_nn_only += s_nn;
                        stats.sad_switchable += sad(&block, chosen)?;
                        sse_std += sse(&block, &sel.pred_std);
                        sse_nn += sse(&block, &sel.pred_nn);
                        sse_sw += sse(&block, chosen);
                    }
                    (None, Some(pred)) => {
                        if !o.mv.frac.is_integer() {
                            report.fractional_blocks += 1;
                            report.uncovered_blocks += 1;
                            report.usage[o.mv.frac.index() - 1].blocks += 1;
                        }
                        let s = sad(&block, pred)?;
                        let e = sse(&block, pred);
                        stats.sad_std_only += s;
                        stats.sad_nn_only += s;
                        stats.sad_switchable += s;
                        sse_std += e;
                        sse_nn += e;
                        sse_sw += e;
                    }
                    (None, None) => unreachable!("every block has a prediction"),
                }
            }
            report.frames.push(stats);
        }

        let bd = frames[0].bitdepth();
        let to_psnr = |e: u64| {
            let p = psnr_from_mse(e as f64 / samples as f64, bd);
            p.is_finite().then_some(p)
        };
        report.psnr_std_only = to_psnr(sse_std);
        report.psnr_nn_only = to_psnr(sse_nn);
        report.psnr_switchable = to_psnr(sse_sw);
        report.hit_ratio =
            (report.fractional_blocks > 0).then(|| report.learned_blocks as f64 / report.fractional_blocks as f64);
        per_qp.push(report);
    }

    Ok(SimulationReport { width, height, frames: frames.len(), config: config.clone(), per_qp })
}

/// Training records extracted from a sequence at one QP.
#[derive(Clone, Debug)]
pub struct DatasetOutcome {
    pub records: Vec<TrainingRecord>,
    /// Fractional blocks dropped because the 6-sample margin left the frame.
    pub skipped: usize,
}

/// Extracts `(reference patch, original block)` pairs for every fractional block.
///
/// The input patch is taken from the compressed reference at the integer
/// part of the motion vector, with a 6-sample margin on every side; the
/// target is the original current block. Blocks whose margin would leave the
/// unpadded frame are skipped and counted.
pub fn build_dataset(frames: &[Plane<u16>], qp: u8, config: &HarnessConfig) -> Result<DatasetOutcome> {
    check_sequence(frames)?;
    config.validate()?;
    let (width, height) = (frames[0].width(), frames[0].height());
    let pad = config.pad();
    let tiles = config.tiles(width, height);
    let mut records = Vec::new();
    let mut skipped = 0;
    for t in 1..frames.len() {
        let compressed = compress_surrogate(&frames[t - 1], qp);
        let reference = compressed.pad_replicate(pad);
        let cur = &frames[t];
        let found: Vec<Result<(Tile, MotionVector)>> = tiles
            .par_iter()
            .map(|&(top, left, h, w)| {
                let block = cur.crop(top, left, h, w)?;
                let r = motion_search(&block, &reference, top + pad, left + pad, config.window)?;
                Ok(((top, left, h, w), r.mv))
            })
            .collect();
        for f in found {
            let ((top, left, h, w), mv) = f?;
            if mv.frac.is_integer() {
                continue;
            }
            let row = top as i64 + mv.iy as i64;
            let col = left as i64 + mv.ix as i64;
            let m = MARGIN as i64;
            if row < m || col < m || row + h as i64 + m > height as i64 || col + w as i64 + m > width as i64 {
                skipped += 1;
                continue;
            }
            let patch = compressed.crop((row - m) as usize, (col - m) as usize, h + 2 * MARGIN, w + 2 * MARGIN)?;
            let target = cur.crop(top, left, h, w)?;
            records.push(TrainingRecord::new(mv.frac, qp, patch.map(|v| v as f64), target.map(|v| v as f64))?);
        }
    }
    Ok(DatasetOutcome { records, skipped })
}

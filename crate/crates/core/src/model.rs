//! The bias-free, activation-free three layer interpolation CNN.
//!
//! Layer 1 maps the reference patch to 64 channels with 9x9 kernels, layer 2
//! mixes them into 32 channels with a 32x64 matrix of 1x1 weights, and layer 3
//! applies one 5x5 kernel per channel and sums the results into the residual.
//! No layer pads, so an `H x W` block needs an `(H+12) x (W+12)` patch, and the
//! residual is added back to the co-located centre of that patch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{xcorr_acc, Plane};

pub const L1_CHANNELS: usize = 64;
pub const L1_SIZE: usize = 9;
pub const L2_CHANNELS: usize = 32;
pub const L3_SIZE: usize = 5;
/// Side of the receptive field, and of the collapsed filter.
pub const SUPPORT: usize = L1_SIZE + L3_SIZE - 1;
/// Samples of context needed on every side of a block.
pub const MARGIN: usize = SUPPORT / 2;

const K1_LEN: usize = L1_CHANNELS * L1_SIZE * L1_SIZE;
const K2_LEN: usize = L2_CHANNELS * L1_CHANNELS;
const K3_LEN: usize = L2_CHANNELS * L3_SIZE * L3_SIZE;
pub const WEIGHT_COUNT: usize = K1_LEN + K2_LEN + K3_LEN;

pub(crate) const K2_OFFSET: usize = K1_LEN;
pub(crate) const K3_OFFSET: usize = K1_LEN + K2_LEN;

/// Quarter-pel phase per axis, each in `0..4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FractionalPosition {
    pub dx: u8,
    pub dy: u8,
}

impl FractionalPosition {
    pub const INTEGER: Self = Self { dx: 0, dy: 0 };

    pub fn new(dx: u8, dy: u8) -> Result<Self> {
        if dx > 3 || dy > 3 {
            return Err(Error::InvalidArgument(format!("quarter-pel phase ({dx}, {dy}) out of range 0..=3")));
        }
        Ok(Self { dx, dy })
    }

    #[inline]
    pub fn is_integer(self) -> bool {
        self.dx == 0 && self.dy == 0
    }

    /// The 15 non-integer positions in (dy, dx) raster order.
    pub fn all_fractional() -> impl Iterator<Item = Self> {
        (0..4u8).flat_map(|dy| (0..4u8).map(move |dx| Self { dx, dy })).filter(|f| !f.is_integer())
    }

    /// Dense index in `0..16`, raster order over (dy, dx).
    #[inline]
    pub fn index(self) -> usize {
        self.dy as usize * 4 + self.dx as usize
    }
}

impl fmt::Display for FractionalPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.dx, self.dy)
    }
}

/// Architectures whose parameter budgets are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// The 9-1-5 network with biases on every layer.
    SrcnnWithBias,
    /// The same network with all biases removed.
    ScratchCnn,
    /// A single 13x13 filter.
    Collapsed,
}

impl Architecture {
    pub fn param_count(self) -> usize {
        match self {
            Self::SrcnnWithBias => WEIGHT_COUNT + L1_CHANNELS + L2_CHANNELS + 1,
            Self::ScratchCnn => WEIGHT_COUNT,
            Self::Collapsed => SUPPORT * SUPPORT,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srcnn_with_bias" => Ok(Self::SrcnnWithBias),
            "scratchcnn" => Ok(Self::ScratchCnn),
            "collapsed" => Ok(Self::Collapsed),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Convenience wrapper over [`Architecture::param_count`] keyed by name.
pub fn param_count(arch: &str) -> Result<usize> {
    Ok(arch.parse::<Architecture>()?.param_count())
}

/// Weights of one trained network.
///
/// All 8032 weights live in one flat buffer laid out as
/// `[k1 (64 x 9 x 9) | k2 (32 x 64) | k3 (32 x 5 x 5)]`, so the optimizer can
/// treat them as a single vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ScratchModel {
    params: Vec<f64>,
    pub frac: FractionalPosition,
    pub qp: u8,
}

/// Intermediate feature maps kept for backpropagation.
pub(crate) struct Trace {
    /// 64 maps of `(H+4) x (W+4)`.
    pub f1: Vec<f64>,
    /// 32 maps of `(H+4) x (W+4)`.
    pub f2: Vec<f64>,
    pub mid_h: usize,
    pub mid_w: usize,
}

impl ScratchModel {
    pub fn zeros(frac: FractionalPosition, qp: u8) -> Self {
        Self { params: vec![0.0; WEIGHT_COUNT], frac, qp }
    }

    /// Builds a model from a flat weight buffer in the documented layout.
    pub fn from_params(params: Vec<f64>, frac: FractionalPosition, qp: u8) -> Result<Self> {
        if params.len() != WEIGHT_COUNT {
            return dim_err(format!("expected {WEIGHT_COUNT} weights, got {}", params.len()));
        }
        Ok(Self { params, frac, qp })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn random(frac: FractionalPosition, qp: u8, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(frac, qp);
        let bounds = [
            (0..K2_OFFSET, 1.0 / ((L1_SIZE * L1_SIZE) as f64).sqrt()),
            (K2_OFFSET..K3_OFFSET, 1.0 / (L1_CHANNELS as f64).sqrt()),
            (K3_OFFSET..WEIGHT_COUNT, 1.0 / ((L2_CHANNELS * L3_SIZE * L3_SIZE) as f64).sqrt()),
        ];
        for (range, s) in bounds {
            for w in &mut m.params[range] {
                *w = rng.gen_range(-s..=s);
            }
        }
        m
    }

    #[inline]
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    #[inline]
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// 9x9 kernel of first-layer channel `i`.
    #[inline]
    pub fn k1(&self, i: usize) -> &[f64] {
        &self.params[i * 81..(i + 1) * 81]
    }

    pub fn k1_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.params[i * 81..(i + 1) * 81]
    }

    /// Mixing weight from layer-1 channel `i` into layer-2 channel `j`.
    #[inline]
    pub fn k2(&self, j: usize, i: usize) -> f64 {
        self.params[K2_OFFSET + j * L1_CHANNELS + i]
    }

    pub fn set_k2(&mut self, j: usize, i: usize, w: f64) {
        self.params[K2_OFFSET + j * L1_CHANNELS + i] = w;
    }

    /// Row `j` of the mixing matrix.
    #[inline]
    pub fn k2_row(&self, j: usize) -> &[f64] {
        &self.params[K2_OFFSET + j * L1_CHANNELS..K2_OFFSET + (j + 1) * L1_CHANNELS]
    }

    /// 5x5 kernel of third-layer channel `j`.
    #[inline]
    pub fn k3(&self, j: usize) -> &[f64] {
        &self.params[K3_OFFSET + j * 25..K3_OFFSET + (j + 1) * 25]
    }

    pub fn k3_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.params[K3_OFFSET + j * 25..K3_OFFSET + (j + 1) * 25]
    }

    fn check_input(x: &Plane<f64>) -> Result<(usize, usize)> {
        if x.width() < SUPPORT || x.height() < SUPPORT {
            return dim_err(format!(
                "network input must be at least {SUPPORT}x{SUPPORT}, got {}x{}",
                x.height(),
                x.width()
            ));
        }
        Ok((x.height() - 2 * MARGIN, x.width() - 2 * MARGIN))
    }

    pub(crate) fn residual_traced(&self, x: &Plane<f64>) -> Result<(Plane<f64>, Trace)> {
        let (oh, ow) = Self::check_input(x)?;
        let mid_h = oh + L3_SIZE - 1;
        let mid_w = ow + L3_SIZE - 1;
        let n = mid_h * mid_w;

        let mut f1 = vec![0.0; L1_CHANNELS * n];
        for (i, f) in f1.chunks_exact_mut(n).enumerate() {
            xcorr_acc(x.data(), x.width(), self.k1(i), L1_SIZE, L1_SIZE, f, mid_h, mid_w);
        }

        let mut f2 = vec![0.0; L2_CHANNELS * n];
        for (j, f) in f2.chunks_exact_mut(n).enumerate() {
            for (i, &w) in self.k2_row(j).iter().enumerate() {
                for (o, s) in f.iter_mut().zip(&f1[i * n..(i + 1) * n]) {
                    *o += w * s;
                }
            }
        }

        let mut r = vec![0.0; oh * ow];
        for (j, f) in f2.chunks_exact(n).enumerate() {
            xcorr_acc(f, mid_w, self.k3(j), L3_SIZE, L3_SIZE, &mut r, oh, ow);
        }
        let r = Plane::from_vec(ow, oh, r)?.with_bitdepth(x.bitdepth());
        Ok((r, Trace { f1, f2, mid_h, mid_w }))
    }

    /// Residual branch `R` alone.
    pub fn residual(&self, x: &Plane<f64>) -> Result<Plane<f64>> {
        Ok(self.residual_traced(x)?.0)
    }

    /// Prediction `Y = R + centre(X)` for an `(H+12) x (W+12)` input.
    pub fn forward(&self, x: &Plane<f64>) -> Result<Plane<f64>> {
        let mut y = self.residual(x)?;
        add_center(&mut y, x);
        Ok(y)
    }
}

pub(crate) fn add_center(y: &mut Plane<f64>, x: &Plane<f64>) {
    let w = y.width();
    for r in 0..y.height() {
        let src = &x.row(r + MARGIN)[MARGIN..MARGIN + w];
        for (c, s) in src.iter().enumerate() {
            y[(r, c)] += s;
        }
    }
}

/// Picks the trained QP closest to `qp`; ties go to the lower QP.
pub fn nearest_qp(trained: impl IntoIterator<Item = u8>, qp: u8) -> Option<u8> {
    trained.into_iter().min_by_key(|&t| ((t as i32 - qp as i32).abs(), t))
}

/// Trained networks keyed by fractional position and QP.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelBank {
    models: BTreeMap<(FractionalPosition, u8), ScratchModel>,
}

impl ModelBank {
    pub const DEFAULT_QPS: [u8; 4] = [22, 27, 32, 37];

    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: ScratchModel) {
        self.models.insert((model.frac, model.qp), model);
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, frac: FractionalPosition, qp: u8) -> Option<&ScratchModel> {
        self.models.get(&(frac, qp))
    }

    /// Models in (position, QP) order.
    pub fn iter(&self) -> impl Iterator<Item = &ScratchModel> {
        self.models.values()
    }

    /// Distinct trained QPs, ascending.
    pub fn qp_set(&self) -> Vec<u8> {
        let mut qps: Vec<u8> = self.models.keys().map(|&(_, qp)| qp).collect();
        qps.sort_unstable();
        qps.dedup();
        qps
    }

    /// True when every fractional position has a model for every QP in the bank.
    pub fn is_complete(&self) -> bool {
        let qps = self.qp_set();
        !qps.is_empty()
            && FractionalPosition::all_fractional().all(|f| qps.iter().all(|&qp| self.models.contains_key(&(f, qp))))
    }

    /// The model for `frac` whose trained QP is nearest to `qp`.
    pub fn select(&self, qp: u8, frac: FractionalPosition) -> Result<&ScratchModel> {
        let trained = self.models.keys().filter(|(f, _)| *f == frac).map(|&(_, q)| q);
        let best = nearest_qp(trained, qp).ok_or(Error::MissingEntry { dx: frac.dx, dy: frac.dy })?;
        Ok(&self.models[&(frac, best)])
    }
}

impl FromIterator<ScratchModel> for ModelBank {
    fn from_iter<I: IntoIterator<Item = ScratchModel>>(iter: I) -> Self {
        let mut bank = Self::new();
        for m in iter {
            bank.insert(m);
        }
        bank
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_input(seed: u64, w: usize, h: usize) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0)).unwrap()
    }

    /// Eqs. 1-4 spelled out with explicit loops and indexing.
    fn naive_forward(m: &ScratchModel, x: &Plane<f64>) -> Vec<f64> {
        let oh = x.height() - 12;
        let ow = x.width() - 12;
        let (mh, mw) = (oh + 4, ow + 4);
        let mut f1 = vec![vec![0.0; mh * mw]; 64];
        for i in 0..64 {
            for r in 0..mh {
                for c in 0..mw {
                    let mut s = 0.0;
                    for u in 0..9 {
                        for v in 0..9 {
                            s += x[(r + u, c + v)] * m.k1(i)[u * 9 + v];
                        }
                    }
                    f1[i][r * mw + c] = s;
                }
            }
        }
        let mut f2 = vec![vec![0.0; mh * mw]; 32];
        for j in 0..32 {
            for p in 0..mh * mw {
                f2[j][p] = (0..64).map(|i| m.k2(j, i) * f1[i][p]).sum();
            }
        }
        let mut y = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let mut s = 0.0;
                for j in 0..32 {
                    for u in 0..5 {
                        for v in 0..5 {
                            s += f2[j][(r + u) * mw + c + v] * m.k3(j)[u * 5 + v];
                        }
                    }
                }
                y[r * ow + c] = s + x[(r + 6, c + 6)];
            }
        }
        y
    }

    #[test]
    fn fractional_positions() {
        let all: Vec<_> = FractionalPosition::all_fractional().collect();
        assert_eq!(all.len(), 15);
        assert!(all.iter().all(|f| !f.is_integer()));
        assert!(FractionalPosition::new(4, 0).is_err());
    }

    #[test]
    fn zero_weights_copy_center() {
        let m = ScratchModel::zeros(FractionalPosition { dx: 1, dy: 0 }, 22);
        let x = random_input(1, 13, 13);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.data(), &[x[(6, 6)]]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = ScratchModel::random(FractionalPosition { dx: 2, dy: 3 }, 27, 9);
        let x = Plane::filled(17, 15, 0.0).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!((y.height(), y.width()), (3, 5));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_naive_layer_loops() {
        let m = ScratchModel::random(FractionalPosition { dx: 3, dy: 1 }, 32, 4);
        let x = random_input(5, 16, 20);
        let y = m.forward(&x).unwrap();
        assert_eq!((y.height(), y.width()), (8, 4));
        let oracle = naive_forward(&m, &x);
        let diff = y.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "max diff {diff}");
    }

    #[test]
    fn undersized_input_rejected() {
        let m = ScratchModel::zeros(FractionalPosition { dx: 1, dy: 1 }, 22);
        assert!(m.forward(&Plane::filled(12, 13, 0.0).unwrap()).is_err());
        assert!(m.forward(&Plane::filled(13, 12, 0.0).unwrap()).is_err());
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(param_count("srcnn_with_bias").unwrap(), 8129);
        assert_eq!(param_count("scratchcnn").unwrap(), 8032);
        assert_eq!(param_count("collapsed").unwrap(), 169);
        assert!(param_count("vrcnn").is_err());
    }

    #[test]
    fn nearest_qp_selection() {
        let qps = ModelBank::DEFAULT_QPS;
        assert_eq!(nearest_qp(qps, 27), Some(27));
        assert_eq!(nearest_qp(qps, 30), Some(32));
        assert_eq!(nearest_qp(qps, 24), Some(22));
        assert_eq!(nearest_qp(qps, 0), Some(22));
        assert_eq!(nearest_qp(qps, 63), Some(37));
        assert_eq!(nearest_qp([30, 20], 25), Some(20));
        assert_eq!(nearest_qp([], 25), None);
    }

    #[test]
    fn bank_select() {
        let f = FractionalPosition { dx: 2, dy: 0 };
        let bank: ModelBank = ModelBank::DEFAULT_QPS.iter().map(|&qp| ScratchModel::zeros(f, qp)).collect();
        assert_eq!(bank.qp_set(), vec![22, 27, 32, 37]);
        assert_eq!(bank.select(30, f).unwrap().qp, 32);
        assert_eq!(bank.select(27, f).unwrap().qp, 27);
        assert!(!bank.is_complete());
        assert!(matches!(
            bank.select(30, FractionalPosition { dx: 1, dy: 1 }),
            Err(Error::MissingEntry { dx: 1, dy: 1 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn homogeneous_and_shape_preserving(seed in any::<u64>(), a in -4.0f64..4.0,
                                            w in 13usize..24, h in 13usize..24) {
            let m = ScratchModel::random(FractionalPosition { dx: 1, dy: 2 }, 22, seed);
            let x1 = random_input(seed ^ 1, w, h);
            let x2 = random_input(seed ^ 2, w, h);
            let y = m.forward(&x1).unwrap();
            prop_assert_eq!((y.height(), y.width()), (h - 12, w - 12));
            let ya = m.forward(&x1.combine(a, &x1, 0.0).unwrap()).unwrap();
            prop_assert!(ya.max_abs_diff(&y.combine(a, &y, 0.0).unwrap()) <= 1e-9);

            let lhs = m.residual(&x1.combine(a, &x2, 0.5).unwrap()).unwrap();
            let rhs = m.residual(&x1).unwrap().combine(a, &m.residual(&x2).unwrap(), 0.5).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9);
        }
    }
}

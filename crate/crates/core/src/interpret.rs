//! Collapsing a trained [`ScratchModel`] into one 13x13 residual filter.
//!
//! With no biases and no activations the three layers compose into a single
//! linear map. For every channel `j` the first two layers reduce to one 9x9
//! kernel `A_j = sum_i k2[j, i] * k1_i`, and stacking a 5x5 cross-correlation
//! on top of a 9x9 one equals a single cross-correlation with their full
//! convolution. So
//!
//! ```text
//! M = sum_j full_conv(A_j, k3_j)        (13 x 13)
//! R = valid_xcorr(X, M)
//! ```
//!
//! The fixed-point form mirrors codec interpolation arithmetic: coefficients
//! are `round(M * 2^s)`, products accumulate in 64 bits, a rounding offset of
//! `2^(s-1)` is added before an arithmetic right shift by `s`, the co-located
//! centre sample is added back and the result is clipped to the sample range.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{dim_err, Error, Result};
use crate::model::{nearest_qp, FractionalPosition, ScratchModel, L1_SIZE, L2_CHANNELS, L3_SIZE, MARGIN, SUPPORT};
use crate::numerics::{full_conv_acc, xcorr_acc, Plane};

pub const TAPS: usize = SUPPORT * SUPPORT;
pub const DEFAULT_SHIFT: u8 = 6;

/// Integer coefficients `round(m * 2^shift)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedFilter {
    pub coeffs: Vec<i32>,
    pub shift: u8,
}

/// The 13x13 residual filter for one (position, QP).
#[derive(Clone, Debug, PartialEq)]
pub struct CollapsedFilter {
    m: Vec<f64>,
    pub frac: FractionalPosition,
    pub qp: u8,
    pub fixed: Option<FixedFilter>,
}

impl CollapsedFilter {
    pub fn new(m: Vec<f64>, frac: FractionalPosition, qp: u8) -> Result<Self> {
        if m.len() != TAPS {
            return dim_err(format!("collapsed filter needs {TAPS} coefficients, got {}", m.len()));
        }
        Ok(Self { m, frac, qp, fixed: None })
    }

    #[inline]
    pub fn coeffs(&self) -> &[f64] {
        &self.m
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.m[u * SUPPORT + v]
    }

    /// Sum of coefficients; near zero for a residual filter that preserves DC.
    pub fn dc_gain(&self) -> f64 {
        self.m.iter().sum()
    }

    /// Adds the fixed-point form at `shift` bits.
    pub fn quantize(&self, shift: u8) -> Result<Self> {
        if !(4..=14).contains(&shift) {
            return Err(Error::InvalidArgument(format!("shift {shift} outside 4..=14")));
        }
        let scale = (1u32 << shift) as f64;
        // f64::round rounds half away from zero.
        let coeffs = self.m.iter().map(|&c| (c * scale).round() as i32).collect();
        Ok(Self { fixed: Some(FixedFilter { coeffs, shift }), ..self.clone() })
    }

    /// Float prediction `valid_xcorr(x, M) + centre(x)`.
    pub fn apply_float(&self, x: &Plane<f64>) -> Result<Plane<f64>> {
        if x.width() < SUPPORT || x.height() < SUPPORT {
            return dim_err(format!("input must be at least {SUPPORT}x{SUPPORT}"));
        }
        let oh = x.height() - 2 * MARGIN;
        let ow = x.width() - 2 * MARGIN;
        let mut y = vec![0.0; oh * ow];
        xcorr_acc(x.data(), x.width(), &self.m, SUPPORT, SUPPORT, &mut y, oh, ow);
        for r in 0..oh {
            let src = &x.row(r + MARGIN)[MARGIN..MARGIN + ow];
            for (o, s) in y[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(Plane::from_vec(ow, oh, y)?.with_bitdepth(x.bitdepth()))
    }

    /// Integer prediction of an `(H+12) x (W+12)` patch.
    pub fn apply_fixed(&self, x: &Plane<u16>) -> Result<Plane<u16>> {
        if x.width() < SUPPORT || x.height() < SUPPORT {
            return dim_err(format!("input must be at least {SUPPORT}x{SUPPORT}"));
        }
        self.predict_block(x, MARGIN, MARGIN, x.height() - 2 * MARGIN, x.width() - 2 * MARGIN)
    }

    /// Integer prediction of the `h x w` block whose co-located integer
    /// position in `reference` starts at `(top, left)`. Reads a 6-sample
    /// margin around the block.
    pub fn predict_block(
        &self,
        reference: &Plane<u16>,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    ) -> Result<Plane<u16>> {
        let fixed = self
            .fixed
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("filter {} has no fixed-point form", self.frac)))?;
        if top < MARGIN
            || left < MARGIN
            || top + h + MARGIN > reference.height()
            || left + w + MARGIN > reference.width()
        {
            return dim_err(format!(
                "block {h}x{w} at ({top}, {left}) lacks a {MARGIN}-sample margin in {}x{} reference",
                reference.height(),
                reference.width()
            ));
        }
        let max = ((1u32 << reference.bitdepth()) - 1) as i64;
        let shift = fixed.shift;
        let offset = 1i64 << (shift - 1);
        let stride = reference.width();
        let data = reference.data();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let base = (top + r - MARGIN) * stride + left + c - MARGIN;
                let mut acc = 0i64;
                for u in 0..SUPPORT {
                    let row = &data[base + u * stride..base + u * stride + SUPPORT];
                    let k = &fixed.coeffs[u * SUPPORT..(u + 1) * SUPPORT];
                    acc += row.iter().zip(k).map(|(&s, &k)| s as i64 * k as i64).sum::<i64>();
                }
                let res = (acc + offset) >> shift;
                let center = data[(top + r) * stride + left + c] as i64;
                out.push((res + center).clamp(0, max) as u16);
            }
        }
        Ok(Plane::from_vec(w, h, out)?.with_bitdepth(reference.bitdepth()))
    }
}

/// Fuses the three kernel banks into the 13x13 residual filter.
pub fn collapse(model: &ScratchModel) -> CollapsedFilter {
    let mut m = vec![0.0; TAPS];
    let mut a = vec![0.0; L1_SIZE * L1_SIZE];
    for j in 0..L2_CHANNELS {
        a.iter_mut().for_each(|v| *v = 0.0);
        for (i, &w) in model.k2_row(j).iter().enumerate() {
            for (o, k) in a.iter_mut().zip(model.k1(i)) {
                *o += w * k;
            }
        }
        full_conv_acc(&a, L1_SIZE, L1_SIZE, model.k3(j), L3_SIZE, L3_SIZE, &mut m);
    }
    CollapsedFilter { m, frac: model.frac, qp: model.qp, fixed: None }
}

/// Collapsed filters keyed by fractional position and QP.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterSet {
    filters: BTreeMap<(FractionalPosition, u8), CollapsedFilter>,
}

impl FilterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, f: CollapsedFilter) {
        self.filters.insert((f.frac, f.qp), f);
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CollapsedFilter> {
        self.filters.values()
    }

    pub fn get(&self, frac: FractionalPosition, qp: u8) -> Option<&CollapsedFilter> {
        self.filters.get(&(frac, qp))
    }

    /// Filter for `frac` trained at the QP nearest to `qp` (ties to the lower QP).
    pub fn select(&self, qp: u8, frac: FractionalPosition) -> Result<&CollapsedFilter> {
        let trained = self.filters.keys().filter(|(f, _)| *f == frac).map(|&(_, q)| q);
        let best = nearest_qp(trained, qp).ok_or(Error::MissingEntry { dx: frac.dx, dy: frac.dy })?;
        Ok(&self.filters[&(frac, best)])
    }
}

impl FromIterator<CollapsedFilter> for FilterSet {
    fn from_iter<I: IntoIterator<Item = CollapsedFilter>>(iter: I) -> Self {
        let mut set = Self::new();
        for f in iter {
            set.insert(f);
        }
        set
    }
}

/// Files written by [`export_heatmap`].
#[derive(Clone, Debug)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    /// True when all coefficients were equal and the image is flat mid-gray.
    pub degenerate: bool,
}

/// 13 comma-separated rows; values use the shortest round-trip decimal form.
pub fn filter_to_csv(f: &CollapsedFilter) -> String {
    let mut s = String::new();
    for u in 0..SUPPORT {
        let row: Vec<String> = (0..SUPPORT).map(|v| format!("{:e}", f.at(u, v))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_filter_csv(text: &str) -> Result<Vec<f64>> {
    let mut m = Vec::with_capacity(TAPS);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        for cell in line.split(',') {
            let v = cell.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad coefficient `{cell}`: {e}")))?;
            m.push(v);
        }
    }
    if m.len() != TAPS {
        return Err(Error::Format(format!("expected {TAPS} coefficients, found {}", m.len())));
    }
    Ok(m)
}

/// Binary graymap of the coefficients, min-max normalized, each coefficient
/// drawn as a `scale x scale` square.
pub fn filter_to_pgm(f: &CollapsedFilter, scale: usize) -> (Vec<u8>, bool) {
    let lo = f.m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater);
    let side = SUPPORT * scale;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let c = f.at(y / scale, x / scale);
            let g = if degenerate { 128 } else { ((c - lo) / (hi - lo) * 255.0).round() as u8 };
            out.push(g);
        }
    }
    (out, degenerate)
}

/// Writes `<stem>.csv` and `<stem>.pgm` into `dir`.
pub fn export_heatmap(f: &CollapsedFilter, dir: &Path, stem: &str, scale: usize) -> Result<HeatmapFiles> {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, filter_to_csv(f))?;
    let (img, degenerate) = filter_to_pgm(f, scale.max(1));
    if degenerate {
        warn!("filter {} qp {} is constant; heatmap rendered as flat mid-gray", f.frac, f.qp);
    }
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::File::create(&pgm)?.write_all(&img)?;
    Ok(HeatmapFiles { csv, pgm, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::valid_xcorr;
    use crate::numerics::Kernel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const F: FractionalPosition = FractionalPosition { dx: 2, dy: 1 };

    fn random_plane(seed: u64, w: usize, h: usize) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn as_kernel(f: &CollapsedFilter) -> Kernel {
        Kernel::new(SUPPORT, SUPPORT, f.coeffs().to_vec()).unwrap()
    }

    #[test]
    fn zero_mixing_collapses_to_zero() {
        let mut m = ScratchModel::random(F, 22, 1);
        for j in 0..32 {
            for i in 0..64 {
                m.set_k2(j, i, 0.0);
            }
        }
        assert!(collapse(&m).coeffs().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn delta_path_collapses_to_delta() {
        let mut m = ScratchModel::zeros(F, 22);
        m.k1_mut(0)[40] = 1.0;
        m.set_k2(0, 0, 1.0);
        m.k3_mut(0)[12] = 1.0;
        let c = collapse(&m);
        assert_eq!(c.coeffs(), Kernel::delta(13, 13).unwrap().weights());
    }

    #[test]
    fn collapse_reproduces_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for k in 0..5 {
            let m = ScratchModel::random(F, 22, k);
            let f = collapse(&m);
            for t in 0..4 {
                let (w, h) = (rng.gen_range(13..30), rng.gen_range(13..30));
                let x = random_plane(k * 100 + t, w, h);
                let r = m.residual(&x).unwrap();
                let rm = valid_xcorr(&x, &as_kernel(&f)).unwrap();
                assert!(r.max_abs_diff(&rm) <= 1e-9);
                assert!(f.apply_float(&x).unwrap().max_abs_diff(&m.forward(&x).unwrap()) <= 1e-9);
            }
        }
    }

    #[test]
    fn collapse_is_linear_in_k3() {
        let m = ScratchModel::random(F, 22, 3);
        let mut scaled = m.clone();
        for j in 0..32 {
            scaled.k3_mut(j).iter_mut().for_each(|w| *w *= -2.5);
        }
        let a = collapse(&m);
        let b = collapse(&scaled);
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            assert!((x * -2.5 - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_filter_copies_center() {
        let f = CollapsedFilter::new(vec![0.0; TAPS], F, 22).unwrap();
        let x = random_plane(4, 20, 15);
        assert_eq!(f.apply_float(&x).unwrap(), x.crop(6, 6, 3, 8).unwrap());

        let xi = Plane::from_fn(20, 15, |r, c| ((r * 31 + c * 7) % 256) as u16).unwrap();
        let fq = f.quantize(6).unwrap();
        assert_eq!(fq.apply_fixed(&xi).unwrap(), xi.crop(6, 6, 3, 8).unwrap());
    }

    #[test]
    fn quantize_cases() {
        let mut m = vec![0.0; TAPS];
        m[0] = 1.0;
        m[1] = -0.0078125;
        m[2] = 0.0078125;
        let q = CollapsedFilter::new(m, F, 22).unwrap().quantize(6).unwrap();
        let fixed = q.fixed.unwrap();
        assert_eq!(&fixed.coeffs[..3], &[64, -1, 1]);
        assert_eq!(fixed.shift, 6);

        let f = CollapsedFilter::new(vec![0.0; TAPS], F, 22).unwrap();
        assert!(f.quantize(3).is_err());
        assert!(f.quantize(15).is_err());
    }

    #[test]
    fn quantize_matches_rounding_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m: Vec<f64> = (0..TAPS).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let f = CollapsedFilter::new(m.clone(), F, 22).unwrap();
        for s in [4u8, 6, 10, 14] {
            let q = f.quantize(s).unwrap().fixed.unwrap();
            for (c, &fx) in m.iter().zip(&q.coeffs) {
                let x = c * (1u32 << s) as f64;
                let oracle = if x >= 0.0 { (x + 0.5).floor() } else { -((-x + 0.5).floor()) };
                assert_eq!(fx as f64, oracle);
                assert!((x - fx as f64).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn fixed_matches_float_for_dyadic_filters() {
        // Coefficients on the 1/64 grid quantize exactly, so the only error
        // left is the final rounding and clipping.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: Vec<f64> = (0..TAPS).map(|_| rng.gen_range(-3i32..=3) as f64 / 64.0).collect();
        let f = CollapsedFilter::new(m, F, 22).unwrap().quantize(6).unwrap();
        let xi = Plane::from_fn(40, 40, |_, _| rng.gen_range(0u16..=255)).unwrap();
        let yf = f.apply_float(&xi.map(|v| v as f64)).unwrap();
        let yi = f.apply_fixed(&xi).unwrap();
        for (a, b) in yf.data().iter().zip(yi.data()) {
            assert!((a.clamp(0.0, 255.0) - *b as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn fixed_error_respects_coefficient_bound() {
        // |fixed - float| <= 255 * sum |q / 2^s - m| + 1 for any filter.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = vec![0.0; TAPS];
        for u in 3..11 {
            for v in 3..11 {
                m[u * SUPPORT + v] = rng.gen_range(-0.02..0.02);
            }
        }
        let xi = Plane::from_fn(40, 40, |_, _| rng.gen_range(0u16..=255)).unwrap();
        for shift in [6u8, 10, 14] {
            let f = CollapsedFilter::new(m.clone(), F, 22).unwrap().quantize(shift).unwrap();
            let q = &f.fixed.as_ref().unwrap().coeffs;
            let scale = (1u64 << shift) as f64;
            let coeff_err: f64 = q.iter().zip(&m).map(|(&qi, &mi)| (qi as f64 / scale - mi).abs()).sum();
            let bound = 255.0 * coeff_err + 1.0;
            let yf = f.apply_float(&xi.map(|v| v as f64)).unwrap();
            let yi = f.apply_fixed(&xi).unwrap();
            let worst = yf
                .data()
                .iter()
                .zip(yi.data())
                .map(|(a, b)| (a.clamp(0.0, 255.0) - *b as f64).abs())
                .fold(0.0, f64::max);
            assert!(worst <= bound, "shift {shift}: worst {worst} bound {bound}");
            if shift == 14 {
                assert!(worst <= 1.5, "shift 14: worst {worst}");
            }
        }
    }

    #[test]
    fn undersized_and_unquantized_inputs() {
        let f = CollapsedFilter::new(vec![0.0; TAPS], F, 22).unwrap();
        assert!(f.apply_float(&Plane::filled(12, 20, 0.0).unwrap()).is_err());
        assert!(f.apply_fixed(&Plane::filled(20, 20, 0).unwrap()).is_err());
        let q = f.quantize(6).unwrap();
        assert!(q.apply_fixed(&Plane::filled(20, 12, 0).unwrap()).is_err());
        assert!(q.predict_block(&Plane::filled(20, 20, 0).unwrap(), 5, 6, 4, 4).is_err());
    }

    #[test]
    fn filter_set_selects_nearest_qp() {
        let set: FilterSet =
            [22u8, 37].iter().map(|&qp| CollapsedFilter::new(vec![0.0; TAPS], F, qp).unwrap()).collect();
        assert_eq!(set.select(29, F).unwrap().qp, 22);
        assert_eq!(set.select(30, F).unwrap().qp, 37);
        assert!(set.select(30, FractionalPosition { dx: 1, dy: 1 }).is_err());
    }

    #[test]
    fn heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let delta = CollapsedFilter::new(Kernel::delta(13, 13).unwrap().into_weights(), F, 22).unwrap();
        let files = export_heatmap(&delta, dir.path(), "delta", 1).unwrap();
        assert!(!files.degenerate);
        let img = fs::read(&files.pgm).unwrap();
        let header = b"P5\n13 13\n255\n";
        assert_eq!(&img[..header.len()], header);
        let pixels = &img[header.len()..];
        assert_eq!(pixels.len(), 169);
        assert!(pixels.iter().enumerate().all(|(k, &p)| if k == 84 { p == 255 } else { p == 0 }));

        let zero = CollapsedFilter::new(vec![0.0; TAPS], F, 22).unwrap();
        let files = export_heatmap(&zero, dir.path(), "zero", 2).unwrap();
        assert!(files.degenerate);
        let img = fs::read(&files.pgm).unwrap();
        assert!(img[b"P5\n26 26\n255\n".len()..].iter().all(|&p| p == 128));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn csv_round_trips(coeffs in proptest::collection::vec(-1e3f64..1e3, TAPS)) {
            let f = CollapsedFilter::new(coeffs.clone(), F, 22).unwrap();
            prop_assert_eq!(parse_filter_csv(&filter_to_csv(&f)).unwrap(), coeffs);
        }
    }
}

//! Sample planes, real-valued kernels and the two convolution flavours used
//! throughout the crate.
//!
//! Network layers use *valid cross-correlation* (no kernel flip, no padding).
//! Kernel fusion uses *full convolution*, which is what makes
//! `valid_xcorr(valid_xcorr(x, a), b) == valid_xcorr(x, full_conv(a, b))` hold.

use std::ops::{Index, IndexMut};

use crate::error::{dim_err, Result};

/// A row-major 2-D grid of samples.
///
/// `f64` planes carry the training/collapse path, `u16` planes carry integer
/// luma samples on the codec path. `bitdepth` is metadata for both.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    bitdepth: u8,
    data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, T::default())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        if width == 0 || height == 0 {
            return dim_err(format!("plane must be at least 1x1, got {width}x{height}"));
        }
        Ok(Self { width, height, bitdepth: 8, data: vec![value; width * height] })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return dim_err(format!("plane must be at least 1x1, got {width}x{height}"));
        }
        if data.len() != width * height {
            return dim_err(format!("{} samples do not fill a {width}x{height} plane", data.len()));
        }
        Ok(Self { width, height, bitdepth: 8, data })
    }

    /// Builds a plane by evaluating `f(row, col)` at every position.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::from_vec(width, height, data)
    }

    pub fn with_bitdepth(mut self, bitdepth: u8) -> Self {
        self.bitdepth = bitdepth;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn bitdepth(&self) -> u8 {
        self.bitdepth
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    /// Returns the `h x w` sub-plane whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return dim_err(format!("crop {h}x{w} at ({top}, {left}) exceeds {}x{} plane", self.height, self.width));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in top..top + h {
            data.extend_from_slice(&self.row(r)[left..left + w]);
        }
        Ok(Self { width: w, height: h, bitdepth: self.bitdepth, data })
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            bitdepth: self.bitdepth,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the plane into a larger one, replicating border samples into a
    /// `margin`-wide frame on every side.
    pub fn pad_replicate(&self, margin: usize) -> Self {
        let w = self.width + 2 * margin;
        let h = self.height + 2 * margin;
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            let sr = r.saturating_sub(margin).min(self.height - 1);
            let src = self.row(sr);
            for c in 0..w {
                data.push(src[c.saturating_sub(margin).min(self.width - 1)]);
            }
        }
        Self { width: w, height: h, bitdepth: self.bitdepth, data }
    }
}

impl Plane<f64> {
    /// `self * a + other * b`, element-wise.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.width != other.width || self.height != other.height {
            return dim_err("combine needs planes of equal size");
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl<T> Index<(usize, usize)> for Plane<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.height && c < self.width);
        &self.data[r * self.width + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Plane<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.height && c < self.width);
        &mut self.data[r * self.width + c]
    }
}

/// A real-valued 2-D kernel, row-major, `kh` rows by `kw` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(kh: usize, kw: usize, weights: Vec<f64>) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return dim_err(format!("kernel must be at least 1x1, got {kh}x{kw}"));
        }
        if weights.len() != kh * kw {
            return dim_err(format!("{} weights do not fill a {kh}x{kw} kernel", weights.len()));
        }
        Ok(Self { kh, kw, weights })
    }

    pub fn zeros(kh: usize, kw: usize) -> Result<Self> {
        Self::new(kh, kw, vec![0.0; kh * kw])
    }

    /// Odd-sized kernel with a single 1 at the center.
    pub fn delta(kh: usize, kw: usize) -> Result<Self> {
        let mut k = Self::zeros(kh, kw)?;
        k.weights[(kh / 2) * kw + kw / 2] = 1.0;
        Ok(k)
    }

    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }

    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.weights[u * self.kw + v]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { kh: self.kh, kw: self.kw, weights: self.weights.iter().map(|w| w * s).collect() }
    }
}

/// Valid 2-D cross-correlation: `out[r, c] = sum_{u,v} input[r+u, c+v] * k[u, v]`.
pub fn valid_xcorr(input: &Plane<f64>, k: &Kernel) -> Result<Plane<f64>> {
    if k.kw > input.width || k.kh > input.height {
        return dim_err(format!("{}x{} kernel does not fit a {}x{} input", k.kh, k.kw, input.height, input.width));
    }
    let oh = input.height - k.kh + 1;
    let ow = input.width - k.kw + 1;
    let mut out = vec![0.0; oh * ow];
    xcorr_acc(input.data(), input.width, &k.weights, k.kh, k.kw, &mut out, oh, ow);
    Ok(Plane { width: ow, height: oh, bitdepth: input.bitdepth, data: out })
}

/// Accumulating valid cross-correlation on raw row-major slices.
///
/// `src` has row stride `sw`; `out` is `oh x ow` and is added to, not
/// overwritten. The innermost loop runs along contiguous output rows.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn xcorr_acc(
    src: &[f64],
    sw: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    for u in 0..kh {
        for v in 0..kw {
            let w = k[u * kw + v];
            if w == 0.0 {
                continue;
            }
            for r in 0..oh {
                let s = &src[(r + u) * sw + v..(r + u) * sw + v + ow];
                let o = &mut out[r * ow..(r + 1) * ow];
                for (o, s) in o.iter_mut().zip(s) {
                    *o += w * s;
                }
            }
        }
    }
}

/// Accumulating valid cross-correlation that produces a small kernel-shaped
/// output: `out[u, v] += sum_{r,c} src[r+u, c+v] * g[r, c]` for a `gh x gw`
/// weight map `g`. Used for weight gradients.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn xcorr_small_acc(
    src: &[f64],
    sw: usize,
    g: &[f64],
    gh: usize,
    gw: usize,
    out: &mut [f64],
    kh: usize,
    kw: usize,
) {
    for u in 0..kh {
        for v in 0..kw {
            let mut acc = 0.0;
            for r in 0..gh {
                let s = &src[(r + u) * sw + v..(r + u) * sw + v + gw];
                let gr = &g[r * gw..(r + 1) * gw];
                acc += s.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            }
            out[u * kw + v] += acc;
        }
    }
}

/// Accumulating full 2-D convolution of an `gh x gw` map with a `kh x kw`
/// kernel into an `(gh+kh-1) x (gw+kw-1)` output.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn full_conv_acc(g: &[f64], gh: usize, gw: usize, k: &[f64], kh: usize, kw: usize, out: &mut [f64]) {
    let ow = gw + kw - 1;
    for u in 0..kh {
        for v in 0..kw {
            let w = k[u * kw + v];
            if w == 0.0 {
                continue;
            }
            for r in 0..gh {
                let o = &mut out[(r + u) * ow + v..(r + u) * ow + v + gw];
                let gr = &g[r * gw..(r + 1) * gw];
                for (o, g) in o.iter_mut().zip(gr) {
                    *o += w * g;
                }
            }
        }
    }
}

/// Full 2-D convolution: `c[t] = sum_{u+v=t} a[u] * b[v]`, output
/// `(a.kh + b.kh - 1) x (a.kw + b.kw - 1)`.
pub fn full_conv(a: &Kernel, b: &Kernel) -> Kernel {
    let kh = a.kh + b.kh - 1;
    let kw = a.kw + b.kw - 1;
    let mut weights = vec![0.0; kh * kw];
    full_conv_acc(&a.weights, a.kh, a.kw, &b.weights, b.kh, b.kw, &mut weights);
    Kernel { kh, kw, weights }
}

/// The `h x w` sub-plane at `(top, left)`.
pub fn crop_center<T: Copy + Default>(
    input: &Plane<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<Plane<T>> {
    input.crop(top, left, h, w)
}

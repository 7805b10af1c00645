//! Distortion metrics and Bjøntegaard delta-rate.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Plane;

fn check_dims<T: Copy + Default, U: Copy + Default>(a: &Plane<T>, b: &Plane<U>) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return dim_err(format!("planes differ in size: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

pub fn sad(a: &Plane<u16>, b: &Plane<u16>) -> Result<u64> {
    check_dims(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as u64).sum())
}

pub fn mse(a: &Plane<u16>, b: &Plane<u16>) -> Result<f64> {
    check_dims(a, b)?;
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sse as f64 / a.data().len() as f64)
}

/// PSNR from a mean squared error; `f64::INFINITY` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, bitdepth: u8) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let max = ((1u32 << bitdepth) - 1) as f64;
    10.0 * (max * max / mse).log10()
}

/// `10 log10(MAX^2 / MSE)`; identical planes give `f64::INFINITY`.
pub fn psnr(a: &Plane<u16>, b: &Plane<u16>, bitdepth: u8) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, bitdepth))
}

/// One operating point of a rate-quality curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub rate: f64,
    pub psnr: f64,
}

impl RdPoint {
    pub fn new(rate: f64, psnr: f64) -> Result<Self> {
        if rate.is_nan() || rate <= 0.0 || rate.is_infinite() {
            return Err(Error::BdRate(format!("rate must be positive, got {rate}")));
        }
        if !psnr.is_finite() {
            return Err(Error::BdRate(format!("PSNR must be finite, got {psnr}")));
        }
        Ok(Self { rate, psnr })
    }
}

/// Least-squares cubic `log10(rate) = c0 + c1 t + c2 t^2 + c3 t^3` in the
/// normalized variable `t = (psnr - center) / scale`.
struct CubicFit {
    c: [f64; 4],
    center: f64,
    scale: f64,
}

impl CubicFit {
    fn new(points: &[RdPoint], center: f64, scale: f64) -> Result<Self> {
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for p in points {
            let t = (p.psnr - center) / scale;
            let basis = [1.0, t, t * t, t * t * t];
            let y = p.rate.log10();
            for i in 0..4 {
                atb[i] += basis[i] * y;
                for j in 0..4 {
                    ata[i][j] += basis[i] * basis[j];
                }
            }
        }
        Ok(Self { c: solve4(ata, atb)?, center, scale })
    }

    /// Integral of the fitted curve over `[lo, hi]` in PSNR units.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |p: f64| {
            let t = (p - self.center) / self.scale;
            let [a, b, c, d] = self.c;
            t * (a + t * (b / 2.0 + t * (c / 3.0 + t * d / 4.0)))
        };
        (anti(hi) - anti(lo)) * self.scale
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::BdRate("singular cubic fit".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

fn psnr_range(points: &[RdPoint]) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr), hi.max(p.psnr)))
}

fn validate(points: &[RdPoint], name: &str) -> Result<()> {
    if points.len() < 4 {
        return Err(Error::BdRate(format!("{name} curve needs at least 4 points, got {}", points.len())));
    }
    for p in points {
        RdPoint::new(p.rate, p.psnr)?;
    }
    let mut psnrs: Vec<f64> = points.iter().map(|p| p.psnr).collect();
    psnrs.sort_by(f64::total_cmp);
    if psnrs.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::BdRate(format!("{name} curve has repeated PSNR values")));
    }
    Ok(())
}

/// Bjøntegaard delta-rate of `test` against `anchor`, in percent.
///
/// Each curve is fitted with a cubic in PSNR for `log10(rate)`; the fits are
/// integrated over the overlapping PSNR interval and the mean log-rate
/// difference `d` is reported as `100 (10^d - 1)`. Negative means savings.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    validate(anchor, "anchor")?;
    validate(test, "test")?;
    let (alo, ahi) = psnr_range(anchor);
    let (tlo, thi) = psnr_range(test);
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if hi <= lo {
        return Err(Error::BdRate(format!("no PSNR overlap: [{alo}, {ahi}] vs [{tlo}, {thi}]")));
    }
    // One shared normalization keeps both fits equally conditioned.
    let center = 0.5 * (alo.min(tlo) + ahi.max(thi));
    let scale = (0.5 * (ahi.max(thi) - alo.min(tlo))).max(1e-9);
    let fa = CubicFit::new(anchor, center, scale)?;
    let ft = CubicFit::new(test, center, scale)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(avg) - 1.0))
}

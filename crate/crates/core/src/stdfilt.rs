//! Standard separable quarter-pel luma interpolation (HEVC/VVC).
//!
//! Integer pipeline for bit depth `bd`, quarter-pel phases `(dx, dy)`:
//!
//! ```text
//! tmp = dx != 0 ? (sum_k h[k] * ref[x + k - 3]) >> (bd - 8) : ref << (14 - bd)
//! val = dy != 0 ? (sum_k v[k] * tmp[y + k - 3]) >> 6       : tmp
//! out = clip((val + (1 << (13 - bd))) >> (14 - bd), 0, 2^bd - 1)
//! ```
//!
//! Horizontal filtering runs first over `h + 7` rows; the intermediate keeps
//! 14-bit headroom and is never clipped. Shifts are arithmetic (floor).

use crate::error::{dim_err, Error, Result};
use crate::model::FractionalPosition;
use crate::numerics::Plane;

/// HEVC/VVC luma interpolation coefficients (ITU-T H.265 8.5.3.3.3.1,
/// H.266 Table 27 without the alternative half-pel filter), indexed by
/// quarter-pel phase and aligned to sample offsets `-3..=4`.
const LUMA_TAPS: [[i32; 8]; 4] = [
    [0, 0, 0, 64, 0, 0, 0, 0],
    [-1, 4, -10, 58, 17, -5, 1, 0],
    [-1, 4, -11, 40, 40, -11, 4, -1],
    [0, 1, -5, 17, 58, -10, 4, -1],
];

/// Offset of the first aligned tap relative to the integer sample.
pub const TAP_OFFSET: isize = -3;
/// Samples needed before and after the block in a filtered direction.
pub const MARGIN_BEFORE: usize = 3;
pub const MARGIN_AFTER: usize = 4;

/// One standard luma filter phase. Coefficients sum to 64.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapFilter {
    pub phase: u8,
    /// Non-zero taps only: 8 for the half-pel phase, 7 for quarter phases.
    pub taps: Vec<i32>,
    /// Sample offset of `taps[0]` relative to the integer position.
    pub first_offset: isize,
    pub shift: u8,
}

impl TapFilter {
    pub fn sum(&self) -> i32 {
        self.taps.iter().sum()
    }
}

/// Standard coefficients for quarter-pel `phase` in `1..=3`.
pub fn std_coeffs(phase: u8) -> Result<TapFilter> {
    if !(1..=3).contains(&phase) {
        return Err(Error::InvalidArgument(format!("standard filters exist for phases 1..=3, got {phase}")));
    }
    let row = LUMA_TAPS[phase as usize];
    let first = row.iter().position(|&t| t != 0).unwrap_or(0);
    let last = row.iter().rposition(|&t| t != 0).unwrap_or(7);
    Ok(TapFilter { phase, taps: row[first..=last].to_vec(), first_offset: TAP_OFFSET + first as isize, shift: 6 })
}

/// The 8 aligned taps for `phase` in `0..=3` (phase 0 is the identity).
#[inline]
pub fn aligned_taps(phase: u8) -> &'static [i32; 8] {
    &LUMA_TAPS[phase as usize]
}

/// Interpolates the `h x w` block whose integer position in `reference` is
/// `(top, left)`, displaced by the quarter-pel phase `frac`.
pub fn interp_std(
    reference: &Plane<u16>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    frac: FractionalPosition,
) -> Result<Plane<u16>> {
    let (bh, ah) = if frac.dx != 0 { (MARGIN_BEFORE, MARGIN_AFTER) } else { (0, 0) };
    let (bv, av) = if frac.dy != 0 { (MARGIN_BEFORE, MARGIN_AFTER) } else { (0, 0) };
    if h == 0
        || w == 0
        || left < bh
        || top < bv
        || left + w + ah > reference.width()
        || top + h + av > reference.height()
    {
        return dim_err(format!(
            "block {h}x{w} at ({top}, {left}) with phase {frac} needs more margin in {}x{} reference",
            reference.height(),
            reference.width()
        ));
    }
    if frac.is_integer() {
        return reference.crop(top, left, h, w);
    }

    let bd = reference.bitdepth() as u32;
    let shift1 = bd - 8;
    let shift3 = 14 - bd;
    let offset3 = 1i32 << (shift3 - 1);
    let max = (1i32 << bd) - 1;
    let hf = aligned_taps(frac.dx);
    let vf = aligned_taps(frac.dy);

    let rows = h + bv + av;
    let row0 = top - bv;
    let mut tmp = vec![0i32; rows * w];
    for r in 0..rows {
        let src = reference.row(row0 + r);
        let out = &mut tmp[r * w..(r + 1) * w];
        if frac.dx != 0 {
            for (c, o) in out.iter_mut().enumerate() {
                let base = left + c - MARGIN_BEFORE;
                let s: i32 = hf.iter().zip(&src[base..base + 8]).map(|(&t, &x)| t * x as i32).sum();
                *o = s >> shift1;
            }
        } else {
            for (c, o) in out.iter_mut().enumerate() {
                *o = (src[left + c] as i32) << shift3;
            }
        }
    }

    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let val = if frac.dy != 0 {
                let s: i32 = vf.iter().enumerate().map(|(k, &t)| t * tmp[(r + k) * w + c]).sum();
                s >> 6
            } else {
                tmp[r * w + c]
            };
            out.push(((val + offset3) >> shift3).clamp(0, max) as u16);
        }
    }
    Ok(Plane::from_vec(w, h, out)?.with_bitdepth(reference.bitdepth()))
}

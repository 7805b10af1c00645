//! Synthetic content: textured frames and planted sub-pel motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::harness::{predict_std, MotionVector};
use crate::interpret::CollapsedFilter;
use crate::numerics::Plane;

/// Band-limited random texture in `[16, 239]`: white noise blurred with a
/// separable binomial `[1 4 6 4 1] / 16` kernel, then stretched.
pub fn texture(width: usize, height: usize, seed: u64) -> Plane<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = 2;
    let (pw, ph) = (width + 2 * pad, height + 2 * pad);
    let noise: Vec<f64> = (0..pw * ph).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut horiz = vec![0.0; width * ph];
    for r in 0..ph {
        for c in 0..width {
            horiz[r * width + c] = (0..5).map(|t| k[t] * noise[r * pw + c + t]).sum::<f64>() / 16.0;
        }
    }
    let mut blurred = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            blurred[r * width + c] = (0..5).map(|t| k[t] * horiz[(r + t) * width + c]).sum::<f64>() / 16.0;
        }
    }
    let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    Plane::from_vec(width, height, blurred.iter().map(|v| (16.0 + (v - lo) / span * 223.0).round() as u16).collect())
        .expect("non-empty texture")
}

fn margin_for(mv: MotionVector) -> usize {
    (mv.ix.unsigned_abs().max(mv.iy.unsigned_abs()) as usize) + 8
}

/// The whole frame displaced by `mv` with the standard filters, borders replicated:
/// `out(x) = frame(x + mv)`.
pub fn shift_frame_std(frame: &Plane<u16>, mv: MotionVector) -> Result<Plane<u16>> {
    let m = margin_for(mv);
    let padded = frame.pad_replicate(m);
    predict_std(&padded, m, m, frame.height(), frame.width(), mv)
}

/// The whole frame displaced by `mv` with a learned filter in fixed point.
pub fn shift_frame_filter(frame: &Plane<u16>, mv: MotionVector, filter: &CollapsedFilter) -> Result<Plane<u16>> {
    let m = margin_for(mv);
    let padded = frame.pad_replicate(m);
    let top = (m as i64 + mv.iy as i64) as usize;
    let left = (m as i64 + mv.ix as i64) as usize;
    filter.predict_block(&padded, top, left, frame.height(), frame.width())
}

/// `count` frames where each frame is the previous one displaced by the
/// motion vector returned by `motion(k)`, using `shift`.
pub fn planted_sequence(
    first: Plane<u16>,
    count: usize,
    motion: impl Fn(usize) -> MotionVector,
    shift: impl Fn(&Plane<u16>, MotionVector) -> Result<Plane<u16>>,
) -> Result<Vec<Plane<u16>>> {
    let mut frames = vec![first];
    for k in 1..count {
        let next = shift(&frames[k - 1], motion(k))?;
        frames.push(next);
    }
    Ok(frames)
}

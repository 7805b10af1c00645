use fracfilt::harness::motion_search;
use fracfilt::metrics::bd_rate;
use fracfilt::model::SUPPORT;
use fracfilt::synth::{shift_frame_std, texture};
use fracfilt::{
    collapse, crop_center, valid_xcorr, FractionalPosition, Kernel, MotionVector, Plane, RdPoint, ScratchModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean of `log10(rate)` over `[lo, hi]` for the cubic through four points,
/// by Lagrange interpolation and composite Simpson (exact for cubics).
fn lagrange_mean(points: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        let mut y = 0.0;
        for (i, &(xi, yi)) in points.iter().enumerate() {
            let mut l = 1.0;
            for (j, &(xj, _)) in points.iter().enumerate() {
                if i != j {
                    l *= (x - xj) / (xi - xj);
                }
            }
            y += yi * l;
        }
        y
    };
    let n = 64;
    let h = (hi - lo) / n as f64;
    let mut s = eval(lo) + eval(hi);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * eval(lo + k as f64 * h);
    }
    s * h / 3.0 / (hi - lo)
}

/// Independent four-point BD-rate: `(psnr, log10 rate)` pairs per curve.
fn bd_rate_lagrange(anchor: &[RdPoint], test: &[RdPoint]) -> f64 {
    let pts = |c: &[RdPoint]| c.iter().map(|p| (p.psnr, p.rate.log10())).collect::<Vec<_>>();
    let (a, t) = (pts(anchor), pts(test));
    let range =
        |c: &[(f64, f64)]| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let ((alo, ahi), (tlo, thi)) = (range(&a), range(&t));
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    100.0 * (10f64.powf(lagrange_mean(&t, lo, hi) - lagrange_mean(&a, lo, hi)) - 1.0)
}

fn random_curve(rng: &mut ChaCha8Rng) -> Vec<RdPoint> {
    let mut psnr = rng.gen_range(30.0..33.0);
    let mut rate = rng.gen_range(500.0..2000.0);
    (0..4)
        .map(|_| {
            let p = RdPoint::new(rate, psnr).unwrap();
            psnr += rng.gen_range(2.0..4.0);
            rate *= rng.gen_range(1.5..2.2);
            p
        })
        .collect()
}

#[test]
fn bd_rate_agrees_with_lagrange_simpson_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let a = random_curve(&mut rng);
        let t = random_curve(&mut rng);
        let Ok(fast) = bd_rate(&a, &t) else { continue };
        let oracle = bd_rate_lagrange(&a, &t);
        assert!((fast - oracle).abs() <= 0.01, "{fast} vs {oracle}");
    }
}

#[test]
fn collapsed_filter_matches_network_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let frac = FractionalPosition::new(3, 1).unwrap();
    for m in 0..5 {
        let model = ScratchModel::random(frac, 27, m);
        let kernel = Kernel::new(SUPPORT, SUPPORT, collapse(&model).coeffs().to_vec()).unwrap();
        for _ in 0..4 {
            let (h, w) = (rng.gen_range(13..=44), rng.gen_range(13..=44));
            let x = Plane::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let fused = valid_xcorr(&x, &kernel).unwrap();
            let layered = model.residual(&x).unwrap();
            assert!(fused.max_abs_diff(&layered) <= 1e-9);
            let y = model.forward(&x).unwrap();
            let center = crop_center(&x, 6, 6, h - 12, w - 12).unwrap();
            assert!(y.combine(1.0, &center, -1.0).unwrap().max_abs_diff(&layered) <= 1e-9);
        }
    }
}

#[test]
fn motion_search_recovers_planted_fractional_shifts() {
    let base = texture(128, 128, 42);
    let pad = 16;
    let reference = base.pad_replicate(pad);
    let mut total = 0;
    let mut hits = 0;
    for frac in FractionalPosition::all_fractional() {
        let mv = MotionVector { ix: -2, iy: 1, frac };
        let cur = shift_frame_std(&base, mv).unwrap();
        for top in (16..112).step_by(16) {
            for left in (16..112).step_by(16) {
                let block = cur.crop(top, left, 16, 16).unwrap();
                let found = motion_search(&block, &reference, top + pad, left + pad, 8).unwrap();
                total += 1;
                hits += usize::from(found.mv == mv);
            }
        }
    }
    assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
}

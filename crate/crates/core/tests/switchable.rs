use fracfilt::harness::simulate;
use fracfilt::interpret::TAPS;
use fracfilt::model::SUPPORT;
use fracfilt::synth::{planted_sequence, shift_frame_filter, shift_frame_std, texture};
use fracfilt::{CollapsedFilter, FilterSet, FractionalPosition, HarnessConfig, MotionVector};

/// Bilinear quarter-pel interpolation as a 13x13 residual; exact at shift 6.
fn bilinear(frac: FractionalPosition, qp: u8) -> CollapsedFilter {
    let (dx, dy) = (frac.dx as f64, frac.dy as f64);
    let mut m = vec![0.0; TAPS];
    let c = 6 * SUPPORT + 6;
    m[c] = (4.0 - dx) * (4.0 - dy) / 16.0 - 1.0;
    m[c + 1] = dx * (4.0 - dy) / 16.0;
    m[c + SUPPORT] = (4.0 - dx) * dy / 16.0;
    m[c + SUPPORT + 1] = dx * dy / 16.0;
    CollapsedFilter::new(m, frac, qp).unwrap().quantize(6).unwrap()
}

fn bilinear_set(qp: u8) -> FilterSet {
    FractionalPosition::all_fractional().map(|f| bilinear(f, qp)).collect()
}

fn motion(k: usize) -> MotionVector {
    MotionVector::from_quarter([5, -6, 3, 2][k % 4], [-2, 7, 6, -3][k % 4])
}

fn config() -> HarnessConfig {
    HarnessConfig { qps: vec![22], ..HarnessConfig::default() }
}

#[test]
fn learned_generated_sequence_prefers_learned() {
    let set = bilinear_set(22);
    let frames = planted_sequence(texture(96, 64, 21), 4, motion, |f, mv| {
        shift_frame_filter(f, mv, set.select(22, mv.frac).unwrap())
    })
    .unwrap();
    let report = simulate(&frames, &set, &config()).unwrap();
    let q = &report.per_qp[0];
    assert!(q.fractional_blocks > 0);
    assert!(q.hit_ratio.unwrap() >= 0.9);
    for f in &q.frames {
        assert!(f.sad_switchable <= f.sad_std_only.min(f.sad_nn_only));
    }
}

#[test]
fn standard_generated_sequence_prefers_standard() {
    let set = bilinear_set(22);
    let frames = planted_sequence(texture(96, 64, 22), 4, motion, shift_frame_std).unwrap();
    let report = simulate(&frames, &set, &config()).unwrap();
    let q = &report.per_qp[0];
    assert!(q.fractional_blocks > 0);
    assert!(q.hit_ratio.unwrap() <= 0.1);
    assert_eq!(q.usage.iter().map(|u| u.blocks).sum::<u64>(), q.fractional_blocks);
}

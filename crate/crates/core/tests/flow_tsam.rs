use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsam_core::flow::{
    cycle_validity, rescale_flow, synth_flow, warp_bilinear, warp_op, FlowField, Motion, ValidityConfig,
    ValidityMask,
};
use tsam_core::numerics::{grad_check, LinearMap, Tape, Tensor};
use tsam_core::tsam::{
    shift_and_align, temporal_shift, tsam_gated_conv, FrameAlignment, GatedConvVars, ShiftAlign, ShiftSpec,
    TemporalMix, TemporalShift,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn random_flow(h: usize, w: usize, amp: f64, rng: &mut ChaCha8Rng) -> FlowField {
    // Smooth-ish field: a random affine part plus per-pixel jitter.
    let (a, b, c, d) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-amp..amp), rng.random_range(-amp..amp));
    let jitter = amp * 0.3;
    let data: Vec<f32> = (0..h * w)
        .flat_map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let dx = c + a * (x - w as f64 / 2.0) + rng.random_range(-jitter..jitter);
            let dy = d + b * (y - h as f64 / 2.0) + rng.random_range(-jitter..jitter);
            [dx as f32, dy as f32]
        })
        .collect();
    FlowField::new(Tensor::new([h, w, 2], data).unwrap()).unwrap()
}

/// Independent per-pixel evaluation of the round-trip test.
fn cycle_oracle(fwd: &FlowField, bwd: &FlowField, delta: f64) -> Vec<f32> {
    let (h, w) = (bwd.height(), bwd.width());
    let get = |f: &FlowField, x: usize, y: usize| {
        let d = f.tensor().data();
        let i = 2 * (y * w + x);
        (d[i] as f64, d[i + 1] as f64)
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (bx, by) = get(bwd, x, y);
            let (lx, ly) = (x as f64 + bx, y as f64 + by);
            if lx < 0.0 || ly < 0.0 || lx > (w - 1) as f64 || ly > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (lx.floor() as usize, ly.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (lx - x0 as f64, ly - y0 as f64);
            let lerp = |p: (f64, f64), q: (f64, f64), t: f64| (p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t);
            let top = lerp(get(fwd, x0, y0), get(fwd, x1, y0), ax);
            let bot = lerp(get(fwd, x0, y1), get(fwd, x1, y1), ax);
            let (fx, fy) = lerp(top, bot, ay);
            let err = ((lx + fx - x as f64).powi(2) + (ly + fy - y as f64).powi(2)).sqrt();
            if err < delta {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

#[test]
fn cycle_validity_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut disagreements = 0;
    for _ in 0..10 {
        let fwd = random_flow(16, 16, 3.0, &mut rng);
        let bwd = random_flow(16, 16, 3.0, &mut rng);
        let delta = rng.random_range(0.5..4.0);
        let m = cycle_validity(&fwd, &bwd, &ValidityConfig::binary(delta)).unwrap();
        disagreements += m.values().iter().zip(cycle_oracle(&fwd, &bwd, delta)).filter(|(a, b)| **a != *b).count();
    }
    assert_eq!(disagreements, 0);
}

#[test]
fn consistent_analytic_pairs_are_valid_where_in_bounds() {
    let motions = [
        Motion::Constant { dx: 2.0, dy: -1.0 },
        Motion::Rotation { cx: 7.5, cy: 7.5, theta: 0.08 },
        Motion::Zoom { cx: 8.0, cy: 7.0, scale: 1.05 },
    ];
    for m in motions {
        let fwd = synth_flow(&m, 16, 16).unwrap();
        let bwd = synth_flow(&m.inverse(), 16, 16).unwrap();
        let mask = cycle_validity(&fwd, &bwd, &ValidityConfig::binary(0.1)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (lx, ly) = m.inverse().apply(x as f64, y as f64);
                let inside = lx >= 0.0 && ly >= 0.0 && lx <= 15.0 && ly <= 15.0;
                let (rx, ry) = m.apply(lx, ly);
                let back_ok = (rx - x as f64).abs() < 1e-6 && (ry - y as f64).abs() < 1e-6;
                if inside && back_ok {
                    assert_eq!(mask.values()[y * 16 + x], 1.0, "{m:?} at ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn inverse_translation_recovers_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let src = random(&[3, 12, 12], &mut rng);
    let (moved, _) = warp_bilinear(&src, &FlowField::constant(12, 12, 2.0, -1.0).unwrap()).unwrap();
    let (back, inb) = warp_bilinear(&moved, &FlowField::constant(12, 12, -2.0, 1.0).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for c in 0..3 {
        for y in 2..10 {
            for x in 3..9 {
                let i = (c * 12 + y) * 12 + x;
                assert_eq!(inb.values()[y * 12 + x], 1.0);
                worst = worst.max((back.data()[i] - src.data()[i]).abs());
            }
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn masked_warp_never_uses_out_of_bounds_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let fwd = random_flow(16, 16, 6.0, &mut rng);
        let bwd = random_flow(16, 16, 6.0, &mut rng);
        let (_, inb) = warp_bilinear(&Tensor::<f32>::zeros([1, 16, 16]), &bwd).unwrap();
        let v = cycle_validity(&fwd, &bwd, &ValidityConfig::binary(100.0)).unwrap();
        for (a, b) in inb.values().iter().zip(v.values()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            }
        }
    }
}

#[test]
fn rescale_preserves_direction_of_constant_fields() {
    for (dx, dy) in [(3.0, -2.0), (-5.0, 4.0), (0.5, 0.25)] {
        let f = FlowField::constant(32, 32, dx, dy).unwrap();
        for (h, w) in [(16, 16), (8, 4), (64, 64)] {
            let r = rescale_flow(&f, h, w).unwrap();
            for p in r.tensor().data().chunks(2) {
                assert_eq!(p[0].signum(), dx.signum());
                assert_eq!(p[1].signum(), dy.signum());
            }
        }
    }
}

/// Explicit gather: out[t, c] pulls frame t-1 for c < f, frame t+1 for f <= c < 2f.
fn gather_oracle(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let s = x.shape();
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    Tensor::from_fn(s.to_vec(), |i| {
        let (ti, ci, p) = (i / (c * hw), (i / hw) % c, i % hw);
        let src_t = if ci < f {
            ti.checked_sub(1)
        } else if ci < 2 * f {
            Some(ti + 1).filter(|&n| n < t)
        } else {
            Some(ti)
        };
        src_t.map_or(0.0, |st| x.data()[(st * c + ci) * hw + p])
    })
}

#[test]
fn temporal_shift_equals_gather_oracle_on_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let spec = ShiftSpec::default();
    for _ in 0..50 {
        let t = rng.random_range(1..=5);
        let c = rng.random_range(2..=16);
        let shape = [t, c, rng.random_range(1..4), rng.random_range(1..4)];
        let x = random(&shape, &mut rng);
        let f = spec.resolve(c).unwrap();
        assert_eq!(temporal_shift(&x, &spec).unwrap(), gather_oracle(&x, f));
    }
}

#[test]
fn temporal_shift_example_indices() {
    let x = Tensor::<f64>::from_fn([3, 8, 1, 1], |i| i as f64);
    let y = temporal_shift(&x, &ShiftSpec::default()).unwrap();
    let at = |t: &Tensor<f64>, ti: usize, c: usize| t.data()[ti * 8 + c];
    assert_eq!(at(&y, 1, 0), at(&x, 0, 0));
    assert_eq!(at(&y, 1, 1), at(&x, 2, 1));
    for c in 2..8 {
        assert_eq!(at(&y, 1, c), at(&x, 1, c));
    }
    let single = Tensor::<f64>::ones([1, 8, 2, 2]);
    let s = temporal_shift(&single, &ShiftSpec::default()).unwrap();
    assert!(s.data()[..8].iter().all(|&v| v == 0.0));
    assert!(s.data()[8..].iter().all(|&v| v == 1.0));
    let twice = temporal_shift(&y, &ShiftSpec::default()).unwrap();
    assert_ne!(twice, x);
    assert_eq!(&twice.data()[2..8], &x.data()[2..8]);
}

fn alignment(t: usize, h: usize, w: usize, motion: Motion, delta: f64) -> Arc<FrameAlignment> {
    let to_prev = vec![synth_flow(&motion.inverse(), h, w).unwrap(); t];
    let to_next = vec![synth_flow(&motion, h, w).unwrap(); t];
    let cfg = ValidityConfig::binary(delta);
    let vp = vec![cycle_validity(&to_next[0], &to_prev[0], &cfg).unwrap(); t];
    let vn = vec![cycle_validity(&to_prev[0], &to_next[0], &cfg).unwrap(); t];
    Arc::new(FrameAlignment::new(&to_prev, &to_next, &vp, &vn).unwrap())
}

fn random_alignment(t: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Arc<FrameAlignment> {
    let amp = (h.min(w) as f64 * 0.4).min(2.0);
    let flows: Vec<FlowField> = (0..2 * t).map(|_| random_flow(h, w, amp, rng)).collect();
    let masks: Vec<ValidityMask> = (0..2 * t)
        .map(|_| ValidityMask::new(Tensor::from_fn([h, w], |_| rng.random_range(0.0..1.0f32))).unwrap())
        .collect();
    Arc::new(FrameAlignment::new(&flows[..t], &flows[t..], &masks[..t], &masks[t..]).unwrap())
}

#[test]
fn zero_validity_returns_input_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = random(&[4, 8, 5, 5], &mut rng);
    let flows = vec![random_flow(5, 5, 2.0, &mut rng); 4];
    let zeros = vec![ValidityMask::zeros(5, 5); 4];
    let a = Arc::new(FrameAlignment::new(&flows, &flows, &zeros, &zeros).unwrap());
    let out = shift_and_align(&x, &a, &ShiftSpec::default()).unwrap();
    assert_eq!(out.tensor, x);
    assert_eq!(out.modified, 0..2);
}

#[test]
fn full_validity_and_zero_flow_is_temporal_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = random(&[5, 16, 4, 3], &mut rng);
    let flows = vec![FlowField::zeros(4, 3); 5];
    let ones = vec![ValidityMask::ones(4, 3); 5];
    let a = Arc::new(FrameAlignment::new(&flows, &flows, &ones, &ones).unwrap());
    let spec = ShiftSpec::default();
    // Boundary frames: the missing neighbour has no validity, so the current
    // frame is kept there, while TSM zero-fills.
    let out = shift_and_align(&x, &a, &spec).unwrap().tensor;
    let tsm = temporal_shift(&x, &spec).unwrap();
    let frame = 16 * 12;
    assert_eq!(&out.data()[frame..4 * frame], &tsm.data()[frame..4 * frame]);
    assert_eq!(FrameAlignment::identity(5, 4, 3).unwrap().frames(), 5);
}

#[test]
fn translating_pattern_is_realigned() {
    let (t, c, h, w) = (4, 8, 12, 16);
    let pattern = |x: f64, y: f64, ch: usize| ((0.7 * x + 0.3 * ch as f64).sin() + (0.45 * y).cos()) * 0.5;
    let x = Tensor::<f64>::from_fn([t, c, h, w], |i| {
        let (ti, ci, y, xx) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
        pattern(xx as f64 - ti as f64, y as f64, ci)
    });
    let a = alignment(t, h, w, Motion::Constant { dx: 1.0, dy: 0.0 }, 1.0);
    let spec = ShiftSpec::default();
    let aligned = shift_and_align(&x, &a, &spec).unwrap().tensor;
    let shifted = temporal_shift(&x, &spec).unwrap();
    let (mut worst, mut err_aligned, mut err_shifted, mut count) = (0.0f64, 0.0, 0.0, 0);
    for ti in 1..t - 1 {
        for ch in 0..2 {
            for y in 0..h {
                for xx in 1..w - 1 {
                    let i = ((ti * c + ch) * h + y) * w + xx;
                    let cur = pattern(xx as f64 - ti as f64, y as f64, ch);
                    worst = worst.max((aligned.data()[i] - cur).abs());
                    err_aligned += (aligned.data()[i] - cur).abs();
                    err_shifted += (shifted.data()[i] - cur).abs();
                    count += 1;
                }
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
    assert!(err_aligned / (count as f64) < err_shifted / count as f64);
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn linear_maps_have_exact_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let shape = [4, 8, 6, 7];
    let maps: Vec<Arc<dyn LinearMap<f64>>> = vec![
        Arc::new(TemporalShift { spec: ShiftSpec::default() }),
        Arc::new(ShiftAlign { spec: ShiftSpec::new(1, 4).unwrap(), alignment: random_alignment(4, 6, 7, &mut rng) }),
    ];
    for m in maps {
        let x = random(&shape, &mut rng);
        let y = random(&shape, &mut rng);
        let lhs = dot(&m.apply(&x).unwrap(), &y);
        let rhs = dot(&x, &m.adjoint(&y, &shape).unwrap());
        assert!((lhs - rhs).abs() < 1e-10, "{}: {lhs} vs {rhs}", m.name());
    }
    let warp = warp_op::<f64>(&random_flow(6, 7, 3.0, &mut rng));
    let x = random(&[3, 6, 7], &mut rng);
    let y = random(&[3, 6, 7], &mut rng);
    let lhs = dot(&warp.apply(&x).unwrap(), &y);
    let rhs = dot(&x, &warp.adjoint(&y, &[3, 6, 7]).unwrap());
    assert!((lhs - rhs).abs() < 1e-10);
}

fn gated_inputs(rng: &mut ChaCha8Rng, t: usize, c: usize, k: usize, hw: usize) -> Vec<Tensor<f64>> {
    vec![
        random(&[t, c, hw, hw], rng),
        random(&[k, c, 3, 3], rng),
        random(&[k], rng),
        random(&[k, c, 3, 3], rng),
        random(&[k], rng),
    ]
}

fn run_gated(tape: &mut Tape<f64>, v: &[tsam_core::Var], mix: &TemporalMix) -> tsam_core::Result<tsam_core::Var> {
    let w = GatedConvVars { feature_weight: v[1], feature_bias: v[2], gate_weight: v[3], gate_bias: v[4] };
    tsam_gated_conv(tape, v[0], mix, &w, 1, 1)
}

#[test]
fn zero_gate_halves_feature_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let mut inputs = gated_inputs(&mut rng, 3, 8, 4, 5);
    inputs[3] = Tensor::zeros(inputs[3].shape().to_vec());
    inputs[4] = Tensor::zeros([4]);
    let a = random_alignment(3, 5, 5, &mut rng);
    let mix = TemporalMix::ShiftAlign(ShiftSpec::default(), Arc::clone(&a));
    let mut tape = Tape::new();
    let v: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = run_gated(&mut tape, &v, &mix).unwrap();
    let mixed = ShiftAlign { spec: ShiftSpec::default(), alignment: a }.apply(&inputs[0]).unwrap();
    let feat = tsam_core::numerics::conv2d(&mixed, &inputs[1], Some(&inputs[2]), 1, 1).unwrap();
    let want = feat.map(|v| 0.5 * v);
    assert!(tape.value(out).max_abs_diff(&want).unwrap() < 1e-14);
}

#[test]
fn single_frame_with_zero_validity_is_plain_gated_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let inputs = gated_inputs(&mut rng, 1, 8, 4, 5);
    let flows = vec![random_flow(5, 5, 2.0, &mut rng)];
    let zeros = vec![ValidityMask::zeros(5, 5)];
    let a = Arc::new(FrameAlignment::new(&flows, &flows, &zeros, &zeros).unwrap());
    let mut tape = Tape::new();
    let v: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let aligned = run_gated(&mut tape, &v, &TemporalMix::ShiftAlign(ShiftSpec::default(), a)).unwrap();
    let plain = run_gated(&mut tape, &v, &TemporalMix::None).unwrap();
    assert_eq!(tape.value(aligned), tape.value(plain));
}

#[test]
fn gated_tsam_conv_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let inputs = gated_inputs(&mut rng, 3, 8, 3, 4);
    let a = random_alignment(3, 4, 4, &mut rng);
    let mix = TemporalMix::ShiftAlign(ShiftSpec::default(), a);
    let err = grad_check(
        |t, v| {
            let y = run_gated(t, v, &mix)?;
            let q = t.mul(y, y)?;
            t.sum(q)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn untouched_band_and_convex_fusion(seed in 0u64..100_000, t in 1usize..5, c in 2usize..17, hw in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[t, c, hw, hw], &mut rng);
        let spec = ShiftSpec::default();
        let f = spec.resolve(c).unwrap();
        let amp = hw as f64 * 0.4;
        let flows: Vec<FlowField> = (0..2 * t).map(|_| random_flow(hw, hw, amp, &mut rng)).collect();
        let masks: Vec<ValidityMask> = (0..2 * t)
            .map(|_| ValidityMask::new(Tensor::from_fn([hw, hw], |_| rng.random_range(0.0..1.0f32))).unwrap())
            .collect();
        let a = Arc::new(FrameAlignment::new(&flows[..t], &flows[t..], &masks[..t], &masks[t..]).unwrap());
        let out = shift_and_align(&x, &a, &spec).unwrap().tensor;
        let plane = hw * hw;
        let frame = |ti: usize, lo: usize, hi: usize| {
            Tensor::new([hi - lo, hw, hw], x.data()[(ti * c + lo) * plane..(ti * c + hi) * plane].to_vec()).unwrap()
        };
        for ti in 0..t {
            let lo = (ti * c + 2 * f) * plane;
            let hi = (ti + 1) * c * plane;
            prop_assert_eq!(&out.data()[lo..hi], &x.data()[lo..hi]);
            for (band, neighbour, flow, mask) in [
                (0..f, ti.checked_sub(1), &flows[ti], &masks[ti]),
                (f..2 * f, Some(ti + 1).filter(|&n| n < t), &flows[t + ti], &masks[t + ti]),
            ] {
                let warped = neighbour.map(|n| warp_bilinear(&frame(n, band.start, band.end), flow).unwrap().0);
                for (k, ch) in band.enumerate() {
                    for p in 0..plane {
                        let i = (ti * c + ch) * plane + p;
                        let orig = x.data()[i];
                        let got = out.data()[i];
                        match &warped {
                            None => prop_assert_eq!(got, orig),
                            Some(wp) => {
                                let v = mask.values()[p] as f64;
                                let w = wp.data()[k * plane + p];
                                prop_assert!((got - (v * w + (1.0 - v) * orig)).abs() < 1e-12);
                                prop_assert!(got >= w.min(orig) - 1e-12 && got <= w.max(orig) + 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsam_core::flow::{cycle_validity, warp_bilinear, Motion, ValidityConfig};
use tsam_core::synth::mask::{coverage_per_frame, COVERAGE_TOL};
use tsam_core::synth::{gen_clip, gen_mask, MaskKind, MaskSpec, MotionKind, Texture};

fn interior_fraction(values: &[f32], h: usize, w: usize, margin: usize) -> f64 {
    let (mut valid, mut total) = (0usize, 0usize);
    for y in margin..h - margin {
        for x in margin..w - margin {
            total += 1;
            valid += (values[y * w + x] == 1.0) as usize;
        }
    }
    valid as f64 / total as f64
}

#[test]
fn exact_flows_are_cycle_consistent_in_the_interior() {
    let (h, w, margin) = (48, 48, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for kind in MotionKind::ALL {
        for trial in 0..3 {
            let motion = kind.sample(3.0, h, w, &mut rng);
            let clip = gen_clip(&motion, Texture::ALL[trial % 3], 4, h, w, trial as u64).unwrap();
            for (f, b) in clip.flows_fwd.iter().zip(&clip.flows_bwd) {
                let v = cycle_validity(f, b, &ValidityConfig::binary(0.1)).unwrap();
                let frac = interior_fraction(v.values(), h, w, margin);
                assert!(frac >= 0.95, "{kind}: interior validity {frac}");
            }
        }
    }
}

#[test]
fn integer_translation_warp_recovers_previous_frame() {
    let (h, w) = (24, 32);
    let clip = gen_clip(&Motion::Constant { dx: 1.0, dy: 0.0 }, Texture::NoiseBlobs, 3, h, w, 5).unwrap();
    for t in 0..2 {
        let (warped, _) = warp_bilinear(&clip.frames.index0(t + 1).unwrap(), &clip.flows_fwd[t]).unwrap();
        let target = clip.frames.index0(t).unwrap();
        let mut worst = 0.0f32;
        for c in 0..3 {
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    let i = (c * h + y) * w + x;
                    worst = worst.max((warped.data()[i] - target.data()[i]).abs());
                }
            }
        }
        assert!(worst < 1e-4, "frame {t}: residual {worst}");
    }
}

#[test]
fn still_clip_has_identical_frames_and_zero_flow() {
    let clip = gen_clip(&Motion::still(), Texture::Checker, 4, 16, 16, 2).unwrap();
    let first = clip.frames.index0(0).unwrap();
    for t in 1..4 {
        assert_eq!(clip.frames.index0(t).unwrap().data(), first.data());
    }
    assert!(clip.flows_fwd.iter().chain(&clip.flows_bwd).all(|f| f.tensor().data().iter().all(|&v| v == 0.0)));
}

#[test]
fn masks_are_binary_and_within_band() {
    let (t, h, w) = (5, 64, 64);
    for kind in MaskKind::ALL {
        for band in 0..7u8 {
            for seed in 0..2 {
                let spec = MaskSpec::new(kind, band);
                let m = gen_mask(&spec, t, h, w, seed).unwrap();
                assert_eq!(m.shape(), &[t, 1, h, w]);
                assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0), "{kind} band {band}: not binary");
                let (lo, hi) = spec.coverage_band();
                for (i, c) in coverage_per_frame(&m).into_iter().enumerate() {
                    assert!(
                        c >= lo - COVERAGE_TOL && c <= hi + COVERAGE_TOL,
                        "{kind} band {band} seed {seed} frame {i}: coverage {c}"
                    );
                }
            }
        }
    }
}

#[test]
fn masks_are_reproducible_and_static_at_eval() {
    for kind in MaskKind::ALL {
        let spec = MaskSpec::new(kind, 2);
        assert_eq!(gen_mask(&spec, 4, 32, 32, 9).unwrap().data(), gen_mask(&spec, 4, 32, 32, 9).unwrap().data());
    }
    let m = gen_mask(&MaskSpec::for_eval(MaskKind::Stationary, 3), 5, 32, 32, 4).unwrap();
    let first = m.index0(0).unwrap();
    for t in 1..5 {
        assert_eq!(m.index0(t).unwrap().data(), first.data());
    }
}

#[test]
fn tiny_frames_reject_unreachable_bands() {
    assert!(gen_mask(&MaskSpec::new(MaskKind::ObjectLike, 3), 2, 2, 2, 0).is_err());
}

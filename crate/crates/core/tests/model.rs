use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsam_core::flow::{FlowField, ValidityConfig};
use tsam_core::losses::{adversarial_losses, recon_loss};
use tsam_core::model::discriminator::layer_forward;
use tsam_core::model::{AlignmentMode, Discriminator, DiscriminatorConfig, FlowPyramid, Generator, GeneratorConfig};
use tsam_core::numerics::grad_check;
use tsam_core::{Tape, Tensor};

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn clip(t: usize, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = Tensor::from_fn([t, 3, h, w], |_| rng.random_range(-1.0f32..1.0));
    let masks = Tensor::from_fn([t, 1, h, w], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
    (frames, masks)
}

fn zero_pyramid(g: &Generator<f32>, t: usize, h: usize, w: usize) -> FlowPyramid {
    let flows = vec![FlowField::zeros(h, w); t - 1];
    FlowPyramid::build(&flows, &flows, t, (h, w), &g.pyramid_resolutions(h, w), &ValidityConfig::default()).unwrap()
}

#[test]
fn composite_passes_known_pixels_for_twenty_inits() {
    let (t, h, w) = (3, 16, 16);
    for seed in 0..20 {
        let g = Generator::<f32>::new(GeneratorConfig::default(), seed).unwrap();
        let (frames, masks) = clip(t, h, w, 1000 + seed);
        let out = g.infer(&frames, &masks, Some(&zero_pyramid(&g, t, h, w))).unwrap();
        let plane = h * w;
        for (i, (&o, &f)) in out.data().iter().zip(frames.data()).enumerate() {
            if masks.data()[(i / (3 * plane)) * plane + i % plane] == 1.0 {
                assert_eq!(o.to_bits(), f.to_bits(), "seed {seed} element {i}");
            }
            assert!((-1.0..=1.0).contains(&o));
        }
    }
}

#[test]
fn all_hole_output_is_tanh_bounded_and_shaped() {
    let g = Generator::<f32>::new(GeneratorConfig::with_base(4), 5).unwrap();
    let (frames, _) = clip(4, 64, 64, 2);
    let masks = Tensor::zeros([4, 1, 64, 64]);
    let out = g.infer(&frames, &masks, Some(&zero_pyramid(&g, 4, 64, 64))).unwrap();
    assert_eq!(out.shape(), &[4, 3, 64, 64]);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn forward_is_bit_deterministic() {
    let g = Generator::<f32>::new(GeneratorConfig::with_base(4), 9).unwrap();
    let (frames, masks) = clip(3, 16, 16, 4);
    let p = zero_pyramid(&g, 3, 16, 16);
    let a = g.infer(&frames, &masks, Some(&p)).unwrap();
    let b = g.infer(&frames, &masks, Some(&p)).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn every_parameter_receives_gradient() {
    for alignment in [AlignmentMode::Shift, AlignmentMode::ShiftAlign] {
        let g = Generator::<f32>::new(GeneratorConfig { alignment, ..GeneratorConfig::with_base(4) }, 13).unwrap();
        let (frames, masks) = clip(3, 16, 16, 8);
        let (target, _) = clip(3, 16, 16, 99);
        let pyramid = zero_pyramid(&g, 3, 16, 16);
        let mut tape = Tape::new();
        let bound = g.bind(&mut tape);
        let out = g.forward(&mut tape, &bound, &frames, &masks, Some(&pyramid)).unwrap();
        let gt = tape.constant(target);
        let loss = recon_loss(&mut tape, out.raw, gt, &masks, 1.0, 6.0).unwrap();
        assert!(tape.value(loss).item().unwrap() > 0.0);
        tape.backward(loss).unwrap();
        for (p, &v) in g.params().iter().zip(bound.vars()) {
            let grad = tape.grad(v).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            let norm: f64 = grad.data().iter().map(|x| (*x as f64).powi(2)).sum();
            assert!(norm > 0.0, "{:?}: {} has zero gradient", alignment, p.name);
        }
    }
}

/// Distinct feature resolutions hosting a TSAM conv, walked from the stage
/// list: each block's entry conv sees the block input, the decoder TSAM
/// convs sit at the bottleneck and after each upsampling.
fn tsam_resolution_walk(cfg: &GeneratorConfig, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut down = 1;
    let mut out = vec![];
    for s in &cfg.stages {
        for b in 0..s.blocks {
            out.push((h / down, w / down));
            if b == 0 {
                down *= s.stride;
            }
        }
    }
    for _ in 0..=3 {
        out.push((h / down, w / down));
        down = (down / 2).max(1);
    }
    out.sort_unstable_by(|a, b| b.cmp(a));
    out.dedup();
    out
}

#[test]
fn pyramid_has_one_level_per_tsam_resolution() {
    for (h, w) in [(64, 64), (32, 48)] {
        let g = Generator::<f32>::new(GeneratorConfig::with_base(4), 0).unwrap();
        let want = tsam_resolution_walk(g.config(), h, w);
        let p = zero_pyramid(&g, 3, h, w);
        assert_eq!(p.resolutions(), want);
        assert_eq!(p.len(), 4);
    }
}

/// Direct 3x5x5 conv3d, stride (1, 2, 2), padding (1, 2, 2), with kernel
/// `k[o][c][dt][ky][kx]` stored as `w[o][dt * cin + c][ky][kx]`.
fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [t, cin, h, wd] = x.shape().try_into().unwrap();
    let cout = w.shape()[0];
    let (oh, ow) = ((h + 4 - 5) / 2 + 1, (wd + 4 - 5) / 2 + 1);
    let xv = |ti: i64, c: usize, y: i64, xx: i64| -> f64 {
        if ti < 0 || ti >= t as i64 || y < 0 || y >= h as i64 || xx < 0 || xx >= wd as i64 {
            0.0
        } else {
            x.data()[((ti as usize * cin + c) * h + y as usize) * wd + xx as usize]
        }
    };
    Tensor::from_fn([t, cout, oh, ow], |i| {
        let (ti, o, oy, ox) = (i / (cout * oh * ow), (i / (oh * ow)) % cout, (i / ow) % oh, i % ow);
        let mut acc = b.data()[o];
        for dt in 0..3 {
            for c in 0..cin {
                for ky in 0..5 {
                    for kx in 0..5 {
                        let wv = w.data()[((o * 3 * cin + dt * cin + c) * 5 + ky) * 5 + kx];
                        acc += wv * xv(ti as i64 + dt as i64 - 1, c, (oy * 2 + ky) as i64 - 2, (ox * 2 + kx) as i64 - 2);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn discriminator_layer_matches_conv3d_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (t, cin, cout, h) in [(3, 3, 2, 8), (5, 2, 4, 7), (4, 1, 1, 10)] {
        let x = uniform(&[t, cin, h, h], -1.0, 1.0, &mut rng);
        let w = uniform(&[cout, 3 * cin, 5, 5], -0.5, 0.5, &mut rng);
        let b = uniform(&[cout], -0.5, 0.5, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = layer_forward(&mut tape, xv, wv, bv).unwrap();
        let want = conv3d_oracle(&x, &w, &b);
        assert_eq!(tape.value(y).shape(), want.shape());
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn zero_weights_give_constant_scores() {
    let mut d = Discriminator::<f32>::new(DiscriminatorConfig { base_channels: 4, ..Default::default() }, 1).unwrap();
    for p in d.params_mut().iter_mut() {
        p.tensor.data_mut().fill(0.0);
    }
    let (video, _) = clip(5, 32, 32, 3);
    let mut tape = Tape::new();
    let bound = d.bind_frozen(&mut tape);
    let v = tape.constant(video);
    let s = d.forward(&mut tape, &bound, v).unwrap();
    let vals = tape.value(s).data();
    assert!(vals.iter().all(|&x| x == vals[0]));
}

#[test]
fn hinge_through_one_layer_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real = uniform(&[3, 2, 6, 6], -1.0, 1.0, &mut rng);
    let fake = uniform(&[3, 2, 6, 6], -1.0, 1.0, &mut rng);
    let w = uniform(&[2, 6, 5, 5], -0.3, 0.3, &mut rng);
    let b = uniform(&[2], -0.3, 0.3, &mut rng);
    let err = grad_check(
        |t, v| {
            let r = t.constant(real.clone());
            let dr = layer_forward(t, r, v[0], v[1])?;
            let df = layer_forward(t, v[2], v[0], v[1])?;
            let (d, g) = adversarial_losses(t, dr, df)?;
            t.add(d, g)
        },
        &[w, b, fake],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn negative_zero_known_pixels_pass_through() {
    let g = Generator::<f32>::new(GeneratorConfig::with_base(4), 2).unwrap();
    let (mut frames, masks) = clip(3, 16, 16, 6);
    frames.data_mut().iter_mut().step_by(7).for_each(|v| *v = -0.0);
    let out = g.infer(&frames, &masks, Some(&zero_pyramid(&g, 3, 16, 16))).unwrap();
    let plane = 16 * 16;
    for (i, (o, f)) in out.data().iter().zip(frames.data()).enumerate() {
        if masks.data()[(i / (3 * plane)) * plane + i % plane] == 1.0 {
            assert_eq!(o.to_bits(), f.to_bits(), "element {i}");
        }
    }
}

#[test]
fn composite_gradient_reaches_raw_only_in_holes() {
    let g = Generator::<f32>::new(GeneratorConfig::with_base(4), 3).unwrap();
    let (frames, masks) = clip(3, 16, 16, 12);
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape);
    let out = g.forward(&mut tape, &bound, &frames, &masks, Some(&zero_pyramid(&g, 3, 16, 16))).unwrap();
    let raw = tape.value(out.raw).clone();
    let probe = Tensor::from_fn(raw.shape().to_vec(), |i| ((i * 37 % 11) as f32 - 5.0) / 5.0);
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out.composite, p).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item().unwrap() as f64;
    let plane = 16 * 16;
    let want: f64 = (0..raw.numel())
        .map(|i| {
            let known = masks.data()[(i / (3 * plane)) * plane + i % plane] == 1.0;
            probe.data()[i] as f64 * if known { frames.data()[i] } else { raw.data()[i] } as f64
        })
        .sum();
    assert!((value - want).abs() < 1e-3, "{value} vs {want}");
}

//! Network wiring checked against hand-assembled reference paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegattn::attention::apply_attention;
use stegattn::model::{self, ConvBlockParams, BLOCK_CHANNELS};
use stegattn::numerics::ops::{self, ConvParams, Padding};
use stegattn::numerics::Tape;
use stegattn::{AttentionMode, ModelConfig, Shape, StegoModelParams, Tensor};

type P64 = StegoModelParams<Tensor<f64>>;

fn image(rng: &mut impl Rng, n: usize, size: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(n, 3, size, size), |_| rng.random_range(0.0..1.0))
}

fn params(seed: u64, mode: AttentionMode, decoder_attention: bool) -> P64 {
    let config = ModelConfig {
        decoder_attention,
        ..ModelConfig::new(mode)
    };
    let mut p = StegoModelParams::<Tensor<f64>>::init(seed, config);
    // Non-zero biases so the reference has to get them right too.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    p.for_each_mut(&mut |name, t| {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    });
    p
}

fn conv_same(x: &Tensor<f64>, c: &ConvParams<Tensor<f64>>) -> Tensor<f64> {
    let k = c.weight.shape().h;
    ops::conv2d(x, c, Padding::same(k, k)).unwrap()
}

fn block(x: &Tensor<f64>, b: &ConvBlockParams<Tensor<f64>>) -> Tensor<f64> {
    let parts = [&b.conv3, &b.conv4, &b.conv5].map(|c| ops::relu(&conv_same(x, c)));
    ops::concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap()
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

#[test]
fn conv_block_partitions_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = params(1, AttentionMode::Baseline, false);
    let x = Tensor::from_fn(Shape::new(2, 3, 12, 10), |_| rng.random_range(-1.0..1.0));
    let b = &p.prep[0];
    let y = model::conv_block_forward(&x, b).unwrap();
    assert_eq!(y.shape(), Shape::new(2, BLOCK_CHANNELS, 12, 10));
    let widths: Vec<usize> = [&b.conv3, &b.conv4, &b.conv5].iter().map(|c| c.weight.shape().n).collect();
    assert_eq!(widths, [50, 10, 5]);
    let mut start = 0;
    for c in [&b.conv3, &b.conv4, &b.conv5] {
        let width = c.weight.shape().n;
        let got = ops::slice_channels(&y, start, width).unwrap();
        let want = ops::relu(&conv_same(&x, c));
        assert!(close(&got, &want, 1e-12), "channels {start}..{}", start + width);
        start += width;
    }
}

#[test]
fn baseline_matches_attention_free_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = params(2, AttentionMode::Baseline, false);
    let (cover, secret) = (image(&mut rng, 2, 12), image(&mut rng, 2, 12));

    let mut x = secret.clone();
    for b in &p.prep {
        x = block(&x, b);
    }
    assert!(close(&model::prep_forward(&secret, &p).unwrap(), &x, 1e-12));

    let mut h = ops::concat_channels(&[&x, &cover]).unwrap();
    assert_eq!(h.shape().c, 68);
    assert_eq!(p.hiding[0].in_channels(), 68);
    for b in &p.hiding {
        h = block(&h, b);
    }
    let stego_ref = ops::sigmoid(&conv_same(&h, &p.hiding_out));
    let stego = p.hide(&cover, &secret).unwrap();
    assert!(close(&stego, &stego_ref, 1e-12));

    let mut r = stego_ref.clone();
    for b in &p.reveal {
        r = block(&r, b);
    }
    let revealed_ref = ops::sigmoid(&conv_same(&r, &p.reveal_out));
    assert!(close(&p.reveal(&stego).unwrap(), &revealed_ref, 1e-12));
}

#[test]
fn attention_sits_between_hiding_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in AttentionMode::TABLE_ORDER {
        let p = params(3, mode, true);
        assert_eq!(p.hiding_attn.len(), p.hiding.len() - 1);
        assert_eq!(p.reveal_attn.len(), p.reveal.len() - 1);
        let (cover, secret) = (image(&mut rng, 1, 10), image(&mut rng, 1, 10));

        let feats = model::prep_forward(&secret, &p).unwrap();
        let mut h = ops::concat_channels(&[&feats, &cover]).unwrap();
        for (i, b) in p.hiding.iter().enumerate() {
            h = block(&h, b);
            if let Some(a) = p.hiding_attn.get(i) {
                h = apply_attention(&h, mode, &a.channel, &a.spatial).unwrap();
            }
        }
        let stego_ref = ops::sigmoid(&conv_same(&h, &p.hiding_out));
        assert!(close(&model::hide_forward(&cover, &feats, &p).unwrap(), &stego_ref, 1e-12), "{mode:?}");

        let mut r = stego_ref.clone();
        for (i, b) in p.reveal.iter().enumerate() {
            r = block(&r, b);
            if let Some(a) = p.reveal_attn.get(i) {
                r = apply_attention(&r, mode, &a.channel, &a.spatial).unwrap();
            }
        }
        let revealed_ref = ops::sigmoid(&conv_same(&r, &p.reveal_out));
        assert!(close(&model::reveal_forward(&stego_ref, &p).unwrap(), &revealed_ref, 1e-12), "{mode:?}");
    }
}

#[test]
fn outputs_are_images_in_open_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = StegoModelParams::<Tensor>::init(4, ModelConfig::new(AttentionMode::Parallel));
    let cover = image(&mut rng, 3, 16).cast::<f32>();
    let secret = image(&mut rng, 3, 16).cast::<f32>();
    let stego = p.hide(&cover, &secret).unwrap();
    let revealed = p.reveal(&stego).unwrap();
    for t in [&stego, &revealed] {
        assert_eq!(t.shape(), Shape::new(3, 3, 16, 16));
        assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn wrong_image_shapes_are_rejected() {
    let p = params(5, AttentionMode::Baseline, false);
    let good = Tensor::<f64>::zeros(Shape::new(1, 3, 12, 12));
    let grey = Tensor::<f64>::zeros(Shape::new(1, 1, 12, 12));
    let tiny = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
    let other = Tensor::<f64>::zeros(Shape::new(1, 3, 10, 10));
    assert!(p.hide(&grey, &good).is_err());
    assert!(p.hide(&good, &tiny).is_err());
    assert!(p.hide(&good, &other).is_err());
    assert!(p.reveal(&grey).is_err());
}

fn forward_backward(p: &P64, cover: &Tensor<f64>, secret: &Tensor<f64>) -> (f64, Vec<(String, Tensor<f64>)>) {
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, true);
    let (c, s) = (tape.constant(cover.clone()), tape.constant(secret.clone()));
    let fwd = model::record_forward(&mut tape, &pv, c, s).unwrap();
    let grads = tape.backward(fwd.loss).unwrap();
    let mut out = Vec::new();
    let _ = pv.map(&mut |name, &v| out.push((name.to_owned(), grads.wrt(v, &tape).unwrap())));
    (tape.scalar(fwd.loss), out)
}

#[test]
fn every_mode_runs_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (cover, secret) = (image(&mut rng, 2, 12), image(&mut rng, 2, 12));
    for mode in AttentionMode::TABLE_ORDER {
        let p = params(6, mode, false);
        let (loss, grads) = forward_backward(&p, &cover, &secret);
        assert!(loss.is_finite() && loss > 0.0, "{mode:?}");
        let want = model::loss(
            &cover,
            &p.hide(&cover, &secret).unwrap(),
            &secret,
            &p.reveal(&p.hide(&cover, &secret).unwrap()).unwrap(),
            p.config.beta as f64,
        )
        .unwrap();
        assert!((loss - want).abs() <= 1e-12);
        assert_eq!(grads.len(), p.named_tensors().len());
        for (name, g) in &grads {
            assert!(g.all_finite(), "{mode:?} {name}");
        }
        let attn_grad: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with("hiding_attn"))
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
            .sum();
        assert_eq!(mode == AttentionMode::Baseline, attn_grad == 0.0, "{mode:?}: {attn_grad}");
        assert!(grads.iter().any(|(n, g)| n.starts_with("prep") && g.data().iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn small_gradient_steps_do_not_increase_loss() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (cover, secret) = (image(&mut rng, 2, 16), image(&mut rng, 2, 16));
        let mode = AttentionMode::TABLE_ORDER[seed as usize % 6];
        let mut p = params(seed, mode, false);
        let (before, grads) = forward_backward(&p, &cover, &secret);
        let mut it = grads.iter();
        p.for_each_mut(&mut |name, t| {
            let (gname, g) = it.next().unwrap();
            assert_eq!(name, gname);
            for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
                *v -= 1e-4 * d;
            }
        });
        let (after, _) = forward_backward(&p, &cover, &secret);
        assert!(after <= before, "seed {seed}: {before} -> {after}");
    }
}

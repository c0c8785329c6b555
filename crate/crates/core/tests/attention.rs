//! Attention maps against a direct scalar evaluation of their formulas,
//! plus the structural properties the maps must have.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegattn::attention::{apply_attention, channel_attention_map, spatial_attention_map, AttentionParams};
use stegattn::numerics::ops;
use stegattn::{AttentionMode, Shape, Tensor};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn features(rng: &mut impl Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn params(rng: &mut ChaCha8Rng, c: usize) -> AttentionParams<Tensor<f64>> {
    let mut p = AttentionParams::init(rng, c, 4);
    p.for_each_mut("a", &mut |_, t| {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    });
    p
}

/// sigmoid(W2 relu(W1 avg + b1) + b2 + W2 relu(W1 max + b1) + b2)
fn channel_formula(f: &Tensor<f64>, p: &AttentionParams<Tensor<f64>>) -> Vec<f64> {
    let s = f.shape();
    let (w1, b1, w2, b2) = (&p.channel.mlp1.weight, &p.channel.mlp1.bias, &p.channel.mlp2.weight, &p.channel.mlp2.bias);
    let hidden = w1.shape().n;
    let mlp = |d: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = (0..hidden)
            .map(|j| (b1.data()[j] + (0..s.c).map(|i| w1.at(j, i, 0, 0) * d[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..s.c)
            .map(|i| b2.data()[i] + (0..hidden).map(|j| w2.at(i, j, 0, 0) * z[j]).sum::<f64>())
            .collect()
    };
    let mut out = Vec::new();
    for n in 0..s.n {
        let plane = |c: usize| (0..s.h * s.w).map(move |k| f.at(n, c, k / s.w, k % s.w));
        let avg: Vec<f64> = (0..s.c).map(|c| plane(c).sum::<f64>() / (s.h * s.w) as f64).collect();
        let max: Vec<f64> = (0..s.c).map(|c| plane(c).fold(f64::NEG_INFINITY, f64::max)).collect();
        let (a, m) = (mlp(&avg), mlp(&max));
        out.extend(a.iter().zip(&m).map(|(a, m)| sigmoid(a + m)));
    }
    out
}

/// sigmoid(b + sum_k w[0,k] * zero-padded 7x7 window of [avg_c f, max_c f])
fn spatial_formula(f: &Tensor<f64>, p: &AttentionParams<Tensor<f64>>) -> Vec<f64> {
    let s = f.shape();
    let (w, b) = (&p.spatial.conv.weight, p.spatial.conv.bias.data()[0]);
    let mut out = Vec::new();
    for n in 0..s.n {
        let desc = |k: usize, y: usize, x: usize| {
            let vals = (0..s.c).map(|c| f.at(n, c, y, x));
            if k == 0 {
                vals.sum::<f64>() / s.c as f64
            } else {
                vals.fold(f64::NEG_INFINITY, f64::max)
            }
        };
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = b;
                for k in 0..2 {
                    for dy in 0..7 {
                        for dx in 0..7 {
                            let (iy, ix) = (y as isize + dy as isize - 3, x as isize + dx as isize - 3);
                            if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                acc += w.at(0, k, dy, dx) * desc(k, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    out
}

#[test]
fn maps_match_their_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let s = Shape::new(rng.random_range(1..=2), rng.random_range(1..=12), rng.random_range(1..=10), rng.random_range(1..=10));
        let f = features(&mut rng, s);
        let p = params(&mut rng, s.c);
        let mc = channel_attention_map(&f, &p.channel).unwrap();
        let ms = spatial_attention_map(&f, &p.spatial).unwrap();
        for (got, want) in mc.data().iter().zip(channel_formula(&f, &p)) {
            assert!((got - want).abs() <= 1e-5, "channel {got} vs {want}");
        }
        for (got, want) in ms.data().iter().zip(spatial_formula(&f, &p)) {
            assert!((got - want).abs() <= 1e-5, "spatial {got} vs {want}");
        }
    }
}

#[test]
fn constant_planes_make_both_descriptors_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = params(&mut rng, 5);
    let levels: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = Tensor::from_fn(Shape::new(1, 5, 6, 6), |i| levels[i / 36]);
    let mc = channel_attention_map(&f, &p.channel).unwrap();
    // With avg == max the map is sigmoid(2 * MLP(descriptor)).
    let hidden: Vec<f64> = (0..p.channel.mlp1.weight.shape().n)
        .map(|j| {
            let w = &p.channel.mlp1.weight;
            (p.channel.mlp1.bias.data()[j] + (0..5).map(|i| w.at(j, i, 0, 0) * levels[i]).sum::<f64>()).max(0.0)
        })
        .collect();
    for c in 0..5 {
        let w2 = &p.channel.mlp2.weight;
        let mlp = p.channel.mlp2.bias.data()[c] + hidden.iter().enumerate().map(|(j, z)| w2.at(c, j, 0, 0) * z).sum::<f64>();
        assert!((mc.data()[c] - sigmoid(2.0 * mlp)).abs() <= 1e-12);
    }
}

#[test]
fn constant_input_gives_constant_interior_spatial_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(&mut rng, 4);
    let f = Tensor::full(Shape::new(1, 4, 12, 10), 0.7);
    let ms = spatial_attention_map(&f, &p.spatial).unwrap();
    let centre = ms.at(0, 0, 6, 5);
    for y in 3..12 - 3 {
        for x in 3..10 - 3 {
            assert_eq!(ms.at(0, 0, y, x), centre);
        }
    }
}

#[test]
fn reweighting_never_amplifies_and_keeps_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in AttentionMode::TABLE_ORDER {
        let f = features(&mut rng, Shape::new(2, 6, 7, 5));
        let p = params(&mut rng, 6);
        let g = apply_attention(&f, mode, &p.channel, &p.spatial).unwrap();
        assert_eq!(g.shape(), f.shape());
        assert!(g.data().iter().zip(f.data()).all(|(a, b)| a.abs() <= b.abs()), "{mode:?}");
    }
}

#[test]
fn channel_map_ignores_pixel_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Shape::new(1, 6, 5, 5);
    let f = features(&mut rng, s);
    let p = params(&mut rng, 6);
    let mut perm: Vec<usize> = (0..25).collect();
    perm.shuffle(&mut rng);
    let g = Tensor::from_fn(s, |i| f.data()[(i / 25) * 25 + perm[i % 25]]);
    let (a, b) = (channel_attention_map(&f, &p.channel).unwrap(), channel_attention_map(&g, &p.channel).unwrap());
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn spatial_map_sees_only_channel_mean_and_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = Shape::new(1, 3, 6, 6);
    let p = params(&mut rng, 3);
    // Channels (a, b, c) and (b', a', c') with the same per-pixel mean and max.
    let (lo, hi) = (features(&mut rng, Shape::new(1, 1, 6, 6)), features(&mut rng, Shape::new(1, 1, 6, 6)));
    let top = Tensor::from_fn(Shape::new(1, 1, 6, 6), |i| lo.data()[i].max(hi.data()[i]) + 1.0);
    let mid = |i: usize, t: f64| lo.data()[i].min(hi.data()[i]) * (1.0 - t) + t * lo.data()[i].max(hi.data()[i]);
    let f = Tensor::from_fn(s, |i| match i / 36 {
        0 => mid(i % 36, 0.25),
        1 => mid(i % 36, 0.75),
        _ => top.data()[i % 36],
    });
    let g = Tensor::from_fn(s, |i| match i / 36 {
        0 => mid(i % 36, 0.5),
        1 => mid(i % 36, 0.5),
        _ => top.data()[i % 36],
    });
    let avg = |t: &Tensor<f64>| ops::channel_pool(t, ops::PoolKind::Avg);
    assert!(avg(&f).max_abs_diff(&avg(&g)) <= 1e-12);
    assert!(f.max_abs_diff(&g) > 0.1);
    let (mf, mg) = (spatial_attention_map(&f, &p.spatial).unwrap(), spatial_attention_map(&g, &p.spatial).unwrap());
    assert!(mf.max_abs_diff(&mg) <= 1e-12);
}

#[test]
fn sequential_orders_differ() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = features(&mut rng, Shape::new(1, 8, 6, 6));
    let p = params(&mut rng, 8);
    let cs = apply_attention(&f, AttentionMode::ChannelThenSpatial, &p.channel, &p.spatial).unwrap();
    let sc = apply_attention(&f, AttentionMode::SpatialThenChannel, &p.channel, &p.spatial).unwrap();
    assert!(cs.max_abs_diff(&sc) > 1e-6);
}

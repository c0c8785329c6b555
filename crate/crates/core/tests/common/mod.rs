//! Definitional loop implementations shared by the oracle and acceptance tests.
//! Each `*_suite` runs `count` random instances and returns the largest
//! deviation seen, scaled by `1 + |expected|`.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegattn::attention::{apply_attention, channel_attention_map, spatial_attention_map, AttentionParams};
use stegattn::metrics;
use stegattn::numerics::ops::{self, ConvKernel, ConvParams, DenseParams, Padding, PoolKind};
use stegattn::{AttentionMode, Shape, Tensor};

pub fn random(rng: &mut impl Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn unit(rng: &mut impl Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

pub fn deviation(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length");
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / (1.0 + w.abs()))
        .fold(0.0, f64::max)
}

pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: Padding) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let ho = xs.h + pad.top + pad.bottom + 1 - ws.h;
    let wo = xs.w + pad.left + pad.right + 1 - ws.w;
    let mut out = Vec::new();
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.at(co, 0, 0, 0);
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy + ky) as isize - pad.top as isize;
                                let ix = (ox + kx) as isize - pad.left as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Random shapes, kernels and asymmetric padding. Instances whose kernel
/// does not fit must be rejected; the rest must match the loop.
pub fn conv_suite(seed: u64, count: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..count {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(1..=8));
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (kh, kw) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let pad = Padding::new(
            rng.random_range(0..=3),
            rng.random_range(0..=3),
            rng.random_range(0..=3),
            rng.random_range(0..=3),
        );
        let x = random(&mut rng, Shape::new(n, cin, h, w));
        let params = ConvParams {
            weight: random(&mut rng, Shape::new(cout, cin, kh, kw)),
            bias: random(&mut rng, Shape::new(cout, 1, 1, 1)),
        };
        let fits = h + pad.top + pad.bottom >= kh && w + pad.left + pad.right >= kw;
        match (ops::conv2d(&x, &params, pad), fits) {
            (Ok(y), true) => worst = worst.max(deviation(y.data(), &conv_oracle(&x, &params.weight, &params.bias, pad))),
            (Err(_), false) => {}
            (Ok(_), false) => return Err(format!("case {case}: accepted a kernel larger than the padded input")),
            (Err(e), true) => return Err(format!("case {case}: rejected a valid instance: {e}")),
        }
    }
    Ok(worst)
}

/// The three-kernel block convolution against three separate loops.
pub fn fused_suite(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let cin = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(5..=16), rng.random_range(5..=16));
        let x = random(&mut rng, Shape::new(2, cin, h, w));
        let params: Vec<(Tensor<f64>, Tensor<f64>, Padding)> = [(3, 4), (4, 3), (5, 2)]
            .iter()
            .map(|&(k, c)| {
                (
                    random(&mut rng, Shape::new(c, cin, k, k)),
                    random(&mut rng, Shape::new(c, 1, 1, 1)),
                    Padding::same(k, k),
                )
            })
            .collect();
        let kernels: Vec<ConvKernel<f64>> = params
            .iter()
            .map(|(w, b, p)| ConvKernel {
                weight: w,
                bias: b,
                padding: *p,
            })
            .collect();
        let fused = ops::conv2d_fused(&x, &kernels).unwrap();
        let parts: Vec<Tensor<f64>> = params
            .iter()
            .map(|(wt, b, p)| Tensor::from_vec(Shape::new(2, wt.shape().n, h, w), conv_oracle(&x, wt, b, *p)).unwrap())
            .collect();
        let want = ops::concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        worst = worst.max(deviation(fused.data(), want.data()));
    }
    worst
}

/// Global and channel pooling, average and max.
pub fn pool_suite(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let s = Shape::new(rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=16));
        let x = random(&mut rng, s);
        let (mut gavg, mut gmax) = (Vec::new(), Vec::new());
        for n in 0..s.n {
            for c in 0..s.c {
                let (mut sum, mut best) = (0.0, f64::NEG_INFINITY);
                for y in 0..s.h {
                    for xx in 0..s.w {
                        sum += x.at(n, c, y, xx);
                        best = best.max(x.at(n, c, y, xx));
                    }
                }
                gavg.push(sum / (s.h * s.w) as f64);
                gmax.push(best);
            }
        }
        let (mut cavg, mut cmax) = (Vec::new(), Vec::new());
        for n in 0..s.n {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let vals: Vec<f64> = (0..s.c).map(|c| x.at(n, c, y, xx)).collect();
                    cavg.push(vals.iter().sum::<f64>() / s.c as f64);
                    cmax.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
        worst = worst
            .max(deviation(ops::global_pool(&x, PoolKind::Avg).data(), &gavg))
            .max(deviation(ops::global_pool(&x, PoolKind::Max).data(), &gmax))
            .max(deviation(ops::channel_pool(&x, PoolKind::Avg).data(), &cavg))
            .max(deviation(ops::channel_pool(&x, PoolKind::Max).data(), &cmax));
    }
    worst
}

pub fn dense_suite(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (n, din, dout) = (rng.random_range(1..=4), rng.random_range(1..=70), rng.random_range(1..=12));
        let x = random(&mut rng, Shape::new(n, din, 1, 1));
        let p = DenseParams {
            weight: random(&mut rng, Shape::new(dout, din, 1, 1)),
            bias: random(&mut rng, Shape::new(dout, 1, 1, 1)),
        };
        let mut want = Vec::new();
        for i in 0..n {
            for o in 0..dout {
                want.push(p.bias.at(o, 0, 0, 0) + (0..din).map(|j| p.weight.at(o, j, 0, 0) * x.at(i, j, 0, 0)).sum::<f64>());
            }
        }
        worst = worst.max(deviation(ops::dense(&x, &p).unwrap().data(), &want));
    }
    worst
}

/// Returns (worst mse deviation, worst psnr deviation).
pub fn mse_psnr_suite(seed: u64, count: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_mse, mut worst_psnr) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let s = Shape::new(rng.random_range(1..=2), 3, rng.random_range(1..=16), rng.random_range(1..=16));
        let (a, b) = (unit(&mut rng, s), unit(&mut rng, s));
        let mut sq = 0.0;
        for i in 0..a.len() {
            sq += (a.data()[i] - b.data()[i]).powi(2);
        }
        let want = sq / a.len() as f64;
        worst_mse = worst_mse
            .max((ops::mse(&a, &b).unwrap() - want).abs())
            .max((metrics::mse(&a, &b).unwrap() - want).abs());
        let want_psnr = 20.0 * 1.0f64.log10() - 10.0 * want.log10();
        worst_psnr = worst_psnr.max((metrics::psnr(&a, &b, 1.0).unwrap() - want_psnr).abs());
    }
    (worst_mse, worst_psnr)
}

/// SSIM straight from the definition: explicit 2-D window, explicit
/// weighted moments, one window at a time.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let (size, sigma) = (11usize, 1.5f64);
    let mut window = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for c in 0..s.c {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=s.h - size {
            for x0 in 0..=s.w - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let wgt = window[i][j] / total;
                        mx += wgt * a.at(0, c, y0 + i, x0 + j);
                        my += wgt * b.at(0, c, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let wgt = window[i][j] / total;
                        let (dx, dy) = (a.at(0, c, y0 + i, x0 + j) - mx, b.at(0, c, y0 + i, x0 + j) - my);
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cov += wgt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / s.c as f64
}

pub struct SsimSuite {
    pub oracle: f64,
    pub symmetry: f64,
    /// Largest |ssim(a, a) - 1|.
    pub identity: f64,
}

/// Mix of unrelated, correlated and nearly identical pairs, on square and
/// rectangular images.
pub fn ssim_suite(seed: u64, count: usize) -> SsimSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SsimSuite {
        oracle: 0.0,
        symmetry: 0.0,
        identity: 0.0,
    };
    for case in 0..count {
        let s = Shape::new(1, 3, rng.random_range(11..=18), rng.random_range(11..=18));
        let a = unit(&mut rng, s);
        let b = match case % 3 {
            0 => unit(&mut rng, s),
            1 => Tensor::from_fn(s, |i| a.data()[i] * 0.7 + rng.random_range(0.0..0.3)),
            _ => Tensor::from_fn(s, |i| (a.data()[i] + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0)),
        };
        let got = metrics::ssim(&a, &b).unwrap();
        r.oracle = r.oracle.max((got - ssim_oracle(&a, &b)).abs());
        r.symmetry = r.symmetry.max((metrics::ssim(&b, &a).unwrap() - got).abs());
        r.identity = r.identity.max((metrics::ssim(&a, &a).unwrap() - 1.0).abs());
    }
    r
}

/// Map range, map shapes, Baseline identity and Parallel ordering on
/// `count` random feature tensors. Returns the first violation.
pub fn attention_suite(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..count {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=16));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = [1e-3f32, 1.0, 30.0][case % 3];
        let f = Tensor::from_fn(Shape::new(n, c, h, w), |_| rng.random_range(-scale..scale));
        let ratio = rng.random_range(1..=8);
        let mut p = AttentionParams::init(&mut rng, c, ratio);
        p.for_each_mut("attn", &mut |name, t| {
            if name.ends_with("bias") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        });
        let fail = |what: &str| Err(format!("case {case} ({n},{c},{h},{w}): {what}"));
        let mc = channel_attention_map(&f, &p.channel).unwrap();
        let ms = spatial_attention_map(&f, &p.spatial).unwrap();
        if mc.shape() != Shape::new(n, c, 1, 1) || ms.shape() != Shape::new(n, 1, h, w) {
            return fail("map shape");
        }
        if !mc.data().iter().chain(ms.data()).all(|&v| v > 0.0 && v < 1.0) {
            return fail("map value outside (0, 1)");
        }
        let base = apply_attention(&f, AttentionMode::Baseline, &p.channel, &p.spatial).unwrap();
        if base.data().iter().zip(f.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return fail("baseline is not the identity");
        }
        let par = apply_attention(&f, AttentionMode::Parallel, &p.channel, &p.spatial).unwrap();
        let cs = ops::broadcast_mul(&ops::broadcast_mul(&f, &mc).unwrap(), &ms).unwrap();
        let sc = ops::broadcast_mul(&ops::broadcast_mul(&f, &ms).unwrap(), &mc).unwrap();
        for ((&a, &b), &v) in cs.data().iter().zip(sc.data()).zip(par.data()) {
            // Relative rounding slack, floored so subnormal products get a few ulps.
            let tol = 1e-6 * v.abs().max(f32::MIN_POSITIVE);
            if (a - v).abs() > tol || (b - v).abs() > tol {
                return fail(&format!("parallel order dependence: {a:e} {b:e} {v:e}"));
            }
        }
    }
    Ok(())
}

//! Forward and backward kernels for every differentiable operation.
//!
//! Forward functions validate shapes and return [`Error::Shape`] on mismatch.
//! Backward functions assume the shapes already passed the forward check.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::parallel::map_items;
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Zero padding applied to (top, bottom, left, right) before a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding::new(0, 0, 0, 0);

    pub const fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding {
            top,
            bottom,
            left,
            right,
        }
    }

    /// Padding that keeps spatial extents unchanged. Even kernels put the
    /// extra row/column at the bottom/right, so 4x4 gives (1, 2, 1, 2).
    pub const fn same(kh: usize, kw: usize) -> Self {
        let top = (kh - 1) / 2;
        let left = (kw - 1) / 2;
        Padding::new(top, kh - 1 - top, left, kw - 1 - left)
    }
}

/// Convolution weights: `weight` is (out, in, kh, kw), `bias` is (out, 1, 1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

/// Fully-connected weights: `weight` is (out, in, 1, 1), `bias` is (out, 1, 1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> ConvParams<Q> {
        ConvParams {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> DenseParams<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> DenseParams<Q> {
        DenseParams {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Avg,
    Max,
}

// ---------------------------------------------------------------------------
// convolution

/// One kernel of a (possibly fused) convolution.
#[derive(Clone, Copy)]
pub struct ConvKernel<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub padding: Padding,
}

struct KernelPlan {
    cout: usize,
    kh: usize,
    kw: usize,
    /// Offset of this kernel's footprint inside the shared frame.
    fy0: usize,
    fx0: usize,
    /// Number of leading frame taps this kernel uses.
    ntaps: usize,
    /// Channel offset in the concatenated output.
    out_offset: usize,
}

/// Shared im2col layout for kernels whose footprints nest inside each other.
///
/// Taps are ordered so that every kernel reads a prefix of them; the fused
/// convolution then needs one im2col buffer per item.
struct ConvPlan {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    frame_top: usize,
    frame_left: usize,
    /// Padded HWC buffer extents.
    hp: usize,
    wp: usize,
    taps: Vec<(usize, usize)>,
    kernels: Vec<KernelPlan>,
    cout_total: usize,
    rings: Vec<Ring>,
}

/// A run of taps read by the same set of kernels, with the span of output
/// channels those kernels occupy. Each ring is one GEMM, so the common core
/// of the footprints is multiplied against every output channel at once.
struct Ring {
    taps: std::ops::Range<usize>,
    channels: std::ops::Range<usize>,
}

impl ConvPlan {
    fn new<T: Real>(input: Shape, kernels: &[ConvKernel<'_, T>]) -> Result<Self> {
        const OP: &str = "conv2d";
        if kernels.is_empty() {
            return Err(Error::shape(OP, "no kernels"));
        }
        let cin = input.c;
        let mut out_hw = None;
        for k in kernels {
            let ws = k.weight.shape();
            if ws.c != cin {
                return Err(Error::shape(
                    OP,
                    format!("input has {cin} channels but weight {ws} expects {}", ws.c),
                ));
            }
            let bs = k.bias.shape();
            if bs != Shape::new(ws.n, 1, 1, 1) {
                return Err(Error::shape(
                    OP,
                    format!("bias {bs} does not match {} output channels", ws.n),
                ));
            }
            let p = k.padding;
            if input.h + p.top + p.bottom < ws.h || input.w + p.left + p.right < ws.w {
                return Err(Error::shape(
                    OP,
                    format!("padded input smaller than kernel {}x{}", ws.h, ws.w),
                ));
            }
            let hw = (
                input.h + p.top + p.bottom - ws.h + 1,
                input.w + p.left + p.right - ws.w + 1,
            );
            match out_hw {
                None => out_hw = Some(hw),
                Some(prev) if prev != hw => {
                    return Err(Error::shape(
                        OP,
                        format!("fused kernels disagree on output extent {prev:?} vs {hw:?}"),
                    ))
                }
                _ => {}
            }
        }
        let (ho, wo) = out_hw.unwrap();
        let frame_top = kernels.iter().map(|k| k.padding.top).max().unwrap();
        let frame_left = kernels.iter().map(|k| k.padding.left).max().unwrap();

        struct Rect {
            idx: usize,
            y0: usize,
            x0: usize,
            kh: usize,
            kw: usize,
        }
        let mut rects: Vec<Rect> = kernels
            .iter()
            .enumerate()
            .map(|(idx, k)| {
                let ws = k.weight.shape();
                Rect {
                    idx,
                    y0: frame_top - k.padding.top,
                    x0: frame_left - k.padding.left,
                    kh: ws.h,
                    kw: ws.w,
                }
            })
            .collect();
        rects.sort_by_key(|r| (r.kh * r.kw, r.idx));
        for pair in rects.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let nested = a.y0 >= b.y0
                && a.x0 >= b.x0
                && a.y0 + a.kh <= b.y0 + b.kh
                && a.x0 + a.kw <= b.x0 + b.kw;
            if !nested {
                return Err(Error::shape(
                    OP,
                    "fused kernel footprints must nest inside each other",
                ));
            }
        }

        let mut taps = Vec::new();
        let mut ntaps = vec![0; kernels.len()];
        let mut prev: Option<&Rect> = None;
        for r in &rects {
            for fy in r.y0..r.y0 + r.kh {
                for fx in r.x0..r.x0 + r.kw {
                    let inside_prev = prev.is_some_and(|p| {
                        fy >= p.y0 && fy < p.y0 + p.kh && fx >= p.x0 && fx < p.x0 + p.kw
                    });
                    if !inside_prev {
                        taps.push((fy, fx));
                    }
                }
            }
            ntaps[r.idx] = taps.len();
            prev = Some(r);
        }
        let frame_h = rects.last().map(|r| r.y0 + r.kh).unwrap();
        let frame_w = rects.last().map(|r| r.x0 + r.kw).unwrap();

        let mut out_offset = 0;
        let plans: Vec<KernelPlan> = kernels
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let ws = k.weight.shape();
                let plan = KernelPlan {
                    cout: ws.n,
                    kh: ws.h,
                    kw: ws.w,
                    fy0: frame_top - k.padding.top,
                    fx0: frame_left - k.padding.left,
                    ntaps: ntaps[i],
                    out_offset,
                };
                out_offset += ws.n;
                plan
            })
            .collect();

        let mut bounds: Vec<usize> = plans.iter().map(|k| k.ntaps).collect();
        bounds.sort_unstable();
        bounds.dedup();
        let mut rings = Vec::with_capacity(bounds.len());
        let mut start = 0;
        for &end in &bounds {
            let users = plans.iter().filter(|k| k.ntaps >= end);
            let lo = users.clone().map(|k| k.out_offset).min().expect("widest kernel reads every tap");
            let hi = users.map(|k| k.out_offset + k.cout).max().expect("widest kernel reads every tap");
            rings.push(Ring {
                taps: start..end,
                channels: lo..hi,
            });
            start = end;
        }

        Ok(ConvPlan {
            rings,
            cin,
            h: input.h,
            w: input.w,
            ho,
            wo,
            frame_top,
            frame_left,
            hp: ho + frame_h - 1,
            wp: wo + frame_w - 1,
            taps,
            kernels: plans,
            cout_total: out_offset,
        })
    }

    fn k_total(&self) -> usize {
        self.taps.len() * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// All weights as one (cout_total x ntaps*cin) matrix, columns in
    /// tap-major plan order; taps a kernel does not read stay zero.
    fn pack_weights<T: Real>(&self, kernels: &[ConvKernel<'_, T>]) -> Vec<T> {
        let (cin, k_total) = (self.cin, self.k_total());
        let mut packed = vec![T::ZERO; self.cout_total * k_total];
        for (kp, k) in self.kernels.iter().zip(kernels) {
            let wd = k.weight.data();
            for (t, &(fy, fx)) in self.taps[..kp.ntaps].iter().enumerate() {
                let (ky, kx) = (fy - kp.fy0, fx - kp.fx0);
                for co in 0..kp.cout {
                    let row = (kp.out_offset + co) * k_total + t * cin;
                    for ci in 0..cin {
                        packed[row + ci] = wd[((co * cin + ci) * kp.kh + ky) * kp.kw + kx];
                    }
                }
            }
        }
        packed
    }

    /// One kernel's weight-shaped gradient out of a packed matrix.
    fn unpack_weight<T: Real>(&self, kp: &KernelPlan, packed: &[T]) -> Vec<T> {
        let (cin, k_total) = (self.cin, self.k_total());
        let mut out = vec![T::ZERO; kp.cout * cin * kp.kh * kp.kw];
        for (t, &(fy, fx)) in self.taps[..kp.ntaps].iter().enumerate() {
            let (ky, kx) = (fy - kp.fy0, fx - kp.fx0);
            for co in 0..kp.cout {
                let row = (kp.out_offset + co) * k_total + t * cin;
                for ci in 0..cin {
                    out[((co * cin + ci) * kp.kh + ky) * kp.kw + kx] = packed[row + ci];
                }
            }
        }
        out
    }

    /// Item (c, h, w) -> zero-padded (hp, wp, c).
    fn pad_hwc<T: Real>(&self, item: &[T]) -> Vec<T> {
        let (cin, h, w, wp) = (self.cin, self.h, self.w, self.wp);
        let mut buf = vec![T::ZERO; self.hp * wp * cin];
        for ci in 0..cin {
            let plane = &item[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                let py = y + self.frame_top;
                if py >= self.hp {
                    break;
                }
                for x in 0..w {
                    let px = x + self.frame_left;
                    if px >= wp {
                        break;
                    }
                    buf[(py * wp + px) * cin + ci] = plane[y * w + x];
                }
            }
        }
        buf
    }

    /// Unfold output positions `rows` into `col`: one row per position,
    /// columns are (tap, channel) pairs.
    fn im2col<T: Real>(&self, padded: &[T], rows: Range<usize>, col: &mut Vec<T>) {
        let cin = self.cin;
        col.clear();
        for pos in rows {
            let (oy, ox) = (pos / self.wo, pos % self.wo);
            for &(fy, fx) in &self.taps {
                let src = ((oy + fy) * self.wp + ox + fx) * cin;
                col.extend_from_slice(&padded[src..src + cin]);
            }
        }
    }

    /// Scatter-add column gradients of positions `rows` into a padded HWC buffer.
    fn col2im_add<T: Real>(&self, dcol: &[T], rows: Range<usize>, dpad: &mut [T]) {
        let cin = self.cin;
        let k = self.k_total();
        for (r, pos) in rows.enumerate() {
            let (oy, ox) = (pos / self.wo, pos % self.wo);
            let row = &dcol[r * k..(r + 1) * k];
            for (t, &(fy, fx)) in self.taps.iter().enumerate() {
                let dst = ((oy + fy) * self.wp + ox + fx) * cin;
                for (d, &g) in dpad[dst..dst + cin].iter_mut().zip(&row[t * cin..(t + 1) * cin]) {
                    *d += g;
                }
            }
        }
    }

    /// Padded HWC gradient back to an item-shaped (c, h, w) gradient.
    fn unpad<T: Real>(&self, dpad: &[T]) -> Vec<T> {
        let (cin, h, w) = (self.cin, self.h, self.w);
        let mut dx = vec![T::ZERO; cin * h * w];
        for y in 0..h {
            let py = y + self.frame_top;
            if py >= self.hp {
                break;
            }
            for x in 0..w {
                let px = x + self.frame_left;
                if px >= self.wp {
                    break;
                }
                let src = (py * self.wp + px) * cin;
                for ci in 0..cin {
                    dx[(ci * h + y) * w + x] = dpad[src + ci];
                }
            }
        }
        dx
    }

    /// Output positions per im2col tile, sized to keep a tile in cache.
    fn tile_rows(&self) -> usize {
        (COL_TILE_ELEMS / self.k_total()).clamp(16, 512)
    }

    fn tiles(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let step = self.tile_rows();
        (0..self.positions()).step_by(step).map(move |a| a..(a + step).min(self.positions()))
    }
}

/// Target size of one im2col tile, in elements (~1 MiB of f32).
const COL_TILE_ELEMS: usize = 1 << 18;

/// Stride-1 cross-correlation with zero padding.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<Tensor<T>>, padding: Padding) -> Result<Tensor<T>> {
    conv2d_fused(
        input,
        &[ConvKernel {
            weight: &params.weight,
            bias: &params.bias,
            padding,
        }],
    )
}

/// Several convolutions over the same input, outputs concatenated along
/// channels in kernel order. Kernel footprints must nest (e.g. 3x3, 4x4 and
/// 5x5 under their "same" paddings); the input is unfolded once.
pub fn conv2d_fused<T: Real>(input: &Tensor<T>, kernels: &[ConvKernel<'_, T>]) -> Result<Tensor<T>> {
    let s = input.shape();
    let plan = ConvPlan::new(s, kernels)?;
    let packed = plan.pack_weights(kernels);
    let p = plan.positions();
    let (cin, k_total) = (plan.cin, plan.k_total());
    let item_out = plan.cout_total * p;
    let mut bias = Vec::with_capacity(plan.cout_total);
    for k in kernels {
        bias.extend_from_slice(k.bias.data());
    }

    let items = map_items(s.n, |n| {
        let x = &input.data()[n * s.item()..(n + 1) * s.item()];
        let padded = plan.pad_hwc(x);
        let mut col = Vec::with_capacity(plan.tile_rows() * k_total);
        let mut out = vec![T::ZERO; item_out];
        for (co, &b) in bias.iter().enumerate() {
            out[co * p..(co + 1) * p].fill(b);
        }
        for rows in plan.tiles() {
            plan.im2col(&padded, rows.clone(), &mut col);
            for ring in &plan.rings {
                let (k0, kn) = (ring.taps.start * cin, ring.taps.len() * cin);
                let c0 = ring.channels.start;
                // out^T[rows, ring] (m x cout) += col[:, ring] (m x kn) * W[ring, ring cols]^T (kn x cout)
                unsafe {
                    T::gemm(
                        rows.len(),
                        kn,
                        ring.channels.len(),
                        T::ONE,
                        col.as_ptr().add(k0),
                        k_total as isize,
                        1,
                        packed.as_ptr().add(c0 * k_total + k0),
                        1,
                        k_total as isize,
                        T::ONE,
                        out.as_mut_ptr().add(c0 * p + rows.start),
                        1,
                        p as isize,
                    );
                }
            }
        }
        out
    });
    let mut data = Vec::with_capacity(s.n * item_out);
    for item in items {
        data.extend_from_slice(&item);
    }
    Tensor::from_vec(Shape::new(s.n, plan.cout_total, plan.ho, plan.wo), data)
}

/// Gradients of [`conv2d_fused`]: (input grad if requested, per-kernel (weight, bias) grads).
pub fn conv2d_fused_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &[ConvKernel<'_, T>],
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Vec<(Tensor<T>, Tensor<T>)>)> {
    let s = input.shape();
    let plan = ConvPlan::new(s, kernels)?;
    let p = plan.positions();
    let k_total = plan.k_total();
    let go_shape = Shape::new(s.n, plan.cout_total, plan.ho, plan.wo);
    if grad_out.shape() != go_shape {
        return Err(Error::shape(
            "conv2d backward",
            format!("output gradient {} but expected {go_shape}", grad_out.shape()),
        ));
    }
    let packed = plan.pack_weights(kernels);
    let cin = plan.cin;

    struct ItemGrads<T> {
        dx: Option<Vec<T>>,
        dw: Vec<T>,
        db: Vec<T>,
    }

    let items = map_items(s.n, |n| {
        let x = &input.data()[n * s.item()..(n + 1) * s.item()];
        let go = &grad_out.data()[n * plan.cout_total * p..(n + 1) * plan.cout_total * p];
        let padded = plan.pad_hwc(x);
        let mut col = Vec::with_capacity(plan.tile_rows() * k_total);
        let mut dcol = vec![T::ZERO; plan.tile_rows() * k_total];
        let mut dpad = if need_input_grad { vec![T::ZERO; padded.len()] } else { Vec::new() };
        let mut dw = vec![T::ZERO; plan.cout_total * k_total];
        for rows in plan.tiles() {
            plan.im2col(&padded, rows.clone(), &mut col);
            let m = rows.len();
            for ring in &plan.rings {
                let (k0, kn) = (ring.taps.start * cin, ring.taps.len() * cin);
                let c0 = ring.channels.start;
                // dW[ring, ring cols] (cout x kn) += g[ring, rows] (cout x m) * col[:, ring] (m x kn)
                unsafe {
                    T::gemm(
                        ring.channels.len(),
                        m,
                        kn,
                        T::ONE,
                        go.as_ptr().add(c0 * p + rows.start),
                        p as isize,
                        1,
                        col.as_ptr().add(k0),
                        k_total as isize,
                        1,
                        T::ONE,
                        dw.as_mut_ptr().add(c0 * k_total + k0),
                        k_total as isize,
                        1,
                    );
                }
                if need_input_grad {
                    // dcol[:, ring] (m x kn) = g[ring, rows]^T (m x cout) * W[ring, ring cols] (cout x kn)
                    unsafe {
                        T::gemm(
                            m,
                            ring.channels.len(),
                            kn,
                            T::ONE,
                            go.as_ptr().add(c0 * p + rows.start),
                            1,
                            p as isize,
                            packed.as_ptr().add(c0 * k_total + k0),
                            k_total as isize,
                            1,
                            T::ZERO,
                            dcol.as_mut_ptr().add(k0),
                            k_total as isize,
                            1,
                        );
                    }
                }
            }
            if need_input_grad {
                plan.col2im_add(&dcol[..m * k_total], rows, &mut dpad);
            }
        }
        let db = (0..plan.cout_total).map(|co| go[co * p..(co + 1) * p].iter().copied().sum()).collect();
        let dx = need_input_grad.then(|| plan.unpad(&dpad));
        ItemGrads { dx, dw, db }
    });

    let mut dw_sum = vec![T::ZERO; plan.cout_total * k_total];
    let mut db_sum = vec![T::ZERO; plan.cout_total];
    let mut dx_data = if need_input_grad {
        Vec::with_capacity(s.numel())
    } else {
        Vec::new()
    };
    for item in items {
        for (a, &v) in dw_sum.iter_mut().zip(&item.dw) {
            *a += v;
        }
        for (a, &v) in db_sum.iter_mut().zip(&item.db) {
            *a += v;
        }
        if let Some(dx) = item.dx {
            dx_data.extend_from_slice(&dx);
        }
    }
    let dx = if need_input_grad {
        Some(Tensor::from_vec(s, dx_data)?)
    } else {
        None
    };
    let param_grads = plan
        .kernels
        .iter()
        .zip(kernels)
        .map(|(kp, k)| {
            let dw = Tensor::from_vec(k.weight.shape(), plan.unpack_weight(kp, &dw_sum))?;
            let db = Tensor::from_vec(k.bias.shape(), db_sum[kp.out_offset..kp.out_offset + kp.cout].to_vec())?;
            Ok((dw, db))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dx, param_grads))
}

// ---------------------------------------------------------------------------
// elementwise

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Logistic function, evaluated without overflow and clamped to the
/// representable open interval (0, 1).
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    let s = if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    };
    if s >= T::ONE {
        T::one_minus_ulp()
    } else if s <= T::ZERO {
        T::min_positive()
    } else {
        s
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid expressed through its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::ONE - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn scale<T: Real>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

// ---------------------------------------------------------------------------
// channel concatenation

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no parts"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "concat_channels",
                format!("part {s} incompatible with {first}"),
            ));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut data = Vec::with_capacity(first.n * c_total * first.plane());
    for n in 0..first.n {
        for p in parts {
            let item = p.shape().item();
            data.extend_from_slice(&p.data()[n * item..(n + 1) * item]);
        }
    }
    Tensor::from_vec(Shape::new(first.n, c_total, first.h, first.w), data)
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} outside {} channels", start + len, s.c),
        ));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)
}

/// Scatter a channel-range gradient back into a zero tensor of `full` shape.
pub fn slice_channels_backward<T: Real>(full: Shape, start: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let gs = grad_out.shape();
    let plane = full.plane();
    let mut out = Tensor::zeros(full);
    for n in 0..full.n {
        let dst = (n * full.c + start) * plane;
        let src = n * gs.c * plane;
        out.data_mut()[dst..dst + gs.c * plane].copy_from_slice(&grad_out.data()[src..src + gs.c * plane]);
    }
    out
}

// ---------------------------------------------------------------------------
// pooling

/// Per-(n, c) mean or maximum over the spatial plane: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_pool<T: Real>(x: &Tensor<T>, kind: PoolKind) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|slice| match kind {
            PoolKind::Avg => {
                let sum: f64 = slice.iter().map(|v| v.to_f64()).sum();
                T::from_f64(sum / plane as f64)
            }
            PoolKind::Max => slice.iter().copied().fold(slice[0], T::max),
        })
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_pool_backward<T: Real>(x: &Tensor<T>, kind: PoolKind, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut dx = Tensor::zeros(s);
    for (i, (slice, dslice)) in x
        .data()
        .chunks_exact(plane)
        .zip(dx.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let g = grad_out.data()[i];
        match kind {
            PoolKind::Avg => {
                let share = g / T::from_f64(plane as f64);
                dslice.fill(share);
            }
            PoolKind::Max => dslice[argmax(slice)] = g,
        }
    }
    dx
}

/// Per-(n, h, w) mean or maximum across channels: (n, c, h, w) -> (n, 1, h, w).
pub fn channel_pool<T: Real>(x: &Tensor<T>, kind: PoolKind) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let item = &x.data()[n * s.item()..(n + 1) * s.item()];
        for pos in 0..plane {
            let v = match kind {
                PoolKind::Avg => {
                    let sum: f64 = (0..s.c).map(|c| item[c * plane + pos].to_f64()).sum();
                    T::from_f64(sum / s.c as f64)
                }
                PoolKind::Max => (1..s.c).fold(item[pos], |m, c| m.max(item[c * plane + pos])),
            };
            data.push(v);
        }
    }
    Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), data).expect("pooled shape")
}

pub fn channel_pool_backward<T: Real>(x: &Tensor<T>, kind: PoolKind, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut dx = Tensor::zeros(s);
    let inv_c = T::from_f64(1.0 / s.c as f64);
    for n in 0..s.n {
        let item = &x.data()[n * s.item()..(n + 1) * s.item()];
        let ditem = &mut dx.data_mut()[n * s.item()..(n + 1) * s.item()];
        for pos in 0..plane {
            let g = grad_out.data()[n * plane + pos];
            match kind {
                PoolKind::Avg => {
                    for c in 0..s.c {
                        ditem[c * plane + pos] = g * inv_c;
                    }
                }
                PoolKind::Max => {
                    let mut best = 0;
                    for c in 1..s.c {
                        if item[c * plane + pos] > item[best * plane + pos] {
                            best = c;
                        }
                    }
                    ditem[best * plane + pos] = g;
                }
            }
        }
    }
    dx
}

/// Index of the winning element for every max-pooled output, in output order.
pub(crate) fn max_pool_winners<T: Real>(x: &Tensor<T>, global: bool) -> Vec<usize> {
    let s = x.shape();
    let plane = s.plane();
    if global {
        return x.data().chunks(plane).map(argmax).collect();
    }
    let mut out = Vec::with_capacity(s.n * plane);
    for item in x.data().chunks(s.item()) {
        for pos in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if item[c * plane + pos] > item[best * plane + pos] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// broadcasting product

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// map is (n, c, 1, 1)
    PerChannel,
    /// map is (n, 1, h, w)
    PerPixel,
}

pub(crate) fn broadcast_kind(x: Shape, map: Shape) -> Result<Broadcast> {
    if map == Shape::new(x.n, x.c, 1, 1) {
        Ok(Broadcast::PerChannel)
    } else if map == Shape::new(x.n, 1, x.h, x.w) {
        Ok(Broadcast::PerPixel)
    } else {
        Err(Error::shape(
            "broadcast_mul",
            format!("map {map} is neither per-channel nor per-pixel for {x}"),
        ))
    }
}

/// `x` times `map`, with the map replicated along its singleton axes.
pub fn broadcast_mul<T: Real>(x: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let kind = broadcast_kind(s, map.shape())?;
    let plane = s.plane();
    let m = map.data();
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let (nc, pos) = (idx / plane, idx % plane);
        let factor = match kind {
            Broadcast::PerChannel => m[nc],
            Broadcast::PerPixel => m[(nc / s.c) * plane + pos],
        };
        *v *= factor;
    }
    Ok(out)
}

/// Returns (d/dx, d/dmap).
pub fn broadcast_mul_backward<T: Real>(x: &Tensor<T>, map: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let kind = broadcast_kind(s, map.shape()).expect("checked in forward");
    let plane = s.plane();
    let m = map.data();
    let mut dx = Tensor::zeros(s);
    let mut dmap = vec![0.0f64; map.len()];
    for (idx, (&xv, &g)) in x.data().iter().zip(grad_out.data()).enumerate() {
        let (nc, pos) = (idx / plane, idx % plane);
        let mi = match kind {
            Broadcast::PerChannel => nc,
            Broadcast::PerPixel => (nc / s.c) * plane + pos,
        };
        dx.data_mut()[idx] = g * m[mi];
        dmap[mi] += (g * xv).to_f64();
    }
    let dmap = Tensor::from_vec(map.shape(), dmap.into_iter().map(T::from_f64).collect()).expect("map shape");
    (dx, dmap)
}

// ---------------------------------------------------------------------------
// dense

/// `x` (n, in, 1, 1) times `weight`^T plus bias, giving (n, out, 1, 1).
pub fn dense<T: Real>(x: &Tensor<T>, params: &DenseParams<Tensor<T>>) -> Result<Tensor<T>> {
    let (xs, ws, bs) = (x.shape(), params.weight.shape(), params.bias.shape());
    if xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape("dense", format!("expected matrices, got {xs} and {ws}")));
    }
    if xs.c != ws.c {
        return Err(Error::shape(
            "dense",
            format!("input width {} but weight expects {}", xs.c, ws.c),
        ));
    }
    if bs != Shape::new(ws.n, 1, 1, 1) {
        return Err(Error::shape("dense", format!("bias {bs} for {} outputs", ws.n)));
    }
    let (rows, din, dout) = (xs.n, xs.c, ws.n);
    let (xd, wd, bd) = (x.data(), params.weight.data(), params.bias.data());
    let mut data = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let xr = &xd[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &wd[o * din..(o + 1) * din];
            let mut acc = bd[o];
            for (a, b) in xr.iter().zip(wr) {
                acc += *a * *b;
            }
            data.push(acc);
        }
    }
    Tensor::from_vec(Shape::new(rows, dout, 1, 1), data)
}

/// Returns (d/dx, d/dweight, d/dbias).
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    params: &DenseParams<Tensor<T>>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (rows, din, dout) = (x.shape().n, x.shape().c, params.weight.shape().n);
    let (xd, wd, g) = (x.data(), params.weight.data(), grad_out.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(params.weight.shape());
    let mut db = Tensor::zeros(params.bias.shape());
    for r in 0..rows {
        for o in 0..dout {
            let go = g[r * dout + o];
            db.data_mut()[o] += go;
            for i in 0..din {
                dx.data_mut()[r * din + i] += go * wd[o * din + i];
                dw.data_mut()[o * din + i] += go * xd[r * din + i];
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// loss

/// Mean of squared differences, accumulated in f64.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{} vs {}", a.shape(), b.shape())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(T::from_f64(sum / a.len() as f64))
}

/// Returns (d/da, d/db) scaled by the upstream scalar gradient.
pub fn mse_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad_out: T) -> (Tensor<T>, Tensor<T>) {
    let k = grad_out * T::from_f64(2.0 / a.len() as f64);
    let da_data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| k * (x - y)).collect();
    let db = Tensor::from_vec(a.shape(), da_data.iter().map(|&v| -v).collect()).expect("same shape");
    let da = Tensor::from_vec(a.shape(), da_data).expect("same shape");
    (da, db)
}

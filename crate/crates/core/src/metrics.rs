//! MSE, PSNR and SSIM, and the per-configuration report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::StegoModelParams;
use crate::numerics::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Column order of [`MetricsReport::csv_row`].
pub const CSV_HEADER: &str = "model,psnr_cover,ssim_cover,psnr_secret,ssim_secret,mse_cover,mse_secret";

/// Images evaluated per forward pass in [`evaluate_pairs`].
const EVAL_CHUNK: usize = 4;

fn check_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared difference, accumulated in f64.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("mse", a, b)?;
    Ok(sum_sq_diff(a.data(), b.data()) / a.len() as f64)
}

fn sum_sq_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum()
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Single-scale SSIM of one image pair (n = 1) over valid 11x11 Gaussian
/// windows, computed per channel and averaged. Dynamic range is 1.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("ssim", a, b)?;
    let s = a.shape();
    if s.n != 1 {
        return Err(Error::Usage(format!("ssim compares one image pair at a time, got batch of {}", s.n)));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let plane = s.plane();
    let total: f64 = (0..s.c)
        .map(|c| {
            let x: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|v| v.to_f64()).collect();
            let y: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|v| v.to_f64()).collect();
            ssim_plane(&x, &y, s.h, s.w, &taps)
        })
        .sum();
    Ok(total / s.c as f64)
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (oh, ow) = (h + 1 - taps.len(), w + 1 - taps.len());
    let mu_x = filter_valid(x, h, w, taps);
    let mu_y = filter_valid(y, h, w, taps);
    let e_xx = filter_valid(&xx, h, w, taps);
    let e_yy = filter_valid(&yy, h, w, taps);
    let e_xy = filter_valid(&xy, h, w, taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0;
    for i in 0..oh * ow {
        sum += ssim_window(mu_x[i], mu_y[i], e_xx[i], e_yy[i], e_xy[i], c1, c2);
    }
    sum / (oh * ow) as f64
}

/// SSIM of one window from its weighted first and second moments.
///
/// Written so that swapping the two images, or passing the same image
/// twice, is exact in floating point.
pub fn ssim_window(mu_x: f64, mu_y: f64, e_xx: f64, e_yy: f64, e_xy: f64, c1: f64, c2: f64) -> f64 {
    let var_x = e_xx - mu_x * mu_x;
    let var_y = e_yy - mu_y * mu_y;
    let cov = e_xy - mu_x * mu_y;
    let num = (2.0 * (mu_x * mu_y) + c1) * (2.0 * cov + c2);
    let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
    num / den
}

/// Separable valid-region filter: rows first, then columns.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| taps[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model_name: String,
    pub psnr_cover: f64,
    pub ssim_cover: f64,
    pub psnr_secret: f64,
    pub ssim_secret: f64,
    pub mse_cover: f64,
    pub mse_secret: f64,
}

impl MetricsReport {
    /// `model,psnr_cover,...` with PSNR/SSIM to 3 decimals and MSE to 4.
    pub fn csv_row(&self) -> String {
        let mut row = self.model_name.clone();
        for v in [self.psnr_cover, self.ssim_cover, self.psnr_secret, self.ssim_secret] {
            row.push(',');
            push_fixed(&mut row, v, 3);
        }
        for v in [self.mse_cover, self.mse_secret] {
            row.push(',');
            push_fixed(&mut row, v, 4);
        }
        row
    }

    /// Row written in place of a configuration that failed to train or evaluate.
    pub fn error_row(model_name: &str) -> String {
        format!("{model_name}{}", ",ERROR".repeat(6))
    }
}

fn push_fixed(out: &mut String, v: f64, decimals: usize) {
    if v == f64::INFINITY {
        out.push_str("inf");
    } else if v == f64::NEG_INFINITY {
        out.push_str("-inf");
    } else {
        let _ = write!(out, "{v:.decimals$}");
    }
}

/// Anything that can embed a secret and recover it. Lets the evaluation
/// protocol run against stub models as well as trained parameters.
pub trait StegoCodec {
    fn hide(&self, cover: &Tensor, secret: &Tensor) -> Result<Tensor>;
    fn reveal(&self, stego: &Tensor) -> Result<Tensor>;
}

impl StegoCodec for StegoModelParams {
    fn hide(&self, cover: &Tensor, secret: &Tensor) -> Result<Tensor> {
        StegoModelParams::hide(self, cover, secret)
    }

    fn reveal(&self, stego: &Tensor) -> Result<Tensor> {
        StegoModelParams::reveal(self, stego)
    }
}

/// Hide every secret in its cover, reveal it again, and score both pairs.
///
/// Each element of `covers`/`secrets` is one image of shape (1, 3, h, w).
/// PSNR and SSIM are averaged per image; MSE is the mean over all pixels.
pub fn evaluate_pairs(
    codec: &impl StegoCodec,
    covers: &[Tensor],
    secrets: &[Tensor],
    model_name: &str,
) -> Result<MetricsReport> {
    if covers.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    if covers.len() != secrets.len() {
        return Err(Error::Usage(format!(
            "{} covers but {} secrets",
            covers.len(),
            secrets.len()
        )));
    }
    let mut acc = [0.0f64; 4];
    let (mut sq_cover, mut sq_secret, mut pixels) = (0.0, 0.0, 0usize);
    for (cs, ss) in covers.chunks(EVAL_CHUNK).zip(secrets.chunks(EVAL_CHUNK)) {
        let cover = Tensor::stack(&cs.iter().collect::<Vec<_>>())?;
        let secret = Tensor::stack(&ss.iter().collect::<Vec<_>>())?;
        check_same("evaluate_pairs", &cover, &secret)?;
        let stego = codec.hide(&cover, &secret)?;
        check_same("hide output", &cover, &stego)?;
        let revealed = codec.reveal(&stego)?;
        check_same("reveal output", &secret, &revealed)?;
        for k in 0..cs.len() {
            let pick = [k];
            let (c, st) = (cover.select_items(&pick)?, stego.select_items(&pick)?);
            let (se, rv) = (secret.select_items(&pick)?, revealed.select_items(&pick)?);
            acc[0] += psnr(&c, &st, 1.0)?;
            acc[1] += ssim(&c, &st)?;
            acc[2] += psnr(&se, &rv, 1.0)?;
            acc[3] += ssim(&se, &rv)?;
            sq_cover += sum_sq_diff(c.data(), st.data());
            sq_secret += sum_sq_diff(se.data(), rv.data());
            pixels += c.len();
        }
    }
    let count = covers.len() as f64;
    Ok(MetricsReport {
        model_name: model_name.to_owned(),
        psnr_cover: acc[0] / count,
        ssim_cover: acc[1] / count,
        psnr_secret: acc[2] / count,
        ssim_secret: acc[3] / count,
        mse_cover: sq_cover / pixels as f64,
        mse_secret: sq_secret / pixels as f64,
    })
}

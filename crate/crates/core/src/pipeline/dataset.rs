use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HOLDOUT_FRACTION;
use crate::error::{Error, Result};
use crate::model::IMAGE_CHANNELS;
use crate::numerics::parallel::map_items;
use crate::numerics::{Shape, Tensor};

/// Cover/secret pairs, each image a (1, 3, s, s) tensor in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub covers: Vec<Tensor>,
    pub secrets: Vec<Tensor>,
}

impl Dataset {
    pub fn new(covers: Vec<Tensor>, secrets: Vec<Tensor>) -> Result<Self> {
        if covers.len() != secrets.len() {
            return Err(Error::Usage(format!("{} covers but {} secrets", covers.len(), secrets.len())));
        }
        if let Some(first) = covers.first() {
            let s = first.shape();
            if s.n != 1 || s.c != IMAGE_CHANNELS {
                return Err(Error::shape("dataset", format!("expected (1, 3, h, w) images, got {s}")));
            }
            if let Some(bad) = covers.iter().chain(&secrets).find(|t| t.shape() != s) {
                return Err(Error::shape("dataset", format!("{} vs {s}", bad.shape())));
            }
        }
        Ok(Dataset { covers, secrets })
    }

    pub fn len(&self) -> usize {
        self.covers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covers.is_empty()
    }

    /// Number of leading pairs used for training; the rest are held out.
    /// At least one pair is held out whenever there are two or more.
    pub fn train_len(&self) -> usize {
        let n = self.len();
        if n < 2 {
            return n;
        }
        let held = ((n as f64 * HOLDOUT_FRACTION).ceil() as usize).clamp(1, n - 1);
        n - held
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_len()
    }

    pub fn holdout_indices(&self) -> std::ops::Range<usize> {
        self.train_len()..self.len()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            covers: self.covers[range.clone()].to_vec(),
            secrets: self.secrets[range].to_vec(),
        }
    }
}

/// Decode a folder of PNGs into shuffled cover/secret halves.
///
/// Files are sorted by name, undecodable ones are skipped with a warning,
/// the rest are shuffled by `seed`; the first half become covers and the
/// second half secrets (an odd image out is dropped).
pub fn load_dataset(dir: &Path, image_size: usize, seed: u64) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();

    let decoded = map_items(files.len(), |i| load_image(&files[i], image_size));
    let mut images = Vec::with_capacity(files.len());
    for (path, result) in files.iter().zip(decoded) {
        match result {
            Ok(t) => images.push(t),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.len() < 2 {
        return Err(Error::Usage(format!(
            "{} holds {} usable PNG image(s); at least 2 are needed",
            dir.display(),
            images.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.shuffle(&mut rng);
    let half = images.len() / 2;
    images.truncate(2 * half);
    let secrets = images.split_off(half);
    Dataset::new(images, secrets)
}

/// Decode one image, center-crop it to a square and resize it bilinearly.
pub fn load_image(path: &Path, image_size: usize) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    Ok(image_to_tensor(&square(&rgb, image_size as u32)))
}

fn square(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side == size {
        cropped
    } else {
        imageops::resize(&cropped, size, size, FilterType::Triangle)
    }
}

/// 8-bit RGB to a (1, 3, h, w) tensor with p / 255.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(Shape::new(1, IMAGE_CHANNELS, h, w), |i| {
        let (c, pos) = (i / (h * w), i % (h * w));
        raw[pos * IMAGE_CHANNELS + c] as f32 / 255.0
    })
}

/// Quantise a (1, 3, h, w) tensor to 8-bit RGB, rounding to nearest.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != IMAGE_CHANNELS {
        return Err(Error::shape("tensor_to_image", format!("expected (1, 3, h, w), got {s}")));
    }
    let plane = s.plane();
    let mut raw = vec![0u8; plane * IMAGE_CHANNELS];
    for (i, px) in raw.iter_mut().enumerate() {
        let v = t.data()[(i % IMAGE_CHANNELS) * plane + i / IMAGE_CHANNELS];
        *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(RgbImage::from_raw(s.w as u32, s.h as u32, raw).expect("buffer sized from shape"))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_image(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Data(format!("cannot encode {}: {other}", path.display())),
        })
}

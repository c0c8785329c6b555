use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A procedural test image: a smooth two-colour gradient with a few
/// flat-coloured discs and rectangles on top.
pub fn synth_image(rng: &mut impl Rng, size: u32) -> RgbImage {
    let mut colour = || Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
    let (from, to) = (colour(), colour());
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = size as f32;
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let t = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.75) / 1.5;
        let t = t.clamp(0.0, 1.0);
        Rgb(std::array::from_fn(|c| (from[c] as f32 * (1.0 - t) + to[c] as f32 * t).round() as u8))
    });
    for _ in 0..rng.random_range(2..6) {
        let fill = Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(s / 10.0..s / 3.0);
        let disc = rng.random_bool(0.5);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let (ox, oy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = if disc {
                ox * ox + oy * oy <= r * r
            } else {
                ox.abs() <= r && oy.abs() <= r * 0.6
            };
            if inside {
                *px = fill;
            }
        }
    }
    img
}

/// Write `count` synthetic PNGs named `synth_000.png`, ... into `dir`.
pub fn synth_dataset(dir: &Path, count: usize, size: u32, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let path = dir.join(format!("synth_{i:03}.png"));
        synth_image(&mut rng, size)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

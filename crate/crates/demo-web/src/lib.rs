//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The work happens in plain Rust ([`Session`], [`noise_probe`]) so it can be
//! tested natively; the `#[wasm_bindgen]` layer only converts errors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stegattn::attention::{channel_attention_map, spatial_attention_map};
use stegattn::metrics::{psnr, ssim};
use stegattn::model;
use stegattn::numerics::ops;
use stegattn::pipeline::{image_to_tensor, synth_image, tensor_to_image, Dataset, Trainer};
use stegattn::{AttentionMode, Error, ModelConfig, Result, Tensor};
use wasm_bindgen::prelude::*;

/// Side length of demo images; small enough for a step in well under a second.
pub const IMAGE_SIZE: usize = 24;
const TRAIN_PAIRS: usize = 12;
const BATCH: usize = 4;
const LEARNING_RATE: f32 = 2e-3;

fn synth_tensor(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    image_to_tensor(&synth_image(rng, size as u32))
}

/// RGBA bytes for canvas `ImageData`.
fn rgba(t: &Tensor) -> Result<Vec<u8>> {
    let img = tensor_to_image(t)?;
    Ok(img.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect())
}

/// Place equally sized RGBA images side by side.
fn side_by_side(images: &[Vec<u8>], width: usize) -> Vec<u8> {
    let row = width * 4;
    let height = images.first().map_or(0, |i| i.len() / row);
    let mut out = Vec::with_capacity(images.len() * row * height);
    for y in 0..height {
        for img in images {
            out.extend_from_slice(&img[y * row..(y + 1) * row]);
        }
    }
    out
}

/// A model being trained on a handful of synthetic pairs, plus one unseen
/// pair used for the previews.
pub struct Session {
    mode: AttentionMode,
    trainer: Trainer,
    cover: Tensor,
    secret: Tensor,
    losses: Vec<f32>,
}

impl Session {
    pub fn new(mode: AttentionMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images: Vec<Tensor> = (0..2 * TRAIN_PAIRS + 2).map(|_| synth_tensor(&mut rng, IMAGE_SIZE)).collect();
        let (secret, cover) = (images.pop().unwrap(), images.pop().unwrap());
        let secrets = images.split_off(TRAIN_PAIRS);
        let data = Dataset::new(images, secrets)?;
        let trainer = Trainer::new(ModelConfig::new(mode), seed, LEARNING_RATE, BATCH, data)?;
        Ok(Session {
            mode,
            trainer,
            cover,
            secret,
            losses: Vec::new(),
        })
    }

    pub fn step(&mut self, count: usize) -> Result<f32> {
        for _ in 0..count {
            let loss = self.trainer.step()?;
            self.losses.push(loss);
        }
        self.losses.last().copied().ok_or_else(|| Error::Usage("no steps requested".into()))
    }

    pub fn losses(&self) -> &[f32] {
        &self.losses
    }

    /// Stego image and revealed secret for the preview pair.
    pub fn outputs(&self) -> Result<(Tensor, Tensor)> {
        let p = self.trainer.params();
        let stego = p.hide(&self.cover, &self.secret)?;
        let revealed = p.reveal(&stego)?;
        Ok((stego, revealed))
    }

    pub fn panels(&self) -> Result<Vec<u8>> {
        let (stego, revealed) = self.outputs()?;
        let imgs = [&self.cover, &self.secret, &stego, &revealed]
            .iter()
            .map(|t| rgba(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(side_by_side(&imgs, IMAGE_SIZE))
    }

    /// PSNR and SSIM of the stego image against the cover and of the
    /// revealed secret against the secret.
    pub fn quality(&self) -> Result<[f64; 4]> {
        let (stego, revealed) = self.outputs()?;
        Ok([
            psnr(&self.cover, &stego, 1.0)?,
            ssim(&self.cover, &stego)?,
            psnr(&self.secret, &revealed, 1.0)?,
            ssim(&self.secret, &revealed)?,
        ])
    }

    /// The channel map (c values) and spatial map (h*w values) applied after
    /// the first hiding block, as this mode computes them. `None` for maps the
    /// mode does not use.
    pub fn attention(&self) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let p = self.trainer.params();
        let Some(a) = p.hiding_attn.first() else {
            return Ok((None, None));
        };
        let feats = model::prep_forward(&self.secret, p)?;
        let x = ops::concat_channels(&[&feats, &self.cover])?;
        let f = model::conv_block_forward(&x, &p.hiding[0])?;
        let channel = |f: &Tensor| channel_attention_map(f, &a.channel);
        let spatial = |f: &Tensor| spatial_attention_map(f, &a.spatial);
        Ok(match self.mode {
            AttentionMode::Baseline => (None, None),
            AttentionMode::Channel => (Some(channel(&f)?), None),
            AttentionMode::Spatial => (None, Some(spatial(&f)?)),
            AttentionMode::Parallel => (Some(channel(&f)?), Some(spatial(&f)?)),
            AttentionMode::ChannelThenSpatial => {
                let mc = channel(&f)?;
                let ms = spatial(&ops::broadcast_mul(&f, &mc)?)?;
                (Some(mc), Some(ms))
            }
            AttentionMode::SpatialThenChannel => {
                let ms = spatial(&f)?;
                let mc = channel(&ops::broadcast_mul(&f, &ms)?)?;
                (Some(mc), Some(ms))
            }
        })
    }
}

/// A synthetic image with additive Gaussian noise, clamped to [0, 1].
pub struct NoiseProbe {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn noise_probe(seed: u64, sigma: f32, size: usize) -> Result<NoiseProbe> {
    let normal = Normal::new(0.0f32, sigma.max(0.0)).map_err(|e| Error::Usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = synth_tensor(&mut rng, size);
    let noisy = Tensor::from_fn(clean.shape(), |i| (clean.data()[i] + normal.sample(&mut rng)).clamp(0.0, 1.0));
    Ok(NoiseProbe {
        psnr: psnr(&clean, &noisy, 1.0)?,
        ssim: ssim(&clean, &noisy)?,
        clean,
        noisy,
    })
}

// ---------------------------------------------------------------------------
// JavaScript surface

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Mode tokens accepted by [`Demo::new`], in table order.
#[wasm_bindgen(js_name = modes)]
pub fn js_modes() -> Vec<String> {
    AttentionMode::TABLE_ORDER.iter().map(|m| m.token().to_owned()).collect()
}

#[wasm_bindgen(js_name = imageSize)]
pub fn js_image_size() -> usize {
    IMAGE_SIZE
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, seed: u32) -> std::result::Result<Demo, JsError> {
        let mode: AttentionMode = mode.parse().map_err(js)?;
        Session::new(mode, seed as u64).map(Demo).map_err(js)
    }

    /// Run `count` training steps; returns the last loss.
    pub fn step(&mut self, count: usize) -> std::result::Result<f32, JsError> {
        self.0.step(count).map_err(js)
    }

    pub fn losses(&self) -> Vec<f32> {
        self.0.losses().to_vec()
    }

    /// RGBA strip, 4 * imageSize wide: cover, secret, stego, revealed.
    pub fn panels(&self) -> std::result::Result<Vec<u8>, JsError> {
        self.0.panels().map_err(js)
    }

    /// [psnr_cover, ssim_cover, psnr_secret, ssim_secret]
    pub fn quality(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.0.quality().map(|q| q.to_vec()).map_err(js)
    }

    /// Channel weights of the first attention point; empty if unused.
    #[wasm_bindgen(js_name = channelMap)]
    pub fn channel_map(&self) -> std::result::Result<Vec<f32>, JsError> {
        let (mc, _) = self.0.attention().map_err(js)?;
        Ok(mc.map(|t| t.into_data()).unwrap_or_default())
    }

    /// Spatial weights of the first attention point, row-major; empty if unused.
    #[wasm_bindgen(js_name = spatialMap)]
    pub fn spatial_map(&self) -> std::result::Result<Vec<f32>, JsError> {
        let (_, ms) = self.0.attention().map_err(js)?;
        Ok(ms.map(|t| t.into_data()).unwrap_or_default())
    }
}

#[wasm_bindgen]
pub struct Noise(NoiseProbe);

#[wasm_bindgen]
impl Noise {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, sigma: f32, size: usize) -> std::result::Result<Noise, JsError> {
        noise_probe(seed as u64, sigma, size).map(Noise).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.0.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.0.ssim
    }

    /// RGBA strip, 2 * size wide: clean then noisy.
    pub fn rgba(&self) -> std::result::Result<Vec<u8>, JsError> {
        let parts = [rgba(&self.0.clean).map_err(js)?, rgba(&self.0.noisy).map_err(js)?];
        Ok(side_by_side(&parts, self.0.clean.shape().w))
    }
}

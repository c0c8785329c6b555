//! Prep / hiding / reveal encoder-decoder with attention between the hiding
//! network's convolutional blocks.
//!
//! Every convolutional block runs a 3x3, a 4x4 and a 5x5 convolution over the
//! same input (50, 10 and 5 output maps, ReLU each) and concatenates them into
//! 65 channels. The prep network (2 blocks) lifts the secret to 65 channels,
//! which are stacked with the 3 cover channels and fed through the 5 hiding
//! blocks; a 3x3 convolution plus sigmoid produces the stego image. The reveal
//! network mirrors the hiding network on the stego image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{record_attention, AttentionMode, AttentionParams};
use crate::error::{Error, Result};
use crate::init::kaiming_uniform;
use crate::numerics::{ConvParams, Padding, Real, Shape, Tape, Tensor, Var};

/// (kernel size, output maps) of the three parallel convolutions in a block.
pub const BLOCK_KERNELS: [(usize, usize); 3] = [(3, 50), (4, 10), (5, 5)];
pub const BLOCK_CHANNELS: usize = 65;
pub const IMAGE_CHANNELS: usize = 3;
pub const PREP_BLOCKS: usize = 2;
pub const HIDING_BLOCKS: usize = 5;
pub const REVEAL_BLOCKS: usize = 5;
pub const OUTPUT_KERNEL: usize = 3;
/// Smallest spatial extent the network accepts.
pub const MIN_IMAGE_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: AttentionMode,
    /// Weight of the secret-reconstruction term in the loss.
    pub beta: f32,
    pub reduction_ratio: usize,
    /// Also insert attention between the reveal network's blocks.
    pub decoder_attention: bool,
}

impl ModelConfig {
    pub fn new(mode: AttentionMode) -> Self {
        ModelConfig {
            mode,
            beta: 1.0,
            reduction_ratio: 8,
            decoder_attention: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<P = Tensor> {
    pub conv3: ConvParams<P>,
    pub conv4: ConvParams<P>,
    pub conv5: ConvParams<P>,
}

impl<P> ConvBlockParams<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> ConvBlockParams<Q> {
        ConvBlockParams {
            conv3: self.conv3.map(&format!("{prefix}.conv3"), f),
            conv4: self.conv4.map(&format!("{prefix}.conv4"), f),
            conv5: self.conv5.map(&format!("{prefix}.conv5"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.conv3.for_each_mut(&format!("{prefix}.conv3"), f);
        self.conv4.for_each_mut(&format!("{prefix}.conv4"), f);
        self.conv5.for_each_mut(&format!("{prefix}.conv5"), f);
    }

    fn convs(&self) -> [&ConvParams<P>; 3] {
        [&self.conv3, &self.conv4, &self.conv5]
    }
}

fn init_conv<T: Real>(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> ConvParams<Tensor<T>> {
    ConvParams {
        weight: kaiming_uniform(rng, Shape::new(cout, cin, k, k)),
        bias: Tensor::zeros(Shape::new(cout, 1, 1, 1)),
    }
}

impl<T: Real> ConvBlockParams<Tensor<T>> {
    fn init(rng: &mut ChaCha8Rng, cin: usize) -> Self {
        let [(k3, c3), (k4, c4), (k5, c5)] = BLOCK_KERNELS;
        ConvBlockParams {
            conv3: init_conv(rng, cin, c3, k3),
            conv4: init_conv(rng, cin, c4, k4),
            conv5: init_conv(rng, cin, c5, k5),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv3.weight.shape().c
    }
}

/// All learnable parameters plus the wiring they are used with.
#[derive(Clone, Debug, PartialEq)]
pub struct StegoModelParams<P = Tensor> {
    pub config: ModelConfig,
    pub prep: Vec<ConvBlockParams<P>>,
    pub hiding: Vec<ConvBlockParams<P>>,
    pub hiding_out: ConvParams<P>,
    pub reveal: Vec<ConvBlockParams<P>>,
    pub reveal_out: ConvParams<P>,
    /// One pair per gap between consecutive hiding blocks.
    pub hiding_attn: Vec<AttentionParams<P>>,
    /// Present only when `config.decoder_attention` is set.
    pub reveal_attn: Vec<AttentionParams<P>>,
}

/// Deterministic Kaiming-uniform initialisation with zero biases.
pub fn init_params(seed: u64, mode: AttentionMode, beta: f32) -> StegoModelParams {
    StegoModelParams::init(
        seed,
        ModelConfig {
            beta,
            ..ModelConfig::new(mode)
        },
    )
}

impl<T: Real> StegoModelParams<Tensor<T>> {
    pub fn init(seed: u64, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = BLOCK_CHANNELS;
        let prep = (0..PREP_BLOCKS)
            .map(|i| ConvBlockParams::init(rng, if i == 0 { IMAGE_CHANNELS } else { c }))
            .collect();
        let hiding = (0..HIDING_BLOCKS)
            .map(|i| ConvBlockParams::init(rng, if i == 0 { c + IMAGE_CHANNELS } else { c }))
            .collect();
        let hiding_out = init_conv(rng, c, IMAGE_CHANNELS, OUTPUT_KERNEL);
        let reveal = (0..REVEAL_BLOCKS)
            .map(|i| ConvBlockParams::init(rng, if i == 0 { IMAGE_CHANNELS } else { c }))
            .collect();
        let reveal_out = init_conv(rng, c, IMAGE_CHANNELS, OUTPUT_KERNEL);
        let hiding_attn = (1..HIDING_BLOCKS)
            .map(|_| AttentionParams::init(rng, c, config.reduction_ratio))
            .collect();
        let reveal_attn = if config.decoder_attention {
            (1..REVEAL_BLOCKS)
                .map(|_| AttentionParams::init(rng, c, config.reduction_ratio))
                .collect()
        } else {
            Vec::new()
        };
        StegoModelParams {
            config,
            prep,
            hiding,
            hiding_out,
            reveal,
            reveal_out,
            hiding_attn,
            reveal_attn,
        }
    }

    /// Named tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let _ = self.map(&mut |name, t| out.push((name.to_owned(), t)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every tensor on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> StegoModelParams<Var> {
        self.map(&mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn cast<U: Real>(&self) -> StegoModelParams<Tensor<U>> {
        self.map(&mut |_, t| t.cast())
    }

    /// Prep + hiding networks: stego image for each (cover, secret) pair.
    pub fn hide(&self, cover: &Tensor<T>, secret: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (c, s) = (tape.constant(cover.clone()), tape.constant(secret.clone()));
        let feats = record_prep(&mut tape, s, &p)?;
        let stego = record_hide(&mut tape, c, feats, &p)?;
        Ok(tape.value(stego).clone())
    }

    /// Reveal network: reconstructed secret from a stego image.
    pub fn reveal(&self, stego: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let s = tape.constant(stego.clone());
        let out = record_reveal(&mut tape, s, &p)?;
        Ok(tape.value(out).clone())
    }
}

impl<P> StegoModelParams<P> {
    pub fn map<'a, Q>(&'a self, f: &mut dyn FnMut(&str, &'a P) -> Q) -> StegoModelParams<Q> {
        StegoModelParams {
            config: self.config,
            prep: self.prep.iter().enumerate().map(|(i, b)| b.map(&format!("prep.{i}"), f)).collect(),
            hiding: self.hiding.iter().enumerate().map(|(i, b)| b.map(&format!("hiding.{i}"), f)).collect(),
            hiding_out: self.hiding_out.map("hiding_out", f),
            reveal: self.reveal.iter().enumerate().map(|(i, b)| b.map(&format!("reveal.{i}"), f)).collect(),
            reveal_out: self.reveal_out.map("reveal_out", f),
            hiding_attn: self
                .hiding_attn
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&format!("hiding_attn.{i}"), f))
                .collect(),
            reveal_attn: self
                .reveal_attn
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&format!("reveal_attn.{i}"), f))
                .collect(),
        }
    }

    /// Visit every leaf mutably, in the same order as [`StegoModelParams::map`].
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, b) in self.prep.iter_mut().enumerate() {
            b.for_each_mut(&format!("prep.{i}"), f);
        }
        for (i, b) in self.hiding.iter_mut().enumerate() {
            b.for_each_mut(&format!("hiding.{i}"), f);
        }
        self.hiding_out.for_each_mut("hiding_out", f);
        for (i, b) in self.reveal.iter_mut().enumerate() {
            b.for_each_mut(&format!("reveal.{i}"), f);
        }
        self.reveal_out.for_each_mut("reveal_out", f);
        for (i, a) in self.hiding_attn.iter_mut().enumerate() {
            a.for_each_mut(&format!("hiding_attn.{i}"), f);
        }
        for (i, a) in self.reveal_attn.iter_mut().enumerate() {
            a.for_each_mut(&format!("reveal_attn.{i}"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// graph recording

/// relu of the three block convolutions, concatenated to 65 channels.
pub fn record_conv_block<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvBlockParams<Var>) -> Result<Var> {
    let kernels = p
        .convs()
        .map(|c| {
            let k = tape.shape(c.weight).h;
            (c.weight, c.bias, Padding::same(k, k))
        });
    let y = tape.conv2d_fused(x, &kernels)?;
    tape.relu(y)
}

fn check_image<T: Real>(tape: &Tape<T>, v: Var, what: &str) -> Result<Shape> {
    let s = tape.shape(v);
    if s.c != IMAGE_CHANNELS || s.h < MIN_IMAGE_SIZE || s.w < MIN_IMAGE_SIZE {
        return Err(Error::shape(
            "model",
            format!("{what} must be (n, 3, h, w) with h, w >= {MIN_IMAGE_SIZE}, got {s}"),
        ));
    }
    Ok(s)
}

pub fn record_prep<T: Real>(tape: &mut Tape<T>, secret: Var, p: &StegoModelParams<Var>) -> Result<Var> {
    check_image(tape, secret, "secret")?;
    let mut x = secret;
    for block in &p.prep {
        x = record_conv_block(tape, x, block)?;
    }
    Ok(x)
}

fn record_blocks<T: Real>(
    tape: &mut Tape<T>,
    mut x: Var,
    blocks: &[ConvBlockParams<Var>],
    attn: &[AttentionParams<Var>],
    mode: AttentionMode,
) -> Result<Var> {
    for (i, block) in blocks.iter().enumerate() {
        x = record_conv_block(tape, x, block)?;
        if let Some(a) = attn.get(i) {
            if i + 1 < blocks.len() {
                x = record_attention(tape, x, mode, a)?;
            }
        }
    }
    Ok(x)
}

pub fn record_hide<T: Real>(tape: &mut Tape<T>, cover: Var, prep_features: Var, p: &StegoModelParams<Var>) -> Result<Var> {
    let cs = check_image(tape, cover, "cover")?;
    let fs = tape.shape(prep_features);
    if fs != Shape::new(cs.n, BLOCK_CHANNELS, cs.h, cs.w) {
        return Err(Error::shape(
            "hide_forward",
            format!("prep features {fs} do not match cover {cs}"),
        ));
    }
    let x = tape.concat_channels(&[prep_features, cover])?;
    let x = record_blocks(tape, x, &p.hiding, &p.hiding_attn, p.config.mode)?;
    let logits = tape.conv2d(
        x,
        p.hiding_out.weight,
        p.hiding_out.bias,
        Padding::same(OUTPUT_KERNEL, OUTPUT_KERNEL),
    )?;
    tape.sigmoid(logits)
}

pub fn record_reveal<T: Real>(tape: &mut Tape<T>, stego: Var, p: &StegoModelParams<Var>) -> Result<Var> {
    check_image(tape, stego, "stego")?;
    let x = record_blocks(tape, stego, &p.reveal, &p.reveal_attn, p.config.mode)?;
    let logits = tape.conv2d(
        x,
        p.reveal_out.weight,
        p.reveal_out.bias,
        Padding::same(OUTPUT_KERNEL, OUTPUT_KERNEL),
    )?;
    tape.sigmoid(logits)
}

/// Vars produced by one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub stego: Var,
    pub revealed: Var,
    pub cover_term: Var,
    pub secret_term: Var,
    pub loss: Var,
}

/// mse(cover, stego) + beta * mse(secret, revealed)
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    cover: Var,
    stego: Var,
    secret: Var,
    revealed: Var,
    beta: T,
) -> Result<(Var, Var, Var)> {
    let cover_term = tape.mse(cover, stego)?;
    let secret_term = tape.mse(secret, revealed)?;
    let weighted = tape.scale(secret_term, beta)?;
    let loss = tape.add(cover_term, weighted)?;
    Ok((cover_term, secret_term, loss))
}

pub fn record_forward<T: Real>(tape: &mut Tape<T>, p: &StegoModelParams<Var>, cover: Var, secret: Var) -> Result<ForwardPass> {
    let feats = record_prep(tape, secret, p)?;
    let stego = record_hide(tape, cover, feats, p)?;
    let revealed = record_reveal(tape, stego, p)?;
    let beta = T::from_f64(p.config.beta as f64);
    let (cover_term, secret_term, loss) = record_loss(tape, cover, stego, secret, revealed, beta)?;
    Ok(ForwardPass {
        stego,
        revealed,
        cover_term,
        secret_term,
        loss,
    })
}

// ---------------------------------------------------------------------------
// tensor-level wrappers

fn bind_block<T: Real>(tape: &mut Tape<T>, p: &ConvBlockParams<Tensor<T>>) -> ConvBlockParams<Var> {
    p.map("block", &mut |_, t| tape.constant(t.clone()))
}

pub fn conv_block_forward<T: Real>(x: &Tensor<T>, p: &ConvBlockParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = bind_block(&mut tape, p);
    let y = record_conv_block(&mut tape, xv, &pv)?;
    Ok(tape.value(y).clone())
}

pub fn prep_forward<T: Real>(secret: &Tensor<T>, p: &StegoModelParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, false);
    let s = tape.constant(secret.clone());
    let y = record_prep(&mut tape, s, &pv)?;
    Ok(tape.value(y).clone())
}

pub fn hide_forward<T: Real>(cover: &Tensor<T>, prep_features: &Tensor<T>, p: &StegoModelParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, false);
    let c = tape.constant(cover.clone());
    let f = tape.constant(prep_features.clone());
    let y = record_hide(&mut tape, c, f, &pv)?;
    Ok(tape.value(y).clone())
}

pub fn reveal_forward<T: Real>(stego: &Tensor<T>, p: &StegoModelParams<Tensor<T>>) -> Result<Tensor<T>> {
    p.reveal(stego)
}

/// Training objective on concrete tensors.
pub fn loss<T: Real>(cover: &Tensor<T>, stego: &Tensor<T>, secret: &Tensor<T>, revealed: &Tensor<T>, beta: T) -> Result<T> {
    let mut tape = Tape::new();
    let vs = [cover, stego, secret, revealed].map(|t| tape.constant(t.clone()));
    let (_, _, l) = record_loss(&mut tape, vs[0], vs[1], vs[2], vs[3], beta)?;
    Ok(tape.scalar(l))
}

/// End-to-end gradient cases on a tiny instance, one per attention mode.
/// Parameter coordinates are sampled; images are constants.
pub fn gradcheck_cases(seed: u64, image_size: usize, coords_per_tensor: usize) -> Vec<crate::numerics::gradcheck::GradCase<f64>> {
    use crate::numerics::gradcheck::GradCase;
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, IMAGE_CHANNELS, image_size, image_size);
    AttentionMode::TABLE_ORDER
        .into_iter()
        .map(|mode| {
            let params = StegoModelParams::<Tensor<f64>>::init(rng.random(), ModelConfig::new(mode));
            let cover = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
            let secret = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
            let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
            let inputs: Vec<Tensor<f64>> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let skeleton = params.map(&mut |_, _| ());
            GradCase::new(format!("model[{}]", mode.token()), inputs, move |tape, vars| {
                debug_assert_eq!(vars.len(), names.len());
                let mut it = vars.iter().copied();
                let bound = skeleton.map(&mut |_, _| it.next().expect("one var per tensor"));
                let c = tape.constant(cover.clone());
                let s = tape.constant(secret.clone());
                Ok(record_forward(tape, &bound, c, s)?.loss)
            })
            .sampled(coords_per_tensor)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_count(cin: usize) -> usize {
        50 * (cin * 9 + 1) + 10 * (cin * 16 + 1) + 5 * (cin * 25 + 1)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let p = init_params(0, AttentionMode::Parallel, 1.0);
        let head = 3 * (65 * 9) + 3;
        let attn = (8 * 65 + 8) + (65 * 8 + 65) + (2 * 49 + 1);
        let expected = block_count(3)
            + block_count(65)
            + block_count(68)
            + 4 * block_count(65)
            + head
            + block_count(3)
            + 4 * block_count(65)
            + head
            + 4 * attn;
        assert_eq!(p.num_parameters(), expected);
        assert_eq!(expected, 493_509);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(42, AttentionMode::Spatial, 1.0);
        let b = init_params(42, AttentionMode::Spatial, 1.0);
        let c = init_params(43, AttentionMode::Spatial, 1.0);
        assert_eq!(a, b);
        assert_ne!(a.named_tensors(), c.named_tensors());
        assert!(a.named_tensors().iter().filter(|(n, _)| n.ends_with("bias")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn layer_wiring() {
        let p = init_params(1, AttentionMode::Channel, 1.0);
        assert_eq!(p.prep.len(), 2);
        assert_eq!(p.prep[0].in_channels(), 3);
        assert_eq!(p.prep[1].in_channels(), 65);
        assert_eq!(p.hiding.len(), 5);
        assert_eq!(p.hiding[0].in_channels(), 68);
        assert!(p.hiding[1..].iter().all(|b| b.in_channels() == 65));
        assert_eq!(p.hiding_attn.len(), 4);
        assert_eq!(p.reveal[0].in_channels(), 3);
        assert!(p.reveal_attn.is_empty());

        let with_dec = StegoModelParams::<Tensor<f32>>::init(
            1,
            ModelConfig {
                decoder_attention: true,
                ..ModelConfig::new(AttentionMode::Channel)
            },
        );
        assert_eq!(with_dec.reveal_attn.len(), 4);
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let p = init_params(1, AttentionMode::Baseline, 1.0);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "prep.0.conv3.weight");
        let mut visited = Vec::new();
        let mut q = p.clone();
        q.for_each_mut(&mut |n, _| visited.push(n.to_owned()));
        assert_eq!(visited, names);
    }

    #[test]
    fn rejects_non_rgb_or_tiny_images() {
        let p = init_params(0, AttentionMode::Baseline, 1.0);
        assert!(p.reveal(&Tensor::zeros(Shape::new(1, 1, 8, 8))).is_err());
        assert!(p.reveal(&Tensor::zeros(Shape::new(1, 3, 7, 8))).is_err());
    }

    #[test]
    fn loss_fixtures() {
        let a = Tensor::from_fn(Shape::new(1, 3, 4, 4), |i| (i % 7) as f32 / 7.0);
        let b = Tensor::from_fn(Shape::new(1, 3, 4, 4), |i| (i % 5) as f32 / 5.0);
        assert_eq!(loss(&a, &a, &b, &b, 1.0).unwrap(), 0.0);
        let m = crate::numerics::ops::mse(&a, &b).unwrap();
        assert_eq!(loss(&a, &b, &a, &a.map(|v| v * 0.5), 0.0).unwrap(), m);
    }
}

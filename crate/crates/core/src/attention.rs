//! Channel and spatial attention maps and the six ways of wiring them
//! between convolutional blocks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::kaiming_uniform;
use crate::numerics::{ConvParams, DenseParams, Padding, PoolKind, Real, Shape, Tape, Tensor, Var};

/// Kernel size of the spatial attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Baseline,
    Channel,
    Spatial,
    ChannelThenSpatial,
    SpatialThenChannel,
    Parallel,
}

impl AttentionMode {
    /// Row order of the comparison table.
    pub const TABLE_ORDER: [AttentionMode; 6] = [
        AttentionMode::Baseline,
        AttentionMode::Channel,
        AttentionMode::Spatial,
        AttentionMode::Parallel,
        AttentionMode::ChannelThenSpatial,
        AttentionMode::SpatialThenChannel,
    ];

    /// Command-line token.
    pub fn token(self) -> &'static str {
        match self {
            AttentionMode::Baseline => "baseline",
            AttentionMode::Channel => "channel",
            AttentionMode::Spatial => "spatial",
            AttentionMode::ChannelThenSpatial => "channel-then-spatial",
            AttentionMode::SpatialThenChannel => "spatial-then-channel",
            AttentionMode::Parallel => "channel-spatial-parallel",
        }
    }

    /// Row label used in comparison reports.
    pub fn label(self) -> &'static str {
        match self {
            AttentionMode::Baseline => "Baseline",
            AttentionMode::Channel => "Channel Only",
            AttentionMode::Spatial => "Spatial Only",
            AttentionMode::ChannelThenSpatial => "Channel then Spatial",
            AttentionMode::SpatialThenChannel => "Spatial then Channel",
            AttentionMode::Parallel => "Channel-Spatial Parallel",
        }
    }

    pub fn valid_tokens() -> String {
        Self::TABLE_ORDER.map(|m| m.token()).join(", ")
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::TABLE_ORDER
            .into_iter()
            .find(|m| m.token() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode '{s}'; valid modes: {}", Self::valid_tokens())))
    }
}

/// Shared two-layer MLP applied to the pooled channel descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams<P = Tensor> {
    pub mlp1: DenseParams<P>,
    pub mlp2: DenseParams<P>,
}

/// 7x7 convolution over the stacked (avg, max) channel-pooled maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<P = Tensor> {
    pub conv: ConvParams<P>,
}

/// The channel and spatial parameters used at one insertion point.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P = Tensor> {
    pub channel: ChannelAttentionParams<P>,
    pub spatial: SpatialAttentionParams<P>,
}

/// Width of the channel-attention bottleneck.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl<T: Real> ChannelAttentionParams<Tensor<T>> {
    pub fn init(rng: &mut impl Rng, channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        ChannelAttentionParams {
            mlp1: DenseParams {
                weight: kaiming_uniform(rng, Shape::new(hidden, channels, 1, 1)),
                bias: Tensor::zeros(Shape::new(hidden, 1, 1, 1)),
            },
            mlp2: DenseParams {
                weight: kaiming_uniform(rng, Shape::new(channels, hidden, 1, 1)),
                bias: Tensor::zeros(Shape::new(channels, 1, 1, 1)),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp1.weight.shape().c
    }
}

impl<T: Real> SpatialAttentionParams<Tensor<T>> {
    pub fn init(rng: &mut impl Rng) -> Self {
        SpatialAttentionParams {
            conv: ConvParams {
                weight: kaiming_uniform(rng, Shape::new(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)),
                bias: Tensor::zeros(Shape::new(1, 1, 1, 1)),
            },
        }
    }
}

impl<T: Real> AttentionParams<Tensor<T>> {
    pub fn init(rng: &mut impl Rng, channels: usize, reduction: usize) -> Self {
        AttentionParams {
            channel: ChannelAttentionParams::init(rng, channels, reduction),
            spatial: SpatialAttentionParams::init(rng),
        }
    }
}

impl<P> AttentionParams<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            channel: ChannelAttentionParams {
                mlp1: self.channel.mlp1.map(&format!("{prefix}.channel.mlp1"), f),
                mlp2: self.channel.mlp2.map(&format!("{prefix}.channel.mlp2"), f),
            },
            spatial: SpatialAttentionParams {
                conv: self.spatial.conv.map(&format!("{prefix}.spatial.conv"), f),
            },
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.channel.mlp1.for_each_mut(&format!("{prefix}.channel.mlp1"), f);
        self.channel.mlp2.for_each_mut(&format!("{prefix}.channel.mlp2"), f);
        self.spatial.conv.for_each_mut(&format!("{prefix}.spatial.conv"), f);
    }
}

fn shared_mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &ChannelAttentionParams<Var>) -> Result<Var> {
    let h = tape.dense(x, p.mlp1.weight, p.mlp1.bias)?;
    let h = tape.relu(h)?;
    tape.dense(h, p.mlp2.weight, p.mlp2.bias)
}

/// Records sigmoid(MLP(avgpool f) + MLP(maxpool f)), shape (n, c, 1, 1).
pub fn record_channel_map<T: Real>(tape: &mut Tape<T>, f: Var, p: &ChannelAttentionParams<Var>) -> Result<Var> {
    let avg = tape.global_pool(f, PoolKind::Avg)?;
    let max = tape.global_pool(f, PoolKind::Max)?;
    let a = shared_mlp(tape, avg, p)?;
    let m = shared_mlp(tape, max, p)?;
    let sum = tape.add(a, m)?;
    tape.sigmoid(sum)
}

/// Records sigmoid(conv7x7([channel avg; channel max])), shape (n, 1, h, w).
pub fn record_spatial_map<T: Real>(tape: &mut Tape<T>, f: Var, p: &SpatialAttentionParams<Var>) -> Result<Var> {
    let avg = tape.channel_pool(f, PoolKind::Avg)?;
    let max = tape.channel_pool(f, PoolKind::Max)?;
    let stacked = tape.concat_channels(&[avg, max])?;
    let logits = tape.conv2d(
        stacked,
        p.conv.weight,
        p.conv.bias,
        Padding::same(SPATIAL_KERNEL, SPATIAL_KERNEL),
    )?;
    tape.sigmoid(logits)
}

/// Records the reweighting selected by `mode`. Baseline returns `f` itself.
pub fn record_attention<T: Real>(tape: &mut Tape<T>, f: Var, mode: AttentionMode, p: &AttentionParams<Var>) -> Result<Var> {
    match mode {
        AttentionMode::Baseline => Ok(f),
        AttentionMode::Channel => {
            let mc = record_channel_map(tape, f, &p.channel)?;
            tape.broadcast_mul(f, mc)
        }
        AttentionMode::Spatial => {
            let ms = record_spatial_map(tape, f, &p.spatial)?;
            tape.broadcast_mul(f, ms)
        }
        AttentionMode::ChannelThenSpatial => {
            let mc = record_channel_map(tape, f, &p.channel)?;
            let g = tape.broadcast_mul(f, mc)?;
            let ms = record_spatial_map(tape, g, &p.spatial)?;
            tape.broadcast_mul(g, ms)
        }
        AttentionMode::SpatialThenChannel => {
            let ms = record_spatial_map(tape, f, &p.spatial)?;
            let g = tape.broadcast_mul(f, ms)?;
            let mc = record_channel_map(tape, g, &p.channel)?;
            tape.broadcast_mul(g, mc)
        }
        AttentionMode::Parallel => {
            let mc = record_channel_map(tape, f, &p.channel)?;
            let ms = record_spatial_map(tape, f, &p.spatial)?;
            let g = tape.broadcast_mul(f, mc)?;
            tape.broadcast_mul(g, ms)
        }
    }
}

fn check_channels<T: Real>(f: &Tensor<T>, p: &ChannelAttentionParams<Tensor<T>>) -> Result<()> {
    if p.channels() != f.shape().c || p.mlp2.weight.shape().n != f.shape().c {
        return Err(Error::shape(
            "channel_attention_map",
            format!("parameters for {} channels applied to {}", p.channels(), f.shape()),
        ));
    }
    Ok(())
}

fn bind_channel<T: Real>(tape: &mut Tape<T>, p: &ChannelAttentionParams<Tensor<T>>) -> ChannelAttentionParams<Var> {
    let mut c = |_: &str, t: &Tensor<T>| tape.constant(t.clone());
    ChannelAttentionParams {
        mlp1: p.mlp1.map("mlp1", &mut c),
        mlp2: p.mlp2.map("mlp2", &mut c),
    }
}

/// Channel attention map for `f`, values in (0, 1), shape (n, c, 1, 1).
pub fn channel_attention_map<T: Real>(f: &Tensor<T>, p: &ChannelAttentionParams<Tensor<T>>) -> Result<Tensor<T>> {
    check_channels(f, p)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let pv = bind_channel(&mut tape, p);
    let out = record_channel_map(&mut tape, fv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Spatial attention map for `f`, values in (0, 1), shape (n, 1, h, w).
pub fn spatial_attention_map<T: Real>(f: &Tensor<T>, p: &SpatialAttentionParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let pv = SpatialAttentionParams {
        conv: p.conv.map("conv", &mut |_, t| tape.constant(t.clone())),
    };
    let out = record_spatial_map(&mut tape, fv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Reweight `f` according to `mode`.
pub fn apply_attention<T: Real>(
    f: &Tensor<T>,
    mode: AttentionMode,
    cp: &ChannelAttentionParams<Tensor<T>>,
    sp: &SpatialAttentionParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    if mode == AttentionMode::Baseline {
        return Ok(f.clone());
    }
    check_channels(f, cp)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let pv = AttentionParams {
        channel: bind_channel(&mut tape, cp),
        spatial: SpatialAttentionParams {
            conv: sp.conv.map("conv", &mut |_, t| tape.constant(t.clone())),
        },
    };
    let out = record_attention(&mut tape, fv, mode, &pv)?;
    Ok(tape.value(out).clone())
}

/// Gradient cases for the attention maps and every wiring, small enough for
/// exhaustive finite differences.
pub fn gradcheck_cases<T: Real>(seed: u64) -> Vec<crate::numerics::gradcheck::GradCase<T>> {
    use crate::numerics::gradcheck::{random_distinct_tensor, random_tensor, GradCase};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (c, r) = (6, 2);
    let shape = Shape::new(2, c, 5, 5);
    let mut cases = Vec::new();
    let inputs_for = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Tensor<T>> {
        let p: AttentionParams<Tensor<T>> = AttentionParams::init(rng, c, r);
        let mut v = vec![random_distinct_tensor(rng, shape, 0.01)];
        let mut rand_bias = |t: &Tensor<T>| random_tensor::<T>(rng, t.shape()).map(|x| x * T::from_f64(0.3));
        // non-zero biases so every parameter has a generic gradient
        v.push(p.channel.mlp1.weight.clone());
        v.push(rand_bias(&p.channel.mlp1.bias));
        v.push(p.channel.mlp2.weight.clone());
        v.push(rand_bias(&p.channel.mlp2.bias));
        v.push(p.spatial.conv.weight.clone());
        v.push(rand_bias(&p.spatial.conv.bias));
        v
    };
    fn unpack(v: &[Var]) -> AttentionParams<Var> {
        AttentionParams {
            channel: ChannelAttentionParams {
                mlp1: DenseParams { weight: v[1], bias: v[2] },
                mlp2: DenseParams { weight: v[3], bias: v[4] },
            },
            spatial: SpatialAttentionParams {
                conv: ConvParams { weight: v[5], bias: v[6] },
            },
        }
    }

    let target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, c, 1, 1));
    cases.push(GradCase::new("channel_attention_map", inputs_for(&mut rng), move |tape, v| {
        let m = record_channel_map(tape, v[0], &unpack(v).channel)?;
        let t = tape.constant(target.clone());
        tape.mse(m, t)
    }));
    let target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 1, 5, 5));
    cases.push(GradCase::new("spatial_attention_map", inputs_for(&mut rng), move |tape, v| {
        let m = record_spatial_map(tape, v[0], &unpack(v).spatial)?;
        let t = tape.constant(target.clone());
        tape.mse(m, t)
    }));
    for mode in AttentionMode::TABLE_ORDER {
        let target: Tensor<T> = random_tensor(&mut rng, shape);
        cases.push(GradCase::new(
            format!("apply_attention[{}]", mode.token()),
            inputs_for(&mut rng),
            move |tape, v| {
                let y = record_attention(tape, v[0], mode, &unpack(v))?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            },
        ));
    }
    cases
}

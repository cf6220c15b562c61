//! A compact image-to-video denoiser `ε(z_t, I_1, s, t)`.
//!
//! Layout, for `depth` resolution levels:
//!
//! ```text
//! [z_t ‖ I_1] → conv_in → enc_0 … enc_{depth-1} (res block, then 2× avg-pool)
//!             → mid (res, spatial attn, temporal attn)
//!             → decoder layers 0 … decoder_layer_count-1, coarsest level first
//!             → norm → SiLU → conv_out
//! ```
//!
//! Each decoder layer is a residual block followed by spatial and temporal
//! self-attention, and it is the only place where [`FeatureHooks`] fire. The
//! first layer of each decoder level concatenates the matching encoder skip
//! tensor; a nearest-neighbour 2× upsample separates levels. Decoder layers are
//! numbered in execution order, so with the defaults (12 layers, depth 3)
//! layers 0–3 run at `H/4`, 4–7 at `H/2` and 8–11 at full resolution.

mod blocks;
pub mod text;
pub mod tokens;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{AttentionAxis, AttentionBlock, Conv, GroupNorm, Linear, ResBlock};

use crate::error::{Error, Result};
use crate::injection::FeatureKind;
use crate::latent::VideoLatent;
use crate::media::{read_tensor, write_tensor};
use crate::tensor::{silu, Tensor};
use blocks::{prefixed, Named, NamedMut};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub decoder_layer_count: usize,
    pub frames_nominal: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the timestep embedding; prompt embeddings share it.
    pub time_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            base_channels: 16,
            depth: 3,
            decoder_layer_count: 12,
            frames_nominal: 16,
            heads: 1,
            head_dim: 16,
            time_dim: 32,
            groups: 4,
            seed: 0,
        }
    }
}

impl UNetConfig {
    /// Half-size preset: 6 decoder layers over 2 levels. Plans written for the
    /// 12-layer layout can be mapped with [`crate::injection::InjectionPlan::remap_layers`].
    pub fn small() -> Self {
        Self {
            base_channels: 8,
            depth: 2,
            decoder_layer_count: 6,
            head_dim: 8,
            time_dim: 16,
            groups: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.decoder_layer_count < 2 || self.decoder_layer_count < self.depth {
            return bad(format!(
                "decoder_layer_count = {} must be >= 2 and >= depth = {}",
                self.decoder_layer_count, self.depth
            ));
        }
        if self.frames_nominal < 2 {
            return bad(format!("frames_nominal = {} must be >= 2", self.frames_nominal));
        }
        if self.depth == 0 || self.latent_channels == 0 || self.heads == 0 || self.head_dim == 0 || self.time_dim == 0 {
            return bad("depth, latent_channels, heads, head_dim and time_dim must be positive".into());
        }
        if self.groups == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "base_channels = {} is not divisible by groups = {}",
                self.base_channels, self.groups
            ));
        }
        Ok(())
    }

    /// Spatial extent must be divisible by this along both axes.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Number of decoder layers per resolution level, coarsest level first.
    pub fn layers_per_level(&self) -> Vec<usize> {
        let (n, d) = (self.decoder_layer_count, self.depth);
        (0..d).map(|i| n / d + usize::from(i < n % d)).collect()
    }
}

/// First-frame and prompt conditioning for one model call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub first_frame_latent: Tensor,
    pub text_embed: Vec<f64>,
    pub is_null: bool,
}

impl ConditioningBundle {
    pub fn new(first_frame_latent: Tensor, prompt: &str, text_dim: usize) -> Self {
        Self {
            first_frame_latent,
            text_embed: text::embed_prompt(prompt, text_dim),
            is_null: text::is_null_prompt(prompt),
        }
    }

    pub fn null(first_frame_latent: Tensor, text_dim: usize) -> Self {
        Self::new(first_frame_latent, "", text_dim)
    }
}

/// One hook location inside a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureSite {
    pub layer: usize,
    pub kind: FeatureKind,
    /// Spatial extent of the layer's resolution level.
    pub height: usize,
    pub width: usize,
}

/// Observes and may replace decoder features during a forward pass.
///
/// Conv features are `[F, C, H, W]`; spatial Q/K are `[F, H·W, D]`; temporal
/// Q/K are `[H·W, F, D]` with `D = heads · head_dim`.
pub trait FeatureHooks {
    fn visit(&mut self, site: &FeatureSite, feature: &mut Tensor) -> Result<()>;
}

/// Hooks told which sampling step each forward pass belongs to.
pub trait StepHooks: FeatureHooks {
    fn begin_step(&mut self, step: usize);
}

pub struct NoHooks;

impl StepHooks for NoHooks {
    fn begin_step(&mut self, _: usize) {}
}

impl FeatureHooks for NoHooks {
    fn visit(&mut self, _: &FeatureSite, _: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub res: ResBlock,
    pub spatial: AttentionBlock,
    pub temporal: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub conv_in: Conv,
    pub time_mlp: (Linear, Linear),
    pub encoder: Vec<ResBlock>,
    pub mid: DecoderLayer,
    pub decoder: Vec<DecoderLayer>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv,
}

impl Weights {
    pub(crate) fn named(&self) -> Named<'_> {
        let mut v = prefixed("conv_in", self.conv_in.named());
        v.extend(prefixed("time_mlp.0", self.time_mlp.0.named()));
        v.extend(prefixed("time_mlp.1", self.time_mlp.1.named()));
        for (i, e) in self.encoder.iter().enumerate() {
            v.extend(prefixed(&format!("enc{i}"), e.named()));
        }
        fn layer<'a>(p: &str, l: &'a DecoderLayer) -> Named<'a> {
            let mut v = prefixed(&format!("{p}.res"), l.res.named());
            v.extend(prefixed(&format!("{p}.spatial"), l.spatial.named()));
            v.extend(prefixed(&format!("{p}.temporal"), l.temporal.named()));
            v
        }
        v.extend(layer("mid", &self.mid));
        for (i, d) in self.decoder.iter().enumerate() {
            v.extend(layer(&format!("dec{i:02}"), d));
        }
        v.extend(prefixed("norm_out", self.norm_out.named()));
        v.extend(prefixed("conv_out", self.conv_out.named()));
        v
    }

    pub(crate) fn named_mut(&mut self) -> NamedMut<'_> {
        let mut v = prefixed("conv_in", self.conv_in.named_mut());
        v.extend(prefixed("time_mlp.0", self.time_mlp.0.named_mut()));
        v.extend(prefixed("time_mlp.1", self.time_mlp.1.named_mut()));
        for (i, e) in self.encoder.iter_mut().enumerate() {
            v.extend(prefixed(&format!("enc{i}"), e.named_mut()));
        }
        fn layer<'a>(p: &str, l: &'a mut DecoderLayer) -> NamedMut<'a> {
            let mut v = prefixed(&format!("{p}.res"), l.res.named_mut());
            v.extend(prefixed(&format!("{p}.spatial"), l.spatial.named_mut()));
            v.extend(prefixed(&format!("{p}.temporal"), l.temporal.named_mut()));
            v
        }
        v.extend(layer("mid", &mut self.mid));
        for (i, d) in self.decoder.iter_mut().enumerate() {
            v.extend(layer(&format!("dec{i:02}"), d));
        }
        v.extend(prefixed("norm_out", self.norm_out.named_mut()));
        v.extend(prefixed("conv_out", self.conv_out.named_mut()));
        v
    }

    /// Parameter names in canonical order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn bitwise_eq(&self, other: &Weights) -> bool {
        let (a, b) = (self.named(), other.named());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }
}

/// Draws all weights from a ChaCha8 stream seeded by `config.seed`; each
/// convolution/projection is standard normal scaled by `1/√fan_in`, norms start
/// at unit gain and biases at zero.
pub fn init_weights(config: &UNetConfig) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.base_channels;
    let g = config.groups;
    let td = config.time_dim;
    let attn = |rng: &mut ChaCha8Rng, axis| AttentionBlock::new(rng, axis, c, config.heads, config.head_dim, g);
    let layer = |rng: &mut ChaCha8Rng, cin| DecoderLayer {
        res: ResBlock::new(rng, cin, c, td, g),
        spatial: attn(rng, AttentionAxis::Spatial),
        temporal: attn(rng, AttentionAxis::Temporal),
    };

    let conv_in = Conv::new(&mut rng, 2 * config.latent_channels, c, 3);
    let time_mlp = (Linear::new(&mut rng, td, td), Linear::new(&mut rng, td, td));
    let encoder = (0..config.depth)
        .map(|_| ResBlock::new(&mut rng, c, c, td, g))
        .collect();
    let mid = layer(&mut rng, c);
    let mut decoder = Vec::with_capacity(config.decoder_layer_count);
    for count in config.layers_per_level() {
        for j in 0..count {
            let cin = if j == 0 { 2 * c } else { c };
            decoder.push(layer(&mut rng, cin));
        }
    }
    let norm_out = GroupNorm::new(c, g);
    let conv_out = Conv::new(&mut rng, c, config.latent_channels, 3);
    Ok(Weights {
        conv_in,
        time_mlp,
        encoder,
        mid,
        decoder,
        norm_out,
        conv_out,
    })
}

fn sinusoidal(t: i64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn map_frames(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let parts = (0..x.dims()[0]).map(|i| f(&x.outer(i))).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts)?)
}

fn avg_pool2(x: &Tensor) -> Tensor {
    let d = x.dims();
    let (f, c, h, w) = (d[0], d[1], d[2] / 2, d[3] / 2);
    let src = x.data();
    Tensor::from_fn(&[f, c, h, w], |idx| {
        let j = idx % w;
        let i = (idx / w) % h;
        let fc = idx / (w * h);
        let base = fc * d[2] * d[3];
        let at = |a: usize, b: usize| src[base + a * d[3] + b];
        0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1))
    })
}

fn upsample2(x: &Tensor) -> Tensor {
    let d = x.dims();
    let (f, c, h, w) = (d[0], d[1], d[2] * 2, d[3] * 2);
    let src = x.data();
    Tensor::from_fn(&[f, c, h, w], |idx| {
        let j = idx % w;
        let i = (idx / w) % h;
        let fc = idx / (w * h);
        src[fc * d[2] * d[3] + (i / 2) * d[3] + j / 2]
    })
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let parts = (0..a.dims()[0])
        .map(|i| Tensor::concat0(&a.outer(i), &b.outer(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::stack(&parts)?)
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    weights: Weights,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        let weights = init_weights(&config)?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: UNetConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let reference = init_weights(&config)?;
        let (want, got) = (reference.named(), weights.named());
        if want.len() != got.len()
            || want
                .iter()
                .zip(&got)
                .any(|((na, a), (nb, b))| na != nb || a.dims() != b.dims())
        {
            return Err(Error::Config("weights do not match the model configuration".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn conditioning(&self, first_frame_latent: Tensor, prompt: &str) -> ConditioningBundle {
        ConditioningBundle::new(first_frame_latent, prompt, self.config.time_dim)
    }

    /// Writes one tensor file per parameter, `<name>.av2v`, into `dir`.
    pub fn export_weights(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.weights.named() {
            write_tensor(&dir.join(format!("{name}.av2v")), t)?;
        }
        Ok(())
    }

    pub fn import_weights(config: UNetConfig, dir: &Path) -> Result<Self> {
        let mut weights = init_weights(&config)?;
        for (name, slot) in weights.named_mut() {
            let t = read_tensor(&dir.join(format!("{name}.av2v")))?;
            if t.dims() != slot.dims() {
                return Err(Error::Config(format!(
                    "parameter {name}: file dims {:?}, model expects {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t;
        }
        Ok(Self { config, weights })
    }

    fn check_inputs(&self, z: &VideoLatent, cond: &ConditioningBundle) -> Result<()> {
        let cfg = &self.config;
        if z.frames() < 2 {
            return Err(Error::Conditioning(format!(
                "need at least 2 frames, got {}",
                z.frames()
            )));
        }
        if z.channels() != cfg.latent_channels {
            return Err(Error::Conditioning(format!(
                "latent has {} channels, model expects {}",
                z.channels(),
                cfg.latent_channels
            )));
        }
        let ff = cond.first_frame_latent.dims();
        if ff != &z.dims()[1..] {
            return Err(Error::Conditioning(format!(
                "first-frame latent dims {ff:?} do not match latent frame dims {:?}",
                &z.dims()[1..]
            )));
        }
        let m = cfg.spatial_multiple();
        if !z.height().is_multiple_of(m) || !z.width().is_multiple_of(m) {
            return Err(Error::Conditioning(format!(
                "latent extent {}x{} must be divisible by {m}",
                z.height(),
                z.width()
            )));
        }
        if cond.text_embed.len() != cfg.time_dim {
            return Err(Error::Conditioning(format!(
                "prompt embedding has width {}, model expects {}",
                cond.text_embed.len(),
                cfg.time_dim
            )));
        }
        Ok(())
    }

    /// Predicts the noise in `z_t` at timestep `t`.
    pub fn forward(
        &self,
        z_t: &VideoLatent,
        cond: &ConditioningBundle,
        t: i64,
        hooks: &mut dyn FeatureHooks,
    ) -> Result<VideoLatent> {
        self.check_inputs(z_t, cond)?;
        let w = &self.weights;

        let mut temb = w.time_mlp.0.apply_vec(&sinusoidal(t, self.config.time_dim));
        temb.iter_mut().for_each(|v| *v = silu(*v));
        let mut temb = w.time_mlp.1.apply_vec(&temb);
        for (e, &s) in temb.iter_mut().zip(&cond.text_embed) {
            *e += s;
        }

        let z = z_t.as_tensor();
        let mut h = map_frames(z, |frame| {
            let x = Tensor::concat0(frame, &cond.first_frame_latent)?;
            w.conv_in.apply(&x, None)
        })?;

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut quiet = NoHooks;
        for (level, block) in w.encoder.iter().enumerate() {
            h = block.forward(&h, &temb, None, &mut quiet)?;
            skips.push(h.clone());
            if level + 1 < self.config.depth {
                h = avg_pool2(&h);
            }
        }

        h = w.mid.res.forward(&h, &temb, None, &mut quiet)?;
        h = w.mid.spatial.forward(&h, None, &mut quiet)?;
        h = w.mid.temporal.forward(&h, None, &mut quiet)?;

        let mut layer = 0;
        for (lvl_idx, count) in self.config.layers_per_level().into_iter().enumerate() {
            let skip = &skips[self.config.depth - 1 - lvl_idx];
            for j in 0..count {
                let dl = &w.decoder[layer];
                if j == 0 {
                    h = concat_channels(&h, skip)?;
                }
                h = dl.res.forward(&h, &temb, Some(layer), hooks)?;
                h = dl.spatial.forward(&h, Some(layer), hooks)?;
                h = dl.temporal.forward(&h, Some(layer), hooks)?;
                layer += 1;
            }
            if lvl_idx + 1 < self.config.depth {
                h = upsample2(&h);
            }
        }

        let eps = map_frames(&h, |frame| {
            let x = w.norm_out.apply(frame)?.map(silu);
            w.conv_out.apply(&x, None)
        })?;
        VideoLatent::new(eps)
    }
}

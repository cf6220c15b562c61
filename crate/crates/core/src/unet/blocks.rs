use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tokens::{from_spatial_tokens, from_temporal_tokens, spatial_tokens, temporal_tokens};
use super::{FeatureHooks, FeatureSite};
use crate::error::Result;
use crate::injection::FeatureKind;
use crate::tensor::{conv2d, group_normalize, matmul, scaled_dot_attention, silu, Tensor};

const GN_EPS: f64 = 1e-5;

pub(crate) fn randn(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

pub(crate) type Named<'a> = Vec<(String, &'a Tensor)>;
pub(crate) type NamedMut<'a> = Vec<(String, &'a mut Tensor)>;

pub(crate) fn prefixed<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        Self {
            gain: Tensor::full(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            groups,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(group_normalize(
            x,
            self.groups,
            self.gain.data(),
            self.bias.data(),
            GN_EPS,
        )?)
    }

    pub(crate) fn named(&self) -> Named<'_> {
        vec![("gain".into(), &self.gain), ("bias".into(), &self.bias)]
    }

    pub(crate) fn named_mut(&mut self) -> NamedMut<'_> {
        vec![("gain".into(), &mut self.gain), ("bias".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: randn(rng, &[cout, cin, k, k], cin * k * k),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Applies to one `[C, H, W]` frame, optionally adding a per-channel offset.
    pub fn apply(&self, x: &Tensor, offset: Option<&[f64]>) -> Result<Tensor> {
        let mut y = conv2d(x, &self.weight)?;
        let plane = y.dims()[1] * y.dims()[2];
        for (c, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let b = self.bias.data()[c] + offset.map_or(0.0, |o| o[c]);
            for v in chunk {
                *v += b;
            }
        }
        Ok(y)
    }

    pub(crate) fn named(&self) -> Named<'_> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(crate) fn named_mut(&mut self) -> NamedMut<'_> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Self {
        Self {
            weight: randn(rng, &[din, dout], din),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let (din, dout) = (self.weight.dims()[0], self.weight.dims()[1]);
        assert_eq!(x.len(), din);
        let mut out = self.bias.data().to_vec();
        for (i, &xv) in x.iter().enumerate() {
            let row = &self.weight.data()[i * dout..(i + 1) * dout];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
        out
    }

    pub(crate) fn named(&self) -> Named<'_> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(crate) fn named_mut(&mut self) -> NamedMut<'_> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// GroupNorm → SiLU → conv → (+ time embedding) → GroupNorm → SiLU → conv,
/// added to a (possibly 1×1-projected) shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv,
    pub time_proj: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(cin, groups),
            conv1: Conv::new(rng, cin, cout, 3),
            time_proj: Linear::new(rng, time_dim, cout),
            norm2: GroupNorm::new(cout, groups),
            conv2: Conv::new(rng, cout, cout, 3),
            shortcut: (cin != cout).then(|| Conv::new(rng, cin, cout, 1)),
        }
    }

    /// `x: [F, C, H, W]`. When `layer` is given, the residual branch output
    /// (before it joins the shortcut) is offered to the hooks as the conv feature.
    pub fn forward(
        &self,
        x: &Tensor,
        temb: &[f64],
        layer: Option<usize>,
        hooks: &mut dyn FeatureHooks,
    ) -> Result<Tensor> {
        let act: Vec<f64> = temb.iter().map(|&v| silu(v)).collect();
        let offset = self.time_proj.apply_vec(&act);
        let frames = x.dims()[0];
        let mut branch = Vec::with_capacity(frames);
        for f in 0..frames {
            let xf = x.outer(f);
            let h = self.norm1.apply(&xf)?.map(silu);
            let h = self.conv1.apply(&h, Some(&offset))?;
            let h = self.norm2.apply(&h)?.map(silu);
            branch.push(self.conv2.apply(&h, None)?);
        }
        let mut feature = Tensor::stack(&branch)?;
        if let Some(layer) = layer {
            let site = FeatureSite {
                layer,
                kind: FeatureKind::ConvF,
                height: x.dims()[2],
                width: x.dims()[3],
            };
            hooks.visit(&site, &mut feature)?;
        }
        let mut skip = Vec::with_capacity(frames);
        for f in 0..frames {
            let xf = x.outer(f);
            skip.push(match &self.shortcut {
                Some(conv) => conv.apply(&xf, None)?,
                None => xf,
            });
        }
        let mut out = Tensor::stack(&skip)?;
        out.add_assign(&feature)?;
        Ok(out)
    }

    pub(crate) fn named(&self) -> Named<'_> {
        let mut v = prefixed("norm1", self.norm1.named());
        v.extend(prefixed("conv1", self.conv1.named()));
        v.extend(prefixed("time_proj", self.time_proj.named()));
        v.extend(prefixed("norm2", self.norm2.named()));
        v.extend(prefixed("conv2", self.conv2.named()));
        if let Some(s) = &self.shortcut {
            v.extend(prefixed("shortcut", s.named()));
        }
        v
    }

    pub(crate) fn named_mut(&mut self) -> NamedMut<'_> {
        let mut v = prefixed("norm1", self.norm1.named_mut());
        v.extend(prefixed("conv1", self.conv1.named_mut()));
        v.extend(prefixed("time_proj", self.time_proj.named_mut()));
        v.extend(prefixed("norm2", self.norm2.named_mut()));
        v.extend(prefixed("conv2", self.conv2.named_mut()));
        if let Some(s) = &mut self.shortcut {
            v.extend(prefixed("shortcut", s.named_mut()));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Spatial,
    Temporal,
}

/// Pre-normalized residual self-attention over either token layout.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub axis: AttentionAxis,
    pub norm: GroupNorm,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        axis: AttentionAxis,
        channels: usize,
        heads: usize,
        head_dim: usize,
        groups: usize,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            axis,
            norm: GroupNorm::new(channels, groups),
            w_q: randn(rng, &[channels, inner], channels),
            w_k: randn(rng, &[channels, inner], channels),
            w_v: randn(rng, &[channels, inner], channels),
            out: Linear::new(rng, inner, channels),
            heads,
            head_dim,
        }
    }

    fn kinds(&self) -> (FeatureKind, FeatureKind) {
        match self.axis {
            AttentionAxis::Spatial => (FeatureKind::SpatialQ, FeatureKind::SpatialK),
            AttentionAxis::Temporal => (FeatureKind::TemporalQ, FeatureKind::TemporalK),
        }
    }

    pub fn forward(&self, x: &Tensor, layer: Option<usize>, hooks: &mut dyn FeatureHooks) -> Result<Tensor> {
        let (frames, h, w) = (x.dims()[0], x.dims()[2], x.dims()[3]);
        let normed: Vec<Tensor> = (0..frames)
            .map(|f| self.norm.apply(&x.outer(f)))
            .collect::<Result<_>>()?;
        let normed = Tensor::stack(&normed)?;
        let tokens = match self.axis {
            AttentionAxis::Spatial => spatial_tokens(&normed),
            AttentionAxis::Temporal => temporal_tokens(&normed),
        };
        let project = |wm: &Tensor| -> Result<Tensor> {
            let parts = tokens.iter().map(|t| matmul(t, wm)).collect::<Result<Vec<_>, _>>()?;
            Ok(Tensor::stack(&parts)?)
        };
        let mut q = project(&self.w_q)?;
        let mut k = project(&self.w_k)?;
        let v = project(&self.w_v)?;
        if let Some(layer) = layer {
            let (qk, kk) = self.kinds();
            let site = |kind| FeatureSite {
                layer,
                kind,
                height: h,
                width: w,
            };
            hooks.visit(&site(qk), &mut q)?;
            hooks.visit(&site(kk), &mut k)?;
        }
        let mut outs = Vec::with_capacity(tokens.len());
        for g in 0..tokens.len() {
            let attended = self.attend(&q.outer(g), &k.outer(g), &v.outer(g))?;
            let proj = matmul(&attended, &self.out.weight)?;
            let c = proj.dims()[1];
            let mut proj = proj;
            for row in proj.data_mut().chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(self.out.bias.data()) {
                    *o += b;
                }
            }
            outs.push(proj);
        }
        let delta = match self.axis {
            AttentionAxis::Spatial => from_spatial_tokens(&outs, h, w),
            AttentionAxis::Temporal => from_temporal_tokens(&outs, h, w),
        };
        Ok(x.add(&delta)?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if self.heads == 1 {
            return Ok(scaled_dot_attention(q, k, v)?);
        }
        let d = self.head_dim;
        let parts = (0..self.heads)
            .map(|hd| {
                let r = hd * d..(hd + 1) * d;
                scaled_dot_attention(
                    &q.columns(r.start, r.end),
                    &k.columns(r.start, r.end),
                    &v.columns(r.start, r.end),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::hcat(&parts))
    }

    pub(crate) fn named(&self) -> Named<'_> {
        let mut v = prefixed("norm", self.norm.named());
        v.push(("w_q".into(), &self.w_q));
        v.push(("w_k".into(), &self.w_k));
        v.push(("w_v".into(), &self.w_v));
        v.extend(prefixed("out", self.out.named()));
        v
    }

    pub(crate) fn named_mut(&mut self) -> NamedMut<'_> {
        let mut v = prefixed("norm", self.norm.named_mut());
        v.push(("w_q".into(), &mut self.w_q));
        v.push(("w_k".into(), &mut self.w_k));
        v.push(("w_v".into(), &mut self.w_v));
        v.extend(prefixed("out", self.out.named_mut()));
        v
    }
}

//! Per-layer feature visualisation: channel-mean conv activations and
//! head/query-mean attention scores, each rendered as a `[F, H, W]` map.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::injection::{FeatureKind, InjectionPlan};
use crate::media::{encode_pgm, write_tensor};
use crate::tensor::{attention_scores, Tensor};
use crate::unet::{FeatureHooks, FeatureSite, StepHooks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MapKind {
    Conv,
    SpatialAttention,
    TemporalAttention,
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapKind::Conv => "conv",
            MapKind::SpatialAttention => "spatial_attn",
            MapKind::TemporalAttention => "temporal_attn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub step: usize,
    pub layer: usize,
    pub kind: MapKind,
    /// `[F, H, W]`.
    pub map: Tensor,
}

impl FeatureMap {
    pub fn file_stem(&self) -> String {
        format!("step_{:03}_layer_{:02}_{}", self.step, self.layer, self.kind)
    }

    /// Frames laid side by side as one `[H, F·W]` plane.
    pub fn tiled(&self) -> Tensor {
        let (f, h, w) = (self.map.dims()[0], self.map.dims()[1], self.map.dims()[2]);
        let src = self.map.data();
        Tensor::from_fn(&[h, f * w], |i| {
            let (row, col) = (i / (f * w), i % (f * w));
            src[((col / w) * h + row) * w + col % w]
        })
    }
}

/// `[F, C, H, W]` → mean over channels, `[F, H, W]`.
pub fn channel_mean(feature: &Tensor) -> Tensor {
    let d = feature.dims();
    let (f, c, plane) = (d[0], d[1], d[2] * d[3]);
    let src = feature.data();
    let mut out = vec![0.0; f * plane];
    for fi in 0..f {
        for ci in 0..c {
            let base = (fi * c + ci) * plane;
            for p in 0..plane {
                out[fi * plane + p] += src[base + p];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Tensor::new(vec![f, d[2], d[3]], out).expect("map dims")
}

/// Mean attention received by each key token, averaged over heads and queries.
/// `q`, `k` are `[G, N, heads·head_dim]`; the result is `[G, N]`.
pub fn mean_key_attention(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (g, n, dm) = (q.dims()[0], q.dims()[1], q.dims()[2]);
    if k.dims() != q.dims() || dm % heads != 0 {
        return Err(Error::Pipeline(format!(
            "query dims {:?} and key dims {:?} do not split into {heads} heads",
            q.dims(),
            k.dims()
        )));
    }
    let hd = dm / heads;
    let mut out = vec![0.0; g * n];
    for gi in 0..g {
        let (qg, kg) = (q.outer(gi), k.outer(gi));
        for h in 0..heads {
            let scores = attention_scores(&qg.columns(h * hd, (h + 1) * hd), &kg.columns(h * hd, (h + 1) * hd))?;
            for row in scores.data().chunks(n) {
                for (o, &s) in out[gi * n..(gi + 1) * n].iter_mut().zip(row) {
                    *o += s;
                }
            }
        }
    }
    let norm = (heads * n) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(Tensor::new(vec![g, n], out)?)
}

/// Collects maps at the plan's layer sets (thresholds ignored) for the chosen steps.
pub struct VisualizeHooks {
    conv_layers: BTreeSet<usize>,
    spatial_layers: BTreeSet<usize>,
    temporal_layers: BTreeSet<usize>,
    steps: Option<BTreeSet<usize>>,
    heads: usize,
    step: usize,
    pending_q: Option<Tensor>,
    pub maps: Vec<FeatureMap>,
}

impl VisualizeHooks {
    /// `steps = None` visualises every step.
    pub fn new(plan: &InjectionPlan, heads: usize, steps: Option<BTreeSet<usize>>) -> Self {
        Self {
            conv_layers: plan.conv_layers.clone(),
            spatial_layers: plan.spatial_layers.clone(),
            temporal_layers: plan.temporal_layers.clone(),
            steps,
            heads,
            step: 0,
            pending_q: None,
            maps: Vec::new(),
        }
    }

    fn active(&self) -> bool {
        self.steps.as_ref().is_none_or(|s| s.contains(&self.step))
    }

    pub fn write(&self, dir: &Path, pixmaps: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in &self.maps {
            write_tensor(&dir.join(format!("{}.av2v", m.file_stem())), &m.map)?;
            if pixmaps {
                let path = dir.join(format!("{}.pgm", m.file_stem()));
                std::fs::write(&path, encode_pgm(&m.tiled())).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

impl StepHooks for VisualizeHooks {
    fn begin_step(&mut self, step: usize) {
        self.step = step;
        self.pending_q = None;
    }
}

impl FeatureHooks for VisualizeHooks {
    fn visit(&mut self, site: &FeatureSite, feature: &mut Tensor) -> Result<()> {
        if !self.active() {
            return Ok(());
        }
        let (layer, h, w) = (site.layer, site.height, site.width);
        let push = |maps: &mut Vec<FeatureMap>, kind, map| {
            maps.push(FeatureMap {
                step: self.step,
                layer,
                kind,
                map,
            })
        };
        match site.kind {
            FeatureKind::ConvF if self.conv_layers.contains(&layer) => {
                let map = channel_mean(feature);
                push(&mut self.maps, MapKind::Conv, map);
            }
            FeatureKind::SpatialQ if self.spatial_layers.contains(&layer) => {
                self.pending_q = Some(feature.clone());
            }
            FeatureKind::TemporalQ if self.temporal_layers.contains(&layer) => {
                self.pending_q = Some(feature.clone());
            }
            FeatureKind::SpatialK if self.spatial_layers.contains(&layer) => {
                let q = self.pending_q.take().expect("spatial query precedes key");
                // [F, HW] is already [F, H, W] in memory
                let m = mean_key_attention(&q, feature, self.heads)?;
                let frames = m.dims()[0];
                push(&mut self.maps, MapKind::SpatialAttention, m.reshape(&[frames, h, w])?);
            }
            FeatureKind::TemporalK if self.temporal_layers.contains(&layer) => {
                let q = self.pending_q.take().expect("temporal query precedes key");
                // [HW, F] → [F, H, W]
                let m = mean_key_attention(&q, feature, self.heads)?.transpose2();
                let frames = m.dims()[0];
                push(&mut self.maps, MapKind::TemporalAttention, m.reshape(&[frames, h, w])?);
            }
            _ => {}
        }
        Ok(())
    }
}

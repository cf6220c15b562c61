//! Record/replace machinery for decoder features.
//!
//! The source branch records conv features and attention queries/keys at the
//! planned sites; the edit branch swaps its own values for the recorded ones.
//! A site `(step, layer, kind)` is active iff `layer` is in the kind's layer set
//! and `step < round(tau_kind · T)`, where step 0 is the noisiest step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CacheError, Error, Result};
use crate::media::{read_tensor, write_tensor};
use crate::tensor::Tensor;
use crate::unet::{FeatureHooks, FeatureSite, StepHooks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    ConvF,
    SpatialQ,
    SpatialK,
    TemporalQ,
    TemporalK,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::ConvF,
        FeatureKind::SpatialQ,
        FeatureKind::SpatialK,
        FeatureKind::TemporalQ,
        FeatureKind::TemporalK,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::ConvF => "conv_f",
            FeatureKind::SpatialQ => "spatial_q",
            FeatureKind::SpatialK => "spatial_k",
            FeatureKind::TemporalQ => "temporal_q",
            FeatureKind::TemporalK => "temporal_k",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Plan(format!("unknown feature kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureKey {
    pub step: usize,
    pub layer: usize,
    pub kind: FeatureKind,
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(step {}, layer {}, {})", self.step, self.layer, self.kind)
    }
}

impl FeatureKey {
    fn file_name(&self) -> String {
        format!("step_{:03}_layer_{:02}_{}.av2v", self.step, self.layer, self.kind)
    }

    fn parse_file_name(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("step_")?.strip_suffix(".av2v")?;
        let (step, rest) = rest.split_once("_layer_")?;
        let (layer, kind) = rest.split_once('_')?;
        Some(Self {
            step: step.parse().ok()?,
            layer: layer.parse().ok()?,
            kind: kind.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    /// `l1`: decoder layers whose conv features are replaced.
    pub conv_layers: BTreeSet<usize>,
    /// `l2`: decoder layers whose spatial Q/K are replaced.
    pub spatial_layers: BTreeSet<usize>,
    /// `l3`: decoder layers whose temporal Q/K are replaced.
    pub temporal_layers: BTreeSet<usize>,
    pub tau_conv: f64,
    pub tau_sa: f64,
    pub tau_ta: f64,
    /// Total sampling steps `T`.
    pub steps: usize,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self {
            conv_layers: BTreeSet::from([4]),
            spatial_layers: (4..=11).collect(),
            temporal_layers: (4..=11).collect(),
            tau_conv: 0.2,
            tau_sa: 0.2,
            tau_ta: 0.5,
            steps: 50,
        }
    }
}

impl InjectionPlan {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    /// Same layers, every threshold zero: nothing is injected.
    pub fn disabled(&self) -> Self {
        Self {
            tau_conv: 0.0,
            tau_sa: 0.0,
            tau_ta: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self, decoder_layer_count: usize) -> Result<()> {
        for (name, tau) in [
            ("tau_conv", self.tau_conv),
            ("tau_sa", self.tau_sa),
            ("tau_ta", self.tau_ta),
        ] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Plan(format!("{name} = {tau} is outside [0, 1]")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Plan("plan needs T >= 1".into()));
        }
        for (name, set) in [
            ("l1", &self.conv_layers),
            ("l2", &self.spatial_layers),
            ("l3", &self.temporal_layers),
        ] {
            if let Some(&l) = set.iter().find(|&&l| l >= decoder_layer_count) {
                return Err(Error::Plan(format!(
                    "{name} contains layer {l}, model has {decoder_layer_count} decoder layers"
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self, kind: FeatureKind) -> &BTreeSet<usize> {
        match kind {
            FeatureKind::ConvF => &self.conv_layers,
            FeatureKind::SpatialQ | FeatureKind::SpatialK => &self.spatial_layers,
            FeatureKind::TemporalQ | FeatureKind::TemporalK => &self.temporal_layers,
        }
    }

    pub fn tau(&self, kind: FeatureKind) -> f64 {
        match kind {
            FeatureKind::ConvF => self.tau_conv,
            FeatureKind::SpatialQ | FeatureKind::SpatialK => self.tau_sa,
            FeatureKind::TemporalQ | FeatureKind::TemporalK => self.tau_ta,
        }
    }

    /// `round(tau · T)`: the number of leading steps during which `kind` is injected.
    pub fn active_steps(&self, kind: FeatureKind) -> usize {
        (self.tau(kind) * self.steps as f64).round() as usize
    }

    pub fn should_inject(&self, kind: FeatureKind, layer: usize, step_index: usize) -> bool {
        self.layers(kind).contains(&layer) && step_index < self.active_steps(kind)
    }

    /// Closed-form number of cache entries a full recording pass produces.
    pub fn expected_entries(&self) -> usize {
        FeatureKind::ALL
            .iter()
            .map(|&k| self.layers(k).len() * self.active_steps(k).min(self.steps))
            .sum()
    }

    /// Maps layer indices written for a `from`-layer decoder onto a `to`-layer
    /// one by proportional scaling, `l · to / from`.
    pub fn remap_layers(&self, from: usize, to: usize) -> Self {
        let map = |s: &BTreeSet<usize>| s.iter().map(|&l| l * to / from).collect();
        Self {
            conv_layers: map(&self.conv_layers),
            spatial_layers: map(&self.spatial_layers),
            temporal_layers: map(&self.temporal_layers),
            ..self.clone()
        }
    }
}

/// Write-once store of recorded source-branch features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    plan: InjectionPlan,
    entries: BTreeMap<FeatureKey, Tensor>,
}

impl FeatureCache {
    pub fn new(plan: InjectionPlan) -> Self {
        Self {
            plan,
            entries: BTreeMap::new(),
        }
    }

    pub fn plan(&self) -> &InjectionPlan {
        &self.plan
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &FeatureKey> {
        self.entries.keys()
    }

    pub fn record(&mut self, key: FeatureKey, value: &Tensor) -> Result<(), CacheError> {
        if self.entries.contains_key(&key) {
            return Err(CacheError::Duplicate(key));
        }
        self.entries.insert(key, value.clone());
        Ok(())
    }

    pub fn inject(&self, key: FeatureKey) -> Result<&Tensor, CacheError> {
        self.entries.get(&key).ok_or(CacheError::Miss(key))
    }

    /// Writes every entry as `step_SSS_layer_LL_<kind>.av2v` under `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (key, t) in &self.entries {
            write_tensor(&dir.join(key.file_name()), t)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`FeatureCache::dump`]; other files are ignored.
    pub fn load(dir: &Path, plan: InjectionPlan) -> Result<Self> {
        let mut cache = Self::new(plan);
        let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for entry in listing {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
        names.sort();
        for name in names {
            if let Some(key) = FeatureKey::parse_file_name(&name) {
                let t = read_tensor(&dir.join(&name))?;
                cache.record(key, &t)?;
            }
        }
        Ok(cache)
    }
}

/// Records planned sites of the source branch at one sampling step.
pub struct RecordHooks<'a> {
    pub cache: &'a mut FeatureCache,
    pub step: usize,
}

impl StepHooks for RecordHooks<'_> {
    fn begin_step(&mut self, step: usize) {
        self.step = step;
    }
}

impl FeatureHooks for RecordHooks<'_> {
    fn visit(&mut self, site: &FeatureSite, feature: &mut Tensor) -> Result<()> {
        if self.cache.plan.should_inject(site.kind, site.layer, self.step) {
            let key = FeatureKey {
                step: self.step,
                layer: site.layer,
                kind: site.kind,
            };
            self.cache.record(key, feature)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CfgBranch {
    Conditional,
    Negative,
}

/// Instrumentation gathered while injecting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionProbe {
    /// Sites where the post-replacement feature was compared to the cache.
    pub checked: BTreeMap<CfgBranch, usize>,
    /// Sites whose locally computed feature already equalled the cached one.
    pub locally_equal: BTreeMap<CfgBranch, usize>,
    /// Sites where the feature handed back to the model differed from the cache.
    pub mismatches: Vec<(CfgBranch, FeatureKey)>,
}

impl InjectionProbe {
    pub fn checked(&self, branch: CfgBranch) -> usize {
        self.checked.get(&branch).copied().unwrap_or(0)
    }

    pub fn locally_equal(&self, branch: CfgBranch) -> usize {
        self.locally_equal.get(&branch).copied().unwrap_or(0)
    }

    pub fn total_checked(&self) -> usize {
        self.checked.values().sum()
    }
}

/// Replaces planned sites of an edit-branch forward pass with cached features.
pub struct InjectHooks<'a> {
    pub cache: &'a FeatureCache,
    pub step: usize,
    pub branch: CfgBranch,
    pub probe: &'a mut InjectionProbe,
}

impl FeatureHooks for InjectHooks<'_> {
    fn visit(&mut self, site: &FeatureSite, feature: &mut Tensor) -> Result<()> {
        if !self.cache.plan.should_inject(site.kind, site.layer, self.step) {
            return Ok(());
        }
        let key = FeatureKey {
            step: self.step,
            layer: site.layer,
            kind: site.kind,
        };
        let cached = self.cache.inject(key)?;
        if cached.dims() != feature.dims() {
            return Err(CacheError::ShapeMismatch {
                key,
                cached: cached.dims().to_vec(),
                site: feature.dims().to_vec(),
            }
            .into());
        }
        if feature.bitwise_eq(cached) {
            *self.probe.locally_equal.entry(self.branch).or_default() += 1;
        }
        *feature = cached.clone();
        *self.probe.checked.entry(self.branch).or_default() += 1;
        if !feature.bitwise_eq(cached) {
            self.probe.mismatches.push((self.branch, key));
        }
        Ok(())
    }
}

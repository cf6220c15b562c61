//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored; values run to the end
//! of the line, so prompts may contain `#` or `=`. Unknown and repeated keys
//! are errors. [`RunConfig::to_text`] prints every key with its effective
//! value, which is what gets saved as `resolved.cfg`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::injection::InjectionPlan;
use crate::media::PatchCodec;
use crate::pipeline::{SourceTrajectory, DEFAULT_GUIDANCE_SCALE, DEFAULT_NEGATIVE_PROMPT};
use crate::scheduler::NoiseSchedule;
use crate::unet::UNetConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub base_channels: usize,
    pub depth: usize,
    pub decoder_layers: usize,
    pub frames_nominal: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub patch: usize,
    pub codec_seed: u64,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub l1: Vec<usize>,
    pub l2: Vec<usize>,
    pub l3: Vec<usize>,
    pub tau_conv: f64,
    pub tau_sa: f64,
    pub tau_ta: f64,
    pub guidance_scale: f64,
    pub t_prime_fraction: f64,
    pub negative_prompt: String,
    pub prompt: String,
    pub source_trajectory: SourceTrajectory,
    /// Steps that `features` visualises; empty means every step.
    pub feature_steps: Vec<usize>,
    pub feature_pixmaps: bool,
    pub dump_cache: bool,
    pub frames: String,
    pub ladder: String,
    pub edited_first_frame: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let unet = UNetConfig::default();
        let plan = InjectionPlan::default();
        Self {
            seed: unet.seed,
            base_channels: unet.base_channels,
            depth: unet.depth,
            decoder_layers: unet.decoder_layer_count,
            frames_nominal: unet.frames_nominal,
            heads: unet.heads,
            head_dim: unet.head_dim,
            time_dim: unet.time_dim,
            groups: unet.groups,
            patch: 8,
            codec_seed: 0,
            t_train: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            steps: plan.steps,
            l1: plan.conv_layers.iter().copied().collect(),
            l2: plan.spatial_layers.iter().copied().collect(),
            l3: plan.temporal_layers.iter().copied().collect(),
            tau_conv: plan.tau_conv,
            tau_sa: plan.tau_sa,
            tau_ta: plan.tau_ta,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            t_prime_fraction: 1.0,
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.to_string(),
            prompt: String::new(),
            source_trajectory: SourceTrajectory::default(),
            feature_steps: Vec::new(),
            feature_pixmaps: true,
            dump_cache: false,
            frames: String::new(),
            ladder: String::new(),
            edited_first_frame: String::new(),
        }
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| scalar(key, s))
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 33] = [
        "seed",
        "base_channels",
        "depth",
        "decoder_layers",
        "frames_nominal",
        "heads",
        "head_dim",
        "time_dim",
        "groups",
        "patch",
        "codec_seed",
        "t_train",
        "beta_start",
        "beta_end",
        "steps",
        "l1",
        "l2",
        "l3",
        "tau_conv",
        "tau_sa",
        "tau_ta",
        "guidance_scale",
        "t_prime_fraction",
        "negative_prompt",
        "prompt",
        "source_trajectory",
        "feature_steps",
        "feature_pixmaps",
        "dump_cache",
        "frames",
        "ladder",
        "edited_first_frame",
        "latent_channels",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{key}: given more than once")));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = scalar(key, value)?,
            "base_channels" => self.base_channels = scalar(key, value)?,
            "depth" => self.depth = scalar(key, value)?,
            "decoder_layers" => self.decoder_layers = scalar(key, value)?,
            "frames_nominal" => self.frames_nominal = scalar(key, value)?,
            "heads" => self.heads = scalar(key, value)?,
            "head_dim" => self.head_dim = scalar(key, value)?,
            "time_dim" => self.time_dim = scalar(key, value)?,
            "groups" => self.groups = scalar(key, value)?,
            "patch" => self.patch = scalar(key, value)?,
            "codec_seed" => self.codec_seed = scalar(key, value)?,
            "t_train" => self.t_train = scalar(key, value)?,
            "beta_start" => self.beta_start = scalar(key, value)?,
            "beta_end" => self.beta_end = scalar(key, value)?,
            "steps" => self.steps = scalar(key, value)?,
            "l1" => self.l1 = list(key, value)?,
            "l2" => self.l2 = list(key, value)?,
            "l3" => self.l3 = list(key, value)?,
            "tau_conv" => self.tau_conv = scalar(key, value)?,
            "tau_sa" => self.tau_sa = scalar(key, value)?,
            "tau_ta" => self.tau_ta = scalar(key, value)?,
            "guidance_scale" => self.guidance_scale = scalar(key, value)?,
            "t_prime_fraction" => self.t_prime_fraction = scalar(key, value)?,
            "negative_prompt" => self.negative_prompt = value.to_string(),
            "prompt" => self.prompt = value.to_string(),
            "source_trajectory" => self.source_trajectory = value.parse()?,
            "feature_steps" => self.feature_steps = list(key, value)?,
            "feature_pixmaps" => self.feature_pixmaps = flag(key, value)?,
            "dump_cache" => self.dump_cache = flag(key, value)?,
            "frames" => self.frames = value.to_string(),
            "ladder" => self.ladder = value.to_string(),
            "edited_first_frame" => self.edited_first_frame = value.to_string(),
            "latent_channels" => {
                // derived from the codec; accepted only when consistent
                let c: usize = scalar(key, value)?;
                if c != self.latent_channels() {
                    return Err(Error::Config(format!(
                        "latent_channels: {c} conflicts with 3·patch² = {}",
                        self.latent_channels()
                    )));
                }
            }
            _ => return Err(Error::Config(format!("{key}: unknown key"))),
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        kv("seed", self.seed.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("depth", self.depth.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("frames_nominal", self.frames_nominal.to_string());
        kv("heads", self.heads.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("time_dim", self.time_dim.to_string());
        kv("groups", self.groups.to_string());
        kv("patch", self.patch.to_string());
        kv("codec_seed", self.codec_seed.to_string());
        kv("t_train", self.t_train.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("steps", self.steps.to_string());
        kv("l1", join(&self.l1));
        kv("l2", join(&self.l2));
        kv("l3", join(&self.l3));
        kv("tau_conv", self.tau_conv.to_string());
        kv("tau_sa", self.tau_sa.to_string());
        kv("tau_ta", self.tau_ta.to_string());
        kv("guidance_scale", self.guidance_scale.to_string());
        kv("t_prime_fraction", self.t_prime_fraction.to_string());
        kv("negative_prompt", self.negative_prompt.clone());
        kv("prompt", self.prompt.clone());
        kv("source_trajectory", self.source_trajectory.to_string());
        kv("feature_steps", join(&self.feature_steps));
        kv("feature_pixmaps", self.feature_pixmaps.to_string());
        kv("dump_cache", self.dump_cache.to_string());
        kv("frames", self.frames.clone());
        kv("ladder", self.ladder.clone());
        kv("edited_first_frame", self.edited_first_frame.clone());
        kv("latent_channels", self.latent_channels().to_string());
        s
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: self.latent_channels(),
            base_channels: self.base_channels,
            depth: self.depth,
            decoder_layer_count: self.decoder_layers,
            frames_nominal: self.frames_nominal,
            heads: self.heads,
            head_dim: self.head_dim,
            time_dim: self.time_dim,
            groups: self.groups,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.t_train, self.beta_start, self.beta_end, self.steps)
    }

    pub fn plan(&self) -> InjectionPlan {
        InjectionPlan {
            conv_layers: self.l1.iter().copied().collect(),
            spatial_layers: self.l2.iter().copied().collect(),
            temporal_layers: self.l3.iter().copied().collect(),
            tau_conv: self.tau_conv,
            tau_sa: self.tau_sa,
            tau_ta: self.tau_ta,
            steps: self.steps,
        }
    }

    pub fn codec(&self) -> Result<PatchCodec> {
        PatchCodec::new(self.patch, self.codec_seed)
    }
}

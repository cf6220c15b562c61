//! Inversion, source reconstruction with feature recording, and the injected,
//! guided edit branch.

use std::fmt;
use std::path::Path;

use crate::error::{CacheError, Error, Result};
use crate::injection::{CfgBranch, FeatureCache, InjectHooks, InjectionPlan, InjectionProbe, RecordHooks};
use crate::latent::VideoLatent;
use crate::media::{read_tensor, write_tensor};
use crate::scheduler::{ddim_denoise_step, ddim_invert_step, NoiseSchedule};
use crate::tensor::Tensor;
use crate::unet::{FeatureHooks, NoHooks, StepHooks, UNet};

pub const DEFAULT_NEGATIVE_PROMPT: &str = "Distorted, discontinuous, Ugly, blurry, low resolution, motionless, \
static, disfigured, disconnected limbs, Ugly faces, incomplete arms";

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

/// Which latent the source branch feeds the model at each denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceTrajectory {
    /// Continue from the branch's own previous output, like the edit branch.
    #[default]
    SelfDenoised,
    /// Restart every step from the stored inverted rung.
    LadderRestart,
}

impl std::str::FromStr for SourceTrajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfDenoised),
            "ladder" => Ok(Self::LadderRestart),
            _ => Err(Error::Config(format!(
                "source_trajectory must be self or ladder, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for SourceTrajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SelfDenoised => "self",
            Self::LadderRestart => "ladder",
        })
    }
}

/// Inverted latents `z_t` for every sampling timestep, clean first.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    ladder: Vec<VideoLatent>,
}

impl InversionResult {
    pub fn new(ladder: Vec<VideoLatent>) -> Result<Self> {
        if ladder.len() < 2 {
            return Err(Error::Pipeline(format!(
                "ladder needs at least 2 rungs, got {}",
                ladder.len()
            )));
        }
        if let Some(k) = ladder.iter().position(|z| z.dims() != ladder[0].dims()) {
            return Err(Error::Pipeline(format!(
                "ladder rung {k} has dims {:?}, rung 0 has {:?}",
                ladder[k].dims(),
                ladder[0].dims()
            )));
        }
        Ok(Self { ladder })
    }

    pub fn ladder(&self) -> &[VideoLatent] {
        &self.ladder
    }

    /// Number of sampling steps `T`; the ladder holds `T + 1` rungs.
    pub fn steps(&self) -> usize {
        self.ladder.len() - 1
    }

    pub fn rung(&self, k: usize) -> &VideoLatent {
        &self.ladder[k]
    }

    pub fn source(&self) -> &VideoLatent {
        &self.ladder[0]
    }

    pub fn top(&self) -> &VideoLatent {
        &self.ladder[self.steps()]
    }

    /// Latent of the source's first frame, the conditioning image.
    pub fn first_frame(&self) -> Tensor {
        self.ladder[0].frame(0)
    }

    pub fn rung_file_name(k: usize) -> String {
        format!("z_step_{k:03}.av2v")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, z) in self.ladder.iter().enumerate() {
            write_tensor(&dir.join(Self::rung_file_name(k)), z.as_tensor())?;
        }
        Ok(())
    }

    /// Reads `z_step_000.av2v`, `z_step_001.av2v`, … until the first gap.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut ladder = Vec::new();
        loop {
            let path = dir.join(Self::rung_file_name(ladder.len()));
            if !path.exists() {
                break;
            }
            ladder.push(VideoLatent::new(read_tensor(&path)?)?);
        }
        if ladder.is_empty() {
            return Err(Error::Pipeline(format!("no ladder files in {}", dir.display())));
        }
        Self::new(ladder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub source_latents: VideoLatent,
    pub edited_first_frame_latent: Tensor,
    pub target_prompt: String,
    pub negative_prompt: String,
    pub guidance_scale: f64,
    /// Sampling starts at step `floor((1 − fraction) · T)`.
    pub t_prime_fraction: f64,
    pub plan: InjectionPlan,
}

impl EditRequest {
    pub fn new(source_latents: VideoLatent, edited_first_frame_latent: Tensor, target_prompt: &str) -> Self {
        Self {
            source_latents,
            edited_first_frame_latent,
            target_prompt: target_prompt.to_string(),
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.to_string(),
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            t_prime_fraction: 1.0,
            plan: InjectionPlan::default(),
        }
    }

    /// The request that reproduces the source: same first frame, null prompt,
    /// no guidance, full-length sampling.
    pub fn identity(source_latents: VideoLatent, plan: InjectionPlan) -> Self {
        Self {
            edited_first_frame_latent: source_latents.frame(0),
            source_latents,
            target_prompt: String::new(),
            negative_prompt: String::new(),
            guidance_scale: 1.0,
            t_prime_fraction: 1.0,
            plan,
        }
    }

    pub fn start_step(&self, steps: usize) -> usize {
        start_step(self.t_prime_fraction, steps)
    }
}

/// `floor((1 − fraction) · T)`, tolerant of the rounding in `1 − fraction`.
pub fn start_step(fraction: f64, steps: usize) -> usize {
    ((1.0 - fraction) * steps as f64 + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub latent: VideoLatent,
    /// Latent after each denoising step; the last entry is `latent`.
    pub trajectory: Vec<VideoLatent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub latent: VideoLatent,
    /// Latent after each step from `start_step` on.
    pub trajectory: Vec<VideoLatent>,
    pub start_step: usize,
    pub probe: InjectionProbe,
}

impl EditOutput {
    /// Summed per-step L2 distance to the source branch over the steps both ran.
    pub fn trajectory_distance(&self, source: &Reconstruction) -> Result<f64> {
        let mut total = 0.0;
        for (i, z) in self.trajectory.iter().enumerate() {
            let reference = source
                .trajectory
                .get(self.start_step + i)
                .ok_or_else(|| Error::Pipeline("source trajectory is shorter than the edit".into()))?;
            total += z.distance(reference)?;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct EditRun {
    pub inversion: InversionResult,
    pub source: Reconstruction,
    pub cache: FeatureCache,
    pub edit: EditOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Invert,
    Reconstruct,
    Edit,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Invert => "invert",
            Phase::Reconstruct => "reconstruct",
            Phase::Edit => "edit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgressEvent {
    pub phase: Phase,
    /// 1-based count of completed steps.
    pub step: usize,
    pub total: usize,
}

impl fmt::Display for ProgressEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "phase={} step={}/{}", self.phase, self.step, self.total)
    }
}

/// `eps_neg + w · (eps_cond − eps_neg)`.
pub fn cfg_combine(eps_cond: &VideoLatent, eps_neg: &VideoLatent, w: f64) -> Result<VideoLatent> {
    if eps_cond.dims() != eps_neg.dims() {
        return Err(Error::Pipeline(format!(
            "guidance branches disagree: {:?} vs {:?}",
            eps_cond.dims(),
            eps_neg.dims()
        )));
    }
    if !(w >= 1.0 && w.is_finite()) {
        return Err(Error::Pipeline(format!("guidance scale must be >= 1, got {w}")));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let mut out = eps_neg.as_tensor().clone();
    for (o, &c) in out.data_mut().iter_mut().zip(eps_cond.as_tensor().data()) {
        *o += w * (c - *o);
    }
    VideoLatent::new(out)
}

type ProgressSink<'a> = Box<dyn FnMut(&ProgressEvent) + 'a>;

pub struct Pipeline<'a> {
    model: &'a UNet,
    schedule: &'a NoiseSchedule,
    source_mode: SourceTrajectory,
    progress: ProgressSink<'a>,
}

impl<'a> Pipeline<'a> {
    pub fn new(model: &'a UNet, schedule: &'a NoiseSchedule) -> Self {
        Self {
            model,
            schedule,
            source_mode: SourceTrajectory::default(),
            progress: Box::new(|_| {}),
        }
    }

    pub fn with_source_mode(mut self, mode: SourceTrajectory) -> Self {
        self.source_mode = mode;
        self
    }

    pub fn with_progress(mut self, sink: impl FnMut(&ProgressEvent) + 'a) -> Self {
        self.progress = Box::new(sink);
        self
    }

    pub fn source_mode(&self) -> SourceTrajectory {
        self.source_mode
    }

    fn emit(&mut self, phase: Phase, step: usize, total: usize) {
        (self.progress)(&ProgressEvent { phase, step, total });
    }

    /// Walks the clean source up the ladder. The noise at each rung is predicted
    /// from the current latent at the destination timestep, conditioned on the
    /// first frame and the null prompt.
    pub fn invert_video(&mut self, source: &VideoLatent, first_frame: &Tensor) -> Result<InversionResult> {
        let sched = self.schedule;
        let steps = sched.steps();
        let cond = self.model.conditioning(first_frame.clone(), "");
        let mut ladder = Vec::with_capacity(steps + 1);
        ladder.push(source.clone());
        for k in 0..steps {
            let (t, t_next) = (sched.ladder_timestep(k), sched.ladder_timestep(k + 1));
            let z = &ladder[k];
            let eps = self.model.forward(z, &cond, t_next, &mut NoHooks)?;
            let next = ddim_invert_step(z, &eps, t, t_next, sched)?;
            if !next.is_finite() {
                return Err(Error::Divergence { step: k });
            }
            ladder.push(next);
            self.emit(Phase::Invert, k + 1, steps);
        }
        InversionResult::new(ladder)
    }

    fn check_ladder(&self, inv: &InversionResult) -> Result<()> {
        if inv.steps() != self.schedule.steps() {
            return Err(Error::Pipeline(format!(
                "ladder has {} steps, schedule has {}",
                inv.steps(),
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    fn check_plan(&self, plan: &InjectionPlan) -> Result<()> {
        plan.validate(self.model.config().decoder_layer_count)?;
        if plan.steps != self.schedule.steps() {
            return Err(Error::Plan(format!(
                "plan is written for T = {}, schedule has T = {}",
                plan.steps,
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    /// Denoises the source from the ladder top with the null prompt, recording
    /// planned features into `record_into` when given.
    pub fn reconstruct(
        &mut self,
        inv: &InversionResult,
        record_into: Option<&mut FeatureCache>,
    ) -> Result<Reconstruction> {
        match record_into {
            Some(cache) => {
                if !cache.is_empty() {
                    return Err(CacheError::AlreadyPopulated.into());
                }
                self.check_plan(cache.plan())?;
                self.reconstruct_with(inv, &mut RecordHooks { cache, step: 0 })
            }
            None => self.reconstruct_with(inv, &mut NoHooks),
        }
    }

    /// Source-branch denoising with arbitrary step-aware hooks.
    pub fn reconstruct_with(&mut self, inv: &InversionResult, hooks: &mut dyn StepHooks) -> Result<Reconstruction> {
        self.check_ladder(inv)?;
        let sched = self.schedule;
        let steps = sched.steps();
        let cond = self.model.conditioning(inv.first_frame(), "");
        let mut z = inv.top().clone();
        let mut trajectory = Vec::with_capacity(steps);
        for s in 0..steps {
            let (t, t_prev) = sched.denoise_timesteps(s);
            let input = match self.source_mode {
                SourceTrajectory::SelfDenoised => &z,
                SourceTrajectory::LadderRestart => inv.rung(steps - s),
            };
            hooks.begin_step(s);
            let eps = self.model.forward(input, &cond, t, hooks)?;
            let next = ddim_denoise_step(input, &eps, t, t_prev, sched)?;
            if !next.is_finite() {
                return Err(Error::Divergence { step: s });
            }
            z = next;
            trajectory.push(z.clone());
            self.emit(Phase::Reconstruct, s + 1, steps);
        }
        Ok(Reconstruction { latent: z, trajectory })
    }

    fn check_request(&self, req: &EditRequest, inv: &InversionResult, cache: &FeatureCache) -> Result<()> {
        self.check_ladder(inv)?;
        self.check_plan(&req.plan)?;
        if cache.plan() != &req.plan {
            return Err(CacheError::PlanMismatch.into());
        }
        if inv.source().dims() != req.source_latents.dims() {
            return Err(Error::Pipeline(format!(
                "ladder dims {:?} differ from the source latents {:?}",
                inv.source().dims(),
                req.source_latents.dims()
            )));
        }
        let frame_dims = &req.source_latents.dims()[1..];
        if req.edited_first_frame_latent.dims() != frame_dims {
            return Err(Error::Conditioning(format!(
                "edited first frame dims {:?} differ from source frame dims {frame_dims:?}",
                req.edited_first_frame_latent.dims()
            )));
        }
        if !(req.guidance_scale >= 1.0 && req.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_scale must be >= 1, got {}",
                req.guidance_scale
            )));
        }
        if !(req.t_prime_fraction > 0.0 && req.t_prime_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "t_prime_fraction must be in (0, 1], got {}",
                req.t_prime_fraction
            )));
        }
        Ok(())
    }

    /// Samples the edited video from the inverted latents, replacing planned
    /// features in both guidance branches with the cached source features.
    pub fn edit(&mut self, req: &EditRequest, inv: &InversionResult, cache: &FeatureCache) -> Result<EditOutput> {
        self.check_request(req, inv, cache)?;
        let sched = self.schedule;
        let steps = sched.steps();
        let start = req.start_step(steps);
        let cond_pos = self
            .model
            .conditioning(req.edited_first_frame_latent.clone(), &req.target_prompt);
        let cond_neg = self
            .model
            .conditioning(req.edited_first_frame_latent.clone(), &req.negative_prompt);
        let mut probe = InjectionProbe::default();
        let mut z = inv.rung(steps - start).clone();
        let mut trajectory = Vec::with_capacity(steps - start);
        for s in start..steps {
            let (t, t_prev) = sched.denoise_timesteps(s);
            let predict = |cond, branch, probe: &mut InjectionProbe| -> Result<VideoLatent> {
                let mut hooks = InjectHooks {
                    cache,
                    step: s,
                    branch,
                    probe,
                };
                self.model.forward(&z, cond, t, &mut hooks as &mut dyn FeatureHooks)
            };
            let eps_cond = predict(&cond_pos, CfgBranch::Conditional, &mut probe)?;
            let eps_neg = predict(&cond_neg, CfgBranch::Negative, &mut probe)?;
            let eps = cfg_combine(&eps_cond, &eps_neg, req.guidance_scale)?;
            let next = ddim_denoise_step(&z, &eps, t, t_prev, sched)?;
            if !next.is_finite() {
                return Err(Error::Divergence { step: s });
            }
            z = next;
            trajectory.push(z.clone());
            self.emit(Phase::Edit, s + 1 - start, steps - start);
        }
        Ok(EditOutput {
            latent: z,
            trajectory,
            start_step: start,
            probe,
        })
    }

    /// Invert, reconstruct with recording, then edit.
    pub fn run(&mut self, req: &EditRequest) -> Result<EditRun> {
        let inversion = self.invert_video(&req.source_latents, &req.source_latents.frame(0))?;
        let mut cache = FeatureCache::new(req.plan.clone());
        let source = self.reconstruct(&inversion, Some(&mut cache))?;
        let edit = self.edit(req, &inversion, &cache)?;
        Ok(EditRun {
            inversion,
            source,
            cache,
            edit,
        })
    }
}

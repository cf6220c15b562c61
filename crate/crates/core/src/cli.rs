//! Command-line front end.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 3 for
//! runtime or numeric failures.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::VisualizeHooks;
use crate::injection::FeatureCache;
use crate::media::{read_frame, read_frames, write_frames};
use crate::metrics::{pair_similarities, PatchEmbedder};
use crate::pipeline::{EditRequest, InversionResult, Pipeline, ProgressEvent};
use crate::unet::UNet;
use crate::VideoLatent;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "i2v-edit",
    version,
    about = "Tuning-free video editing by first-frame propagation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert a frame directory into a latent ladder.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Denoise a ladder back into frames.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ladder: Option<PathBuf>,
    },
    /// Edit a video given its edited first frame.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        edited_first_frame: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Write per-layer feature and attention maps for a ladder.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ladder: Option<PathBuf>,
    },
    /// Print the consecutive-frame consistency of a frame directory.
    Metrics {
        #[arg(long)]
        frames: PathBuf,
        /// Also write per-pair similarities as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Flag value if given, otherwise the config path; errors name the key.
fn resolve_path(flag: Option<PathBuf>, configured: &mut String, key: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        *configured = p.to_string_lossy().into_owned();
    }
    if configured.is_empty() {
        return Err(Error::Config(format!(
            "{key}: required (flag --{} or config key)",
            key.replace('_', "-")
        )));
    }
    Ok(PathBuf::from(configured.as_str()))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("resolved.cfg");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

struct Setup {
    cfg: RunConfig,
    model: UNet,
    schedule: crate::scheduler::NoiseSchedule,
}

fn setup(cfg: RunConfig) -> Result<Setup> {
    let model = UNet::new(cfg.unet_config())?;
    let schedule = cfg.schedule()?;
    cfg.plan().validate(cfg.decoder_layers)?;
    Ok(Setup { cfg, model, schedule })
}

fn encode_source(cfg: &RunConfig, dir: &Path) -> Result<VideoLatent> {
    let fs = read_frames(dir)?;
    if fs.len() < 2 {
        return Err(Error::Config(format!(
            "frames: {} holds {} frame, need at least 2",
            dir.display(),
            fs.len()
        )));
    }
    cfg.codec()?.encode_video(&fs)
}

fn progress_printer(log: &mut Vec<String>) -> impl FnMut(&ProgressEvent) + '_ {
    move |e| {
        let line = e.to_string();
        eprintln!("{line}");
        log.push(line);
    }
}

fn write_latent_frames(cfg: &RunConfig, dir: &Path, z: &VideoLatent) -> Result<()> {
    let fs = cfg.codec()?.decode_video(z)?;
    write_frames(dir, &fs.clamped())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Invert { common, frames } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let frames = resolve_path(frames, &mut cfg.frames, "frames")?;
            let s = setup(cfg)?;
            let source = encode_source(&s.cfg, &frames)?;
            prepare_out(&common.out, &s.cfg)?;
            let mut log = Vec::new();
            let inv = Pipeline::new(&s.model, &s.schedule)
                .with_progress(progress_printer(&mut log))
                .invert_video(&source, &source.frame(0))?;
            inv.save(&common.out)?;
            log::info!("wrote {} ladder rungs to {}", inv.ladder().len(), common.out.display());
            Ok(())
        }
        Command::Reconstruct { common, ladder } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let ladder = resolve_path(ladder, &mut cfg.ladder, "ladder")?;
            let s = setup(cfg)?;
            let inv = InversionResult::load(&ladder)?;
            prepare_out(&common.out, &s.cfg)?;
            let mut log = Vec::new();
            let mut pipe = Pipeline::new(&s.model, &s.schedule)
                .with_source_mode(s.cfg.source_trajectory)
                .with_progress(progress_printer(&mut log));
            let rec = if s.cfg.dump_cache {
                let mut cache = FeatureCache::new(s.cfg.plan());
                let rec = pipe.reconstruct(&inv, Some(&mut cache))?;
                cache.dump(&common.out.join("cache"))?;
                rec
            } else {
                pipe.reconstruct(&inv, None)?
            };
            write_latent_frames(&s.cfg, &common.out.join("frames"), &rec.latent)
        }
        Command::Edit {
            common,
            frames,
            edited_first_frame,
            prompt,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let frames = resolve_path(frames, &mut cfg.frames, "frames")?;
            let edited = resolve_path(edited_first_frame, &mut cfg.edited_first_frame, "edited_first_frame")?;
            if let Some(p) = prompt {
                cfg.prompt = p;
            }
            let s = setup(cfg)?;
            let source = encode_source(&s.cfg, &frames)?;
            let edited_latent = s.cfg.codec()?.encode_frame(&read_frame(&edited)?)?;
            let req = EditRequest {
                source_latents: source,
                edited_first_frame_latent: edited_latent,
                target_prompt: s.cfg.prompt.clone(),
                negative_prompt: s.cfg.negative_prompt.clone(),
                guidance_scale: s.cfg.guidance_scale,
                t_prime_fraction: s.cfg.t_prime_fraction,
                plan: s.cfg.plan(),
            };
            prepare_out(&common.out, &s.cfg)?;
            let mut log = Vec::new();
            let run = Pipeline::new(&s.model, &s.schedule)
                .with_source_mode(s.cfg.source_trajectory)
                .with_progress(progress_printer(&mut log))
                .run(&req)?;
            if !run.edit.probe.mismatches.is_empty() {
                return Err(Error::Pipeline(format!(
                    "{} injected sites differ from the cache",
                    run.edit.probe.mismatches.len()
                )));
            }
            let path = common.out.join("progress.log");
            let mut text = log.join("\n");
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            write_latent_frames(&s.cfg, &common.out.join("frames"), &run.edit.latent)
        }
        Command::Features { common, ladder } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let ladder = resolve_path(ladder, &mut cfg.ladder, "ladder")?;
            let s = setup(cfg)?;
            if let Some(&bad) = s.cfg.feature_steps.iter().find(|&&k| k >= s.cfg.steps) {
                return Err(Error::Config(format!(
                    "feature_steps: step {bad} is beyond T = {}",
                    s.cfg.steps
                )));
            }
            let inv = InversionResult::load(&ladder)?;
            prepare_out(&common.out, &s.cfg)?;
            let steps =
                (!s.cfg.feature_steps.is_empty()).then(|| s.cfg.feature_steps.iter().copied().collect::<BTreeSet<_>>());
            let mut hooks = VisualizeHooks::new(&s.cfg.plan(), s.cfg.heads, steps);
            let mut log = Vec::new();
            Pipeline::new(&s.model, &s.schedule)
                .with_source_mode(s.cfg.source_trajectory)
                .with_progress(progress_printer(&mut log))
                .reconstruct_with(&inv, &mut hooks)?;
            hooks.write(&common.out, s.cfg.feature_pixmaps)
        }
        Command::Metrics { frames, csv } => {
            let fs = read_frames(&frames)?;
            let sims = pair_similarities(&fs, &PatchEmbedder::default())?;
            let score = sims.iter().sum::<f64>() / sims.len() as f64;
            if let Some(path) = csv {
                let mut text = String::from("pair,similarity\n");
                for (i, s) in sims.iter().enumerate() {
                    text.push_str(&format!("{i},{s}\n"));
                }
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            let mut out = std::io::stdout().lock();
            writeln!(out, "{score:?}").map_err(|e| Error::io("<stdout>", e))
        }
    }
}

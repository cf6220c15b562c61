//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! its own PASS/FAIL line; the process fails if any check fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use i2v_core::injection::{CfgBranch, FeatureKind, InjectionPlan};
use i2v_core::media::{
    decode_ppm, decode_tensor, encode_ppm, encode_tensor, read_frames, write_frames, FrameSequence, PatchCodec,
};
use i2v_core::metrics::{frame_consistency, Embedder, PatchEmbedder};
use i2v_core::pipeline::{EditRequest, Pipeline};
use i2v_core::scheduler::{ddim_denoise_step, ddim_invert_step, NoiseSchedule};
use i2v_core::unet::{UNet, UNetConfig};
use i2v_core::{Result, Tensor, VideoLatent};

type Outcome = std::result::Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn gaussian(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

fn toy_latent(seed: u64, frames: usize, channels: usize, side: usize) -> VideoLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoLatent::new(gaussian(&mut rng, &[frames, channels, side, side], 1.0)).unwrap()
}

fn default_schedule(steps: usize) -> NoiseSchedule {
    NoiseSchedule::new(1000, 0.00085, 0.012, steps).unwrap()
}

/// The first frame with a fixed seeded perturbation added.
fn perturbed_first_frame(z: &VideoLatent, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let f = z.frame(0);
    let noise = gaussian(&mut rng, f.dims(), scale);
    f.add(&noise).unwrap()
}

fn within(limit: Duration, started: Instant) -> std::result::Result<Duration, String> {
    let took = started.elapsed();
    if took < limit {
        Ok(took)
    } else {
        Err(format!("took {took:.1?}, limit {limit:?}"))
    }
}

fn inverse_identity() -> Outcome {
    let started = Instant::now();
    let sched = default_schedule(50);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z = VideoLatent::new(gaussian(&mut rng, &[2, 4, 4, 4], 1.0)).unwrap();
        let eps = VideoLatent::new(gaussian(&mut rng, &[2, 4, 4, 4], 1.0)).unwrap();
        let k = rng.random_range(0..sched.steps());
        let (t, t_next) = (sched.ladder_timestep(k), sched.ladder_timestep(k + 1));
        let up = ddim_invert_step(&z, &eps, t, t_next, &sched).map_err(|e| e.to_string())?;
        let back = ddim_denoise_step(&up, &eps, t_next, t, &sched).map_err(|e| e.to_string())?;
        worst = worst.max(back.relative_error(&z).map_err(|e| e.to_string())?);
    }
    let took = within(Duration::from_secs(5), started)?;
    if worst < 1e-10 {
        Ok(format!(
            "worst relative error {worst:.2e} over 1000 triples ({took:.2?})"
        ))
    } else {
        Err(format!("worst relative error {worst:.2e} >= 1e-10"))
    }
}

fn round_trip_error(model: &UNet, source: &VideoLatent, steps: usize) -> Result<f64> {
    let sched = default_schedule(steps);
    let mut pipe = Pipeline::new(model, &sched);
    let inv = pipe.invert_video(source, &source.frame(0))?;
    let rec = pipe.reconstruct(&inv, None)?;
    rec.latent.relative_error(source)
}

fn reconstruction_improves() -> Outcome {
    let started = Instant::now();
    let model = UNet::new(UNetConfig::default()).unwrap();
    let source = toy_latent(7, 8, 16, 8);
    let coarse = round_trip_error(&model, &source, 20).map_err(|e| e.to_string())?;
    let fine = round_trip_error(&model, &source, 100).map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(120), started)?;
    if coarse.is_finite() && fine.is_finite() && fine < coarse {
        Ok(format!(
            "relative error T=20 {coarse:.4e}, T=100 {fine:.4e} ({took:.1?})"
        ))
    } else {
        Err(format!("relative error T=20 {coarse:.4e}, T=100 {fine:.4e}"))
    }
}

fn identity_edit() -> Outcome {
    let started = Instant::now();
    let model = UNet::new(UNetConfig::default()).unwrap();
    let sched = default_schedule(50);
    let mut notes = Vec::new();
    for seed in [11, 12, 13] {
        let source = toy_latent(seed, 8, 16, 8);
        let req = EditRequest::identity(source, InjectionPlan::default());
        let run = Pipeline::new(&model, &sched).run(&req).map_err(|e| e.to_string())?;
        if !run.edit.latent.bitwise_eq(&run.source.latent) {
            let d = run.edit.latent.distance(&run.source.latent).unwrap();
            return Err(format!("seed {seed}: edit differs from reconstruction by {d:e}"));
        }
        notes.push(seed.to_string());
    }
    let took = within(Duration::from_secs(180), started)?;
    Ok(format!("bit-identical on seeds {} ({took:.1?})", notes.join(", ")))
}

fn injection_equality() -> Outcome {
    let started = Instant::now();
    let model = UNet::new(UNetConfig::default()).unwrap();
    let sched = default_schedule(50);
    let source = toy_latent(21, 8, 16, 8);
    let mut req = EditRequest::new(
        source.clone(),
        perturbed_first_frame(&source, 21, 0.5),
        "a red car on a road",
    );
    req.plan = InjectionPlan::default();
    let run = Pipeline::new(&model, &sched).run(&req).map_err(|e| e.to_string())?;
    let probe = &run.edit.probe;
    let expected = req.plan.expected_entries();
    // 1·10 conv + 2·8·10 spatial + 2·8·25 temporal sites per branch
    let closed_form = 10 + 2 * 8 * 10 + 2 * 8 * 25;
    let took = within(Duration::from_secs(180), started)?;
    let (c, n) = (
        probe.checked(CfgBranch::Conditional),
        probe.checked(CfgBranch::Negative),
    );
    if !probe.mismatches.is_empty() {
        return Err(format!("{} sites differ from the cache", probe.mismatches.len()));
    }
    if expected != closed_form || c != closed_form || n != closed_form || run.cache.len() != closed_form {
        return Err(format!(
            "site counts: conditional {c}, negative {n}, cache {}, plan {expected}, closed form {closed_form}",
            run.cache.len()
        ));
    }
    let changed = closed_form - probe.locally_equal(CfgBranch::Conditional);
    Ok(format!(
        "{} sites equal in both branches ({changed} conditional sites actually replaced) ({took:.1?})",
        c + n
    ))
}

fn ablation_direction() -> Outcome {
    let started = Instant::now();
    let model = UNet::new(UNetConfig::default()).unwrap();
    let sched = default_schedule(50);
    let first_step = |run: &i2v_core::pipeline::EditRun| {
        run.edit.trajectory[0]
            .distance(&run.source.trajectory[run.edit.start_step])
            .unwrap()
    };
    let mut notes = Vec::new();
    let mut all_closer = true;
    for seed in [31, 32, 33] {
        let source = toy_latent(seed, 8, 16, 8);
        let mut req = EditRequest::new(
            source.clone(),
            perturbed_first_frame(&source, seed, 0.5),
            "a red car on a road",
        );
        let with = Pipeline::new(&model, &sched).run(&req).map_err(|e| e.to_string())?;
        let d_on = with.edit.trajectory_distance(&with.source).map_err(|e| e.to_string())?;
        req.plan = req.plan.disabled();
        let without = Pipeline::new(&model, &sched).run(&req).map_err(|e| e.to_string())?;
        let d_off = without
            .edit
            .trajectory_distance(&without.source)
            .map_err(|e| e.to_string())?;
        all_closer &= d_on < d_off;
        notes.push(format!(
            "seed {seed} {d_on:.1} vs {d_off:.1} (first step {:.2} vs {:.2})",
            first_step(&with),
            first_step(&without)
        ));
    }
    let line = format!("summed distance injected vs off: {}", notes.join("; "));
    let took = within(Duration::from_secs(300), started)?;
    if all_closer {
        Ok(format!("{line} ({took:.1?})"))
    } else {
        Err(line)
    }
}

/// A drifting colour pattern, `frames` long, 16×16 pixels.
fn moving_pattern(frames: usize) -> FrameSequence {
    let (h, w) = (16, 16);
    let tau = std::f64::consts::TAU;
    FrameSequence::new(
        (0..frames)
            .map(|i| {
                Tensor::from_fn(&[3, h, w], |idx| {
                    let (c, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
                    let phase = tau * (x as f64 + 0.25 * i as f64) / w as f64 + c as f64;
                    0.5 + 0.3 * phase.sin() + 0.1 * (tau * y as f64 / h as f64).cos()
                })
            })
            .collect(),
    )
    .unwrap()
}

fn long_video() -> Outcome {
    let started = Instant::now();
    let codec = PatchCodec::new(2, 3).unwrap();
    let cfg = UNetConfig {
        latent_channels: codec.latent_channels(),
        frames_nominal: 16,
        ..UNetConfig::default()
    };
    let model = UNet::new(cfg).unwrap();
    let sched = default_schedule(25);
    let plan = InjectionPlan::with_steps(25);
    let embedder = PatchEmbedder::default();
    let mut scores = BTreeMap::new();
    for n in [16, 32] {
        let video = codec.encode_video(&moving_pattern(n)).map_err(|e| e.to_string())?;
        let edited = video.frame(0).map(|v| v * 0.8 + 0.05);
        let mut req = EditRequest::new(video, edited, "a painting");
        req.plan = plan.clone();
        let run = Pipeline::new(&model, &sched).run(&req).map_err(|e| e.to_string())?;
        let out = run.edit.latent;
        if out.frames() != n || !out.is_finite() {
            return Err(format!(
                "{n}-frame input gave {} frames, finite = {}",
                out.frames(),
                out.is_finite()
            ));
        }
        let frames = codec.decode_video(&out).map_err(|e| e.to_string())?;
        scores.insert(n, frame_consistency(&frames, &embedder).map_err(|e| e.to_string())?);
    }
    let took = within(Duration::from_secs(300), started)?;
    let gap = (scores[&32] - scores[&16]).abs();
    let line = format!(
        "consistency 16 frames {:.6}, 32 frames {:.6}, gap {gap:.2e}",
        scores[&16], scores[&32]
    );
    if gap <= 0.05 {
        Ok(format!("{line} ({took:.1?})"))
    } else {
        Err(line)
    }
}

fn threshold_tables() -> Outcome {
    // round(τ · 50) for τ = 0, 0.2, 0.5, 1
    let windows = [(0.0, 0usize), (0.2, 10), (0.5, 25), (1.0, 50)];
    let mut checked = 0;
    for (tau, window) in windows {
        let plan = InjectionPlan {
            tau_conv: tau,
            tau_sa: tau,
            tau_ta: tau,
            ..InjectionPlan::default()
        };
        for kind in FeatureKind::ALL {
            for layer in 0..12 {
                let in_set = plan.layers(kind).contains(&layer);
                for step in 0..50 {
                    let want = in_set && step < window;
                    if plan.should_inject(kind, layer, step) != want {
                        return Err(format!(
                            "tau {tau}, {kind}, layer {layer}, step {step}: expected {want}"
                        ));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} (tau, kind, layer, step) cells match"))
}

struct Fixture(Vec<Vec<f64>>);

impl Embedder for Fixture {
    fn embed(&self, frame: &Tensor) -> Result<Vec<f64>> {
        Ok(self.0[frame.data()[0] as usize].clone())
    }
}

fn metric_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 4, 9] {
        let frame = Tensor::from_fn(&[3, 8, 8], |_| rng.random::<f64>());
        let fs = FrameSequence::new(vec![frame; n]).unwrap();
        let s = frame_consistency(&fs, &PatchEmbedder::default()).map_err(|e| e.to_string())?;
        if s != 1.0 {
            return Err(format!("constant {n}-frame video scored {s}"));
        }
    }
    let half = 0.5f64.sqrt();
    // (embeddings, mean of the two consecutive cosines)
    let fixtures: [(Vec<Vec<f64>>, f64); 3] = [
        (
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.5, 0.75f64.sqrt()]],
            (1.0 + 0.5) / 2.0,
        ),
        (
            vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 3.0]],
            (half + half) / 2.0,
        ),
        (
            vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
            (-1.0 + 0.0) / 2.0,
        ),
    ];
    let frames = FrameSequence::new((0..3).map(|i| Tensor::full(&[3, 4, 4], i as f64)).collect()).unwrap();
    for (emb, want) in fixtures {
        let got = frame_consistency(&frames, &Fixture(emb)).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("fixture expected {want}, got {got}"));
        }
    }
    Ok("constant videos score 1.0; three fixtures match hand means".into())
}

fn format_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let rank = rng.random_range(1..5);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
        let n: usize = dims.iter().product();
        let mut data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.random::<u64>())).collect();
        for v in data.iter_mut() {
            if !v.is_finite() {
                *v = -0.0;
            }
        }
        data[0] = f64::MIN_POSITIVE / 8.0;
        let t = Tensor::new(dims, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).map_err(|e| e.to_string())?;
        if !back.bitwise_eq(&t) {
            return Err("tensor file round trip changed bits".into());
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let frames: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_fn(&[3, 5, 7], |_| rng.random::<f64>()))
        .collect();
    let fs = FrameSequence::new(frames).unwrap();
    write_frames(dir.path(), &fs).map_err(|e| e.to_string())?;
    let back = read_frames(dir.path()).map_err(|e| e.to_string())?;
    let worst = back
        .frames()
        .iter()
        .zip(fs.frames())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    if worst > 1.0 / 255.0 {
        return Err(format!("pixmap round trip error {worst}"));
    }
    let quantized = back.frames()[0].clone();
    let requantized = decode_ppm(&encode_ppm(&quantized), Path::new("mem")).map_err(|e| e.to_string())?;
    if !requantized.bitwise_eq(&quantized) {
        return Err("8-bit frame did not survive a second round trip".into());
    }

    let mut golden = Vec::new();
    golden.extend_from_slice(b"AV2V");
    golden.extend_from_slice(&[1, 0, 0, 0]); // version
    golden.extend_from_slice(&[2, 0, 0, 0]); // rank
    golden.extend_from_slice(&[2, 0, 0, 0, 2, 0, 0, 0]); // dims
    golden.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]); // 1.0
    golden.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0x00, 0x40]); // 2.0
    golden.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0x08, 0x40]); // 3.0
    golden.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0x10, 0x40]); // 4.0
    let t = decode_tensor(&golden).map_err(|e| e.to_string())?;
    if t.dims() != [2, 2] || t.data() != [1.0, 2.0, 3.0, 4.0] {
        return Err(format!("golden file parsed to {:?} {:?}", t.dims(), t.data()));
    }
    Ok(format!(
        "tensor files bit-exact, pixmaps within {worst:.2e}, {}-byte golden file parses to [1, 2, 3, 4]",
        golden.len()
    ))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let frames_dir = work.path().join("source");
    write_frames(&frames_dir, &moving_pattern(6)).map_err(|e| e.to_string())?;
    let edited = moving_pattern(1).frames()[0].map(|v| 1.0 - v);
    let edited_path = work.path().join("edited.ppm");
    std::fs::write(&edited_path, encode_ppm(&edited)).map_err(|e| e.to_string())?;
    let cfg_path = work.path().join("run.cfg");
    std::fs::write(&cfg_path, "patch = 2\nsteps = 10\nguidance_scale = 5\n").map_err(|e| e.to_string())?;

    let bin = env!("CARGO_BIN_EXE_i2v-edit");
    let invoke = |config: &Path, out: &Path| -> std::result::Result<(), String> {
        let status = Command::new(bin)
            .env("AV2V_THREADS", "0")
            .arg("edit")
            .arg("--config")
            .arg(config)
            .arg("--frames")
            .arg(&frames_dir)
            .arg("--edited-first-frame")
            .arg(&edited_path)
            .arg("--prompt")
            .arg("an inverted palette")
            .arg("--out")
            .arg(out)
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if status.success() {
            Ok(())
        } else {
            Err(format!("edit exited with {status}"))
        }
    };
    let (a, b) = (work.path().join("run_a"), work.path().join("run_b"));
    invoke(&cfg_path, &a)?;
    // the second run is driven by the first run's resolved configuration
    invoke(&a.join("resolved.cfg"), &b)?;
    let (ta, tb) = (tree(&a), tree(&b));
    let took = started.elapsed();
    if ta.is_empty() || ta != tb {
        let differing: Vec<_> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
        return Err(format!("output trees differ: {differing:?}"));
    }
    Ok(format!(
        "{} files byte-identical across two runs ({took:.1?})",
        ta.len()
    ))
}

fn main() {
    let checks: [Check; 10] = [
        ("per-step inverse identity", inverse_identity),
        ("reconstruction improves with steps", reconstruction_improves),
        ("identity edit equals reconstruction", identity_edit),
        ("injected features equal cached features", injection_equality),
        ("injection keeps the edit near the source", ablation_direction),
        ("long video editing", long_video),
        ("threshold boundaries", threshold_tables),
        ("frame consistency sanity", metric_sanity),
        ("file format fidelity", format_fidelity),
        ("end-to-end determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

mod config;
mod trajfile;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use camplan::camflow::{self, Conditions, DenoiserConfig, TrainState};
use camplan::evalclient::{self, EndpointConfig, EvalResult, TemplateKind};
use camplan::geom::{CameraTrajectory, Intrinsics};
use camplan::metrics::{evaluate_set, format_table};
use camplan::nn::Checkpoint;
use camplan::pnp::solve_trajectory;
use camplan::synth::{generate_dataset, read_dataset, write_dataset_with, Provenance, SceneSample};
use camplan::viz::{render_overlay, render_triview};

use config::RunConfig;
use trajfile::{read_trajectories, write_trajectories};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit status 2.
    Usage(String),
    /// Bad or inconsistent input data; exit status 1.
    Data { index: Option<usize>, msg: String },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data {
                index: Some(i),
                msg,
            } => write!(f, "record {i}: {msg}"),
            CliError::Data { index: None, msg } => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

fn data_err(index: usize, e: impl std::fmt::Display) -> anyhow::Error {
    CliError::Data {
        index: Some(index),
        msg: e.to_string(),
    }
    .into()
}

#[derive(Parser)]
#[command(
    name = "camplan",
    version,
    about = "Camera trajectory planning toolkit"
)]
struct Cli {
    /// key = value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct CameraArgs {
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    height: Option<f64>,
    #[arg(long)]
    focal: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the camera denoiser.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Append JSON loss lines here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        shift: Option<f64>,
        /// Anneal the learning rate to zero with a cosine schedule.
        #[arg(long)]
        cosine_decay: bool,
        #[command(flatten)]
        camera: CameraArgs,
    },
    /// Sample camera trajectories for every record of a dataset.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Euler steps.
        #[arg(long)]
        sample_steps: Option<usize>,
        #[arg(long)]
        shift: Option<f64>,
        #[command(flatten)]
        camera: CameraArgs,
    },
    /// Solve cameras from the 2D-3D correspondences of every record.
    Pnp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
    },
    /// Score predicted trajectories against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset holding the true cameras and motions.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
    },
    /// Render tri-view and overlay SVGs for one record.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        /// Draw this trajectory file's camera instead of the dataset's.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[command(flatten)]
        camera: CameraArgs,
    },
    /// Shot-style labels for predicted trajectories.
    Classify {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset providing the motions (and prompts for TCC).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "remote")]
        offline: bool,
        #[arg(long)]
        remote: bool,
        #[arg(long, value_enum, default_value_t = Kind::Style)]
        kind: Kind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Style,
    Tcc,
}

fn intrinsics(cfg: &RunConfig, a: &CameraArgs) -> Result<Intrinsics, CliError> {
    let d = Intrinsics::default();
    let k = Intrinsics::centered(
        cfg.pick(a.width, "width", d.width_px)?,
        cfg.pick(a.height, "height", d.height_px)?,
        cfg.pick(a.focal, "focal", d.focal_px)?,
    );
    k.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(k)
}

fn load_dataset(path: &Path) -> anyhow::Result<Vec<SceneSample>> {
    read_dataset(path).map_err(|e| match e {
        camplan::synth::SynthError::MalformedRecord { line, reason } => CliError::Data {
            index: Some(record_index(path, line)),
            msg: reason,
        }
        .into(),
        other => anyhow::anyhow!("{}: {other}", path.display()),
    })
}

/// Zero-based record index of a 1-based file line, skipping the header and
/// blank lines.
fn record_index(path: &Path, line: usize) -> usize {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    text.lines()
        .take(line.saturating_sub(1))
        .filter(|l| !l.trim().is_empty() && serde_json::from_str::<Provenance>(l).is_err())
        .count()
}

fn seed_of(path: &Path) -> u64 {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| {
            t.lines()
                .next()
                .and_then(|l| serde_json::from_str::<Provenance>(l).ok())
        })
        .map_or(0, |p| p.seed)
}

fn svg_with_header(doc: &str, seed: u64) -> String {
    match doc.split_once('\n') {
        Some((decl, rest)) => format!("{decl}\n<!-- camplan {VERSION} seed={seed} -->\n{rest}"),
        None => doc.to_string(),
    }
}

fn check_pairs(pred: &[CameraTrajectory], data: &[SceneSample]) -> anyhow::Result<()> {
    if pred.len() != data.len() {
        return Err(CliError::Data {
            index: None,
            msg: format!(
                "{} trajectories for {} dataset records",
                pred.len(),
                data.len()
            ),
        }
        .into());
    }
    for (i, (p, s)) in pred.iter().zip(data).enumerate() {
        if p.len() != s.frames() {
            return Err(data_err(
                i,
                format!("{} camera frames, {} motion frames", p.len(), s.frames()),
            ));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.cmd {
        Cmd::Synth {
            count,
            seed,
            frames,
            out,
        } => {
            let count = cfg.pick(count, "count", 64)?;
            let seed = cfg.pick(seed, "seed", 0)?;
            let frames = cfg.pick(frames, "frames", 16)?;
            let samples = generate_dataset(seed, count, frames)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write_dataset_with(
                &samples,
                &out,
                Some(&Provenance::new("camplan-dataset", seed)),
            )?;
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Cmd::Train {
            data,
            out,
            resume,
            log,
            seed,
            steps,
            lr,
            batch,
            d,
            blocks,
            heads,
            factor,
            shift,
            cosine_decay,
            camera,
        } => {
            let k = intrinsics(&cfg, &camera)?;
            let def = DenoiserConfig::default();
            let samples = load_dataset(&data)?;
            let frames = samples.first().map_or(def.frames, |s| s.frames());
            let dc = DenoiserConfig {
                d: cfg.pick(d, "d", def.d)?,
                blocks: cfg.pick(blocks, "blocks", def.blocks)?,
                heads: cfg.pick(heads, "heads", def.heads)?,
                frames,
                factor: cfg.pick(factor, "factor", def.factor)?,
                ffn_mult: cfg.pick(None, "ffn_mult", def.ffn_mult)?,
                lr: cfg.pick(lr, "lr", def.lr)?,
                batch: cfg.pick(batch, "batch", def.batch)?,
                steps: cfg.pick(steps, "steps", def.steps)?,
                seed: cfg.pick(seed, "seed", def.seed)?,
                shift: cfg.pick(shift, "shift", def.shift)?,
                grad_clip: cfg.pick(None, "grad_clip", def.grad_clip)?,
                cosine_decay: cfg.pick(
                    cosine_decay.then_some(true),
                    "cosine_decay",
                    def.cosine_decay,
                )?,
            };
            dc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            for (i, s) in samples.iter().enumerate() {
                if s.frames() != frames {
                    return Err(data_err(
                        i,
                        format!("{} frames, expected {frames}", s.frames()),
                    ));
                }
            }
            let items = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(camflow::TrainItem {
                        cond: Conditions::from_sample(s, &k).map_err(|e| data_err(i, e))?,
                        clean: camflow::normalized_trajectory(&s.camera),
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let state = match resume {
                Some(p) => Some(TrainState::from_checkpoint(&Checkpoint::load(&p)?, &dc)?),
                None => None,
            };
            let mut log_file = match &log {
                Some(p) => Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(p)?,
                ),
                None => None,
            };
            let state = camflow::train_stage2(
                &items,
                &dc,
                state,
                log_file.as_mut().map(|f| f as &mut dyn Write),
            )
            .map_err(|e| match e {
                camflow::FlowError::EmptyDataset => CliError::Data {
                    index: None,
                    msg: e.to_string(),
                }
                .into(),
                other => anyhow::Error::from(other),
            })?;
            state.to_checkpoint().save(&out)?;
            eprintln!("trained to step {} -> {}", state.step, out.display());
        }
        Cmd::Sample {
            ckpt,
            data,
            out,
            seed,
            sample_steps,
            shift,
            camera,
        } => {
            let k = intrinsics(&cfg, &camera)?;
            let ck = Checkpoint::load(&ckpt)?;
            let state = TrainState::from_checkpoint(&ck, &DenoiserConfig::default())?;
            let model = &state.model;
            let seed = cfg.pick(seed, "seed", ck.seed)?;
            let steps = cfg.pick(sample_steps, "sample_steps", 50)?;
            let shift = cfg.pick(shift, "shift", model.cfg.shift)?;
            let samples = load_dataset(&data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut trajs = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                if s.frames() != model.cfg.frames {
                    return Err(data_err(
                        i,
                        format!("{} frames, model expects {}", s.frames(), model.cfg.frames),
                    ));
                }
                let cond = Conditions::from_sample(s, &k).map_err(|e| data_err(i, e))?;
                let t =
                    camflow::sample_batch(model, &[&cond], steps, shift, s.camera.fps, &mut rng)
                        .map_err(|e| data_err(i, e))?;
                trajs.extend(t);
            }
            write_trajectories(&out, &trajs, seed)?;
            eprintln!("sampled {} trajectories -> {}", trajs.len(), out.display());
        }
        Cmd::Pnp { data, out, camera } => {
            let k = intrinsics(&cfg, &camera)?;
            let samples = load_dataset(&data)?;
            let trajs = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    solve_trajectory(s, &k)
                        .map(|o| o.trajectory)
                        .map_err(|e| data_err(i, e))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            write_trajectories(&out, &trajs, seed_of(&data))?;
            eprintln!("solved {} trajectories -> {}", trajs.len(), out.display());
        }
        Cmd::Eval {
            pred,
            truth,
            report,
            camera,
        } => {
            let k = intrinsics(&cfg, &camera)?;
            let preds = read_trajectories(&pred)?;
            let data = load_dataset(&truth)?;
            check_pairs(&preds, &data)?;
            let reports = evaluate_set(
                preds
                    .iter()
                    .zip(&data)
                    .map(|(p, s)| (p, &s.camera, &s.motion)),
                &k,
            )
            .map_err(|(i, e)| data_err(i, e))?;
            let table = format_table(&reports);
            let text = format!("# camplan {VERSION} seed={}\n{table}", seed_of(&truth));
            std::fs::write(&report, &text)?;
            print!("{table}");
        }
        Cmd::Viz {
            data,
            sample,
            out,
            pred,
            frame,
            camera,
        } => {
            let k = intrinsics(&cfg, &camera)?;
            let samples = load_dataset(&data)?;
            let s = samples.get(sample).ok_or_else(|| {
                CliError::Usage(format!(
                    "--sample {sample} out of range ({} records)",
                    samples.len()
                ))
            })?;
            let cam = match &pred {
                Some(p) => {
                    let t = read_trajectories(p)?;
                    t.into_iter()
                        .nth(sample)
                        .ok_or_else(|| data_err(sample, "missing in prediction file"))?
                }
                None => s.camera.clone(),
            };
            let seed = seed_of(&data);
            std::fs::create_dir_all(&out)?;
            let tri = render_triview(&cam, &s.motion).map_err(|e| data_err(sample, e))?;
            std::fs::write(
                out.join(format!("triview_{sample}.svg")),
                svg_with_header(&tri, seed),
            )?;
            let ov = render_overlay(&cam, &s.motion, &k, frame).map_err(|e| match e {
                camplan::viz::VizError::FrameOutOfRange { .. } => {
                    anyhow::Error::from(CliError::Usage(e.to_string()))
                }
                other => data_err(sample, other),
            })?;
            std::fs::write(
                out.join(format!("overlay_{sample}_{frame}.svg")),
                svg_with_header(&ov, seed),
            )?;
        }
        Cmd::Classify {
            pred,
            data,
            offline,
            remote,
            kind,
        } => {
            if !offline && !remote {
                return Err(CliError::Usage("choose --offline or --remote".into()).into());
            }
            let preds = read_trajectories(&pred)?;
            let samples = load_dataset(&data)?;
            check_pairs(&preds, &samples)?;
            if offline {
                if matches!(kind, Kind::Tcc) {
                    return Err(
                        CliError::Usage("text-camera consistency needs --remote".into()).into(),
                    );
                }
                for (i, (p, s)) in preds.iter().zip(&samples).enumerate() {
                    let l = evalclient::evaluate_offline(p, &s.motion);
                    println!("{i}\t{}\t{}\t{}", l.viewpoint, l.distance, l.movement);
                }
            } else {
                let ep = EndpointConfig::from_env().map_err(|e| CliError::Usage(e.to_string()))?;
                let kind = match kind {
                    Kind::Style => TemplateKind::Style,
                    Kind::Tcc => TemplateKind::Tcc,
                };
                let prompts: Vec<_> = preds
                    .iter()
                    .zip(&samples)
                    .map(|(p, s)| evalclient::build_prompt(kind, p, &s.motion, &s.prompt))
                    .collect();
                let results =
                    evalclient::evaluate_batch(&prompts, &ep, evalclient::DEFAULT_IN_FLIGHT);
                for (i, r) in results.into_iter().enumerate() {
                    match r {
                        Ok(EvalResult::Style(l)) => {
                            println!("{i}\t{}\t{}\t{}", l.viewpoint, l.distance, l.movement)
                        }
                        Ok(EvalResult::Tcc(t)) => println!("{i}\t{}\t{}", t.score, t.reason),
                        Err(e) => return Err(data_err(i, e)),
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<CliError>() {
                Some(CliError::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

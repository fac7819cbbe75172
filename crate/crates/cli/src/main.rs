use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use losh::config::RunConfig;
use losh::gradcheck;
use losh::metrics::{MeanIouMode, MetricReport};
use losh::model::ToyParams;
use losh::synth::{self, Difficulty, GenerateConfig};
use losh::train::{self, Ablation};
use losh::{clip_flows, io, VideoClip};

/// Exit code for a failed check (gradient mismatch, divergence).
const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "losh", version, about = "Long-short referring segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "easy")]
        difficulty: Difficulty,
        /// Canvas size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 5)]
        frames: usize,
    },
    /// Print the short form of an expression.
    Shorten { expression: String },
    /// Train the toy model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Evaluate a checkpoint and write a metric report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Average Mean IoU per sample instead of per frame.
        #[arg(long)]
        per_sample: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Test hook: perturb the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Optical flow from one frame of a sample to its neighbours.
    Flow {
        /// Sample directory containing `frames/`.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A usage or configuration problem detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<losh::Error>() {
            return match e {
                losh::Error::InvalidArgument(_) | losh::Error::Config { .. } => EXIT_USAGE,
                losh::Error::Divergence { .. } | losh::Error::StaleCache(_) => EXIT_CHECK,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            difficulty,
            size,
            frames,
        } => gen_data(&out, count, seed, difficulty, &size, frames),
        Command::Shorten { expression } => shorten(&expression),
        Command::Train {
            config,
            data,
            out,
            ablation,
        } => train_cmd(config.as_deref(), data, out, ablation),
        Command::Eval {
            data,
            checkpoint,
            report,
            config,
            oracle,
            per_sample,
        } => eval_cmd(&data, checkpoint.as_deref(), &report, config.as_deref(), oracle, per_sample),
        Command::Gradcheck {
            seed,
            instances,
            corrupt,
        } => gradcheck_cmd(seed, instances, corrupt.as_deref()),
        Command::Flow {
            video,
            frame,
            out,
            config,
        } => flow_cmd(&video, frame, &out, config.as_deref()),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("--size must look like HxW, got `{s}`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("--size must look like HxW, got `{s}`")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(out: &Path, count: usize, seed: u64, difficulty: Difficulty, size: &str, frames: usize) -> Result<u8> {
    let (height, width) = parse_size(size)?;
    let cfg = GenerateConfig {
        count,
        difficulty,
        height,
        width,
        frames,
    };
    cfg.validate()?;
    let samples = synth::generate(seed, &cfg)?;
    synth::write_corpus(out, seed, &samples)?;
    println!("wrote {} {} samples to {}", samples.len(), difficulty, out.display());
    Ok(0)
}

fn shorten(expression: &str) -> Result<u8> {
    if expression.trim().is_empty() {
        return Err(usage("expression is empty"));
    }
    let pair = losh::text::shorten_text(expression)?;
    if pair.fallback {
        eprintln!("warning: no verb boundary found; short expression equals the long one");
    }
    println!("{}", pair.short.text());
    Ok(0)
}

fn train_cmd(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>, ablation: Ablation) -> Result<u8> {
    let mut cfg = load_config(config)?;
    if let Some(d) = data {
        cfg.data = Some(d);
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    let data = cfg.data.clone().ok_or_else(|| usage("missing --data (or `data` in the config)"))?;
    let out = cfg.out_dir.clone().ok_or_else(|| usage("missing --out (or `out_dir` in the config)"))?;

    let corpus = synth::read_corpus(&data).with_context(|| format!("reading corpus {}", data.display()))?;
    let validation = match &cfg.eval_data {
        Some(p) => Some(synth::read_corpus(p).with_context(|| format!("reading corpus {}", p.display()))?),
        None => None,
    };
    let opts = train::TrainOptions {
        ablation,
        ..cfg.train_options()
    };
    let outcome = train::train(&cfg.toy, &corpus, &opts, None, validation.as_deref())?;

    fs::create_dir_all(&out).map_err(|e| losh::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    outcome.params.save(out.join("checkpoint.losh"))?;
    write(&out.join("trace.csv"), &train::trace_csv(&outcome.trace))?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "ablation {ablation}: loss {:.6} -> {:.6} over {} steps; wrote {}",
        outcome.initial_loss,
        outcome.final_loss,
        cfg.toy.steps,
        out.display()
    );
    for (step, miou) in &outcome.validation {
        println!("  step {step}: validation mean_iou {miou:.6}");
    }
    Ok(0)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| losh::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn eval_cmd(
    data: &Path,
    checkpoint: Option<&Path>,
    report: &Path,
    config: Option<&Path>,
    oracle: bool,
    per_sample: bool,
) -> Result<u8> {
    let cfg = load_config(config)?;
    let corpus = synth::read_corpus(data).with_context(|| format!("reading corpus {}", data.display()))?;
    let records = if oracle {
        train::oracle_records(&corpus)?
    } else {
        let Some(ckpt) = checkpoint else {
            bail!(usage("missing --checkpoint"));
        };
        let params = ToyParams::load(ckpt, &cfg.toy)?;
        train::eval_records(&params, &cfg.toy, &corpus)?
    };
    let mode = if per_sample {
        MeanIouMode::PerSample
    } else {
        MeanIouMode::PerFrame
    };
    let metrics = MetricReport::compute(&records, mode)?;
    write(report, &metrics.to_json())?;
    let p: Vec<String> = metrics
        .precision_at
        .iter()
        .map(|(k, v)| format!("P@{k}={v:.4}"))
        .collect();
    println!(
        "{} | overall_iou={:.4} mean_iou={:.4} mAP={:.4} J={:.4} F={:.4}",
        p.join(" "),
        metrics.overall_iou,
        metrics.mean_iou,
        metrics.map,
        metrics.j_mean,
        metrics.f_mean
    );
    Ok(0)
}

fn gradcheck_cmd(seed: u64, instances: usize, corrupt: Option<&str>) -> Result<u8> {
    if instances == 0 {
        return Err(usage("--instances must be >= 1"));
    }
    let report = gradcheck::run(seed, instances, corrupt)?;
    for s in &report.suites {
        println!(
            "{:<10} {} instances, {} entries, worst rel err {:.3e} at {} [{}]",
            s.suite,
            s.instances,
            s.checked,
            s.worst_rel_err,
            s.worst_at,
            if s.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = report.worst();
    println!("worst offender: {} ({}) rel err {:.3e}", worst.worst_at, worst.suite, worst.worst_rel_err);
    Ok(if report.passed() { 0 } else { EXIT_CHECK })
}

fn flow_cmd(video: &Path, frame: usize, out: &Path, config: Option<&Path>) -> Result<u8> {
    let cfg = load_config(config)?;
    let dir = video.join("frames");
    let entries = fs::read_dir(&dir).map_err(|e| losh::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(losh::Error::Format {
            path: dir,
            offset: 0,
            message: "no .ppm frames".into(),
        });
    }
    if frame >= paths.len() {
        return Err(usage(format!("--frame {frame} outside clip of {} frames", paths.len())));
    }
    let frames = paths.iter().map(io::read_frame).collect::<losh::Result<Vec<_>>>()?;
    let clip = VideoClip::new(frames, vec![frame])?;
    let flows = clip_flows(&clip, frame, cfg.flow_radius, &cfg.flow)?;
    fs::create_dir_all(out).map_err(|e| losh::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for (t, f) in &flows {
        let to = frame as isize + t;
        let path = out.join(format!("flow_{frame:04}_{to:04}.lflo"));
        io::write_flow(&path, f)?;
        println!("{} mean magnitude {:.4} px", path.display(), f.mean_magnitude());
    }
    Ok(0)
}

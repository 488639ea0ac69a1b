//! Command-line front end: train, eval, detect, synth, bench.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};
use transrad::detmodel::{load_checkpoint, DetModel};
use transrad::evalmetrics::EvalConfig;
use transrad::postprocess::{format_detections, PostprocessConfig};
use transrad::raddata::{load_frame, load_frames, parse_annotations, read_cube, read_labels, save_frames, synth_frame, write_labels, SceneSpec};
use transrad::train::{deterministic_from_env, detect_frame, evaluate_model, prepare_frames, run_deterministic, train, TrainOutputs};
use transrad::{Error, Frame, Model};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "transrad", version, about = "3D radar object detection on range-azimuth-Doppler cubes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Second round: heavier objectness/classification weights.
        #[arg(long)]
        phase2: bool,
    },
    /// Evaluate a checkpoint on a directory of frames.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write metrics.txt, metrics.kv and detections.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        score_thr: Option<f64>,
    },
    /// Run detection on one frame, given by id (looked up in --data) or by .rad path.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long, default_value = ".")]
        data: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        score_thr: Option<f64>,
    },
    /// Write synthetic frames.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cube shape as R,A,D.
        #[arg(long, default_value = "256,256,64", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 3)]
        targets: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Time single-frame inference.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Range and azimuth size of the benchmark frame.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect::<Result<_, _>>()?;
    match v.as_slice() {
        &[r, a, d] if r > 0 && a > 0 && d > 0 => Ok([r, a, d]),
        _ => Err(format!("expected three positive sizes R,A,D, got `{s}`")),
    }
}

/// Failure classes, each with its own exit code.
enum Failure {
    Config(String),
    Data(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else if matches!(e, Error::Config(_)) {
            Failure::Config(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let run = || match cli.cmd {
        Cmd::Train { config, phase2 } => cmd_train(&config, phase2),
        Cmd::Eval { ckpt, data, out, score_thr } => cmd_eval(&ckpt, &data, out.as_deref(), score_thr),
        Cmd::Detect { ckpt, frame, data, plot, score_thr } => cmd_detect(&ckpt, &frame, &data, plot.as_deref(), score_thr),
        Cmd::Synth { out, frames, seed, shape, targets, noise } => cmd_synth(&out, frames, seed, shape, targets, noise),
        Cmd::Bench { ckpt, iters, warmup, size } => cmd_bench(&ckpt, iters, warmup, size),
    };
    let res = if deterministic_from_env() {
        info!("deterministic mode: single worker thread");
        run_deterministic(run).unwrap_or_else(|e| Err(e.into()))
    } else {
        run()
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("config error", m),
                Failure::Data(m) => ("data error", m),
                Failure::Other(m) => ("error", m),
            };
            eprintln!("{kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn load_model(ckpt: &Path) -> CliResult<Model> {
    Ok(load_checkpoint(ckpt)?)
}

fn class_names(dir: &Path, num_classes: usize) -> Vec<String> {
    read_labels(dir).ok().filter(|n| n.len() == num_classes).unwrap_or_default()
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn cmd_train(config: &Path, phase2: bool) -> CliResult {
    let mut cfg = RunConfig::load(config).map_err(Failure::Config)?;
    cfg.train.phase2 |= phase2;
    cfg.validate().map_err(Failure::Config)?;
    let frames: Vec<Frame> = load_frames(&cfg.data.dir, Some(cfg.model.num_classes))?;
    if frames.is_empty() {
        return Err(Failure::Data(format!("no frames in {}", cfg.data.dir.display())));
    }
    let mut eval = cfg.eval.clone();
    if eval.class_names.is_empty() {
        eval.class_names = class_names(&cfg.data.dir, cfg.model.num_classes);
    }
    let model = DetModel::new(cfg.model.clone())?;
    info!("model has {} parameters", model.num_params());
    let outputs = TrainOutputs { dir: cfg.output.dir.clone() };
    let res = train(&cfg.train, model, &cfg.loss, &cfg.assign, &cfg.postprocess, &eval, &frames, Some(&outputs))?;
    if let Some(report) = &res.final_report {
        write(&outputs.dir.join("metrics.txt"), &report.to_text(&eval))?;
        write(&outputs.dir.join("metrics.kv"), &report.to_key_values(&eval))?;
        print!("{}", report.to_text(&eval));
    }
    let effective = toml::to_string(&cfg).map_err(|e| Failure::Other(e.to_string()))?;
    write(&outputs.dir.join("config.toml"), &effective)?;
    println!("checkpoints: {} and {}", outputs.best().display(), outputs.last().display());
    Ok(())
}

fn post_config(score_thr: Option<f64>) -> CliResult<PostprocessConfig> {
    let mut p = PostprocessConfig::default();
    if let Some(t) = score_thr {
        p.score_thr = t;
    }
    p.validate()?;
    Ok(p)
}

fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>, score_thr: Option<f64>) -> CliResult {
    let post = post_config(score_thr)?;
    let model = load_model(ckpt)?;
    let frames: Vec<Frame> = load_frames(data, Some(model.config.num_classes))?;
    if frames.is_empty() {
        return Err(Failure::Data(format!("no frames in {}", data.display())));
    }
    let frames = prepare_frames(&frames, model.config.doppler_bins())?;
    let refs: Vec<&Frame> = frames.iter().collect();
    let eval = EvalConfig::with_class_names(class_names(data, model.config.num_classes));
    let (report, dets) = evaluate_model(&model, &refs, &post, &eval)?;
    print!("{}", report.to_text(&eval));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?;
        write(&dir.join("metrics.txt"), &report.to_text(&eval))?;
        write(&dir.join("metrics.kv"), &report.to_key_values(&eval))?;
        let dump: String = frames.iter().zip(&dets).map(|(f, d)| format_detections(&f.frame_id, d)).collect();
        write(&dir.join("detections.txt"), &dump)?;
    }
    Ok(())
}

/// A frame given either as a `.rad` path or as an id inside `data`.
fn resolve_frame(frame: &str, data: &Path, num_classes: usize) -> CliResult<Frame> {
    let as_path = Path::new(frame);
    if as_path.extension().is_some_and(|e| e == "rad") || as_path.is_file() {
        let id = as_path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame").to_string();
        let cube = read_cube(as_path, &id)?;
        let ann = as_path.with_extension("ann");
        let annotations = match fs::read_to_string(&ann) {
            Ok(text) => parse_annotations(&text, &id)?,
            Err(_) => Vec::new(),
        };
        let rec = Frame { cube, annotations, frame_id: id };
        rec.validate(Some(num_classes))?;
        Ok(rec)
    } else {
        Ok(load_frame(data, frame, Some(num_classes))?)
    }
}

fn cmd_detect(ckpt: &Path, frame: &str, data: &Path, plot_out: Option<&Path>, score_thr: Option<f64>) -> CliResult {
    let post = post_config(score_thr)?;
    let model = load_model(ckpt)?;
    let rec = resolve_frame(frame, data, model.config.num_classes)?;
    let rec = prepare_frames(std::slice::from_ref(&rec), model.config.doppler_bins())?.remove(0);
    let dets = detect_frame(&model, &rec, &post)?;
    print!("{}", format_detections(&rec.frame_id, &dets));
    if dets.is_empty() {
        warn!("no detections above score {}", post.score_thr);
    }
    if let Some(p) = plot_out {
        plot::plot_frame(&rec.cube, &rec.annotations, &dets, p).map_err(Failure::Other)?;
        info!("plot written to {}", p.display());
    }
    Ok(())
}

fn cmd_synth(out: &Path, n: usize, seed: u64, shape: [usize; 3], targets: usize, noise: f64) -> CliResult {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Failure::Config(format!("noise {noise} outside [0, 1]")));
    }
    let spec = SceneSpec::standard(shape, targets, noise);
    let frames = (0..n)
        .map(|i| {
            let mut f: Frame = synth_frame(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &spec)?;
            f.frame_id = format!("frame_{i:05}");
            Ok(f)
        })
        .collect::<transrad::Result<Vec<_>>>()?;
    save_frames(&frames, out)?;
    write_labels(out, &spec.class_names())?;
    println!("wrote {n} frames to {}", out.display());
    Ok(())
}

fn cmd_bench(ckpt: &Path, iters: usize, warmup: usize, size: usize) -> CliResult {
    if iters == 0 {
        return Err(Failure::Config("iters must be positive".into()));
    }
    let model = load_model(ckpt)?;
    let spec = SceneSpec::standard([size, size, model.config.doppler_bins()], 3, 0.05);
    let frame: Frame = synth_frame(0, &spec)?;
    let post = PostprocessConfig::default();
    for _ in 0..warmup {
        detect_frame(&model, &frame, &post)?;
    }
    let mut ms: Vec<f64> = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        detect_frame(&model, &frame, &post)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let pct = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
    println!("params {}", model.num_params());
    println!("frame {size}x{size}x{}, {iters} runs", model.config.doppler_bins());
    println!("latency ms: mean {mean:.2} median {:.2} p90 {:.2} min {:.2} max {:.2}", pct(0.5), pct(0.9), ms[0], ms[ms.len() - 1]);
    Ok(())
}

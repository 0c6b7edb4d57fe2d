//! Command-line front end. `run` parses arguments and returns the process
//! exit code: 0 on success, 1 for usage, configuration or I/O errors, 2
//! when a verification check fails.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autodiff::Scalar;
use crate::bench::{run_bench, BenchOptions};
use crate::config::RunConfig;
use crate::dataio::dataset::{parse_stats, write_dataset};
use crate::dataio::{faces_to_centroids, frontal_area, gen_synthetic, parse_obj, read_dataset, Flow, SurfaceSample, SynthConfig};
use crate::error::{Error, Result};
use crate::train::{
    evaluate, load_training, prepare_examples, save_training, train, MetricRecord, Precision, TrainState,
};
use crate::unet::Model;
use crate::verify::{format_table, run_verify, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.yaml";

#[derive(Debug, Parser)]
#[command(name = "figconv", version, about = "Surface pressure and drag regression on factorized implicit grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of slanted bluff bodies.
    Gen(GenArgs),
    /// Train a model on the dataset named in the config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Predict drag and per-face pressure for an OBJ mesh.
    Predict(PredictArgs),
    /// Run the numerical self-checks.
    Verify(VerifyArgs),
    /// Time radius search and convolution paths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target triangle edge length (m).
    #[arg(long, default_value_t = 0.08)]
    pub edge_length: f64,
    /// Reuse the normalization of an existing dataset (e.g. the training set).
    #[arg(long)]
    pub stats_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the model and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for the metrics file; printed only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    /// Inlet velocity, required by velocity-conditioned models.
    #[arg(long)]
    pub velocity: Option<f64>,
    /// JSON output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, hide = true)]
    pub perturb_hankel: bool,
    /// JSON report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Small sizes only, for a quick look.
    #[arg(long)]
    pub quick: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::invalid(e.to_string()))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let base = path.parent().unwrap_or(Path::new(""));
    let cfg = RunConfig::load(path)?.resolve_paths(base);
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn require(path: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::config(field, "no dataset directory given"))
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        count: args.count,
        seed: args.seed,
        edge_length: args.edge_length,
        ..SynthConfig::default()
    };
    let stats = match &args.stats_from {
        Some(root) => {
            let p = root.join("stats.txt");
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Some(parse_stats(&text)?.stats)
        }
        None => None,
    };
    let set = gen_synthetic(&cfg, stats)?;
    write_dataset(&args.out, &set)?;
    eprintln!("wrote {} samples to {}", set.samples.len(), args.out.display());
    Ok(())
}

/// Train and write the checkpoint, the per-epoch log and the final
/// metrics to the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    match cfg.train.precision {
        Precision::F32 => train_with::<f32>(&cfg, args.resume.as_deref()),
        Precision::F64 => train_with::<f64>(&cfg, args.resume.as_deref()),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let train_root = require(&cfg.data.train, "data.train")?;
    let train_data = read_dataset(&train_root, None)?;
    let test_data = match &cfg.data.test {
        Some(p) => Some(read_dataset(p, Some(train_data.stats))?),
        None => None,
    };
    let mut model = Model::<T>::new(cfg.model.clone())?;
    let mut state = match resume {
        Some(p) => load_training(p, &mut model)?,
        None => TrainState::new(&model),
    };
    let train_set = prepare_examples(&model, &train_data.samples)?;
    let test_set = match &test_data {
        Some(d) => prepare_examples(&model, &d.samples)?,
        None => Vec::new(),
    };

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_yaml()?)?;
    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let report = train(
        &mut model,
        &mut state,
        &train_set,
        &test_set,
        &cfg.train,
        &mut log,
        &mut |rec, _| {
            eprintln!("epoch {} lr {:.1e} loss {:.6}", rec.epoch, rec.lr, rec.train_loss);
            ControlFlow::Continue(())
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_training(&out.join(CHECKPOINT_FILE), &model, &state)?;
    let mut records = report.final_train.records("train");
    if let Some(m) = &report.final_val {
        records.extend(m.records("test"));
    }
    write_text(&out.join(METRICS_FILE), &to_json(&records)?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config, None)?;
    let records = match cfg.train.precision {
        Precision::F32 => eval_with::<f32>(&cfg, &args.checkpoint)?,
        Precision::F64 => eval_with::<f64>(&cfg, &args.checkpoint)?,
    };
    let text = to_json(&records)?;
    match &args.out {
        Some(dir) => write_text(&dir.join(METRICS_FILE), &text),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn eval_with<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<MetricRecord>> {
    let model = Model::<T>::load(cfg.model.clone(), checkpoint)?;
    let train_root = require(&cfg.data.train, "data.train")?;
    let (root, split) = match &cfg.data.test {
        Some(p) => (p.clone(), "test"),
        None => (train_root.clone(), "train"),
    };
    let stats = read_dataset(&train_root, None)?.stats;
    let data = read_dataset(&root, Some(stats))?;
    let examples = prepare_examples(&model, &data.samples)?;
    Ok(evaluate(&model, &examples)?.records(split))
}

#[derive(Debug, Serialize)]
struct PredictOutput {
    drag: f64,
    num_faces: usize,
    /// Normalized pressure per face.
    pressure: Vec<f64>,
    /// Pressure per face in Pa, when training statistics are available.
    pressure_pa: Option<Vec<f64>>,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let cfg = load_config(&args.config, None)?;
    let text = fs::read_to_string(&args.mesh).map_err(|e| Error::io(&args.mesh, e))?;
    let mesh = parse_obj(&text)?;
    let faces = faces_to_centroids(&mesh)?;
    let (stats, flow) = match &cfg.data.train {
        Some(root) => {
            let p = root.join("stats.txt");
            let file = parse_stats(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
            let flow = Flow {
                direction: file.direction,
                dynamic_pressure: file.dynamic_pressure,
                area: frontal_area(&mesh, file.direction),
            };
            (Some(file.stats), flow)
        }
        None => {
            let q = SynthConfig::default().dynamic_pressure();
            let dir = [1.0, 0.0, 0.0];
            let flow = Flow {
                direction: dir,
                dynamic_pressure: q,
                area: frontal_area(&mesh, dir),
            };
            (None, flow)
        }
    };
    let n = faces.points.len();
    let sample = SurfaceSample {
        points: faces.points,
        normals: faces.normals,
        areas: faces.areas,
        pressure: Vec::new(),
        raw_pressure: Vec::new(),
        drag: f64::NAN,
        velocity: args.velocity,
        flow,
        stats,
    };
    let pred = match cfg.train.precision {
        Precision::F32 => Model::<f32>::load(cfg.model.clone(), &args.checkpoint)?.predict(&sample)?,
        Precision::F64 => Model::<f64>::load(cfg.model.clone(), &args.checkpoint)?.predict(&sample)?,
    };
    let out = PredictOutput {
        drag: pred.drag,
        num_faces: n,
        pressure_pa: stats.map(|s| pred.pressure.iter().map(|&p| s.denormalize(p)).collect()),
        pressure: pred.pressure,
    };
    let text = to_json(&out)?;
    match &args.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

/// Returns whether every check passed.
pub fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        perturb_hankel: args.perturb_hankel,
        instances: args.instances,
        seed: args.seed,
    };
    let checks = run_verify(&opts)?;
    print!("{}", format_table(&checks));
    if let Some(p) = &args.out {
        write_text(p, &to_json(&checks)?)?;
    }
    Ok(checks.iter().all(|c| c.passed))
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut opts = BenchOptions {
        runs: args.runs.max(1),
        seed: args.seed,
        ..BenchOptions::default()
    };
    if args.quick {
        opts.radius_sizes = vec![1_000, 5_000];
        opts.conv_sizes = vec![16, 32];
    }
    let report = run_bench(&opts)?;
    let text = to_json(&report)?;
    match &args.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(a).map(|_| EXIT_OK),
        Command::Predict(a) => cmd_predict(a).map(|_| EXIT_OK),
        Command::Verify(a) => cmd_verify(a).map(|ok| if ok { EXIT_OK } else { EXIT_VERIFY_FAILED }),
        Command::Bench(a) => cmd_bench(a).map(|_| EXIT_OK),
    }
}

pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            EXIT_ERROR
        }
    }
}

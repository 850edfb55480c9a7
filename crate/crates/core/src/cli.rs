//! Command-line front end: `synth`, `train`, `eval`, `infer`, `rerun`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{self, SplitSpec};
use crate::eval::{self, MetricReport};
use crate::tensor::Tensor;
use crate::training::{self, Checkpoint, Direction, Task, TrainConfig, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.mgan";
pub const LOSSES_FILE: &str = "losses.csv";

#[derive(Debug, Parser)]
#[command(name = "maskgan", version, about = "Segmentation masks via adversarial image translation")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset in the images/ + masks/ layout.
    Synth(SynthArgs),
    /// Train a cgan or cyclegan model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on its held-out split and render triptychs.
    Eval(EvalArgs),
    /// Run a generator on one image.
    Infer(InferArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Cgan,
    Cyclegan,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Cgan => Task::Cgan,
            TaskArg::Cyclegan => Task::Cyclegan,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    A2b,
    B2a,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::A2b => Direction::AToB,
            DirectionArg::B2a => Direction::BToA,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// key=value file of default flag values; explicit flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(16..))]
    size: u64,
    #[arg(long, env = "MASKGAN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, env = "MASKGAN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Image channels to load: 1 (grayscale) or 3 (RGB).
    #[arg(long, default_value_t = 1, value_parser = parse_channels)]
    channels: usize,
    #[arg(long, default_value_t = 100.0)]
    lambda_l1: f32,
    #[arg(long, default_value_t = 10.0)]
    lambda_cycle: f32,
    #[arg(long, default_value_t = 2e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0.5)]
    beta1: f32,
    #[arg(long, default_value_t = 0.999)]
    beta2: f32,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    disc_base_channels: usize,
    #[arg(long, default_value_t = 2)]
    disc_layers: usize,
    /// Intermediate checkpoint period in epochs (0 disables).
    #[arg(long, default_value_t = 25)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    threshold: f32,
    #[arg(long, value_enum, default_value = "a2b")]
    direction: DirectionArg,
    /// Refuse checkpoints of a different task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Write the generator's continuous output instead of a binary mask.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    threshold: f32,
    #[arg(long, value_enum, default_value = "a2b")]
    direction: DirectionArg,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct RerunArgs {
    manifest: PathBuf,
}

/// Everything needed to repeat a command, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved argument list (every default materialized).
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), String> {
        let text = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn parse_channels(s: &str) -> Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err(format!("{s} is not 1 or 3")),
    }
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Rerun(a) => cmd_rerun(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Splices `key=value` lines from `--config FILE` in front of the explicit
/// flags of the subcommand, so explicit flags override file values.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let pos = argv.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let arg = argv[pos].to_string_lossy().into_owned();
    let file = match arg.strip_prefix("--config=") {
        Some(f) => PathBuf::from(f),
        None => PathBuf::from(argv.get(pos + 1).ok_or("--config needs a file")?),
    };
    let text = fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
    let mut injected = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", file.display(), lineno + 1))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match value {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{key}")));
                injected.push(OsString::from(value));
            }
        }
    }
    // argv[0] is the program, argv[1] the subcommand.
    let split_at = 2.min(argv.len());
    let mut out = argv[..split_at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[split_at..]);
    Ok(out)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let start = Instant::now();
    let ds = data::synth_shapes(a.n as usize, a.size as usize, a.seed)?;
    ds.save(&a.out)?;
    let manifest = RunManifest {
        command: "synth".into(),
        args: vec![
            "synth".into(),
            "--n".into(),
            a.n.to_string(),
            "--size".into(),
            a.size.to_string(),
            "--seed".into(),
            a.seed.to_string(),
            "--out".into(),
            path_arg(&a.out),
        ],
        config: serde_json::json!({ "n": a.n, "size": a.size, "seed": a.seed }),
        inputs: vec![],
        seed: Some(a.seed),
        artifacts: vec![a.out.join(data::IMAGES_DIR), a.out.join(data::MASKS_DIR)],
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    eprintln!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

/// Resolves train/test counts: explicit values must cover the dataset; a
/// missing one is the remainder; with neither, one eighth (at least one
/// sample) is held out.
fn resolve_split(n: usize, train: Option<usize>, test: Option<usize>) -> Result<(usize, usize), Failure> {
    let (tr, te) = match (train, test) {
        (Some(tr), Some(te)) => (tr, te),
        (Some(tr), None) => (tr, n.saturating_sub(tr)),
        (None, Some(te)) => (n.saturating_sub(te), te),
        (None, None) => {
            let te = (n / 8).max(1);
            (n.saturating_sub(te), te)
        }
    };
    if tr == 0 || te == 0 || tr + te != n {
        return Err(Failure::Runtime(format!(
            "cannot split {n} samples into {tr} train + {te} test"
        )));
    }
    Ok((tr, te))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let start = Instant::now();
    let Some(task) = a.task else {
        let mut cmd = Cli::command();
        let msg = "the following required argument was not provided: --task <TASK> (valid tasks: cgan, cyclegan)";
        let err = cmd.find_subcommand_mut("train").expect("train exists").error(ErrorKind::MissingRequiredArgument, msg);
        return Err(Failure::Usage(err.to_string().trim_start_matches("error: ").trim_end().to_owned()));
    };
    let task = Task::from(task);
    let ds = data::load_paired_with_channels(&a.data, a.image_size, a.channels)?;
    let (n_train, n_test) = resolve_split(ds.len(), a.train_count, a.test_count)?;
    let spec = SplitSpec { n_train, n_test, seed: a.seed };
    let (train_ds, _) = data::split(&ds, spec)?;

    let cfg = TrainConfig {
        task,
        epochs: a.epochs as usize,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        adam_beta1: a.beta1,
        adam_beta2: a.beta2,
        lambda_l1: a.lambda_l1,
        lambda_cycle: a.lambda_cycle,
        seed: a.seed,
        image_size: a.image_size,
        image_channels: a.channels,
        base_channels: a.base_channels,
        depth: a.depth,
        disc_base_channels: a.disc_base_channels,
        disc_layers: a.disc_layers,
        checkpoint_every: a.checkpoint_every,
        split: Some(spec),
        ..TrainConfig::new(task)
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;

    let unpaired;
    let data = match task {
        Task::Cgan => TrainData::Paired(&train_ds),
        Task::Cyclegan => {
            unpaired = data::to_unpaired(&train_ds, a.seed);
            TrainData::Unpaired(&unpaired)
        }
    };
    eprintln!("training {task} on {n_train} samples ({n_test} held out) for {} epochs", cfg.epochs);
    let ckpt = training::train_with_progress(&cfg, data, Some(&a.out), |r| {
        eprintln!(
            "epoch {:>4}  g_loss {:.4}  d_loss {:.4}  g_adv {:.4}",
            r.epoch, r.g_loss, r.d_loss, r.g_adv
        );
    })?;
    let losses = a.out.join(LOSSES_FILE);
    fs::write(&losses, ckpt.history.to_csv()).map_err(|e| format!("{}: {e}", losses.display()))?;
    if let Some(s) = ckpt.history.stability(10) {
        eprintln!(
            "loss std over last {} epochs: g {:.4}, d {:.4}",
            s.window, s.g_loss_std, s.d_loss_std
        );
    }

    let mut artifacts = vec![a.out.join(CHECKPOINT_FILE), losses];
    if cfg.checkpoint_every > 0 {
        artifacts.extend(
            (cfg.checkpoint_every..cfg.epochs)
                .step_by(cfg.checkpoint_every)
                .map(|e| a.out.join(format!("checkpoint_epoch{e:04}.mgan"))),
        );
    }
    let mut args = vec![
        "train".to_owned(),
        "--task".into(),
        task.to_string(),
        "--data".into(),
        path_arg(&a.data),
        "--epochs".into(),
        a.epochs.to_string(),
        "--train-count".into(),
        n_train.to_string(),
        "--test-count".into(),
        n_test.to_string(),
        "--seed".into(),
        a.seed.to_string(),
        "--image-size".into(),
        a.image_size.to_string(),
        "--channels".into(),
        a.channels.to_string(),
        "--lambda-l1".into(),
        a.lambda_l1.to_string(),
        "--lambda-cycle".into(),
        a.lambda_cycle.to_string(),
        "--lr".into(),
        a.lr.to_string(),
        "--beta1".into(),
        a.beta1.to_string(),
        "--beta2".into(),
        a.beta2.to_string(),
        "--batch-size".into(),
        a.batch_size.to_string(),
        "--base-channels".into(),
        a.base_channels.to_string(),
        "--depth".into(),
        a.depth.to_string(),
        "--disc-base-channels".into(),
        a.disc_base_channels.to_string(),
        "--disc-layers".into(),
        a.disc_layers.to_string(),
        "--checkpoint-every".into(),
        a.checkpoint_every.to_string(),
        "--out".into(),
    ];
    args.push(path_arg(&a.out));
    let manifest = RunManifest {
        command: "train".into(),
        args,
        config: serde_json::to_value(&cfg).map_err(|e| e.to_string())?,
        inputs: vec![a.data.clone()],
        seed: Some(a.seed),
        artifacts,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

/// Rebuilds the held-out split recorded in a checkpoint.
fn held_out(ckpt: &Checkpoint, data_dir: &Path) -> Result<data::PairedDataset, Failure> {
    let cfg = &ckpt.config;
    let spec = cfg.split.ok_or_else(|| {
        Failure::Runtime("checkpoint does not record its data split".into())
    })?;
    let ds = data::load_paired_with_channels(data_dir, cfg.image_size, cfg.image_channels)?;
    let (_, test) = data::split(&ds, spec)?;
    Ok(test)
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

#[derive(Debug, Serialize)]
struct ReverseSample {
    name: String,
    l1: f64,
}

#[derive(Debug, Serialize)]
struct ReverseReport {
    samples: Vec<ReverseSample>,
    n_samples: usize,
    mean_l1: f64,
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let start = Instant::now();
    let ckpt = training::load_checkpoint(&a.checkpoint)?;
    let direction = Direction::from(a.direction);
    let gen = ckpt.generator(a.task.map(Task::from), direction)?;
    let test = held_out(&ckpt, &a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;

    let mut artifacts = Vec::new();
    let (text, json) = match direction {
        Direction::AToB => {
            let report: MetricReport = eval::evaluate(gen, &test, a.threshold)?;
            for s in &test.samples {
                let pred = eval::binarize(&gen.generate(&s.image)?, a.threshold).to_tensor();
                let path = a.out.join(format!("triptych_{}.png", stem(&s.name)));
                eval::triptych(&s.image, &s.mask, &pred, &path)?;
                artifacts.push(path);
            }
            (report.to_text(), serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?)
        }
        Direction::BToA => {
            let mut samples = Vec::new();
            for s in &test.samples {
                let fake = gen.generate(&s.mask)?;
                let l1 = fake.data().iter().zip(s.image.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>()
                    / fake.len() as f64;
                let path = a.out.join(format!("triptych_{}.png", stem(&s.name)));
                eval::triptych(&s.mask, &s.image, &fake, &path)?;
                artifacts.push(path);
                samples.push(ReverseSample { name: s.name.clone(), l1 });
            }
            let n = samples.len();
            let mean_l1 = samples.iter().map(|s| s.l1).sum::<f64>() / n as f64;
            let mut text = String::from("name l1\n");
            for s in &samples {
                text.push_str(&format!("{} {}\n", s.name, s.l1));
            }
            text.push_str(&format!("mean {mean_l1}\n"));
            let report = ReverseReport { samples, n_samples: n, mean_l1 };
            (text, serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?)
        }
    };
    let report_txt = a.out.join("report.txt");
    let report_json = a.out.join("report.json");
    fs::write(&report_txt, &text).map_err(|e| format!("{}: {e}", report_txt.display()))?;
    fs::write(&report_json, format!("{json}\n")).map_err(|e| format!("{}: {e}", report_json.display()))?;
    println!("{json}");
    artifacts.extend([report_txt, report_json]);

    let mut args = vec![
        "eval".to_owned(),
        "--checkpoint".into(),
        path_arg(&a.checkpoint),
        "--data".into(),
        path_arg(&a.data),
        "--out".into(),
        path_arg(&a.out),
        "--threshold".into(),
        a.threshold.to_string(),
        "--direction".into(),
        direction.to_string(),
    ];
    if let Some(t) = a.task {
        args.extend(["--task".into(), Task::from(t).to_string()]);
    }
    let manifest = RunManifest {
        command: "eval".into(),
        args,
        config: serde_json::json!({
            "threshold": a.threshold,
            "direction": direction,
            "task": ckpt.task(),
            "split": ckpt.config.split,
        }),
        inputs: vec![a.checkpoint.clone(), a.data.clone()],
        seed: ckpt.config.split.map(|s| s.seed),
        artifacts,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let start = Instant::now();
    let ckpt = training::load_checkpoint(&a.checkpoint)?;
    let direction = Direction::from(a.direction);
    let gen = ckpt.generator(a.task.map(Task::from), direction)?;
    let size = gen.config.image_size;
    let (w, h) = data::image_dimensions(&a.input)?;
    let input = match direction {
        Direction::AToB => data::read_image_channels(&a.input, size, gen.config.in_channels)?,
        Direction::BToA => data::read_mask(&a.input, size)?,
    };
    let out = gen.generate(&input)?;
    let (out, nearest): (Tensor, bool) = if a.raw || direction == Direction::BToA {
        (out, false)
    } else {
        (eval::binarize(&out, a.threshold).to_tensor(), true)
    };
    data::write_image_resized(&out, &a.output, w, h, nearest)?;

    let mut args = vec![
        "infer".to_owned(),
        "--checkpoint".into(),
        path_arg(&a.checkpoint),
        "--input".into(),
        path_arg(&a.input),
        "--output".into(),
        path_arg(&a.output),
        "--threshold".into(),
        a.threshold.to_string(),
        "--direction".into(),
        direction.to_string(),
    ];
    if a.raw {
        args.push("--raw".into());
    }
    if let Some(t) = a.task {
        args.extend(["--task".into(), Task::from(t).to_string()]);
    }
    let mut manifest_path = a.output.clone().into_os_string();
    manifest_path.push(".manifest.json");
    let manifest = RunManifest {
        command: "infer".into(),
        args,
        config: serde_json::json!({ "raw": a.raw, "threshold": a.threshold, "direction": direction }),
        inputs: vec![a.checkpoint.clone(), a.input.clone()],
        seed: None,
        artifacts: vec![a.output.clone()],
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(Path::new(&manifest_path))?;
    Ok(())
}

fn cmd_rerun(a: RerunArgs) -> CmdResult {
    let text = fs::read_to_string(&a.manifest).map_err(|e| format!("{}: {e}", a.manifest.display()))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", a.manifest.display()))?;
    let argv = std::iter::once("maskgan".to_owned()).chain(manifest.args);
    match run(argv) {
        EXIT_OK => Ok(()),
        EXIT_USAGE => Err(Failure::Usage("manifest arguments were rejected".into())),
        _ => Err(Failure::Runtime("re-run failed".into())),
    }
}

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use countpp::checkpoint::{Checkpoint, CheckpointMeta};
use countpp::data::{self, SceneConfig, VideoConfig};
use countpp::metrics::{evaluate, EvalMode, ImagePrediction, ImageTruth};
use countpp::pipelines::{AdaptiveConfig, Bilinear, CountMode, Counter, IterationRecord};
use countpp::prompts::{ClassPrompt, PromptSpec};
use countpp::training;
use countpp::{DirImageStore, ImageTensor};
use countpp_service::ServiceConfig;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "countpp", version, about = "Prompted object counting with negative prompts")]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset of scenes and optional videos.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Count one image.
    Count(CountArgs),
    /// Evaluate a checkpoint (or a predictions file) on a dataset.
    Eval(EvalArgs),
    /// Count unique objects across the frames of a video directory.
    Video(VideoArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    videos: usize,
    /// Scene generator settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Video generator settings as JSON.
    #[arg(long)]
    video_config: Option<PathBuf>,
    /// Built-in corpus; `desk` mixes shape scenes with dense and sparse dot scenes.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration JSON; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    enhancer_blocks: Option<usize>,
    #[arg(long)]
    decoder_blocks: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda_loc: Option<f64>,
    #[arg(long)]
    lambda_giou: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    exemplar_prob: Option<f64>,
    #[arg(long)]
    unprompted_prob: Option<f64>,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PNG to count. Exemplar references name files in the same directory.
    #[arg(long)]
    image: PathBuf,
    /// Positive class text.
    #[arg(long, conflicts_with = "spec")]
    text: Option<String>,
    /// Negative class text; repeatable.
    #[arg(long = "negative-text", conflicts_with = "spec")]
    negative_text: Vec<String>,
    /// Full prompt specification as JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, conflicts_with = "adaptive")]
    iterative: bool,
    #[arg(long)]
    adaptive: bool,
    /// Threshold; defaults to the checkpoint's.
    #[arg(long)]
    sigma: Option<f64>,
    /// Pseudo-exemplars per iteration.
    #[arg(long, default_value_t = countpp::pipelines::DEFAULT_PSEUDO_EXEMPLARS)]
    n: usize,
    #[arg(long, default_value_t = countpp::pipelines::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Iterative,
    Adaptive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Counting,
    Detection,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    ckpt: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Precomputed predictions (JSON list, one per scene and present class).
    #[arg(long, conflicts_with = "ckpt")]
    predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "single")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "detection")]
    eval_mode: EvalModeArg,
    #[arg(long)]
    sigma: Option<f64>,
    /// Report JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VideoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Video directory written by `gen-data`, or a directory of frame PNGs
    /// read in name order.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = countpp::pipelines::DEFAULT_VIDEO_EXEMPLARS)]
    n: usize,
    /// Reuse the first frame's exemplars instead of refreshing them.
    #[arg(long)]
    frozen: bool,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Overrides `COUNTPP_CKPT`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Overrides `COUNTPP_PORT`.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    cache_capacity: Option<usize>,
}

type CliResult<T = ()> = Result<T, String>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => train(a, cli.seed),
        Command::Count(a) => count(a),
        Command::Eval(a) => eval(a),
        Command::Video(a) => video(a),
        Command::Serve(a) => serve(a),
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("invalid JSON in {}: {e}", path.display()))
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> CliResult {
    let json = serde_json::to_string_pretty(value).map_err(err)?;
    match out {
        Some(p) => fs::write(p, json + "\n").map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| format!("cannot load checkpoint {}: {e}", path.display()))
}

fn sigma_or(sigma: Option<f64>, meta: &CheckpointMeta) -> CliResult<f64> {
    let s = sigma.unwrap_or(meta.sigma);
    if s > 0.0 && s < 1.0 {
        Ok(s)
    } else {
        Err(format!("sigma must lie in (0, 1), got {s}"))
    }
}

/// Seed of the `i`-th generated item.
fn item_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

fn gen_data(a: GenDataArgs, seed: u64) -> CliResult {
    let scene_cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    let scenes = match a.preset {
        Some(Preset::Desk) => countpp::desk::corpus(seed.wrapping_mul(1_000_000), a.scenes).map_err(err)?,
        None => (0..a.scenes).map(|i| data::generate_scene(item_seed(seed, i), &scene_cfg)).collect::<Result<Vec<_>, _>>().map_err(err)?,
    };
    data::save_dataset(&a.out, &scenes).map_err(err)?;
    if a.videos > 0 {
        let video_cfg: VideoConfig = match &a.video_config {
            Some(p) => read_json(p)?,
            None => VideoConfig::default(),
        };
        for v in 0..a.videos {
            let video = data::generate_video(item_seed(seed ^ 0x5eed, v), &video_cfg).map_err(err)?;
            data::save_video(&a.out.join("videos").join(format!("video_{v:03}")), &video).map_err(err)?;
        }
    }
    eprintln!("wrote {} scenes and {} videos to {}", a.scenes, a.videos, a.out.display());
    Ok(())
}

fn merged_run_config(a: &TrainArgs, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f.clone() { c.$f = v; } )* };
    }
    over!(d_model, heads, ffn_mult, enhancer_blocks, decoder_blocks, num_queries, sigma, lambda_loc, lambda_giou, lambda_cls, epochs, lr, batch_size, exemplar_prob, unprompted_prob);
    if a.data.is_some() {
        c.data = a.data.clone();
    }
    if a.val.is_some() {
        c.val = a.val.clone();
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs, seed: Option<u64>) -> CliResult {
    let c = merged_run_config(&a, seed)?;
    let data_dir = c.data.as_ref().ok_or("no training data: pass --data or set \"data\" in the config")?;
    let train_set = data::load_dataset(data_dir).map_err(err)?;
    let val_set = match &c.val {
        Some(v) => data::load_dataset(v).map_err(err)?,
        None => vec![],
    };
    let mut vocab: Vec<String> = train_set.iter().flat_map(|s| s.classes()).collect();
    vocab.sort();
    vocab.dedup();
    let tc = c.train_config(vocab);
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut log = fs::File::create(&log_path).map_err(|e| format!("cannot create {}: {e}", log_path.display()))?;
    let outcome = training::train(&tc, &train_set, &val_set, Some(&mut log as &mut dyn Write)).map_err(err)?;
    let meta = CheckpointMeta { sigma: c.sigma, loss: tc.loss.clone(), seed: c.seed, epochs: c.epochs };
    Checkpoint { model: outcome.model, meta }.save(&a.out).map_err(err)?;
    if let Some(last) = outcome.history.last() {
        eprintln!("epoch {}: loss {:.4}, val MAE {:.3}", last.epoch, last.total, last.val_mae);
    }
    if let Some(cal) = outcome.calibration {
        eprintln!("logit bias shifted by {:+.2}: val MAE {:.3} -> {:.3}", cal.shift, cal.val_mae_before, cal.val_mae_after);
    }
    Ok(())
}

#[derive(Serialize)]
struct CountOutput {
    #[serde(flatten)]
    result: countpp::filtering::CountResult,
    sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<IterationRecord>>,
}

fn count(a: CountArgs) -> CliResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let sigma = sigma_or(a.sigma, &ck.meta)?;
    let spec = match (&a.spec, &a.text) {
        (Some(p), _) => read_json::<PromptSpec>(p)?,
        (None, Some(t)) => PromptSpec::new(ClassPrompt::text(t.clone()), a.negative_text.iter().map(|n| ClassPrompt::text(n.clone())).collect()),
        (None, None) => return Err("give --text or --spec".into()),
    };
    let image = ImageTensor::load_png(&a.image).map_err(err)?;
    let id = a.image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
    let root = a.image.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let store = DirImageStore::new(root);
    let counter = Counter::new(&ck.model, &store).with_sigma(sigma);
    let out = if a.iterative {
        let r = counter.iterative_count(&image, &id, &spec, a.n, a.max_iter).map_err(err)?;
        CountOutput { result: r.result, sigma, trace: Some(r.trace) }
    } else if a.adaptive {
        let r = counter.adaptive_count(&image, &id, &spec, &AdaptiveConfig::default(), &Bilinear).map_err(err)?;
        CountOutput { result: r, sigma, trace: None }
    } else {
        CountOutput { result: counter.count_image(&image, &id, &spec).map_err(err)?, sigma, trace: None }
    };
    emit(&out, a.out.as_deref())
}

/// Ground truth in the order predictions files use: scenes in dataset order,
/// and within a scene its present classes in sorted order.
fn scene_truths(scenes: &[data::Scene]) -> Vec<ImageTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.classes().into_iter().map(move |c| {
                let boxes = s.boxes_of(&c);
                ImageTruth { count: boxes.len(), boxes }
            })
        })
        .collect()
}

fn eval(a: EvalArgs) -> CliResult {
    let scenes = data::load_dataset(&a.data).map_err(err)?;
    let eval_mode = match a.eval_mode {
        EvalModeArg::Counting => EvalMode::Counting,
        EvalModeArg::Detection => EvalMode::Detection,
    };
    let report = if let Some(p) = &a.predictions {
        let preds: Vec<ImagePrediction> = read_json(p)?;
        evaluate(&preds, &scene_truths(&scenes), eval_mode, None).map_err(err)?
    } else {
        let ck = load_checkpoint(a.ckpt.as_deref().expect("clap requires --ckpt"))?;
        let sigma = sigma_or(a.sigma, &ck.meta)?;
        let mode = match a.mode {
            ModeArg::Single => CountMode::Single,
            ModeArg::Iterative => CountMode::Iterative,
            ModeArg::Adaptive => CountMode::Adaptive,
        };
        let store = DirImageStore::new(&a.data);
        Counter::new(&ck.model, &store).with_sigma(sigma).evaluate_scenes(&scenes, mode, eval_mode).map_err(err)?
    };
    println!("{report}");
    if let Some(out) = &a.out {
        emit(&report, Some(out))?;
    }
    Ok(())
}

fn video(a: VideoArgs) -> CliResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let sigma = sigma_or(a.sigma, &ck.meta)?;
    let frames = if a.frames.join("video.json").is_file() {
        data::load_video(&a.frames).map_err(err)?.frames
    } else {
        data::load_frames(&a.frames).map_err(err)?
    };
    let spec = PromptSpec::text_only(&a.text, &[]);
    let store = countpp::EmptyStore;
    let counter = Counter::new(&ck.model, &store).with_sigma(sigma);
    let r = if a.frozen { counter.count_video_frozen(&frames, &spec, a.n) } else { counter.count_video(&frames, &spec, a.n) }.map_err(err)?;
    emit(&r, a.out.as_deref())
}

fn serve(a: ServeArgs) -> CliResult {
    let mut cfg = ServiceConfig::from_env()?;
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(c) = a.ckpt {
        cfg.set_checkpoint(c);
    }
    if let Some(n) = a.cache_capacity {
        cfg.cache_capacity = n;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(err)?;
    rt.block_on(countpp_service::serve(cfg)).map_err(err)
}

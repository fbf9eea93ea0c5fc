//! `celldet`: synthetic data, training, prediction, evaluation and overlays.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime error.

mod config;
mod draw;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use celldet_core::data::{
    generate_synthetic, image_to_tensor, load_annotations, load_samples, pad_to_multiple, read_image, summarize,
    write_mfov_dataset,
};
use celldet_core::metrics::evaluate_dataset;
use celldet_core::model::{load_checkpoint, UpsampleKind};
use celldet_core::training::{predict, train};
use celldet_core::{Cell, Detection, Model, ModelInput, Point, RefineMode};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{key_listing, CliConfig};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<celldet_core::Error> for CliError {
    fn from(e: celldet_core::Error) -> Self {
        if e.is_validation() {
            CliError::validation(e.to_string())
        } else {
            CliError::runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "celldet", version, about = "Point-proposal cell detection with deformable proposals and multi-field-of-view fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (`sample_NNNN/fov_k.png` + `fov_K.json`).
    #[command(after_help = key_listing())]
    GenerateSynth(GenerateArgs),
    /// Train a model; writes best.ckpt, last.ckpt, history.jsonl and config.toml.
    #[command(after_help = key_listing())]
    Train(TrainArgs),
    /// Write `<name>.json` detections for every image of a dataset.
    #[command(after_help = key_listing())]
    Predict(PredictArgs),
    /// Score saved predictions or a checkpoint against annotations.
    #[command(after_help = key_listing())]
    Evaluate(EvaluateArgs),
    /// Draw class-colored markers, or initial vs deformed proposals.
    #[command(after_help = key_listing())]
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_images: usize,
    /// Concentric views per sample.
    #[arg(long, default_value_t = 1)]
    mfov_k: usize,
    /// Overrides synth.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides synth.canvas_size.
    #[arg(long)]
    canvas_size: Option<usize>,
    /// Overrides the class count of every section.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Overrides synth.context_classes.
    #[arg(long)]
    context_classes: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training dataset (flat `images/` + `annotations/` or `sample_*` dirs).
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset for periodic evaluation and best-checkpoint selection.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.max_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides train.learning_rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides model.mfov_k.
    #[arg(long)]
    mfov_k: Option<usize>,
    /// Overrides model.mode (`dpa` or `iterative`).
    #[arg(long)]
    mode: Option<String>,
    /// Overrides model.refine_stages.
    #[arg(long)]
    refine_stages: Option<usize>,
    /// Overrides model.interval.
    #[arg(long)]
    interval: Option<f64>,
    /// Overrides model.mfov_upsample (`transposed_conv` or `bilinear`).
    #[arg(long)]
    upsample: Option<String>,
    /// Overrides eval.match_radius.
    #[arg(long)]
    radius: Option<f64>,
    /// Overrides the class count of every section.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Overrides train.augment.
    #[arg(long)]
    augment: Option<bool>,
    /// Overrides train.strict_deterministic.
    #[arg(long)]
    strict: Option<bool>,
    /// Print the loss every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `<name>.json` files.
    #[arg(long)]
    out: PathBuf,
    /// Overrides eval.confidence_threshold. Use 0 to keep every proposal
    /// (the full sweep for AP).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Annotated dataset.
    #[arg(long)]
    data: PathBuf,
    /// Directory of saved `<name>.json` predictions.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Predict live from this checkpoint (every proposal is kept for AP).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides eval.match_radius.
    #[arg(long)]
    radius: Option<f64>,
    /// Overrides eval.confidence_threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Overrides the class count of every section.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Image(s); several are taken as concentric views, innermost last.
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    /// Predictions file `{"detections": [...]}`.
    #[arg(long, group = "source")]
    detections: Option<PathBuf>,
    /// Annotation file.
    #[arg(long, group = "source")]
    annotations: Option<PathBuf>,
    /// Draw initial vs deformed proposals from this checkpoint side by side.
    #[arg(long, group = "source")]
    deformation: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    marker_radius: i64,
}

/// On-disk predictions for one image.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFile {
    detections: Vec<Detection>,
}

fn resolve(args: &ConfigArgs, apply: impl FnOnce(&mut CliConfig) -> CliResult<()>) -> CliResult<Option<CliConfig>> {
    let mut cfg = CliConfig::load(args.config.as_deref())?;
    apply(&mut cfg)?;
    cfg.validate()?;
    if args.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let Some(cfg) = resolve(&a.cfg, |c| {
        if let Some(n) = a.num_classes {
            c.set_num_classes(n);
        }
        if let Some(s) = a.seed {
            c.synth.seed = s;
        }
        if let Some(s) = a.canvas_size {
            c.synth.canvas_size = s;
        }
        if let Some(b) = a.context_classes {
            c.synth.context_classes = b;
        }
        Ok(())
    })?
    else {
        return Ok(());
    };
    let samples = generate_synthetic(&cfg.synth, a.n_images, a.mfov_k)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_mfov_dataset(&a.out, &samples)?;
    let s = summarize(&samples);
    println!("wrote {}", a.out.display());
    println!("images: {}", s.images);
    println!("views per image: {}", s.views_per_image);
    for class in 0..cfg.synth.num_classes {
        println!("class {class}: {}", s.cells_per_class.get(&class).copied().unwrap_or(0));
    }
    Ok(())
}

fn parse_mode(s: &str) -> CliResult<RefineMode> {
    Ok(s.parse::<RefineMode>()?)
}

fn parse_upsample(s: &str) -> CliResult<UpsampleKind> {
    match s {
        "transposed_conv" => Ok(UpsampleKind::TransposedConv),
        "bilinear" => Ok(UpsampleKind::Bilinear),
        other => Err(CliError::validation(format!(
            "unknown upsampling `{other}` (expected `transposed_conv` or `bilinear`)"
        ))),
    }
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let Some(cfg) = resolve(&a.cfg, |c| {
        if let Some(n) = a.num_classes {
            c.set_num_classes(n);
        }
        if let Some(v) = a.steps {
            c.train.max_steps = v;
        }
        if let Some(v) = a.lr {
            c.train.learning_rate = v;
        }
        if let Some(v) = a.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = a.seed {
            c.train.seed = v;
        }
        if let Some(v) = a.mfov_k {
            c.model.mfov_k = v;
        }
        if let Some(v) = &a.mode {
            c.model.mode = parse_mode(v)?;
        }
        if let Some(v) = a.refine_stages {
            c.model.refine_stages = v;
        }
        if let Some(v) = a.interval {
            c.model.interval = v;
        }
        if let Some(v) = &a.upsample {
            c.model.mfov_upsample = parse_upsample(v)?;
        }
        if let Some(v) = a.radius {
            c.eval.match_radius = v;
        }
        if let Some(v) = a.augment {
            c.train.augment = v;
        }
        if let Some(v) = a.strict {
            c.train.strict_deterministic = v;
        }
        Ok(())
    })?
    else {
        return Ok(());
    };
    let (k, div, nc) = (cfg.model.mfov_k, cfg.model.required_divisor(), cfg.model.head.num_classes);
    let train_set = load_samples(&a.data, nc, k, div)?;
    let val_set = match &a.val {
        Some(p) => load_samples(p, nc, k, div)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io_err(&cfg_path, e))?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    eprintln!(
        "training on {} image(s), {} parameters, {} steps",
        train_set.len(),
        model.params().num_scalars(),
        cfg.train.max_steps
    );
    let start = Instant::now();
    let log_every = a.log_every.max(1);
    let outcome = train(model, &train_set, &val_set, &cfg.train, &cfg.eval, Some(&a.out), |r| {
        if r.step % log_every == 0 {
            eprintln!(
                "step {:>6}  total {:.5}  cls {:.5}  loc {:.3}  ({:.1}s)",
                r.step,
                r.loss.total,
                r.loss.cls_loss,
                r.loss.loc_loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let last = outcome.steps.last().expect("at least one step");
    println!("final loss {:.6} (cls {:.6}, loc {:.4})", last.loss.total, last.loss.cls_loss, last.loss.loc_loss);
    if let Some(f1) = outcome.best_macro_f1 {
        println!("best validation macro F1 {f1:.4} at step {}", outcome.best_step);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(load_checkpoint(path)?)
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let Some(cfg) = resolve(&a.cfg, |_| Ok(()))? else {
        return Ok(());
    };
    let threshold = a.threshold.unwrap_or(cfg.eval.confidence_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::validation("threshold must lie in [0, 1]"));
    }
    let model = load_model(&a.checkpoint)?;
    let mc = model.config();
    let samples = load_samples(&a.data, mc.head.num_classes, mc.mfov_k, mc.required_divisor())?;
    let (dets, ips) = predict(&model, &samples, threshold)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut total = 0;
    for (s, d) in samples.iter().zip(dets) {
        total += d.len();
        write_json(&a.out.join(format!("{}.json", s.name)), &PredictionFile { detections: d })?;
    }
    println!("predicted {} image(s), {total} detection(s) at threshold {threshold}", samples.len());
    println!("throughput {ips:.2} images/s");
    Ok(())
}

fn read_predictions(path: &Path) -> CliResult<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let f: PredictionFile =
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok(f.detections)
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let Some(cfg) = resolve(&a.cfg, |c| {
        if let Some(n) = a.num_classes {
            c.set_num_classes(n);
        }
        if let Some(r) = a.radius {
            c.eval.match_radius = r;
        }
        if let Some(t) = a.threshold {
            c.eval.confidence_threshold = t;
        }
        Ok(())
    })?
    else {
        return Ok(());
    };
    let nc = cfg.eval.num_classes;
    let mut ips = None;
    let (annotations, predictions) = match (&a.predictions, &a.checkpoint) {
        (Some(dir), _) => {
            let ann: BTreeMap<String, Vec<Cell>> = load_annotations(&a.data, nc)?.into_iter().collect();
            let mut preds = BTreeMap::new();
            for name in ann.keys() {
                let p = dir.join(format!("{name}.json"));
                if !p.exists() {
                    return Err(CliError::validation(format!("no predictions for image '{name}' ({})", p.display())));
                }
                preds.insert(name.clone(), read_predictions(&p)?);
            }
            (ann, preds)
        }
        (None, Some(ckpt)) => {
            let model = load_model(ckpt)?;
            let mc = model.config();
            if mc.head.num_classes != nc {
                return Err(CliError::validation(format!(
                    "checkpoint has {} classes but evaluation uses {nc}",
                    mc.head.num_classes
                )));
            }
            let samples = load_samples(&a.data, nc, mc.mfov_k, mc.required_divisor())?;
            let (dets, rate) = predict(&model, &samples, 0.0)?;
            ips = Some(rate);
            let mut ann = BTreeMap::new();
            let mut preds = BTreeMap::new();
            for (s, d) in samples.into_iter().zip(dets) {
                ann.insert(s.name.clone(), s.cells);
                preds.insert(s.name, d);
            }
            (ann, preds)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut report = evaluate_dataset(&predictions, &annotations, &cfg.eval)?;
    report.images_per_second = ips;
    print!("{}", report.render_table());
    if let Some(p) = &a.json {
        fs::write(p, report.to_json()).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> CliResult<()> {
    let images = a.image.iter().map(|p| Ok(read_image(p)?)).collect::<CliResult<Vec<_>>>()?;
    let base = images.last().expect("clap requires an image").clone();
    let r = a.marker_radius;
    let out = if let Some(ckpt) = &a.deformation {
        let model = load_model(ckpt)?;
        let div = model.config().required_divisor();
        let views = images.iter().map(|i| pad_to_multiple(&image_to_tensor(i), div)).collect();
        let output = model.infer(&ModelInput { views })?;
        let initial = &output.proposals.initial;
        let deformed = output.proposals.deformed.as_ref().expect("forward fills deformed points");
        let (mut left, mut right) = (base.clone(), base.clone());
        for p in initial {
            draw::marker(&mut left, *p, r, draw::NEUTRAL);
        }
        for p in deformed {
            draw::marker(&mut right, *p, r, draw::NEUTRAL);
        }
        let mean = initial.iter().zip(deformed).map(|(a, b)| a.dist(b)).sum::<f64>() / initial.len().max(1) as f64;
        println!("proposals: {}", initial.len());
        println!("mean displacement: {mean:.6} px");
        draw::side_by_side(&left, &right)
    } else {
        let points: Vec<(Point, usize)> = if let Some(p) = &a.detections {
            read_predictions(p)?.iter().map(|d| (d.point(), d.class)).collect()
        } else if let Some(p) = &a.annotations {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
            let cells: Vec<Cell> = serde_json::from_value(v.get("cells").cloned().unwrap_or_default())
                .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
            cells.iter().map(|c| (c.point(), c.class)).collect()
        } else {
            return Err(CliError::validation("give --detections, --annotations or --deformation"));
        };
        let mut img = base;
        for (p, class) in &points {
            draw::marker(&mut img, *p, r, draw::class_color(*class));
        }
        println!("markers: {}", points.len());
        img
    };
    out.save(&a.out).map_err(|e| io_err(&a.out, e))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateSynth(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Visualize(a) => cmd_visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

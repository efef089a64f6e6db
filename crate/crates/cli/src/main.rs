use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use effipose::config::RunConfig;
use effipose::cost::{cost_report, summarize};
use effipose::data::{
    load_annotations, synthetic_dataset, Dataset, DatasetIndex, Image, Split, CROP_FACTOR,
    PERSON_BOX,
};
use effipose::eval::{
    format_predictions, parse_predictions, predict_dataset, EvalReport, DEFAULT_SCALES,
};
use effipose::optim::{SgdState, MOMENTUM};
use effipose::scaling::{compound_scaling_check, detection_depth, ALPHA, BETA, GAMMA};
use effipose::train::{save_checkpoint, train, TrainOptions};
use effipose::weights::{load_weights, save_weights, LoadMode};
use effipose::{build_variant, Error, Keypoint, KeypointAnnotation, ParamStore, Variant};

#[derive(Parser)]
#[command(
    name = "effipose",
    version,
    about = "Build, train and evaluate EfficientPose models"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "EFFIPOSE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer table with parameter and FLOP totals.
    Summarize(ModelArgs),
    /// Print compound-scaling ratios and detection depths.
    CheckScaling,
    /// Train a model on an annotation file.
    Train(TrainArgs),
    /// Score predictions or a trained model with PCKh.
    Eval(EvalArgs),
    /// Write decoded keypoints for images.
    Predict(PredictArgs),
    /// Write freshly initialised weights.
    InitWeights(InitArgs),
    /// Render a synthetic disk dataset.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// RT, I, II, III or IV.
    #[arg(long)]
    variant: Option<String>,
    /// key=value config file; overrides --variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    no_low_branch: bool,
    #[arg(long)]
    no_skeleton: bool,
    #[arg(long)]
    no_upscaling: bool,
    /// Output directory; the resolved config is written here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Annotation file; image paths are relative to its directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// Initial weights (loaded by name, shapes must match).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Comma-separated input scales.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SCALES.to_vec())]
    scales: Vec<f64>,
    /// Average with horizontally flipped inputs.
    #[arg(long)]
    flip: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(
        long,
        conflicts_with = "predictions",
        required_unless_present = "predictions"
    )]
    weights: Option<PathBuf>,
    /// Predictions file, one record per annotation in the same order.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Annotation file giving person centres and scales.
    #[arg(long, required_unless_present = "image")]
    data: Option<PathBuf>,
    /// Images to run on whole.
    #[arg(long, num_args = 1..)]
    image: Vec<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Diverged { .. } => 3,
            Error::UnsupportedScale(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Image { .. }
            | Error::WeightFormat(_)
            | Error::WeightNames { .. }
            | Error::Io(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn resolve(m: &ModelArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match (&m.config, &m.variant) {
        (Some(path), _) => {
            require_file(path, "config")?;
            RunConfig::load(path)?
        }
        (None, v) => {
            let name = v.as_deref().unwrap_or("RT");
            let variant: Variant = name.parse().map_err(|e: Error| usage(e.to_string()))?;
            RunConfig::named(variant)
        }
    };
    let v = &mut cfg.variant;
    if let Some(p) = m.passes {
        v.keypoint_passes = p;
    }
    if m.no_low_branch {
        v.low_backbone = None;
    }
    if m.no_skeleton {
        v.skeleton_pass = false;
    }
    if m.no_upscaling {
        v.upscaling = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(m: &ModelArgs) -> std::result::Result<&Path, Failure> {
    m.out
        .as_deref()
        .ok_or_else(|| usage("--out is required for this command"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn load_params(cfg: &RunConfig, path: &Path) -> std::result::Result<ParamStore<f32>, Failure> {
    require_file(path, "weights")?;
    let model = build_variant(&cfg.variant)?;
    let mut params = model.graph.init_params::<f32>(0)?;
    load_weights(&mut params, path, &LoadMode::Strict)?;
    Ok(params)
}

fn load_dataset(path: &Path) -> std::result::Result<Dataset, Failure> {
    require_file(path, "annotation file")?;
    let index = load_annotations(path)?;
    Ok(Dataset::preload(index)?)
}

fn cmd_summarize(m: &ModelArgs) -> CmdResult {
    let cfg = resolve(m)?;
    let model = build_variant(&cfg.variant)?;
    let text = summarize(&model.graph, &format!("EfficientPose {}", cfg.variant.name));
    print!("{text}");
    if let Some(dir) = &m.out {
        write_config(dir, &cfg)?;
        fs::write(dir.join("summary.txt"), text)?;
    }
    Ok(())
}

fn cmd_check_scaling() -> CmdResult {
    println!("alpha={ALPHA} beta={BETA} gamma={GAMMA}");
    println!("{:>4} {:>18} {:>12}", "phi", "(a*b^2*g^2)^phi", "2^phi");
    for phi in 0..=7 {
        let r = compound_scaling_check(ALPHA, BETA, GAMMA, phi as f64)?;
        println!("{phi:>4} {r:>18.4} {:>12.4}", 2f64.powi(phi));
    }
    println!();
    println!(
        "{:<8} {:<6} {:>10} {:>6}",
        "variant", "scale", "alpha^phi", "depth"
    );
    for v in Variant::ALL {
        let s = effipose::VariantConfig::named(v).high_backbone;
        println!(
            "{:<8} {:<6} {:>10} {:>6}",
            v.to_string(),
            s.to_string(),
            s.alpha_phi(),
            detection_depth(s)
        );
    }
    Ok(())
}

fn checkpoint_epoch(dir: &Path) -> Option<usize> {
    dir.file_name()?
        .to_str()?
        .strip_prefix("epoch_")?
        .parse()
        .ok()
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let out = out_dir(&a.model)?.to_path_buf();
    let (mut cfg, start_epoch) = match &a.resume {
        Some(ck) => {
            let epoch = checkpoint_epoch(ck).ok_or_else(|| {
                usage(format!("{} is not an epoch_NNNN checkpoint", ck.display()))
            })?;
            require_file(&ck.join("config.txt"), "checkpoint config")?;
            (RunConfig::load(&ck.join("config.txt"))?, epoch + 1)
        }
        None => (resolve(&a.model)?, 0),
    };
    let t = &mut cfg.train;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch {
        t.batch_size = b;
    }
    if let Some(l) = a.lr_max {
        t.lr_max = l;
    }
    if a.no_augment {
        t.augment = false;
    }
    cfg.validate()?;

    let data = load_dataset(&a.data)?;
    let model = build_variant(&cfg.variant)?;
    let mut params = model.graph.init_params::<f32>(cfg.train.seed)?;
    let mut state = SgdState::<f32>::new(MOMENTUM);
    if let Some(ck) = &a.resume {
        load_weights(&mut params, &ck.join("weights.epw"), &LoadMode::Strict)?;
        state = SgdState::load(&ck.join("optimizer.epw"), MOMENTUM)?;
    } else if let Some(w) = &a.weights {
        require_file(w, "weights")?;
        load_weights(&mut params, w, &LoadMode::Strict)?;
    }
    write_config(&out, &cfg)?;
    let opts = TrainOptions {
        start_epoch,
        max_steps: a.max_steps,
        fixed_lr: None,
        out_dir: Some(out.clone()),
    };
    let report = train(&cfg, &model, &data, &mut params, &mut state, &opts)?;
    if report.checkpoints.is_empty() {
        // a step limit ended training mid-epoch
        save_checkpoint(&out.join("final"), &cfg, &params, &state)?;
    }
    if let Some(loss) = report.final_loss() {
        println!("steps: {}  final loss: {loss:.6e}", report.steps.len());
    }
    println!("checkpoints written under {}", out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let cfg = resolve(&a.model)?;
    let out = out_dir(&a.model)?;
    require_file(&a.data, "annotation file")?;
    let index = load_annotations(&a.data)?;
    let report = match (&a.predictions, &a.weights) {
        (Some(p), _) => {
            require_file(p, "predictions")?;
            let text = fs::read_to_string(p)?;
            let preds = parse_predictions(&text, &p.display().to_string(), cfg.variant.keypoints)?;
            if preds.len() != index.records.len() {
                return Err(usage(format!(
                    "{} predictions for {} annotations",
                    preds.len(),
                    index.records.len()
                )));
            }
            for ((img, _), rec) in preds.iter().zip(&index.records) {
                if img != &rec.image {
                    return Err(usage(format!(
                        "prediction for {img} paired with annotation for {}",
                        rec.image
                    )));
                }
            }
            let preds: Vec<_> = preds.into_iter().map(|(_, p)| p).collect();
            EvalReport::new(&preds, &index.records)?
        }
        (None, Some(w)) => {
            let params = load_params(&cfg, w)?;
            let data = Dataset::preload(index.clone())?;
            let preds =
                predict_dataset(&cfg.variant, &params, &data, &a.infer.scales, a.infer.flip)?;
            let mut r = EvalReport::new(&preds, &index.records)?;
            let cost = cost_report(&build_variant(&cfg.variant)?.graph);
            r.params = Some(cost.total_params);
            r.flops = Some(cost.total_flops);
            r
        }
        (None, None) => return Err(usage("either --weights or --predictions is required")),
    };
    write_config(out, &cfg)?;
    let table = report.to_table();
    print!("{table}");
    fs::write(out.join("eval.txt"), table)?;
    fs::write(out.join("eval_metrics.txt"), report.to_lines())?;
    Ok(())
}

fn whole_image_record(path: &Path, img: &Image, keypoints: usize) -> KeypointAnnotation {
    let side = img.width.max(img.height) as f64;
    KeypointAnnotation {
        image: path.display().to_string(),
        center: (
            (img.width as f64 - 1.0) / 2.0,
            (img.height as f64 - 1.0) / 2.0,
        ),
        scale: side / (CROP_FACTOR * PERSON_BOX),
        head_box: [0.0; 4],
        keypoints: vec![Keypoint::hidden(); keypoints],
    }
}

fn cmd_predict(a: &PredictArgs) -> CmdResult {
    let cfg = resolve(&a.model)?;
    let out = out_dir(&a.model)?;
    let params = load_params(&cfg, &a.weights)?;
    let data = match &a.data {
        Some(d) => load_dataset(d)?,
        None => {
            let mut records = Vec::new();
            let mut images = Vec::new();
            for p in &a.image {
                require_file(p, "image")?;
                let img = Image::load(p)?;
                records.push(whole_image_record(p, &img, cfg.variant.keypoints));
                images.push(img);
            }
            let index = DatasetIndex {
                root: PathBuf::new(),
                records,
                split: Split::Test,
            };
            Dataset::in_memory(index, images)?
        }
    };
    let preds = predict_dataset(&cfg.variant, &params, &data, &a.infer.scales, a.infer.flip)?;
    write_config(out, &cfg)?;
    let mut text = String::new();
    for (i, p) in preds.iter().enumerate() {
        text.push_str(&format_predictions(&data.record(i).image, p));
        text.push('\n');
    }
    fs::write(out.join("predictions.txt"), &text)?;
    println!(
        "{} records written to {}",
        preds.len(),
        out.join("predictions.txt").display()
    );
    Ok(())
}

fn cmd_init_weights(a: &InitArgs) -> CmdResult {
    let cfg = resolve(&a.model)?;
    let out = out_dir(&a.model)?;
    let model = build_variant(&cfg.variant)?;
    let params = model.graph.init_params::<f32>(a.seed)?;
    write_config(out, &cfg)?;
    save_weights(&params, &out.join("weights.epw"))?;
    println!(
        "{} tensors, {} values",
        params.iter().count(),
        params.num_values()
    );
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let data = synthetic_dataset(a.count, a.res, a.seed)?;
    data.save(&a.out, "annotations.txt")?;
    println!("{} images written to {}", data.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Summarize(m) => cmd_summarize(m),
        Command::CheckScaling => cmd_check_scaling(),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::InitWeights(a) => cmd_init_weights(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

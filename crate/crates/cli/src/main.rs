use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use danet::bench::{bench_pps, weight_connectivity, BenchOptions};
use danet::eval::coco::{load_annotations, load_predictions};
use danet::eval::{coco_ap, pckh, InstanceAnnotation, COCO_KAPPA};
use danet::fsio::write_atomic;
use danet::image::RgbImage;
use danet::infer::{clamp_box, infer_person, BOX_SCALE};
use danet::model::FlopConvention;
use danet::train::{evaluate_pck, synth_dataset_sized, trace_csv, train_loop_with, AugmentRanges, TrainConfig};
use danet::{build_model, DANetConfig, Model};

/// Pose-estimation toolkit: model summaries, toy training, inference,
/// evaluation, benchmarking and weight analysis.
#[derive(Parser)]
#[command(name = "danet", version)]
struct Cli {
    /// Model config file (overrides --preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weights file.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Named preset, used when no --config is given.
    #[arg(long, default_value = "danet72")]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Per-module parameter and FLOP counts.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = FlopConvention::CALIBRATED)]
        convention: FlopConvention,
    },
    /// Overfit a small model on synthetic stick figures.
    TrainToy {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Seed of the synthetic dataset.
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        /// Train with random rotation, scaling and flipping.
        #[arg(long)]
        augment: bool,
    },
    /// Keypoints for the people in one image, as JSON lines.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// PNG or raw RGB image.
        #[arg(long)]
        image: PathBuf,
        /// Person box `x,y,w,h`; repeat for several people. Defaults to the
        /// whole image.
        #[arg(long = "box", value_parser = parse_box, allow_hyphen_values = true)]
        boxes: Vec<(f64, f64, f64, f64)>,
        /// Enlargement of each --box.
        #[arg(long, default_value_t = BOX_SCALE)]
        box_scale: f64,
        /// Average with the prediction on the mirrored crop.
        #[arg(long)]
        flip: bool,
        #[arg(long, default_value_t = 0)]
        image_id: u64,
    },
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Coco)]
        mode: Mode,
        /// PCKh threshold as a fraction of the head length.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Persons-per-second throughput.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, env = "DANET_THREADS", default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        persons: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// One model copy per thread instead of a shared one.
        #[arg(long)]
        replicate: bool,
    },
    /// Dense-connectivity maps of the bottleneck weights (SVG plus CSV).
    AnalyzeWeights {
        #[command(flatten)]
        model: ModelArgs,
        /// Stage 1 to 4; all stages when omitted.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: Option<u8>,
    },
    /// Internal consistency checks.
    Selftest {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Coco,
    Mpii,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] danet::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use danet::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::InvalidArgument { .. } | E::UnknownPreset { .. } => 2,
                E::NonFiniteGradient { .. } | E::NonFiniteLoss { .. } | E::NoLabeledKeypoints => 4,
                _ => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn parse_box(s: &str) -> Result<(f64, f64, f64, f64), String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, w, h] => Ok((x, y, w, h)),
        _ => Err(format!("expected x,y,w,h, got {} values", v.len())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context { config: cli.config, weights: cli.weights, seed: cli.seed, out: cli.out };
    match cli.command {
        Command::Summary { model, convention } => summary(&ctx, &model, convention),
        Command::TrainToy { preset, iters, lr, batch, samples, data_seed, augment } => {
            let train = TrainConfig {
                base_lr: lr,
                total_iters: iters,
                batch_size: batch,
                seed: ctx.seed,
                augment: augment.then(AugmentRanges::default),
                ..TrainConfig::default()
            };
            train_toy(&ctx, &preset, train, samples, data_seed)
        }
        Command::Infer { model, image, boxes, box_scale, flip, image_id } => {
            infer(&ctx, &model, &image, &boxes, box_scale, flip, image_id)
        }
        Command::Eval { pred, ann, mode, tau } => eval(&ctx, &pred, &ann, mode, tau),
        Command::Bench { model, threads, batch, persons, warmup, replicate } => {
            let opts = BenchOptions { batch_size: batch, threads, warmup, persons, replicate, seed: ctx.seed };
            bench(&ctx, &model, &opts)
        }
        Command::AnalyzeWeights { model, stage } => analyze_weights(&ctx, &model, stage),
        Command::Selftest { model } => selftest(&ctx, &model),
    }
}

struct Context {
    config: Option<PathBuf>,
    weights: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    fn model_config(&self, args: &ModelArgs) -> CliResult<DANetConfig> {
        Ok(match &self.config {
            Some(path) => DANetConfig::parse(&std::fs::read_to_string(path)?)?,
            None => DANetConfig::preset(&args.preset)?,
        })
    }

    /// The model from --weights, or a fresh one from --seed.
    fn model(&self, args: &ModelArgs, require_weights: bool) -> CliResult<Model<f32>> {
        let cfg = self.model_config(args)?;
        match &self.weights {
            Some(path) => Ok(Model::load(&cfg, path)?),
            None if require_weights => Err(CliError::Usage("--weights is required".into())),
            None => Ok(build_model(&cfg, self.seed)?),
        }
    }

    fn out_dir(&self) -> CliResult<&Path> {
        let dir = self.out.as_deref().ok_or_else(|| CliError::Usage("--out <DIR> is required".into()))?;
        std::fs::create_dir_all(dir)?;
        Ok(dir)
    }

    /// Writes to --out when given, otherwise prints.
    fn emit(&self, text: &str) -> CliResult<()> {
        match &self.out {
            Some(path) => write_atomic(path, text.as_bytes())?,
            None => print!("{text}"),
        }
        Ok(())
    }
}

fn summary(ctx: &Context, args: &ModelArgs, convention: FlopConvention) -> CliResult<()> {
    let cfg = ctx.model_config(args)?;
    let model = build_model::<f32>(&cfg, ctx.seed)?;
    let report = model.count_flops(cfg.input_height, cfg.input_width, convention)?;
    let name = cfg.preset.as_deref().unwrap_or("custom");
    println!("{name} @ {}×{} ({convention} FLOPs)", cfg.input_height, cfg.input_width);
    println!("{:<12} {:>12} {:>16}", "module", "params", "flops");
    let mut csv = String::from("module,params,flops\n");
    for m in &report.modules {
        println!("{:<12} {:>12} {:>16}", m.name, m.params, m.flops);
        let _ = writeln!(csv, "{},{},{}", m.name, m.params, m.flops);
    }
    println!("{:<12} {:>12} {:>16}", "total", report.total_params, report.total_flops);
    println!("{:.2}M params, {:.2} GFLOPs", report.params_m(), report.gflops());
    let _ = writeln!(csv, "total,{},{}", report.total_params, report.total_flops);
    if let Some(path) = &ctx.out {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ImageEntry {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize)]
struct AnnotationEntry {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    area: f64,
    keypoints: Vec<f64>,
    num_keypoints: usize,
    head_box: [f64; 4],
}

#[derive(Serialize)]
struct AnnotationFile {
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
}

fn train_toy(ctx: &Context, preset: &str, train: TrainConfig, samples: usize, data_seed: u64) -> CliResult<()> {
    let dir = ctx.out_dir()?;
    let cfg = match &ctx.config {
        Some(path) => DANetConfig::parse(&std::fs::read_to_string(path)?)?,
        None => DANetConfig::preset(preset)?,
    };
    let mut model = build_model::<f32>(&cfg, ctx.seed)?;
    let data = synth_dataset_sized(samples, data_seed, (cfg.input_height, cfg.input_width))?;
    let report_every = (train.total_iters / 10).max(1);
    let trace = train_loop_with(&mut model, &data, &train, |row| {
        if row.iter % report_every == 0 || row.iter + 1 == train.total_iters {
            eprintln!("iter {:>5}  lr {:.3e}  loss {:.6}", row.iter, row.lr, row.loss);
        }
    })?;
    let pck = evaluate_pck(&model, &data, 0.5)?;
    if !pck.mean.is_finite() {
        return Err(CliError::Numerical(format!("PCK is {}", pck.mean)));
    }
    write_atomic(&dir.join("trace.csv"), trace_csv(&trace).as_bytes())?;
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    model.save_weights(&dir.join("weights.bin"))?;
    write_atomic(&dir.join("pck.csv"), pck.to_csv().as_bytes())?;

    // The training images and their labels, so the other commands can be
    // run against them.
    let samples_dir = dir.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    let mut file = AnnotationFile { images: Vec::new(), annotations: Vec::new() };
    for (i, s) in data.iter().enumerate() {
        let name = format!("{i:04}.rgb");
        let img = RgbImage::from_tensor(&s.image)?;
        write_atomic(&samples_dir.join(&name), &img.encode_raw())?;
        let id = i as u64;
        file.images.push(ImageEntry { id, file_name: format!("samples/{name}"), width: img.width, height: img.height });
        let labeled: Vec<_> = s.keypoints.iter().filter(|k| k.visible).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for k in &labeled {
            (x0, y0, x1, y1) = (x0.min(k.x), y0.min(k.y), x1.max(k.x), y1.max(k.y));
        }
        // a square head box whose length measure equals the sample's
        let half = s.head_length / (1.2 * std::f64::consts::SQRT_2);
        let nose = s.keypoints[0];
        file.annotations.push(AnnotationEntry {
            id,
            image_id: id,
            bbox: [x0, y0, x1 - x0, y1 - y0],
            area: ((x1 - x0) * (y1 - y0)).max(1.0),
            keypoints: s.keypoints.iter().flat_map(|k| if k.visible { [k.x, k.y, 2.0] } else { [0.0, 0.0, 0.0] }).collect(),
            num_keypoints: labeled.len(),
            head_box: [nose.x - half, nose.y - half, nose.x + half, nose.y + half],
        });
    }
    let json = serde_json::to_string_pretty(&file).map_err(danet::Error::from)?;
    write_atomic(&dir.join("annotations.json"), json.as_bytes())?;
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    println!("final loss {last:.6}, PCK@0.5 {:.4}", pck.mean);
    Ok(())
}

#[derive(Serialize)]
struct InstanceRecord {
    image_id: u64,
    /// `x, y, score` per keypoint.
    keypoints: Vec<f64>,
    /// Mean keypoint score.
    score: f64,
}

fn infer(
    ctx: &Context,
    args: &ModelArgs,
    image: &Path,
    boxes: &[(f64, f64, f64, f64)],
    box_scale: f64,
    flip: bool,
    image_id: u64,
) -> CliResult<()> {
    let model = ctx.model(args, true)?;
    let img = RgbImage::load(image)?;
    let pixels = img.to_tensor();
    let jobs: Vec<_> = if boxes.is_empty() {
        vec![((0.0, 0.0, img.width as f64, img.height as f64), 1.0)]
    } else {
        boxes.iter().map(|&b| (b, box_scale)).collect()
    };
    let mut lines = String::new();
    for (bbox, scale) in jobs {
        let (bbox, clipped) = clamp_box(bbox, img.width, img.height)?;
        if clipped {
            eprintln!("warning: box clipped to {bbox:?}");
        }
        let kps = infer_person(&model, &pixels, bbox, scale, flip)?;
        let score = kps.iter().map(|k| k.score).sum::<f64>() / kps.len().max(1) as f64;
        let record = InstanceRecord { image_id, keypoints: kps.iter().flat_map(|k| [k.x, k.y, k.score]).collect(), score };
        lines.push_str(&serde_json::to_string(&record).map_err(danet::Error::from)?);
        lines.push('\n');
    }
    ctx.emit(&lines)
}

fn eval(ctx: &Context, pred: &Path, ann: &Path, mode: Mode, tau: f64) -> CliResult<()> {
    let preds = load_predictions(pred)?;
    let (_, gts) = load_annotations(ann)?;
    let csv = match mode {
        Mode::Coco => {
            let k = gts.first().map_or(COCO_KAPPA.len(), |g| g.keypoints.len());
            if k != COCO_KAPPA.len() {
                return Err(CliError::Usage(format!("coco mode needs 17 keypoints per annotation, found {k}")));
            }
            coco_ap(&preds, &gts, &COCO_KAPPA)?.to_csv()
        }
        Mode::Mpii => {
            let paired = pair_by_image(&preds, &gts);
            pckh(&paired, &gts, tau)?.to_csv()
        }
    };
    ctx.emit(&csv)
}

/// For each annotation, a prediction from the same image: the image's
/// predictions in descending score order are matched to its annotations in
/// file order. Annotations left over get an all-NaN prediction, which counts
/// as a miss.
fn pair_by_image(preds: &[danet::eval::Prediction], gts: &[InstanceAnnotation]) -> Vec<Vec<(f64, f64)>> {
    let mut used = std::collections::HashMap::<u64, usize>::new();
    gts.iter()
        .map(|g| {
            let mut own: Vec<_> = preds.iter().filter(|p| p.image_id == g.image_id).collect();
            own.sort_by(|a, b| b.score.total_cmp(&a.score));
            let slot = used.entry(g.image_id).or_insert(0);
            let pick = own.get(*slot).map(|p| p.keypoints.clone());
            *slot += 1;
            pick.unwrap_or_else(|| vec![(f64::NAN, f64::NAN); g.keypoints.len()])
        })
        .collect()
}

fn bench(ctx: &Context, args: &ModelArgs, opts: &BenchOptions) -> CliResult<()> {
    let model = ctx.model(args, false)?;
    let report = bench_pps(&model, opts)?;
    print!("{}", report.to_text());
    if let Some(path) = &ctx.out {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn analyze_weights(ctx: &Context, args: &ModelArgs, stage: Option<u8>) -> CliResult<()> {
    if ctx.weights.is_none() {
        eprintln!("warning: no --weights given; analyzing a freshly initialized model");
    }
    let model = ctx.model(args, false)?;
    let dir = ctx.out_dir()?;
    let stages: Vec<usize> = match stage {
        Some(s) => vec![usize::from(s) - 1],
        None => (0..model.config().stages.len()).filter(|&s| model.config().stages[s].layers > 0).collect(),
    };
    for s in stages {
        let map = weight_connectivity(&model, s)?;
        let stem = dir.join(format!("stage{}", s + 1));
        map.write(&stem)?;
        println!("{}", stem.with_extension("svg").display());
    }
    Ok(())
}

fn selftest(ctx: &Context, args: &ModelArgs) -> CliResult<()> {
    let cfg = match &ctx.weights {
        Some(_) => Some(ctx.model_config(args)?),
        None => None,
    };
    let weights = cfg.as_ref().zip(ctx.weights.as_deref());
    let results = danet::selftest::run(ctx.seed, weights);
    let mut report = String::new();
    for r in &results {
        let _ = writeln!(report, "{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(report, "{} checks, {failed} failed", results.len());
    ctx.emit(&report)?;
    if failed > 0 {
        let msg = format!("{failed} selftest check(s) failed");
        // unreadable input outranks numerical failures
        if results.iter().any(|r| !r.passed && r.reads_input) {
            return Err(CliError::Input(msg));
        }
        return Err(CliError::Numerical(msg));
    }
    Ok(())
}

//! `strawdet` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::fmt;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use strawdet::augment::{mosaic, AugmentOp, LabeledImage};
use strawdet::dataset::{read_labels, train_config_text, write_labels, DatasetManifest, LabelRecord};
use strawdet::detect::{
    detect_image, format_detections, parse_detections, render, DetectConfig, Detection, DEFAULT_CONF,
    DEFAULT_NMS_IOU,
};
use strawdet::graph::{init_weights, load_weights, save_weights, Model, WeightStore};
use strawdet::image::{read_image, read_image_size, write_image, RasterImage};
use strawdet::metrics::{Evaluator, GtBox, EVAL_IOU};
use strawdet::rng::SplitMix64;
use strawdet::{build_model, ArchId};

/// Problems with the invocation itself; mapped to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn unit_interval(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("'{s}' is not a positive integer")),
    }
}

fn input_size(s: &str) -> Result<usize, String> {
    let v = positive(s)?;
    if v.is_multiple_of(32) {
        Ok(v)
    } else {
        Err(format!("{v} is not a multiple of 32"))
    }
}

fn image_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("'{s}' is not WIDTHxHEIGHT"))?;
    Ok((positive(w)?, positive(h)?))
}

#[derive(Parser)]
#[command(name = "strawdet", version, about = "Strawberry maturity detection engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or initialise model graphs.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Run detection on PPM images.
    Detect(DetectArgs),
    /// Score prediction files against ground-truth labels.
    Eval(EvalArgs),
    /// Write an augmented copy of an image+label directory.
    Augment(AugmentArgs),
    /// Time forward + decode + NMS on a synthetic image.
    Bench(BenchArgs),
    /// Print or write the training hyperparameters.
    EmitTrainConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Layer table, parameter count and GFLOPs.
    Info {
        arch: ArchId,
        #[arg(long, default_value_t = 3, value_parser = positive)]
        classes: usize,
        #[arg(long, default_value_t = 640, value_parser = input_size)]
        imgsz: usize,
    },
    /// Write a seeded (or all-zero) weight file.
    Init {
        #[arg(long)]
        arch: ArchId,
        #[arg(long, default_value_t = 3, value_parser = positive)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        zero: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "yolov5s-straw")]
    arch: ArchId,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    classes: usize,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = unit_interval)]
    conf: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU, value_parser = unit_interval)]
    nms_iou: f32,
    #[arg(long, default_value_t = 640, value_parser = input_size)]
    imgsz: usize,
    /// Output directory for `<stem>.txt` (and `<stem>_det.ppm` with --render).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    render: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Image files or directories of `*.ppm`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    pred_dir: PathBuf,
    /// Label files, with same-stem `.ppm` images giving the pixel size.
    gt_dir: PathBuf,
    #[arg(long, default_value_t = EVAL_IOU as f32, value_parser = unit_interval)]
    eval_iou: f32,
    /// Operating point for the precision/recall columns.
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = unit_interval)]
    conf: f32,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    classes: usize,
    /// Image size used when the ground-truth image is absent.
    #[arg(long, value_parser = image_size)]
    image_size: Option<(usize, usize)>,
    /// Directory for report.txt and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    in_dir: PathBuf,
    out_dir: PathBuf,
    /// Comma-separated: b+20,b+40,b-20,b-40,saltpepper,gauss,hsv,mosaic.
    #[arg(long, default_value = "b+20,b+40,b-20,b-40,saltpepper,gauss", allow_hyphen_values = true)]
    ops: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mosaic side; defaults to the longest side of the group's first image.
    #[arg(long, value_parser = positive)]
    mosaic_size: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    iters: usize,
    #[arg(long, default_value_t = 640, value_parser = input_size)]
    imgsz: usize,
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = unit_interval)]
    conf: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU, value_parser = unit_interval)]
    nms_iou: f32,
}

fn color_enabled() -> bool {
    std::env::var_os("STRAW_NO_COLOR").is_none() && std::io::stdout().is_terminal()
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().context("output path has no file name")?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    let graph = build_model(args.arch, args.classes)?;
    let store = load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    Model::new(graph, &store).with_context(|| format!("{} does not fit {}", args.weights.display(), args.arch))
}

fn cmd_model(cmd: ModelCommand) -> Result<()> {
    match cmd {
        ModelCommand::Info { arch, classes, imgsz } => {
            let start = Instant::now();
            let graph = build_model(arch, classes)?;
            print!("{}", graph.describe(imgsz));
            log::info!("model info took {:?}", start.elapsed());
        }
        ModelCommand::Init {
            arch,
            classes,
            seed,
            out,
            zero,
        } => {
            let graph = build_model(arch, classes)?;
            let store = if zero {
                WeightStore::zeros(&graph)
            } else {
                init_weights(&graph, seed)
            };
            save_weights(&store, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} tensors ({} parameters) to {}", store.len(), graph.count_params(), out.display());
        }
    }
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let mut images = Vec::new();
    for p in &args.inputs {
        if p.is_dir() {
            images.extend(files_with_ext(p, "ppm")?);
        } else {
            images.push(p.clone());
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(usage("no input images"));
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let model = load_model(&args.model)?;
    let cfg = DetectConfig {
        input_size: args.imgsz,
        conf_thresh: args.conf,
        nms_iou: args.nms_iou,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let run = |path: &PathBuf| -> Result<usize> {
        let img = read_image(path).with_context(|| format!("reading {}", path.display()))?;
        let dets = detect_image(&model, &img, &cfg).with_context(|| format!("detecting on {}", path.display()))?;
        let name = stem(path);
        write_atomic(&args.out.join(format!("{name}.txt")), format_detections(&dets).as_bytes())?;
        if args.render {
            write_atomic(&args.out.join(format!("{name}_det.ppm")), &render(&img, &dets).to_ppm())?;
        }
        Ok(dets.len())
    };
    let counts: Vec<Result<usize>> = pool.install(|| images.par_iter().map(run).collect());
    for (path, n) in images.iter().zip(counts) {
        println!("{}: {} detections", path.display(), n?);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let preds: BTreeMap<String, PathBuf> = files_with_ext(&args.pred_dir, "txt")?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let gts: BTreeMap<String, PathBuf> = files_with_ext(&args.gt_dir, "txt")?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    // An empty prediction directory means nothing was detected anywhere.
    let no_predictions = preds.is_empty() && !gts.is_empty();
    if no_predictions {
        log::warn!("{} holds no prediction files; scoring every image as empty", args.pred_dir.display());
    } else {
        for s in preds.keys().filter(|s| !gts.contains_key(*s)) {
            log::warn!("prediction {s} has no ground truth; excluded");
        }
        for s in gts.keys().filter(|s| !preds.contains_key(*s)) {
            log::warn!("ground truth {s} has no prediction file; excluded");
        }
    }
    let common: Vec<&String> = gts.keys().filter(|s| no_predictions || preds.contains_key(*s)).collect();
    if common.is_empty() {
        return Err(usage(format!(
            "no file stems shared by {} and {}",
            args.pred_dir.display(),
            args.gt_dir.display()
        )));
    }
    let mut ev = Evaluator::new(args.classes, args.eval_iou as f64, args.conf);
    for s in common {
        let dets: Vec<Detection> = match preds.get(s) {
            Some(p) => parse_detections(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => Vec::new(),
        };
        let labels = read_labels(&gts[s])?;
        let img_path = args.gt_dir.join(format!("{s}.ppm"));
        let (w, h) = if img_path.is_file() {
            read_image_size(&img_path).with_context(|| format!("reading {}", img_path.display()))?
        } else if let Some(size) = args.image_size {
            size
        } else {
            bail!("{} is missing; pass --image-size WIDTHxHEIGHT", img_path.display());
        };
        let gt: Vec<GtBox> = labels.iter().map(|l| GtBox::from_label(l, w, h)).collect();
        ev.add_image(&dets, &gt);
    }
    let report = ev.finish();
    print!("{}", report.to_text(color_enabled()));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_atomic(&out.join("report.txt"), report.to_text(false).as_bytes())?;
        write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn parse_ops(text: &str) -> Result<Vec<AugmentOp>> {
    let mut ops = Vec::new();
    for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let op: AugmentOp = name.parse().map_err(|e: strawdet::augment::AugmentError| usage(e.to_string()))?;
        if !ops.contains(&op) {
            ops.push(op);
        }
    }
    Ok(ops)
}

fn read_item(image: &Path, label: &Path) -> Result<LabeledImage> {
    let img = read_image(image).with_context(|| format!("reading {}", image.display()))?;
    let labels: Vec<LabelRecord> = if label.is_file() { read_labels(label)? } else { Vec::new() };
    Ok(LabeledImage { image: img, labels })
}

fn write_item(out_dir: &Path, name: &str, img: &RasterImage, labels: &[LabelRecord]) -> Result<()> {
    write_image(out_dir.join(format!("{name}.ppm")), img)?;
    write_labels(&out_dir.join(format!("{name}.txt")), labels)?;
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let ops = parse_ops(&args.ops)?;
    let manifest = DatasetManifest::discover(&args.in_dir)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let single: Vec<AugmentOp> = ops.iter().copied().filter(|&o| o != AugmentOp::Mosaic).collect();
    let mut written = 0usize;
    let mut items = Vec::with_capacity(manifest.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let item = read_item(&e.image, &e.label)?;
        let name = stem(&e.image);
        write_item(&args.out_dir, &name, &item.image, &item.labels)?;
        written += 1;
        for (k, op) in single.iter().enumerate() {
            let mut rng = SplitMix64::derive(args.seed, (i * AugmentOp::ALL.len() + k) as u64);
            let out = op.apply(&item.image, &mut rng).expect("single-image op");
            write_item(&args.out_dir, &format!("{name}{}", op.suffix()), &out, &item.labels)?;
            written += 1;
        }
        items.push((name, item));
    }
    if ops.contains(&AugmentOp::Mosaic) {
        for (g, group) in items.chunks_exact(4).enumerate() {
            let size = args
                .mosaic_size
                .unwrap_or_else(|| group[0].1.image.width().max(group[0].1.image.height()));
            let inputs: Vec<LabeledImage> = group.iter().map(|(_, it)| it.clone()).collect();
            let mut rng = SplitMix64::derive(args.seed ^ 0x6d6f_7361_6963, g as u64);
            let m = mosaic(&inputs, size, &mut rng)?;
            write_item(&args.out_dir, &format!("{}{}", group[0].0, AugmentOp::Mosaic.suffix()), &m.image, &m.labels)?;
            written += 1;
        }
    }
    println!("wrote {written} images to {}", args.out_dir.display());
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let cfg = DetectConfig {
        input_size: args.imgsz,
        conf_thresh: args.conf,
        nms_iou: args.nms_iou,
    };
    let s = args.imgsz;
    let px = (0..s * s).flat_map(|i| [(i % 251) as u8, (i / s % 253) as u8, ((i * 7) % 255) as u8]).collect();
    let img = RasterImage::new(s, s, px)?;
    let mut times = Vec::with_capacity(args.iters);
    let mut count = 0;
    for _ in 0..args.iters {
        let start = Instant::now();
        count = detect_image(&model, &img, &cfg)?.len();
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    println!("iters: {}", args.iters);
    println!("detections: {count}");
    println!("mean_ms: {mean:.3}");
    println!("median_ms: {:.3}", percentile(&times, 0.5));
    println!("p95_ms: {:.3}", percentile(&times, 0.95));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Model(cmd) => cmd_model(cmd),
        Command::Detect(args) => cmd_detect(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Bench(args) => cmd_bench(args),
        Command::EmitTrainConfig { out } => {
            match out {
                Some(path) => write_atomic(&path, train_config_text().as_bytes())?,
                None => print!("{}", train_config_text()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

//! Subcommand implementations.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use owlet::anchors::{mean_best_iou, mine_anchors, BoxWH, Metric, DEFAULT_K};
use owlet::checks::{run_suite, SuiteOptions, Target};
use owlet::container::NamedTensors;
use owlet::data_io::{
    format_split, gen_synthetic_scene, image_id, labels_dir, load_image, mean_brightness, parse_detections,
    read_labels_dir, save_image, split_dataset, synthetic_pairs, write_dataset, PairConfig, SceneConfig,
    DEFAULT_PROPORTIONS,
};
use owlet::gradcheck::DEFAULT_EPSILON;
use owlet::metrics::{evaluate, DEFAULT_IOU_THRESHOLD};
use owlet::retinex::{
    enhance_image_with, train_decom, train_enhance, DecomConfig, EnhanceConfig, Illumination, ImagePair,
    LossCoefficients, RetinexModel, TrainConfig, TrainHistory,
};
use owlet::Rng;

use crate::Invalid;

pub const DECOM_FILE: &str = "decom.owt";
pub const ENHANCE_FILE: &str = "enhance.owt";
pub const DECOM_LOSS_FILE: &str = "decom_loss.csv";
pub const ENHANCE_LOSS_FILE: &str = "enhance_loss.csv";
pub const SPLIT_FILE: &str = "split.txt";

const IMAGE_FORMATS: [&str; 2] = ["png", "ppm"];

/// Prints a report line; a closed stdout is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> anyhow::Result<T> {
    value.clone().ok_or_else(|| Invalid(format!("missing required option --{flag}")).into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> anyhow::Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Invalid(msg()).into())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of scenes.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Square image side in pixels [default: 500].
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub min_birds: Option<usize>,
    #[arg(long)]
    pub max_birds: Option<usize>,
    /// Smallest bird extent as a fraction of the image side.
    #[arg(long)]
    pub min_size: Option<f64>,
    /// Largest bird extent as a fraction of the image side.
    #[arg(long)]
    pub max_size: Option<f64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Image format: png or ppm [default: png].
    #[arg(long)]
    pub format: Option<String>,
}

pub fn synth(args: &SynthArgs, seed: u64) -> anyhow::Result<()> {
    let n = required(&args.n, "n")?;
    let out = required(&args.out, "out")?;
    ensure(n > 0, || "--n must be positive".into())?;
    let format = args.format.clone().unwrap_or_else(|| "png".into());
    ensure(IMAGE_FORMATS.contains(&format.as_str()), || {
        format!("unsupported image format {format:?} (expected png or ppm)")
    })?;
    let defaults = SceneConfig::default();
    let size = args.size.unwrap_or(defaults.width);
    let config = SceneConfig {
        width: size,
        height: size,
        min_birds: args.min_birds.unwrap_or(defaults.min_birds),
        max_birds: args.max_birds.unwrap_or(defaults.max_birds),
        min_size: args.min_size.unwrap_or(defaults.min_size),
        max_size: args.max_size.unwrap_or(defaults.max_size),
        num_classes: args.num_classes.unwrap_or(defaults.num_classes),
    };
    config.validate()?;
    let ids: Vec<String> = (0..n).map(image_id).collect();
    let split = split_dataset(&ids, DEFAULT_PROPORTIONS, seed)?;

    let root = Rng::new(seed);
    let scenes = ids
        .iter()
        .enumerate()
        .map(|(i, id)| Ok(gen_synthetic_scene(&mut root.fork(i as u64), &config, id)?.labeled))
        .collect::<owlet::Result<Vec<_>>>()?;
    create_dir(&out)?;
    write_dataset(&out, &scenes, &format)?;
    write_file(&out.join(SPLIT_FILE), format_split(&split))?;
    let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    say!(
        "wrote {n} scenes ({boxes} boxes) to {}; split train/val/test = {}/{}/{}",
        out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorsArgs {
    /// Dataset directory (or its labels/ directory).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of anchors [default: 9].
    #[arg(long)]
    pub k: Option<usize>,
    /// Distance metric: iou or euclidean [default: iou].
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Output anchor file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn anchors(args: &AnchorsArgs, seed: u64) -> anyhow::Result<()> {
    let labels = required(&args.labels, "labels")?;
    let out = required(&args.out, "out")?;
    let k = args.k.unwrap_or(DEFAULT_K);
    let metric = args.metric.unwrap_or_default();
    let boxes: Vec<BoxWH> = read_labels_dir(labels_dir(&labels))?
        .values()
        .flatten()
        .map(BoxWH::from)
        .collect();
    ensure(!boxes.is_empty(), || format!("no labeled boxes under {}", labels.display()))?;
    let set = mine_anchors(&boxes, k, metric, seed)?;
    let quality = mean_best_iou(&boxes, &set.anchors)?;
    write_file(&out, set.to_json())?;
    say!("k\t{}", set.k);
    say!("inertia\t{:.6}", set.inertia);
    say!("mean_best_iou\t{quality:.6}");
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Directory with low/ and normal/ images of equal names; synthetic pairs when absent.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Synthetic pair count [default: 16].
    #[arg(long)]
    pub num_pairs: Option<usize>,
    /// Synthetic pair side in pixels [default: 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Output model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Decomposition epochs [default: 100].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Enhancement epochs [default: same as --epochs].
    #[arg(long)]
    pub enhance_epochs: Option<usize>,
    /// Initial learning rate [default: 0.0032].
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Final learning-rate factor [default: 0.12].
    #[arg(long)]
    pub lrf: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub warmup_momentum: Option<f64>,
    /// Minibatch size [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Warm-up epochs [default: 2].
    #[arg(long)]
    pub warmup_epochs: Option<f64>,
    /// Warm-up bias learning rate [default: 0.05].
    #[arg(long)]
    pub warmup_bias_lr: Option<f64>,
    #[arg(long)]
    pub decom_channels: Option<usize>,
    #[arg(long)]
    pub decom_layers: Option<usize>,
    #[arg(long)]
    pub enhance_scales: Option<usize>,
    #[arg(long)]
    pub enhance_channels: Option<usize>,
    #[arg(long)]
    pub lambda_ir: Option<f64>,
    #[arg(long)]
    pub lambda_is: Option<f64>,
    #[arg(long)]
    pub lambda_g: Option<f64>,
}

fn load_pairs(dir: &Path) -> anyhow::Result<Vec<ImagePair>> {
    let (low_dir, normal_dir) = (dir.join("low"), dir.join("normal"));
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(&low_dir).with_context(|| format!("cannot read {}", low_dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ["png", "ppm", "pnm"].contains(&ext) {
            names.insert(path.file_name().expect("entry has a name").to_owned());
        }
    }
    ensure(!names.is_empty(), || format!("no images under {}", low_dir.display()))?;
    names
        .iter()
        .map(|name| {
            let low = load_image(low_dir.join(name), None)?;
            let normal = load_image(normal_dir.join(name), None)?;
            Ok(ImagePair::new(low, normal)?)
        })
        .collect()
}

/// Splits a combined model container into per-network files.
fn split_container(all: &NamedTensors, prefix: &str) -> NamedTensors {
    let other = if prefix == "decom." { "enhance." } else { "decom." };
    let mut part = NamedTensors::new();
    for (k, v) in &all.metadata {
        if !k.starts_with(other) {
            part.metadata.insert(k.clone(), v.clone());
        }
    }
    for (k, t) in &all.tensors {
        if k.starts_with(prefix) {
            part.tensors.insert(k.clone(), t.clone());
        }
    }
    part
}

/// Reads the two model files written by `train-retinex`.
pub fn load_model(dir: &Path) -> anyhow::Result<RetinexModel> {
    let mut all = NamedTensors::load(dir.join(DECOM_FILE))?;
    let enhance = NamedTensors::load(dir.join(ENHANCE_FILE))?;
    all.metadata.extend(enhance.metadata);
    all.tensors.extend(enhance.tensors);
    Ok(RetinexModel::from_container(&all)?)
}

fn summarize(name: &str, h: &TrainHistory) -> String {
    let s = h.smoothed(10);
    match (s.first(), s.last()) {
        (Some(first), Some(last)) => format!(
            "{name}: {} steps, loss {first:.6} -> {last:.6} (10-step smoothed, ratio {:.3})",
            s.len(),
            last / first
        ),
        _ => format!("{name}: no training steps"),
    }
}

pub fn train_retinex(args: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let out = required(&args.out, "out")?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        lr0: args.lr0.unwrap_or(defaults.lr0),
        lrf: args.lrf.unwrap_or(defaults.lrf),
        momentum: args.momentum.unwrap_or(defaults.momentum),
        warmup_momentum: args.warmup_momentum.unwrap_or(defaults.warmup_momentum),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        warmup_epochs: args.warmup_epochs.unwrap_or(defaults.warmup_epochs),
        warmup_bias_lr: args.warmup_bias_lr.unwrap_or(defaults.warmup_bias_lr),
    };
    let enhance_config = TrainConfig {
        epochs: args.enhance_epochs.unwrap_or(config.epochs),
        ..config
    };
    config.validate()?;
    let d = DecomConfig::default();
    let decom_arch = DecomConfig {
        channels: args.decom_channels.unwrap_or(d.channels),
        hidden_layers: args.decom_layers.unwrap_or(d.hidden_layers),
        ..d
    };
    let e = EnhanceConfig::default();
    let enhance_arch = EnhanceConfig {
        scales: args.enhance_scales.unwrap_or(e.scales),
        channels: args.enhance_channels.unwrap_or(e.channels),
    };
    let c = LossCoefficients::default();
    let coeffs = LossCoefficients {
        ir: args.lambda_ir.unwrap_or(c.ir),
        is: args.lambda_is.unwrap_or(c.is),
        g: args.lambda_g.unwrap_or(c.g),
        ..c
    };
    coeffs.validate()?;

    let pairs = match &args.pairs {
        Some(dir) => load_pairs(dir)?,
        None => {
            let n = args.num_pairs.unwrap_or(16);
            ensure(n > 0, || "--num-pairs must be positive".into())?;
            let pc = PairConfig {
                size: args.size.unwrap_or(PairConfig::default().size),
                ..Default::default()
            };
            synthetic_pairs(n, &pc, seed)?
        }
    };
    for p in &pairs {
        let (_, h, w) = p.low.dims3()?;
        enhance_arch.check_dims(h, w)?;
    }

    let (decom, decom_hist) = train_decom(&pairs, decom_arch, &coeffs, &config, seed)?;
    say!("{}", summarize("decom", &decom_hist));
    let (enhance, enhance_hist) = train_enhance(&pairs, &decom, enhance_arch, coeffs.g, &enhance_config, seed)?;
    say!("{}", summarize("enhance", &enhance_hist));

    let all = RetinexModel {
        decom,
        enhance,
        coeffs,
        seed,
    }
    .to_container();
    create_dir(&out)?;
    split_container(&all, "decom.").save(out.join(DECOM_FILE))?;
    split_container(&all, "enhance.").save(out.join(ENHANCE_FILE))?;
    write_file(&out.join(DECOM_LOSS_FILE), decom_hist.to_csv())?;
    write_file(&out.join(ENHANCE_LOSS_FILE), enhance_hist.to_csv())?;
    say!("wrote models and loss histories to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceArgs {
    /// Low-light input image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory written by train-retinex.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output image.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Multiply by unit illumination, so the output is the reflectance.
    #[arg(long)]
    pub unit_illumination: bool,
}

pub fn enhance(args: &EnhanceArgs) -> anyhow::Result<()> {
    let input = required(&args.input, "input")?;
    let model_dir = required(&args.model, "model")?;
    let out = required(&args.out, "out")?;
    ensure(out != input, || "--out must differ from --input".into())?;
    let model = load_model(&model_dir)?;
    let low = load_image(&input, None)?;
    let illumination = if args.unit_illumination {
        Illumination::Unit
    } else {
        Illumination::Enhanced
    };
    let enhanced = enhance_image_with(&low, &model.decom, &model.enhance, illumination)?;
    save_image(&enhanced, &out)?;
    say!("brightness_before\t{:.6}", mean_brightness(&low));
    say!("brightness_after\t{:.6}", mean_brightness(&enhanced));
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Ground-truth dataset directory (or its labels/ directory).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Detections file, one `image_id class score cx cy w h` per line.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// IoU threshold for a true positive [default: 0.5].
    #[arg(long)]
    pub iou: Option<f64>,
    /// Output report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model name shown in the summary [default: owlet].
    #[arg(long)]
    pub name: Option<String>,
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let gt = required(&args.gt, "gt")?;
    let det_path = required(&args.detections, "detections")?;
    let out = required(&args.out, "out")?;
    let iou = args.iou.unwrap_or(DEFAULT_IOU_THRESHOLD);
    ensure(iou > 0.0 && iou <= 1.0, || format!("--iou must lie in (0, 1], got {iou}"))?;
    let gts = read_labels_dir(labels_dir(&gt))?;
    let text = std::fs::read_to_string(&det_path).with_context(|| format!("cannot read {}", det_path.display()))?;
    let detections = parse_detections(&text).map_err(|e| Invalid(format!("{}: {e}", det_path.display())))?;
    let report = evaluate(&detections, &gts, iou)?;
    write_file(&out, report.to_json())?;
    say!("{}", report.summary(args.name.as_deref().unwrap_or("owlet")).trim_end());
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    /// primitives, cbam, retinex or all [default: all].
    #[arg(long)]
    pub target: Option<String>,
    /// Central-difference step [default: 1e-5].
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    /// Skews the analytic gradient of the named case.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

pub fn gradcheck(args: &GradcheckArgs, seed: u64) -> anyhow::Result<()> {
    let target: Target = args.target.as_deref().unwrap_or("all").parse()?;
    let epsilon = args.epsilon.unwrap_or(DEFAULT_EPSILON);
    ensure(epsilon > 0.0 && epsilon.is_finite(), || {
        format!("--epsilon must be positive, got {epsilon}")
    })?;
    let options = SuiteOptions {
        epsilon,
        seed,
        corrupt: args.corrupt.clone(),
    };
    say!("case\tprobes\tkinks\tmax_rel_error\tresult");
    let entries = run_suite(target, &options, |e| {
        say!(
            "{}\t{}\t{}\t{:.3e}\t{}",
            e.name,
            e.report.probes,
            e.report.kinks,
            e.report.max_rel_error,
            if e.passed() { "PASS" } else { "FAIL" }
        );
    })?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {} of {} cases: {}", failed.len(), entries.len(), failed.join(", "));
    }
    say!("all {} cases passed", entries.len());
    Ok(())
}

//! Command implementations behind the `pyrowatch` binary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pyrowatch::alarm::{self, render_timeline, Scenario};
use pyrowatch::anchors::{self, AnchorSet, CentroidUpdate, Clustering};
use pyrowatch::config::GlobalConfig;
use pyrowatch::dataset::{self, DatasetError, DatasetIndex};
use pyrowatch::detect::DetectionReader;
use pyrowatch::eval::{self, EvalReport};
use pyrowatch::geometry::Detection;

#[derive(Debug, Parser)]
#[command(
    name = "pyrowatch",
    version,
    about = "Fire and smoke detection toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalFlags {
    /// TOML config file with per-module sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for randomized operations (anchors, split).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// IoU threshold for evaluation matching.
    #[arg(long = "iou-thresh", global = true)]
    pub iou_thresh: Option<f64>,
    /// Confidence threshold for detections.
    #[arg(long = "conf-thresh", global = true)]
    pub conf_thresh: Option<f64>,
    /// Temporal evidence window, in frames.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Require an explicit --seed for randomized operations.
    #[arg(long = "strict-repro", global = true)]
    pub strict_repro: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Detect,
    Recognize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quadruple a dataset with brightness, contrast and blur variants.
    Augment {
        in_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        brightness_gain: Option<f64>,
        #[arg(long)]
        contrast_gain: Option<f64>,
        #[arg(long)]
        blur_kernel: Option<u32>,
    },
    /// Estimate anchor boxes by k-means over label sizes.
    Anchors {
        /// Dataset directory or manifest file.
        dataset: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Cluster fire and smoke boxes separately.
        #[arg(long)]
        per_class: bool,
        /// Use medoid instead of mean centroid updates.
        #[arg(long)]
        medoid: bool,
    },
    /// Evaluate detections against ground truth.
    Eval {
        /// Ground-truth dataset directory or manifest file.
        gt_dir: PathBuf,
        /// Detections in the JSONL interchange format, stream = image id.
        detections: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Detect)]
        mode: EvalMode,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Use 11-point interpolated AP.
        #[arg(long)]
        eleven_point: bool,
    },
    /// Replay a detection stream through the temporal and alarm stages.
    Replay {
        scenario: PathBuf,
        /// Write the alarm event log (JSONL) here.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write the per-frame log (JSONL) here.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Stratified train/test split, written as two manifests.
    Split {
        dataset: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// Directory for the manifests; defaults to the current directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(flags: &GlobalFlags) -> Result<GlobalConfig> {
    let mut cfg = match &flags.config {
        Some(path) => GlobalConfig::load(path)?,
        None => GlobalConfig::default(),
    };
    apply_flags(&mut cfg, flags);
    Ok(cfg)
}

fn apply_flags(cfg: &mut GlobalConfig, flags: &GlobalFlags) {
    if let Some(seed) = flags.seed {
        cfg.anchors.seed = seed;
        cfg.split.seed = seed;
    }
    if let Some(v) = flags.iou_thresh {
        cfg.eval.iou_threshold = v;
    }
    if let Some(v) = flags.conf_thresh {
        cfg.eval.confidence_threshold = v;
        cfg.detector.confidence_threshold = v;
    }
    if let Some(v) = flags.window {
        cfg.temporal.window = v;
    }
}

fn require_seed(flags: &GlobalFlags, command: &str) -> Result<()> {
    if flags.strict_repro && flags.seed.is_none() {
        bail!("--strict-repro: `{command}` needs an explicit --seed");
    }
    Ok(())
}

fn load_index(path: &Path) -> Result<DatasetIndex> {
    let index = if path.is_dir() {
        dataset::index_dataset(path)?
    } else {
        dataset::index_manifest(path)?
    };
    if index.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()).into());
    }
    Ok(index)
}

fn write_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Augment {
            brightness_gain,
            contrast_gain,
            blur_kernel,
            ..
        } => {
            if let Some(v) = brightness_gain {
                cfg.augment.brightness_gain = *v;
            }
            if let Some(v) = contrast_gain {
                cfg.augment.contrast_gain = *v;
            }
            if let Some(v) = blur_kernel {
                cfg.augment.blur_kernel = *v;
            }
        }
        Command::Anchors { k, medoid, .. } => {
            require_seed(&cli.global, "anchors")?;
            if let Some(k) = k {
                cfg.anchors.k = *k;
            }
            if *medoid {
                cfg.anchors.update = CentroidUpdate::Medoid;
            }
        }
        Command::Eval { eleven_point, .. } => {
            if *eleven_point {
                cfg.eval.interpolation = eval::ApInterpolation::ElevenPoint;
            }
        }
        Command::Split { fraction, .. } => {
            require_seed(&cli.global, "split")?;
            if let Some(f) = fraction {
                cfg.split.train_fraction = *f;
            }
        }
        Command::Replay { .. } => {}
    }
    cfg.validate()?;

    match &cli.command {
        Command::Augment {
            in_dir, out_dir, ..
        } => cmd_augment(&cfg, in_dir, out_dir, cli.global.format, out),
        Command::Anchors {
            dataset, per_class, ..
        } => cmd_anchors(&cfg, dataset, *per_class, cli.global.format, out),
        Command::Eval {
            gt_dir,
            detections,
            mode,
            report,
            ..
        } => cmd_eval(
            &cfg,
            gt_dir,
            detections,
            *mode,
            report.as_deref(),
            cli.global.format,
            out,
        )
        .map(drop),
        Command::Replay {
            scenario,
            events,
            frames,
        } => cmd_replay(
            &cfg,
            &cli.global,
            scenario,
            events.as_deref(),
            frames.as_deref(),
            cli.global.format,
            out,
        )
        .map(drop),
        Command::Split {
            dataset,
            out: out_dir,
            ..
        } => cmd_split(&cfg, dataset, out_dir, cli.global.format, out).map(drop),
    }
}

pub fn cmd_augment(
    cfg: &GlobalConfig,
    in_dir: &Path,
    out_dir: &Path,
    format: Format,
    out: &mut dyn Write,
) -> Result<()> {
    let index = load_index(in_dir)?;
    let augmented = dataset::augment(&index, &cfg.augment, out_dir)?;
    match format {
        Format::Table => writeln!(out, "{} → {}", index.len(), augmented.len())?,
        Format::Structured => write_json(
            out,
            &serde_json::json!({
                "source": { "name": index.name, "counts": index.counts() },
                "augmented": { "name": augmented.name, "counts": augmented.counts() },
            }),
        )?,
    }
    Ok(())
}

fn write_clustering(out: &mut dyn Write, label: Option<&str>, c: &Clustering) -> Result<()> {
    if let Some(label) = label {
        writeln!(out, "[{label}]")?;
    }
    writeln!(out, "anchors = {}", c.anchors.to_darknet_string())?;
    writeln!(
        out,
        "iterations: {}{}",
        c.iterations,
        if c.converged { "" } else { " (not converged)" }
    )?;
    writeln!(out, "mean IoU: {:.4}", c.mean_iou)?;
    writeln!(
        out,
        "{:>8} {:>8} {:>8} {:>9}",
        "w", "h", "boxes", "mean IoU"
    )?;
    for r in &c.clusters {
        writeln!(
            out,
            "{:>8.1} {:>8.1} {:>8} {:>9.4}",
            r.anchor.w, r.anchor.h, r.members, r.mean_iou
        )?;
    }
    let defaults = AnchorSet::yolov4_default(c.anchors.canvas_px);
    writeln!(
        out,
        "mean anchor area: {:.1} px² (defaults: {:.1} px²)",
        c.anchors.mean_area(),
        defaults.mean_area()
    )?;
    Ok(())
}

pub fn cmd_anchors(
    cfg: &GlobalConfig,
    dataset: &Path,
    per_class: bool,
    format: Format,
    out: &mut dyn Write,
) -> Result<()> {
    let index = load_index(dataset)?;
    if per_class {
        let results = anchors::per_class_anchors(&index, &cfg.anchors);
        if results.is_empty() {
            bail!("{}: no boxes to cluster", dataset.display());
        }
        let mut ok = BTreeMap::new();
        for (class, r) in results {
            let c = r.with_context(|| format!("clustering {class} boxes"))?;
            ok.insert(class.name().to_string(), c);
        }
        match format {
            Format::Table => {
                for (name, c) in &ok {
                    write_clustering(out, Some(name), c)?;
                }
            }
            Format::Structured => write_json(out, &ok)?,
        }
    } else {
        let whs = anchors::collect_wh(&index, cfg.anchors.canvas_px)?;
        let c = anchors::cluster(&whs, &cfg.anchors)?;
        match format {
            Format::Table => write_clustering(out, None, &c)?,
            Format::Structured => write_json(out, &c)?,
        }
    }
    Ok(())
}

/// Reads detections keyed by image id. Ground-truth images without any
/// record get an empty list.
pub fn load_eval_detections(
    path: &Path,
    gt: &eval::GroundTruthSet,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for frame in DetectionReader::new(BufReader::new(file)) {
        let frame = frame.with_context(|| format!("reading {}", path.display()))?;
        dets.entry(frame.stream_id)
            .or_default()
            .extend(frame.detections);
    }
    for id in gt.keys() {
        dets.entry(id.clone()).or_default();
    }
    Ok(dets)
}

pub fn cmd_eval(
    cfg: &GlobalConfig,
    gt_dir: &Path,
    detections: &Path,
    mode: EvalMode,
    report_path: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let index = if gt_dir.is_dir() {
        dataset::index_dataset(gt_dir)?
    } else {
        dataset::index_manifest(gt_dir)?
    };
    let gt = eval::ground_truth_from_index(&index);
    let dets = load_eval_detections(detections, &gt)?;
    let report = eval::evaluate_run(&dets, &gt, &cfg.eval, &index.name)?;
    if let Some(path) = report_path {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
        w.flush()?;
    }
    match (format, mode) {
        (Format::Table, EvalMode::Detect) => {
            write!(out, "{}", eval::render_detection_table(&report))?
        }
        (Format::Table, EvalMode::Recognize) => {
            write!(out, "{}", eval::render_recognition_table(&report))?
        }
        (Format::Structured, EvalMode::Detect) => write_json(out, &report.detection)?,
        (Format::Structured, EvalMode::Recognize) => write_json(out, &report.recognition)?,
    }
    Ok(report)
}

pub fn cmd_replay(
    cfg: &GlobalConfig,
    flags: &GlobalFlags,
    scenario_path: &Path,
    events_path: Option<&Path>,
    frames_path: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Result<alarm::ReplayOutput> {
    let (scenario, source) = Scenario::load(scenario_path)?;
    let mut cfg = cfg.clone();
    if let Some(d) = scenario.detector {
        cfg.detector = d;
    }
    if let Some(t) = scenario.temporal {
        cfg.temporal = t;
    }
    if let Some(a) = scenario.alarm {
        cfg.alarm = a;
    }
    apply_flags(&mut cfg, flags);
    cfg.validate()?;

    let file = File::open(&source).with_context(|| format!("opening {}", source.display()))?;
    let result = alarm::replay(
        BufReader::new(file),
        &cfg.detector,
        &cfg.temporal,
        &cfg.alarm,
        &scenario.reference,
    )?;
    if let Some(path) = events_path {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        alarm::write_event_log(&mut w, &result.events)?;
        w.flush()?;
    }
    if let Some(path) = frames_path {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        alarm::write_frame_log(&mut w, &result.frames)?;
        w.flush()?;
    }
    match format {
        Format::Table => write!(out, "{}", render_timeline(&result.timeline))?,
        Format::Structured => write_json(out, &result.timeline)?,
    }
    Ok(result)
}

pub fn cmd_split(
    cfg: &GlobalConfig,
    dataset: &Path,
    out_dir: &Path,
    format: Format,
    out: &mut dyn Write,
) -> Result<(PathBuf, PathBuf)> {
    let index = load_index(dataset)?;
    let (train, test) = dataset::split(&index, &cfg.split)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let train_path = out_dir.join(format!("{}.txt", train.name));
    let test_path = out_dir.join(format!("{}.txt", test.name));
    dataset::write_manifest(&train, &train_path)?;
    dataset::write_manifest(&test, &test_path)?;
    match format {
        Format::Table => {
            writeln!(out, "train: {} ({})", train.len(), train_path.display())?;
            writeln!(out, "test: {} ({})", test.len(), test_path.display())?;
        }
        Format::Structured => write_json(
            out,
            &serde_json::json!({
                "train": { "manifest": train_path, "counts": train.counts() },
                "test": { "manifest": test_path, "counts": test.counts() },
            }),
        )?,
    }
    Ok((train_path, test_path))
}

//! Command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{load_annotations, load_detections, save_detections, Dataset, ANNOTATIONS_FILE};
use crate::detection::{self, BackendOptions, BackendRegistry, DetectorBackend, ReferenceDetector};
use crate::evaluation::{coco_thresholds, evaluate, format_table, report_by_angle, report_json};
use crate::pipeline::{detect_dataset, DetectConfig};
use crate::rectification::{rectify_frame_detailed, write_debug_tile, RectifyConfig};
use crate::segmentation::SegmentationConfig;
use crate::synth::{self, Background, SweepConfig, TEMPLATES_DIR};

pub const DETECTIONS_FILE: &str = "detections.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const TILES_DIR: &str = "tiles";

#[derive(Debug, Parser)]
#[command(name = "planar-rect", version, about = "Depth-guided planar rectification for object detection")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment planes and write rectified tiles with homography sidecars.
    Rectify(RectifyArgs),
    /// Run the detection pipeline and write final detections.
    Detect(DetectArgs),
    /// Score detections against dataset annotations.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Serve the detector protocol on stdin/stdout with the reference detector.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GeometryArgs {
    /// Virtual camera distance from the plane, meters.
    #[arg(long, default_value_t = 1.2)]
    pub standoff: f64,
    #[arg(long, default_value_t = 1)]
    pub max_planes: usize,
    /// Stop extracting planes once fewer than this fraction of points remain.
    #[arg(long, default_value_t = 0.10)]
    pub stop_fraction: f64,
    /// RANSAC inlier distance, meters.
    #[arg(long, default_value_t = 0.02)]
    pub inlier_threshold: f64,
    /// Tile height and width, e.g. 720x1280; defaults to the input size.
    #[arg(long, value_parser = parse_size)]
    pub tile_size: Option<(u32, u32)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for frame-level parallelism.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl GeometryArgs {
    pub fn rectify_config(&self) -> RectifyConfig {
        RectifyConfig {
            segmentation: SegmentationConfig {
                max_planes: self.max_planes,
                stop_fraction: self.stop_fraction,
                inlier_threshold: self.inlier_threshold,
                rng_seed: self.seed,
                ..SegmentationConfig::default()
            },
            standoff: self.standoff,
            tile_size: self.tile_size,
            ..RectifyConfig::default()
        }
    }
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HEIGHTxWIDTH")?;
    let h: u32 = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    let w: u32 = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("tile size must be positive".into());
    }
    Ok((h, w))
}

#[derive(Debug, Args)]
pub struct RectifyArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// `reference` or a command line that speaks the detector protocol.
    #[arg(long, default_value = "reference")]
    pub backend: String,
    /// Template directory for the reference backend; defaults to <dataset>/templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Detect on the unrectified images.
    #[arg(long)]
    pub baseline: bool,
    /// Add unrectified detections to the final NMS pool.
    #[arg(long, conflicts_with = "baseline")]
    pub merge_baseline: bool,
    #[arg(long, default_value_t = detection::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    /// Correlation threshold of the reference detector.
    #[arg(long, default_value_t = detection::DEFAULT_NCC_THRESHOLD)]
    pub threshold: f64,
    /// Per-request detector deadline, seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub detections: PathBuf,
    pub dataset: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackgroundArg {
    Flat,
    Checker,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Yaw angles in degrees, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = synth::DEFAULT_ANGLES)]
    pub angles: Vec<f64>,
    /// Distances in meters, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = synth::DEFAULT_DISTANCES)]
    pub distances: Vec<f64>,
    #[arg(long, default_value_t = synth::DEFAULT_NUM_CLASSES)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = BackgroundArg::Flat)]
    pub background: BackgroundArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    pub templates: PathBuf,
    #[arg(long, default_value_t = detection::DEFAULT_NCC_THRESHOLD)]
    pub threshold: f64,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Rectify(a) => cmd_rectify(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Worker(a) => cmd_worker(&a),
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().context("cannot build thread pool")
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
}

fn print_failures(failures: &[(String, String)]) {
    if failures.is_empty() {
        return;
    }
    println!("{} frame(s) failed:", failures.len());
    for (id, why) in failures {
        println!("  {id}: {why}");
    }
}

pub fn cmd_rectify(a: &RectifyArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let cfg = a.geometry.rectify_config();
    let tiles_dir = a.out.join(TILES_DIR);
    create_dir(&tiles_dir)?;
    let pool = thread_pool(a.geometry.jobs)?;
    let outcomes: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        ds.frame_ids
            .par_iter()
            .map(|id| -> Result<Result<(usize, usize), String>> {
                let frame = ds.load_frame(id)?;
                match rectify_frame_detailed(&frame, &cfg) {
                    Ok(r) => {
                        for t in &r.tiles {
                            write_debug_tile(&tiles_dir, id, t)?;
                        }
                        Ok(Ok((r.planes.len(), r.tiles.len())))
                    }
                    Err(e) => Ok(Err(e.to_string())),
                }
            })
            .collect()
    });
    let mut failures = Vec::new();
    let mut stdout = io::stdout().lock();
    for (id, outcome) in ds.frame_ids.iter().zip(outcomes) {
        match outcome? {
            Ok((planes, tiles)) => writeln!(stdout, "{id}: planes={planes} tiles={tiles}")?,
            Err(why) => {
                log::warn!("frame {id}: {why}");
                writeln!(stdout, "{id}: failed ({why})")?;
                failures.push((id.clone(), why));
            }
        }
    }
    drop(stdout);
    print_failures(&failures);
    Ok(())
}

fn make_backend(a: &DetectArgs) -> Result<Box<dyn DetectorBackend>> {
    let timeout = Duration::from_secs_f64(a.timeout);
    let registry = BackendRegistry::with_builtins();
    let opts = if a.backend == "reference" {
        let dir = a.templates.clone().unwrap_or_else(|| a.dataset.join(TEMPLATES_DIR));
        if !dir.is_dir() {
            bail!("the reference backend needs templates: {} does not exist (use --templates)", dir.display());
        }
        BackendOptions { templates_dir: Some(dir), threshold: a.threshold, timeout, ..BackendOptions::default() }
    } else {
        let command =
            shlex::split(&a.backend).ok_or_else(|| anyhow!("cannot parse backend command {:?}", a.backend))?;
        BackendOptions { command, threshold: a.threshold, timeout, ..BackendOptions::default() }
    };
    let name = if a.backend == "reference" { "reference" } else { "subprocess" };
    Ok(registry.create(name, &opts)?)
}

pub fn cmd_detect(a: &DetectArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.nms_iou) {
        bail!("--nms-iou must lie in [0, 1]");
    }
    let ds = Dataset::open(&a.dataset)?;
    let backend = Mutex::new(make_backend(a)?);
    let cfg = DetectConfig {
        rectify: a.geometry.rectify_config(),
        nms_iou: a.nms_iou,
        baseline: a.baseline,
        merge_baseline: a.merge_baseline,
    };
    let pool = thread_pool(a.geometry.jobs)?;
    let result = pool.install(|| detect_dataset(&ds, &cfg, &backend))?;
    create_dir(&a.out)?;
    let path = a.out.join(DETECTIONS_FILE);
    save_detections(&path, &result.frames)?;
    let total: usize = result.frames.iter().map(|f| f.detections.len()).sum();
    println!("{} frames, {total} detections -> {}", result.frames.len(), path.display());
    print_failures(&result.failures);
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let preds = load_detections(&a.detections)?;
    let gts = load_annotations(&a.dataset.join(ANNOTATIONS_FILE))?;
    let thresholds = coco_thresholds();
    let overall = evaluate(&preds, &gts, &thresholds)?;
    let by_angle = if gts.frames.iter().all(|f| f.meta.angle_deg.is_some()) && !gts.frames.is_empty() {
        report_by_angle(&preds, &gts, &thresholds)?
    } else {
        Vec::new()
    };
    let table = format_table(&overall, &by_angle);
    print!("{table}");
    create_dir(&a.out)?;
    let p = a.out.join(REPORT_TABLE);
    fs::write(&p, &table).with_context(|| format!("cannot write {}", p.display()))?;
    let p = a.out.join(REPORT_JSON);
    fs::write(&p, report_json(&overall, &by_angle)).with_context(|| format!("cannot write {}", p.display()))?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SweepConfig {
        angles_deg: a.angles.clone(),
        distances_m: a.distances.clone(),
        num_classes: a.classes,
        ..SweepConfig::default()
    };
    cfg.base.seed = a.seed;
    if let BackgroundArg::Checker = a.background {
        cfg.base.background = Background::Checker { a: [60, 60, 60], b: [150, 150, 150], cell_px: 32 };
    }
    create_dir(&a.out)?;
    let set = synth::sweep(&cfg, &a.out)?;
    println!("{} frames -> {}", set.frames.len(), a.out.display());
    Ok(())
}

pub fn cmd_worker(a: &WorkerArgs) -> Result<()> {
    let mut detector = ReferenceDetector::new(detection::load_templates(&a.templates)?, a.threshold)?;
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    detection::serve(stdin, stdout, &mut detector)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_defaults() {
        let cli = Cli::try_parse_from(["planar-rect", "detect", "data"]).unwrap();
        let Command::Detect(d) = cli.command else { panic!("expected detect") };
        assert_eq!(d.geometry.standoff, 1.2);
        assert_eq!(d.geometry.max_planes, 1);
        assert_eq!(d.geometry.stop_fraction, 0.10);
        assert_eq!(d.geometry.inlier_threshold, 0.02);
        assert_eq!(d.nms_iou, 0.5);
        assert_eq!(d.backend, "reference");
        assert_eq!(d.geometry.jobs, 1);
        assert!(!d.baseline && !d.merge_baseline);
    }

    #[test]
    fn synth_grid_flags() {
        let cli = Cli::try_parse_from(["planar-rect", "synth", "--angles", "-75,0,60", "--distances", "1.2"]).unwrap();
        let Command::Synth(s) = cli.command else { panic!("expected synth") };
        assert_eq!(s.angles, vec![-75.0, 0.0, 60.0]);
        assert_eq!(s.distances, vec![1.2]);
        let cli = Cli::try_parse_from(["planar-rect", "synth"]).unwrap();
        let Command::Synth(s) = cli.command else { panic!("expected synth") };
        assert_eq!(s.angles.len() * s.distances.len(), 27);
    }

    #[test]
    fn tile_size_parsing() {
        assert_eq!(parse_size("720x1280"), Ok((720, 1280)));
        assert!(parse_size("0x10").is_err());
        assert!(parse_size("720").is_err());
    }
}

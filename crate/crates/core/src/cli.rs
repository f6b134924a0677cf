//! Command-line pipeline driver.
//!
//! Every library stage is a subcommand (`ingest-osm`, `crawl`, `match`,
//! `label`, `crop`, `split`, `balance`, `stats`, `eval`, `recommend`,
//! `synth`), and `run-all` chains the labeling stages over one output
//! directory using the same stage functions, so its artifacts are
//! byte-identical to running the stages by hand with the same flags.
//!
//! Each stage prints exactly one JSON summary line to stdout; tables and
//! logs go to stderr. Exit codes: 0 success, 2 bad configuration, 3 missing
//! input, 4 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasetio::{
    balance_manifest, file_digest, read_manifest, split_by_longitude, stats, write_manifest,
    Manifest, ManifestHeader,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate, load_predictions, recommend, RecommendationKind, DEFAULT_DECISION_THRESHOLD,
    DEFAULT_ONEWAY_PROB, DEFAULT_SPEED_DELTA_MPH,
};
use crate::geo::{GeoBounds, GeoPoint, PlanePoint, Projector};
use crate::labelgen::{
    label_all, stream_rng, Handedness, JunctionIndex, LabelOptions, LabeledSample, Split,
};
use crate::osmnet::{
    default_allowlist, find_junctions, parse_osm_path, write_osm, JunctionMode, RoadNetwork,
    TravelDirections,
};
use crate::panograph::{
    bfs_crawl, load_panos, save_panos, DirPanoProvider, MemPanoProvider, PanoMeta, PanoProvider,
};
use crate::panoimage::unwarp;
use crate::roadmatch::{
    filter_offroad, match_panos, MatchResult, Side, SpatialIndex, ThresholdConfig,
};
use crate::synthkit::{gen_city, gen_panos, render_pano, CityParams, PanoParams};

/// Spatial-index cell size used by the matching stage, meters. Roughly the
/// scale of a city block: big enough that a query touches a handful of
/// cells, small enough that each cell holds a handful of segments.
const MATCH_CELL_SIZE_M: f64 = 50.0;

/// Parse arguments, run the selected stage, exit non-zero on failure.
pub fn run() {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .try_init();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "streetlabel",
    version,
    about = "Road-attribute labeling pipeline for street-level panoramas",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an OSM extract, keep drawn streets, write the road network.
    IngestOsm(IngestArgs),
    /// Breadth-first crawl of the panorama graph from a seed panorama.
    Crawl(CrawlArgs),
    /// Snap each panorama to the closest road segment; drop off-road ones.
    Match(MatchArgs),
    /// Generate labeled crop specifications and write the manifest.
    Label(LabelArgs),
    /// Render every manifest crop from equirectangular panorama images.
    Crop(CropArgs),
    /// Assign train/test by the panorama-longitude quantile boundary.
    Split(SplitArgs),
    /// Duplicate minority-class flag samples until classes balance.
    Balance(BalanceArgs),
    /// Per-task sample counts and label distributions of a manifest.
    Stats(StatsArgs),
    /// Score model predictions against manifest ground truth.
    Eval(EvalArgs),
    /// Turn confident model/map disagreements into review records.
    Recommend(RecommendArgs),
    /// Generate a synthetic grid city: map, panoramas, ground truth.
    Synth(SynthArgs),
    /// Run ingest, match, label, split, balance, and stats in one pass.
    RunAll(RunAllArgs),
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        init_workers(n)?;
    }
    match cli.command {
        Command::IngestOsm(a) => print_summary(stage_ingest(&a.input, &a.output)?),
        Command::Crawl(a) => {
            let bbox = a.bbox.as_deref().map(parse_bbox).transpose()?;
            print_summary(stage_crawl(
                &a.panos,
                &a.seed_pano,
                bbox.as_ref(),
                a.limit.unwrap_or(usize::MAX),
                &a.output,
            )?);
        }
        Command::Match(a) => {
            let cfg = a.thresholds.resolve()?;
            print_summary(stage_match(&a.map, &a.panos, &a.output, &cfg)?);
        }
        Command::Label(a) => {
            let cfg = a.thresholds.resolve()?;
            let opts = a.options.to_label_options();
            print_summary(stage_label(
                &a.map, &a.panos, &a.matches, &a.output, &cfg, &opts,
            )?);
        }
        Command::Crop(a) => print_summary(stage_crop(
            &a.manifest,
            &a.panos,
            &a.pano_images,
            &a.output_dir,
        )?),
        Command::Split(a) => print_summary(stage_split(
            &a.manifest,
            &a.panos,
            &a.output,
            &a.thresholds,
        )?),
        Command::Balance(a) => print_summary(stage_balance(&a.manifest, &a.output, a.seed)?),
        Command::Stats(a) => print_summary(stage_stats(&a.manifest)?),
        Command::Eval(a) => print_summary(stage_eval(
            &a.manifest,
            &a.predictions,
            a.decision_threshold,
        )?),
        Command::Recommend(a) => print_summary(stage_recommend(
            &a.manifest,
            &a.predictions,
            &a.output,
            a.speed_delta_mph,
            a.oneway_prob,
        )?),
        Command::Synth(a) => print_summary(stage_synth(&a)?),
        Command::RunAll(a) => run_all(&a)?,
    }
    Ok(())
}

fn print_summary(v: serde_json::Value) {
    println!("{v}");
}

fn init_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot build a {n}-thread worker pool: {e}")))
}

// ---------------------------------------------------------------------------
// Shared argument blocks

/// Decision thresholds: defaults, overridden by `--config FILE`, overridden
/// by individual flags.
#[derive(Args, Debug, Clone, Default)]
struct ThresholdArgs {
    /// Threshold file: one `key = value` per line, `#` starts a comment.
    /// Keys are the flag names below with underscores.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Panoramas farther than this from every road are dropped (m).
    #[arg(long, value_name = "M")]
    offroad_max_m: Option<f64>,
    /// Junction distance at or below which intersection = yes (m).
    #[arg(long, value_name = "M")]
    inter_pos_max_m: Option<f64>,
    /// Junction distance at or above which intersection = no (m).
    #[arg(long, value_name = "M")]
    inter_neg_min_m: Option<f64>,
    /// Angular tolerance for a crop to count as facing driveable road (deg).
    #[arg(long, value_name = "DEG")]
    driveable_tol_deg: Option<f64>,
    /// Half-range of random heading-offset crops (deg).
    #[arg(long, value_name = "DEG")]
    heading_max_offset_deg: Option<f64>,
    /// No heading sample when a junction is this close or closer (m).
    #[arg(long, value_name = "M")]
    heading_excl_m: Option<f64>,
    /// Bike-lane crops look this far toward the curb side (deg).
    #[arg(long, value_name = "DEG")]
    bike_crop_offset_deg: Option<f64>,
    /// Wrong-way crop jitter half-range around each direction (deg).
    #[arg(long, value_name = "DEG")]
    wrongway_tol_deg: Option<f64>,
    /// Horizontal field of view of perspective crops (deg).
    #[arg(long, value_name = "DEG")]
    crop_fov_deg: Option<f64>,
    /// Crop size in pixels (square).
    #[arg(long, value_name = "PX")]
    crop_px: Option<u32>,
    /// Fraction of panoramas on the training side of the split.
    #[arg(long, value_name = "F")]
    train_fraction: Option<f64>,
}

impl ThresholdArgs {
    /// Library defaults + config file + flags.
    fn resolve(&self) -> Result<ThresholdConfig> {
        self.resolve_from(ThresholdConfig::default())
    }

    /// `base` + config file + flags. Post-labeling stages pass the manifest
    /// header's config as the base so a run keeps its own thresholds.
    fn resolve_from(&self, mut cfg: ThresholdConfig) -> Result<ThresholdConfig> {
        if let Some(path) = &self.config {
            apply_config_file(&mut cfg, path)?;
        }
        let f = [
            (&self.offroad_max_m, &mut cfg.offroad_max_m),
            (&self.inter_pos_max_m, &mut cfg.inter_pos_max_m),
            (&self.inter_neg_min_m, &mut cfg.inter_neg_min_m),
            (&self.driveable_tol_deg, &mut cfg.driveable_tol_deg),
            (&self.heading_max_offset_deg, &mut cfg.heading_max_offset_deg),
            (&self.heading_excl_m, &mut cfg.heading_excl_m),
            (&self.bike_crop_offset_deg, &mut cfg.bike_crop_offset_deg),
            (&self.wrongway_tol_deg, &mut cfg.wrongway_tol_deg),
            (&self.crop_fov_deg, &mut cfg.crop_fov_deg),
            (&self.train_fraction, &mut cfg.train_fraction),
        ];
        for (flag, field) in f {
            if let Some(v) = flag {
                *field = *v;
            }
        }
        if let Some(px) = self.crop_px {
            cfg.crop_px = px;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_config_file(cfg: &mut ThresholdConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Validation(format!(
                "{}:{line_no}: expected `key = value`, got {raw_line:?}",
                path.display()
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad_num = || {
            Error::Validation(format!(
                "{}:{line_no}: `{key}` wants a number, got {value:?}",
                path.display()
            ))
        };
        match key {
            "offroad_max_m" => cfg.offroad_max_m = value.parse().map_err(|_| bad_num())?,
            "inter_pos_max_m" => cfg.inter_pos_max_m = value.parse().map_err(|_| bad_num())?,
            "inter_neg_min_m" => cfg.inter_neg_min_m = value.parse().map_err(|_| bad_num())?,
            "driveable_tol_deg" => cfg.driveable_tol_deg = value.parse().map_err(|_| bad_num())?,
            "heading_max_offset_deg" => {
                cfg.heading_max_offset_deg = value.parse().map_err(|_| bad_num())?
            }
            "heading_excl_m" => cfg.heading_excl_m = value.parse().map_err(|_| bad_num())?,
            "bike_crop_offset_deg" => {
                cfg.bike_crop_offset_deg = value.parse().map_err(|_| bad_num())?
            }
            "wrongway_tol_deg" => cfg.wrongway_tol_deg = value.parse().map_err(|_| bad_num())?,
            "crop_fov_deg" => cfg.crop_fov_deg = value.parse().map_err(|_| bad_num())?,
            "crop_px" => cfg.crop_px = value.parse().map_err(|_| bad_num())?,
            "train_fraction" => cfg.train_fraction = value.parse().map_err(|_| bad_num())?,
            other => {
                return Err(Error::Validation(format!(
                    "{}:{line_no}: unknown threshold key `{other}`",
                    path.display()
                )))
            }
        }
    }
    Ok(())
}

/// Sampling knobs shared by `label` and `run-all`.
#[derive(Args, Debug, Clone)]
struct SampleArgs {
    /// Seed for every random draw in labeling (and balancing under run-all).
    #[arg(long, default_value_t = 42, value_name = "N")]
    seed: u64,
    /// Random view directions per panorama for the driveable task.
    #[arg(long, default_value_t = 4, value_name = "N")]
    driveable_crops: u32,
    /// Draw multiplier for the heading-angle and wrong-way tasks.
    #[arg(long, default_value_t = 1, value_name = "N")]
    repeat: u32,
    /// Left-hand traffic: bike crops look left, `cycleway:left` applies.
    #[arg(long)]
    left_handed: bool,
}

impl SampleArgs {
    fn to_label_options(&self) -> LabelOptions {
        LabelOptions {
            seed: self.seed,
            driveable_crops: self.driveable_crops,
            repeat: self.repeat,
            handedness: if self.left_handed {
                Handedness::Left
            } else {
                Handedness::Right
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Per-command argument structs

#[derive(Args, Debug)]
struct IngestArgs {
    /// OSM XML extract, `.osm` or `.osm.gz`.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Destination for the filtered road network, `.osm` or `.osm.gz`.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CrawlArgs {
    /// Panorama metadata JSONL (the full graph to crawl within).
    #[arg(long, value_name = "FILE")]
    panos: PathBuf,
    /// Panorama id to start from.
    #[arg(long, value_name = "ID")]
    seed_pano: String,
    /// Keep only panoramas inside `min-lat,min-lon,max-lat,max-lon`.
    #[arg(long, value_name = "BBOX")]
    bbox: Option<String>,
    /// Stop after visiting this many panoramas.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Destination JSONL for the crawled metadata.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Road network, `.osm` or `.osm.gz`.
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Panorama metadata JSONL.
    #[arg(long, value_name = "FILE")]
    panos: PathBuf,
    /// Destination JSONL, one record per on-road panorama.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Road network, `.osm` or `.osm.gz`.
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Panorama metadata JSONL.
    #[arg(long, value_name = "FILE")]
    panos: PathBuf,
    /// Match records from the `match` stage.
    #[arg(long, value_name = "FILE")]
    matches: PathBuf,
    /// Destination manifest JSONL.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    #[command(flatten)]
    options: SampleArgs,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args, Debug)]
struct CropArgs {
    /// Manifest JSONL naming the crops to render.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Panorama metadata JSONL (for capture azimuths).
    #[arg(long, value_name = "FILE")]
    panos: PathBuf,
    /// Directory of equirectangular images named `<pano-id>.png`.
    #[arg(long, value_name = "DIR")]
    pano_images: PathBuf,
    /// Directory to write `<sample-id>.png` crops into.
    #[arg(long, value_name = "DIR")]
    output_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Manifest JSONL to split.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Panorama metadata JSONL (for longitudes).
    #[arg(long, value_name = "FILE")]
    panos: PathBuf,
    /// Destination manifest JSONL with train/test assigned.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args, Debug)]
struct BalanceArgs {
    /// Manifest JSONL to balance (usually already split).
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Destination manifest JSONL.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Seed for duplicate selection; defaults to the manifest's own seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Manifest JSONL to describe.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Manifest JSONL with ground-truth labels.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Prediction JSONL: sample_id, task, value.
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,
    /// Probability at or above which a flag prediction counts as positive.
    #[arg(long, default_value_t = DEFAULT_DECISION_THRESHOLD, value_name = "P")]
    decision_threshold: f64,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    /// Manifest JSONL with ground-truth labels.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Prediction JSONL: sample_id, task, value.
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,
    /// Destination JSONL for review recommendations.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Flag speed limits when model and map differ by at least this (mph).
    #[arg(long, default_value_t = DEFAULT_SPEED_DELTA_MPH, value_name = "MPH")]
    speed_delta_mph: f64,
    /// Flag two-way roads the model calls one-way with at least this
    /// probability.
    #[arg(long, default_value_t = DEFAULT_ONEWAY_PROB, value_name = "P")]
    oneway_prob: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory for city.osm, panos.jsonl, truth.json (and images/).
    #[arg(long, value_name = "DIR")]
    output_dir: PathBuf,
    /// East-west streets.
    #[arg(long, default_value_t = 4, value_name = "N")]
    rows: u32,
    /// North-south streets.
    #[arg(long, default_value_t = 4, value_name = "N")]
    cols: u32,
    /// Block edge length, meters.
    #[arg(long, default_value_t = 100.0, value_name = "M")]
    block_m: f64,
    /// Probability that a street is one-way.
    #[arg(long, default_value_t = 0.3, value_name = "F")]
    oneway_fraction: f64,
    /// Comma-separated `maxspeed` palette, e.g. "25 mph,30 mph,40".
    #[arg(long, default_value = "25 mph,30 mph,40,50 mph", value_name = "LIST")]
    speed_palette: String,
    /// Comma-separated `lanes` palette, e.g. "1,2,3".
    #[arg(long, default_value = "1,2,3", value_name = "LIST")]
    lanes_palette: String,
    /// Probability that a street gets a bike lane.
    #[arg(long, default_value_t = 0.3, value_name = "F")]
    bike_fraction: f64,
    /// Seed for attribute draws and capture noise.
    #[arg(long, default_value_t = 7, value_name = "N")]
    seed: u64,
    /// Latitude the city is anchored at.
    #[arg(long, default_value_t = 37.4, value_name = "DEG")]
    center_lat: f64,
    /// Longitude the city is anchored at.
    #[arg(long, default_value_t = -122.1, value_name = "DEG")]
    center_lon: f64,
    /// Add a diagonal avenue across the first block.
    #[arg(long)]
    diagonal: bool,
    /// Distance between consecutive panoramas along a street, meters.
    #[arg(long, default_value_t = 10.0, value_name = "M")]
    spacing_m: f64,
    /// Capture offset to the right of the travel direction, meters.
    #[arg(long, default_value_t = 3.0, value_name = "M")]
    lateral_offset_m: f64,
    /// Per-axis uniform positional noise half-range, meters.
    #[arg(long, default_value_t = 0.0, value_name = "M")]
    noise_m: f64,
    /// Uniform vehicle-azimuth noise half-range, degrees.
    #[arg(long, default_value_t = 5.0, value_name = "DEG")]
    azimuth_noise_deg: f64,
    /// Off-road plaza panoramas to scatter inside blocks.
    #[arg(long, default_value_t = 2, value_name = "N")]
    plazas: u32,
    /// Also render equirectangular images into images/<pano-id>.png.
    #[arg(long)]
    render: bool,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args, Debug)]
struct RunAllArgs {
    /// OSM XML extract, `.osm` or `.osm.gz`.
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Panorama metadata JSONL.
    #[arg(long, value_name = "FILE")]
    panos: PathBuf,
    /// Directory for all intermediate and final artifacts.
    #[arg(long, value_name = "DIR")]
    output_dir: PathBuf,
    /// Crawl the panorama graph from this id before matching.
    #[arg(long, value_name = "ID")]
    seed_pano: Option<String>,
    /// Stop the crawl after visiting this many panoramas.
    #[arg(long, value_name = "N")]
    crawl_limit: Option<usize>,
    /// Directory of equirectangular images; when given, crops are rendered.
    #[arg(long, value_name = "DIR")]
    pano_images: Option<PathBuf>,
    #[command(flatten)]
    options: SampleArgs,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

// ---------------------------------------------------------------------------
// Match-record wire format

/// One on-road panorama/segment assignment as written by the `match` stage.
/// Plane points are flattened to plain fields; enums travel as strings.
/// JSON floats round-trip exactly, so `label` sees the matcher's numbers
/// bit for bit.
#[derive(Debug, Serialize, Deserialize)]
struct MatchRecord {
    pano_id: String,
    way_id: i64,
    segment_index: usize,
    distance_m: f64,
    t: f64,
    closest_x: f64,
    closest_y: f64,
    pano_x: f64,
    pano_y: f64,
    forward_heading_deg: f64,
    side: String,
    travel: String,
}

impl MatchRecord {
    fn from_match(m: &MatchResult) -> MatchRecord {
        MatchRecord {
            pano_id: m.pano_id.clone(),
            way_id: m.way_id,
            segment_index: m.segment_index,
            distance_m: m.distance_m,
            t: m.t,
            closest_x: m.closest.x,
            closest_y: m.closest.y,
            pano_x: m.pano_plane.x,
            pano_y: m.pano_plane.y,
            forward_heading_deg: m.forward_heading_deg,
            side: match m.side {
                Side::Left => "left".into(),
                Side::Right => "right".into(),
            },
            travel: m.travel.as_str().into(),
        }
    }

    fn into_match(self, path: &Path, line: usize) -> Result<MatchResult> {
        let bad = |what: &str, got: &str| Error::JsonLine {
            path: path.display().to_string(),
            line,
            message: format!("unknown {what} {got:?}"),
        };
        let side = match self.side.as_str() {
            "left" => Side::Left,
            "right" => Side::Right,
            other => return Err(bad("side", other)),
        };
        let travel = match self.travel.as_str() {
            "both" => TravelDirections::Both,
            "forward" => TravelDirections::ForwardOnly,
            "backward" => TravelDirections::BackwardOnly,
            other => return Err(bad("travel direction", other)),
        };
        Ok(MatchResult {
            pano_id: self.pano_id,
            way_id: self.way_id,
            segment_index: self.segment_index,
            distance_m: self.distance_m,
            t: self.t,
            closest: PlanePoint::new(self.closest_x, self.closest_y),
            pano_plane: PlanePoint::new(self.pano_x, self.pano_y),
            forward_heading_deg: self.forward_heading_deg,
            side,
            travel,
        })
    }
}

fn read_matches(path: &Path) -> Result<Vec<MatchResult>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MatchRecord =
            serde_json::from_str(&line).map_err(|e| Error::JsonLine {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        out.push(record.into_match(path, line_no)?);
    }
    Ok(out)
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Stages. Each loads its inputs, writes its artifact, and returns the JSON
// summary; `run-all` reuses them verbatim so chained and manual runs agree.

fn stage_ingest(input: &Path, output: &Path) -> Result<serde_json::Value> {
    let (raw, parse_stats) = parse_osm_path(input)?;
    let (roads, removed) = raw.filter_roads(&default_allowlist());
    write_osm(&roads, output)?;
    Ok(json!({
        "stage": "ingest-osm",
        "nodes": roads.node_count(),
        "ways": roads.way_count(),
        "segments": roads.segment_count(),
        "non_road_ways_removed": removed,
        "unparseable_ways_dropped": parse_stats.dropped_ways,
        "node_refs_collapsed": parse_stats.collapsed_node_refs,
        "output": output.display().to_string(),
    }))
}

fn stage_crawl(
    panos: &Path,
    seed_pano: &str,
    bbox: Option<&GeoBounds>,
    limit: usize,
    output: &Path,
) -> Result<serde_json::Value> {
    let metas = load_panos(panos)?;
    let available = metas.len();
    let provider = MemPanoProvider::from_metas(metas);
    let found = bfs_crawl(&provider, seed_pano, bbox, limit)?;
    save_panos(&found, output)?;
    Ok(json!({
        "stage": "crawl",
        "available": available,
        "visited": found.len(),
        "seed_pano": seed_pano,
        "output": output.display().to_string(),
    }))
}

/// Parse a map, keep roads, and anchor the working plane at the center of
/// the road bounding box. Every stage that needs plane coordinates goes
/// through here so they all agree on the projection.
fn load_road_plane(map: &Path) -> Result<(RoadNetwork, Projector)> {
    let (raw, _) = parse_osm_path(map)?;
    let (roads, _) = raw.filter_roads(&default_allowlist());
    let bounds = roads.geo_bounds().ok_or_else(|| {
        Error::Data(format!(
            "{}: no road geometry to anchor a projection on",
            map.display()
        ))
    })?;
    let projector = Projector::new(bounds.center())?;
    Ok((roads, projector))
}

fn stage_match(
    map: &Path,
    panos: &Path,
    output: &Path,
    cfg: &ThresholdConfig,
) -> Result<serde_json::Value> {
    let (roads, projector) = load_road_plane(map)?;
    let index = SpatialIndex::build(&roads, &projector, MATCH_CELL_SIZE_M)?;
    let metas = load_panos(panos)?;
    let matches = match_panos(&roads, &projector, &index, &metas)?;
    let (kept, dropped) = filter_offroad(matches, cfg);
    write_lines(
        output,
        kept.iter().map(|m| {
            serde_json::to_string(&MatchRecord::from_match(m)).expect("records serialize")
        }),
    )?;
    Ok(json!({
        "stage": "match",
        "panoramas": metas.len(),
        "on_road": kept.len(),
        "off_road_dropped": dropped.len(),
        "output": output.display().to_string(),
    }))
}

fn stage_label(
    map: &Path,
    panos: &Path,
    matches: &Path,
    output: &Path,
    cfg: &ThresholdConfig,
    opts: &LabelOptions,
) -> Result<serde_json::Value> {
    let (roads, projector) = load_road_plane(map)?;
    let match_list = read_matches(matches)?;
    let pano_map: BTreeMap<String, PanoMeta> = load_panos(panos)?
        .into_iter()
        .map(|m| (m.pano_id.clone(), m))
        .collect();
    let junctions = find_junctions(&roads, &projector, JunctionMode::MinThreeArms);
    let junction_count = junctions.len();
    let jindex = JunctionIndex::build(junctions, &projector);
    let samples = label_all(&roads, &projector, &match_list, &pano_map, &jindex, cfg, opts)?;
    let mut header = ManifestHeader::new(opts.seed, *cfg);
    header.map_digest = Some(file_digest(map)?);
    header.pano_digest = Some(file_digest(panos)?);
    let manifest = Manifest::new(header, samples)?;
    write_manifest(&manifest, output)?;
    Ok(json!({
        "stage": "label",
        "matches": match_list.len(),
        "junctions": junction_count,
        "samples": manifest.len(),
        "seed": opts.seed,
        "output": output.display().to_string(),
    }))
}

fn stage_crop(
    manifest: &Path,
    panos: &Path,
    image_dir: &Path,
    output_dir: &Path,
) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest)?;
    manifest.verify_sources(None, Some(panos))?;
    let provider = DirPanoProvider::open(panos, image_dir)?;
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut groups: BTreeMap<&str, Vec<&LabeledSample>> = BTreeMap::new();
    for s in manifest.samples() {
        groups.entry(s.crop.pano_id.as_str()).or_default().push(s);
    }
    let groups: Vec<(&str, Vec<&LabeledSample>)> = groups.into_iter().collect();
    let written: usize = groups
        .par_iter()
        .map(|(pano_id, samples)| -> Result<usize> {
            let meta = provider.meta(pano_id)?.ok_or_else(|| {
                Error::Data(format!("manifest references unknown panorama {pano_id}"))
            })?;
            let img = provider.image(pano_id)?;
            for s in samples {
                let crop = unwarp(&img, &meta, &s.crop)?;
                let path = output_dir.join(format!("{}.png", s.sample_id));
                crop.save(&path).map_err(|e| Error::Image {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
            Ok(samples.len())
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(json!({
        "stage": "crop",
        "panoramas": groups.len(),
        "crops": written,
        "output_dir": output_dir.display().to_string(),
    }))
}

fn stage_split(
    manifest: &Path,
    panos: &Path,
    output: &Path,
    thresholds: &ThresholdArgs,
) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest)?;
    manifest.verify_sources(None, Some(panos))?;
    let cfg = thresholds.resolve_from(manifest.header.config)?;
    let pano_map: BTreeMap<String, PanoMeta> = load_panos(panos)?
        .into_iter()
        .map(|m| (m.pano_id.clone(), m))
        .collect();
    let mut header = manifest.header.clone();
    header.config = cfg;
    let (boundary, samples) =
        split_by_longitude(manifest.into_samples(), &pano_map, cfg.train_fraction)?;
    let train = samples.iter().filter(|s| s.split == Split::Train).count();
    let test = samples.len() - train;
    let split_manifest = Manifest::new(header, samples)?;
    write_manifest(&split_manifest, output)?;
    Ok(json!({
        "stage": "split",
        "train_fraction": cfg.train_fraction,
        "boundary_lon": boundary,
        "train": train,
        "test": test,
        "output": output.display().to_string(),
    }))
}

fn stage_balance(manifest: &Path, output: &Path, seed: Option<u64>) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest)?;
    let seed = seed.unwrap_or(manifest.header.seed);
    let balanced = balance_manifest(&manifest, seed)?;
    write_manifest(&balanced, output)?;
    Ok(json!({
        "stage": "balance",
        "before": manifest.len(),
        "after": balanced.len(),
        "duplicates_added": balanced.len() - manifest.len(),
        "seed": seed,
        "output": output.display().to_string(),
    }))
}

fn stage_stats(manifest: &Path) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest)?;
    let report = stats(&manifest);
    eprintln!("{}", report.render_table().trim_end());
    Ok(serde_json::from_str(&report.to_json()).expect("reports serialize"))
}

fn stage_eval(
    manifest: &Path,
    predictions: &Path,
    decision_threshold: f64,
) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest)?;
    let preds = load_predictions(predictions)?;
    let report = evaluate(&preds, &manifest, decision_threshold)?;
    eprintln!("{}", report.render_table().trim_end());
    Ok(serde_json::from_str(&report.to_json()).expect("reports serialize"))
}

fn stage_recommend(
    manifest: &Path,
    predictions: &Path,
    output: &Path,
    speed_delta_mph: f64,
    oneway_prob: f64,
) -> Result<serde_json::Value> {
    let manifest = read_manifest(manifest)?;
    let preds = load_predictions(predictions)?;
    let recs = recommend(&preds, &manifest, speed_delta_mph, oneway_prob)?;
    write_lines(output, recs.iter().map(|r| r.to_json_line()))?;
    let speed = recs
        .iter()
        .filter(|r| matches!(r.kind, RecommendationKind::SpeedLimitReview))
        .count();
    Ok(json!({
        "stage": "recommend",
        "total": recs.len(),
        "speed_limit_reviews": speed,
        "two_way_marking_reviews": recs.len() - speed,
        "output": output.display().to_string(),
    }))
}

fn stage_synth(a: &SynthArgs) -> Result<serde_json::Value> {
    let lanes_palette = split_list(&a.lanes_palette)
        .iter()
        .map(|s| {
            s.parse::<u32>().map_err(|_| {
                Error::Validation(format!("--lanes-palette entry {s:?} is not a lane count"))
            })
        })
        .collect::<Result<Vec<u32>>>()?;
    let params = CityParams {
        rows: a.rows,
        cols: a.cols,
        block_m: a.block_m,
        oneway_fraction: a.oneway_fraction,
        speed_palette: split_list(&a.speed_palette),
        lanes_palette,
        bike_fraction: a.bike_fraction,
        seed: a.seed,
        center: GeoPoint::new(a.center_lat, a.center_lon)?,
        diagonal: a.diagonal,
    };
    let mut city = gen_city(&params)?;
    let pano_params = PanoParams {
        spacing_m: a.spacing_m,
        lateral_offset_m: a.lateral_offset_m,
        noise_m: a.noise_m,
        azimuth_noise_deg: a.azimuth_noise_deg,
        plaza_count: a.plazas,
    };
    let mut rng = stream_rng(a.seed, &["panos"]);
    let metas = gen_panos(&mut city, &pano_params, &mut rng)?;
    fs::create_dir_all(&a.output_dir).map_err(|e| Error::io(&a.output_dir, e))?;
    let map_path = a.output_dir.join("city.osm");
    fs::write(&map_path, &city.xml).map_err(|e| Error::io(&map_path, e))?;
    save_panos(&metas, &a.output_dir.join("panos.jsonl"))?;
    city.truth.save(&a.output_dir.join("truth.json"))?;
    let mut images = 0usize;
    if a.render {
        let cfg = a.thresholds.resolve()?;
        let img_dir = a.output_dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        images = metas
            .par_iter()
            .map(|meta| -> Result<usize> {
                let img = render_pano(meta, &city.truth, &cfg)?;
                let path = img_dir.join(format!("{}.png", meta.pano_id));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Ok(1)
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum();
    }
    Ok(json!({
        "stage": "synth",
        "ways": city.truth.ways.len(),
        "junctions": city.truth.junctions.len(),
        "panoramas": metas.len(),
        "images": images,
        "output_dir": a.output_dir.display().to_string(),
    }))
}

fn run_all(a: &RunAllArgs) -> Result<()> {
    fs::create_dir_all(&a.output_dir).map_err(|e| Error::io(&a.output_dir, e))?;
    let cfg = a.thresholds.resolve()?;
    let opts = a.options.to_label_options();

    let roads = a.output_dir.join("roads.osm");
    print_summary(stage_ingest(&a.map, &roads)?);

    let mut panos = a.panos.clone();
    if let Some(seed_pano) = &a.seed_pano {
        let (net, _) = parse_osm_path(&roads)?;
        let bounds = net.geo_bounds();
        let crawled = a.output_dir.join("panos.jsonl");
        print_summary(stage_crawl(
            &panos,
            seed_pano,
            bounds.as_ref(),
            a.crawl_limit.unwrap_or(usize::MAX),
            &crawled,
        )?);
        panos = crawled;
    }

    let matches = a.output_dir.join("matches.jsonl");
    print_summary(stage_match(&roads, &panos, &matches, &cfg)?);

    let manifest = a.output_dir.join("manifest.jsonl");
    print_summary(stage_label(&roads, &panos, &matches, &manifest, &cfg, &opts)?);

    let split = a.output_dir.join("split.jsonl");
    print_summary(stage_split(&manifest, &panos, &split, &a.thresholds)?);

    let balanced = a.output_dir.join("balanced.jsonl");
    print_summary(stage_balance(&split, &balanced, Some(a.options.seed))?);

    if let Some(image_dir) = &a.pano_images {
        let crops = a.output_dir.join("crops");
        print_summary(stage_crop(&balanced, &panos, image_dir, &crops)?);
    }

    print_summary(stage_stats(&balanced)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// Small parsers

fn split_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn parse_bbox(raw: &str) -> Result<GeoBounds> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Validation(format!(
            "--bbox wants `min-lat,min-lon,max-lat,max-lon`, got {raw:?}"
        )));
    }
    let mut vals = [0.0f64; 4];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| {
            Error::Validation(format!("--bbox component {part:?} is not a number"))
        })?;
    }
    GeoBounds::new(vals[0], vals[1], vals[2], vals[3])
}

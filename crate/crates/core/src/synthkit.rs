//! Synthetic-city fixtures: a seeded street grid with fully known attributes,
//! an emulated capture run that drops panoramas along every street, a
//! schematic equirectangular renderer, and an exact per-panorama ground
//! truth that the rest of the pipeline can be checked against end to end.
//!
//! The generator works on a local plane centered on [`CityParams::center`];
//! node coordinates are converted to lat/lon only at the XML boundary, so
//! every expectation (distances, bearings, junction geometry) is available
//! in closed form. East-west streets overshoot the outermost north-south
//! streets by one block so their ends are plain dead ends, while north-south
//! streets terminate exactly on the outer east-west streets; that makes every
//! grid crossing a junction of at least three arms and nothing else one.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{angdiff_deg, bearing_deg, wrap360, GeoPoint, PlanePoint, Projector};
use crate::labelgen::{
    classify_driveable, classify_facing, stream_rng, AttributeLabel, Handedness, LabelOptions,
    LabeledSample, Task, KMH_TO_MPH,
};
use crate::osmnet::{osm_to_string, OsmNode, OsmWay, RoadNetwork};
use crate::panograph::PanoMeta;
use crate::roadmatch::ThresholdConfig;

/// Rendered panorama width, pixels.
pub const RENDER_W: u32 = 832;
/// Rendered panorama height, pixels.
pub const RENDER_H: u32 = 416;

/// Sky fill above the horizon row.
pub const COLOR_SKY: [u8; 3] = [70, 130, 200];
/// Ground fill below the horizon row.
pub const COLOR_GROUND: [u8; 3] = [78, 70, 62];
/// Wedge marking a driveable direction, painted on the ground half.
pub const COLOR_WEDGE: [u8; 3] = [178, 178, 178];
/// Vertical stripe toward the nearest junction, painted last, full height.
pub const COLOR_STRIPE: [u8; 3] = [220, 30, 30];
/// Band on the sky half marking bike-lane presence.
pub const COLOR_BIKE: [u8; 3] = [40, 200, 90];

/// Angular half-width of the junction stripe: 1.5 rendered columns.
const STRIPE_HALF_COLS: f64 = 1.5;
/// Angular half-width of the bike band, degrees.
const BIKE_BAND_HALF_DEG: f64 = 10.0;

/// Highway classes drawn for the generated streets; all of them survive the
/// default road filter.
const STREET_CLASSES: &[&str] = &["residential", "tertiary", "secondary", "unclassified"];

/// Parameters for [`gen_city`].
#[derive(Debug, Clone)]
pub struct CityParams {
    /// Number of east-west streets.
    pub rows: u32,
    /// Number of north-south streets.
    pub cols: u32,
    /// Distance between adjacent parallel streets, meters.
    pub block_m: f64,
    /// Probability that a street is one-way (direction then drawn 50/50).
    pub oneway_fraction: f64,
    /// `maxspeed` values to draw from: `"N mph"` or a bare km/h number.
    pub speed_palette: Vec<String>,
    /// `lanes` values to draw from.
    pub lanes_palette: Vec<u32>,
    /// Probability that a street gets `cycleway=lane`.
    pub bike_fraction: f64,
    /// Seed for every attribute draw.
    pub seed: u64,
    /// Geographic anchor; the plane origin maps to this point.
    pub center: GeoPoint,
    /// Add one diagonal avenue between the first two crossings, creating a
    /// four- or five-arm junction for topology tests.
    pub diagonal: bool,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            rows: 4,
            cols: 4,
            block_m: 100.0,
            oneway_fraction: 0.3,
            speed_palette: vec![
                "25 mph".into(),
                "30 mph".into(),
                "40".into(),
                "50 mph".into(),
            ],
            lanes_palette: vec![1, 2, 3],
            bike_fraction: 0.3,
            seed: 7,
            center: GeoPoint::new(37.4, -122.1).expect("default center is valid"),
            diagonal: false,
        }
    }
}

impl CityParams {
    fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Validation(format!(
                "city grid must be at least 2x2, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.rows > 900 || self.cols > 900 {
            return Err(Error::Validation(format!(
                "city grid capped at 900x900, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !self.block_m.is_finite() || self.block_m < 20.0 {
            return Err(Error::Validation(format!(
                "block length must be a finite value of at least 20 m, got {}",
                self.block_m
            )));
        }
        for (name, v) in [
            ("oneway_fraction", self.oneway_fraction),
            ("bike_fraction", self.bike_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.speed_palette.is_empty() || self.lanes_palette.is_empty() {
            return Err(Error::Validation(
                "speed and lanes palettes must not be empty".into(),
            ));
        }
        for entry in &self.speed_palette {
            if palette_mph(entry).is_none() {
                return Err(Error::Validation(format!(
                    "speed palette entry {entry:?} is not \"N mph\" or a bare km/h number"
                )));
            }
        }
        if let Some(&l) = self.lanes_palette.iter().find(|&&l| l == 0) {
            return Err(Error::Validation(format!(
                "lanes palette entries must be positive, got {l}"
            )));
        }
        Ok(())
    }
}

/// Miles per hour implied by a palette entry.
fn palette_mph(tag: &str) -> Option<f64> {
    let parse = |s: &str| -> Option<f64> {
        let v: f64 = s.trim().parse().ok()?;
        (v.is_finite() && v > 0.0).then_some(v)
    };
    match tag.strip_suffix(" mph") {
        Some(num) => parse(num),
        None => parse(tag).map(|v| v * KMH_TO_MPH),
    }
}

/// Round to six decimals the same way manifests store numbers, so stored
/// expectations compare bit-for-bit against manifest labels.
fn quant6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("fixed-point f64 reparses")
}

/// True attributes of one emitted way (a street half keeps its street's
/// attributes, so the two halves of a split street agree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WayTruth {
    pub way_id: i64,
    pub highway: String,
    pub one_way: bool,
    /// Speed limit in mph, already rounded to manifest precision.
    pub speed_mph: Option<f64>,
    pub lanes: Option<u32>,
    /// `Some(true)` = marked lane, `Some(false)` = explicitly or implicitly
    /// none, `None` = a value the labeler refuses to train on.
    pub bike_lane: Option<bool>,
}

/// One junction arm: the first node along a way leaving the junction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTruth {
    pub node_id: i64,
    pub x: f64,
    pub y: f64,
}

/// A grid crossing with its arms, plane coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionTruth {
    pub node_id: i64,
    pub x: f64,
    pub y: f64,
    pub arms: Vec<ArmTruth>,
}

/// Nearest junction to a panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoJunctionTruth {
    pub node_id: i64,
    pub distance_m: f64,
    pub bearing_deg: f64,
}

/// Exact expectations for one panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoTruth {
    pub pano_id: String,
    pub x: f64,
    pub y: f64,
    pub azimuth_deg: f64,
    /// False for plaza panoramas placed away from every street.
    pub on_road: bool,
    /// Way the matcher must select (nearest, ties to the smaller way id).
    pub way_id: i64,
    /// Exact distance to that way, meters.
    pub distance_m: f64,
    /// Travel direction the matcher must reconstruct, degrees from north.
    pub forward_deg: f64,
    pub junction: Option<PanoJunctionTruth>,
}

impl PanoTruth {
    /// Distance to the nearest junction, infinity when the city has none.
    pub fn junction_distance(&self) -> f64 {
        self.junction.as_ref().map_or(f64::INFINITY, |j| j.distance_m)
    }
}

/// Everything the generator knows to be true about a city and its capture
/// run. Serializes deterministically: maps are ordered and floats round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub center_lat: f64,
    pub center_lon: f64,
    pub ways: BTreeMap<i64, WayTruth>,
    pub junctions: BTreeMap<i64, JunctionTruth>,
    pub panos: BTreeMap<String, PanoTruth>,
}

/// Outcome of checking emitted samples against the ground truth.
#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub panos_checked: usize,
    pub samples_checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Tolerance for crop headings that must point at a computed bearing.
const ANGLE_TOL_DEG: f64 = 1e-6;
/// Tolerance for the heading-offset label against the recomputed offset;
/// twice the manifest rounding step because both the crop heading and the
/// label were rounded independently.
const HEADING_TOL_DEG: f64 = 2e-6;
/// Tolerance for the junction-distance label, meters.
const DISTANCE_TOL_M: f64 = 1e-6;

impl GroundTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: invalid ground truth: {e}", path.display())))
    }

    /// The driveable azimuths at a panorama: both senses of the matched way
    /// plus every arm of the nearest junction when it is within
    /// `inter_pos_max_m`.
    pub fn truth_headings(&self, pt: &PanoTruth, inter_pos_max_m: f64) -> Vec<f64> {
        let mut out = vec![pt.forward_deg, wrap360(pt.forward_deg + 180.0)];
        if let Some(j) = &pt.junction {
            if j.distance_m <= inter_pos_max_m {
                if let Some(junction) = self.junctions.get(&j.node_id) {
                    let here = PlanePoint::new(pt.x, pt.y);
                    for arm in &junction.arms {
                        out.push(bearing_deg(&here, &PlanePoint::new(arm.x, arm.y)));
                    }
                }
            }
        }
        out
    }

    /// Check every emitted sample against the construction: exact labels for
    /// the categorical tasks, manifest-precision agreement for the numeric
    /// ones, correct crop geometry, correct way attribution, and exactly the
    /// expected number of samples per panorama and task.
    pub fn verify_samples(
        &self,
        samples: &[LabeledSample],
        cfg: &ThresholdConfig,
        opts: &LabelOptions,
    ) -> VerifyReport {
        let mut report = VerifyReport::default();
        let mut groups: BTreeMap<(&str, Task), Vec<&LabeledSample>> = BTreeMap::new();
        for s in samples {
            let pano = s.crop.pano_id.as_str();
            match self.panos.get(pano) {
                None => report
                    .mismatches
                    .push(format!("{pano}: sample references an unknown panorama")),
                Some(pt) if pt.distance_m > cfg.offroad_max_m => report.mismatches.push(format!(
                    "{pano}: off-road panorama ({}m from the nearest way) produced a sample",
                    pt.distance_m
                )),
                Some(_) => groups.entry((pano, s.label.task())).or_default().push(s),
            }
        }

        for (pano_id, pt) in &self.panos {
            if pt.distance_m > cfg.offroad_max_m {
                continue;
            }
            report.panos_checked += 1;
            let way = match self.ways.get(&pt.way_id) {
                Some(w) => w,
                None => {
                    report
                        .mismatches
                        .push(format!("{pano_id}: truth names unknown way {}", pt.way_id));
                    continue;
                }
            };
            let fwd = pt.forward_deg;
            let jd = pt.junction_distance();
            let truths = self.truth_headings(pt, cfg.inter_pos_max_m);
            let mut check = Checker {
                report: &mut report,
                groups: &groups,
                pano_id,
                pt,
                cfg,
            };

            // Intersection presence and distance.
            if jd <= cfg.inter_pos_max_m {
                let jb = pt.junction.as_ref().expect("finite distance").bearing_deg;
                check.task(Task::Intersection, 1, |s, out| {
                    expect_flag(s, true, out);
                    expect_heading(s, jb, ANGLE_TOL_DEG, out);
                });
                check.task(Task::IntersectionDistance, 1, |s, out| {
                    match &s.label {
                        AttributeLabel::IntersectionDistance(d) => {
                            if (d - jd).abs() > DISTANCE_TOL_M {
                                out.push(format!("distance label {d} != junction distance {jd}"));
                            }
                        }
                        other => out.push(format!("unexpected label {other:?}")),
                    }
                    expect_heading(s, jb, ANGLE_TOL_DEG, out);
                });
            } else if jd >= cfg.inter_neg_min_m {
                check.task(Task::Intersection, 1, |s, out| {
                    expect_flag(s, false, out);
                    expect_heading(s, fwd, ANGLE_TOL_DEG, out);
                });
                check.task(Task::IntersectionDistance, 0, |_, _| {});
            } else {
                check.task(Task::Intersection, 0, |_, _| {});
                check.task(Task::IntersectionDistance, 0, |_, _| {});
            }

            // Driveable crops: random headings, classified against the truth set.
            let tol = cfg.driveable_tol_deg;
            check.task(Task::Driveable, opts.driveable_crops as usize, |s, out| {
                let expected = classify_driveable(s.crop.heading_deg, &truths, tol);
                expect_flag(s, expected, out);
            });

            // Heading offset: only far from junctions; the label must equal
            // the angle between the crop and the forward direction.
            let head_n = if jd > cfg.heading_excl_m {
                opts.repeat as usize
            } else {
                0
            };
            check.task(Task::HeadingAngle, head_n, |s, out| match &s.label {
                AttributeLabel::HeadingAngle(a) => {
                    if a.abs() > cfg.heading_max_offset_deg + 1e-9 {
                        out.push(format!("offset {a} exceeds {}", cfg.heading_max_offset_deg));
                    }
                    let recomputed = angdiff_deg(s.crop.heading_deg, fwd);
                    if (recomputed - a).abs() > HEADING_TOL_DEG {
                        out.push(format!("offset label {a} != crop offset {recomputed}"));
                    }
                }
                other => out.push(format!("unexpected label {other:?}")),
            });

            // Bike lane: one crop to the curb side, only for trainable tags.
            let bike_n = usize::from(way.bike_lane.is_some());
            let bike_heading = match opts.handedness {
                Handedness::Right => wrap360(fwd + cfg.bike_crop_offset_deg),
                Handedness::Left => wrap360(fwd - cfg.bike_crop_offset_deg),
            };
            check.task(Task::BikeLane, bike_n, |s, out| {
                expect_flag(s, way.bike_lane.unwrap_or_default(), out);
                expect_heading(s, bike_heading, ANGLE_TOL_DEG, out);
            });

            // Speed limit: exact at manifest precision.
            check.task(Task::SpeedLimit, usize::from(way.speed_mph.is_some()), |s, out| {
                match &s.label {
                    AttributeLabel::SpeedLimit(v) => {
                        if Some(*v) != way.speed_mph {
                            out.push(format!("speed {v} != {:?}", way.speed_mph));
                        }
                    }
                    other => out.push(format!("unexpected label {other:?}")),
                }
                expect_heading(s, fwd, ANGLE_TOL_DEG, out);
            });

            // One-way: always one sample, forward crop.
            check.task(Task::OneWay, 1, |s, out| {
                expect_flag(s, way.one_way, out);
                expect_heading(s, fwd, ANGLE_TOL_DEG, out);
            });

            // Wrong-way: pairs of along/against crops with jitter.
            let ww_tol = cfg.wrongway_tol_deg + 1e-5;
            check.task(Task::WrongWay, 2 * opts.repeat as usize, |s, out| {
                match (classify_facing(s.crop.heading_deg, fwd, ww_tol), s.label.as_flag()) {
                    (Some(expected), Some(got)) if expected == got => {}
                    (expected, got) => out.push(format!(
                        "wrong-way label {got:?} does not match crop direction {expected:?}"
                    )),
                }
            });
            let (t, f) = count_flags(&groups, pano_id, Task::WrongWay);
            if t != opts.repeat as usize || f != opts.repeat as usize {
                report.mismatches.push(format!(
                    "{pano_id} wrong-way: got {t} against / {f} along, expected {} each",
                    opts.repeat
                ));
            }

            // Lane count: one-way streets with a lane tag only.
            let lanes_n = usize::from(way.one_way && way.lanes.is_some());
            check = Checker {
                report: &mut report,
                groups: &groups,
                pano_id,
                pt,
                cfg,
            };
            check.task(Task::NumLanes, lanes_n, |s, out| {
                match &s.label {
                    AttributeLabel::NumLanes(n) => {
                        if Some(*n) != way.lanes {
                            out.push(format!("lanes {n} != {:?}", way.lanes));
                        }
                    }
                    other => out.push(format!("unexpected label {other:?}")),
                }
                expect_heading(s, fwd, ANGLE_TOL_DEG, out);
            });
        }

        report.samples_checked = groups.values().map(Vec::len).sum();
        report
    }
}

/// Per-pano, per-task checking: count plus a closure over each sample, with
/// the shared crop-geometry and way-attribution checks applied to all.
struct Checker<'a, 'b> {
    report: &'a mut VerifyReport,
    groups: &'a BTreeMap<(&'b str, Task), Vec<&'b LabeledSample>>,
    pano_id: &'a str,
    pt: &'a PanoTruth,
    cfg: &'a ThresholdConfig,
}

impl Checker<'_, '_> {
    fn task(&mut self, task: Task, expected: usize, mut f: impl FnMut(&LabeledSample, &mut Vec<String>)) {
        let empty = Vec::new();
        let got = self
            .groups
            .get(&(self.pano_id, task))
            .unwrap_or(&empty);
        if got.len() != expected {
            self.report.mismatches.push(format!(
                "{} {}: expected {expected} samples, got {}",
                self.pano_id,
                task.as_str(),
                got.len()
            ));
        }
        for s in got {
            let mut issues = Vec::new();
            if s.way_id != self.pt.way_id {
                issues.push(format!("way {} != matched way {}", s.way_id, self.pt.way_id));
            }
            if s.crop.pitch_deg.abs() > 1e-9 {
                issues.push(format!("pitch {} != 0", s.crop.pitch_deg));
            }
            if (s.crop.fov_deg - self.cfg.crop_fov_deg).abs() > 1e-9 {
                issues.push(format!("fov {} != {}", s.crop.fov_deg, self.cfg.crop_fov_deg));
            }
            if s.crop.width_px != self.cfg.crop_px || s.crop.height_px != self.cfg.crop_px {
                issues.push(format!(
                    "crop {}x{} != {0}px square",
                    s.crop.width_px, s.crop.height_px
                ));
            }
            f(s, &mut issues);
            for issue in issues {
                self.report.mismatches.push(format!(
                    "{} {} [{}]: {issue}",
                    self.pano_id,
                    task.as_str(),
                    s.sample_id
                ));
            }
        }
    }
}

fn expect_flag(s: &LabeledSample, expected: bool, out: &mut Vec<String>) {
    match s.label.as_flag() {
        Some(got) if got == expected => {}
        got => out.push(format!("flag {got:?}, expected {expected}")),
    }
}

fn expect_heading(s: &LabeledSample, expected_deg: f64, tol: f64, out: &mut Vec<String>) {
    let d = angdiff_deg(expected_deg, s.crop.heading_deg);
    if d.abs() > tol {
        out.push(format!(
            "crop heading {} is {d} degrees from expected {expected_deg}",
            s.crop.heading_deg
        ));
    }
}

fn count_flags(
    groups: &BTreeMap<(&str, Task), Vec<&LabeledSample>>,
    pano_id: &str,
    task: Task,
) -> (usize, usize) {
    let mut t = 0;
    let mut f = 0;
    if let Some(list) = groups.get(&(pano_id, task)) {
        for s in list {
            match s.label.as_flag() {
                Some(true) => t += 1,
                Some(false) => f += 1,
                None => {}
            }
        }
    }
    (t, f)
}

/// One construction street; its emitted ways are collinear halves.
#[derive(Debug, Clone)]
struct Street {
    name: String,
    a: PlanePoint,
    length_m: f64,
    /// Unit direction a → b, plane components (east, north).
    ux: f64,
    uy: f64,
    /// Bearing of a → b.
    tangent_deg: f64,
    /// Legal/capture travel bearing: the tangent, or its reverse for
    /// backward one-ways.
    travel_deg: f64,
    one_way: bool,
    /// (station, node id), ascending.
    nodes: Vec<(f64, i64)>,
    /// (way id, start station, end station); one entry, or two on a split.
    halves: Vec<(i64, f64, f64)>,
    highway: String,
    oneway_tag: Option<String>,
    maxspeed: Option<String>,
    lanes_tag: Option<u32>,
    cycleway: Option<String>,
}

impl Street {
    fn point_at(&self, s: f64) -> PlanePoint {
        PlanePoint::new(self.a.x + self.ux * s, self.a.y + self.uy * s)
    }

    fn truth(&self, way_id: i64) -> WayTruth {
        WayTruth {
            way_id,
            highway: self.highway.clone(),
            one_way: self.one_way,
            speed_mph: self
                .maxspeed
                .as_deref()
                .map(|t| quant6(palette_mph(t).expect("palette validated"))),
            lanes: self.lanes_tag,
            bike_lane: match self.cycleway.as_deref() {
                Some("lane") => Some(true),
                None | Some("no") => Some(false),
                Some(_) => None,
            },
        }
    }
}

/// A generated city: the OSM extract, the ground truth, and the private
/// construction plan that [`gen_panos`] extends.
pub struct SynthCity {
    pub xml: Vec<u8>,
    pub truth: GroundTruth,
    params: CityParams,
    streets: Vec<Street>,
    /// Way polylines in plane coordinates, ascending way id; roads only.
    road_ways: Vec<(i64, Vec<PlanePoint>)>,
}

impl SynthCity {
    /// Exact nearest road way to a plane point: (way id, distance), ties to
    /// the smallest way id then earliest segment — the matcher's rule.
    fn nearest_way(&self, p: &PlanePoint) -> (i64, f64) {
        let mut best = (0i64, f64::INFINITY);
        for (wid, pts) in &self.road_ways {
            for seg in pts.windows(2) {
                let d = point_segment_distance(p, &seg[0], &seg[1]);
                if d < best.1 {
                    best = (*wid, d);
                }
            }
        }
        best
    }

    fn nearest_junction(&self, p: &PlanePoint) -> Option<PanoJunctionTruth> {
        let mut best: Option<PanoJunctionTruth> = None;
        for (nid, j) in &self.truth.junctions {
            let jp = PlanePoint::new(j.x, j.y);
            let d = (p.x - jp.x).hypot(p.y - jp.y);
            if best.as_ref().is_none_or(|b| d < b.distance_m) {
                best = Some(PanoJunctionTruth {
                    node_id: *nid,
                    distance_m: d,
                    bearing_deg: bearing_deg(p, &jp),
                });
            }
        }
        best
    }

    fn street_of_way(&self, way_id: i64) -> Option<&Street> {
        self.streets
            .iter()
            .find(|st| st.halves.iter().any(|&(w, _, _)| w == way_id))
    }
}

fn point_segment_distance(p: &PlanePoint, a: &PlanePoint, b: &PlanePoint) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.x + t * abx, a.y + t * aby);
    (p.x - cx).hypot(p.y - cy)
}

/// Build the street grid, tag it from the palettes, and serialize it as OSM
/// XML. Same parameters produce identical bytes.
pub fn gen_city(params: &CityParams) -> Result<SynthCity> {
    params.validate()?;
    let proj = Projector::new(params.center)?;
    let rows = params.rows as usize;
    let cols = params.cols as usize;
    let block = params.block_m;
    let margin = block;
    let x_of = |j: usize| (j as f64 - (cols as f64 - 1.0) / 2.0) * block;
    let y_of = |i: usize| (i as f64 - (rows as f64 - 1.0) / 2.0) * block;
    let crossing_id = |i: usize, j: usize| 100_000 + i as i64 * 1000 + j as i64;

    let mut rng = stream_rng(params.seed, &["city"]);
    let mut node_pts: BTreeMap<i64, PlanePoint> = BTreeMap::new();
    for i in 0..rows {
        for j in 0..cols {
            node_pts.insert(crossing_id(i, j), PlanePoint::new(x_of(j), y_of(i)));
        }
    }

    let mut split_counter = 0i64;
    let mut streets = Vec::new();

    for i in 0..rows {
        let a = PlanePoint::new(x_of(0) - margin, y_of(i));
        let west = 200_000 + i as i64 * 10;
        let east = west + 1;
        node_pts.insert(west, a);
        let length = 2.0 * margin + (cols - 1) as f64 * block;
        node_pts.insert(east, PlanePoint::new(a.x + length, a.y));
        let mut nodes = vec![(0.0, west)];
        nodes.extend((0..cols).map(|j| (margin + j as f64 * block, crossing_id(i, j))));
        nodes.push((length, east));
        streets.push(build_street(
            format!("H{i:02} Street"),
            10_000 + i as i64 * 10,
            a,
            length,
            nodes,
            true,
            params,
            &mut rng,
            &mut split_counter,
            &mut node_pts,
        ));
    }

    for j in 0..cols {
        let a = PlanePoint::new(x_of(j), y_of(0));
        let length = (rows - 1) as f64 * block;
        let nodes = (0..rows)
            .map(|i| (i as f64 * block, crossing_id(i, j)))
            .collect();
        streets.push(build_street(
            format!("V{j:02} Avenue"),
            20_000 + j as i64 * 10,
            a,
            length,
            nodes,
            true,
            params,
            &mut rng,
            &mut split_counter,
            &mut node_pts,
        ));
    }

    if params.diagonal {
        let a = node_pts[&crossing_id(0, 0)];
        let b = node_pts[&crossing_id(1, 1)];
        let length = (b.x - a.x).hypot(b.y - a.y);
        let nodes = vec![(0.0, crossing_id(0, 0)), (length, crossing_id(1, 1))];
        streets.push(build_street(
            "Diagonal Avenue".into(),
            30_000,
            a,
            length,
            nodes,
            false,
            params,
            &mut rng,
            &mut split_counter,
            &mut node_pts,
        ));
    }

    // Footpaths inside the south-west block; the road filter must drop them.
    let mut footways = Vec::new();
    for (k, (from, to)) in [
        ((0.20, 0.25), (0.45, 0.55)),
        ((0.60, 0.30), (0.75, 0.70)),
    ]
    .into_iter()
    .enumerate()
    {
        let base = 400_000 + k as i64 * 10;
        node_pts.insert(
            base,
            PlanePoint::new(x_of(0) + from.0 * block, y_of(0) + from.1 * block),
        );
        node_pts.insert(
            base + 1,
            PlanePoint::new(x_of(0) + to.0 * block, y_of(0) + to.1 * block),
        );
        let mut tags = BTreeMap::new();
        tags.insert("highway".to_string(), "footway".to_string());
        tags.insert("name".to_string(), format!("Footpath {k}"));
        footways.push(OsmWay {
            id: 40_000 + k as i64,
            node_ids: vec![base, base + 1],
            tags,
        });
    }

    let osm_nodes: Vec<OsmNode> = node_pts
        .iter()
        .map(|(&id, pt)| OsmNode {
            id,
            point: proj.unproject(pt),
            tags: BTreeMap::new(),
        })
        .collect();

    let mut osm_ways = Vec::new();
    let mut way_truths = BTreeMap::new();
    let mut road_ways = Vec::new();
    for street in &streets {
        for &(wid, s0, s1) in &street.halves {
            let ids: Vec<i64> = street
                .nodes
                .iter()
                .filter(|&&(s, _)| s >= s0 - 1e-9 && s <= s1 + 1e-9)
                .map(|&(_, nid)| nid)
                .collect();
            let mut tags = BTreeMap::new();
            tags.insert("highway".to_string(), street.highway.clone());
            tags.insert("name".to_string(), street.name.clone());
            if let Some(t) = &street.oneway_tag {
                tags.insert("oneway".to_string(), t.clone());
            }
            if let Some(t) = &street.maxspeed {
                tags.insert("maxspeed".to_string(), t.clone());
            }
            if let Some(n) = street.lanes_tag {
                tags.insert("lanes".to_string(), n.to_string());
            }
            if let Some(t) = &street.cycleway {
                tags.insert("cycleway".to_string(), t.clone());
            }
            osm_ways.push(OsmWay {
                id: wid,
                node_ids: ids.clone(),
                tags,
            });
            way_truths.insert(wid, street.truth(wid));
            road_ways.push((wid, ids.iter().map(|nid| node_pts[nid]).collect()));
        }
    }
    osm_ways.extend(footways);
    road_ways.sort_by_key(|(wid, _)| *wid);

    // Junction truth: every crossing, with the first node along each way-arm.
    let mut junctions = BTreeMap::new();
    for street in &streets {
        for (q, &(_, nid)) in street.nodes.iter().enumerate() {
            if !(100_000..200_000).contains(&nid) {
                continue;
            }
            let pt = node_pts[&nid];
            let entry = junctions.entry(nid).or_insert_with(|| JunctionTruth {
                node_id: nid,
                x: pt.x,
                y: pt.y,
                arms: Vec::new(),
            });
            for neighbor in [q.checked_sub(1), (q + 1 < street.nodes.len()).then_some(q + 1)]
                .into_iter()
                .flatten()
            {
                let (_, n_id) = street.nodes[neighbor];
                let np = node_pts[&n_id];
                entry.arms.push(ArmTruth {
                    node_id: n_id,
                    x: np.x,
                    y: np.y,
                });
            }
        }
    }

    let network = RoadNetwork::new(osm_nodes, osm_ways)?;
    let xml = osm_to_string(&network).into_bytes();

    Ok(SynthCity {
        xml,
        truth: GroundTruth {
            center_lat: params.center.lat_deg,
            center_lon: params.center.lon_deg,
            ways: way_truths,
            junctions,
            panos: BTreeMap::new(),
        },
        params: params.clone(),
        streets,
        road_ways,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_street(
    name: String,
    base_way_id: i64,
    a: PlanePoint,
    length: f64,
    mut nodes: Vec<(f64, i64)>,
    allow_split: bool,
    params: &CityParams,
    rng: &mut impl Rng,
    split_counter: &mut i64,
    node_pts: &mut BTreeMap<i64, PlanePoint>,
) -> Street {
    let end = PlanePoint::new(
        node_pts[&nodes.last().unwrap().1].x,
        node_pts[&nodes.last().unwrap().1].y,
    );
    let (ux, uy) = ((end.x - a.x) / length, (end.y - a.y) / length);
    let tangent_deg = bearing_deg(&a, &end);

    let highway = STREET_CLASSES[rng.random_range(0..STREET_CLASSES.len())].to_string();
    let one_way = rng.random::<f64>() < params.oneway_fraction;
    let (oneway_tag, travel_deg) = if one_way {
        if rng.random::<f64>() < 0.5 {
            (Some("yes".to_string()), tangent_deg)
        } else {
            (Some("-1".to_string()), wrap360(tangent_deg + 180.0))
        }
    } else if rng.random::<f64>() < 0.3 {
        (Some("no".to_string()), tangent_deg)
    } else {
        (None, tangent_deg)
    };
    let maxspeed = (rng.random::<f64>() < 0.85)
        .then(|| params.speed_palette[rng.random_range(0..params.speed_palette.len())].clone());
    let lanes_tag = (rng.random::<f64>() < 0.85)
        .then(|| params.lanes_palette[rng.random_range(0..params.lanes_palette.len())]);
    let cycleway = {
        let u = rng.random::<f64>();
        if u < params.bike_fraction {
            Some("lane".to_string())
        } else {
            let v = rng.random::<f64>();
            if v < 0.45 {
                None
            } else if v < 0.9 {
                Some("no".to_string())
            } else {
                Some("track".to_string())
            }
        }
    };

    let mut street = Street {
        name,
        a,
        length_m: length,
        ux,
        uy,
        tangent_deg,
        travel_deg,
        one_way,
        nodes: Vec::new(),
        halves: vec![(base_way_id, 0.0, length)],
        highway,
        oneway_tag,
        maxspeed,
        lanes_tag,
        cycleway,
    };

    // Mid-block split: the same street continues as a second way, which the
    // junction finder must not count as a junction. The split sits at 55% of
    // a middle block so it can never coincide with an existing node.
    if allow_split && rng.random::<f64>() < 0.25 {
        let blocks = (length / params.block_m).round();
        let split_s = (((blocks / 2.0).floor()) + 0.55) * params.block_m;
        let nid = 300_000 + *split_counter;
        *split_counter += 1;
        node_pts.insert(nid, street.point_at(split_s));
        nodes.push((split_s, nid));
        nodes.sort_by(|l, r| l.0.total_cmp(&r.0));
        street.halves = vec![
            (base_way_id, 0.0, split_s),
            (base_way_id + 1, split_s, length),
        ];
    }
    street.nodes = nodes;
    street
}

/// Parameters for [`gen_panos`].
#[derive(Debug, Clone)]
pub struct PanoParams {
    /// Distance between consecutive panoramas along a street.
    pub spacing_m: f64,
    /// Offset to the right of the travel direction.
    pub lateral_offset_m: f64,
    /// Per-axis uniform positional noise half-range.
    pub noise_m: f64,
    /// Uniform vehicle-azimuth noise half-range.
    pub azimuth_noise_deg: f64,
    /// Extra off-road panoramas dropped inside block interiors.
    pub plaza_count: u32,
}

impl Default for PanoParams {
    fn default() -> Self {
        PanoParams {
            spacing_m: 10.0,
            lateral_offset_m: 3.0,
            noise_m: 0.0,
            azimuth_noise_deg: 5.0,
            plaza_count: 2,
        }
    }
}

/// Stations along a street: every `spacing` meters from 0, keeping the far
/// endpoint when the length divides evenly.
fn stations(length_m: f64, spacing_m: f64) -> Vec<f64> {
    let n = (length_m / spacing_m + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 * spacing_m).collect()
}

/// Emulate a capture run: drive every street in construction order, dropping
/// a panorama at each station, offset to the curb side, with optional
/// positional and azimuth noise; then scatter plaza panoramas that the
/// off-road filter must reject. Extends `city.truth` with exact expectations
/// for every panorama.
pub fn gen_panos(
    city: &mut SynthCity,
    params: &PanoParams,
    rng: &mut dyn RngCore,
) -> Result<Vec<PanoMeta>> {
    if !params.spacing_m.is_finite() || params.spacing_m <= 0.0 {
        return Err(Error::Validation(format!(
            "pano spacing must be positive, got {}",
            params.spacing_m
        )));
    }
    for (name, v) in [
        ("lateral offset", params.lateral_offset_m),
        ("position noise", params.noise_m),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Validation(format!("{name} must be >= 0, got {v}")));
        }
    }
    if !(0.0..90.0).contains(&params.azimuth_noise_deg) {
        return Err(Error::Validation(format!(
            "azimuth noise must lie in [0, 90) so the travel sense stays recoverable, got {}",
            params.azimuth_noise_deg
        )));
    }
    if city.streets.len() > 100 {
        return Err(Error::Validation(format!(
            "pano id scheme supports up to 100 streets, city has {}",
            city.streets.len()
        )));
    }

    let proj = Projector::new(city.params.center)?;
    let mut metas: Vec<PanoMeta> = Vec::new();

    for (si, street) in city.streets.iter().enumerate() {
        let all = stations(street.length_m, params.spacing_m);
        if all.len() > 1000 {
            return Err(Error::Validation(format!(
                "street {} would get {} panoramas; id scheme caps at 1000",
                street.name,
                all.len()
            )));
        }
        // Right of travel: the tangent's right normal, flipped for streets
        // captured against node order.
        let reversed = angdiff_deg(street.travel_deg, street.tangent_deg).abs() > 90.0;
        let sign = if reversed { -1.0 } else { 1.0 };
        let (rx, ry) = (sign * street.uy, sign * -street.ux);
        let last = all.len() - 1;
        for (k, &s) in all.iter().enumerate() {
            let dx = rng.random_range(-params.noise_m..=params.noise_m);
            let dy = rng.random_range(-params.noise_m..=params.noise_m);
            let p = PlanePoint::new(
                street.a.x + street.ux * s + rx * params.lateral_offset_m + dx,
                street.a.y + street.uy * s + ry * params.lateral_offset_m + dy,
            );
            let daz = rng.random_range(-params.azimuth_noise_deg..=params.azimuth_noise_deg);
            let azimuth = wrap360(street.travel_deg + daz);
            let pano_id = format!("s{si:02}p{k:03}");
            let mut neighbors = Vec::new();
            if k > 0 {
                neighbors.push(format!("s{si:02}p{:03}", k - 1));
            }
            if k < last {
                neighbors.push(format!("s{si:02}p{:03}", k + 1));
            }
            metas.push(PanoMeta {
                pano_id: pano_id.clone(),
                point: proj.unproject(&p),
                azimuth_deg: azimuth,
                neighbors,
                capture_date: Some(format!("2023-{:02}", 1 + si % 12)),
            });
            let truth = pano_truth(city, pano_id, p, azimuth, true);
            city.truth.panos.insert(truth.pano_id.clone(), truth);
        }
    }

    if params.plaza_count > 0 && metas.is_empty() {
        return Err(Error::Validation(
            "plaza panoramas need at least one street panorama to link to".into(),
        ));
    }
    let brows = (city.params.rows - 1) as usize;
    let bcols = (city.params.cols - 1) as usize;
    let block = city.params.block_m;
    let x0 = -((city.params.cols as f64 - 1.0) / 2.0) * block;
    let y0 = -((city.params.rows as f64 - 1.0) / 2.0) * block;
    for pi in 0..params.plaza_count as usize {
        let bi = pi % brows;
        let bj = (pi / brows) % bcols;
        let wrap = (pi / (brows * bcols)) as f64;
        // Off-center so no two ways are exactly equidistant.
        let p = PlanePoint::new(
            x0 + (bj as f64 + 0.5) * block + 0.073 * block + wrap * 1.7,
            y0 + (bi as f64 + 0.5) * block + 0.031 * block,
        );
        let pano_id = format!("zp{pi:02}");
        let anchor = metas[0].pano_id.clone();
        metas[0].neighbors.push(pano_id.clone());
        metas.push(PanoMeta {
            pano_id: pano_id.clone(),
            point: proj.unproject(&p),
            azimuth_deg: 0.0,
            neighbors: vec![anchor],
            capture_date: Some("2023-12".into()),
        });
        let truth = pano_truth(city, pano_id, p, 0.0, false);
        city.truth.panos.insert(truth.pano_id.clone(), truth);
    }

    Ok(metas)
}

/// Work out what the matcher and labeler must conclude about a panorama at
/// plane point `p`: nearest way, exact distance, reconstructed travel
/// direction, nearest junction.
fn pano_truth(city: &SynthCity, pano_id: String, p: PlanePoint, azimuth: f64, on_road: bool) -> PanoTruth {
    let (way_id, distance_m) = city.nearest_way(&p);
    let street = city.street_of_way(way_id).expect("ways come from streets");
    let forward_deg = if street.one_way {
        street.travel_deg
    } else {
        // Two-way: the segment sense closer to the vehicle azimuth; an exact
        // right-angle tie keeps node order.
        let along = angdiff_deg(azimuth, street.tangent_deg).abs();
        let against = angdiff_deg(azimuth, wrap360(street.tangent_deg + 180.0)).abs();
        if against < along {
            wrap360(street.tangent_deg + 180.0)
        } else {
            street.tangent_deg
        }
    };
    PanoTruth {
        pano_id,
        x: p.x,
        y: p.y,
        azimuth_deg: azimuth,
        on_road,
        way_id,
        distance_m,
        forward_deg,
        junction: city.nearest_junction(&p),
    }
}

/// Render the schematic equirectangular view for a panorama: sky over ground,
/// gray wedges on the ground half at every driveable azimuth, a bike-lane
/// band on the sky half at the curb-side crop direction, and a full-height
/// stripe toward the nearest junction painted over everything else.
pub fn render_pano(
    meta: &PanoMeta,
    truth: &GroundTruth,
    cfg: &ThresholdConfig,
) -> Result<RgbImage> {
    let pt = truth.panos.get(&meta.pano_id).ok_or_else(|| {
        Error::Data(format!(
            "panorama {} is not in the ground truth",
            meta.pano_id
        ))
    })?;
    let bike = pt.on_road
        && truth
            .ways
            .get(&pt.way_id)
            .is_some_and(|w| w.bike_lane == Some(true));
    let truths = if pt.on_road {
        truth.truth_headings(pt, cfg.inter_pos_max_m)
    } else {
        Vec::new()
    };
    let bike_az = wrap360(pt.forward_deg + cfg.bike_crop_offset_deg);
    let stripe = pt
        .on_road
        .then(|| pt.junction.as_ref().map(|j| j.bearing_deg))
        .flatten();
    let stripe_half_deg = STRIPE_HALF_COLS * 360.0 / RENDER_W as f64;

    let w = RENDER_W as usize;
    let mut wedge_col = vec![false; w];
    let mut bike_col = vec![false; w];
    let mut stripe_col = vec![false; w];
    for (u, (wc, (bc, sc))) in wedge_col
        .iter_mut()
        .zip(bike_col.iter_mut().zip(stripe_col.iter_mut()))
        .enumerate()
    {
        let az = wrap360(meta.azimuth_deg - 180.0 + (u as f64 + 0.5) * 360.0 / RENDER_W as f64);
        *wc = truths
            .iter()
            .any(|&t| angdiff_deg(az, t).abs() <= cfg.driveable_tol_deg);
        *bc = bike && angdiff_deg(az, bike_az).abs() <= BIKE_BAND_HALF_DEG;
        *sc = stripe.is_some_and(|s| angdiff_deg(az, s).abs() <= stripe_half_deg);
    }

    Ok(RgbImage::from_fn(RENDER_W, RENDER_H, |u, v| {
        let u = u as usize;
        if stripe_col[u] {
            Rgb(COLOR_STRIPE)
        } else if v < RENDER_H / 2 {
            Rgb(if bike_col[u] { COLOR_BIKE } else { COLOR_SKY })
        } else {
            Rgb(if wedge_col[u] { COLOR_WEDGE } else { COLOR_GROUND })
        }
    }))
}

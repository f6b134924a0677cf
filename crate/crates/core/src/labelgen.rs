//! The nine labelers: turn a matched panorama into (crop, label) samples.
//!
//! Each labeler is a pure function of (panorama, match, junction context,
//! thresholds) plus, where sampling is involved, a deterministic RNG stream
//! derived from `(global seed, pano id, task name)`. Deriving streams that
//! way — instead of sharing one generator — means the set of emitted samples
//! cannot depend on which worker processed which panorama first.
//!
//! Tasks and their label types:
//!
//! | task                  | label                | crop direction            |
//! |-----------------------|----------------------|---------------------------|
//! | intersection          | flag                 | toward junction / forward |
//! | intersection_distance | meters (positives)   | toward junction           |
//! | driveable             | flag                 | uniform random            |
//! | heading_angle         | signed degrees       | forward + drawn offset    |
//! | bike_lane             | flag                 | forward + 45 (curb side)  |
//! | speed_limit           | mph                  | forward                   |
//! | one_way               | flag                 | forward                   |
//! | wrong_way             | flag (true = wrong)  | forward / forward + 180   |
//! | num_lanes             | count (one-way only) | forward                   |

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{angdiff_deg, bearing_deg, wrap360, PlanePoint, Projector};
use crate::osmnet::{Junction, OsmWay, RoadNetwork};
use crate::panograph::PanoMeta;
use crate::roadmatch::{MatchResult, ThresholdConfig};

/// Kilometers-per-hour to miles-per-hour, the usual highway conversion.
pub const KMH_TO_MPH: f64 = 0.621371;

/// The nine labeling tasks. `as_str` values are the stable task names used
/// in manifests and prediction files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Intersection,
    IntersectionDistance,
    Driveable,
    HeadingAngle,
    BikeLane,
    SpeedLimit,
    OneWay,
    WrongWay,
    NumLanes,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::Intersection,
        Task::IntersectionDistance,
        Task::Driveable,
        Task::HeadingAngle,
        Task::BikeLane,
        Task::SpeedLimit,
        Task::OneWay,
        Task::WrongWay,
        Task::NumLanes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Intersection => "intersection",
            Task::IntersectionDistance => "intersection_distance",
            Task::Driveable => "driveable",
            Task::HeadingAngle => "heading_angle",
            Task::BikeLane => "bike_lane",
            Task::SpeedLimit => "speed_limit",
            Task::OneWay => "one_way",
            Task::WrongWay => "wrong_way",
            Task::NumLanes => "num_lanes",
        }
    }

    pub fn from_str(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Binary classification tasks (label is a flag).
    pub fn is_binary(&self) -> bool {
        matches!(
            self,
            Task::Intersection | Task::Driveable | Task::BikeLane | Task::OneWay | Task::WrongWay
        )
    }

    /// Tasks whose label space is discrete, and therefore balanceable by
    /// duplication: the flags plus lane counts and the (finite in practice)
    /// set of posted speed limits. Distance and heading offset are
    /// continuous regression targets and are never balanced.
    pub fn is_categorical(&self) -> bool {
        self.is_binary() || matches!(self, Task::NumLanes | Task::SpeedLimit)
    }
}

/// What to cut out of the panorama: world heading of the crop center plus
/// the fixed perspective geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSpec {
    pub pano_id: String,
    /// World azimuth of the crop center, `[0, 360)`.
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub fov_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl CropSpec {
    pub fn new(pano_id: &str, heading_deg: f64, cfg: &ThresholdConfig) -> CropSpec {
        CropSpec {
            pano_id: pano_id.to_string(),
            heading_deg: wrap360(heading_deg),
            pitch_deg: 0.0,
            fov_deg: cfg.crop_fov_deg,
            width_px: cfg.crop_px,
            height_px: cfg.crop_px,
        }
    }
}

/// A task label. The variant fixes the task; see [`AttributeLabel::task`].
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeLabel {
    IntersectionPresence(bool),
    IntersectionDistance(f64),
    Driveable(bool),
    HeadingAngle(f64),
    BikeLane(bool),
    SpeedLimit(f64),
    OneWay(bool),
    WrongWay(bool),
    NumLanes(u32),
}

impl AttributeLabel {
    pub fn task(&self) -> Task {
        match self {
            AttributeLabel::IntersectionPresence(_) => Task::Intersection,
            AttributeLabel::IntersectionDistance(_) => Task::IntersectionDistance,
            AttributeLabel::Driveable(_) => Task::Driveable,
            AttributeLabel::HeadingAngle(_) => Task::HeadingAngle,
            AttributeLabel::BikeLane(_) => Task::BikeLane,
            AttributeLabel::SpeedLimit(_) => Task::SpeedLimit,
            AttributeLabel::OneWay(_) => Task::OneWay,
            AttributeLabel::WrongWay(_) => Task::WrongWay,
            AttributeLabel::NumLanes(_) => Task::NumLanes,
        }
    }

    /// Flag value for binary tasks.
    pub fn as_flag(&self) -> Option<bool> {
        match *self {
            AttributeLabel::IntersectionPresence(b)
            | AttributeLabel::Driveable(b)
            | AttributeLabel::BikeLane(b)
            | AttributeLabel::OneWay(b)
            | AttributeLabel::WrongWay(b) => Some(b),
            _ => None,
        }
    }

    /// Numeric value for regression-style tasks (lane counts included).
    pub fn as_number(&self) -> Option<f64> {
        match *self {
            AttributeLabel::IntersectionDistance(v)
            | AttributeLabel::HeadingAngle(v)
            | AttributeLabel::SpeedLimit(v) => Some(v),
            AttributeLabel::NumLanes(n) => Some(n as f64),
            _ => None,
        }
    }
}

/// Where a sample goes at training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn from_str(s: &str) -> Option<Split> {
        match s {
            "unassigned" => Some(Split::Unassigned),
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One labeled crop, ready for the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    pub crop: CropSpec,
    pub label: AttributeLabel,
    pub way_id: i64,
    pub split: Split,
    /// Free-text note recording the geometry the label came from.
    pub provenance: String,
}

/// Which side of the road the curb (and any bike lane) is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handedness {
    Right,
    Left,
}

/// Knobs for sample generation beyond the shared thresholds.
#[derive(Debug, Clone, Copy)]
pub struct LabelOptions {
    /// Global seed; every RNG stream is derived from it.
    pub seed: u64,
    /// Random view directions drawn per panorama for the driveable task.
    pub driveable_crops: u32,
    /// Draw multiplier for the heading-angle and wrong-way tasks.
    pub repeat: u32,
    /// Traffic handedness; flips the bike-lane crop to forward minus 45 and
    /// reads `cycleway:left` instead of `cycleway:right`.
    pub handedness: Handedness,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            seed: 0,
            driveable_crops: 4,
            repeat: 1,
            handedness: Handedness::Right,
        }
    }
}

/// The nearest junction to a panorama, as used by several labelers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestJunction {
    /// Index into the junction list this was computed from.
    pub index: usize,
    pub node_id: i64,
    /// Straight-line distance in the projection plane, meters.
    pub distance_m: f64,
    /// Bearing from the panorama to the junction node.
    pub bearing_deg: f64,
}

/// Projected junction positions for fast nearest-junction lookups.
pub struct JunctionIndex {
    junctions: Vec<Junction>,
    points: Vec<PlanePoint>,
}

impl JunctionIndex {
    pub fn build(junctions: Vec<Junction>, projector: &Projector) -> JunctionIndex {
        let points = junctions
            .iter()
            .map(|j| projector.project(&j.point))
            .collect();
        JunctionIndex { junctions, points }
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn is_empty(&self) -> bool {
        self.junctions.is_empty()
    }

    /// Nearest junction to a plane point; ties go to the first (lowest node
    /// id, since junctions are sorted) for determinism.
    pub fn nearest(&self, p: &PlanePoint) -> Option<NearestJunction> {
        let mut best: Option<NearestJunction> = None;
        for (i, jp) in self.points.iter().enumerate() {
            let d = p.distance(jp);
            if best.map(|b| d < b.distance_m).unwrap_or(true) {
                best = Some(NearestJunction {
                    index: i,
                    node_id: self.junctions[i].node_id,
                    distance_m: d,
                    bearing_deg: bearing_deg(p, jp),
                });
            }
        }
        best
    }
}

/// Everything a labeler needs to know about one panorama.
pub struct PanoLabelContext<'a> {
    pub pano: &'a PanoMeta,
    pub m: &'a MatchResult,
    pub way: &'a OsmWay,
    /// Nearest junction, if the network has any.
    pub junction: Option<NearestJunction>,
}

impl<'a> PanoLabelContext<'a> {
    /// Distance to the nearest junction, infinity when there is none —
    /// which makes every pano "far from a junction" for the eligibility
    /// rules, exactly the intended degenerate behavior.
    pub fn junction_distance(&self) -> f64 {
        self.junction.map(|j| j.distance_m).unwrap_or(f64::INFINITY)
    }
}

// ---------------------------------------------------------------------------
// Deterministic identity and RNG streams
// ---------------------------------------------------------------------------

/// Independent RNG stream for one purpose, keyed by the global seed plus
/// any number of name parts. Two streams with different parts never
/// correlate, and a stream's draws do not depend on what other streams were
/// used before it — so parallel workers get identical results in any order.
pub fn stream_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in parts {
        h.update([0x1f]);
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// RNG stream for one (seed, pano, task) triple.
pub fn task_rng(seed: u64, pano_id: &str, task: Task) -> ChaCha8Rng {
    stream_rng(seed, &[pano_id, task.as_str()])
}

/// Deterministic sample id: a 16-hex-digit hash of the pano, task, draw
/// ordinal, and the exact crop-heading bits. Hashing the f64 bit pattern
/// (not a decimal rendering) keeps ids stable no matter how floats are
/// printed downstream.
pub fn sample_id(pano_id: &str, task: Task, ordinal: u32, heading_deg: f64) -> String {
    let mut h = Sha256::new();
    h.update(pano_id.as_bytes());
    h.update([0x1f]);
    h.update(task.as_str().as_bytes());
    h.update(ordinal.to_le_bytes());
    h.update(heading_deg.to_bits().to_le_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Tag parsing
// ---------------------------------------------------------------------------

/// Parse an OSM `maxspeed` value into miles per hour. `"N mph"` is taken
/// verbatim; a bare number is km/h by OSM convention and converted; anything
/// else ("signals", lists, ...) yields no value.
pub fn parse_maxspeed(text: &str) -> Option<f64> {
    let t = text.trim().to_ascii_lowercase();
    if let Some(rest) = t.strip_suffix("mph") {
        return parse_speed_number(rest.trim_end());
    }
    if let Some(rest) = t.strip_suffix("km/h") {
        return parse_speed_number(rest.trim_end()).map(|v| v * KMH_TO_MPH);
    }
    parse_speed_number(&t).map(|v| v * KMH_TO_MPH)
}

fn parse_speed_number(s: &str) -> Option<f64> {
    let v: f64 = s.trim().parse().ok()?;
    (v.is_finite() && v > 0.0).then_some(v)
}

/// Parse an OSM `lanes` value: a single positive integer, or nothing.
/// Lane lists like `"2;3"` are deliberately unparseable.
pub fn parse_lanes(text: &str) -> Option<u32> {
    let n: u32 = text.trim().parse().ok()?;
    (n >= 1).then_some(n)
}

// ---------------------------------------------------------------------------
// Pure classification cores (the boundary rules live here)
// ---------------------------------------------------------------------------

/// Is a view direction driveable? True iff it is within `tol_deg`
/// (inclusive) of some true road heading.
pub fn classify_driveable(crop_heading_deg: f64, truth_headings: &[f64], tol_deg: f64) -> bool {
    truth_headings
        .iter()
        .any(|t| angdiff_deg(crop_heading_deg, *t).abs() <= tol_deg)
}

/// Right-way / wrong-way classification of a view direction. `Some(false)`
/// = facing within `tol_deg` (inclusive) of the forward road heading,
/// `Some(true)` = within tolerance of the backward heading, `None` =
/// outside both bands (such crops are never generated, but the rule is
/// total for testing).
pub fn classify_facing(crop_heading_deg: f64, forward_deg: f64, tol_deg: f64) -> Option<bool> {
    if angdiff_deg(crop_heading_deg, forward_deg).abs() <= tol_deg {
        Some(false)
    } else if angdiff_deg(crop_heading_deg, forward_deg + 180.0).abs() <= tol_deg {
        Some(true)
    } else {
        None
    }
}

/// The set of true road headings at a panorama: both tangent senses of the
/// matched segment (a road points both ways, geometrically — legality is
/// the wrong-way task's business), plus, when a junction is within the
/// positive-intersection radius, the bearing from the panorama toward each
/// arm's first neighbor node.
pub fn truth_headings(
    network: &RoadNetwork,
    projector: &Projector,
    ctx: &PanoLabelContext,
    cfg: &ThresholdConfig,
) -> Vec<f64> {
    let fwd = ctx.m.forward_heading_deg;
    let mut out = vec![fwd, wrap360(fwd + 180.0)];
    if let Some(j) = &ctx.junction {
        // A junction within the positive-intersection radius contributes its
        // arms: from the pano's viewpoint each arm reads as a road leaving
        // the frame toward that arm's first node.
        if j.distance_m <= cfg.inter_pos_max_m {
            if let Some(junction) = junction_arms_at(network, projector, j.node_id) {
                for arm in &junction.arms {
                    if let Some(node) = network.node(arm.toward_node) {
                        let target = projector.project(&node.point);
                        out.push(bearing_deg(&ctx.m.pano_plane, &target));
                    }
                }
            }
        }
    }
    out
}

// Labelers receive only a NearestJunction (node id + geometry); the arms of
// that one junction are rebuilt from incidence on demand.
fn junction_arms_at(network: &RoadNetwork, projector: &Projector, node_id: i64) -> Option<Junction> {
    let node = network.node(node_id)?;
    let here = projector.project(&node.point);
    let mut arms = Vec::new();
    for &(wid, pos) in network.incidence(node_id) {
        let way = network.way(wid)?;
        if pos > 0 {
            let toward = way.node_ids[pos - 1];
            let there = projector.project(&network.node(toward)?.point);
            arms.push(crate::osmnet::JunctionArm {
                way_id: wid,
                toward_node: toward,
                heading_deg: bearing_deg(&here, &there),
            });
        }
        if pos + 1 < way.node_ids.len() {
            let toward = way.node_ids[pos + 1];
            let there = projector.project(&network.node(toward)?.point);
            arms.push(crate::osmnet::JunctionArm {
                way_id: wid,
                toward_node: toward,
                heading_deg: bearing_deg(&here, &there),
            });
        }
    }
    Some(Junction {
        node_id,
        point: node.point,
        arms,
    })
}

// ---------------------------------------------------------------------------
// The nine labelers
// ---------------------------------------------------------------------------

struct SampleBuilder<'a> {
    ctx: &'a PanoLabelContext<'a>,
    cfg: &'a ThresholdConfig,
    out: Vec<LabeledSample>,
}

impl<'a> SampleBuilder<'a> {
    fn push(&mut self, task_ordinal: u32, heading_deg: f64, label: AttributeLabel) {
        let task = label.task();
        let crop = CropSpec::new(&self.ctx.pano.pano_id, heading_deg, self.cfg);
        let jd = match self.ctx.junction {
            Some(j) => format!("{:.6}", j.distance_m),
            None => "none".to_string(),
        };
        let provenance = format!(
            "way={} seg={} d={:.6} jd={}",
            self.ctx.m.way_id, self.ctx.m.segment_index, self.ctx.m.distance_m, jd
        );
        self.out.push(LabeledSample {
            sample_id: sample_id(&self.ctx.pano.pano_id, task, task_ordinal, crop.heading_deg),
            crop,
            label,
            way_id: self.ctx.m.way_id,
            split: Split::Unassigned,
            provenance,
        });
    }
}

/// Intersection presence: positive at or under the positive radius (crop
/// faces the junction), negative at or over the negative radius (crop faces
/// forward), nothing in the ambiguous band between.
fn label_intersection(b: &mut SampleBuilder) {
    let d = b.ctx.junction_distance();
    if d <= b.cfg.inter_pos_max_m {
        let j = b.ctx.junction.expect("finite distance implies a junction");
        b.push(0, j.bearing_deg, AttributeLabel::IntersectionPresence(true));
    } else if d >= b.cfg.inter_neg_min_m {
        b.push(
            0,
            b.ctx.m.forward_heading_deg,
            AttributeLabel::IntersectionPresence(false),
        );
    }
}

/// Intersection distance: regression target attached to positives only.
fn label_intersection_distance(b: &mut SampleBuilder) {
    let d = b.ctx.junction_distance();
    if d <= b.cfg.inter_pos_max_m {
        if d <= 0.0 {
            // A pano exactly on the junction node has no direction toward it
            // and a zero distance violates the (0, max] label range.
            log::warn!(
                "pano {}: exactly on junction node, skipping distance sample",
                b.ctx.pano.pano_id
            );
            return;
        }
        let j = b.ctx.junction.expect("finite distance implies a junction");
        b.push(0, j.bearing_deg, AttributeLabel::IntersectionDistance(d));
    }
}

/// Driveable headings: draw uniform view directions and classify each
/// against the true heading set.
fn label_driveable(
    b: &mut SampleBuilder,
    truths: &[f64],
    n_headings: u32,
    rng: &mut ChaCha8Rng,
) {
    for k in 0..n_headings {
        let h = rng.random_range(0.0..360.0);
        let flag = classify_driveable(h, truths, b.cfg.driveable_tol_deg);
        b.push(k, h, AttributeLabel::Driveable(flag));
    }
}

/// Heading angle: only away from junctions (strictly beyond the exclusion
/// radius); the label is exactly the drawn offset.
fn label_heading_angle(b: &mut SampleBuilder, repeat: u32, rng: &mut ChaCha8Rng) {
    if b.ctx.junction_distance() <= b.cfg.heading_excl_m {
        return;
    }
    let max = b.cfg.heading_max_offset_deg;
    for k in 0..repeat {
        let delta = rng.random_range(-max..=max);
        let crop = wrap360(b.ctx.m.forward_heading_deg + delta);
        b.push(k, crop, AttributeLabel::HeadingAngle(delta));
    }
}

/// Bike lane: crop toward the curb side; label from the cycleway tagging.
/// `"lane"` is positive, absent or `"no"` negative, anything else (track,
/// shared_lane, opposite_lane, ...) is not a trainable sample.
fn label_bike_lane(b: &mut SampleBuilder, handedness: Handedness) {
    let side_key = match handedness {
        Handedness::Right => "cycleway:right",
        Handedness::Left => "cycleway:left",
    };
    let tag = b
        .ctx
        .way
        .tags
        .get(side_key)
        .or_else(|| b.ctx.way.tags.get("cycleway"))
        .map(String::as_str);
    let flag = match tag {
        None | Some("no") => false,
        Some("lane") => true,
        Some(other) => {
            log::debug!(
                "way {}: cycleway value {:?} is not a bike-lane training case",
                b.ctx.way.id,
                other
            );
            return;
        }
    };
    let sign = match handedness {
        Handedness::Right => 1.0,
        Handedness::Left => -1.0,
    };
    let crop = wrap360(b.ctx.m.forward_heading_deg + sign * b.cfg.bike_crop_offset_deg);
    b.push(0, crop, AttributeLabel::BikeLane(flag));
}

/// Speed limit: transferred straight from the parsed tag, in mph.
fn label_speed_limit(b: &mut SampleBuilder) {
    if let Some(tag) = b.ctx.way.tags.get("maxspeed") {
        match parse_maxspeed(tag) {
            Some(mph) => b.push(0, b.ctx.m.forward_heading_deg, AttributeLabel::SpeedLimit(mph)),
            None => log::debug!(
                "way {}: maxspeed {:?} not parseable, no speed sample",
                b.ctx.way.id,
                tag
            ),
        }
    }
}

/// One-way flag for every matched pano, facing forward.
fn label_one_way(b: &mut SampleBuilder) {
    b.push(
        0,
        b.ctx.m.forward_heading_deg,
        AttributeLabel::OneWay(b.ctx.m.travel.is_one_way()),
    );
}

/// Wrong-way pairs: a right-way crop jittered around forward, a wrong-way
/// crop jittered around backward.
fn label_wrong_way(b: &mut SampleBuilder, repeat: u32, rng: &mut ChaCha8Rng) {
    let tol = b.cfg.wrongway_tol_deg;
    let fwd = b.ctx.m.forward_heading_deg;
    for k in 0..repeat {
        let u = rng.random_range(-tol..=tol);
        b.push(2 * k, wrap360(fwd + u), AttributeLabel::WrongWay(false));
        let u2 = rng.random_range(-tol..=tol);
        b.push(2 * k + 1, wrap360(fwd + 180.0 + u2), AttributeLabel::WrongWay(true));
    }
}

/// Lane count: one-way roads with a cleanly integer `lanes` tag only.
fn label_num_lanes(b: &mut SampleBuilder) {
    if !b.ctx.m.travel.is_one_way() {
        return;
    }
    if let Some(n) = b.ctx.way.tags.get("lanes").and_then(|t| parse_lanes(t)) {
        b.push(0, b.ctx.m.forward_heading_deg, AttributeLabel::NumLanes(n));
    }
}

/// Run all nine labelers for one matched panorama.
pub fn label_pano(
    network: &RoadNetwork,
    projector: &Projector,
    ctx: &PanoLabelContext,
    cfg: &ThresholdConfig,
    opts: &LabelOptions,
) -> Vec<LabeledSample> {
    let mut b = SampleBuilder {
        ctx,
        cfg,
        out: Vec::new(),
    };
    label_intersection(&mut b);
    label_intersection_distance(&mut b);
    let truths = truth_headings(network, projector, ctx, cfg);
    let mut rng = task_rng(opts.seed, &ctx.pano.pano_id, Task::Driveable);
    label_driveable(&mut b, &truths, opts.driveable_crops, &mut rng);
    let mut rng = task_rng(opts.seed, &ctx.pano.pano_id, Task::HeadingAngle);
    label_heading_angle(&mut b, opts.repeat, &mut rng);
    label_bike_lane(&mut b, opts.handedness);
    label_speed_limit(&mut b);
    label_one_way(&mut b);
    let mut rng = task_rng(opts.seed, &ctx.pano.pano_id, Task::WrongWay);
    label_wrong_way(&mut b, opts.repeat, &mut rng);
    label_num_lanes(&mut b);
    b.out
}

/// Label every matched panorama. Matches beyond the off-road radius are
/// skipped with a warning — nothing downstream may ever see them — and the
/// output preserves input order regardless of thread count.
pub fn label_all(
    network: &RoadNetwork,
    projector: &Projector,
    matches: &[MatchResult],
    panos: &BTreeMap<String, PanoMeta>,
    jindex: &JunctionIndex,
    cfg: &ThresholdConfig,
    opts: &LabelOptions,
) -> Result<Vec<LabeledSample>> {
    let per_pano: Vec<Vec<LabeledSample>> = matches
        .par_iter()
        .map(|m| -> Result<Vec<LabeledSample>> {
            if m.distance_m > cfg.offroad_max_m {
                log::warn!(
                    "pano {}: match distance {:.2} m exceeds off-road limit, skipping",
                    m.pano_id,
                    m.distance_m
                );
                return Ok(Vec::new());
            }
            let pano = panos
                .get(&m.pano_id)
                .ok_or_else(|| Error::Data(format!("no metadata for matched pano {}", m.pano_id)))?;
            let way = network
                .way(m.way_id)
                .ok_or_else(|| Error::Data(format!("matched way {} not in network", m.way_id)))?;
            let ctx = PanoLabelContext {
                pano,
                m,
                way,
                junction: jindex.nearest(&m.pano_plane),
            };
            Ok(label_pano(network, projector, &ctx, cfg, opts))
        })
        .collect::<Result<_>>()?;
    Ok(per_pano.into_iter().flatten().collect())
}

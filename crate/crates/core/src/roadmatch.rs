//! Panorama-to-road matching: a uniform-grid spatial index with an exact
//! expanding-ring nearest-segment search, plus the threshold knobs shared by
//! the whole pipeline.
//!
//! Exactness matters more than raw speed here: downstream labels flip on
//! strict distance comparisons, so the grid search must return *the same*
//! segment a brute-force scan over every segment would, ties included. Ties
//! (equal distance) resolve to the smallest `(way id, segment index)`, and
//! the ring search only stops once the best hit is strictly closer than
//! anything an unexamined cell could contain, so no equal-distance candidate
//! outside the ring can ever be cut off.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{
    angdiff_deg, point_segment_distance, wrap360, PlanePoint, Projector,
};
use crate::osmnet::{travel_directions, RoadNetwork, TravelDirections};
use crate::panograph::PanoMeta;

/// Every numeric decision boundary in the pipeline, in one bag, so a run can
/// be reproduced from its manifest header alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Panoramas farther than this from every road are off-road and excluded
    /// from labeling entirely. The boundary itself is kept.
    pub offroad_max_m: f64,
    /// Junction distance at or below which an intersection sample is
    /// positive.
    pub inter_pos_max_m: f64,
    /// Junction distance at or above which an intersection sample is
    /// negative. The band in between yields no sample. Must exceed
    /// `inter_pos_max_m`.
    pub inter_neg_min_m: f64,
    /// A crop heading within this many degrees of a legal travel direction
    /// counts as driveable (inclusive).
    pub driveable_tol_deg: f64,
    /// Heading-offset crops are drawn uniformly from plus/minus this range.
    pub heading_max_offset_deg: f64,
    /// No heading-offset sample when a junction is this close or closer:
    /// turning arms make "the" road direction ambiguous.
    pub heading_excl_m: f64,
    /// Bike-lane crops look this far to the curb side of the travel
    /// direction.
    pub bike_crop_offset_deg: f64,
    /// Wrong-way crop jitter: drawn uniformly from plus/minus this range
    /// around the legal (and the illegal) direction.
    pub wrongway_tol_deg: f64,
    /// Horizontal field of view of perspective crops, degrees.
    pub crop_fov_deg: f64,
    /// Output crop size in pixels (square).
    pub crop_px: u32,
    /// Fraction of panoramas assigned to the training side of the
    /// longitude split.
    pub train_fraction: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            offroad_max_m: 10.5,
            inter_pos_max_m: 30.0,
            inter_neg_min_m: 100.0,
            driveable_tol_deg: 22.5,
            heading_max_offset_deg: 60.0,
            heading_excl_m: 30.0,
            bike_crop_offset_deg: 45.0,
            wrongway_tol_deg: 22.5,
            crop_fov_deg: 100.0,
            crop_px: 227,
            train_fraction: 0.8,
        }
    }
}

impl ThresholdConfig {
    /// Sanity-check the whole bag; call once after assembling a run config.
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.offroad_max_m, "offroad_max_m")?;
        pos(self.inter_pos_max_m, "inter_pos_max_m")?;
        pos(self.inter_neg_min_m, "inter_neg_min_m")?;
        pos(self.heading_excl_m, "heading_excl_m")?;
        if self.inter_neg_min_m <= self.inter_pos_max_m {
            return Err(Error::Validation(format!(
                "inter_neg_min_m ({}) must exceed inter_pos_max_m ({})",
                self.inter_neg_min_m, self.inter_pos_max_m
            )));
        }
        for (v, name) in [
            (self.driveable_tol_deg, "driveable_tol_deg"),
            (self.heading_max_offset_deg, "heading_max_offset_deg"),
            (self.bike_crop_offset_deg, "bike_crop_offset_deg"),
            (self.wrongway_tol_deg, "wrongway_tol_deg"),
        ] {
            if !(v.is_finite() && v > 0.0 && v < 180.0) {
                return Err(Error::Validation(format!(
                    "{name} must be in (0, 180), got {v}"
                )));
            }
        }
        if !(self.crop_fov_deg > 0.0 && self.crop_fov_deg < 180.0) {
            return Err(Error::Validation(format!(
                "crop_fov_deg must be in (0, 180), got {}",
                self.crop_fov_deg
            )));
        }
        if self.crop_px == 0 {
            return Err(Error::Validation("crop_px must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Which side of the travel direction the camera sits on. A point exactly on
/// the line counts as Right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One panorama matched to its nearest road segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pano_id: String,
    pub way_id: i64,
    pub segment_index: usize,
    /// Distance from the panorama to the closest point on the segment.
    pub distance_m: f64,
    /// Clamp parameter along the segment.
    pub t: f64,
    /// Closest point on the segment, projection plane.
    pub closest: PlanePoint,
    /// Panorama position, projection plane.
    pub pano_plane: PlanePoint,
    /// Direction of travel the vehicle was most plausibly following,
    /// degrees clockwise from north.
    pub forward_heading_deg: f64,
    pub side: Side,
    pub travel: TravelDirections,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    way_id: i64,
    seg_idx: u32,
    a: PlanePoint,
    b: PlanePoint,
}

/// A candidate returned by the nearest-segment search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestHit {
    pub way_id: i64,
    pub segment_index: usize,
    pub distance_m: f64,
    pub t: f64,
    pub closest: PlanePoint,
}

/// Uniform-grid index over every road segment, in projection-plane meters.
pub struct SpatialIndex {
    segments: Vec<Segment>,
    grid: HashMap<(i32, i32), Vec<u32>>,
    cell_size: f64,
    /// Occupied cell bounds (min x, min y, max x, max y); None when empty.
    cell_bounds: Option<(i32, i32, i32, i32)>,
}

pub const DEFAULT_CELL_SIZE_M: f64 = 50.0;

impl SpatialIndex {
    /// Project every way polyline and register each segment in all grid
    /// cells its bounding box overlaps. Iteration order is (way id, segment
    /// index) ascending, which also defines the brute-force tie-break order.
    pub fn build(network: &RoadNetwork, projector: &Projector, cell_size: f64) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Validation(format!(
                "cell_size must be positive, got {cell_size}"
            )));
        }
        let mut segments = Vec::with_capacity(network.segment_count());
        let mut grid: HashMap<(i32, i32), Vec<u32>> = HashMap::new();
        let mut cell_bounds: Option<(i32, i32, i32, i32)> = None;
        for (&way_id, way) in network.ways() {
            let pts: Vec<PlanePoint> = way
                .node_ids
                .iter()
                .map(|nid| projector.project(&network.node(*nid).expect("validated ref").point))
                .collect();
            for (i, w) in pts.windows(2).enumerate() {
                let idx = segments.len() as u32;
                let (a, b) = (w[0], w[1]);
                segments.push(Segment {
                    way_id,
                    seg_idx: i as u32,
                    a,
                    b,
                });
                let cx0 = cell_of(a.x.min(b.x), cell_size);
                let cx1 = cell_of(a.x.max(b.x), cell_size);
                let cy0 = cell_of(a.y.min(b.y), cell_size);
                let cy1 = cell_of(a.y.max(b.y), cell_size);
                for cx in cx0..=cx1 {
                    for cy in cy0..=cy1 {
                        grid.entry((cx, cy)).or_default().push(idx);
                    }
                }
                let bnd = cell_bounds.get_or_insert((cx0, cy0, cx1, cy1));
                bnd.0 = bnd.0.min(cx0);
                bnd.1 = bnd.1.min(cy0);
                bnd.2 = bnd.2.max(cx1);
                bnd.3 = bnd.3.max(cy1);
            }
        }
        Ok(SpatialIndex {
            segments,
            grid,
            cell_size,
            cell_bounds,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Exact nearest segment via expanding rings. Stops only when the best
    /// hit is *strictly* closer than the nearest point any unexamined cell
    /// could hold, so the result (including the smallest-(way, segment)
    /// tie rule) is identical to [`SpatialIndex::nearest_brute_force`].
    pub fn nearest(&self, p: &PlanePoint) -> Option<NearestHit> {
        let (bx0, by0, bx1, by1) = self.cell_bounds?;
        let s = self.cell_size;
        let qx = cell_of(p.x, s);
        let qy = cell_of(p.y, s);
        // Enough rings to cover every occupied cell from the query cell.
        let max_ring = [
            (qx - bx0).abs(),
            (qx - bx1).abs(),
            (qy - by0).abs(),
            (qy - by1).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);

        let mut best: Option<(f64, i64, u32, f64, PlanePoint)> = None;
        for ring in 0..=max_ring {
            for (cx, cy) in ring_cells(qx, qy, ring) {
                let Some(bucket) = self.grid.get(&(cx, cy)) else {
                    continue;
                };
                for &idx in bucket {
                    let seg = &self.segments[idx as usize];
                    let hit = point_segment_distance(p, &seg.a, &seg.b);
                    let cand = (hit.distance_m, seg.way_id, seg.seg_idx, hit.t, hit.closest);
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            cand.0 < b.0
                                || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2))
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            if let Some(b) = &best {
                // Everything unexamined lies outside the square of cells
                // [qx-ring ..= qx+ring] x [qy-ring ..= qy+ring]; its distance
                // is at least the distance from p to that square's boundary.
                let lo_x = (qx - ring) as f64 * s;
                let hi_x = (qx + ring + 1) as f64 * s;
                let lo_y = (qy - ring) as f64 * s;
                let hi_y = (qy + ring + 1) as f64 * s;
                let exterior = (p.x - lo_x)
                    .min(hi_x - p.x)
                    .min(p.y - lo_y)
                    .min(hi_y - p.y);
                if b.0 < exterior {
                    break;
                }
            }
        }
        best.map(|(d, way, seg, t, closest)| NearestHit {
            way_id: way,
            segment_index: seg as usize,
            distance_m: d,
            t,
            closest,
        })
    }

    /// Reference implementation: scan every segment. Used to verify the
    /// ring search and by tests; same tie rule by construction.
    pub fn nearest_brute_force(&self, p: &PlanePoint) -> Option<NearestHit> {
        let mut best: Option<NearestHit> = None;
        for seg in &self.segments {
            let hit = point_segment_distance(p, &seg.a, &seg.b);
            let better = match &best {
                None => true,
                Some(b) => {
                    hit.distance_m < b.distance_m
                        || (hit.distance_m == b.distance_m
                            && (seg.way_id, seg.seg_idx as usize)
                                < (b.way_id, b.segment_index))
                }
            };
            if better {
                best = Some(NearestHit {
                    way_id: seg.way_id,
                    segment_index: seg.seg_idx as usize,
                    distance_m: hit.distance_m,
                    t: hit.t,
                    closest: hit.closest,
                });
            }
        }
        best
    }
}

fn cell_of(v: f64, cell_size: f64) -> i32 {
    (v / cell_size).floor() as i32
}

/// All cells at Chebyshev distance exactly `ring` from `(qx, qy)`.
fn ring_cells(qx: i32, qy: i32, ring: i32) -> Vec<(i32, i32)> {
    if ring == 0 {
        return vec![(qx, qy)];
    }
    let mut out = Vec::with_capacity((8 * ring) as usize);
    for cx in (qx - ring)..=(qx + ring) {
        out.push((cx, qy - ring));
        out.push((cx, qy + ring));
    }
    for cy in (qy - ring + 1)..(qy + ring) {
        out.push((qx - ring, cy));
        out.push((qx + ring, cy));
    }
    out
}

/// The travel direction the vehicle was following on this way.
///
/// One-way tags win outright: if the vehicle azimuth disagrees with the
/// legal direction by more than 90 degrees that is logged as data noise but
/// the tag still decides. Two-way roads take whichever segment sense is
/// closer to the vehicle azimuth; an exact right-angle tie keeps node order.
pub fn forward_heading(
    segment_heading_deg: f64,
    travel: TravelDirections,
    pano_azimuth_deg: f64,
    pano_id: &str,
    way_id: i64,
) -> f64 {
    let fwd = segment_heading_deg;
    let bwd = wrap360(segment_heading_deg + 180.0);
    match travel {
        TravelDirections::ForwardOnly | TravelDirections::BackwardOnly => {
            let legal = if travel == TravelDirections::ForwardOnly {
                fwd
            } else {
                bwd
            };
            if angdiff_deg(legal, pano_azimuth_deg).abs() > 90.0 {
                log::warn!(
                    "pano {pano_id} on one-way way {way_id}: vehicle azimuth {:.1} opposes \
                     legal direction {:.1}; keeping the tag's direction",
                    pano_azimuth_deg,
                    legal
                );
            }
            legal
        }
        TravelDirections::Both => {
            let d_fwd = angdiff_deg(fwd, pano_azimuth_deg).abs();
            let d_bwd = angdiff_deg(bwd, pano_azimuth_deg).abs();
            if d_bwd < d_fwd {
                bwd
            } else {
                fwd
            }
        }
    }
}

/// Which side of the (directed) travel line a point falls on.
pub fn side_of(forward_heading_deg: f64, closest: &PlanePoint, pano: &PlanePoint) -> Side {
    let h = forward_heading_deg.to_radians();
    let (ux, uy) = (h.sin(), h.cos());
    let (vx, vy) = (pano.x - closest.x, pano.y - closest.y);
    let cross = ux * vy - uy * vx;
    if cross > 0.0 {
        Side::Left
    } else {
        Side::Right
    }
}

/// Match every panorama to its nearest road segment and derive the travel
/// direction and camera side. Panoramas are processed in input order and
/// the output preserves it, so results do not depend on thread count.
pub fn match_panos(
    network: &RoadNetwork,
    projector: &Projector,
    index: &SpatialIndex,
    panos: &[PanoMeta],
) -> Result<Vec<MatchResult>> {
    if index.segment_count() == 0 {
        return Err(Error::Data(
            "cannot match panoramas: the road network has no segments".into(),
        ));
    }
    panos
        .par_iter()
        .map(|pano| {
            let p = projector.project(&pano.point);
            let hit = index.nearest(&p).expect("non-empty index");
            let way = network.way(hit.way_id).expect("indexed way exists");
            let travel = travel_directions(way);
            let seg_heading = network
                .segment_heading(projector, hit.way_id, hit.segment_index)
                .expect("indexed segment exists");
            let fwd = forward_heading(seg_heading, travel, pano.azimuth_deg, &pano.pano_id, hit.way_id);
            Ok(MatchResult {
                pano_id: pano.pano_id.clone(),
                way_id: hit.way_id,
                segment_index: hit.segment_index,
                distance_m: hit.distance_m,
                t: hit.t,
                closest: hit.closest,
                pano_plane: p,
                forward_heading_deg: fwd,
                side: side_of(fwd, &hit.closest, &p),
                travel,
            })
        })
        .collect()
}

/// Split matches into on-road (kept, `distance <= offroad_max_m`, boundary
/// inclusive) and off-road (rejected).
pub fn filter_offroad(
    matches: Vec<MatchResult>,
    cfg: &ThresholdConfig,
) -> (Vec<MatchResult>, Vec<MatchResult>) {
    matches
        .into_iter()
        .partition(|m| m.distance_m <= cfg.offroad_max_m)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use crate::geo::GeoPoint;
    use crate::osmnet::{OsmNode, OsmWay};

    use super::*;

    fn grid_projector() -> Projector {
        Projector::new(GeoPoint::new(0.0, 0.0).unwrap()).unwrap()
    }

    /// Build a network whose projected coordinates are (approximately) the
    /// given plane coordinates, by inverting the projection up front.
    fn net_from_plane(ways: &[(i64, Vec<(f64, f64)>)]) -> (RoadNetwork, Projector) {
        let projector = grid_projector();
        let mut nodes = Vec::new();
        let mut osm_ways = Vec::new();
        let mut next_node = 1i64;
        for (wid, pts) in ways {
            let mut ids = Vec::new();
            for &(x, y) in pts {
                let gp = projector.unproject(&PlanePoint::new(x, y));
                nodes.push(OsmNode {
                    id: next_node,
                    point: gp,
                    tags: BTreeMap::new(),
                });
                ids.push(next_node);
                next_node += 1;
            }
            osm_ways.push(OsmWay {
                id: *wid,
                node_ids: ids,
                tags: BTreeMap::new(),
            });
        }
        (RoadNetwork::new(nodes, osm_ways).unwrap(), projector)
    }

    #[test]
    fn default_config_is_valid() {
        ThresholdConfig::default().validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_conflicts() {
        let mut cfg = ThresholdConfig::default();
        cfg.inter_neg_min_m = 30.0;
        assert!(cfg.validate().is_err(), "neg boundary must exceed pos");
        let mut cfg = ThresholdConfig::default();
        cfg.offroad_max_m = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ThresholdConfig::default();
        cfg.train_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ThresholdConfig::default();
        cfg.crop_px = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ThresholdConfig::default();
        cfg.driveable_tol_deg = 180.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nearest_picks_the_closer_way() {
        // Two horizontal ways, y = 0 and y = 100.
        let (net, projector) = net_from_plane(&[
            (1, vec![(0.0, 0.0), (200.0, 0.0)]),
            (2, vec![(0.0, 100.0), (200.0, 100.0)]),
        ]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        let hit = index.nearest(&PlanePoint::new(50.0, 10.0)).unwrap();
        assert_eq!(hit.way_id, 1);
        assert!((hit.distance_m - 10.0).abs() < 1e-9);
        let hit = index.nearest(&PlanePoint::new(50.0, 90.0)).unwrap();
        assert_eq!(hit.way_id, 2);
    }

    #[test]
    fn equidistant_ways_tie_break_to_smaller_way_id() {
        let (net, projector) = net_from_plane(&[
            (7, vec![(0.0, 50.0), (200.0, 50.0)]),
            (3, vec![(0.0, -50.0), (200.0, -50.0)]),
        ]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        // Dead center between the two (plane coordinates round-trip exactly
        // for these values, distance is exactly 50 both ways).
        let hit = index.nearest(&PlanePoint::new(100.0, 0.0)).unwrap();
        assert_eq!(hit.way_id, 3, "smaller way id wins the tie");
        assert_eq!(hit, index.nearest_brute_force(&PlanePoint::new(100.0, 0.0)).unwrap());
    }

    #[test]
    fn corner_tie_breaks_to_smaller_segment_index() {
        // L-shaped way with the corner at (10, 0); a query beyond the corner
        // is equidistant (to the shared node, exactly) from both segments.
        let (net, projector) = net_from_plane(&[(1, vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)])]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        let q = PlanePoint::new(14.0, -3.0);
        let hit = index.nearest(&q).unwrap();
        assert_eq!(hit.segment_index, 0, "smaller segment index wins the tie");
        assert_eq!(hit.t, 1.0);
        assert_eq!(hit, index.nearest_brute_force(&q).unwrap());
    }

    #[test]
    fn far_queries_still_find_the_network() {
        let (net, projector) = net_from_plane(&[(1, vec![(0.0, 0.0), (10.0, 0.0)])]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        let hit = index.nearest(&PlanePoint::new(5000.0, -3000.0)).unwrap();
        assert_eq!(hit.way_id, 1);
        assert_eq!(hit.t, 1.0);
        assert!((hit.distance_m - ((4990.0f64).powi(2) + 3000.0f64.powi(2)).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn empty_network_has_no_nearest() {
        let (net, projector) = net_from_plane(&[]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        assert!(index.nearest(&PlanePoint::new(0.0, 0.0)).is_none());
        assert!(match_panos(&net, &projector, &index, &[]).is_err());
    }

    #[test]
    fn bad_cell_size_is_rejected() {
        let (net, projector) = net_from_plane(&[(1, vec![(0.0, 0.0), (10.0, 0.0)])]);
        assert!(SpatialIndex::build(&net, &projector, 0.0).is_err());
        assert!(SpatialIndex::build(&net, &projector, f64::NAN).is_err());
    }

    #[test]
    fn offroad_filter_keeps_the_boundary() {
        let (net, projector) = net_from_plane(&[(1, vec![(0.0, 0.0), (100.0, 0.0)])]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        let cfg = ThresholdConfig::default();
        let mk_pano = |id: &str, y: f64| PanoMeta {
            pano_id: id.to_string(),
            point: projector.unproject(&PlanePoint::new(50.0, y)),
            azimuth_deg: 90.0,
            neighbors: vec![],
            capture_date: None,
        };
        let panos = [
            mk_pano("on", 10.5),    // exactly at the boundary: kept
            mk_pano("off", 10.501), // just past: rejected
        ];
        let matches = match_panos(&net, &projector, &index, &panos).unwrap();
        // The projection round-trip can wobble the boundary value at the
        // 1e-10 level; assert against the actual computed distances.
        assert!(matches[0].distance_m <= cfg.offroad_max_m);
        assert!(matches[1].distance_m > cfg.offroad_max_m);
        let (kept, rejected) = filter_offroad(matches, &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].pano_id, "on");
        assert_eq!(rejected.len(), 1);
        assert_eq!(rejected[0].pano_id, "off");
    }

    #[test]
    fn forward_heading_follows_tags_and_azimuth() {
        // Segment heading north (0 degrees).
        let both = TravelDirections::Both;
        assert_eq!(forward_heading(0.0, both, 10.0, "p", 1), 0.0);
        assert_eq!(forward_heading(0.0, both, 170.0, "p", 1), 180.0);
        // Exactly perpendicular: node order wins.
        assert_eq!(forward_heading(0.0, both, 90.0, "p", 1), 0.0);
        assert_eq!(forward_heading(0.0, both, 270.0, "p", 1), 0.0);
        // One-way tags override the azimuth, even when it disagrees.
        assert_eq!(
            forward_heading(0.0, TravelDirections::ForwardOnly, 180.0, "p", 1),
            0.0
        );
        assert_eq!(
            forward_heading(0.0, TravelDirections::BackwardOnly, 0.0, "p", 1),
            180.0
        );
    }

    #[test]
    fn side_of_the_travel_line() {
        let on_line = PlanePoint::new(0.0, 0.0);
        // Heading north, camera to the east: right side.
        assert_eq!(side_of(0.0, &on_line, &PlanePoint::new(1.0, 0.0)), Side::Right);
        assert_eq!(side_of(0.0, &on_line, &PlanePoint::new(-1.0, 0.0)), Side::Left);
        // Flip the direction of travel and the side flips.
        assert_eq!(side_of(180.0, &on_line, &PlanePoint::new(1.0, 0.0)), Side::Left);
        // Exactly on the line counts as Right.
        assert_eq!(side_of(0.0, &on_line, &PlanePoint::new(0.0, 5.0)), Side::Right);
    }

    #[test]
    fn match_results_carry_geometry_and_direction() {
        let (net, projector) = net_from_plane(&[(1, vec![(0.0, 0.0), (100.0, 0.0)])]);
        let index = SpatialIndex::build(&net, &projector, DEFAULT_CELL_SIZE_M).unwrap();
        let pano = PanoMeta {
            pano_id: "p".into(),
            point: projector.unproject(&PlanePoint::new(30.0, -4.0)),
            azimuth_deg: 100.0, // roughly eastbound
            neighbors: vec![],
            capture_date: None,
        };
        let m = &match_panos(&net, &projector, &index, &[pano]).unwrap()[0];
        assert_eq!(m.way_id, 1);
        assert_eq!(m.segment_index, 0);
        assert!((m.distance_m - 4.0).abs() < 1e-6);
        assert!((m.forward_heading_deg - 90.0).abs() < 1e-6);
        // Camera south of an eastbound line: right-hand side.
        assert_eq!(m.side, Side::Right);
        assert_eq!(m.travel, TravelDirections::Both);
    }

    proptest! {
        /// The ring search must agree with brute force exactly — same way,
        /// same segment, bitwise-same distance — on arbitrary geometry.
        #[test]
        fn ring_search_matches_brute_force(
            seed_pts in proptest::collection::vec((-400.0f64..400.0, -400.0f64..400.0), 2..40),
            queries in proptest::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 1..40),
            cell in prop_oneof![Just(13.0f64), Just(50.0), Just(120.0)],
        ) {
            // Chain the random points into a handful of ways.
            let mut ways = Vec::new();
            for (i, chunk) in seed_pts.chunks(4).enumerate() {
                if chunk.len() >= 2 {
                    ways.push((i as i64 + 1, chunk.to_vec()));
                }
            }
            prop_assume!(!ways.is_empty());
            let (net, projector) = net_from_plane(
                &ways.iter().map(|(id, pts)| (*id, pts.clone())).collect::<Vec<_>>(),
            );
            let index = SpatialIndex::build(&net, &projector, cell).unwrap();
            for (qx, qy) in queries {
                let q = PlanePoint::new(qx, qy);
                let fast = index.nearest(&q).unwrap();
                let slow = index.nearest_brute_force(&q).unwrap();
                prop_assert_eq!(fast.way_id, slow.way_id);
                prop_assert_eq!(fast.segment_index, slow.segment_index);
                prop_assert_eq!(fast.distance_m.to_bits(), slow.distance_m.to_bits());
            }
        }
    }
}

//! Planar geometry over a local equirectangular projection.
//!
//! Every geometric decision in the pipeline (nearest road, distance to a
//! junction, bearings between points) happens in a local tangent plane, not
//! on the sphere. [`Projector`] maps WGS84 degrees into meters east/north of
//! a reference point using the equirectangular approximation
//!
//! ```text
//! x = (lon - ref.lon) * cos(ref.lat) * R * pi/180
//! y = (lat - ref.lat) * R * pi/180
//! ```
//!
//! with a spherical earth radius of 6 371 000 m. City-scale extents (tens of
//! kilometers, moderate latitudes) keep the error against great-circle
//! distances far below the decision thresholds in this pipeline, and the
//! projection is exactly invertible, which the tests lean on heavily.
//!
//! Angle conventions, used consistently everywhere downstream:
//!
//! * headings/bearings are degrees clockwise from north in `[0, 360)`;
//! * signed angle differences live in `(-180, 180]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean spherical earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters per degree of latitude on the spherical earth (`R * pi / 180`).
pub const METERS_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    /// Validating constructor: coordinates must be finite and inside
    /// `[-90, 90] x [-180, 180]`. All file loaders construct through here so
    /// the rest of the pipeline can assume sane coordinates.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite coordinate ({lat_deg}, {lon_deg})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::Validation(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon_deg) {
            return Err(Error::Validation(format!(
                "longitude {lon_deg} outside [-180, 180]"
            )));
        }
        Ok(GeoPoint { lat_deg, lon_deg })
    }
}

/// A point in the local projection plane, meters east (`x`) and north (`y`)
/// of the projection reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub x: f64,
    pub y: f64,
}

impl PlanePoint {
    pub fn new(x: f64, y: f64) -> Self {
        PlanePoint { x, y }
    }

    /// Euclidean distance to `other` in meters.
    pub fn distance(&self, other: &PlanePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Inclusive geographic bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBounds {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if min_lat > max_lat || min_lon > max_lon {
            return Err(Error::Validation(format!(
                "inverted bounds ({min_lat},{min_lon})..({max_lat},{max_lon})"
            )));
        }
        Ok(GeoBounds {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    /// Inclusive containment on all four edges.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat_deg >= self.min_lat
            && p.lat_deg <= self.max_lat
            && p.lon_deg >= self.min_lon
            && p.lon_deg <= self.max_lon
    }

    /// Midpoint of the box; the default projection reference for a run.
    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat_deg: (self.min_lat + self.max_lat) / 2.0,
            lon_deg: (self.min_lon + self.max_lon) / 2.0,
        }
    }
}

/// Local equirectangular projection anchored at a reference point.
///
/// The cosine of the reference latitude is computed once at construction and
/// reused, so `project` and `unproject` are exact inverses of each other in
/// floating point up to rounding of the two multiplies.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    reference: GeoPoint,
    cos_ref_lat: f64,
}

impl Projector {
    /// Build a projector. The reference must be finite and satisfy
    /// `|lat| < 85` degrees: closer to the poles the cos-latitude scale
    /// collapses and east-west distances degrade too fast to trust.
    pub fn new(reference: GeoPoint) -> Result<Self> {
        GeoPoint::new(reference.lat_deg, reference.lon_deg)?;
        if reference.lat_deg.abs() >= 85.0 {
            return Err(Error::Validation(format!(
                "projection reference latitude {} too close to a pole (|lat| must be < 85)",
                reference.lat_deg
            )));
        }
        Ok(Projector {
            reference,
            cos_ref_lat: reference.lat_deg.to_radians().cos(),
        })
    }

    pub fn reference(&self) -> GeoPoint {
        self.reference
    }

    /// Degrees to local meters.
    pub fn project(&self, p: &GeoPoint) -> PlanePoint {
        PlanePoint {
            x: (p.lon_deg - self.reference.lon_deg) * self.cos_ref_lat * METERS_PER_DEG,
            y: (p.lat_deg - self.reference.lat_deg) * METERS_PER_DEG,
        }
    }

    /// Local meters back to degrees; exact inverse of [`Projector::project`]
    /// up to floating-point rounding.
    pub fn unproject(&self, p: &PlanePoint) -> GeoPoint {
        GeoPoint {
            lat_deg: self.reference.lat_deg + p.y / METERS_PER_DEG,
            lon_deg: self.reference.lon_deg + p.x / (self.cos_ref_lat * METERS_PER_DEG),
        }
    }
}

/// Wrap an angle in degrees into `[0, 360)`.
pub fn wrap360(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid(-1e-17, 360) rounds to 360.0 itself; fold that back.
    if r == 360.0 {
        0.0
    } else {
        r
    }
}

/// Signed difference `a - b` between two headings, normalized into
/// `(-180, 180]`. Antipodal inputs return +180, never -180.
pub fn angdiff_deg(a: f64, b: f64) -> f64 {
    let d = wrap360(a - b);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Bearing from `from` to `to` in the projection plane, degrees clockwise
/// from north in `[0, 360)`. Coincident points give 0 (atan2(0, 0) == 0).
pub fn bearing_deg(from: &PlanePoint, to: &PlanePoint) -> f64 {
    wrap360((to.x - from.x).atan2(to.y - from.y).to_degrees())
}

/// Result of projecting a point onto a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentProjection {
    /// Distance from the query point to the closest point on the segment.
    pub distance_m: f64,
    /// Clamp parameter along `a -> b` in `[0, 1]`; 0 for degenerate segments.
    pub t: f64,
    /// The closest point itself.
    pub closest: PlanePoint,
}

/// Distance from `p` to the segment `a -> b`, with the clamped projection
/// parameter and the closest point. A degenerate segment (`a == b`) is
/// treated as a point with `t = 0`.
pub fn point_segment_distance(p: &PlanePoint, a: &PlanePoint, b: &PlanePoint) -> SegmentProjection {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = PlanePoint {
        x: a.x + t * dx,
        y: a.y + t * dy,
    };
    SegmentProjection {
        distance_m: p.distance(&closest),
        t,
        closest,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Great-circle distance oracle used to cross-check the planar
    /// projection. Standard haversine on the same spherical radius.
    pub(crate) fn haversine_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
        let (la, lb) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
        let dlat = (b.lat_deg - a.lat_deg).to_radians();
        let dlon = (b.lon_deg - a.lon_deg).to_radians();
        let h = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * h.sqrt().asin()
    }

    fn p(x: f64, y: f64) -> PlanePoint {
        PlanePoint::new(x, y)
    }

    #[test]
    fn geopoint_validation() {
        assert!(GeoPoint::new(37.0, -122.0).is_ok());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::INFINITY).is_err());
        assert!(GeoPoint::new(90.0001, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.0001).is_err());
        assert!(GeoPoint::new(90.0, 180.0).is_ok());
    }

    #[test]
    fn projector_rejects_near_polar_references() {
        assert!(Projector::new(GeoPoint {
            lat_deg: 85.0,
            lon_deg: 0.0
        })
        .is_err());
        assert!(Projector::new(GeoPoint {
            lat_deg: -86.0,
            lon_deg: 0.0
        })
        .is_err());
        assert!(Projector::new(GeoPoint {
            lat_deg: 84.9,
            lon_deg: 0.0
        })
        .is_ok());
    }

    #[test]
    fn one_millidegree_of_latitude_is_111_meters() {
        // Frozen from the definition: 0.001 * 6371000 * pi / 180.
        let proj = Projector::new(GeoPoint {
            lat_deg: 37.0,
            lon_deg: -122.0,
        })
        .unwrap();
        let q = proj.project(&GeoPoint {
            lat_deg: 37.001,
            lon_deg: -122.0,
        });
        assert!((q.y - 111.19492664455874).abs() < 1e-9, "y = {}", q.y);
        assert_eq!(q.x, 0.0);
        // A pure-latitude displacement is a meridian arc, where the planar
        // formula and the great circle agree exactly.
        let hav = haversine_m(
            &proj.reference(),
            &GeoPoint {
                lat_deg: 37.001,
                lon_deg: -122.0,
            },
        );
        assert!((q.y - hav).abs() < 1e-6);
    }

    #[test]
    fn longitude_shrinks_with_cos_latitude() {
        let proj = Projector::new(GeoPoint {
            lat_deg: 60.0,
            lon_deg: 10.0,
        })
        .unwrap();
        let q = proj.project(&GeoPoint {
            lat_deg: 60.0,
            lon_deg: 10.001,
        });
        // cos(60 deg) == 0.5 exactly in the math; trust f64 to a tight bound.
        assert!((q.x - 111.19492664455874 * 0.5).abs() < 1e-6, "x = {}", q.x);
        assert_eq!(q.y, 0.0);
    }

    #[test]
    fn angdiff_cases() {
        assert_eq!(angdiff_deg(0.0, 180.0), 180.0, "antipodal maps to +180");
        assert_eq!(angdiff_deg(180.0, 0.0), 180.0);
        assert_eq!(angdiff_deg(10.0, 350.0), 20.0);
        assert_eq!(angdiff_deg(350.0, 10.0), -20.0);
        assert_eq!(angdiff_deg(90.0, 90.0), 0.0);
        assert!((angdiff_deg(0.1, 359.9) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bearing_cardinals() {
        let o = p(0.0, 0.0);
        assert_eq!(bearing_deg(&o, &p(0.0, 1.0)), 0.0);
        assert_eq!(bearing_deg(&o, &p(1.0, 0.0)), 90.0);
        assert_eq!(bearing_deg(&o, &p(0.0, -1.0)), 180.0);
        assert_eq!(bearing_deg(&o, &p(-1.0, 0.0)), 270.0);
        assert_eq!(bearing_deg(&o, &p(1.0, 1.0)), 45.0);
        assert_eq!(bearing_deg(&o, &o), 0.0, "coincident points bear north");
    }

    #[test]
    fn wrap360_edges() {
        assert_eq!(wrap360(360.0), 0.0);
        assert_eq!(wrap360(-0.0), 0.0);
        assert_eq!(wrap360(720.5), 0.5);
        assert_eq!(wrap360(-90.0), 270.0);
        assert!(wrap360(-1e-17) < 360.0, "never returns 360 itself");
    }

    #[test]
    fn segment_distance_basics() {
        let hit = point_segment_distance(&p(0.0, 1.0), &p(-1.0, 0.0), &p(1.0, 0.0));
        assert_eq!(hit.distance_m, 1.0);
        assert_eq!(hit.t, 0.5);
        assert_eq!(hit.closest, p(0.0, 0.0));

        // Beyond the ends the parameter clamps.
        let hit = point_segment_distance(&p(5.0, 1.0), &p(-1.0, 0.0), &p(1.0, 0.0));
        assert_eq!(hit.t, 1.0);
        assert_eq!(hit.closest, p(1.0, 0.0));
        assert!((hit.distance_m - (16.0f64 + 1.0).sqrt()).abs() < 1e-12);

        // Degenerate segment is a point with t = 0.
        let hit = point_segment_distance(&p(3.0, 4.0), &p(0.0, 0.0), &p(0.0, 0.0));
        assert_eq!(hit.t, 0.0);
        assert_eq!(hit.distance_m, 5.0);
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(
            ref_lat in -80.0f64..80.0,
            ref_lon in -179.0f64..179.0,
            dlat in -0.4f64..0.4,
            dlon in -0.4f64..0.4,
        ) {
            let proj = Projector::new(GeoPoint { lat_deg: ref_lat, lon_deg: ref_lon }).unwrap();
            let p0 = GeoPoint { lat_deg: ref_lat + dlat, lon_deg: ref_lon + dlon };
            let back = proj.unproject(&proj.project(&p0));
            prop_assert!((back.lat_deg - p0.lat_deg).abs() < 1e-9);
            prop_assert!((back.lon_deg - p0.lon_deg).abs() < 1e-9);
        }

        #[test]
        fn planar_distance_tracks_haversine_close_in(
            ref_lat in -60.0f64..60.0,
            ref_lon in -179.0f64..179.0,
            dx in -0.009f64..0.009,
            dy in -0.009f64..0.009,
        ) {
            // Pairs within ~2 km of the reference: planar error under 0.05 %.
            let proj = Projector::new(GeoPoint { lat_deg: ref_lat, lon_deg: ref_lon }).unwrap();
            let a = GeoPoint { lat_deg: ref_lat, lon_deg: ref_lon };
            let b = GeoPoint { lat_deg: ref_lat + dy, lon_deg: ref_lon + dx };
            let planar = proj.project(&a).distance(&proj.project(&b));
            let sphere = haversine_m(&a, &b);
            prop_assume!(sphere > 1.0);
            prop_assert!(
                (planar - sphere).abs() / sphere < 0.0005,
                "planar {} vs haversine {}", planar, sphere
            );
        }

        #[test]
        fn angdiff_stays_in_half_open_range(a in -7200.0f64..7200.0, b in -7200.0f64..7200.0) {
            let d = angdiff_deg(a, b);
            prop_assert!(d > -180.0 && d <= 180.0, "angdiff({a},{b}) = {d}");
        }

        #[test]
        fn angdiff_is_antisymmetric_off_the_cut(a in 0.0f64..360.0, b in 0.0f64..360.0) {
            let fwd = angdiff_deg(a, b);
            prop_assume!(fwd.abs() < 179.999); // +180 is its own mirror image
            prop_assert!((fwd + angdiff_deg(b, a)).abs() < 1e-9);
        }

        #[test]
        fn bearing_stays_in_range(ax in -1e4f64..1e4, ay in -1e4f64..1e4, bx in -1e4f64..1e4, by in -1e4f64..1e4) {
            let d = bearing_deg(&p(ax, ay), &p(bx, by));
            prop_assert!((0.0..360.0).contains(&d));
        }

        #[test]
        fn reversed_bearing_differs_by_180(ax in -1e4f64..1e4, ay in -1e4f64..1e4, bx in -1e4f64..1e4, by in -1e4f64..1e4) {
            prop_assume!((ax - bx).abs() > 1e-6 || (ay - by).abs() > 1e-6);
            let fwd = bearing_deg(&p(ax, ay), &p(bx, by));
            let rev = bearing_deg(&p(bx, by), &p(ax, ay));
            prop_assert!(angdiff_deg(fwd, rev).abs() > 180.0 - 1e-6);
        }

        #[test]
        fn segment_distance_bounded_by_endpoints(
            px in -100.0f64..100.0, py in -100.0f64..100.0,
            ax in -100.0f64..100.0, ay in -100.0f64..100.0,
            bx in -100.0f64..100.0, by in -100.0f64..100.0,
        ) {
            let (q, a, b) = (p(px, py), p(ax, ay), p(bx, by));
            let hit = point_segment_distance(&q, &a, &b);
            prop_assert!(hit.t >= 0.0 && hit.t <= 1.0);
            prop_assert!(hit.distance_m <= q.distance(&a) + 1e-9);
            prop_assert!(hit.distance_m <= q.distance(&b) + 1e-9);
        }

        #[test]
        fn segment_distance_symmetric_under_reversal(
            px in -100.0f64..100.0, py in -100.0f64..100.0,
            ax in -100.0f64..100.0, ay in -100.0f64..100.0,
            bx in -100.0f64..100.0, by in -100.0f64..100.0,
        ) {
            let (q, a, b) = (p(px, py), p(ax, ay), p(bx, by));
            let fwd = point_segment_distance(&q, &a, &b);
            let rev = point_segment_distance(&q, &b, &a);
            prop_assert!((fwd.distance_m - rev.distance_m).abs() < 1e-9);
            if a != b {
                prop_assert!((fwd.t - (1.0 - rev.t)).abs() < 1e-9);
            }
        }
    }
}

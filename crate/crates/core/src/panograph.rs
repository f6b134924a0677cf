//! Panorama metadata, the provider abstraction, and the adjacency crawl.
//!
//! Panorama metadata travels as JSONL, one record per line:
//!
//! ```text
//! {"pano_id":"p0001","lat":37.0,"lon":-122.0,"azimuth_deg":271.5,
//!  "neighbors":["p0000","p0002"],"capture_date":"2017-05"}
//! ```
//!
//! `azimuth_deg` is the vehicle heading, degrees clockwise from north.
//! Providers hide where panoramas actually come from: the directory-backed
//! implementation reads the JSONL index plus `<pano_id>.png` equirectangular
//! images, and tests plug in an in-memory one.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{wrap360, GeoBounds, GeoPoint};

/// One panorama's metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoMeta {
    pub pano_id: String,
    pub point: GeoPoint,
    /// Vehicle heading, degrees clockwise from north, in `[0, 360)`.
    pub azimuth_deg: f64,
    /// Ids of directly connected panoramas, in capture-graph order.
    pub neighbors: Vec<String>,
    /// `YYYY-MM`, when known.
    pub capture_date: Option<String>,
}

/// Wire format for the JSONL files; kept separate so the in-memory type can
/// use [`GeoPoint`] without leaking its nesting into the file format.
#[derive(Debug, Serialize, Deserialize)]
struct PanoRecord {
    pano_id: String,
    lat: f64,
    lon: f64,
    azimuth_deg: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    neighbors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capture_date: Option<String>,
}

fn validate_capture_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 7
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5].is_ascii_digit()
        && b[6].is_ascii_digit()
        && matches!(&s[5..7], "01" | "02" | "03" | "04" | "05" | "06" | "07" | "08" | "09" | "10" | "11" | "12")
}

impl PanoMeta {
    fn from_record(rec: PanoRecord) -> std::result::Result<Self, String> {
        let point = GeoPoint::new(rec.lat, rec.lon).map_err(|e| e.to_string())?;
        if !rec.azimuth_deg.is_finite() {
            return Err(format!("non-finite azimuth {}", rec.azimuth_deg));
        }
        let azimuth_deg = wrap360(rec.azimuth_deg);
        if azimuth_deg != rec.azimuth_deg {
            log::warn!(
                "pano {}: azimuth {} wrapped into [0,360) as {}",
                rec.pano_id,
                rec.azimuth_deg,
                azimuth_deg
            );
        }
        if let Some(date) = &rec.capture_date {
            if !validate_capture_date(date) {
                return Err(format!("capture_date {date:?} is not YYYY-MM"));
            }
        }
        if rec.pano_id.is_empty() {
            return Err("empty pano_id".into());
        }
        Ok(PanoMeta {
            pano_id: rec.pano_id,
            point,
            azimuth_deg,
            neighbors: rec.neighbors,
            capture_date: rec.capture_date,
        })
    }

    fn to_record(&self) -> PanoRecord {
        PanoRecord {
            pano_id: self.pano_id.clone(),
            lat: self.point.lat_deg,
            lon: self.point.lon_deg,
            azimuth_deg: self.azimuth_deg,
            neighbors: self.neighbors.clone(),
            capture_date: self.capture_date.clone(),
        }
    }
}

/// Read panorama metadata JSONL. Duplicate ids and malformed lines are
/// errors naming the 1-based line number; blank lines are tolerated.
pub fn load_panos(path: &Path) -> Result<Vec<PanoMeta>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let jerr = |message: String| Error::JsonLine {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PanoRecord = serde_json::from_str(&line).map_err(|e| jerr(e.to_string()))?;
        let meta = PanoMeta::from_record(rec).map_err(jerr)?;
        if !seen.insert(meta.pano_id.clone()) {
            return Err(jerr(format!("duplicate pano_id {:?}", meta.pano_id)));
        }
        out.push(meta);
    }
    Ok(out)
}

/// Write panorama metadata JSONL in the given order (the crawl's visit order
/// is meaningful, so no resorting happens here).
pub fn save_panos(panos: &[PanoMeta], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for p in panos {
        let line = serde_json::to_string(&p.to_record())
            .map_err(|e| Error::Data(format!("serializing pano {}: {e}", p.pano_id)))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Source of panorama metadata and imagery.
pub trait PanoProvider {
    /// Metadata for one panorama; `Ok(None)` when unknown.
    fn meta(&self, pano_id: &str) -> Result<Option<PanoMeta>>;

    /// The equirectangular image for one panorama (conventionally 832x416).
    fn image(&self, pano_id: &str) -> Result<image::RgbImage>;
}

/// Directory-backed provider: a JSONL index plus `<image_dir>/<pano_id>.png`.
pub struct DirPanoProvider {
    metas: BTreeMap<String, PanoMeta>,
    image_dir: PathBuf,
}

impl DirPanoProvider {
    pub fn open(meta_path: &Path, image_dir: &Path) -> Result<Self> {
        let metas = load_panos(meta_path)?
            .into_iter()
            .map(|m| (m.pano_id.clone(), m))
            .collect();
        Ok(DirPanoProvider {
            metas,
            image_dir: image_dir.to_path_buf(),
        })
    }

    pub fn pano_count(&self) -> usize {
        self.metas.len()
    }
}

impl PanoProvider for DirPanoProvider {
    fn meta(&self, pano_id: &str) -> Result<Option<PanoMeta>> {
        Ok(self.metas.get(pano_id).cloned())
    }

    fn image(&self, pano_id: &str) -> Result<image::RgbImage> {
        let path = self.image_dir.join(format!("{pano_id}.png"));
        let img = image::open(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image {
                path: path.display().to_string(),
                message: other.to_string(),
            },
        })?;
        Ok(img.into_rgb8())
    }
}

/// In-memory provider for tests and synthetic data.
#[derive(Default)]
pub struct MemPanoProvider {
    pub metas: BTreeMap<String, PanoMeta>,
    pub images: BTreeMap<String, image::RgbImage>,
}

impl MemPanoProvider {
    pub fn from_metas(metas: impl IntoIterator<Item = PanoMeta>) -> Self {
        MemPanoProvider {
            metas: metas.into_iter().map(|m| (m.pano_id.clone(), m)).collect(),
            images: BTreeMap::new(),
        }
    }
}

impl PanoProvider for MemPanoProvider {
    fn meta(&self, pano_id: &str) -> Result<Option<PanoMeta>> {
        Ok(self.metas.get(pano_id).cloned())
    }

    fn image(&self, pano_id: &str) -> Result<image::RgbImage> {
        self.images
            .get(pano_id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no image for pano {pano_id}")))
    }
}

/// Breadth-first crawl of the panorama adjacency graph.
///
/// Starting from `seed_id`, visits panoramas FIFO and records them in visit
/// order. A panorama outside `bbox` is still recorded when reached, but its
/// neighbors are not followed — the crawl keeps the boundary ring without
/// marching out of the region. Dangling neighbor ids (metadata the provider
/// does not know) are skipped with a warning; an unknown seed is an error.
/// `limit` caps the number of recorded panoramas.
pub fn bfs_crawl(
    provider: &dyn PanoProvider,
    seed_id: &str,
    bbox: Option<&GeoBounds>,
    limit: usize,
) -> Result<Vec<PanoMeta>> {
    if provider.meta(seed_id)?.is_none() {
        return Err(Error::Data(format!("seed pano {seed_id:?} not found")));
    }
    let mut queue: VecDeque<String> = VecDeque::from([seed_id.to_string()]);
    let mut visited: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    while let Some(id) = queue.pop_front() {
        if out.len() >= limit {
            break;
        }
        if !visited.insert(id.clone()) {
            continue;
        }
        let meta = match provider.meta(&id)? {
            Some(m) => m,
            None => {
                log::warn!("crawl: neighbor {id:?} has no metadata, skipping");
                continue;
            }
        };
        let expand = bbox.map(|b| b.contains(&meta.point)).unwrap_or(true);
        if expand {
            for n in &meta.neighbors {
                if !visited.contains(n) {
                    queue.push_back(n.clone());
                }
            }
        }
        out.push(meta);
    }
    Ok(out)
}

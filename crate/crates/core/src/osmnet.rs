//! OpenStreetMap extract ingest: a focused XML parser, the road-network
//! model, highway filtering, travel-direction tags, and junction detection.
//!
//! The parser handles exactly the OSM XML subset the pipeline consumes
//! (`node`, `way`, `nd`, `tag`, attributes in either quote style, comments,
//! processing instructions, entity escapes) and skips everything else
//! (`relation`, `bounds`, ...) without getting lost. Parse failures always
//! name the byte offset in the decompressed document. Files ending in `.gz`
//! are transparently gunzipped on read and gzipped on write.
//!
//! Lenient vs strict: real extracts contain ways pointing at nodes outside
//! the clip region, so the parser drops unresolvable or degenerate ways and
//! counts them in [`ParseStats`] instead of failing. Duplicate element ids,
//! by contrast, are hard errors — they indicate a broken producer, not a
//! clipped one.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{bearing_deg, GeoBounds, GeoPoint, Projector};

/// A node: id, position, tags.
#[derive(Debug, Clone, PartialEq)]
pub struct OsmNode {
    pub id: i64,
    pub point: GeoPoint,
    pub tags: BTreeMap<String, String>,
}

/// A way: id, ordered node references, tags. Invariants (enforced by
/// [`RoadNetwork::new`]): at least two nodes, no consecutive duplicates,
/// every reference resolvable.
#[derive(Debug, Clone, PartialEq)]
pub struct OsmWay {
    pub id: i64,
    pub node_ids: Vec<i64>,
    pub tags: BTreeMap<String, String>,
}

impl OsmWay {
    /// Number of line segments (`nodes - 1`).
    pub fn segment_count(&self) -> usize {
        self.node_ids.len().saturating_sub(1)
    }
}

/// Who may drive along a way, relative to its node order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TravelDirections {
    Both,
    ForwardOnly,
    BackwardOnly,
}

impl TravelDirections {
    pub fn is_one_way(&self) -> bool {
        !matches!(self, TravelDirections::Both)
    }

    /// Stable serialization used in ground-truth files and manifests.
    pub fn as_str(&self) -> &'static str {
        match self {
            TravelDirections::Both => "both",
            TravelDirections::ForwardOnly => "forward",
            TravelDirections::BackwardOnly => "backward",
        }
    }
}

/// Legal travel directions from the `oneway` tag. Unrecognized values fall
/// back to two-way with a warning rather than poisoning the whole ingest.
pub fn travel_directions(way: &OsmWay) -> TravelDirections {
    match way.tags.get("oneway").map(String::as_str) {
        None | Some("no") | Some("false") | Some("0") => TravelDirections::Both,
        Some("yes") | Some("true") | Some("1") => TravelDirections::ForwardOnly,
        Some("-1") | Some("reverse") => TravelDirections::BackwardOnly,
        Some(other) => {
            log::warn!(
                "way {}: unrecognized oneway value {:?}, treating as two-way",
                way.id,
                other
            );
            TravelDirections::Both
        }
    }
}

/// Counters for the lenient parts of parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    /// Ways discarded because they referenced missing nodes or had fewer
    /// than two distinct consecutive nodes.
    pub dropped_ways: usize,
    /// Consecutive duplicate node references collapsed inside kept ways.
    pub collapsed_node_refs: usize,
}

/// The parsed map: nodes, ways, and the node-to-way incidence index.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    nodes: BTreeMap<i64, OsmNode>,
    ways: BTreeMap<i64, OsmWay>,
    /// node id -> every (way id, position-within-way) that touches it.
    incidence: BTreeMap<i64, Vec<(i64, usize)>>,
}

impl RoadNetwork {
    /// Strict constructor: every way must have >= 2 nodes, no consecutive
    /// duplicate references, and all references must resolve.
    pub fn new(nodes: Vec<OsmNode>, ways: Vec<OsmWay>) -> Result<Self> {
        let mut node_map = BTreeMap::new();
        for n in nodes {
            if node_map.insert(n.id, n).is_some() {
                return Err(Error::Data(format!("duplicate node id in network input")));
            }
        }
        let mut way_map: BTreeMap<i64, OsmWay> = BTreeMap::new();
        for w in ways {
            if w.node_ids.len() < 2 {
                return Err(Error::Data(format!("way {} has fewer than 2 nodes", w.id)));
            }
            for pair in w.node_ids.windows(2) {
                if pair[0] == pair[1] {
                    return Err(Error::Data(format!(
                        "way {} repeats node {} consecutively",
                        w.id, pair[0]
                    )));
                }
            }
            for &nid in &w.node_ids {
                if !node_map.contains_key(&nid) {
                    return Err(Error::Data(format!(
                        "way {} references missing node {}",
                        w.id, nid
                    )));
                }
            }
            if way_map.insert(w.id, w).is_some() {
                return Err(Error::Data(format!("duplicate way id in network input")));
            }
        }
        let incidence = build_incidence(&way_map);
        Ok(RoadNetwork {
            nodes: node_map,
            ways: way_map,
            incidence,
        })
    }

    pub fn nodes(&self) -> &BTreeMap<i64, OsmNode> {
        &self.nodes
    }

    pub fn ways(&self) -> &BTreeMap<i64, OsmWay> {
        &self.ways
    }

    pub fn node(&self, id: i64) -> Option<&OsmNode> {
        self.nodes.get(&id)
    }

    pub fn way(&self, id: i64) -> Option<&OsmWay> {
        self.ways.get(&id)
    }

    /// All (way, position) pairs touching a node; empty if the node is not
    /// part of any way.
    pub fn incidence(&self, node_id: i64) -> &[(i64, usize)] {
        self.incidence
            .get(&node_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn way_count(&self) -> usize {
        self.ways.len()
    }

    pub fn segment_count(&self) -> usize {
        self.ways.values().map(OsmWay::segment_count).sum()
    }

    /// Bounding box over nodes referenced by at least one way. Orphan nodes
    /// do not count: they carry no road geometry, and the box's center is
    /// the default projection reference for a whole run, so it should be
    /// determined by roads alone. `None` for a network without ways.
    pub fn geo_bounds(&self) -> Option<GeoBounds> {
        let mut bounds: Option<(f64, f64, f64, f64)> = None;
        for nid in self.incidence.keys() {
            let p = self.nodes[nid].point;
            let b = bounds.get_or_insert((p.lat_deg, p.lon_deg, p.lat_deg, p.lon_deg));
            b.0 = b.0.min(p.lat_deg);
            b.1 = b.1.min(p.lon_deg);
            b.2 = b.2.max(p.lat_deg);
            b.3 = b.3.max(p.lon_deg);
        }
        bounds.map(|(a, b, c, d)| GeoBounds {
            min_lat: a,
            min_lon: b,
            max_lat: c,
            max_lon: d,
        })
    }

    /// Keep only ways whose `highway` tag is in the allowlist. All nodes are
    /// retained — orphans are harmless and keeping them makes the filter a
    /// pure way-level operation. Returns the filtered network and how many
    /// ways were dropped.
    pub fn filter_roads(&self, allowlist: &BTreeSet<String>) -> (RoadNetwork, usize) {
        let ways: BTreeMap<i64, OsmWay> = self
            .ways
            .iter()
            .filter(|(_, w)| {
                w.tags
                    .get("highway")
                    .map(|h| allowlist.contains(h))
                    .unwrap_or(false)
            })
            .map(|(id, w)| (*id, w.clone()))
            .collect();
        let dropped = self.ways.len() - ways.len();
        let incidence = build_incidence(&ways);
        (
            RoadNetwork {
                nodes: self.nodes.clone(),
                ways,
                incidence,
            },
            dropped,
        )
    }

    /// Heading of one segment of a way in node order, degrees clockwise from
    /// north in the given projection.
    pub fn segment_heading(
        &self,
        projector: &Projector,
        way_id: i64,
        segment_index: usize,
    ) -> Result<f64> {
        let way = self
            .way(way_id)
            .ok_or_else(|| Error::Data(format!("unknown way {way_id}")))?;
        if segment_index + 1 >= way.node_ids.len() {
            return Err(Error::Data(format!(
                "way {way_id} has no segment {segment_index}"
            )));
        }
        let a = projector.project(&self.nodes[&way.node_ids[segment_index]].point);
        let b = projector.project(&self.nodes[&way.node_ids[segment_index + 1]].point);
        Ok(bearing_deg(&a, &b))
    }
}

fn build_incidence(ways: &BTreeMap<i64, OsmWay>) -> BTreeMap<i64, Vec<(i64, usize)>> {
    let mut incidence: BTreeMap<i64, Vec<(i64, usize)>> = BTreeMap::new();
    for (&wid, way) in ways {
        for (i, &nid) in way.node_ids.iter().enumerate() {
            incidence.entry(nid).or_default().push((wid, i));
        }
    }
    incidence
}

/// Highway classes labeled by default: the graded road hierarchy, their link
/// ramps, and ordinary city streets. `service` (alleys, parking aisles,
/// driveways) is deliberately absent; pass a custom allowlist to include it.
pub const DEFAULT_HIGHWAY_ALLOWLIST: &[&str] = &[
    "motorway",
    "motorway_link",
    "trunk",
    "trunk_link",
    "primary",
    "primary_link",
    "secondary",
    "secondary_link",
    "tertiary",
    "tertiary_link",
    "unclassified",
    "residential",
    "living_street",
];

pub fn default_allowlist() -> BTreeSet<String> {
    DEFAULT_HIGHWAY_ALLOWLIST
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// How aggressively to call a shared node a junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JunctionMode {
    /// Every node touched by two or more distinct ways. Counts the seam
    /// where one road's way is merely split into two as a junction.
    SharedNode,
    /// Only nodes with at least three outgoing arms. Two ways continuing
    /// through a split point have two arms and are filtered out; real
    /// crossings (T or better) stay. This is the default.
    MinThreeArms,
}

/// One direction you can leave a junction in.
#[derive(Debug, Clone, PartialEq)]
pub struct JunctionArm {
    pub way_id: i64,
    /// The neighbor node this arm heads toward.
    pub toward_node: i64,
    /// Outgoing bearing at the junction node, from the first polyline step.
    pub heading_deg: f64,
}

/// A road junction: the shared node plus every arm leaving it.
#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub node_id: i64,
    pub point: GeoPoint,
    pub arms: Vec<JunctionArm>,
}

/// Find junctions under the given mode. Output is sorted by node id; arms
/// are ordered by (way id, position), so results are deterministic.
pub fn find_junctions(
    network: &RoadNetwork,
    projector: &Projector,
    mode: JunctionMode,
) -> Vec<Junction> {
    let mut out = Vec::new();
    for (&nid, touches) in &network.incidence {
        let node_pt = network.nodes[&nid].point;
        let here = projector.project(&node_pt);
        let mut arms = Vec::new();
        for &(wid, pos) in touches {
            let way = &network.ways[&wid];
            let mut push_arm = |toward: i64| {
                let there = projector.project(&network.nodes[&toward].point);
                arms.push(JunctionArm {
                    way_id: wid,
                    toward_node: toward,
                    heading_deg: bearing_deg(&here, &there),
                });
            };
            if pos > 0 {
                push_arm(way.node_ids[pos - 1]);
            }
            if pos + 1 < way.node_ids.len() {
                push_arm(way.node_ids[pos + 1]);
            }
        }
        let is_junction = match mode {
            JunctionMode::SharedNode => {
                let mut way_ids: Vec<i64> = touches.iter().map(|(w, _)| *w).collect();
                way_ids.dedup();
                way_ids.len() >= 2
            }
            JunctionMode::MinThreeArms => arms.len() >= 3,
        };
        if is_junction {
            out.push(Junction {
                node_id: nid,
                point: node_pt,
                arms,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// XML subset parser
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

enum Event {
    Open {
        name: String,
        attrs: Vec<(String, String)>,
        self_closing: bool,
        at: usize,
    },
    Close {
        name: String,
    },
    Eof,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::OsmXml {
            offset: at,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn starts_with(&self, s: &[u8]) -> bool {
        self.bytes[self.pos..].starts_with(s)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.pos += 1;
        }
    }

    /// Advance past `needle`, or fail with the offset where scanning began.
    fn skip_past(&mut self, needle: &[u8], what: &str) -> Result<()> {
        let start = self.pos;
        match self.bytes[self.pos..]
            .windows(needle.len())
            .position(|w| w == needle)
        {
            Some(i) => {
                self.pos += i + needle.len();
                Ok(())
            }
            None => Err(self.err(start, format!("unterminated {what}"))),
        }
    }

    fn read_name(&mut self) -> Result<String> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b':' | b'.') {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err(start, "expected a name"));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    /// Attributes up to and including the closing `>`; reports whether the
    /// element was self-closing.
    fn read_attrs(&mut self) -> Result<(Vec<(String, String)>, bool)> {
        let mut attrs = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'>') => {
                    self.pos += 1;
                    return Ok((attrs, false));
                }
                Some(b'/') if self.starts_with(b"/>") => {
                    self.pos += 2;
                    return Ok((attrs, true));
                }
                Some(_) => {
                    let key = self.read_name()?;
                    self.skip_ws();
                    if self.peek() != Some(b'=') {
                        return Err(self.err(self.pos, format!("expected '=' after attribute {key:?}")));
                    }
                    self.pos += 1;
                    self.skip_ws();
                    let quote = match self.peek() {
                        Some(q @ (b'"' | b'\'')) => q,
                        _ => return Err(self.err(self.pos, "expected a quoted attribute value")),
                    };
                    self.pos += 1;
                    let vstart = self.pos;
                    while self.peek().map(|c| c != quote).unwrap_or(false) {
                        self.pos += 1;
                    }
                    if self.peek().is_none() {
                        return Err(self.err(vstart, "unterminated attribute value"));
                    }
                    let raw = &self.bytes[vstart..self.pos];
                    self.pos += 1; // closing quote
                    attrs.push((key, unescape(raw, vstart)?));
                }
                None => return Err(self.err(self.pos, "unexpected end of file inside a tag")),
            }
        }
    }

    fn next_event(&mut self) -> Result<Event> {
        loop {
            // Skip intervening text content; OSM files only put whitespace
            // between elements and we have no use for anything else.
            while self.peek().map(|c| c != b'<').unwrap_or(false) {
                self.pos += 1;
            }
            if self.peek().is_none() {
                return Ok(Event::Eof);
            }
            let at = self.pos;
            if self.starts_with(b"<?") {
                self.skip_past(b"?>", "processing instruction")?;
            } else if self.starts_with(b"<!--") {
                self.skip_past(b"-->", "comment")?;
            } else if self.starts_with(b"<![CDATA[") {
                self.skip_past(b"]]>", "CDATA section")?;
            } else if self.starts_with(b"<!") {
                self.skip_past(b">", "declaration")?;
            } else if self.starts_with(b"</") {
                self.pos += 2;
                let name = self.read_name()?;
                self.skip_ws();
                if self.peek() != Some(b'>') {
                    return Err(self.err(self.pos, format!("malformed closing tag </{name}")));
                }
                self.pos += 1;
                return Ok(Event::Close { name });
            } else {
                self.pos += 1;
                let name = self.read_name()?;
                let (attrs, self_closing) = self.read_attrs()?;
                return Ok(Event::Open {
                    name,
                    attrs,
                    self_closing,
                    at,
                });
            }
        }
    }
}

/// Decode the five named XML entities plus numeric character references.
fn unescape(raw: &[u8], at: usize) -> Result<String> {
    if !raw.contains(&b'&') {
        return Ok(String::from_utf8_lossy(raw).into_owned());
    }
    let mut out = String::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] != b'&' {
            // Multi-byte UTF-8 passes through untouched.
            let step = utf8_len(raw[i]);
            out.push_str(&String::from_utf8_lossy(&raw[i..(i + step).min(raw.len())]));
            i += step;
            continue;
        }
        let semi = raw[i + 1..]
            .iter()
            .take(16)
            .position(|&c| c == b';')
            .ok_or_else(|| Error::OsmXml {
                offset: at + i,
                message: "unterminated entity".into(),
            })?;
        let name = &raw[i + 1..i + 1 + semi];
        match name {
            b"amp" => out.push('&'),
            b"lt" => out.push('<'),
            b"gt" => out.push('>'),
            b"quot" => out.push('"'),
            b"apos" => out.push('\''),
            _ if name.first() == Some(&b'#') => {
                let txt = String::from_utf8_lossy(&name[1..]).into_owned();
                let code = if let Some(hex) = txt.strip_prefix('x').or(txt.strip_prefix('X')) {
                    u32::from_str_radix(hex, 16)
                } else {
                    txt.parse()
                };
                let ch = code.ok().and_then(char::from_u32).ok_or_else(|| Error::OsmXml {
                    offset: at + i,
                    message: format!("bad character reference &#{txt};"),
                })?;
                out.push(ch);
            }
            _ => {
                return Err(Error::OsmXml {
                    offset: at + i,
                    message: format!("unknown entity &{};", String::from_utf8_lossy(name)),
                })
            }
        }
        i += semi + 2;
    }
    Ok(out)
}

fn utf8_len(first: u8) -> usize {
    match first {
        0xF0..=0xF7 => 4,
        0xE0..=0xEF => 3,
        0xC0..=0xDF => 2,
        _ => 1,
    }
}

fn get_attr<'a>(attrs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    attrs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

enum Ctx {
    Container(String),
    Node,
    Way,
    Skip(String),
}

/// Parse OSM XML from raw (already decompressed) bytes.
pub fn parse_osm_bytes(bytes: &[u8]) -> Result<(RoadNetwork, ParseStats)> {
    let mut cur = Cursor::new(bytes);
    let mut stack: Vec<Ctx> = Vec::new();
    let mut nodes: BTreeMap<i64, OsmNode> = BTreeMap::new();
    let mut raw_ways: Vec<OsmWay> = Vec::new();
    let mut cur_node: Option<OsmNode> = None;
    let mut cur_way: Option<OsmWay> = None;
    let mut stats = ParseStats::default();

    fn in_skip(stack: &[Ctx]) -> bool {
        matches!(stack.last(), Some(Ctx::Skip(_)))
    }

    loop {
        match cur.next_event()? {
            Event::Open {
                name,
                attrs,
                self_closing,
                at,
            } => {
                if in_skip(&stack) {
                    if !self_closing {
                        stack.push(Ctx::Skip(name));
                    }
                    continue;
                }
                match name.as_str() {
                    "osm" => {
                        if !self_closing {
                            stack.push(Ctx::Container(name));
                        }
                    }
                    "node" => {
                        if cur_node.is_some() || cur_way.is_some() {
                            return Err(cur.err(at, "nested node element"));
                        }
                        let id = req_i64(&attrs, "id", &cur, at)?;
                        let lat = req_f64(&attrs, "lat", &cur, at)?;
                        let lon = req_f64(&attrs, "lon", &cur, at)?;
                        let point = GeoPoint::new(lat, lon).map_err(|e| {
                            cur.err(at, format!("node {id}: {e}"))
                        })?;
                        let node = OsmNode {
                            id,
                            point,
                            tags: BTreeMap::new(),
                        };
                        if self_closing {
                            finish_node(&mut nodes, node)?;
                        } else {
                            cur_node = Some(node);
                            stack.push(Ctx::Node);
                        }
                    }
                    "way" => {
                        if cur_node.is_some() || cur_way.is_some() {
                            return Err(cur.err(at, "nested way element"));
                        }
                        let id = req_i64(&attrs, "id", &cur, at)?;
                        let way = OsmWay {
                            id,
                            node_ids: Vec::new(),
                            tags: BTreeMap::new(),
                        };
                        if self_closing {
                            // A way with no nd children: degenerate, dropped.
                            stats.dropped_ways += 1;
                        } else {
                            cur_way = Some(way);
                            stack.push(Ctx::Way);
                        }
                    }
                    "nd" => {
                        let way = cur_way
                            .as_mut()
                            .ok_or_else(|| cur.err(at, "nd element outside a way"))?;
                        way.node_ids.push(req_i64(&attrs, "ref", &cur, at)?);
                        if !self_closing {
                            stack.push(Ctx::Skip(name));
                        }
                    }
                    "tag" => {
                        let k = get_attr(&attrs, "k")
                            .ok_or_else(|| cur.err(at, "tag element without k attribute"))?
                            .to_string();
                        let v = get_attr(&attrs, "v")
                            .ok_or_else(|| cur.err(at, "tag element without v attribute"))?
                            .to_string();
                        if let Some(n) = cur_node.as_mut() {
                            n.tags.insert(k, v);
                        } else if let Some(w) = cur_way.as_mut() {
                            w.tags.insert(k, v);
                        } // tags on relations etc. are ignored
                        if !self_closing {
                            stack.push(Ctx::Skip(name));
                        }
                    }
                    _ => {
                        // relation, bounds, member, anything else: skip the
                        // whole subtree.
                        if !self_closing {
                            stack.push(Ctx::Skip(name));
                        }
                    }
                }
            }
            Event::Close { name } => match stack.pop() {
                Some(Ctx::Node) => {
                    if name != "node" {
                        return Err(cur.err(cur.pos, format!("expected </node>, found </{name}>")));
                    }
                    finish_node(&mut nodes, cur_node.take().expect("node context"))?;
                }
                Some(Ctx::Way) => {
                    if name != "way" {
                        return Err(cur.err(cur.pos, format!("expected </way>, found </{name}>")));
                    }
                    raw_ways.push(cur_way.take().expect("way context"));
                }
                Some(Ctx::Container(n)) | Some(Ctx::Skip(n)) => {
                    if name != n {
                        return Err(cur.err(cur.pos, format!("expected </{n}>, found </{name}>")));
                    }
                }
                None => {
                    return Err(cur.err(cur.pos, format!("stray closing tag </{name}>")));
                }
            },
            Event::Eof => {
                if !stack.is_empty() {
                    return Err(cur.err(cur.pos, "unexpected end of file inside an element"));
                }
                break;
            }
        }
    }

    // Resolve ways now that every node is known; clipped extracts routinely
    // reference nodes outside the file, so unresolvable ways are dropped and
    // counted instead of failing the whole parse.
    let mut ways: BTreeMap<i64, OsmWay> = BTreeMap::new();
    for mut way in raw_ways {
        let before = way.node_ids.len();
        way.node_ids.dedup();
        stats.collapsed_node_refs += before - way.node_ids.len();
        if way.node_ids.len() < 2 {
            log::warn!("dropping way {}: fewer than 2 distinct nodes", way.id);
            stats.dropped_ways += 1;
            continue;
        }
        if let Some(&missing) = way.node_ids.iter().find(|id| !nodes.contains_key(id)) {
            log::warn!("dropping way {}: missing node {}", way.id, missing);
            stats.dropped_ways += 1;
            continue;
        }
        if ways.insert(way.id, way).is_some() {
            return Err(Error::Data("duplicate way id in OSM input".into()));
        }
    }

    let incidence = build_incidence(&ways);
    Ok((
        RoadNetwork {
            nodes,
            ways,
            incidence,
        },
        stats,
    ))
}

fn finish_node(nodes: &mut BTreeMap<i64, OsmNode>, node: OsmNode) -> Result<()> {
    let id = node.id;
    if nodes.insert(id, node).is_some() {
        return Err(Error::Data(format!("duplicate node id {id} in OSM input")));
    }
    Ok(())
}

fn req_i64(attrs: &[(String, String)], key: &str, cur: &Cursor, at: usize) -> Result<i64> {
    let raw = get_attr(attrs, key)
        .ok_or_else(|| cur.err(at, format!("missing required attribute {key:?}")))?;
    raw.parse()
        .map_err(|_| cur.err(at, format!("attribute {key}={raw:?} is not an integer")))
}

fn req_f64(attrs: &[(String, String)], key: &str, cur: &Cursor, at: usize) -> Result<f64> {
    let raw = get_attr(attrs, key)
        .ok_or_else(|| cur.err(at, format!("missing required attribute {key:?}")))?;
    raw.parse()
        .map_err(|_| cur.err(at, format!("attribute {key}={raw:?} is not a number")))
}

/// Parse an OSM XML string.
pub fn parse_osm_str(xml: &str) -> Result<(RoadNetwork, ParseStats)> {
    parse_osm_bytes(xml.as_bytes())
}

/// Load an `.osm` (or `.osm.gz`) file from disk.
pub fn parse_osm_path(path: &Path) -> Result<(RoadNetwork, ParseStats)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if is_gz(path) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_osm_bytes(&bytes)
}

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

// ---------------------------------------------------------------------------
// XML writer
// ---------------------------------------------------------------------------

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Serialize a network to OSM XML. Nodes and ways come out sorted by id and
/// tags sorted by key, so the same network always produces identical bytes;
/// coordinates use shortest-roundtrip float formatting, so parse -> write ->
/// parse is a fixed point.
pub fn osm_to_string(network: &RoadNetwork) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<osm version=\"0.6\" generator=\"streetlabel\">\n");
    for node in network.nodes.values() {
        if node.tags.is_empty() {
            out.push_str(&format!(
                "  <node id=\"{}\" lat=\"{}\" lon=\"{}\"/>\n",
                node.id, node.point.lat_deg, node.point.lon_deg
            ));
        } else {
            out.push_str(&format!(
                "  <node id=\"{}\" lat=\"{}\" lon=\"{}\">\n",
                node.id, node.point.lat_deg, node.point.lon_deg
            ));
            for (k, v) in &node.tags {
                out.push_str(&format!(
                    "    <tag k=\"{}\" v=\"{}\"/>\n",
                    xml_escape(k),
                    xml_escape(v)
                ));
            }
            out.push_str("  </node>\n");
        }
    }
    for way in network.ways.values() {
        out.push_str(&format!("  <way id=\"{}\">\n", way.id));
        for nid in &way.node_ids {
            out.push_str(&format!("    <nd ref=\"{nid}\"/>\n"));
        }
        for (k, v) in &way.tags {
            out.push_str(&format!(
                "    <tag k=\"{}\" v=\"{}\"/>\n",
                xml_escape(k),
                xml_escape(v)
            ));
        }
        out.push_str("  </way>\n");
    }
    out.push_str("</osm>\n");
    out
}

/// Write a network to disk as OSM XML, gzipped when the path ends in `.gz`.
pub fn write_osm(network: &RoadNetwork, path: &Path) -> Result<()> {
    let xml = osm_to_string(network);
    if is_gz(path) {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(xml.as_bytes()).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        std::fs::write(path, xml).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

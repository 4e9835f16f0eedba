//! Parcel polygons and image-to-parcel assignment.
//!
//! Parcels come from GeoJSON `Polygon`/`MultiPolygon` features. An image is
//! assigned to every parcel containing its geotag; images inside no parcel
//! fall back to every parcel whose boundary lies within the dilation radius.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{domain, Error, Result};
use crate::taxonomy::{Level, Taxonomy};

/// Meters per degree of latitude in the local planar frame.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Default parcel dilation in meters.
pub const DEFAULT_DILATION_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() || !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(domain(format!("coordinate ({lon}, {lat}) out of range")));
        }
        Ok(GeoPoint { lon, lat })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parcel {
    pub id: String,
    /// Exterior ring first, then holes. Every ring is closed.
    pub rings: Vec<Vec<GeoPoint>>,
    /// Ground-truth fine class indices; empty when the parcel has no truth.
    pub truth: BTreeSet<usize>,
}

impl Parcel {
    pub fn new(id: impl Into<String>, rings: Vec<Vec<GeoPoint>>, truth: BTreeSet<usize>) -> Result<Self> {
        let id = id.into();
        validate_rings(&rings).map_err(|message| Error::Validation { feature: id.clone(), message })?;
        Ok(Parcel { id, rings, truth })
    }

    pub fn exterior(&self) -> &[GeoPoint] {
        &self.rings[0]
    }

    /// (min_lon, min_lat, max_lon, max_lat) of the exterior ring.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.exterior().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.lon), b.min(p.lat), c.max(p.lon), d.max(p.lat)),
        )
    }

    /// Even-odd containment over all rings; points on any edge are inside.
    pub fn contains(&self, p: GeoPoint) -> bool {
        let (x0, y0, x1, y1) = self.bbox();
        if p.lon < x0 || p.lon > x1 || p.lat < y0 || p.lat > y1 {
            return false;
        }
        if self.rings.iter().any(|r| on_ring(r, p)) {
            return true;
        }
        let mut inside = false;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let (a, b) = (w[0], w[1]);
                if (a.lat > p.lat) != (b.lat > p.lat) {
                    let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                    if p.lon < x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }

    /// Distance in meters from `p` to the nearest ring edge, measured in an
    /// equirectangular frame centred on the parcel's bounding box.
    pub fn boundary_distance_m(&self, p: GeoPoint) -> Result<f64> {
        if p.lat.abs() >= 85.0 {
            return Err(domain(format!("latitude {} outside the supported range |lat| < 85", p.lat)));
        }
        let frame = LocalFrame::for_parcel(self);
        let q = frame.project(p);
        let mut best: Option<f64> = None;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let a = frame.project(w[0]);
                let b = frame.project(w[1]);
                if a == b {
                    continue;
                }
                let d = point_segment_distance(q, a, b);
                best = Some(best.map_or(d, |m: f64| m.min(d)));
            }
        }
        best.ok_or_else(|| domain(format!("parcel '{}' has only degenerate edges", self.id)))
    }
}

struct LocalFrame {
    lon0: f64,
    lat0: f64,
    cos_lat0: f64,
}

impl LocalFrame {
    fn for_parcel(parcel: &Parcel) -> Self {
        let (x0, y0, x1, y1) = parcel.bbox();
        let lat0 = 0.5 * (y0 + y1);
        LocalFrame { lon0: 0.5 * (x0 + x1), lat0, cos_lat0: lat0.to_radians().cos() }
    }

    fn project(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.lon0) * self.cos_lat0 * METERS_PER_DEGREE,
            (p.lat - self.lat0) * METERS_PER_DEGREE,
        )
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).hypot(p.1 - cy)
}

fn on_ring(ring: &[GeoPoint], p: GeoPoint) -> bool {
    ring.windows(2).any(|w| on_segment(w[0], w[1], p))
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    cross == 0.0
        && p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn segments_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    on_segment(a, b, c) || on_segment(a, b, d) || on_segment(c, d, a) || on_segment(c, d, b)
}

fn validate_rings(rings: &[Vec<GeoPoint>]) -> std::result::Result<(), String> {
    if rings.is_empty() {
        return Err("polygon has no rings".into());
    }
    for (r, ring) in rings.iter().enumerate() {
        let what = if r == 0 { "exterior ring".to_string() } else { format!("hole {r}") };
        if ring.len() < 4 || ring.first() != ring.last() {
            return Err(format!("{what} is not closed or has fewer than 4 positions"));
        }
        let open = &ring[..ring.len() - 1];
        let mut distinct: Vec<(u64, u64)> = open.iter().map(|p| (p.lon.to_bits(), p.lat.to_bits())).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(format!("{what} has fewer than 3 distinct vertices"));
        }
        if open.iter().any(|p| GeoPoint::new(p.lon, p.lat).is_err()) {
            return Err(format!("{what} has a coordinate out of range"));
        }
        // Non-adjacent edges must not touch; zero-length edges are ignored.
        let edges: Vec<(GeoPoint, GeoPoint)> = ring.windows(2).map(|w| (w[0], w[1])).filter(|(a, b)| a != b).collect();
        let m = edges.len();
        for i in 0..m {
            for j in i + 1..m {
                let adjacent = j == i + 1 || (i == 0 && j == m - 1);
                if adjacent {
                    // Adjacent edges may only share their common vertex.
                    let (a, b) = edges[i];
                    let (c, d) = edges[j];
                    let (far_i, far_j) = if j == i + 1 { (a, d) } else { (b, c) };
                    if on_segment(c, d, far_i) || on_segment(a, b, far_j) {
                        return Err(format!("{what} is self-intersecting (edges {i} and {j} overlap)"));
                    }
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return Err(format!("{what} is self-intersecting (edges {i} and {j})"));
                }
            }
        }
    }
    Ok(())
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn feature_label(feature: &Value, position: usize) -> String {
    match feature.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => match feature.pointer("/properties/id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("feature-{position}"),
        },
    }
}

fn parse_ring(value: &Value) -> std::result::Result<Vec<GeoPoint>, String> {
    let positions = value.as_array().ok_or("ring is not an array")?;
    positions
        .iter()
        .map(|pos| {
            let c = pos.as_array().filter(|c| c.len() >= 2).ok_or("position is not [lon, lat]")?;
            let lon = c[0].as_f64().ok_or("longitude is not a number")?;
            let lat = c[1].as_f64().ok_or("latitude is not a number")?;
            Ok(GeoPoint { lon, lat })
        })
        .collect()
}

fn parse_polygon(value: &Value) -> std::result::Result<Vec<Vec<GeoPoint>>, String> {
    value.as_array().ok_or("polygon coordinates are not an array")?.iter().map(parse_ring).collect()
}

/// Parses a GeoJSON FeatureCollection into parcels.
///
/// A `MultiPolygon` feature with id `P` becomes parcels `P#0`, `P#1`, ...
/// The optional `landuse` property lists fine class names; any name not in
/// the taxonomy is a validation error.
pub fn parse_parcels(document: &str, taxonomy: &Taxonomy) -> Result<Vec<Parcel>> {
    let root: Value = serde_json::from_str(document).map_err(|e| Error::Parse {
        offset: byte_offset(document, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let invalid = |feature: &str, message: String| Error::Validation { feature: feature.to_string(), message };
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(invalid("<root>", "document is not a FeatureCollection".into()));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("<root>", "missing features array".into()))?;

    let mut parcels = Vec::new();
    let mut seen = BTreeSet::new();
    for (position, feature) in features.iter().enumerate() {
        let label = feature_label(feature, position);
        let mut truth = BTreeSet::new();
        match feature.pointer("/properties/landuse") {
            None | Some(Value::Null) => {}
            Some(Value::Array(names)) => {
                let mut unknown = Vec::new();
                for n in names {
                    let name = n.as_str().ok_or_else(|| invalid(&label, "landuse entries must be strings".into()))?;
                    match taxonomy.index_of(Level::Fine, name) {
                        Some(i) => {
                            truth.insert(i);
                        }
                        None => unknown.push(format!("\"{name}\"")),
                    }
                }
                if !unknown.is_empty() {
                    return Err(invalid(&label, format!("unknown land-use class name(s): {}", unknown.join(", "))));
                }
            }
            Some(_) => return Err(invalid(&label, "landuse must be an array of class names".into())),
        }

        let geometry = feature.get("geometry").ok_or_else(|| invalid(&label, "missing geometry".into()))?;
        let coords = geometry.get("coordinates").ok_or_else(|| invalid(&label, "missing coordinates".into()))?;
        let polygons: Vec<(String, Vec<Vec<GeoPoint>>)> = match geometry.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![(label.clone(), parse_polygon(coords).map_err(|m| invalid(&label, m))?)],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| invalid(&label, "multipolygon coordinates are not an array".into()))?
                .iter()
                .enumerate()
                .map(|(k, poly)| Ok((format!("{label}#{k}"), parse_polygon(poly).map_err(|m| invalid(&label, m))?)))
                .collect::<Result<_>>()?,
            other => return Err(invalid(&label, format!("unsupported geometry type {other:?}"))),
        };
        for (id, rings) in polygons {
            if !seen.insert(id.clone()) {
                return Err(invalid(&id, "duplicate parcel id".into()));
            }
            parcels.push(Parcel::new(id, rings, truth.clone())?);
        }
    }
    Ok(parcels)
}

pub(crate) fn rings_to_json(rings: &[Vec<GeoPoint>]) -> Value {
    Value::Array(
        rings
            .iter()
            .map(|r| Value::Array(r.iter().map(|p| json!([p.lon, p.lat])).collect()))
            .collect(),
    )
}

/// Writes parcels back out as a FeatureCollection of Polygons.
pub fn parcels_to_geojson(parcels: &[Parcel], taxonomy: &Taxonomy) -> Result<String> {
    let features = parcels
        .iter()
        .map(|p| {
            let names = p
                .truth
                .iter()
                .map(|&i| taxonomy.name(Level::Fine, i).map(|s| Value::String(s.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let mut props = Map::new();
            props.insert("landuse".into(), Value::Array(names));
            Ok(json!({
                "type": "Feature",
                "id": p.id,
                "properties": props,
                "geometry": {"type": "Polygon", "coordinates": rings_to_json(&p.rings)},
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string(&json!({"type": "FeatureCollection", "features": features}))
        .expect("geojson serialization is infallible"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Containment {
    Inside,
    Dilated,
}

impl fmt::Display for Containment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Containment::Inside => "inside",
            Containment::Dilated => "dilated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParcelHit {
    pub parcel_id: String,
    pub mode: Containment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub image_id: String,
    /// Sorted by parcel id; never empty.
    pub hits: Vec<ParcelHit>,
}

/// One line of the assignments JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPair {
    pub image: String,
    pub parcel: String,
    pub mode: Containment,
}

/// Assigns each geotagged record to parcels. Records that match no parcel
/// are dropped. Output is sorted by image id, then parcel id.
pub fn assign(records: &[(String, GeoPoint)], parcels: &[Parcel], dilation_m: f64) -> Result<Vec<Assignment>> {
    if dilation_m.is_nan() || dilation_m < 0.0 {
        return Err(domain(format!("dilation must be non-negative, got {dilation_m}")));
    }
    let mut out = Vec::new();
    for (image_id, p) in records {
        let mut hits: Vec<ParcelHit> = parcels
            .iter()
            .filter(|parcel| parcel.contains(*p))
            .map(|parcel| ParcelHit { parcel_id: parcel.id.clone(), mode: Containment::Inside })
            .collect();
        if hits.is_empty() && dilation_m > 0.0 {
            for parcel in parcels {
                if parcel.boundary_distance_m(*p)? <= dilation_m {
                    hits.push(ParcelHit { parcel_id: parcel.id.clone(), mode: Containment::Dilated });
                }
            }
        }
        if !hits.is_empty() {
            hits.sort();
            out.push(Assignment { image_id: image_id.clone(), hits });
        }
    }
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(out)
}

pub fn assignment_pairs(assignments: &[Assignment]) -> impl Iterator<Item = AssignmentPair> + '_ {
    assignments.iter().flat_map(|a| {
        a.hits.iter().map(move |h| AssignmentPair {
            image: a.image_id.clone(),
            parcel: h.parcel_id.clone(),
            mode: h.mode,
        })
    })
}

pub fn assignments_to_jsonl(assignments: &[Assignment]) -> String {
    let mut out = String::new();
    for pair in assignment_pairs(assignments) {
        out.push_str(&serde_json::to_string(&pair).expect("assignment serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn assignments_from_jsonl(text: &str) -> Result<Vec<Assignment>> {
    let mut grouped: BTreeMap<String, Vec<ParcelHit>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: AssignmentPair = serde_json::from_str(line)
            .map_err(|e| Error::Load(format!("assignments line {}: {e}", lineno + 1)))?;
        grouped.entry(pair.image).or_default().push(ParcelHit { parcel_id: pair.parcel, mode: pair.mode });
    }
    Ok(grouped
        .into_iter()
        .map(|(image_id, mut hits)| {
            hits.sort();
            Assignment { image_id, hits }
        })
        .collect())
}

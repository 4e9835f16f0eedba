//! Image manifests, binary feature sidecars, and mixed-domain batching.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geodata::GeoPoint;
use crate::taxonomy::{Level, Taxonomy};

/// Magic bytes opening a feature sidecar file.
pub const FEATURE_MAGIC: &[u8; 5] = b"LUFV1";

/// Source domain of an image: A is the clean web-search domain, B the
/// noisier user-photo domain that mapping images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "google" => Ok(Domain::A),
            "B" | "b" | "flickr" => Ok(Domain::B),
            other => Err(Error::Load(format!("unknown domain '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub geo: Option<GeoPoint>,
    pub domain: Domain,
    /// Fine class index.
    pub label: Option<usize>,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl ImageRecord {
    pub fn stream(&self, stream: &str) -> Result<&[f64]> {
        self.features
            .get(stream)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Domain(format!("record '{}' has no features for stream '{stream}'", self.id)))
    }
}

#[derive(Deserialize)]
struct ManifestLine {
    id: String,
    lon: Option<f64>,
    lat: Option<f64>,
    domain: String,
    label: Option<String>,
    #[serde(default)]
    features: Option<BTreeMap<String, Vec<f64>>>,
    /// stream name -> sidecar path, relative to the manifest.
    #[serde(default)]
    features_ref: Option<BTreeMap<String, String>>,
}

/// Serialisable manifest line with inline features.
pub fn record_to_json(record: &ImageRecord, taxonomy: &Taxonomy) -> Result<Value> {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), Value::from(record.id.clone()));
    if let Some(g) = record.geo {
        obj.insert("lon".into(), Value::from(g.lon));
        obj.insert("lat".into(), Value::from(g.lat));
    }
    obj.insert("domain".into(), Value::from(record.domain.to_string()));
    if let Some(l) = record.label {
        obj.insert("label".into(), Value::from(taxonomy.name(Level::Fine, l)?));
    }
    obj.insert(
        "features".into(),
        serde_json::to_value(&record.features).expect("feature map serialization is infallible"),
    );
    Ok(Value::Object(obj))
}

pub fn records_to_jsonl(records: &[ImageRecord], taxonomy: &Taxonomy) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_json(r, taxonomy)?.to_string());
        out.push('\n');
    }
    Ok(out)
}

/// Loads a JSON-lines manifest. Relative `features_ref` paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &base, taxonomy)
}

pub fn parse_manifest(text: &str, base: &Path, taxonomy: &Taxonomy) -> Result<Vec<ImageRecord>> {
    let mut sidecars: HashMap<PathBuf, HashMap<String, Vec<f64>>> = HashMap::new();
    let mut dims: Option<BTreeMap<String, usize>> = None;
    let mut records = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(line)
            .map_err(|e| Error::Load(format!("manifest line {}: {e}", lineno + 1)))?;
        let id = raw.id;
        let fail = |msg: String| Error::Load(format!("record '{id}': {msg}"));

        let geo = match (raw.lon, raw.lat) {
            (Some(lon), Some(lat)) => Some(GeoPoint::new(lon, lat).map_err(|e| fail(e.to_string()))?),
            (None, None) => None,
            _ => return Err(fail("lon and lat must be given together".into())),
        };
        let domain: Domain = raw.domain.parse().map_err(|e: Error| fail(e.to_string()))?;
        let label = match raw.label {
            Some(name) => Some(
                taxonomy
                    .index_of(Level::Fine, &name)
                    .ok_or_else(|| fail(format!("unknown label '{name}'")))?,
            ),
            None => None,
        };

        let features = match (raw.features, raw.features_ref) {
            (Some(f), None) => f,
            (None, Some(refs)) => {
                let mut f = BTreeMap::new();
                for (stream, rel) in refs {
                    let p = base.join(rel);
                    if !sidecars.contains_key(&p) {
                        sidecars.insert(p.clone(), read_sidecar(&p)?);
                    }
                    let v = sidecars[&p]
                        .get(&id)
                        .ok_or_else(|| fail(format!("not present in sidecar {}", p.display())))?;
                    f.insert(stream, v.clone());
                }
                f
            }
            _ => return Err(fail("exactly one of features / features_ref is required".into())),
        };
        if features.is_empty() {
            return Err(fail("no feature streams".into()));
        }
        for (stream, v) in &features {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(fail(format!("non-finite value in stream '{stream}'")));
            }
        }
        let these: BTreeMap<String, usize> = features.iter().map(|(s, v)| (s.clone(), v.len())).collect();
        match &dims {
            None => dims = Some(these),
            Some(d) if *d != these => {
                return Err(fail(format!("feature dimensions {these:?} differ from dataset dimensions {d:?}")));
            }
            _ => {}
        }
        records.push(ImageRecord { id, geo, domain, label, features });
    }
    Ok(records)
}

/// Reads a feature sidecar: magic, u32 count, u32 dim, then per record
/// (u32 id length, id bytes, dim x f32), all little-endian.
pub fn read_sidecar(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("cannot read sidecar {}: {e}", path.display())))?;
    decode_sidecar(&bytes).map_err(|m| Error::Load(format!("sidecar {}: {m}", path.display())))
}

pub fn decode_sidecar(bytes: &[u8]) -> std::result::Result<HashMap<String, Vec<f64>>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != FEATURE_MAGIC {
        return Err("bad magic, expected LUFV1".into());
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "id is not UTF-8")?;
        let v = (0..dim).map(|_| r.f32().map(f64::from)).collect::<std::result::Result<Vec<_>, _>>()?;
        out.insert(id, v);
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after last record".into());
    }
    Ok(out)
}

pub fn encode_sidecar(entries: &[(&str, &[f32])]) -> std::result::Result<Vec<u8>, String> {
    let dim = entries.first().map_or(0, |(_, v)| v.len());
    let mut out = FEATURE_MAGIC.to_vec();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, v) in entries {
        if v.len() != dim {
            return Err(format!("record '{id}' has dimension {} instead of {dim}", v.len()));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in *v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Indices into the record slice a batch was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Mixed-domain batch sampler. Each full batch holds
/// `round(batch_size * domain_ratio)` domain-A records and the rest from B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedSampler {
    pub batch_size: usize,
    pub domain_ratio: f64,
    pub seed: u64,
}

impl StratifiedSampler {
    pub fn new(batch_size: usize, domain_ratio: f64, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        if !(0.0..=1.0).contains(&domain_ratio) {
            return Err(Error::Config(format!("domain ratio must lie in [0, 1], got {domain_ratio}")));
        }
        Ok(StratifiedSampler { batch_size, domain_ratio, seed })
    }

    pub fn quota(&self) -> (usize, usize) {
        let a = (self.batch_size as f64 * self.domain_ratio).round() as usize;
        (a, self.batch_size - a)
    }

    /// Batches for one epoch. The epoch ends when the domain that needs the
    /// most batches to exhaust is used up; the other domain recycles with a
    /// fresh shuffle. Trailing partial batches are dropped.
    pub fn epoch(&self, records: &[ImageRecord], epoch: usize) -> Result<Vec<Batch>> {
        let (qa, qb) = self.quota();
        let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, r) in records.iter().enumerate() {
            pools[r.domain as usize].push(i);
        }
        for (quota, pool, name) in [(qa, &pools[0], "A"), (qb, &pools[1], "B")] {
            if quota > 0 && pool.is_empty() {
                return Err(Error::Config(format!("domain {name} is required by the batch ratio but has no records")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for pool in pools.iter_mut() {
            pool.shuffle(&mut rng);
        }
        let full = |quota: usize, len: usize| len.checked_div(quota).unwrap_or(0);
        let n_batches = full(qa, pools[0].len()).max(full(qb, pools[1].len()));

        let mut cursors = [0usize; 2];
        let mut batches = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let mut indices = Vec::with_capacity(self.batch_size);
            for (d, quota) in [(0, qa), (1, qb)] {
                for _ in 0..quota {
                    if cursors[d] == pools[d].len() {
                        pools[d].shuffle(&mut rng);
                        cursors[d] = 0;
                    }
                    indices.push(pools[d][cursors[d]]);
                    cursors[d] += 1;
                }
            }
            batches.push(Batch { indices });
        }
        Ok(batches)
    }
}

pub fn stratified_batches(records: &[ImageRecord], batch_size: usize, domain_ratio: f64, seed: u64) -> Result<Vec<Batch>> {
    StratifiedSampler::new(batch_size, domain_ratio, seed)?.epoch(records, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(id: usize, domain: Domain) -> ImageRecord {
        ImageRecord {
            id: format!("r{id}"),
            geo: None,
            domain,
            label: Some(0),
            features: BTreeMap::from([("object".to_string(), vec![id as f64])]),
        }
    }

    fn mixed(na: usize, nb: usize) -> Vec<ImageRecord> {
        (0..na).map(|i| rec(i, Domain::A)).chain((na..na + nb).map(|i| rec(i, Domain::B))).collect()
    }

    #[test]
    fn manifest_loads_and_resolves_labels() {
        let t = Taxonomy::builtin();
        let text = r#"{"id":"a","lon":-122.4,"lat":37.7,"domain":"A","label":"restaurant","features":{"object":[1,2]}}
{"id":"b","domain":"B","features":{"object":[3,4]}}

{"id":"c","domain":"flickr","label":"bank","features":{"object":[5,6]}}
"#;
        let recs = parse_manifest(text, Path::new("."), &t).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].label, t.index_of(Level::Fine, "restaurant"));
        assert_eq!(recs[1].geo, None);
        assert_eq!(recs[2].domain, Domain::B);
    }

    #[test]
    fn manifest_dimension_mismatch_names_record() {
        let t = Taxonomy::builtin();
        let ok: Vec<f64> = vec![0.0; 64];
        let short: Vec<f64> = vec![0.0; 63];
        let text = format!(
            "{{\"id\":\"good\",\"domain\":\"A\",\"features\":{{\"object\":{ok:?}}}}}\n{{\"id\":\"short-one\",\"domain\":\"A\",\"features\":{{\"object\":{short:?}}}}}\n"
        );
        let err = parse_manifest(&text, Path::new("."), &t).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
        assert!(err.to_string().contains("short-one"), "{err}");
    }

    #[test]
    fn manifest_rejects_unknown_label_and_nonfinite() {
        let t = Taxonomy::builtin();
        let bad_label = r#"{"id":"x","domain":"A","label":"cafe","features":{"object":[1]}}"#;
        assert!(parse_manifest(bad_label, Path::new("."), &t).unwrap_err().to_string().contains("cafe"));
        // serde_json rejects NaN literals outright; overflowing floats parse to inf.
        let inf = r#"{"id":"x","domain":"A","features":{"object":[1e400]}}"#;
        assert!(parse_manifest(inf, Path::new("."), &t).is_err());
    }

    #[test]
    fn sidecar_features() {
        let t = Taxonomy::builtin();
        let dir = tempfile::tempdir().unwrap();
        let bytes = encode_sidecar(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.5])]).unwrap();
        fs::write(dir.path().join("obj.lufv"), &bytes).unwrap();
        fs::write(
            dir.path().join("m.jsonl"),
            "{\"id\":\"b\",\"domain\":\"A\",\"features_ref\":{\"object\":\"obj.lufv\"}}\n",
        )
        .unwrap();
        let recs = load_manifest(&dir.path().join("m.jsonl"), &t).unwrap();
        assert_eq!(recs[0].features["object"], vec![3.0, 4.5]);

        assert!(decode_sidecar(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_sidecar(&wrong).unwrap_err().contains("LUFV1"));
    }

    #[test]
    fn half_and_half_batches() {
        let recs = mixed(600, 300);
        let batches = stratified_batches(&recs, 256, 0.5, 1).unwrap();
        assert_eq!(batches.len(), 600 / 128);
        for b in &batches {
            assert_eq!(b.size(), 256);
            let a = b.indices.iter().filter(|&&i| recs[i].domain == Domain::A).count();
            assert_eq!(a, 128);
        }
        // Longer domain appears at most once per epoch.
        let seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.iter().copied()).filter(|&i| i < 600).collect();
        let unique: HashSet<_> = seen.iter().collect();
        assert_eq!(seen.len(), unique.len());
        assert_eq!(seen.len(), 4 * 128);
    }

    #[test]
    fn ratio_one_uses_only_domain_a() {
        let recs = mixed(10, 0);
        let batches = stratified_batches(&recs, 4, 1.0, 3).unwrap();
        assert_eq!(batches.len(), 2);
        let all: HashSet<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn missing_domain_is_config_error() {
        let recs = mixed(10, 0);
        assert!(matches!(stratified_batches(&recs, 4, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(StratifiedSampler::new(1, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(StratifiedSampler::new(4, 1.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_determinism() {
        let recs = mixed(120, 80);
        let a = stratified_batches(&recs, 10, 0.5, 42).unwrap();
        let b = stratified_batches(&recs, 10, 0.5, 42).unwrap();
        let c = stratified_batches(&recs, 10, 0.5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let sampler = StratifiedSampler::new(10, 0.5, 42).unwrap();
        assert_ne!(sampler.epoch(&recs, 0).unwrap(), sampler.epoch(&recs, 1).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn composition_and_coverage(na in 1usize..80, nb in 1usize..80, bs in 2usize..16, ratio in 0.0f64..=1.0, seed: u64) {
                let recs = mixed(na, nb);
                let sampler = StratifiedSampler::new(bs, ratio, seed).unwrap();
                let (qa, qb) = sampler.quota();
                let batches = sampler.epoch(&recs, 0).unwrap();
                for b in &batches {
                    prop_assert_eq!(b.size(), bs);
                    let a = b.indices.iter().filter(|&&i| recs[i].domain == Domain::A).count();
                    prop_assert_eq!(a, qa);
                }
                // The limiting domain is used exactly once per full batch slot.
                let full = |q: usize, n: usize| if q == 0 { 0 } else { n / q };
                let (longer, quota, n) = if full(qa, na) >= full(qb, nb) { (Domain::A, qa, na) } else { (Domain::B, qb, nb) };
                let used: Vec<usize> = batches.iter().flat_map(|b| b.indices.iter().copied()).filter(|&i| recs[i].domain == longer).collect();
                let unique: HashSet<_> = used.iter().collect();
                prop_assert_eq!(used.len(), unique.len());
                prop_assert_eq!(used.len(), (n / quota.max(1)) * quota);
            }
        }
    }
}

//! Late fusion of per-stream scores and per-parcel vote aggregation.

use std::collections::{BTreeMap, HashMap};

use serde_json::{json, Map, Value};

use crate::classifier::{argmax, ScoreVector, SoftmaxModel};
use crate::dataset::ImageRecord;
use crate::error::{domain, Error, Result};
use crate::geodata::{rings_to_json, Assignment, Parcel};
use crate::taxonomy::{Level, Taxonomy};

/// Non-negative per-stream weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(BTreeMap<String, f64>);

impl FusionWeights {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("fusion needs at least one stream".into()));
        }
        if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("fusion weights must be finite and non-negative".into()));
        }
        let s: f64 = weights.values().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("fusion weights sum to {s}, not 1")));
        }
        Ok(FusionWeights(weights))
    }

    pub fn equal<S: AsRef<str>>(streams: &[S]) -> Result<Self> {
        let w = 1.0 / streams.len().max(1) as f64;
        Self::new(streams.iter().map(|s| (s.as_ref().to_string(), w)).collect())
    }

    pub fn get(&self, stream: &str) -> Option<f64> {
        self.0.get(stream).copied()
    }

    pub fn streams(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Convex combination of per-stream score vectors.
pub fn fuse(scores: &BTreeMap<String, ScoreVector>, weights: &FusionWeights) -> Result<ScoreVector> {
    if scores.len() != weights.0.len() || scores.keys().any(|s| weights.get(s).is_none()) {
        return Err(domain(format!(
            "score streams {:?} do not match fusion streams {:?}",
            scores.keys().collect::<Vec<_>>(),
            weights.0.keys().collect::<Vec<_>>()
        )));
    }
    let n = scores.values().next().map_or(0, ScoreVector::len);
    if scores.values().any(|s| s.len() != n) {
        return Err(domain("score vectors differ in length"));
    }
    let mut out = vec![0.0; n];
    for (stream, s) in scores {
        let w = weights.0[stream];
        for (o, v) in out.iter_mut().zip(s.as_slice()) {
            *o += w * v;
        }
    }
    ScoreVector::new(out)
}

/// Fused scores and argmax class (ties to the lowest index) for one record.
pub fn predict_image(models: &[SoftmaxModel], record: &ImageRecord, weights: &FusionWeights) -> Result<(usize, ScoreVector)> {
    let mut scores = BTreeMap::new();
    for m in models {
        let x = record.stream(&m.stream)?;
        scores.insert(m.stream.clone(), m.forward(x)?);
    }
    let fused = fuse(&scores, weights)?;
    Ok((fused.argmax(), fused))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParcelPrediction {
    pub parcel_id: String,
    /// Class index -> number of image votes.
    pub histogram: BTreeMap<usize, u32>,
    pub majority: usize,
    pub support: u32,
}

fn majority_of(histogram: &BTreeMap<usize, u32>) -> usize {
    // BTreeMap iterates in index order, so the first maximum is the lowest index.
    let mut best = (0usize, 0u32);
    for (&k, &v) in histogram {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

fn histograms(assignments: &[Assignment], predictions: &HashMap<String, usize>) -> Result<BTreeMap<String, BTreeMap<usize, u32>>> {
    let mut out: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
    for a in assignments {
        let class = *predictions
            .get(&a.image_id)
            .ok_or_else(|| domain(format!("no prediction for image '{}'", a.image_id)))?;
        for hit in &a.hits {
            *out.entry(hit.parcel_id.clone()).or_default().entry(class).or_default() += 1;
        }
    }
    Ok(out)
}

/// One hard vote per (image, parcel) assignment pair. Output sorted by parcel id.
pub fn aggregate_parcels(assignments: &[Assignment], predictions: &HashMap<String, usize>) -> Result<Vec<ParcelPrediction>> {
    Ok(histograms(assignments, predictions)?
        .into_iter()
        .map(|(parcel_id, histogram)| ParcelPrediction {
            parcel_id,
            majority: majority_of(&histogram),
            support: histogram.values().sum(),
            histogram,
        })
        .collect())
}

/// Like [`aggregate_parcels`], but the majority is the argmax of the summed
/// fused scores instead of the most frequent hard vote.
pub fn aggregate_parcels_by_score(assignments: &[Assignment], scores: &HashMap<String, ScoreVector>) -> Result<Vec<ParcelPrediction>> {
    let hard: HashMap<String, usize> = scores.iter().map(|(k, v)| (k.clone(), v.argmax())).collect();
    let mut parcels = aggregate_parcels(assignments, &hard)?;
    let mut sums: HashMap<&str, Vec<f64>> = HashMap::new();
    for a in assignments {
        let s = &scores[&a.image_id];
        for hit in &a.hits {
            let acc = sums.entry(hit.parcel_id.as_str()).or_insert_with(|| vec![0.0; s.len()]);
            for (o, v) in acc.iter_mut().zip(s.as_slice()) {
                *o += v;
            }
        }
    }
    for p in &mut parcels {
        p.majority = argmax(&sums[p.parcel_id.as_str()]);
    }
    Ok(parcels)
}

/// GeoJSON map of predicted parcels. Vote classes are indices at
/// `prediction_level`; `landuse_pred` is the majority rolled up to `level`
/// and the histogram keeps the raw votes.
pub fn export_map(
    parcels: &[Parcel],
    predictions: &[ParcelPrediction],
    taxonomy: &Taxonomy,
    prediction_level: Level,
    level: Level,
    provenance: Option<&Value>,
) -> Result<String> {
    let by_id: HashMap<&str, &Parcel> = parcels.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut features = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let parcel = by_id
            .get(pred.parcel_id.as_str())
            .ok_or_else(|| domain(format!("prediction for unknown parcel '{}'", pred.parcel_id)))?;
        let mut hist = Map::new();
        for (&class, &count) in &pred.histogram {
            hist.insert(taxonomy.name(prediction_level, class)?.to_string(), Value::from(count));
        }
        let label = taxonomy.name(level, taxonomy.lift(pred.majority, prediction_level, level)?)?;
        features.push(json!({
            "type": "Feature",
            "id": pred.parcel_id,
            "properties": {
                "parcel": pred.parcel_id,
                "landuse_pred": label,
                "support": pred.support,
                "histogram": hist,
            },
            "geometry": {"type": "Polygon", "coordinates": rings_to_json(&parcel.rings)},
        }));
    }
    let mut root = Map::new();
    root.insert("type".into(), Value::from("FeatureCollection"));
    root.insert("level".into(), Value::from(level.as_str()));
    if let Some(p) = provenance {
        root.insert("provenance".into(), p.clone());
    }
    root.insert("features".into(), Value::Array(features));
    Ok(serde_json::to_string(&Value::Object(root)).expect("geojson serialization is infallible"))
}

//! Image-level accuracy and parcel-level mapping precision / recall / F1.
//!
//! A *mapping* is one (image, parcel) assignment pair on a parcel that has
//! ground truth. It is correct when the predicted class is one of the
//! parcel's truth classes at the evaluation level. A *ground-truth record*
//! is one (parcel, fine class) truth entry; at coarser levels the record
//! keeps its identity and is compared through its rolled-up class. A record
//! is recalled when at least one image on its parcel predicts its class.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geodata::{Assignment, Parcel};
use crate::taxonomy::{Level, Taxonomy};

/// Fraction of predicted ids whose class equals the label.
pub fn image_accuracy(predictions: &HashMap<String, usize>, labels: &HashMap<String, usize>) -> Result<f64> {
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (id, p) in predictions {
        let y = labels.get(id).ok_or_else(|| domain(format!("no label for image '{id}'")))?;
        if p == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

/// Per-class image accuracy at `level`, from predictions at
/// `prediction_level` and fine labels. Entry `c` is
/// `(accuracy, labeled images of class c)`.
pub fn per_class_image_accuracy(
    predictions: &HashMap<String, usize>,
    prediction_level: Level,
    labels: &HashMap<String, usize>,
    taxonomy: &Taxonomy,
    level: Level,
) -> Result<Vec<(Option<f64>, u64)>> {
    let n = taxonomy.len(level);
    let mut hits = vec![0u64; n];
    let mut totals = vec![0u64; n];
    for (id, &p) in predictions {
        let y = *labels.get(id).ok_or_else(|| domain(format!("no label for image '{id}'")))?;
        let (p, y) = (taxonomy.lift(p, prediction_level, level)?, taxonomy.roll_up(y, level)?);
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .into_iter()
        .zip(totals)
        .map(|(h, t)| ((t > 0).then(|| h as f64 / t as f64), t))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Counting {
    /// One prediction per (image, parcel) pair.
    Pair,
    /// One prediction per parcel: its majority vote.
    Parcel,
}

impl FromStr for Counting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Counting::Pair),
            "parcel" => Ok(Counting::Parcel),
            other => Err(Error::Config(format!("unknown counting '{other}' (expected pair or parcel)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingOptions {
    pub counting: Counting,
    /// Count images on parcels without ground truth as (incorrect) predictions.
    pub include_untruthed: bool,
}

impl Default for MappingOptions {
    fn default() -> Self {
        MappingOptions { counting: Counting::Pair, include_untruthed: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub predicted: u64,
    pub correct: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Ground-truth records of this class.
    pub support: u64,
    pub recalled: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub level: Level,
    pub correct: u64,
    pub predictions: u64,
    pub gt_records: u64,
    pub recalled: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mapping metrics at `level`. `predictions` are class indices at
/// `prediction_level`, which must be at least as fine as `level`.
pub fn mapping_metrics(
    assignments: &[Assignment],
    predictions: &HashMap<String, usize>,
    prediction_level: Level,
    parcels: &[Parcel],
    taxonomy: &Taxonomy,
    level: Level,
    options: MappingOptions,
) -> Result<MappingReport> {
    if prediction_level > level {
        return Err(domain(format!("predictions at {prediction_level} level cannot be scored at {level} level")));
    }
    let n = taxonomy.len(level);
    let by_id: HashMap<&str, &Parcel> = parcels.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut truth_at: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for p in parcels {
        let set = p.truth.iter().map(|&t| taxonomy.roll_up(t, level)).collect::<Result<_>>()?;
        truth_at.insert(p.id.as_str(), set);
    }

    // Votes per parcel at the evaluation level.
    let mut votes: BTreeMap<&str, BTreeMap<usize, u64>> = BTreeMap::new();
    for a in assignments {
        let raw = *predictions
            .get(&a.image_id)
            .ok_or_else(|| domain(format!("no prediction for image '{}'", a.image_id)))?;
        let class = taxonomy.lift(raw, prediction_level, level)?;
        for hit in &a.hits {
            let parcel = by_id
                .get(hit.parcel_id.as_str())
                .ok_or_else(|| domain(format!("assignment to unknown parcel '{}'", hit.parcel_id)))?;
            *votes.entry(parcel.id.as_str()).or_default().entry(class).or_default() += 1;
        }
    }

    let mut predicted = vec![0u64; n];
    let mut correct_c = vec![0u64; n];
    for (&pid, hist) in &votes {
        let truth = &truth_at[pid];
        if truth.is_empty() && !options.include_untruthed {
            continue;
        }
        match options.counting {
            Counting::Pair => {
                for (&class, &count) in hist {
                    predicted[class] += count;
                    if truth.contains(&class) {
                        correct_c[class] += count;
                    }
                }
            }
            Counting::Parcel => {
                let mut majority = (0usize, 0u64);
                for (&class, &count) in hist {
                    if count > majority.1 {
                        majority = (class, count);
                    }
                }
                predicted[majority.0] += 1;
                if truth.contains(&majority.0) {
                    correct_c[majority.0] += 1;
                }
            }
        }
    }

    let mut support = vec![0u64; n];
    let mut recalled_c = vec![0u64; n];
    for p in parcels {
        let hist = votes.get(p.id.as_str());
        for &t in &p.truth {
            let class = taxonomy.roll_up(t, level)?;
            support[class] += 1;
            if hist.is_some_and(|h| h.contains_key(&class)) {
                recalled_c[class] += 1;
            }
        }
    }

    let correct: u64 = correct_c.iter().sum();
    let predictions_total: u64 = predicted.iter().sum();
    let gt_records: u64 = support.iter().sum();
    let recalled: u64 = recalled_c.iter().sum();
    let precision = ratio(correct, predictions_total);
    let recall = ratio(recalled, gt_records);

    let mut per_class = Vec::with_capacity(n);
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for c in 0..n {
        let p = (predicted[c] > 0).then(|| ratio(correct_c[c], predicted[c]));
        let r = (support[c] > 0).then(|| ratio(recalled_c[c], support[c]));
        let f1 = r.map(|r| harmonic(p.unwrap_or(0.0), r));
        if let Some(f) = f1 {
            f1_sum += f;
            f1_count += 1;
        }
        per_class.push(ClassMetrics {
            class: c,
            name: taxonomy.name(level, c)?.to_string(),
            predicted: predicted[c],
            correct: correct_c[c],
            precision: p,
            recall: r,
            f1,
            support: support[c],
            recalled: recalled_c[c],
        });
    }

    Ok(MappingReport {
        level,
        correct,
        predictions: predictions_total,
        gt_records,
        recalled,
        precision,
        recall,
        f1_micro: harmonic(precision, recall),
        f1_macro: if f1_count == 0 { 0.0 } else { f1_sum / f1_count as f64 },
        per_class,
    })
}

/// Header of the per-class CSV table.
pub const PER_CLASS_COLUMNS: &str =
    "class,image_accuracy,image_support,mapping_precision,mapping_recall,mapping_f1,gt_support";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One CSV row per class at the report's level. Undefined values are empty.
/// `image` optionally supplies per-class image accuracy from
/// [`per_class_image_accuracy`].
pub fn per_class_report(report: &MappingReport, image: Option<&[(Option<f64>, u64)]>) -> String {
    let mut out = String::from(PER_CLASS_COLUMNS);
    out.push('\n');
    for (c, m) in report.per_class.iter().enumerate() {
        let (acc, n_img) = image.and_then(|v| v.get(c)).copied().unwrap_or((None, 0));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&m.name),
            cell(acc),
            n_img,
            cell(m.precision),
            cell(m.recall),
            cell(m.f1),
            m.support
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{Containment, GeoPoint, ParcelHit};

    fn square(id: &str, x: f64, truth: &[usize]) -> Parcel {
        let ring = [(x, 0.), (x + 1., 0.), (x + 1., 1.), (x, 1.), (x, 0.)].iter().map(|&(lon, lat)| GeoPoint { lon, lat }).collect();
        Parcel::new(id, vec![ring], truth.iter().copied().collect()).unwrap()
    }

    fn a(image: &str, parcel: &str) -> Assignment {
        Assignment { image_id: image.into(), hits: vec![ParcelHit { parcel_id: parcel.into(), mode: Containment::Inside }] }
    }

    struct Fixture {
        t: Taxonomy,
        parcels: Vec<Parcel>,
        assignments: Vec<Assignment>,
        preds: HashMap<String, usize>,
    }

    fn fixture() -> Fixture {
        let t = Taxonomy::builtin();
        let f = |n: &str| t.index_of(Level::Fine, n).unwrap();
        let parcels = vec![square("P1", 0., &[f("restaurant"), f("bar")]), square("P2", 2., &[f("bank")])];
        let assignments = vec![a("i1", "P1"), a("i2", "P1"), a("i3", "P2")];
        let preds = [("i1", f("restaurant")), ("i2", f("school")), ("i3", f("bank"))]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        Fixture { t, parcels, assignments, preds }
    }

    #[test]
    fn hand_fixture() {
        let fx = fixture();
        let r = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Fine, MappingOptions::default()).unwrap();
        assert_eq!((r.correct, r.predictions, r.gt_records, r.recalled), (2, 3, 3, 2));
        assert_eq!(r.precision, 2.0 / 3.0);
        assert_eq!(r.recall, 2.0 / 3.0);
        assert!((r.f1_micro - 2.0 / 3.0).abs() < 1e-15);
        let bank = fx.t.index_of(Level::Fine, "bank").unwrap();
        assert_eq!(r.per_class[bank].recall, Some(1.0));
        let bar = fx.t.index_of(Level::Fine, "bar").unwrap();
        assert_eq!(r.per_class[bar].recall, Some(0.0));
        // restaurant, bar, bank have support: f1 = (1 + 0 + 1) / 3
        assert!((r.f1_macro - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_report_rows() {
        let fx = fixture();
        let r = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Fine, MappingOptions::default()).unwrap();
        let csv = per_class_report(&r, None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], PER_CLASS_COLUMNS);
        assert_eq!(lines.len(), 46);
        let bank = lines.iter().find(|l| l.starts_with("bank,")).unwrap();
        assert_eq!(bank.split(',').nth(4).unwrap(), "1.000000");
        let lodging = lines.iter().find(|l| l.starts_with("lodging,")).unwrap();
        assert_eq!(lodging.split(',').nth(4).unwrap(), "");

        let top = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Top, MappingOptions::default()).unwrap();
        let csv = per_class_report(&top, None);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.contains("\"Transportation, communication, information, and utilities\""));
    }

    #[test]
    fn empty_case_is_zero() {
        let fx = fixture();
        let r = mapping_metrics(&[], &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Fine, MappingOptions::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1_micro), (0.0, 0.0, 0.0));
    }

    #[test]
    fn untruthed_parcels_are_excluded_unless_requested() {
        let mut fx = fixture();
        fx.parcels.push(square("P3", 4., &[]));
        fx.assignments.push(a("i4", "P3"));
        fx.preds.insert("i4".into(), 0);
        let r = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Fine, MappingOptions::default()).unwrap();
        assert_eq!(r.predictions, 3);
        let opts = MappingOptions { include_untruthed: true, ..MappingOptions::default() };
        let r = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Fine, opts).unwrap();
        assert_eq!((r.correct, r.predictions), (2, 4));
    }

    #[test]
    fn parcel_counting() {
        let fx = fixture();
        let opts = MappingOptions { counting: Counting::Parcel, ..MappingOptions::default() };
        let r = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Fine, opts).unwrap();
        // P1 majority: tie restaurant/school -> restaurant (lower index); P2 bank.
        assert_eq!((r.correct, r.predictions), (2, 2));
        assert_eq!(r.recall, 2.0 / 3.0);
    }

    #[test]
    fn roll_up_and_level_mismatch() {
        let fx = fixture();
        let top = mapping_metrics(&fx.assignments, &fx.preds, Level::Fine, &fx.parcels, &fx.t, Level::Top, MappingOptions::default()).unwrap();
        // school rolls to Education, never in P1's truth; restaurant/bar share a top class.
        assert_eq!((top.correct, top.predictions, top.gt_records, top.recalled), (2, 3, 3, 3));
        let middle_preds: HashMap<String, usize> =
            fx.preds.iter().map(|(k, &v)| (k.clone(), fx.t.roll_up(v, Level::Middle).unwrap())).collect();
        assert!(mapping_metrics(&fx.assignments, &middle_preds, Level::Middle, &fx.parcels, &fx.t, Level::Fine, MappingOptions::default()).is_err());
        let via_middle = mapping_metrics(&fx.assignments, &middle_preds, Level::Middle, &fx.parcels, &fx.t, Level::Top, MappingOptions::default()).unwrap();
        assert_eq!(via_middle, top);
    }

    #[test]
    fn image_accuracy_cases() {
        let m = |v: &[(&str, usize)]| v.iter().map(|(k, c)| (k.to_string(), *c)).collect::<HashMap<_, _>>();
        let labels = m(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)]);
        assert_eq!(image_accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(image_accuracy(&m(&[("a", 0), ("b", 0)]), &labels).unwrap(), 0.0);
        assert_eq!(image_accuracy(&m(&[("a", 1), ("b", 2), ("c", 3), ("d", 0)]), &labels).unwrap(), 0.75);
        assert!(image_accuracy(&m(&[("zz", 1)]), &labels).is_err());
    }
}

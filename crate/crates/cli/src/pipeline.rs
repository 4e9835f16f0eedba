use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use landuse_core::classifier::{train, Schedule, SoftmaxModel, TrainOutcome};
use landuse_core::dataset::{load_manifest, records_to_jsonl, ImageRecord};
use landuse_core::evaluation::{image_accuracy, mapping_metrics, per_class_image_accuracy, per_class_report};
use landuse_core::fusion::{aggregate_parcels, aggregate_parcels_by_score, export_map, predict_image};
use landuse_core::geodata::{assign, assignments_from_jsonl, assignments_to_jsonl, parcels_to_geojson, parse_parcels, Parcel};
use landuse_core::synth::{generate, BlobSpec, CitySpec};
use landuse_core::{
    adaptive_finetune, Assignment, Counting, Error, FusionWeights, GateConfig, GateMode, Level, MappingOptions,
    ScoreVector, Taxonomy,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Filter,
    Train,
    Adapt,
    Predict,
    Map,
    Eval,
    Synth,
    All,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    image: String,
    class: String,
    index: usize,
    level: Level,
    scores: ScoreVector,
}

struct Ctx {
    cfg: Config,
    taxonomy: Taxonomy,
    provenance: Value,
}

pub fn run(command: Command, cfg: Config) -> Result<(), Error> {
    let taxonomy = match cfg.raw("taxonomy") {
        "" => Taxonomy::builtin(),
        _ => Taxonomy::from_text(&read_text(&cfg.input_path("taxonomy", ""))?)?,
    };
    let provenance = json!({"config_hash": cfg.hash(), "seed": cfg.seed()?});
    let ctx = Ctx { cfg, taxonomy, provenance };
    fs::create_dir_all(ctx.cfg.out_dir())?;
    match command {
        Command::Synth => synth(&ctx),
        Command::Filter => filter(&ctx),
        Command::Train => train_stage(&ctx),
        Command::Adapt => adapt(&ctx),
        Command::Predict => predict(&ctx),
        Command::Map => map(&ctx),
        Command::Eval => eval(&ctx),
        Command::All => {
            filter(&ctx)?;
            train_stage(&ctx)?;
            adapt(&ctx)?;
            predict(&ctx)?;
            map(&ctx)?;
            eval(&ctx)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    if !path.exists() {
        return Err(Error::Load(format!("missing input file {}", path.display())));
    }
    Ok(fs::read_to_string(path)?)
}

fn load_model(path: &Path) -> Result<SoftmaxModel, Error> {
    if !path.exists() {
        return Err(Error::Load(format!("missing model file {}", path.display())));
    }
    SoftmaxModel::load(path)
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir().join(name)
    }

    /// Writes an artifact and records its provenance in `provenance.json`.
    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Error> {
        fs::write(self.out(name), bytes)?;
        let index_path = self.out("provenance.json");
        let mut index: BTreeMap<String, Value> = match fs::read_to_string(&index_path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        index.insert(name.to_string(), self.provenance.clone());
        let text = serde_json::to_string_pretty(&index).expect("provenance serializes");
        fs::write(index_path, text + "\n")?;
        Ok(())
    }

    fn write_json(&self, name: &str, mut body: Map<String, Value>) -> Result<(), Error> {
        body.insert("provenance".into(), self.provenance.clone());
        let text = serde_json::to_string_pretty(&Value::Object(body)).expect("json serializes");
        self.write(name, (text + "\n").as_bytes())
    }

    fn parcels(&self) -> Result<Vec<Parcel>, Error> {
        parse_parcels(&read_text(&self.cfg.input_path("parcels", "parcels.geojson"))?, &self.taxonomy)
    }

    fn manifest(&self, key: &str, default: &str) -> Result<Vec<ImageRecord>, Error> {
        let path = self.cfg.input_path(key, default);
        if !path.exists() {
            return Err(Error::Load(format!("missing manifest {}", path.display())));
        }
        load_manifest(&path, &self.taxonomy)
    }

    fn streams(&self) -> Result<Vec<String>, Error> {
        let streams = self.cfg.list("streams");
        if streams.is_empty() {
            return Err(Error::Config("streams must name at least one feature stream".into()));
        }
        Ok(streams)
    }

    fn schedule(&self, prefix: &str, seed: u64) -> Result<Schedule, Error> {
        let key = |k: &str| format!("{prefix}.{k}");
        let s = Schedule {
            initial_lr: self.cfg.get(&key("lr"))?,
            decay_factor: self.cfg.get(&key("decay_factor"))?,
            decay_every: self.cfg.get(&key("decay_every"))?,
            total_epochs: self.cfg.get(&key("epochs"))?,
            batch_size: self.cfg.get(&key("batch_size"))?,
            seed,
            domain_ratio: self.cfg.get(&key("domain_ratio"))?,
            momentum: self.cfg.get(&key("momentum"))?,
            weight_decay: self.cfg.get(&key("weight_decay"))?,
        };
        s.validate()?;
        Ok(s)
    }

    /// Records with labels rolled up to the training level.
    fn relabel(&self, records: &[ImageRecord], level: Level) -> Result<Vec<ImageRecord>, Error> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.label = r.label.map(|y| self.taxonomy.roll_up(y, level)).transpose()?;
                Ok(r)
            })
            .collect()
    }

    fn predictions(&self, name: &str) -> Result<Vec<PredictionLine>, Error> {
        read_text(&self.out(name))?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Load(format!("{name} line {}: {e}", i + 1))))
            .collect()
    }

    fn assignments(&self) -> Result<Vec<Assignment>, Error> {
        assignments_from_jsonl(&read_text(&self.out("assignments.jsonl"))?)
    }
}

fn synth(ctx: &Ctx) -> Result<(), Error> {
    let c = &ctx.cfg;
    let blob = BlobSpec {
        classes: c.get("synth.classes")?,
        dim: c.get("synth.dim")?,
        per_class: c.get("synth.train_per_class")?,
        val_per_class: c.get("synth.val_per_class")?,
        separation: c.get("synth.separation")?,
        noise_rate: c.get("synth.noise")?,
        complementary: c.get("synth.complementary")?,
        domain_shift: c.get("synth.domain_shift")?,
        class_map: Vec::new(),
    };
    if blob.classes < 2 || blob.classes > ctx.taxonomy.len(Level::Fine) || blob.dim == 0 {
        return Err(Error::Config(format!(
            "synth.classes must lie in [2, {}] and synth.dim must be positive",
            ctx.taxonomy.len(Level::Fine)
        )));
    }
    if !(0.0..=1.0).contains(&blob.noise_rate) {
        return Err(Error::Config(format!("synth.noise must lie in [0, 1], got {}", blob.noise_rate)));
    }
    let city = CitySpec {
        rows: c.get("synth.rows")?,
        cols: c.get("synth.cols")?,
        parcel_m: c.get("synth.parcel_m")?,
        street_m: c.get("synth.street_m")?,
        truth_fraction: c.get("synth.truth_fraction")?,
        max_uses: c.get("synth.max_uses")?,
        images_per_parcel: c.get("synth.images_per_parcel")?,
        geotag_sigma_m: c.get("synth.geotag_sigma_m")?,
        ..CitySpec::default()
    };
    if !(city.parcel_m > 0.0 && city.street_m >= 0.0 && city.geotag_sigma_m >= 0.0) {
        return Err(Error::Config("synth.parcel_m must be positive; street and sigma non-negative".into()));
    }
    let data = generate(&blob, &city, c.seed()?);
    ctx.write("parcels.geojson", parcels_to_geojson(&data.city.parcels, &ctx.taxonomy)?.as_bytes())?;
    ctx.write("train.jsonl", records_to_jsonl(&data.blobs.train, &ctx.taxonomy)?.as_bytes())?;
    ctx.write("val.jsonl", records_to_jsonl(&data.blobs.val, &ctx.taxonomy)?.as_bytes())?;
    let mapping: Vec<ImageRecord> = data
        .city
        .images
        .iter()
        .map(|r| ImageRecord { label: data.city.image_classes.get(&r.id).copied(), ..r.clone() })
        .collect();
    ctx.write("mapping.jsonl", records_to_jsonl(&mapping, &ctx.taxonomy)?.as_bytes())
}

fn filter(ctx: &Ctx) -> Result<(), Error> {
    let parcels = ctx.parcels()?;
    let images = ctx.manifest("map_manifest", "mapping.jsonl")?;
    let located: Vec<(String, _)> = images.iter().filter_map(|r| r.geo.map(|g| (r.id.clone(), g))).collect();
    let assignments = assign(&located, &parcels, ctx.cfg.get("dilation_m")?)?;
    ctx.write("assignments.jsonl", assignments_to_jsonl(&assignments).as_bytes())
}

fn trace(outcomes: &[(String, TrainOutcome)], level: Level) -> Map<String, Value> {
    let streams: Map<String, Value> = outcomes
        .iter()
        .map(|(s, o)| (s.clone(), json!({"loss": o.loss_trace, "val_accuracy": o.val_accuracy})))
        .collect();
    let mut body = Map::new();
    body.insert("level".into(), json!(level));
    body.insert("streams".into(), Value::Object(streams));
    body
}

fn train_stage(ctx: &Ctx) -> Result<(), Error> {
    let level: Level = ctx.cfg.get("train.level")?;
    let schedule = ctx.schedule("train", ctx.cfg.seed()?)?;
    let records = ctx.relabel(&ctx.manifest("train_manifest", "train.jsonl")?, level)?;
    let val = ctx.relabel(&ctx.manifest("val_manifest", "val.jsonl")?, level)?;
    let first = records.first().ok_or_else(|| Error::Load("training manifest is empty".into()))?;
    let mut outcomes = Vec::new();
    for stream in ctx.streams()? {
        let dim = first.stream(&stream)?.len();
        let init = SoftmaxModel::new(ctx.taxonomy.len(level), dim, stream.as_str())?;
        let outcome = train(&init, &records, &schedule, Some(&val))?;
        ctx.write(&format!("model_{stream}.lusm"), &outcome.model.to_bytes())?;
        outcomes.push((stream, outcome));
    }
    ctx.write_json("train_trace.json", trace(&outcomes, level))
}

fn adapt(ctx: &Ctx) -> Result<(), Error> {
    let level: Level = ctx.cfg.get("train.level")?;
    let cfg = GateConfig {
        mode: ctx.cfg.get::<GateMode>("gate.mode")?,
        threshold: ctx.cfg.get("gate.threshold")?,
        weight_by_discard: ctx.cfg.get("gate.weight_by_p")?,
        finetune: ctx.schedule("finetune", ctx.cfg.seed()?.wrapping_add(1))?,
    };
    let records = ctx.relabel(&ctx.manifest("train_manifest", "train.jsonl")?, level)?;
    let val = ctx.relabel(&ctx.manifest("val_manifest", "val.jsonl")?, level)?;
    let mut outcomes = Vec::new();
    for stream in ctx.streams()? {
        let base = load_model(&ctx.out(&format!("model_{stream}.lusm")))?;
        let outcome = adaptive_finetune(&base, &records, &cfg, Some(&val))?;
        ctx.write(&format!("adapted_{stream}.lusm"), &outcome.model.to_bytes())?;
        outcomes.push((stream, outcome));
    }
    ctx.write_json("adapt_trace.json", trace(&outcomes, level))
}

fn fusion_weights(ctx: &Ctx, streams: &[String]) -> Result<FusionWeights, Error> {
    let spec = ctx.cfg.list("fusion.weights");
    if spec.is_empty() {
        return FusionWeights::equal(streams);
    }
    let mut weights = BTreeMap::new();
    for entry in spec {
        let (s, w) = entry
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("fusion.weights entry '{entry}' is not stream:weight")))?;
        let w: f64 = w.trim().parse().map_err(|e| Error::Config(format!("fusion.weights '{entry}': {e}")))?;
        weights.insert(s.trim().to_string(), w);
    }
    FusionWeights::new(weights)
}

fn predict(ctx: &Ctx) -> Result<(), Error> {
    let prefix = match ctx.cfg.raw("predict.models") {
        "adapted" => "adapted",
        "trained" | "model" => "model",
        other => return Err(Error::Config(format!("predict.models must be adapted or trained, got '{other}'"))),
    };
    let streams = ctx.streams()?;
    let models = streams
        .iter()
        .map(|s| load_model(&ctx.out(&format!("{prefix}_{s}.lusm"))))
        .collect::<Result<Vec<_>, _>>()?;
    let n = models[0].classes();
    let level = Level::ALL
        .into_iter()
        .find(|&l| ctx.taxonomy.len(l) == n)
        .ok_or_else(|| Error::Load(format!("models have {n} classes, matching no taxonomy level")))?;
    if models.iter().any(|m| m.classes() != n) {
        return Err(Error::Load("stream models disagree on the number of classes".into()));
    }
    let weights = fusion_weights(ctx, &streams)?;
    for (key, default, out) in
        [("map_manifest", "mapping.jsonl", "predictions.jsonl"), ("val_manifest", "val.jsonl", "val_predictions.jsonl")]
    {
        let mut text = String::new();
        for record in ctx.manifest(key, default)? {
            let (index, scores) = predict_image(&models, &record, &weights)?;
            let line = PredictionLine {
                image: record.id,
                class: ctx.taxonomy.name(level, index)?.to_string(),
                index,
                level,
                scores,
            };
            text.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
            text.push('\n');
        }
        ctx.write(out, text.as_bytes())?;
    }
    Ok(())
}

fn prediction_level(lines: &[PredictionLine]) -> Result<Level, Error> {
    let level = lines.first().map_or(Level::Fine, |l| l.level);
    if lines.iter().any(|l| l.level != level) {
        return Err(Error::Load("predictions mix taxonomy levels".into()));
    }
    Ok(level)
}

fn map(ctx: &Ctx) -> Result<(), Error> {
    let parcels = ctx.parcels()?;
    let assignments = ctx.assignments()?;
    let lines = ctx.predictions("predictions.jsonl")?;
    let from = prediction_level(&lines)?;
    let parcel_preds = match ctx.cfg.raw("map.vote") {
        "hard" => aggregate_parcels(&assignments, &lines.into_iter().map(|l| (l.image, l.index)).collect())?,
        "score_sum" => aggregate_parcels_by_score(&assignments, &lines.into_iter().map(|l| (l.image, l.scores)).collect())?,
        other => return Err(Error::Config(format!("map.vote must be hard or score_sum, got '{other}'"))),
    };
    let level: Level = ctx.cfg.get("level")?;
    let text = export_map(&parcels, &parcel_preds, &ctx.taxonomy, from, level, Some(&ctx.provenance))?;
    ctx.write("map.geojson", (text + "\n").as_bytes())
}

fn eval(ctx: &Ctx) -> Result<(), Error> {
    let level: Level = ctx.cfg.get("level")?;
    let parcels = ctx.parcels()?;
    let assignments = ctx.assignments()?;
    let lines = ctx.predictions("predictions.jsonl")?;
    let from = prediction_level(&lines)?;
    let preds: HashMap<String, usize> = lines.into_iter().map(|l| (l.image, l.index)).collect();
    let options = MappingOptions {
        counting: ctx.cfg.get::<Counting>("eval.counting")?,
        include_untruthed: ctx.cfg.get("eval.include_untruthed")?,
    };
    let report = mapping_metrics(&assignments, &preds, from, &parcels, &ctx.taxonomy, level, options)?;

    let val_lines = ctx.predictions("val_predictions.jsonl")?;
    let val_from = prediction_level(&val_lines)?;
    if val_from > level {
        return Err(Error::Domain(format!("predictions at {val_from} level cannot be scored at {level} level")));
    }
    let labels: HashMap<String, usize> = ctx
        .manifest("val_manifest", "val.jsonl")?
        .into_iter()
        .filter_map(|r| r.label.map(|y| (r.id, y)))
        .collect();
    let val_preds: HashMap<String, usize> = val_lines.into_iter().map(|l| (l.image, l.index)).collect();
    let per_class = per_class_image_accuracy(&val_preds, val_from, &labels, &ctx.taxonomy, level)?;
    let lifted = val_preds
        .iter()
        .map(|(id, &p)| Ok((id.clone(), ctx.taxonomy.lift(p, val_from, level)?)))
        .collect::<Result<HashMap<_, _>, Error>>()?;
    let rolled = labels
        .iter()
        .map(|(id, &y)| Ok((id.clone(), ctx.taxonomy.roll_up(y, level)?)))
        .collect::<Result<HashMap<_, _>, Error>>()?;
    let accuracy = image_accuracy(&lifted, &rolled)?;

    let mut body = match serde_json::to_value(&report).expect("report serializes") {
        Value::Object(m) => m,
        _ => unreachable!("reports serialize as objects"),
    };
    body.insert("image_accuracy".into(), json!(accuracy));
    body.insert("counting".into(), json!(options.counting));
    body.insert("include_untruthed".into(), json!(options.include_untruthed));
    ctx.write_json("report.json", body)?;
    ctx.write("per_class.csv", per_class_report(&report, Some(&per_class)).as_bytes())
}

//! Flat `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use landuse_core::Error;
use sha2::{Digest, Sha256};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "LANDUSE_OUT_DIR";

/// Every accepted key with its default ("" = no default).
const KEYS: &[(&str, &str)] = &[
    ("seed", ""),
    ("out_dir", "out"),
    ("taxonomy", ""),
    ("parcels", ""),
    ("train_manifest", ""),
    ("val_manifest", ""),
    ("map_manifest", ""),
    ("streams", "object,scene"),
    ("dilation_m", "5"),
    ("level", "fine"),
    ("train.level", "fine"),
    ("train.lr", "0.01"),
    ("train.decay_factor", "10"),
    ("train.decay_every", "5"),
    ("train.epochs", "12"),
    ("train.batch_size", "256"),
    ("train.domain_ratio", "0.5"),
    ("train.momentum", "0"),
    ("train.weight_decay", "0"),
    ("gate.mode", "hard"),
    ("gate.threshold", "0.5"),
    ("gate.weight_by_p", "false"),
    ("finetune.lr", "1e-5"),
    ("finetune.decay_factor", "10"),
    ("finetune.decay_every", "1"),
    ("finetune.epochs", "4"),
    ("finetune.batch_size", "256"),
    ("finetune.domain_ratio", "0.5"),
    ("finetune.momentum", "0"),
    ("finetune.weight_decay", "0"),
    ("fusion.weights", ""),
    ("predict.models", "adapted"),
    ("map.vote", "hard"),
    ("eval.counting", "pair"),
    ("eval.include_untruthed", "false"),
    ("synth.classes", "10"),
    ("synth.dim", "16"),
    ("synth.train_per_class", "300"),
    ("synth.val_per_class", "50"),
    ("synth.separation", "4"),
    ("synth.noise", "0"),
    ("synth.complementary", "true"),
    ("synth.domain_shift", "0"),
    ("synth.rows", "4"),
    ("synth.cols", "5"),
    ("synth.parcel_m", "60"),
    ("synth.street_m", "20"),
    ("synth.truth_fraction", "0.6"),
    ("synth.max_uses", "2"),
    ("synth.images_per_parcel", "12"),
    ("synth.geotag_sigma_m", "6"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
    out_dir: PathBuf,
}

fn parse_line(line: &str) -> Result<Option<(String, String)>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line.split_once('=').ok_or_else(|| format!("expected key=value, got '{line}'"))?;
    let key = k.trim();
    if !KEYS.iter().any(|(name, _)| *name == key) {
        return Err(format!("unknown config key '{key}'"));
    }
    Ok(Some((key.to_string(), v.trim().to_string())))
}

impl Config {
    /// Reads `path` (if given) and applies `overrides` on top. Relative paths
    /// in the config resolve against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut values = BTreeMap::new();
        let base_dir = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                for (i, line) in text.lines().enumerate() {
                    if let Some((k, v)) = parse_line(line).map_err(|m| Error::Config(format!("{}:{}: {m}", p.display(), i + 1)))? {
                        values.insert(k, v);
                    }
                }
                p.parent().map(Path::to_path_buf).unwrap_or_default()
            }
            None => PathBuf::new(),
        };
        for o in overrides {
            if let Some((k, v)) = parse_line(o).map_err(|m| Error::Config(format!("override: {m}")))? {
                values.insert(k, v);
            }
        }
        if !values.contains_key("seed") {
            return Err(Error::Config("seed is mandatory".into()));
        }
        let out_dir = match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => base_dir.join(values.get("out_dir").map_or("out", String::as_str)),
        };
        Ok(Config { values, base_dir, out_dir })
    }

    pub fn raw(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| d),
        }
    }

    pub fn get<T>(&self, key: &str) -> Result<T, Error>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e: T::Err| {
            let msg = e.to_string();
            let msg = msg.strip_prefix("configuration error: ").unwrap_or(&msg);
            Error::Config(format!("{key} = '{raw}': {msg}"))
        })
    }

    pub fn seed(&self) -> Result<u64, Error> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Path from `key` (relative to the config directory), or `default`
    /// inside the output directory.
    pub fn input_path(&self, key: &str, default: &str) -> PathBuf {
        match self.raw(key) {
            "" => self.out_dir.join(default),
            p => self.base_dir.join(p),
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    }

    /// SHA-256 of the effective settings, excluding the output location.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, _) in KEYS {
            if *k == "out_dir" {
                continue;
            }
            h.update(format!("{k}={}\n", self.raw(k)).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "# comment\nseed = 7\nlevel=top\n\n").unwrap();
        let c = Config::load(Some(&p), &["level=middle".into()]).unwrap();
        assert_eq!(c.raw("level"), "middle");
        assert_eq!(c.get::<f64>("dilation_m").unwrap(), 5.0);
        assert_eq!(c.seed().unwrap(), 7);
        assert_eq!(c.list("streams"), vec!["object", "scene"]);
    }

    #[test]
    fn errors() {
        assert!(Config::load(None, &[]).is_err());
        assert!(Config::load(None, &["seed=1".into(), "bogus=2".into()]).is_err());
        assert!(Config::load(None, &["seed".into()]).is_err());
        let c = Config::load(None, &["seed=x".into()]).unwrap();
        assert!(c.seed().is_err());
    }

    #[test]
    fn hash_ignores_out_dir_and_tracks_values() {
        let a = Config::load(None, &["seed=1".into(), "out_dir=a".into()]).unwrap();
        let b = Config::load(None, &["seed=1".into(), "out_dir=b".into()]).unwrap();
        let c = Config::load(None, &["seed=2".into()]).unwrap();
        let d = Config::load(None, &["seed=1".into(), "dilation_m=5".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash(), d.hash(), "explicit defaults hash like implicit ones");
    }
}

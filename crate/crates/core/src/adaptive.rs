//! Confidence-gated fine-tuning.
//!
//! Each training example gets a discard probability from the shape of its
//! current softmax scores:
//!
//! ```text
//! p = max(0, 2 - exp(|max(y) - mean(y)|))
//! ```
//!
//! Flat score vectors (`p` near 1) are treated as confusing and suppressed;
//! peaked ones (`p` near 0) are kept. Hard gating keeps an example iff
//! `p < threshold`; soft gating scales its loss by `1 - p`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{check_distribution, sgd, Schedule, SoftmaxModel, TrainOutcome};
use crate::dataset::ImageRecord;
use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Hard,
    Soft,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(GateMode::Hard),
            "soft" => Ok(GateMode::Soft),
            other => Err(Error::Config(format!("unknown gate mode '{other}' (expected hard or soft)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub mode: GateMode,
    pub threshold: f64,
    /// Soft mode only: weight by `p` itself instead of `1 - p`.
    pub weight_by_discard: bool,
    pub finetune: Schedule,
}

impl GateConfig {
    pub fn hard(seed: u64) -> Self {
        GateConfig { mode: GateMode::Hard, threshold: 0.5, weight_by_discard: false, finetune: Schedule::finetune(seed) }
    }

    pub fn soft(seed: u64) -> Self {
        GateConfig { mode: GateMode::Soft, ..Self::hard(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("gate threshold must lie in [0, 1], got {}", self.threshold)));
        }
        self.finetune.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    /// Discard probability in [0, 1].
    pub p: f64,
    /// Loss weight in [0, 1].
    pub weight: f64,
}

pub fn discard_probability(scores: &[f64]) -> Result<f64> {
    check_distribution(scores).map_err(|e| domain(format!("discard probability needs a distribution: {e}")))?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((2.0 - (max - mean).abs().exp()).max(0.0))
}

pub fn gate(scores: &[f64], cfg: &GateConfig) -> Result<GateDecision> {
    let p = discard_probability(scores)?;
    let weight = match cfg.mode {
        GateMode::Hard => {
            if p < cfg.threshold {
                1.0
            } else {
                0.0
            }
        }
        GateMode::Soft if cfg.weight_by_discard => p,
        GateMode::Soft => 1.0 - p,
    };
    Ok(GateDecision { p, weight })
}

/// Second-stage fine-tuning with per-example gating. Gates are computed from
/// the current model before each batch update.
pub fn adaptive_finetune(
    model: &SoftmaxModel,
    records: &[ImageRecord],
    cfg: &GateConfig,
    validation: Option<&[ImageRecord]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sgd(model, records, &cfg.finetune, validation, |current, batch| {
        batch
            .iter()
            .map(|ex| Ok(gate(current.forward(ex.features)?.as_slice(), cfg)?.weight))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::train;
    use crate::synth::{BlobSpec, generate_blobs};
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_are_discarded() {
        for n in [2, 5, 16, 45] {
            let y = vec![1.0 / n as f64; n];
            assert_eq!(discard_probability(&y).unwrap(), 1.0);
            let cfg = GateConfig::hard(0);
            assert_eq!(gate(&y, &cfg).unwrap().weight, 0.0);
            assert_eq!(gate(&y, &GateConfig::soft(0)).unwrap().weight, 0.0);
        }
    }

    #[test]
    fn one_hot_is_kept() {
        let mut y = vec![0.0; 45];
        y[7] = 1.0;
        assert_eq!(discard_probability(&y).unwrap(), 0.0);
    }

    #[test]
    fn five_class_examples() {
        // 2 - e^0.2 and 2 - e^0.6, evaluated independently.
        let p = discard_probability(&[0.4, 0.15, 0.15, 0.15, 0.15]).unwrap();
        assert!((p - 0.778_597_241_5).abs() < 1e-9, "{p}");
        let hard = gate(&[0.4, 0.15, 0.15, 0.15, 0.15], &GateConfig::hard(0)).unwrap();
        assert_eq!(hard.weight, 0.0);
        let soft = gate(&[0.4, 0.15, 0.15, 0.15, 0.15], &GateConfig::soft(0)).unwrap();
        assert!((soft.weight - 0.221_402_758_5).abs() < 1e-9);

        let confident = gate(&[0.8, 0.05, 0.05, 0.05, 0.05], &GateConfig::hard(0)).unwrap();
        assert!((confident.p - 0.177_881_199_9).abs() < 1e-9, "{}", confident.p);
        assert_eq!(confident.weight, 1.0);
    }

    #[test]
    fn weight_by_discard_flag() {
        let cfg = GateConfig { weight_by_discard: true, ..GateConfig::soft(0) };
        let d = gate(&[0.4, 0.15, 0.15, 0.15, 0.15], &cfg).unwrap();
        assert_eq!(d.weight, d.p);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(discard_probability(&[0.5, 0.4]).is_err());
        assert!(discard_probability(&[]).is_err());
        assert!(discard_probability(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn threshold_zero_freezes_model() {
        let spec = BlobSpec { classes: 3, dim: 4, per_class: 40, class_map: vec![0, 1, 2], ..BlobSpec::default() };
        let data = generate_blobs(&spec, 5);
        let mut sched = Schedule::stage_one(5);
        sched.batch_size = 16;
        sched.total_epochs = 2;
        let m = train(&SoftmaxModel::new(3, 4, "object").unwrap(), &data.train, &sched, None).unwrap().model;
        let cfg = GateConfig { threshold: 0.0, finetune: Schedule { initial_lr: 0.1, batch_size: 16, ..Schedule::finetune(5) }, ..GateConfig::hard(5) };
        let out = adaptive_finetune(&m, &data.train, &cfg, None).unwrap();
        assert_eq!(out.model, m);
    }

    fn distribution(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn p_in_unit_interval_and_soft_complement(raw in prop::collection::vec(0.001f64..1.0, 2..50)) {
            let y = distribution(raw);
            let p = discard_probability(&y).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let soft = gate(&y, &GateConfig::soft(0)).unwrap();
            prop_assert_eq!(soft.weight + soft.p, 1.0);
        }

        #[test]
        fn permutation_invariant(raw in prop::collection::vec(0.001f64..1.0, 2..30), k in 0usize..30) {
            let y = distribution(raw);
            let mut rotated = y.clone();
            let len = rotated.len();
            rotated.rotate_left(k % len);
            let a = discard_probability(&y).unwrap();
            let b = discard_probability(&rotated).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_peak(n in 2usize..50, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            // Peak mass m on one class, the rest spread evenly.
            let make = |t: f64| {
                let m = 1.0 / n as f64 + t * (1.0 - 1.0 / n as f64);
                let rest = (1.0 - m) / (n - 1) as f64;
                let mut y = vec![rest; n];
                y[0] = m;
                y
            };
            let (a, b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let pa = discard_probability(&make(a)).unwrap();
            let pb = discard_probability(&make(b)).unwrap();
            prop_assert!(pb <= pa + 1e-12);
        }
    }
}

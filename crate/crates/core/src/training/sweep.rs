use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::finetune::{finetune_classifier_with, ClassifierConfig, FinetuneInit};
use crate::autoregressor::Directional;
use crate::cpc::MaskKind;
use crate::data::{DatasetStore, Split};
use crate::error::{bail, Error, Result};

/// Pretraining variant used to initialise a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    SingleTopDown,
    SingleInfill,
    MultiTopDown,
    MultiInfill,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::None,
        Variant::SingleTopDown,
        Variant::SingleInfill,
        Variant::MultiTopDown,
        Variant::MultiInfill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::SingleTopDown => "single_top_down",
            Variant::SingleInfill => "single_infill",
            Variant::MultiTopDown => "multi_top_down",
            Variant::MultiInfill => "multi_infill",
        }
    }

    /// Directional mode and mask of a pretrained variant.
    pub fn pretraining(self) -> Option<(Directional, MaskKind)> {
        match self {
            Variant::None => None,
            Variant::SingleTopDown => Some((Directional::Single, MaskKind::TopDown)),
            Variant::SingleInfill => Some((Directional::Single, MaskKind::Infill)),
            Variant::MultiTopDown => Some((Directional::Multi, MaskKind::TopDown)),
            Variant::MultiInfill => Some((Directional::Multi, MaskKind::Infill)),
        }
    }

    pub fn from_pretraining(directional: Directional, mask: MaskKind) -> Self {
        match (directional, mask) {
            (Directional::Single, MaskKind::TopDown) => Variant::SingleTopDown,
            (Directional::Single, MaskKind::Infill) => Variant::SingleInfill,
            (Directional::Multi, MaskKind::TopDown) => Variant::MultiTopDown,
            (Directional::Multi, MaskKind::Infill) => Variant::MultiInfill,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::InvalidArgument(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

pub struct SweepConfig {
    pub finetune: TrainConfig,
    pub classifier: ClassifierConfig,
    pub pretrained: BTreeMap<Variant, Checkpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub subset_size: usize,
    pub seed: u64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub variant: Variant,
    pub subset_size: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Mean and sample standard deviation per `(variant, subset_size)`.
    pub fn aggregate(&self) -> Vec<SweepAggregate> {
        let mut groups: BTreeMap<(Variant, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.variant, r.subset_size)).or_default().push(r.test_accuracy);
        }
        groups
            .into_iter()
            .map(|((variant, subset_size), v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                SweepAggregate {
                    variant,
                    subset_size,
                    runs: v.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "subset_size", "seed", "test_accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.as_str().to_string(),
                r.subset_size.to_string(),
                r.seed.to_string(),
                format!("{:?}", r.test_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_aggregate_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "subset_size", "runs", "mean", "std"])?;
        for a in self.aggregate() {
            w.write_record([
                a.variant.as_str().to_string(),
                a.subset_size.to_string(),
                a.runs.to_string(),
                format!("{:?}", a.mean),
                format!("{:?}", a.std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |what: &str| Error::Format(format!("bad {what} in {}", path.display()));
            rows.push(SweepRow {
                variant: rec.get(0).unwrap_or_default().parse()?,
                subset_size: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("subset_size"))?,
                seed: rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("seed"))?,
                test_accuracy: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| bad("test_accuracy"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Fine-tunes and tests every `(variant, size, seed)` cell.
pub fn run_sweep(
    store: &DatasetStore,
    variants: &[Variant],
    subset_sizes: &[usize],
    seeds: &[u64],
    config: &SweepConfig,
) -> Result<SweepResult> {
    run_sweep_observed(store, variants, subset_sizes, seeds, config, &mut |_| {})
}

pub fn run_sweep_observed(
    store: &DatasetStore,
    variants: &[Variant],
    subset_sizes: &[usize],
    seeds: &[u64],
    config: &SweepConfig,
    observe: &mut dyn FnMut(&SweepRow),
) -> Result<SweepResult> {
    if variants.is_empty() || subset_sizes.is_empty() || seeds.is_empty() {
        bail!(InvalidArgument, "sweep needs at least one variant, subset size and seed");
    }
    if store.test.is_empty() {
        bail!(InvalidArgument, "sweep needs a test split");
    }
    for v in variants {
        if *v != Variant::None && !config.pretrained.contains_key(v) {
            bail!(Config, "no pretrained checkpoint for variant `{v}`");
        }
    }
    let mut result = SweepResult::default();
    for &variant in variants {
        let init = match config.pretrained.get(&variant) {
            Some(ckpt) if variant != Variant::None => FinetuneInit::Pretrained(ckpt),
            _ => FinetuneInit::Random,
        };
        for &size in subset_sizes {
            for &seed in seeds {
                let train = TrainConfig {
                    seed,
                    subset_size: Some(size),
                    ..config.finetune.clone()
                };
                let ckpt = finetune_classifier_with(store, Some(size), init, &train, &config.classifier, &mut |_| {})?;
                let Some(acc) = ckpt.history.last(Split::Test, "accuracy") else {
                    bail!(InvalidArgument, "fine-tuning produced no test accuracy");
                };
                let row = SweepRow {
                    variant,
                    subset_size: size,
                    seed,
                    test_accuracy: acc,
                };
                observe(&row);
                result.rows.push(row);
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_three_seeds() {
        let rows = [0.5, 0.6, 0.7]
            .iter()
            .enumerate()
            .map(|(i, a)| SweepRow {
                variant: Variant::MultiInfill,
                subset_size: 32,
                seed: i as u64,
                test_accuracy: *a,
            })
            .collect();
        let agg = SweepResult { rows }.aggregate();
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].runs, 3);
        assert!((agg[0].mean - 0.6).abs() < 1e-12);
        assert!((agg[0].std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("multi".parse::<Variant>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = SweepResult {
            rows: vec![SweepRow {
                variant: Variant::None,
                subset_size: 10,
                seed: 3,
                test_accuracy: 0.55,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        r.write_csv(&p).unwrap();
        assert_eq!(SweepResult::read_csv(&p).unwrap(), r);
    }
}

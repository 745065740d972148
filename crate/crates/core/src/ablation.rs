//! Loss-variant comparison on one dataset and seed set.

use std::fmt::{self, Write as _};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Subset, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::evaluate_manifest;
use crate::infer::{infer_manifest, InferConfig};
use crate::losses::{DenoisingVariant, LossConfig};
use crate::model::ModelConfig;
use crate::train::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CrossEntropy,
    Focal,
    Discriminative,
    /// Discriminative plus condition-number denoising.
    Full,
    /// Full, with an L1 denoising term instead.
    L1,
    /// Full, with a BCE denoising term instead.
    Bce,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [
        Variant::CrossEntropy,
        Variant::Focal,
        Variant::Discriminative,
        Variant::Full,
    ];
    pub const DENOISERS: [Variant; 3] = [Variant::Full, Variant::L1, Variant::Bce];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CrossEntropy => "cross_entropy",
            Variant::Focal => "focal",
            Variant::Discriminative => "discriminative",
            Variant::Full => "full",
            Variant::L1 => "l1",
            Variant::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        [
            Variant::CrossEntropy,
            Variant::Focal,
            Variant::Discriminative,
            Variant::Full,
            Variant::L1,
            Variant::Bce,
        ]
        .into_iter()
        .find(|v| v.name() == name)
    }

    /// Loss settings for this variant; hyperparameters come from `base`.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let preset = match self {
            Variant::CrossEntropy => LossConfig::cross_entropy(),
            Variant::Focal => LossConfig::focal(),
            Variant::Discriminative => LossConfig::discriminative_only(),
            Variant::Full => LossConfig::full(),
            Variant::L1 => LossConfig {
                denoising: DenoisingVariant::L1,
                ..LossConfig::full()
            },
            Variant::Bce => LossConfig {
                denoising: DenoisingVariant::Bce,
                ..LossConfig::full()
            },
        };
        LossConfig {
            classification: preset.classification,
            denoising: preset.denoising,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub map_at_05: f64,
    pub avg_map: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_map_at_05: f64,
    pub mean_avg_map: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_map(&self, variant: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| r.mean_map_at_05)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "variant");
        for s in &self.seeds {
            let _ = write!(out, " {:>8}", format!("seed {s}"));
        }
        let _ = writeln!(out, " {:>8} {:>8}", "mAP@0.5", "AVG");
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.variant.name());
            for r in self.runs.iter().filter(|r| r.variant == row.variant) {
                let _ = write!(out, " {:>8.1}", 100.0 * r.map_at_05);
            }
            let _ = writeln!(
                out,
                " {:>8.1} {:>8.1}",
                100.0 * row.mean_map_at_05,
                100.0 * row.mean_avg_map
            );
        }
        out
    }
}

/// Trains and evaluates every variant for every seed. The seed sets both
/// the parameter initialisation and the batch order.
pub fn run_ablation(
    manifest: &DatasetManifest,
    variants: &[Variant],
    seeds: &[u64],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    infer_cfg: &InferConfig,
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one variant and one seed".into()));
    }
    let set = TrainingSet::from_manifest(manifest)?;
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let model = ModelConfig {
                seed,
                ..model.clone()
            };
            let cfg = TrainConfig {
                seed,
                loss: variant.loss_config(&train_cfg.loss),
                ..train_cfg.clone()
            };
            let outcome = train(&set, &model, &cfg, None)?;
            let ck = &outcome.checkpoint;
            let dets = infer_manifest(manifest, Subset::Test, &ck.model, &ck.params, &ck.ema, infer_cfg)?;
            let report = evaluate_manifest(&dets, manifest, &[0.5])?;
            let map_at_05 = report.map_at(0.5).unwrap_or(0.0);
            info!("{} seed {seed}: mAP@0.5 {map_at_05:.4}", variant.name());
            runs.push(AblationRun {
                variant,
                seed,
                map_at_05,
                avg_map: report.avg_map,
            });
        }
    }
    let n = seeds.len() as f64;
    let rows = variants
        .iter()
        .map(|&variant| {
            let mine = runs.iter().filter(|r| r.variant == variant);
            let (m, a) = mine.fold((0.0, 0.0), |(m, a), r| (m + r.map_at_05, a + r.avg_map));
            AblationRow {
                variant,
                mean_map_at_05: m / n,
                mean_avg_map: a / n,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ClassificationVariant;

    #[test]
    fn variants_keep_base_hyperparameters() {
        let base = LossConfig {
            alpha: 0.7,
            ..LossConfig::default()
        };
        let ce = Variant::CrossEntropy.loss_config(&base);
        assert_eq!(ce.classification, ClassificationVariant::CrossEntropy);
        assert_eq!(ce.denoising, DenoisingVariant::None);
        assert_eq!(ce.alpha, 0.7);
        assert_eq!(Variant::Bce.loss_config(&base).denoising, DenoisingVariant::Bce);
        for v in Variant::LADDER.into_iter().chain(Variant::DENOISERS) {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
    }
}

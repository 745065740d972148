//! Command-line surface: one JSON run config with dotted `--set` overrides,
//! and one subcommand per pipeline stage.
//!
//! Every command writes into the directory given by `--out` and echoes the
//! fully resolved config there as `config.json`. Exit codes: 0 ok, 1 domain
//! error, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::{run_ablation, Variant};
use crate::autodiff::OpKind;
use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, DatasetManifest, Subset, SynthConfig, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate_manifest, standard_ious};
use crate::gradcheck::{run_suites, SuiteConfig};
use crate::infer::{infer_manifest, read_detections, write_detections, InferConfig};
use crate::model::ModelConfig;
use crate::study::{run_study, StudyConfig};
use crate::train::{train, TrainConfig};

pub const CONFIG_ECHO: &str = "config.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const STUDY_CSV: &str = "pdmi_study.csv";
pub const STUDY_SUMMARY: &str = "pdmi_study.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TEXT: &str = "ablation.txt";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Sets `a.b.c=value` in a JSON tree. Only existing keys can be set. The
/// value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "wtal", version, about = "Weakly-supervised temporal action localization")]
pub struct Cli {
    /// JSON run config; missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus feature files).
    Synth(OutDir),
    /// Train on the manifest's training videos.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Detect actions with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_subset)]
        subset: Subset,
        #[command(flatten)]
        out: OutDir,
    },
    /// Score detections against the manifest's test annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated tIoU thresholds for the table columns.
        #[arg(long, value_delimiter = ',', default_values_t = standard_ious())]
        ious: Vec<f64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Finite-difference checks of every op and loss component.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 20)]
        coords: usize,
        /// Corrupt one op's backward rule (negative control).
        #[arg(long, value_parser = parse_op)]
        fault: Option<OpKind>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Log condition number against log |det| over random joints.
    PdmiStudy {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Make the first sample the identity optimum.
        #[arg(long)]
        plant_identity: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Train and evaluate each loss variant over several seeds.
    Ablate {
        /// Existing dataset; by default one is generated from the synth section.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
        seeds: Vec<u64>,
        #[arg(
            long,
            value_delimiter = ',',
            value_parser = parse_variant,
            default_values_t = Variant::LADDER
        )]
        variants: Vec<Variant>,
        #[command(flatten)]
        out: OutDir,
    },
}

fn parse_subset(s: &str) -> std::result::Result<Subset, String> {
    match s {
        "train" => Ok(Subset::Train),
        "test" => Ok(Subset::Test),
        _ => Err(format!("unknown subset `{s}` (train, test)")),
    }
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op `{s}`; one of {}", names.join(", "))
    })
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::from_name(s).ok_or_else(|| {
        format!("unknown variant `{s}` (cross_entropy, focal, discriminative, full, l1, bce)")
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Runs one parsed command. Human-readable results go to stdout.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Synth(out) => {
            create_dir(&out.out)?;
            let manifest = generate_synthetic(&cfg.synth, &out.out)?;
            cfg.echo(&out.out)?;
            println!(
                "wrote {} videos over {} classes to {}",
                manifest.videos.len(),
                manifest.classes.len(),
                out.out.display()
            );
        }
        Command::Train { manifest, out } => {
            let manifest = DatasetManifest::load(manifest)?;
            let set = TrainingSet::from_manifest(&manifest)?;
            let model = ModelConfig {
                feature_dim: set.feature_dim,
                num_classes: set.num_classes,
                ..cfg.model.clone()
            };
            create_dir(&out.out)?;
            let echoed = RunConfig {
                model: model.clone(),
                ..cfg.clone()
            };
            echoed.echo(&out.out)?;
            let outcome = train(&set, &model, &cfg.train, Some(&out.out))?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.losses.total);
            println!(
                "trained {} iterations, final loss {last:.5}; checkpoint in {}",
                outcome.checkpoint.iteration,
                out.out.display()
            );
        }
        Command::Infer {
            checkpoint,
            manifest,
            subset,
            out,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let manifest = DatasetManifest::load(manifest)?;
            create_dir(&out.out)?;
            cfg.echo(&out.out)?;
            let dets = infer_manifest(&manifest, *subset, &ck.model, &ck.params, &ck.ema, &cfg.infer)?;
            write_detections(&out.out.join(DETECTIONS_FILE), &dets)?;
            println!("{} detections", dets.len());
        }
        Command::Eval {
            detections,
            manifest,
            ious,
            out,
        } => {
            if ious.is_empty() || ious.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
                return Err(Error::Usage(format!("IoU thresholds must lie in (0, 1], got {ious:?}")));
            }
            let dets = read_detections(detections)?;
            let manifest = DatasetManifest::load(manifest)?;
            create_dir(&out.out)?;
            cfg.echo(&out.out)?;
            let report = evaluate_manifest(&dets, &manifest, ious)?;
            write_json(&out.out.join(REPORT_JSON), &report)?;
            let table = report.to_table();
            write_text(&out.out.join(REPORT_TEXT), &table)?;
            print!("{table}");
        }
        Command::Gradcheck {
            seeds,
            coords,
            fault,
            out,
        } => {
            create_dir(&out.out)?;
            cfg.echo(&out.out)?;
            let suite = SuiteConfig {
                seeds: seeds.clone(),
                coords: *coords,
                fault: *fault,
                ..SuiteConfig::default()
            };
            let results = run_suites(&suite)?;
            write_json(&out.out.join(GRADCHECK_FILE), &results)?;
            let mut text = String::new();
            for r in &results {
                let _ = writeln!(
                    text,
                    "{:<4} {:<28} max rel err {:.3e} (tol {:.0e})",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tolerance
                );
            }
            print!("{text}");
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::PdmiStudy {
            samples,
            seed,
            plant_identity,
            out,
        } => {
            create_dir(&out.out)?;
            cfg.echo(&out.out)?;
            let study = StudyConfig {
                num_samples: *samples,
                seed: *seed,
                plant_identity: *plant_identity,
                ..StudyConfig::default()
            };
            let result = run_study(&study)?;
            result.write_csv(&out.out.join(STUDY_CSV))?;
            write_json(
                &out.out.join(STUDY_SUMMARY),
                &serde_json::json!({
                    "num_samples": result.samples.len(),
                    "seed": seed,
                    "pearson": result.pearson,
                }),
            )?;
            println!(
                "{} samples, pearson(log eta, log |det|) = {:.4}",
                result.samples.len(),
                result.pearson
            );
        }
        Command::Ablate {
            manifest,
            seeds,
            variants,
            out,
        } => {
            create_dir(&out.out)?;
            let manifest = match manifest {
                Some(p) => DatasetManifest::load(p)?,
                None => generate_synthetic(&cfg.synth, &out.out.join("data"))?,
            };
            let set_dims = TrainingSet::from_manifest(&manifest)?;
            let model = ModelConfig {
                feature_dim: set_dims.feature_dim,
                num_classes: set_dims.num_classes,
                ..cfg.model.clone()
            };
            RunConfig {
                model: model.clone(),
                ..cfg.clone()
            }
            .echo(&out.out)?;
            let report = run_ablation(&manifest, variants, seeds, &model, &cfg.train, &cfg.infer)?;
            write_json(&out.out.join(ABLATION_JSON), &report)?;
            let table = report.to_table();
            write_text(&out.out.join(ABLATION_TEXT), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.iterations=7".into(),
                "train.loss.classification=focal".into(),
                "synth.snippets_range=[10,20]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(
            cfg.train.loss.classification,
            crate::losses::ClassificationVariant::Focal
        );
        assert_eq!(cfg.synth.snippets_range, [10, 20]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(None, &["train.iters=7".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("train.iters"));
        let bad_type = RunConfig::resolve(None, &["train.iterations=many".into()]).unwrap_err();
        assert_eq!(bad_type.exit_code(), 2);
    }

    #[test]
    fn config_file_rejects_unknown_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"model": {"feature_dim": 16}, "extra": 1}"#).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap_err().exit_code(), 2);
        fs::write(&p, r#"{"model": {"feature_dim": 16}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!(cfg.model.feature_dim, 16);
        assert_eq!(cfg.model.num_classes, ModelConfig::default().num_classes);
    }

    #[test]
    fn bad_arguments_exit_with_usage_code() {
        assert_eq!(run(["wtal", "no-such-command"]), 2);
        assert_eq!(run(["wtal", "gradcheck", "--out", "/tmp/x", "--fault", "bogus"]), 2);
    }
}

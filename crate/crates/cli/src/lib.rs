//! `sfda2` command line: data generation, pretraining, adaptation,
//! evaluation and the verification suites.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 a verification
//! suite reported failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use sfda2_core::adapt::{adapt_with_eval, evaluate, pretrain_source, AdaptConfig};
use sfda2_core::data::{gen_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, ShiftSpec};
use sfda2_core::model::Architecture;
use sfda2_core::verify::{
    verify_gradients_with, verify_ifa_bound_with, verify_oracles_with, verify_snc_factorization_with,
    BoundVariant, VerifyReport,
};

pub const SEED_ENV: &str = "SFDA2_SEED";

#[derive(Debug, Parser)]
#[command(name = "sfda2", version, about = "Source-free domain adaptation on small dense networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a labelled source/target pair from a rotated Gaussian mixture.
    GenData {
        /// ShiftSpec JSON; the default three-class shift when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source model with cross-entropy.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source checkpoint to an unlabeled target set.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Target CSV; a label column, if present, is ignored.
        #[arg(long)]
        target: PathBuf,
        /// Labelled set evaluated after every epoch (diagnostics only).
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, per-class mean, harmonic mean and macro-F1 of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run property suites; exits 2 if any reports failures.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Trials (ifa-bound, snc-factorization) or instances (gradients).
        #[arg(long)]
        trials: Option<usize>,
        /// Monte Carlo pairs per ifa-bound trial.
        #[arg(long, default_value_t = 200_000)]
        pairs: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Run the deliberately broken variants; these are expected to fail.
        #[arg(long)]
        negative_control: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    IfaBound,
    SncFactorization,
    Gradients,
    Oracles,
    All,
}

/// Sections of a run configuration file. `pretrain` and `adapt` take the
/// `AdaptConfig` fields; missing fields keep their defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    #[serde(default)]
    architecture: Architecture,
    #[serde(default)]
    pretrain: Map<String, Value>,
    #[serde(default)]
    adapt: Map<String, Value>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub architecture: Architecture,
    pub pretrain: AdaptConfig,
    pub adapt: AdaptConfig,
    pretrain_seed_set: bool,
    adapt_seed_set: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: RunConfigFile = serde_json::from_str(text).context("config")?;
        let pretrain = overlay(AdaptConfig::pretrain_default(), &file.pretrain).context("config: pretrain")?;
        let adapt = overlay(AdaptConfig::default(), &file.adapt).context("config: adapt")?;
        Ok(Self {
            architecture: file.architecture,
            pretrain,
            adapt,
            pretrain_seed_set: file.pretrain.contains_key("seed"),
            adapt_seed_set: file.adapt.contains_key("seed"),
        })
    }

    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::from_json("{}"),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_json(&text).with_context(|| p.display().to_string())
            }
        }
    }
}

fn overlay(base: AdaptConfig, fields: &Map<String, Value>) -> Result<AdaptConfig> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("AdaptConfig serializes to an object");
    for (k, v) in fields {
        obj.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(value)?)
}

/// Flag, then an explicit config value, then `SFDA2_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData { spec, seed, out } => {
            let spec: ShiftSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| p.display().to_string())?
                }
                None => ShiftSpec::default(),
            };
            spec.validate()?;
            let seed = resolve_seed(seed, None)?;
            let (source, target) = gen_synthetic(&spec, seed)?;
            prepare_out(&out)?;
            save_dataset(&source, &out.join("source.csv"))?;
            save_dataset(&target, &out.join("target.csv"))?;
            Ok(0)
        }
        Command::Pretrain {
            config,
            source,
            seed,
            epochs,
            out,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let mut cfg = rc.pretrain.clone();
            cfg.seed = resolve_seed(seed, rc.pretrain_seed_set.then_some(cfg.seed))?;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.validate()?;
            let source = load_dataset(&source, None)?;
            if source.labels.is_none() {
                bail!("pretraining needs a labelled source set");
            }
            let (model, optimizer) = pretrain_source(&cfg, &rc.architecture, &source)?;
            let metrics = evaluate(&model, &source)?;
            prepare_out(&out)?;
            save_checkpoint(&model, &optimizer, &out.join("source.ckpt"))?;
            write_json(
                &out.join("metrics.json"),
                &json!({
                    "command": "pretrain",
                    "architecture": rc.architecture,
                    "config": cfg,
                    "source": metrics,
                }),
            )?;
            Ok(0)
        }
        Command::Adapt {
            config,
            model,
            target,
            eval,
            seed,
            epochs,
            out,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let mut cfg = rc.adapt.clone();
            cfg.seed = resolve_seed(seed, rc.adapt_seed_set.then_some(cfg.seed))?;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.validate()?;
            let (model, _) = load_checkpoint(&model)?;
            // Labels never reach adaptation: only the unlabeled view is passed on.
            let target = load_dataset(&target, Some(model.classes()))?;
            let eval = eval
                .map(|p| load_dataset(&p, Some(model.classes())))
                .transpose()?;
            let run = adapt_with_eval(&cfg, model, target.unlabeled(), eval.as_ref())?;
            let final_metrics = eval.as_ref().map(|e| evaluate(&run.model, e)).transpose()?;
            prepare_out(&out)?;
            save_checkpoint(&run.model, &run.optimizer, &out.join("adapted.ckpt"))?;
            write_atomic(&out.join("losses.csv"), run.trace.losses_csv().as_bytes())?;
            write_json(
                &out.join("metrics.json"),
                &json!({
                    "command": "adapt",
                    "config": cfg,
                    "iterations": run.trace.iterations,
                    "epochs": run.trace.epochs,
                    "final": final_metrics,
                }),
            )?;
            Ok(0)
        }
        Command::Eval { model, data, out } => {
            let (model, _) = load_checkpoint(&model)?;
            let data = load_dataset(&data, Some(model.classes()))?;
            let metrics = evaluate(&model, &data)?;
            prepare_out(&out)?;
            write_json(&out.join("metrics.json"), &metrics)?;
            Ok(0)
        }
        Command::Verify {
            suite,
            trials,
            pairs,
            seed,
            negative_control,
            out,
        } => {
            let seed = resolve_seed(seed, None)?;
            let reports = run_suites(suite, trials, pairs, seed, negative_control)?;
            let passed = reports.iter().all(|r| r.passed);
            prepare_out(&out)?;
            let path = out.join("report.json");
            if let [single] = reports.as_slice() {
                write_json(&path, single)?;
            } else {
                write_json(&path, &json!({ "passed": passed, "suites": reports }))?;
            }
            for r in &reports {
                eprintln!(
                    "{}: {} ({} trials, {} failures, worst {:e})",
                    r.suite,
                    if r.passed { "pass" } else { "FAIL" },
                    r.trials,
                    r.failures.len(),
                    r.worst
                );
            }
            Ok(if passed { 0 } else { 2 })
        }
    }
}

fn run_suites(
    suite: Suite,
    trials: Option<usize>,
    pairs: usize,
    seed: u64,
    control: bool,
) -> Result<Vec<VerifyReport>> {
    let wanted: &[Suite] = match suite {
        Suite::All => &[Suite::IfaBound, Suite::SncFactorization, Suite::Gradients, Suite::Oracles],
        ref s => std::slice::from_ref(s),
    };
    let mut reports = Vec::new();
    for s in wanted {
        reports.push(match s {
            Suite::IfaBound => {
                let variant = if control {
                    BoundVariant::FlippedCurvature
                } else {
                    BoundVariant::Exact
                };
                verify_ifa_bound_with(trials.unwrap_or(100), pairs, seed, variant)?
            }
            Suite::SncFactorization => verify_snc_factorization_with(30, 3, trials.unwrap_or(10), seed, control)?,
            Suite::Gradients => verify_gradients_with(trials.unwrap_or(20), seed, control)?,
            Suite::Oracles => verify_oracles_with(seed, control)?,
            Suite::All => unreachable!("expanded above"),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlays_defaults() {
        let rc = RunConfig::from_json(r#"{"adapt": {"alpha1": 0, "K": 3}, "pretrain": {"epochs": 2}}"#).unwrap();
        assert_eq!(rc.adapt.k, 3);
        assert_eq!(rc.adapt.alpha1, 0.0);
        assert_eq!(rc.adapt.alpha2, AdaptConfig::default().alpha2);
        assert_eq!(rc.pretrain.epochs, 2);
        assert_eq!(rc.pretrain.lr, AdaptConfig::pretrain_default().lr);
        assert!(!rc.adapt_seed_set);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = RunConfig::from_json(r#"{"adapt": {"alpah1": 0}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("alpah1"), "{err:#}");
        assert!(RunConfig::from_json(r#"{"adaptt": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"architecture": {"width": 3}}"#).is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some(4)).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(4)).unwrap(), 4);
    }
}

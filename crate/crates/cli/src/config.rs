//! Run configuration: TOML file, `BUNDLEGRAPH_*` environment overrides, and
//! command-line flags, applied in that order (later layers win). Validation
//! collects every failure before reporting.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use bundlegraph_core::augment::{AugKind, AugmentationSpec, ResamplePolicy};
use bundlegraph_core::fusion::{FusionCoefficients, ScoringMode};
use bundlegraph_core::graph::PoolDivisor;
use bundlegraph_core::train::{BprReduction, ContrastMode, TrainConfig};
use bundlegraph_core::views::ViewMask;
use bundlegraph_core::{Error, Result};

/// Numeric precision of the training and evaluation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("unknown precision {other:?} (single|double)")),
        }
    }
}

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub mask_valid: bool,
    pub precision: Precision,
    pub threads: usize,
    pub deterministic: bool,
}

// On-disk layout. Every field is optional so a file needs to name only what
// it changes; section and key names are the override vocabulary.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    aug: AugSection,
    #[serde(default)]
    eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    dir: Option<String>,
    output: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seed: Option<u64>,
    threads: Option<usize>,
    deterministic: Option<bool>,
    precision: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    dim: Option<usize>,
    hops: Option<usize>,
    divisor: Option<String>,
    views: Option<String>,
    lambda: Option<Vec<f64>>,
    scoring: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    patience: Option<usize>,
    tau: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    negatives_per_positive: Option<usize>,
    contrast_mode: Option<String>,
    bpr_reduction: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugSection {
    kind: Option<String>,
    edge_drop_rate: Option<f64>,
    message_drop_rate: Option<f64>,
    noise_eps: Option<f64>,
    resample: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    ks: Option<Vec<usize>>,
    mask_valid: Option<bool>,
}

pub fn parse_views(s: &str) -> std::result::Result<ViewMask, String> {
    let mut mask = ViewMask { ub: false, ui: false, bi: false };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "ub" => mask.ub = true,
            "ui" => mask.ui = true,
            "bi" => mask.bi = true,
            other => return Err(format!("unknown view {other:?} (ub|ui|bi)")),
        }
    }
    Ok(mask)
}

fn parse_divisor(s: &str) -> std::result::Result<PoolDivisor, String> {
    match s.to_ascii_lowercase().as_str() {
        "k_plus_one" | "mean" => Ok(PoolDivisor::KPlusOne),
        "k" => Ok(PoolDivisor::K),
        other => Err(format!("unknown divisor {other:?} (k_plus_one|k)")),
    }
}

fn parse_scoring(s: &str) -> std::result::Result<ScoringMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "fused" => Ok(ScoringMode::Fused),
        "per_view_sum" => Ok(ScoringMode::PerViewSum),
        other => Err(format!("unknown scoring {other:?} (fused|per_view_sum)")),
    }
}

pub fn parse_contrast(s: &str) -> std::result::Result<ContrastMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "fused_self" => Ok(ContrastMode::FusedSelf),
        "pairwise_cross" => Ok(ContrastMode::PairwiseCross),
        "off" => Ok(ContrastMode::Off),
        other => Err(format!("unknown contrast mode {other:?} (fused_self|pairwise_cross|off)")),
    }
}

fn parse_reduction(s: &str) -> std::result::Result<BprReduction, String> {
    match s.to_ascii_lowercase().as_str() {
        "mean" => Ok(BprReduction::Mean),
        "sum" => Ok(BprReduction::Sum),
        other => Err(format!("unknown bpr reduction {other:?} (mean|sum)")),
    }
}

fn parse_aug_kind(s: &str) -> std::result::Result<AugKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Ok(AugKind::None),
        "edge_drop" => Ok(AugKind::EdgeDrop),
        "message_drop" => Ok(AugKind::MessageDrop),
        "noise" => Ok(AugKind::Noise),
        other => Err(format!("unknown augmentation {other:?} (none|edge_drop|message_drop|noise)")),
    }
}

fn parse_resample(s: &str) -> std::result::Result<ResamplePolicy, String> {
    match s.to_ascii_lowercase().as_str() {
        "per_batch" => Ok(ResamplePolicy::PerBatch),
        "per_epoch" => Ok(ResamplePolicy::PerEpoch),
        other => Err(format!("unknown resample policy {other:?} (per_batch|per_epoch)")),
    }
}

fn parse_lambda(raw: &[f64]) -> std::result::Result<FusionCoefficients, String> {
    if raw.len() != 3 {
        return Err(format!("lambda needs exactly 3 coefficients, got {}", raw.len()));
    }
    FusionCoefficients::new(raw[0], raw[1], raw[2]).map_err(|e| e.to_string())
}

pub fn parse_lambda_csv(s: &str) -> std::result::Result<FusionCoefficients, String> {
    let raw: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("lambda {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parse_lambda(&raw)
}

pub fn parse_ks_csv(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("K {p:?}: {e}")))
        .collect()
}

/// One `BUNDLEGRAPH_<SECTION>_<KEY>` lookup. Missing stays untouched;
/// unparsable is an error naming the variable.
fn env_var(section: &str, key: &str) -> Option<(String, String)> {
    let name = format!("BUNDLEGRAPH_{section}_{key}");
    std::env::var(&name).ok().map(|v| (name, v))
}

fn env_parse<T: FromStr>(section: &str, key: &str, slot: &mut Option<T>, errors: &mut Vec<String>)
where
    T::Err: std::fmt::Display,
{
    if let Some((name, raw)) = env_var(section, key) {
        match raw.parse::<T>() {
            Ok(v) => *slot = Some(v),
            Err(e) => errors.push(format!("{name}={raw:?}: {e}")),
        }
    }
}

fn env_parse_list(section: &str, key: &str, slot: &mut Option<Vec<f64>>, errors: &mut Vec<String>) {
    if let Some((name, raw)) = env_var(section, key) {
        let parsed: std::result::Result<Vec<f64>, _> =
            raw.split(',').map(|p| p.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => *slot = Some(v),
            Err(e) => errors.push(format!("{name}={raw:?}: {e}")),
        }
    }
}

fn env_parse_usize_list(
    section: &str,
    key: &str,
    slot: &mut Option<Vec<usize>>,
    errors: &mut Vec<String>,
) {
    if let Some((name, raw)) = env_var(section, key) {
        match parse_ks_csv(&raw) {
            Ok(v) => *slot = Some(v),
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
}

impl FileConfig {
    fn apply_env(&mut self, errors: &mut Vec<String>) {
        env_parse("DATA", "DIR", &mut self.data.dir, errors);
        env_parse("DATA", "OUTPUT", &mut self.data.output, errors);
        env_parse("RUN", "SEED", &mut self.run.seed, errors);
        env_parse("RUN", "THREADS", &mut self.run.threads, errors);
        env_parse("RUN", "DETERMINISTIC", &mut self.run.deterministic, errors);
        env_parse("RUN", "PRECISION", &mut self.run.precision, errors);
        env_parse("MODEL", "DIM", &mut self.model.dim, errors);
        env_parse("MODEL", "HOPS", &mut self.model.hops, errors);
        env_parse("MODEL", "DIVISOR", &mut self.model.divisor, errors);
        env_parse("MODEL", "VIEWS", &mut self.model.views, errors);
        env_parse_list("MODEL", "LAMBDA", &mut self.model.lambda, errors);
        env_parse("MODEL", "SCORING", &mut self.model.scoring, errors);
        env_parse("TRAIN", "LR", &mut self.train.lr, errors);
        env_parse("TRAIN", "BATCH_SIZE", &mut self.train.batch_size, errors);
        env_parse("TRAIN", "EPOCHS", &mut self.train.epochs, errors);
        env_parse("TRAIN", "PATIENCE", &mut self.train.patience, errors);
        env_parse("TRAIN", "TAU", &mut self.train.tau, errors);
        env_parse("TRAIN", "BETA1", &mut self.train.beta1, errors);
        env_parse("TRAIN", "BETA2", &mut self.train.beta2, errors);
        env_parse(
            "TRAIN",
            "NEGATIVES_PER_POSITIVE",
            &mut self.train.negatives_per_positive,
            errors,
        );
        env_parse("TRAIN", "CONTRAST_MODE", &mut self.train.contrast_mode, errors);
        env_parse("TRAIN", "BPR_REDUCTION", &mut self.train.bpr_reduction, errors);
        env_parse("AUG", "KIND", &mut self.aug.kind, errors);
        env_parse("AUG", "EDGE_DROP_RATE", &mut self.aug.edge_drop_rate, errors);
        env_parse("AUG", "MESSAGE_DROP_RATE", &mut self.aug.message_drop_rate, errors);
        env_parse("AUG", "NOISE_EPS", &mut self.aug.noise_eps, errors);
        env_parse("AUG", "RESAMPLE", &mut self.aug.resample, errors);
        env_parse_usize_list("EVAL", "KS", &mut self.eval.ks, errors);
        env_parse("EVAL", "MASK_VALID", &mut self.eval.mask_valid, errors);
    }
}

/// Flag-level overrides collected by the argument parser. `None` means the
/// flag was not given.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub precision: Option<Precision>,
    pub dim: Option<usize>,
    pub hops: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub tau: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub lambda: Option<FusionCoefficients>,
    pub views: Option<ViewMask>,
    pub contrast_mode: Option<ContrastMode>,
    pub ks: Option<Vec<usize>>,
    pub mask_valid: bool,
}

/// Builds the resolved configuration. All parse and validation failures are
/// reported together in one config error.
pub fn load_config(file: Option<&Path>, over: &Overrides) -> Result<RunConfig> {
    let mut errors = Vec::new();

    let mut fc = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            match toml::from_str::<FileConfig>(&text) {
                Ok(fc) => fc,
                Err(e) => {
                    return Err(Error::config(format!("config {}: {e}", path.display())))
                }
            }
        }
        None => FileConfig::default(),
    };
    fc.apply_env(&mut errors);

    let defaults = TrainConfig::default();
    let mut train = TrainConfig {
        dim: fc.model.dim.unwrap_or(defaults.dim),
        hops: fc.model.hops.unwrap_or(defaults.hops),
        lr: fc.train.lr.unwrap_or(defaults.lr),
        batch_size: fc.train.batch_size.unwrap_or(defaults.batch_size),
        epochs: fc.train.epochs.unwrap_or(defaults.epochs),
        patience: fc.train.patience.unwrap_or(defaults.patience),
        tau: fc.train.tau.unwrap_or(defaults.tau),
        beta1: fc.train.beta1.unwrap_or(defaults.beta1),
        beta2: fc.train.beta2.unwrap_or(defaults.beta2),
        negatives_per_positive: fc
            .train
            .negatives_per_positive
            .unwrap_or(defaults.negatives_per_positive),
        seed: fc.run.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let mut collect = |label: &str, out: std::result::Result<(), String>| {
        if let Err(e) = out {
            errors.push(format!("{label}: {e}"));
        }
    };
    if let Some(s) = &fc.model.divisor {
        collect("model.divisor", parse_divisor(s).map(|v| train.divisor = v));
    }
    if let Some(s) = &fc.model.views {
        collect("model.views", parse_views(s).map(|v| train.views = v));
    }
    if let Some(raw) = &fc.model.lambda {
        collect("model.lambda", parse_lambda(raw).map(|v| train.lambda = v));
    }
    if let Some(s) = &fc.model.scoring {
        collect("model.scoring", parse_scoring(s).map(|v| train.scoring = v));
    }
    if let Some(s) = &fc.train.contrast_mode {
        collect("train.contrast_mode", parse_contrast(s).map(|v| train.contrast_mode = v));
    }
    if let Some(s) = &fc.train.bpr_reduction {
        collect("train.bpr_reduction", parse_reduction(s).map(|v| train.bpr_reduction = v));
    }
    let mut aug = AugmentationSpec::default();
    if let Some(s) = &fc.aug.kind {
        collect("aug.kind", parse_aug_kind(s).map(|v| aug.kind = v));
    }
    if let Some(v) = fc.aug.edge_drop_rate {
        aug.edge_drop_rate = v;
    }
    if let Some(v) = fc.aug.message_drop_rate {
        aug.message_drop_rate = v;
    }
    if let Some(v) = fc.aug.noise_eps {
        aug.noise_eps = v;
    }
    if let Some(s) = &fc.aug.resample {
        collect("aug.resample", parse_resample(s).map(|v| aug.resample = v));
    }
    train.aug = aug;

    let mut precision = Precision::Single;
    if let Some(s) = &fc.run.precision {
        collect("run.precision", s.parse::<Precision>().map(|v| precision = v));
    }
    let mut ks = fc.eval.ks.unwrap_or_else(|| vec![20, 40]);
    let mut mask_valid = fc.eval.mask_valid.unwrap_or(false);
    let mut threads = fc.run.threads.unwrap_or(0);
    let mut deterministic = fc.run.deterministic.unwrap_or(false);
    let mut data_dir = fc.data.dir.map(PathBuf::from);
    let mut output_dir = fc.data.output.map(PathBuf::from);

    // Flag layer.
    if let Some(v) = &over.data_dir {
        data_dir = Some(v.clone());
    }
    if let Some(v) = &over.output_dir {
        output_dir = Some(v.clone());
    }
    if let Some(v) = over.seed {
        train.seed = v;
    }
    if let Some(v) = over.threads {
        threads = v;
    }
    if over.deterministic {
        deterministic = true;
    }
    if let Some(v) = over.precision {
        precision = v;
    }
    if let Some(v) = over.dim {
        train.dim = v;
    }
    if let Some(v) = over.hops {
        train.hops = v;
    }
    if let Some(v) = over.epochs {
        train.epochs = v;
    }
    if let Some(v) = over.lr {
        train.lr = v;
    }
    if let Some(v) = over.tau {
        train.tau = v;
    }
    if let Some(v) = over.beta1 {
        train.beta1 = v;
    }
    if let Some(v) = over.beta2 {
        train.beta2 = v;
    }
    if let Some(v) = over.lambda {
        train.lambda = v;
    }
    if let Some(v) = over.views {
        train.views = v;
    }
    if let Some(v) = over.contrast_mode {
        train.contrast_mode = v;
    }
    if let Some(v) = &over.ks {
        ks = v.clone();
    }
    if over.mask_valid {
        mask_valid = true;
    }

    if deterministic {
        threads = 1;
    }

    errors.extend(train.validation_errors());
    if ks.is_empty() {
        errors.push("eval.ks: at least one cutoff required".into());
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        errors.push(format!("eval.ks: cutoff must be positive, got {k}"));
    }
    let data_dir = match data_dir {
        Some(d) => d,
        None => {
            errors.push("data.dir: no dataset directory given (file, env, or --data-dir)".into());
            PathBuf::new()
        }
    };
    if !errors.is_empty() {
        return Err(Error::config(errors.join("\n")));
    }

    Ok(RunConfig {
        data_dir,
        output_dir: output_dir.unwrap_or_else(|| PathBuf::from("out")),
        train,
        ks,
        mask_valid,
        precision,
        threads,
        deterministic,
    })
}

//! Joint objective and epoch loop: ranking loss on the clean pass,
//! contrastive loss across two perturbed passes, L2, Adam.

pub mod adam;
pub mod grad;
pub mod loss;
pub mod sampler;

use std::fmt::Write as _;

use log::warn;

use crate::augment::{AugmentationSpec, ResamplePolicy};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_ranking, Scorer};
use crate::fusion::{fuse, FusionCoefficients, ScoringMode};
use crate::graph::PoolDivisor;
use crate::num::Real;
use crate::rng::{stream_rng, Stream};
use crate::views::{compute_views, BundleGraphs, EmbeddingTable, ViewMask, ViewSettings};

pub use adam::AdamState;
pub use grad::{
    compute_gradients, pairwise_cross_contrast, sample_step_draws, step, ContrastTerm,
    StepDraws, StepOutput,
};
pub use loss::{bpr_loss, info_nce, info_nce_with_grad, l2_reg, InfoNce, InfoNceGrad};
pub use sampler::{SampledBatch, TrainingTriple, TripleSampler};

/// Which representations the contrastive loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastMode {
    /// Two terms on the fused representations (users, bundles).
    FusedSelf,
    /// One user and one bundle term per unordered pair of enabled views.
    PairwiseCross,
    /// No contrastive loss; perturbation passes are skipped entirely.
    Off,
}

impl ContrastMode {
    pub fn label(self) -> &'static str {
        match self {
            ContrastMode::FusedSelf => "fused_self",
            ContrastMode::PairwiseCross => "pairwise_cross",
            ContrastMode::Off => "off",
        }
    }
}

/// How the per-batch ranking sum enters the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BprReduction {
    /// Divide by the batch's triple count. Default: decouples the learning
    /// rate from the batch size.
    Mean,
    /// Keep the plain sum.
    Sum,
}

/// Everything a training run needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dim: usize,
    pub hops: usize,
    pub lambda: FusionCoefficients,
    pub tau: f64,
    /// Contrastive loss weight.
    pub beta1: f64,
    /// L2 weight.
    pub beta2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub aug: AugmentationSpec,
    pub contrast_mode: ContrastMode,
    pub scoring: ScoringMode,
    pub divisor: PoolDivisor,
    pub bpr_reduction: BprReduction,
    pub views: ViewMask,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hops: 2,
            lambda: FusionCoefficients::default(),
            tau: 0.2,
            beta1: 0.1,
            beta2: 1e-5,
            lr: 1e-3,
            batch_size: 2048,
            epochs: 100,
            negatives_per_positive: 1,
            aug: AugmentationSpec::default(),
            contrast_mode: ContrastMode::FusedSelf,
            scoring: ScoringMode::Fused,
            divisor: PoolDivisor::KPlusOne,
            bpr_reduction: BprReduction::Mean,
            views: ViewMask::ALL,
            seed: 2023,
            patience: 0,
        }
    }
}

impl TrainConfig {
    /// All violated constraints, empty when the config is valid.
    // Negated comparisons are deliberate: they reject NaN values too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim == 0 {
            errs.push("embedding dimension must be positive".into());
        }
        if !(self.tau > 0.0) {
            errs.push(format!("temperature must be positive, got {}", self.tau));
        }
        if self.beta1 < 0.0 {
            errs.push(format!("contrastive weight must be nonnegative, got {}", self.beta1));
        }
        if self.beta2 < 0.0 {
            errs.push(format!("l2 weight must be nonnegative, got {}", self.beta2));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch size must be at least 1".into());
        }
        if self.negatives_per_positive == 0 {
            errs.push("negatives per positive must be at least 1".into());
        }
        if self.views.enabled_count() == 0 {
            errs.push("at least one view must be enabled".into());
        }
        if matches!(self.divisor, PoolDivisor::K) && self.hops == 0 {
            errs.push("hop-count pooling requires at least one hop".into());
        }
        if let Err(e) = self.lambda.validate() {
            errs.push(e.to_string());
        } else if let Err(e) = self.lambda.restricted_to(self.views) {
            errs.push(e.to_string());
        }
        if let Err(e) = self.aug.validate() {
            errs.push(e.to_string());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }

    pub fn view_settings(&self) -> ViewSettings {
        ViewSettings { hops: self.hops, divisor: self.divisor, views: self.views }
    }
}

/// One step's loss, already reduced the way it enters the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub contrast_user: f64,
    pub contrast_bundle: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown =
        LossBreakdown { bpr: 0.0, contrast_user: 0.0, contrast_bundle: 0.0, reg: 0.0, total: 0.0 };
}

/// Per-epoch means plus validation metrics.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_recall: f64,
    pub val_ndcg: f64,
    /// Triples dropped because no negative survived rejection sampling.
    pub skipped_triples: usize,
    /// Cosine pairs that fell back to 0 because of a zero-norm row.
    pub zero_norm_pairs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// False when the validation split was empty and metrics default to 0.
    pub validated: bool,
}

impl TrainingLog {
    /// One header plus one tab-separated line per epoch.
    pub fn render_tsv(&self) -> String {
        let mut out =
            String::from("epoch\tbpr\tcl_user\tcl_bundle\treg\ttotal\tval_recall@20\tval_ndcg@20\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch,
                r.loss.bpr,
                r.loss.contrast_user,
                r.loss.contrast_bundle,
                r.loss.reg,
                r.loss.total,
                r.val_recall,
                r.val_ndcg
            );
        }
        out
    }
}

/// A finished run: the checkpoint with the best validation Recall@20 (the
/// final epoch when there is no validation split) plus the epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub table: EmbeddingTable<S>,
    pub log: TrainingLog,
}

const VALIDATION_K: usize = 20;

/// Validation Recall@20 and NDCG@20 for the current parameters.
fn validation_metrics<S: Real>(
    theta: &EmbeddingTable<S>,
    graphs: &BundleGraphs<S>,
    d: &Dataset,
    cfg: &TrainConfig,
    lambda: &FusionCoefficients,
) -> Result<(f64, f64)> {
    let settings = cfg.view_settings();
    let clean = compute_views(theta, graphs, &settings, &crate::augment::PassPerturbation::clean())?;
    let report = match cfg.scoring {
        ScoringMode::Fused => {
            let fused = fuse(&clean, lambda);
            evaluate_ranking(&Scorer::Fused(&fused), &d.valid_ub, &[&d.train_ub], &[VALIDATION_K])
        }
        ScoringMode::PerViewSum => evaluate_ranking(
            &Scorer::PerViewSum { views: &clean, mask: cfg.views },
            &d.valid_ub,
            &[&d.train_ub],
            &[VALIDATION_K],
        ),
    };
    Ok((report.recall[&VALIDATION_K], report.ndcg[&VALIDATION_K]))
}

/// Runs the full loop. Deterministic for a fixed seed at any thread count.
pub fn train<S: Real>(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if d.train_ub.is_empty() {
        return Err(Error::data("training split has no edges"));
    }
    let graphs = BundleGraphs::<S>::from_dataset(d);
    let lambda = cfg.lambda.restricted_to(cfg.views)?;
    let sampler = TripleSampler::new(&d.train_ub);
    let mut theta =
        EmbeddingTable::<S>::xavier(d.users(), d.bundles(), d.items(), cfg.dim, cfg.seed);
    let mut optimizer = AdamState::new(&theta);
    let mut sampling_rng = stream_rng(cfg.seed, Stream::Sampling);
    let mut augment_rng = stream_rng(cfg.seed, Stream::Augmentation);

    let steps_per_epoch = d.train_ub.len().div_ceil(cfg.batch_size).max(1);
    let has_validation = !d.valid_ub.is_empty();
    let mut log = TrainingLog { validated: has_validation, ..TrainingLog::default() };
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_table = theta.clone();
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let epoch_draws = match cfg.aug.resample {
            ResamplePolicy::PerEpoch => {
                Some(sample_step_draws(&graphs, cfg, &mut augment_rng))
            }
            ResamplePolicy::PerBatch => None,
        };
        let mut sums = LossBreakdown::ZERO;
        let mut steps_run = 0usize;
        let mut skipped = 0usize;
        let mut zero_norms = 0usize;
        for batch_index in 0..steps_per_epoch {
            let batch =
                sampler.sample_batch(cfg.batch_size, cfg.negatives_per_positive, &mut sampling_rng);
            skipped += batch.skipped;
            if batch.triples.is_empty() {
                continue;
            }
            let fresh;
            let draws = match &epoch_draws {
                Some(d) => d,
                None => {
                    fresh = sample_step_draws(&graphs, cfg, &mut augment_rng);
                    &fresh
                }
            };
            let out = step(&graphs, cfg, &theta, &batch.triples, draws, true).map_err(|e| {
                match e {
                    Error::Numeric(m) => {
                        Error::numeric(format!("epoch {epoch}, batch {batch_index}: {m}"))
                    }
                    other => other,
                }
            })?;
            let grads = out.grads.as_ref().expect("gradients were requested");
            optimizer.step(&mut theta, grads, cfg.lr);
            sums.bpr += out.loss.bpr;
            sums.contrast_user += out.loss.contrast_user;
            sums.contrast_bundle += out.loss.contrast_bundle;
            sums.reg += out.loss.reg;
            sums.total += out.loss.total;
            zero_norms += out.zero_norm_pairs;
            steps_run += 1;
        }
        if skipped > 0 {
            warn!("epoch {epoch}: {skipped} triples dropped (negative sampling cap)");
        }
        if zero_norms > 0 {
            warn!("epoch {epoch}: {zero_norms} zero-norm cosine pairs treated as 0");
        }
        let scale = 1.0 / steps_run.max(1) as f64;
        let loss = LossBreakdown {
            bpr: sums.bpr * scale,
            contrast_user: sums.contrast_user * scale,
            contrast_bundle: sums.contrast_bundle * scale,
            reg: sums.reg * scale,
            total: sums.total * scale,
        };

        let (val_recall, val_ndcg) = if has_validation {
            validation_metrics(&theta, &graphs, d, cfg, &lambda)?
        } else {
            (0.0, 0.0)
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            val_recall,
            val_ndcg,
            skipped_triples: skipped,
            zero_norm_pairs: zero_norms,
        });

        if has_validation {
            // Strictly-better keeps the earliest epoch on ties.
            if val_recall > best_recall {
                best_recall = val_recall;
                best_table = theta.clone();
                best_epoch = epoch;
            }
        } else {
            best_table = theta.clone();
            best_epoch = epoch;
        }
        if has_validation && cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    log.best_epoch = best_epoch;
    Ok(TrainOutcome { table: best_table, log })
}

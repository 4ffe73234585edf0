//! All-ranking evaluation: top-K lists, Recall and NDCG, sparsity-group hit
//! analysis, score-part rankings, and representation geometry diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::InteractionMatrix;
use crate::fusion::{FusedRepresentations, FusionCoefficients};
use crate::num::{s, to_f64, Real};
use crate::views::{View, ViewMask, ViewRepresentations, ALL_VIEWS};

/// A score source for ranking. The decomposed variants rank by the ego or
/// cross part of the fused score alone.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a, S> {
    Fused(&'a FusedRepresentations<S>),
    PerViewSum { views: &'a ViewRepresentations<S>, mask: ViewMask },
    Ego { views: &'a ViewRepresentations<S>, lambda: &'a FusionCoefficients },
    Cross { views: &'a ViewRepresentations<S>, lambda: &'a FusionCoefficients },
}

impl<S: Real> Scorer<'_, S> {
    pub fn bundles(&self) -> usize {
        match self {
            Scorer::Fused(f) => f.bundles.count(),
            Scorer::PerViewSum { views, .. } => views.bundle_ub.count(),
            Scorer::Ego { views, .. } | Scorer::Cross { views, .. } => views.bundle_ub.count(),
        }
    }

    /// Scores every bundle for one user into `out`.
    pub fn score_user(&self, u: usize, out: &mut [S]) {
        match self {
            Scorer::Fused(f) => {
                for (b, slot) in out.iter_mut().enumerate() {
                    *slot = f.users.dot_rows(u, &f.bundles, b);
                }
            }
            Scorer::PerViewSum { views, mask } => {
                for (b, slot) in out.iter_mut().enumerate() {
                    *slot = ALL_VIEWS
                        .iter()
                        .filter(|v| v.enabled_in(*mask))
                        .map(|&v| views.user_view(v).dot_rows(u, views.bundle_view(v), b))
                        .sum();
                }
            }
            Scorer::Ego { views, lambda } => {
                for (b, slot) in out.iter_mut().enumerate() {
                    *slot = ALL_VIEWS
                        .iter()
                        .map(|&v| {
                            s::<S>(lambda.get(v) * lambda.get(v))
                                * views.user_view(v).dot_rows(u, views.bundle_view(v), b)
                        })
                        .sum();
                }
            }
            Scorer::Cross { views, lambda } => {
                for (b, slot) in out.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for x in ALL_VIEWS {
                        for y in ALL_VIEWS {
                            if x != y {
                                acc += s::<S>(lambda.get(x) * lambda.get(y))
                                    * views.user_view(x).dot_rows(u, views.bundle_view(y), b);
                            }
                        }
                    }
                    *slot = acc;
                }
            }
        }
    }
}

/// Top-K lists for a set of users.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub k: usize,
    pub users: Vec<u32>,
    pub lists: Vec<Vec<u32>>,
}

/// Ranks all bundles per user, excluding each user's masked bundles.
/// Ties break toward the smaller bundle id. `masked` aligns with `users`;
/// pass an empty slice for no masking.
pub fn rank_all<S: Real>(
    scorer: &Scorer<S>,
    users: &[u32],
    masked: &[Vec<u32>],
    k: usize,
) -> RankingResult {
    assert!(masked.is_empty() || masked.len() == users.len(), "mask misaligned");
    let n = scorer.bundles();
    let lists: Vec<Vec<u32>> = users
        .par_iter()
        .enumerate()
        .map(|(idx, &u)| {
            let mut scores = vec![S::zero(); n];
            scorer.score_user(u as usize, &mut scores);
            let mut excluded = vec![false; n];
            if let Some(m) = masked.get(idx) {
                for &b in m {
                    excluded[b as usize] = true;
                }
            }
            let mut order: Vec<u32> = (0..n as u32).filter(|&b| !excluded[b as usize]).collect();
            let top = k.min(order.len());
            let by_score_then_id = |a: &u32, b: &u32| {
                scores[*b as usize]
                    .partial_cmp(&scores[*a as usize])
                    .expect("scores must be comparable")
                    .then(a.cmp(b))
            };
            if top > 0 && top < order.len() {
                order.select_nth_unstable_by(top - 1, by_score_then_id);
            }
            order.truncate(top);
            order.sort_unstable_by(by_score_then_id);
            order
        })
        .collect();
    RankingResult { k, users: users.to_vec(), lists }
}

/// Mean over users of |top-K intersected with truth| / |truth|.
/// Users with empty truth are skipped.
pub fn recall_at_k(ranking: &RankingResult, truth: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (list, gt) in ranking.lists.iter().zip(truth) {
        if gt.is_empty() {
            continue;
        }
        let hits = list.iter().filter(|b| gt.contains(b)).count();
        total += hits as f64 / gt.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Binary-gain NDCG: DCG sums 1/log2(position + 1) over hit positions
/// (1-based), ideal DCG fills the first min(K, |truth|) positions.
pub fn ndcg_at_k(ranking: &RankingResult, truth: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (list, gt) in ranking.lists.iter().zip(truth) {
        if gt.is_empty() {
            continue;
        }
        let dcg: f64 = list
            .iter()
            .enumerate()
            .filter(|(_, b)| gt.contains(b))
            .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..ranking.k.min(gt.len()))
            .map(|pos| 1.0 / ((pos + 2) as f64).log2())
            .sum();
        total += dcg / ideal;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Recall and NDCG at several cutoffs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl MetricsReport {
    /// `recall@20=0.2842` style lines.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.recall {
            let _ = writeln!(out, "recall@{k}={v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "ndcg@{k}={v:.6}");
        }
        out
    }

    /// Machine-readable `metric<TAB>k<TAB>value` table.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("metric\tk\tvalue\n");
        for (k, v) in &self.recall {
            let _ = writeln!(out, "recall\t{k}\t{v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "ndcg\t{k}\t{v:.6}");
        }
        out
    }
}

/// Users with at least one truth edge, their truth lists, and mask lists
/// drawn from the union of `mask_splits`.
pub fn eval_setup(
    truth_split: &InteractionMatrix,
    mask_splits: &[&InteractionMatrix],
) -> (Vec<u32>, Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let truth_rows = truth_split.row_lists();
    let mask_rows: Vec<Vec<Vec<u32>>> = mask_splits.iter().map(|m| m.row_lists()).collect();
    let mut users = Vec::new();
    let mut truth = Vec::new();
    let mut masks = Vec::new();
    for (u, gt) in truth_rows.into_iter().enumerate() {
        if gt.is_empty() {
            continue;
        }
        let mut mask = Vec::new();
        for rows in &mask_rows {
            mask.extend_from_slice(&rows[u]);
        }
        users.push(u as u32);
        truth.push(gt);
        masks.push(mask);
    }
    (users, truth, masks)
}

/// Ranks and scores one split at several cutoffs.
pub fn evaluate_ranking<S: Real>(
    scorer: &Scorer<S>,
    truth_split: &InteractionMatrix,
    mask_splits: &[&InteractionMatrix],
    ks: &[usize],
) -> MetricsReport {
    let (users, truth, masks) = eval_setup(truth_split, mask_splits);
    let mut report = MetricsReport::default();
    for &k in ks {
        let ranking = rank_all(scorer, &users, &masks, k);
        report.recall.insert(k, recall_at_k(&ranking, &truth));
        report.ndcg.insert(k, ndcg_at_k(&ranking, &truth));
    }
    report
}

/// Hit rate of one sparsity bucket of test pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHit {
    pub lo: f64,
    pub hi: f64,
    /// Whether `hi` closes the interval (last bucket only).
    pub closed: bool,
    pub pairs: usize,
    pub hits: usize,
}

impl GroupHit {
    pub fn rate(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.hits as f64 / self.pairs as f64
        }
    }

    pub fn render(&self, k: usize) -> String {
        let close = if self.closed { "]" } else { ")" };
        format!(
            "group=[{},{}{close} hit@{k}={:.6} n_pairs={}",
            self.lo,
            self.hi,
            self.rate(),
            self.pairs
        )
    }
}

/// Buckets test pairs by the bundle's item-coldness rate and reports the
/// fraction of pairs whose bundle made the user's top-K. Buckets that
/// receive no pairs are omitted.
pub fn group_hit_analysis(
    ranking: &RankingResult,
    truth: &[Vec<u32>],
    bundle_rates: &[f64],
    boundaries: &[f64],
) -> Vec<GroupHit> {
    assert!(boundaries.len() >= 2, "need at least one interval");
    let buckets = boundaries.len() - 1;
    let mut out: Vec<GroupHit> = (0..buckets)
        .map(|i| GroupHit {
            lo: boundaries[i],
            hi: boundaries[i + 1],
            closed: i + 1 == buckets,
            pairs: 0,
            hits: 0,
        })
        .collect();
    let intervals: Vec<(f64, f64, bool)> = out.iter().map(|g| (g.lo, g.hi, g.closed)).collect();
    let locate = |rate: f64| -> Option<usize> {
        intervals.iter().position(|&(lo, hi, closed)| {
            rate >= lo && if closed { rate <= hi } else { rate < hi }
        })
    };
    for (list, gt) in ranking.lists.iter().zip(truth) {
        for &b in gt {
            if let Some(i) = locate(bundle_rates[b as usize]) {
                out[i].pairs += 1;
                if list.contains(&b) {
                    out[i].hits += 1;
                }
            }
        }
    }
    out.retain(|g| g.pairs > 0);
    out
}

/// Metric reports for the full score and its two parts.
#[derive(Debug, Clone)]
pub struct DecomposedMetrics {
    pub total: MetricsReport,
    pub ego: MetricsReport,
    pub cross: MetricsReport,
}

/// Ranks the same split three times: by fused score, by the ego part, and by
/// the cross part. The total ranking goes through the fused pipeline, so it
/// matches the standard evaluation bit for bit.
pub fn decomposed_eval<S: Real>(
    views: &ViewRepresentations<S>,
    lambda: &FusionCoefficients,
    truth_split: &InteractionMatrix,
    mask_splits: &[&InteractionMatrix],
    ks: &[usize],
) -> DecomposedMetrics {
    let fused = crate::fusion::fuse(views, lambda);
    DecomposedMetrics {
        total: evaluate_ranking(&Scorer::Fused(&fused), truth_split, mask_splits, ks),
        ego: evaluate_ranking(&Scorer::Ego { views, lambda }, truth_split, mask_splits, ks),
        cross: evaluate_ranking(&Scorer::Cross { views, lambda }, truth_split, mask_splits, ks),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Bundle,
}

/// Mean cosine diagnostics: alignment compares the same entity across view
/// pairs, dispersion compares fused representations of distinct entities.
#[derive(Debug, Clone)]
pub struct AlignmentDispersion {
    pub alignment: BTreeMap<(EntityKind, View, View), f64>,
    pub dispersion: BTreeMap<EntityKind, f64>,
    /// Comparisons skipped because one side had zero norm.
    pub skipped: usize,
}

impl AlignmentDispersion {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (&(kind, x, y), v) in &self.alignment {
            let kind = match kind {
                EntityKind::User => "user",
                EntityKind::Bundle => "bundle",
            };
            let _ = writeln!(out, "alignment_{kind}_{}_{}={v:.6}", x.label(), y.label());
        }
        for (&kind, v) in &self.dispersion {
            let kind = match kind {
                EntityKind::User => "user",
                EntityKind::Bundle => "bundle",
            };
            let _ = writeln!(out, "dispersion_{kind}={v:.6}");
        }
        let _ = writeln!(out, "geometry_skipped={}", self.skipped);
        out
    }
}

fn cosine<S: Real>(a: &[S], b: &[S]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (to_f64(x), to_f64(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Computes alignment over every entity and dispersion over `sample_pairs`
/// random distinct same-kind pairs of fused representations.
pub fn alignment_dispersion<S: Real>(
    views: &ViewRepresentations<S>,
    fused: &FusedRepresentations<S>,
    sample_pairs: usize,
    rng: &mut impl Rng,
) -> AlignmentDispersion {
    let mut alignment = BTreeMap::new();
    let mut skipped = 0usize;
    let pairs = [(View::Ub, View::Ui), (View::Ub, View::Bi), (View::Ui, View::Bi)];
    for kind in [EntityKind::User, EntityKind::Bundle] {
        for &(x, y) in &pairs {
            let (bx, by) = match kind {
                EntityKind::User => (views.user_view(x), views.user_view(y)),
                EntityKind::Bundle => (views.bundle_view(x), views.bundle_view(y)),
            };
            let mut sum = 0.0;
            let mut n = 0usize;
            for i in 0..bx.count() {
                match cosine(bx.row(i), by.row(i)) {
                    Some(c) => {
                        sum += c;
                        n += 1;
                    }
                    None => skipped += 1,
                }
            }
            alignment.insert((kind, x, y), if n == 0 { 0.0 } else { sum / n as f64 });
        }
    }

    let mut dispersion = BTreeMap::new();
    for kind in [EntityKind::User, EntityKind::Bundle] {
        let block = match kind {
            EntityKind::User => &fused.users,
            EntityKind::Bundle => &fused.bundles,
        };
        let count = block.count();
        if count < 2 {
            dispersion.insert(kind, 0.0);
            continue;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..sample_pairs {
            let i = rng.gen_range(0..count);
            let mut j = rng.gen_range(0..count - 1);
            if j >= i {
                j += 1;
            }
            match cosine(block.row(i), block.row(j)) {
                Some(c) => {
                    sum += c;
                    n += 1;
                }
                None => skipped += 1,
            }
        }
        dispersion.insert(kind, if n == 0 { 0.0 } else { sum / n as f64 });
    }
    AlignmentDispersion { alignment, dispersion, skipped }
}

//! One optimization step: clean forward pass for ranking, two perturbed
//! passes for contrast, exact adjoint backward for all of it.
//!
//! Under frozen perturbation draws every pass is affine in the layer-0
//! table, so the backward sweep is a pure adjoint chain and needs no stored
//! forward activations.

use rand::Rng;

use crate::augment::PassPerturbation;
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionCoefficients, ScoringMode};
use crate::graph::{backprop_pooled, EmbeddingBlock};
use crate::num::{s, to_f64, Real};
use crate::train::loss::{
    info_nce, info_nce_with_grad, l2_reg, neg_log_sigmoid, sigmoid, InfoNceGrad,
};
use crate::train::sampler::TrainingTriple;
use crate::train::{BprReduction, ContrastMode, LossBreakdown, TrainConfig};
use crate::views::{
    compute_views, BundleGraphs, EmbeddingTable, View, ViewRepresentations, ALL_VIEWS,
};

/// The frozen randomness of one step: two independent perturbation passes.
#[derive(Debug, Clone)]
pub struct StepDraws<S> {
    pub pass1: PassPerturbation<S>,
    pub pass2: PassPerturbation<S>,
}

impl<S: Real> StepDraws<S> {
    pub fn clean() -> Self {
        Self { pass1: PassPerturbation::clean(), pass2: PassPerturbation::clean() }
    }
}

/// Draws both contrast passes. With contrast off no randomness is consumed,
/// so disabling contrast never shifts the other random streams.
pub fn sample_step_draws<S: Real>(
    graphs: &BundleGraphs<S>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> StepDraws<S> {
    if cfg.contrast_mode == ContrastMode::Off {
        return StepDraws::clean();
    }
    let dims = (graphs.users, graphs.bundles, graphs.items, cfg.dim);
    let pass1 = cfg.aug.sample_pass(&graphs.prop, dims, cfg.hops, cfg.views, rng);
    let pass2 = cfg.aug.sample_pass(&graphs.prop, dims, cfg.hops, cfg.views, rng);
    StepDraws { pass1, pass2 }
}

/// One contrastive loss term, labeled for reporting.
#[derive(Debug, Clone)]
pub struct ContrastTerm {
    pub label: String,
    pub user_side: bool,
    pub value: f64,
    pub zero_norm_pairs: usize,
}

/// Everything one step produces.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub loss: LossBreakdown,
    pub contrast_terms: Vec<ContrastTerm>,
    pub zero_norm_pairs: usize,
    pub grads: Option<EmbeddingTable<S>>,
}

/// Per-view gradient blocks for one pass, with activity flags so inactive
/// views skip their backward propagation entirely.
struct ViewGrads<S> {
    user: [EmbeddingBlock<S>; 3],
    bundle: [EmbeddingBlock<S>; 3],
    active: [bool; 3],
}

fn view_index(v: View) -> usize {
    match v {
        View::Ub => 0,
        View::Ui => 1,
        View::Bi => 2,
    }
}

impl<S: Real> ViewGrads<S> {
    fn zeros(users: usize, bundles: usize, dim: usize) -> Self {
        Self {
            user: std::array::from_fn(|_| EmbeddingBlock::zeros(users, dim)),
            bundle: std::array::from_fn(|_| EmbeddingBlock::zeros(bundles, dim)),
            active: [false; 3],
        }
    }

    fn mark(&mut self, v: View) {
        self.active[view_index(v)] = true;
    }

    fn user_mut(&mut self, v: View) -> &mut EmbeddingBlock<S> {
        &mut self.user[view_index(v)]
    }

    fn bundle_mut(&mut self, v: View) -> &mut EmbeddingBlock<S> {
        &mut self.bundle[view_index(v)]
    }

    /// Routes a fused-level gradient into every enabled view, scaled by its
    /// fusion coefficient.
    fn add_fused(
        &mut self,
        g_users: &EmbeddingBlock<S>,
        g_bundles: &EmbeddingBlock<S>,
        lambda: &FusionCoefficients,
        cfg: &TrainConfig,
    ) {
        for v in ALL_VIEWS {
            let lam = lambda.get(v);
            if !v.enabled_in(cfg.views) || lam == 0.0 {
                continue;
            }
            self.user_mut(v).add_scaled(g_users, s(lam));
            self.bundle_mut(v).add_scaled(g_bundles, s(lam));
            self.mark(v);
        }
    }
}

/// Adds `weight * rows` of a dense per-slot gradient into `block` at `ids`.
fn scatter_rows<S: Real>(
    block: &mut EmbeddingBlock<S>,
    ids: &[u32],
    rows: &EmbeddingBlock<S>,
    weight: S,
) {
    let dim = block.dim();
    for (slot, &id) in ids.iter().enumerate() {
        let src = rows.row(slot);
        let dst = block.row_mut(id as usize);
        for k in 0..dim {
            dst[k] += weight * src[k];
        }
    }
}

/// Pulls the loss gradient of one pass back to the layer-0 table. Per view:
/// lifted-side gradients go through the mean-lift adjoint into item space,
/// then the pooled-propagation adjoint yields layer-0 gradients.
fn backprop_pass<S: Real>(
    graphs: &BundleGraphs<S>,
    cfg: &TrainConfig,
    perturb: &PassPerturbation<S>,
    g: &ViewGrads<S>,
    out: &mut EmbeddingTable<S>,
) -> Result<()> {
    let prop = perturb.graphs.as_ref().unwrap_or(&graphs.prop);
    let one = S::one();
    if g.active[view_index(View::Ub)] {
        let (gu, gb) = backprop_pooled(
            &prop.ub,
            &g.user[0],
            &g.bundle[0],
            cfg.hops,
            cfg.divisor,
            &perturb.ub,
        )?;
        out.users.add_scaled(&gu, one);
        out.bundles.add_scaled(&gb, one);
    }
    if g.active[view_index(View::Ui)] {
        let g_items = graphs.bundle_lift.adjoint(&g.bundle[1])?;
        let (gu, gi) = backprop_pooled(
            &prop.ui,
            &g.user[1],
            &g_items,
            cfg.hops,
            cfg.divisor,
            &perturb.ui,
        )?;
        out.users.add_scaled(&gu, one);
        out.items.add_scaled(&gi, one);
    }
    if g.active[view_index(View::Bi)] {
        let g_items = graphs.user_lift.adjoint(&g.user[2])?;
        let (gb, gi) = backprop_pooled(
            &prop.bi,
            &g.bundle[2],
            &g_items,
            cfg.hops,
            cfg.divisor,
            &perturb.bi,
        )?;
        out.bundles.add_scaled(&gb, one);
        out.items.add_scaled(&gi, one);
    }
    Ok(())
}

fn check_finite(value: f64, term: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{term} loss is not finite ({value})")))
    }
}

fn sorted_dedup(ids: impl Iterator<Item = u32>) -> Vec<u32> {
    let mut v: Vec<u32> = ids.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Runs one full step on a batch under frozen draws: loss breakdown, the
/// individual contrastive terms, and (optionally) the exact gradient of the
/// total with respect to every layer-0 embedding.
pub fn step<S: Real>(
    graphs: &BundleGraphs<S>,
    cfg: &TrainConfig,
    theta: &EmbeddingTable<S>,
    batch: &[TrainingTriple],
    draws: &StepDraws<S>,
    want_grads: bool,
) -> Result<StepOutput<S>> {
    if batch.is_empty() {
        return Err(Error::data("cannot run a step on an empty batch"));
    }
    let n = batch.len();
    let settings = cfg.view_settings();
    let lambda = cfg.lambda.restricted_to(cfg.views)?;
    let dim = cfg.dim;

    let clean = compute_views(theta, graphs, &settings, &PassPerturbation::clean())?;
    let mut clean_grads = ViewGrads::zeros(graphs.users, graphs.bundles, dim);

    // Ranking term over the clean pass. The gradient coefficient per triple
    // is d(-ln sigmoid(m))/dm = sigmoid(m) - 1, times the reduction factor.
    let reduction = match cfg.bpr_reduction {
        BprReduction::Mean => 1.0 / n as f64,
        BprReduction::Sum => 1.0,
    };
    let reduction_s = s::<S>(reduction);
    let mut bpr_sum = S::zero();
    match cfg.scoring {
        ScoringMode::Fused => {
            let fused = fuse(&clean, &lambda);
            let mut g_users = want_grads.then(|| EmbeddingBlock::zeros(graphs.users, dim));
            let mut g_bundles = want_grads.then(|| EmbeddingBlock::zeros(graphs.bundles, dim));
            for t in batch {
                let (u, p, ng) = (t.user as usize, t.pos as usize, t.neg as usize);
                let margin = fused.users.dot_rows(u, &fused.bundles, p)
                    - fused.users.dot_rows(u, &fused.bundles, ng);
                bpr_sum += neg_log_sigmoid(margin);
                if let (Some(gu), Some(gb)) = (g_users.as_mut(), g_bundles.as_mut()) {
                    let coeff = reduction_s * (sigmoid(margin) - S::one());
                    let (urow, prow, nrow) =
                        (fused.users.row(u), fused.bundles.row(p), fused.bundles.row(ng));
                    let gu_row = gu.row_mut(u);
                    for k in 0..dim {
                        gu_row[k] += coeff * (prow[k] - nrow[k]);
                    }
                    let gp = gb.row_mut(p);
                    for k in 0..dim {
                        gp[k] += coeff * urow[k];
                    }
                    let gn = gb.row_mut(ng);
                    for k in 0..dim {
                        gn[k] -= coeff * urow[k];
                    }
                }
            }
            if let (Some(gu), Some(gb)) = (&g_users, &g_bundles) {
                clean_grads.add_fused(gu, gb, &lambda, cfg);
            }
        }
        ScoringMode::PerViewSum => {
            let enabled: Vec<View> =
                ALL_VIEWS.into_iter().filter(|v| v.enabled_in(cfg.views)).collect();
            for t in batch {
                let (u, p, ng) = (t.user as usize, t.pos as usize, t.neg as usize);
                let mut margin = S::zero();
                for &v in &enabled {
                    margin += clean.user_view(v).dot_rows(u, clean.bundle_view(v), p);
                    margin -= clean.user_view(v).dot_rows(u, clean.bundle_view(v), ng);
                }
                bpr_sum += neg_log_sigmoid(margin);
                if want_grads {
                    let coeff = reduction_s * (sigmoid(margin) - S::one());
                    for &v in &enabled {
                        let urow = clean.user_view(v).row(u);
                        let prow = clean.bundle_view(v).row(p);
                        let nrow = clean.bundle_view(v).row(ng);
                        let gu = clean_grads.user_mut(v).row_mut(u);
                        for k in 0..dim {
                            gu[k] += coeff * (prow[k] - nrow[k]);
                        }
                        let gp = clean_grads.bundle_mut(v).row_mut(p);
                        for k in 0..dim {
                            gp[k] += coeff * urow[k];
                        }
                        let gn = clean_grads.bundle_mut(v).row_mut(ng);
                        for k in 0..dim {
                            gn[k] -= coeff * urow[k];
                        }
                        clean_grads.mark(v);
                    }
                }
            }
        }
    }
    let bpr = to_f64(bpr_sum) * reduction;
    check_finite(bpr, "ranking")?;

    // Contrastive terms over two perturbed passes.
    type PassGrads<S> = (ViewGrads<S>, ViewGrads<S>, PassPerturbation<S>, PassPerturbation<S>);
    let mut terms: Vec<ContrastTerm> = Vec::new();
    let mut contrast_user = 0.0;
    let mut contrast_bundle = 0.0;
    let mut pass_grads: Option<PassGrads<S>> = None;
    if cfg.contrast_mode != ContrastMode::Off {
        let v1 = compute_views(theta, graphs, &settings, &draws.pass1)?;
        let v2 = compute_views(theta, graphs, &settings, &draws.pass2)?;
        let user_ids = sorted_dedup(batch.iter().map(|t| t.user));
        let bundle_ids = sorted_dedup(batch.iter().map(|t| t.pos));
        let mut g1 = ViewGrads::zeros(graphs.users, graphs.bundles, dim);
        let mut g2 = ViewGrads::zeros(graphs.users, graphs.bundles, dim);

        // d total / d term = beta1 / (2 * terms per side).
        match cfg.contrast_mode {
            ContrastMode::FusedSelf => {
                let f1 = fuse(&v1, &lambda);
                let f2 = fuse(&v2, &lambda);
                let weight = cfg.beta1 / 2.0;
                let mut gf1_u = EmbeddingBlock::zeros(graphs.users, dim);
                let mut gf2_u = EmbeddingBlock::zeros(graphs.users, dim);
                let mut gf1_b = EmbeddingBlock::zeros(graphs.bundles, dim);
                let mut gf2_b = EmbeddingBlock::zeros(graphs.bundles, dim);
                let run = |anchors: &EmbeddingBlock<S>,
                               others: &EmbeddingBlock<S>,
                               ids: &[u32],
                               ga: &mut EmbeddingBlock<S>,
                               go: &mut EmbeddingBlock<S>|
                 -> (f64, usize) {
                    if want_grads && weight != 0.0 {
                        let r: InfoNceGrad<S> = info_nce_with_grad(anchors, others, ids, cfg.tau);
                        scatter_rows(ga, ids, &r.grad_anchors, s(weight));
                        scatter_rows(go, ids, &r.grad_others, s(weight));
                        (to_f64(r.value), r.zero_norm_pairs)
                    } else {
                        let r = info_nce(anchors, others, ids, cfg.tau);
                        (to_f64(r.value), r.zero_norm_pairs)
                    }
                };
                let (vu, zu) = run(&f1.users, &f2.users, &user_ids, &mut gf1_u, &mut gf2_u);
                let (vb, zb) = run(&f1.bundles, &f2.bundles, &bundle_ids, &mut gf1_b, &mut gf2_b);
                contrast_user = vu;
                contrast_bundle = vb;
                terms.push(ContrastTerm {
                    label: "user".into(),
                    user_side: true,
                    value: vu,
                    zero_norm_pairs: zu,
                });
                terms.push(ContrastTerm {
                    label: "bundle".into(),
                    user_side: false,
                    value: vb,
                    zero_norm_pairs: zb,
                });
                if want_grads {
                    g1.add_fused(&gf1_u, &gf1_b, &lambda, cfg);
                    g2.add_fused(&gf2_u, &gf2_b, &lambda, cfg);
                }
            }
            ContrastMode::PairwiseCross => {
                let enabled: Vec<View> =
                    ALL_VIEWS.into_iter().filter(|v| v.enabled_in(cfg.views)).collect();
                let mut pairs = Vec::new();
                for i in 0..enabled.len() {
                    for j in i + 1..enabled.len() {
                        pairs.push((enabled[i], enabled[j]));
                    }
                }
                let per_side = pairs.len().max(1) as f64;
                let weight = cfg.beta1 / (2.0 * per_side);
                let mut user_sum = 0.0;
                let mut bundle_sum = 0.0;
                for &(x, y) in &pairs {
                    for user_side in [true, false] {
                        let (b1, b2, ids) = if user_side {
                            (v1.user_view(x), v2.user_view(y), &user_ids)
                        } else {
                            (v1.bundle_view(x), v2.bundle_view(y), &bundle_ids)
                        };
                        let (value, zeros) = if want_grads && weight != 0.0 {
                            let r = info_nce_with_grad(b1, b2, ids, cfg.tau);
                            let t1 = if user_side { g1.user_mut(x) } else { g1.bundle_mut(x) };
                            scatter_rows(t1, ids, &r.grad_anchors, s(weight));
                            let t2 = if user_side { g2.user_mut(y) } else { g2.bundle_mut(y) };
                            scatter_rows(t2, ids, &r.grad_others, s(weight));
                            g1.mark(x);
                            g2.mark(y);
                            (to_f64(r.value), r.zero_norm_pairs)
                        } else {
                            let r = info_nce(b1, b2, ids, cfg.tau);
                            (to_f64(r.value), r.zero_norm_pairs)
                        };
                        let side = if user_side { "user" } else { "bundle" };
                        terms.push(ContrastTerm {
                            label: format!("{side} {}-{}", x.label(), y.label()),
                            user_side,
                            value,
                            zero_norm_pairs: zeros,
                        });
                        if user_side {
                            user_sum += value;
                        } else {
                            bundle_sum += value;
                        }
                    }
                }
                contrast_user = user_sum / per_side;
                contrast_bundle = bundle_sum / per_side;
            }
            ContrastMode::Off => unreachable!(),
        }
        check_finite(contrast_user, "user contrast")?;
        check_finite(contrast_bundle, "bundle contrast")?;
        if want_grads {
            pass_grads = Some((g1, g2, draws.pass1.clone(), draws.pass2.clone()));
        }
    }

    // L2 over touched layer-0 rows, occurrence-counted, over the batch size.
    let touched_users: Vec<u32> = batch.iter().map(|t| t.user).collect();
    let touched_bundles: Vec<u32> =
        batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
    let reg = to_f64(l2_reg(theta, &touched_users, &touched_bundles, n));
    check_finite(reg, "regularization")?;

    let total = bpr + cfg.beta1 * (contrast_user + contrast_bundle) / 2.0 + cfg.beta2 * reg;
    check_finite(total, "total")?;
    let loss = LossBreakdown { bpr, contrast_user, contrast_bundle, reg, total };
    let zero_norm_pairs = terms.iter().map(|t| t.zero_norm_pairs).sum();

    let grads = if want_grads {
        let mut out = theta.zeros_like();
        backprop_pass(graphs, cfg, &PassPerturbation::clean(), &clean_grads, &mut out)?;
        if let Some((g1, g2, p1, p2)) = &pass_grads {
            backprop_pass(graphs, cfg, p1, g1, &mut out)?;
            backprop_pass(graphs, cfg, p2, g2, &mut out)?;
        }
        // L2 gradient goes straight to layer 0: 2 * beta2 / n per occurrence.
        let l2_coeff = s::<S>(2.0 * cfg.beta2 / n as f64);
        for &u in &touched_users {
            let theta_row = theta.users.row(u as usize);
            let g_row = out.users.row_mut(u as usize);
            for k in 0..dim {
                g_row[k] += l2_coeff * theta_row[k];
            }
        }
        for &b in &touched_bundles {
            let theta_row = theta.bundles.row(b as usize);
            let g_row = out.bundles.row_mut(b as usize);
            for k in 0..dim {
                g_row[k] += l2_coeff * theta_row[k];
            }
        }
        if !out.is_finite() {
            return Err(Error::numeric("gradient is not finite"));
        }
        Some(out)
    } else {
        None
    };

    Ok(StepOutput { loss, contrast_terms: terms, zero_norm_pairs, grads })
}

/// Convenience wrapper: samples fresh draws from `rng`, then runs the step
/// and returns the gradient table.
pub fn compute_gradients<S: Real>(
    graphs: &BundleGraphs<S>,
    cfg: &TrainConfig,
    theta: &EmbeddingTable<S>,
    batch: &[TrainingTriple],
    rng: &mut impl Rng,
) -> Result<(StepOutput<S>, EmbeddingTable<S>)> {
    let draws = sample_step_draws(graphs, cfg, rng);
    let mut out = step(graphs, cfg, theta, batch, &draws, true)?;
    let grads = out.grads.take().expect("gradients were requested");
    Ok((out, grads))
}

/// InfoNCE over per-view representations for every unordered pair of
/// enabled views, users and bundles separately. Returns the labeled terms
/// and their mean.
pub fn pairwise_cross_contrast<S: Real>(
    v1: &ViewRepresentations<S>,
    v2: &ViewRepresentations<S>,
    user_ids: &[u32],
    bundle_ids: &[u32],
    tau: f64,
    views: crate::views::ViewMask,
) -> (Vec<ContrastTerm>, f64) {
    let enabled: Vec<View> = ALL_VIEWS.into_iter().filter(|v| v.enabled_in(views)).collect();
    let mut terms = Vec::new();
    for i in 0..enabled.len() {
        for j in i + 1..enabled.len() {
            let (x, y) = (enabled[i], enabled[j]);
            for user_side in [true, false] {
                let (a, b, ids) = if user_side {
                    (v1.user_view(x), v2.user_view(y), user_ids)
                } else {
                    (v1.bundle_view(x), v2.bundle_view(y), bundle_ids)
                };
                let r = info_nce(a, b, ids, tau);
                let side = if user_side { "user" } else { "bundle" };
                terms.push(ContrastTerm {
                    label: format!("{side} {}-{}", x.label(), y.label()),
                    user_side,
                    value: to_f64(r.value),
                    zero_norm_pairs: r.zero_norm_pairs,
                });
            }
        }
    }
    let mean = if terms.is_empty() {
        0.0
    } else {
        terms.iter().map(|t| t.value).sum::<f64>() / terms.len() as f64
    };
    (terms, mean)
}

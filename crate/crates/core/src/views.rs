//! Per-view representation assembly.
//!
//! Three views share one set of layer-0 embedding tables. The user-bundle
//! view propagates users against bundles directly; the user-item view
//! propagates users against items and lifts bundles as the mean of their
//! items; the bundle-item view propagates bundles against items and lifts
//! users as the mean of their interacted items. Lifting always uses the
//! full interaction matrices, augmented graphs only ever affect propagation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{
    layer_pool, normalize, propagate_perturbed, AggregateInto, EmbeddingBlock, MeanAggregator,
    NormalizedBipartite, PoolDivisor,
};
use crate::num::{s, Real};
use crate::rng::{stream_rng, Stream};

/// Trainable layer-0 embeddings for users, bundles, and items.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    pub users: EmbeddingBlock<S>,
    pub bundles: EmbeddingBlock<S>,
    pub items: EmbeddingBlock<S>,
}

impl<S: Real> EmbeddingTable<S> {
    pub fn zeros(users: usize, bundles: usize, items: usize, dim: usize) -> Self {
        Self {
            users: EmbeddingBlock::zeros(users, dim),
            bundles: EmbeddingBlock::zeros(bundles, dim),
            items: EmbeddingBlock::zeros(items, dim),
        }
    }

    /// Xavier-uniform init, bound `sqrt(6 / (fan_in + fan_out))` with both
    /// fans equal to `dim`. Draws come from the init stream of `seed`, in
    /// user, bundle, item order.
    pub fn xavier(users: usize, bundles: usize, items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Init);
        let bound = (6.0 / (dim + dim) as f64).sqrt();
        let mut fill = |count: usize| {
            let data = (0..count * dim)
                .map(|_| s(rng.gen_range(-bound..bound)))
                .collect();
            EmbeddingBlock::from_vec(count, dim, data)
        };
        Self { users: fill(users), bundles: fill(bundles), items: fill(items) }
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.users.count(),
            self.bundles.count(),
            self.items.count(),
            self.dim(),
        )
    }

    pub fn scale(&mut self, c: S) {
        self.users.scale(c);
        self.bundles.scale(c);
        self.items.scale(c);
    }

    pub fn add_scaled(&mut self, other: &Self, c: S) {
        self.users.add_scaled(&other.users, c);
        self.bundles.add_scaled(&other.bundles, c);
        self.items.add_scaled(&other.items, c);
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.bundles.is_finite() && self.items.is_finite()
    }

    pub fn blocks(&self) -> [&EmbeddingBlock<S>; 3] {
        [&self.users, &self.bundles, &self.items]
    }
}

/// Writes `user_count bundle_count item_count dim seed` followed by one row
/// of decimal floats per entity, users first, then bundles, then items.
/// Float formatting is shortest-round-trip, so writes are byte-stable.
pub fn write_checkpoint<S: Real>(
    table: &EmbeddingTable<S>,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {} {}",
        table.users.count(),
        table.bundles.count(),
        table.items.count(),
        table.dim(),
        seed
    );
    for block in table.blocks() {
        for i in 0..block.count() {
            let row = block.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
    }
    fs::write(path.as_ref(), out)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.as_ref().display())))
}

pub fn read_checkpoint<S: Real>(path: impl AsRef<Path>) -> Result<(EmbeddingTable<S>, u64)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty checkpoint", path.display())))?;
    let head: Vec<u64> = header
        .split_whitespace()
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::data(format!("{}: malformed header {header:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if head.len() != 5 {
        return Err(Error::data(format!(
            "{}: header must hold user/bundle/item counts, dim, seed",
            path.display()
        )));
    }
    let (users, bundles, items, dim, seed) =
        (head[0] as usize, head[1] as usize, head[2] as usize, head[3] as usize, head[4]);
    let mut read_block = |count: usize, what: &str| -> Result<EmbeddingBlock<S>> {
        let mut data = Vec::with_capacity(count * dim);
        for i in 0..count {
            let line = lines.next().ok_or_else(|| {
                Error::data(format!("{}: truncated at {what} row {i}", path.display()))
            })?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v = tok.parse::<S>().map_err(|_| {
                    Error::data(format!("{}: bad float {tok:?} in {what} row {i}", path.display()))
                })?;
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(Error::data(format!(
                    "{}: {what} row {i} has {} values, expected {dim}",
                    path.display(),
                    data.len() - before
                )));
            }
        }
        Ok(EmbeddingBlock::from_vec(count, dim, data))
    };
    let table = EmbeddingTable {
        users: read_block(users, "user")?,
        bundles: read_block(bundles, "bundle")?,
        items: read_block(items, "item")?,
    };
    Ok((table, seed))
}

/// Which views participate in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewMask {
    pub ub: bool,
    pub ui: bool,
    pub bi: bool,
}

impl ViewMask {
    pub const ALL: ViewMask = ViewMask { ub: true, ui: true, bi: true };

    pub fn enabled_count(&self) -> usize {
        self.ub as usize + self.ui as usize + self.bi as usize
    }
}

impl Default for ViewMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// The three propagation graphs of one forward pass.
#[derive(Debug, Clone)]
pub struct PropagationGraphs<S> {
    pub ub: NormalizedBipartite<S>,
    pub ui: NormalizedBipartite<S>,
    pub bi: NormalizedBipartite<S>,
}

/// Everything structural a forward pass needs: normalized propagation graphs
/// (user-bundle from the training split only) plus the two lifting operators
/// built from the full interaction matrices.
#[derive(Debug, Clone)]
pub struct BundleGraphs<S> {
    pub prop: PropagationGraphs<S>,
    /// Items to bundles over the full bundle-item matrix.
    pub bundle_lift: MeanAggregator<S>,
    /// Items to users over the full user-item matrix.
    pub user_lift: MeanAggregator<S>,
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
}

impl<S: Real> BundleGraphs<S> {
    pub fn from_dataset(d: &Dataset) -> Self {
        Self {
            prop: PropagationGraphs {
                ub: normalize(&d.train_ub),
                ui: normalize(&d.ui),
                bi: normalize(&d.bi),
            },
            bundle_lift: MeanAggregator::new(&d.bi, AggregateInto::Rows),
            user_lift: MeanAggregator::new(&d.ui, AggregateInto::Rows),
            users: d.users(),
            bundles: d.bundles(),
            items: d.items(),
        }
    }
}

/// Pooled per-view representations for one forward pass. Disabled views
/// hold zero blocks.
#[derive(Debug, Clone)]
pub struct ViewRepresentations<S> {
    pub user_ub: EmbeddingBlock<S>,
    pub bundle_ub: EmbeddingBlock<S>,
    pub user_ui: EmbeddingBlock<S>,
    pub bundle_ui: EmbeddingBlock<S>,
    pub item_ui: EmbeddingBlock<S>,
    pub user_bi: EmbeddingBlock<S>,
    pub bundle_bi: EmbeddingBlock<S>,
    pub item_bi: EmbeddingBlock<S>,
}

impl<S: Real> ViewRepresentations<S> {
    pub fn zeros(users: usize, bundles: usize, items: usize, dim: usize) -> Self {
        Self {
            user_ub: EmbeddingBlock::zeros(users, dim),
            bundle_ub: EmbeddingBlock::zeros(bundles, dim),
            user_ui: EmbeddingBlock::zeros(users, dim),
            bundle_ui: EmbeddingBlock::zeros(bundles, dim),
            item_ui: EmbeddingBlock::zeros(items, dim),
            user_bi: EmbeddingBlock::zeros(users, dim),
            bundle_bi: EmbeddingBlock::zeros(bundles, dim),
            item_bi: EmbeddingBlock::zeros(items, dim),
        }
    }

    pub fn user_view(&self, view: View) -> &EmbeddingBlock<S> {
        match view {
            View::Ub => &self.user_ub,
            View::Ui => &self.user_ui,
            View::Bi => &self.user_bi,
        }
    }

    pub fn bundle_view(&self, view: View) -> &EmbeddingBlock<S> {
        match view {
            View::Ub => &self.bundle_ub,
            View::Ui => &self.bundle_ui,
            View::Bi => &self.bundle_bi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum View {
    Ub,
    Ui,
    Bi,
}

pub const ALL_VIEWS: [View; 3] = [View::Ub, View::Ui, View::Bi];

impl View {
    pub fn enabled_in(self, mask: ViewMask) -> bool {
        match self {
            View::Ub => mask.ub,
            View::Ui => mask.ui,
            View::Bi => mask.bi,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            View::Ub => "ub",
            View::Ui => "ui",
            View::Bi => "bi",
        }
    }
}

/// Structural knobs of the representation pipeline.
#[derive(Debug, Clone, Copy)]
pub struct ViewSettings {
    pub hops: usize,
    pub divisor: PoolDivisor,
    pub views: ViewMask,
}

/// User-bundle view: pooled propagation over the (train-split) UB graph.
pub fn compute_ub_view<S: Real>(
    theta: &EmbeddingTable<S>,
    g: &NormalizedBipartite<S>,
    hops: usize,
    divisor: PoolDivisor,
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    compute_ub_view_perturbed(theta, g, hops, divisor, &[])
}

pub fn compute_ub_view_perturbed<S: Real>(
    theta: &EmbeddingTable<S>,
    g: &NormalizedBipartite<S>,
    hops: usize,
    divisor: PoolDivisor,
    perturbs: &[crate::graph::LayerPerturb<S>],
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    let (lefts, rights) = propagate_perturbed(g, &theta.users, &theta.bundles, hops, perturbs)?;
    Ok((layer_pool(&lefts, divisor)?, layer_pool(&rights, divisor)?))
}

/// User-item view: pooled propagation over UI, bundles lifted as the mean of
/// their items over the full BI matrix.
pub fn compute_ui_view<S: Real>(
    theta: &EmbeddingTable<S>,
    g: &NormalizedBipartite<S>,
    bundle_lift: &MeanAggregator<S>,
    hops: usize,
    divisor: PoolDivisor,
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    compute_ui_view_perturbed(theta, g, bundle_lift, hops, divisor, &[])
}

pub fn compute_ui_view_perturbed<S: Real>(
    theta: &EmbeddingTable<S>,
    g: &NormalizedBipartite<S>,
    bundle_lift: &MeanAggregator<S>,
    hops: usize,
    divisor: PoolDivisor,
    perturbs: &[crate::graph::LayerPerturb<S>],
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    let (lefts, rights) = propagate_perturbed(g, &theta.users, &theta.items, hops, perturbs)?;
    let user_ui = layer_pool(&lefts, divisor)?;
    let item_ui = layer_pool(&rights, divisor)?;
    let bundle_ui = bundle_lift.apply(&item_ui)?;
    Ok((user_ui, item_ui, bundle_ui))
}

/// Bundle-item view: pooled propagation over BI, users lifted as the mean of
/// their interacted items over the full UI matrix.
pub fn compute_bi_view<S: Real>(
    theta: &EmbeddingTable<S>,
    g: &NormalizedBipartite<S>,
    user_lift: &MeanAggregator<S>,
    hops: usize,
    divisor: PoolDivisor,
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    compute_bi_view_perturbed(theta, g, user_lift, hops, divisor, &[])
}

pub fn compute_bi_view_perturbed<S: Real>(
    theta: &EmbeddingTable<S>,
    g: &NormalizedBipartite<S>,
    user_lift: &MeanAggregator<S>,
    hops: usize,
    divisor: PoolDivisor,
    perturbs: &[crate::graph::LayerPerturb<S>],
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    let (lefts, rights) = propagate_perturbed(g, &theta.bundles, &theta.items, hops, perturbs)?;
    let bundle_bi = layer_pool(&lefts, divisor)?;
    let item_bi = layer_pool(&rights, divisor)?;
    let user_bi = user_lift.apply(&item_bi)?;
    Ok((bundle_bi, item_bi, user_bi))
}

/// One forward pass over all enabled views, optionally under a perturbation.
pub fn compute_views<S: Real>(
    theta: &EmbeddingTable<S>,
    graphs: &BundleGraphs<S>,
    settings: &ViewSettings,
    perturb: &crate::augment::PassPerturbation<S>,
) -> Result<ViewRepresentations<S>> {
    let mut reps =
        ViewRepresentations::zeros(graphs.users, graphs.bundles, graphs.items, theta.dim());
    let prop = perturb.graphs.as_ref().unwrap_or(&graphs.prop);
    if settings.views.ub {
        let (u, b) = compute_ub_view_perturbed(
            theta,
            &prop.ub,
            settings.hops,
            settings.divisor,
            &perturb.ub,
        )?;
        reps.user_ub = u;
        reps.bundle_ub = b;
    }
    if settings.views.ui {
        let (u, i, b) = compute_ui_view_perturbed(
            theta,
            &prop.ui,
            &graphs.bundle_lift,
            settings.hops,
            settings.divisor,
            &perturb.ui,
        )?;
        reps.user_ui = u;
        reps.item_ui = i;
        reps.bundle_ui = b;
    }
    if settings.views.bi {
        let (b, i, u) = compute_bi_view_perturbed(
            theta,
            &prop.bi,
            &graphs.user_lift,
            settings.hops,
            settings.divisor,
            &perturb.bi,
        )?;
        reps.bundle_bi = b;
        reps.item_bi = i;
        reps.user_bi = u;
    }
    Ok(reps)
}

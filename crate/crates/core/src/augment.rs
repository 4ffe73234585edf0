//! Stochastic perturbations for self-supervised contrast.
//!
//! Three kinds: edge dropout rebuilds each propagation graph from a
//! Bernoulli-thinned edge set (weights renormalized from surviving degrees),
//! message dropout masks propagated layer outputs with inverted-dropout
//! scaling, and noise adds a random-direction vector of fixed L2 norm to
//! each propagated row. Perturbations apply to hop outputs only, never to
//! the layer-0 tables, and never to the lifting operators.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{EmbeddingBlock, LayerPerturb, NormalizedBipartite};
use crate::num::{s, Real};
use crate::views::{PropagationGraphs, ViewMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    None,
    EdgeDrop,
    MessageDrop,
    Noise,
}

/// When augmentation draws are refreshed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResamplePolicy {
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    pub edge_drop_rate: f64,
    pub message_drop_rate: f64,
    pub noise_eps: f64,
    pub resample: ResamplePolicy,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            kind: AugKind::Noise,
            edge_drop_rate: 0.2,
            message_drop_rate: 0.2,
            noise_eps: 0.1,
            resample: ResamplePolicy::PerBatch,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.edge_drop_rate) {
            return Err(Error::config(format!(
                "edge_drop_rate {} outside [0, 1)",
                self.edge_drop_rate
            )));
        }
        if !(0.0..1.0).contains(&self.message_drop_rate) {
            return Err(Error::config(format!(
                "message_drop_rate {} outside [0, 1)",
                self.message_drop_rate
            )));
        }
        if self.kind == AugKind::Noise && self.noise_eps <= 0.0 {
            return Err(Error::config(format!(
                "noise_eps {} must be positive",
                self.noise_eps
            )));
        }
        Ok(())
    }
}

/// Independently keeps each edge with probability `1 - rate`, then rebuilds
/// the normalization from the surviving degrees.
pub fn drop_edges<S: Real>(
    g: &NormalizedBipartite<S>,
    rate: f64,
    rng: &mut impl Rng,
) -> NormalizedBipartite<S> {
    let survivors: Vec<(u32, u32)> = g
        .edges()
        .filter(|_| rng.gen::<f64>() < 1.0 - rate)
        .map(|(r, c, _)| (r, c))
        .collect();
    NormalizedBipartite::from_edges(g.rows(), g.cols(), &survivors)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_multipliers<S: Real>(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<S> {
    let keep = s::<S>(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
        .collect()
}

/// Zeroes each entry with probability `rate` and scales survivors by
/// `1/(1-rate)`, keeping the expectation unchanged.
pub fn message_dropout<S: Real>(
    block: &EmbeddingBlock<S>,
    rate: f64,
    rng: &mut impl Rng,
) -> EmbeddingBlock<S> {
    let mult = dropout_multipliers::<S>(block.data().len(), rate, rng);
    let mut out = block.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mult) {
        *v *= m;
    }
    out
}

/// Rows of independent random directions, each rescaled to L2 norm `eps`.
pub fn noise_rows<S: Real>(count: usize, dim: usize, eps: f64, rng: &mut impl Rng) -> Vec<S> {
    let mut out = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let start = out.len();
        let mut norm_sq = 0.0f64;
        for _ in 0..dim {
            let v: f64 = rng.sample(StandardNormal);
            norm_sq += v * v;
            out.push(v);
        }
        let row = &mut out[start..];
        if norm_sq == 0.0 {
            // Vanishingly unlikely, but the contract promises an exact norm.
            row[0] = eps;
        } else {
            let scale = eps / norm_sq.sqrt();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    out.into_iter().map(s).collect()
}

/// Adds an independent random-direction vector of L2 norm `eps` to each row.
pub fn add_noise<S: Real>(
    block: &EmbeddingBlock<S>,
    eps: f64,
    rng: &mut impl Rng,
) -> EmbeddingBlock<S> {
    let noise = noise_rows::<S>(block.count(), block.dim(), eps, rng);
    let mut out = block.clone();
    for (v, n) in out.data_mut().iter_mut().zip(noise) {
        *v += n;
    }
    out
}

/// All random draws of one forward pass, frozen so the same pass can be
/// replayed for loss, gradient, and verification purposes.
#[derive(Debug, Clone)]
pub struct PassPerturbation<S> {
    /// Distinguishes independent passes of the same step; 0 for clean passes.
    pub stamp: u64,
    /// Replacement propagation graphs (edge dropout only).
    pub graphs: Option<PropagationGraphs<S>>,
    /// Per-hop elementwise effects per view; empty when unused.
    pub ub: Vec<LayerPerturb<S>>,
    pub ui: Vec<LayerPerturb<S>>,
    pub bi: Vec<LayerPerturb<S>>,
}

impl<S: Real> PassPerturbation<S> {
    pub fn clean() -> Self {
        Self { stamp: 0, graphs: None, ub: Vec::new(), ui: Vec::new(), bi: Vec::new() }
    }
}

impl AugmentationSpec {
    /// Draws one pass worth of randomness. Graph sides follow the view
    /// layout: UB pairs users with bundles, UI users with items, BI bundles
    /// with items. Disabled views draw nothing.
    pub fn sample_pass<S: Real>(
        &self,
        base: &PropagationGraphs<S>,
        dims: (usize, usize, usize, usize),
        hops: usize,
        views: ViewMask,
        rng: &mut impl Rng,
    ) -> PassPerturbation<S> {
        let (users, bundles, items, dim) = dims;
        if self.kind == AugKind::None {
            return PassPerturbation::clean();
        }
        let stamp = rng.gen::<u64>();
        let mut pass = PassPerturbation { stamp, ..PassPerturbation::clean() };
        match self.kind {
            AugKind::None => unreachable!(),
            AugKind::EdgeDrop => {
                let mut drop = |g: &NormalizedBipartite<S>, on: bool| {
                    if on {
                        drop_edges(g, self.edge_drop_rate, rng)
                    } else {
                        g.clone()
                    }
                };
                pass.graphs = Some(PropagationGraphs {
                    ub: drop(&base.ub, views.ub),
                    ui: drop(&base.ui, views.ui),
                    bi: drop(&base.bi, views.bi),
                });
            }
            AugKind::MessageDrop => {
                let mut perturb_view = |on: bool, left: usize, right: usize| {
                    if !on {
                        return Vec::new();
                    }
                    (0..hops)
                        .map(|_| LayerPerturb::Scale {
                            left: dropout_multipliers::<S>(left * dim, self.message_drop_rate, rng),
                            right: dropout_multipliers::<S>(right * dim, self.message_drop_rate, rng),
                        })
                        .collect()
                };
                pass.ub = perturb_view(views.ub, users, bundles);
                pass.ui = perturb_view(views.ui, users, items);
                pass.bi = perturb_view(views.bi, bundles, items);
            }
            AugKind::Noise => {
                let mut perturb_view = |on: bool, left: usize, right: usize| {
                    if !on {
                        return Vec::new();
                    }
                    (0..hops)
                        .map(|_| LayerPerturb::Shift {
                            left: noise_rows::<S>(left, dim, self.noise_eps, rng),
                            right: noise_rows::<S>(right, dim, self.noise_eps, rng),
                        })
                        .collect()
                };
                pass.ub = perturb_view(views.ub, users, bundles);
                pass.ui = perturb_view(views.ui, users, items);
                pass.bi = perturb_view(views.bi, bundles, items);
            }
        }
        pass
    }
}

//! Convex fusion of per-view representations and inner-product scoring.
//!
//! Fused entity representations are the coefficient-weighted sum of their
//! per-view representations; a user-bundle score is the plain dot product.
//! The score splits exactly into an ego part (same-view products, squared
//! coefficients) and a cross part (mixed-view products, paired coefficients).

use crate::error::{Error, Result};
use crate::graph::EmbeddingBlock;
use crate::num::{s, Real};
use crate::views::{View, ViewMask, ViewRepresentations, ALL_VIEWS};

pub const LAMBDA_SUM_TOL: f64 = 1e-9;

/// Per-view fusion coefficients, validated to the unit simplex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionCoefficients {
    pub ub: f64,
    pub ui: f64,
    pub bi: f64,
}

impl Default for FusionCoefficients {
    fn default() -> Self {
        Self { ub: 1.0 / 3.0, ui: 1.0 / 3.0, bi: 1.0 / 3.0 }
    }
}

impl FusionCoefficients {
    pub fn new(ub: f64, ui: f64, bi: f64) -> Result<Self> {
        let c = Self { ub, ui, bi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.ub), ("lambda2", self.ui), ("lambda3", self.bi)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        let sum = self.ub + self.ui + self.bi;
        if (sum - 1.0).abs() > LAMBDA_SUM_TOL {
            return Err(Error::config(format!(
                "fusion coefficients sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn get(&self, view: View) -> f64 {
        match view {
            View::Ub => self.ub,
            View::Ui => self.ui,
            View::Bi => self.bi,
        }
    }

    /// Zeroes coefficients of disabled views and renormalizes the rest.
    pub fn restricted_to(&self, mask: ViewMask) -> Result<Self> {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        let ub = pick(mask.ub, self.ub);
        let ui = pick(mask.ui, self.ui);
        let bi = pick(mask.bi, self.bi);
        let sum = ub + ui + bi;
        if sum <= 0.0 {
            return Err(Error::config(
                "every enabled view has a zero fusion coefficient",
            ));
        }
        Ok(Self { ub: ub / sum, ui: ui / sum, bi: bi / sum })
    }
}

/// How a user-bundle score is formed from the views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    /// Dot product of coefficient-fused representations. Default.
    Fused,
    /// Sum of per-view dot products with unit weights (late-fusion ablation).
    PerViewSum,
}

/// Coefficient-fused user and bundle representations.
#[derive(Debug, Clone)]
pub struct FusedRepresentations<S> {
    pub users: EmbeddingBlock<S>,
    pub bundles: EmbeddingBlock<S>,
}

/// Fuses per-view representations with the given coefficients.
pub fn fuse<S: Real>(
    v: &ViewRepresentations<S>,
    lambda: &FusionCoefficients,
) -> FusedRepresentations<S> {
    let mut users = EmbeddingBlock::zeros(v.user_ub.count(), v.user_ub.dim());
    let mut bundles = EmbeddingBlock::zeros(v.bundle_ub.count(), v.bundle_ub.dim());
    for view in ALL_VIEWS {
        let c = s::<S>(lambda.get(view));
        users.add_scaled(v.user_view(view), c);
        bundles.add_scaled(v.bundle_view(view), c);
    }
    FusedRepresentations { users, bundles }
}

/// Preference score of user `u` for bundle `b`.
pub fn score<S: Real>(f: &FusedRepresentations<S>, u: usize, b: usize) -> S {
    f.users.dot_rows(u, &f.bundles, b)
}

/// A score split into same-view and mixed-view contributions.
#[derive(Debug, Clone, Copy)]
pub struct ScoreDecomposition<S> {
    /// Same-view products, weighted by squared coefficients.
    pub ego: S,
    /// Mixed-view products, weighted by coefficient pairs.
    pub cross: S,
    /// Independently computed via the fused route; equals `ego + cross`
    /// up to floating-point rounding.
    pub total: S,
}

/// Splits the score of `(u, b)` into ego and cross parts. `total` is
/// recomputed through the fused representations, so the decomposition
/// identity is a genuine two-route check.
pub fn decompose_score<S: Real>(
    v: &ViewRepresentations<S>,
    lambda: &FusionCoefficients,
    u: usize,
    b: usize,
) -> ScoreDecomposition<S> {
    let mut ego = S::zero();
    let mut cross = S::zero();
    for x in ALL_VIEWS {
        for y in ALL_VIEWS {
            let w = s::<S>(lambda.get(x) * lambda.get(y));
            let prod = v.user_view(x).dot_rows(u, v.bundle_view(y), b);
            if x == y {
                ego += w * prod;
            } else {
                cross += w * prod;
            }
        }
    }
    let dim = v.user_ub.dim();
    let mut fu = vec![S::zero(); dim];
    let mut fb = vec![S::zero(); dim];
    for view in ALL_VIEWS {
        let c = s::<S>(lambda.get(view));
        for (acc, &x) in fu.iter_mut().zip(v.user_view(view).row(u)) {
            *acc += c * x;
        }
        for (acc, &x) in fb.iter_mut().zip(v.bundle_view(view).row(b)) {
            *acc += c * x;
        }
    }
    let total = fu.iter().zip(&fb).map(|(&a, &b)| a * b).sum();
    ScoreDecomposition { ego, cross, total }
}

/// Per-view score sum used by the late-fusion ablation: unit coefficients,
/// same-view products only, restricted to enabled views.
pub fn per_view_sum_score<S: Real>(
    v: &ViewRepresentations<S>,
    views: ViewMask,
    u: usize,
    b: usize,
) -> S {
    ALL_VIEWS
        .iter()
        .filter(|view| view.enabled_in(views))
        .map(|&view| v.user_view(view).dot_rows(u, v.bundle_view(view), b))
        .sum()
}

//! Loss terms: pairwise ranking, in-batch contrastive, and L2, each with
//! the row gradients the backward pass needs.

use rayon::prelude::*;

use crate::graph::EmbeddingBlock;
use crate::num::{s, Real};
use crate::views::EmbeddingTable;

/// `-ln sigmoid(x)`, computed without overflow on either tail.
pub fn neg_log_sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Ranking loss over a batch: the SUM of `-ln sigmoid(pos - neg)`. Any mean
/// reduction is the caller's choice.
pub fn bpr_loss<S: Real>(scores_pos: &[S], scores_neg: &[S]) -> S {
    assert_eq!(scores_pos.len(), scores_neg.len(), "score lists must pair up");
    assert!(!scores_pos.is_empty(), "ranking loss needs at least one pair");
    scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(&p, &n)| neg_log_sigmoid(p - n))
        .sum()
}

/// One contrastive value plus the count of cosine pairs that fell back to 0
/// because a side had zero norm.
#[derive(Debug, Clone, Copy)]
pub struct InfoNce<S> {
    pub value: S,
    pub zero_norm_pairs: usize,
}

/// `InfoNce` plus gradients with respect to the anchor and contrast rows,
/// both `ids.len() x dim`, aligned with `ids`.
#[derive(Debug, Clone)]
pub struct InfoNceGrad<S> {
    pub value: S,
    pub zero_norm_pairs: usize,
    pub grad_anchors: EmbeddingBlock<S>,
    pub grad_others: EmbeddingBlock<S>,
}

/// Mean over anchors i of `-log softmax_j(cos(a_i, b_j)/tau)[j=i]`, with all
/// batch entries as in-batch negatives. Zero-norm rows contribute cosine 0.
pub fn info_nce<S: Real>(
    anchors: &EmbeddingBlock<S>,
    others: &EmbeddingBlock<S>,
    ids: &[u32],
    tau: f64,
) -> InfoNce<S> {
    let parts = nce_parts(anchors, others, ids, tau);
    InfoNce { value: parts.value, zero_norm_pairs: parts.zero_norm_pairs }
}

pub fn info_nce_with_grad<S: Real>(
    anchors: &EmbeddingBlock<S>,
    others: &EmbeddingBlock<S>,
    ids: &[u32],
    tau: f64,
) -> InfoNceGrad<S> {
    let n = ids.len();
    let dim = anchors.dim();
    let p = nce_parts(anchors, others, ids, tau);

    // d value / d cos_ij = (softmax_ij - delta_ij) / (n * tau).
    let inv = s::<S>(1.0 / (n as f64 * tau));
    let w: Vec<S> = p
        .probs
        .iter()
        .enumerate()
        .map(|(idx, &q)| {
            let delta = if idx / n == idx % n { S::one() } else { S::zero() };
            (q - delta) * inv
        })
        .collect();

    // Chain through cos(a, b) = a_hat . b_hat: the gradient in a is the
    // component of the partner direction orthogonal to a_hat, over |a|.
    let mut grad_anchors = EmbeddingBlock::zeros(n, dim);
    let mut grad_others = EmbeddingBlock::zeros(n, dim);
    for i in 0..n {
        if p.norm_a[i].is_zero() {
            continue;
        }
        let g = grad_anchors.row_mut(i);
        for j in 0..n {
            let wij = w[i * n + j];
            if wij.is_zero() {
                continue;
            }
            let b_hat = &p.hat_b[j * dim..(j + 1) * dim];
            for k in 0..dim {
                g[k] += wij * b_hat[k];
            }
        }
        let a_hat = &p.hat_a[i * dim..(i + 1) * dim];
        let radial: S = g.iter().zip(a_hat).map(|(&x, &y)| x * y).sum();
        for k in 0..dim {
            g[k] = (g[k] - radial * a_hat[k]) / p.norm_a[i];
        }
    }
    for j in 0..n {
        if p.norm_b[j].is_zero() {
            continue;
        }
        let g = grad_others.row_mut(j);
        for i in 0..n {
            let wij = w[i * n + j];
            if wij.is_zero() {
                continue;
            }
            let a_hat = &p.hat_a[i * dim..(i + 1) * dim];
            for k in 0..dim {
                g[k] += wij * a_hat[k];
            }
        }
        let b_hat = &p.hat_b[j * dim..(j + 1) * dim];
        let radial: S = g.iter().zip(b_hat).map(|(&x, &y)| x * y).sum();
        for k in 0..dim {
            g[k] = (g[k] - radial * b_hat[k]) / p.norm_b[j];
        }
    }
    InfoNceGrad {
        value: p.value,
        zero_norm_pairs: p.zero_norm_pairs,
        grad_anchors,
        grad_others,
    }
}

struct NceParts<S> {
    value: S,
    zero_norm_pairs: usize,
    /// Row-wise softmax of the cosine/tau matrix, n x n row-major.
    probs: Vec<S>,
    hat_a: Vec<S>,
    hat_b: Vec<S>,
    norm_a: Vec<S>,
    norm_b: Vec<S>,
}

fn nce_parts<S: Real>(
    anchors: &EmbeddingBlock<S>,
    others: &EmbeddingBlock<S>,
    ids: &[u32],
    tau: f64,
) -> NceParts<S> {
    assert!(!ids.is_empty(), "contrastive batch must be nonempty");
    assert!(tau > 0.0, "temperature must be positive");
    let n = ids.len();
    let dim = anchors.dim();
    assert_eq!(others.dim(), dim, "dimension mismatch");

    let normalize = |block: &EmbeddingBlock<S>| -> (Vec<S>, Vec<S>) {
        let mut hat = vec![S::zero(); n * dim];
        let mut norms = vec![S::zero(); n];
        for (slot, &id) in ids.iter().enumerate() {
            let row = block.row(id as usize);
            let norm = block.row_norm(id as usize);
            norms[slot] = norm;
            if !norm.is_zero() {
                for k in 0..dim {
                    hat[slot * dim + k] = row[k] / norm;
                }
            }
        }
        (hat, norms)
    };
    let (hat_a, norm_a) = normalize(anchors);
    let (hat_b, norm_b) = normalize(others);

    let zero_a = norm_a.iter().filter(|x| x.is_zero()).count();
    let zero_b = norm_b.iter().filter(|x| x.is_zero()).count();
    let zero_norm_pairs = zero_a * n + zero_b * n - zero_a * zero_b;

    // Zero-norm rows have all-zero hat rows, so their cosines come out 0
    // without a special case.
    let inv_tau = s::<S>(1.0 / tau);
    let (hat_a_ref, hat_b_ref): (&[S], &[S]) = (&hat_a, &hat_b);
    let logits: Vec<S> = (0..n)
        .into_par_iter()
        .flat_map_iter(move |i| {
            let a = &hat_a_ref[i * dim..(i + 1) * dim];
            (0..n).map(move |j| {
                let b = &hat_b_ref[j * dim..(j + 1) * dim];
                let cos: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
                cos * inv_tau
            })
        })
        .collect();

    let mut probs = vec![S::zero(); n * n];
    let mut value = S::zero();
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for j in 0..n {
            let e = (row[j] - max).exp();
            probs[i * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            probs[i * n + j] /= denom;
        }
        // -log softmax[i] = log(denom) + max - logit_ii.
        value += denom.ln() + max - row[i];
    }
    value /= s::<S>(n as f64);
    NceParts { value, zero_norm_pairs, probs, hat_a, hat_b, norm_a, norm_b }
}

/// Sum of squared layer-0 entries over the batch's touched rows, divided by
/// the batch size. Rows touched several times count several times.
pub fn l2_reg<S: Real>(
    theta: &EmbeddingTable<S>,
    touched_users: &[u32],
    touched_bundles: &[u32],
    batch_size: usize,
) -> S {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut acc = S::zero();
    for &u in touched_users {
        let norm = theta.users.row_norm(u as usize);
        acc += norm * norm;
    }
    for &b in touched_bundles {
        let norm = theta.bundles.row_norm(b as usize);
        acc += norm * norm;
    }
    acc / s::<S>(batch_size as f64)
}

//! Sparse bipartite propagation: symmetric-normalized message passing,
//! layer pooling, and neighborhood mean aggregation.
//!
//! Propagation alternates sides: new left rows are weighted sums of right
//! rows and vice versa, weight `1 / sqrt(deg_left * deg_right)` per edge.
//! No self-loops, no transforms, no nonlinearity. All operators are linear,
//! so each exposes its exact adjoint for the backward pass.
//!
//! Parallel reductions run per target row over a fixed neighbor order, so
//! results are bit-identical at any thread count.

use rayon::prelude::*;

use crate::dataset::InteractionMatrix;
use crate::error::{Error, Result};
use crate::num::{s, Real};

/// A dense `count x dim` matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock<S> {
    count: usize,
    dim: usize,
    data: Vec<S>,
}

impl<S: Real> EmbeddingBlock<S> {
    pub fn zeros(count: usize, dim: usize) -> Self {
        Self { count, dim, data: vec![S::zero(); count * dim] }
    }

    pub fn from_vec(count: usize, dim: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), count * dim, "block shape mismatch");
        Self { count, dim, data }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `self += c * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, c: S) {
        assert_eq!(self.data.len(), other.data.len(), "block shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: S) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn dot_rows(&self, i: usize, other: &Self, j: usize) -> S {
        debug_assert_eq!(self.dim, other.dim);
        self.row(i)
            .iter()
            .zip(other.row(j))
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn row_norm(&self, i: usize) -> S {
        self.dot_rows(i, self, i).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One orientation of a weighted bipartite operator in CSR form.
#[derive(Debug, Clone)]
struct Csr<S> {
    ptr: Vec<usize>,
    adj: Vec<u32>,
    w: Vec<S>,
}

impl<S: Real> Csr<S> {
    /// Builds target-major storage from `(target, source, weight)` triples.
    fn build(targets: usize, edges: impl Iterator<Item = (u32, u32, f64)>) -> Self {
        let mut buckets: Vec<Vec<(u32, S)>> = vec![Vec::new(); targets];
        for (t, src, w) in edges {
            buckets[t as usize].push((src, s(w)));
        }
        let mut ptr = Vec::with_capacity(targets + 1);
        let mut adj = Vec::new();
        let mut w = Vec::new();
        ptr.push(0);
        for mut bucket in buckets {
            bucket.sort_unstable_by_key(|&(src, _)| src);
            for (src, weight) in bucket {
                adj.push(src);
                w.push(weight);
            }
            ptr.push(adj.len());
        }
        Self { ptr, adj, w }
    }

    /// `out[t] = sum over stored edges of w * src[adj]`, parallel over targets.
    fn gather(&self, src: &EmbeddingBlock<S>, out: &mut EmbeddingBlock<S>) {
        let dim = src.dim();
        out.data
            .par_chunks_mut(dim)
            .enumerate()
            .for_each(|(t, row)| {
                row.fill(S::zero());
                for e in self.ptr[t]..self.ptr[t + 1] {
                    let sref = src.row(self.adj[e] as usize);
                    let w = self.w[e];
                    for (o, &v) in row.iter_mut().zip(sref) {
                        *o += w * v;
                    }
                }
            });
    }
}

/// A bipartite graph with symmetric degree normalization, stored in both
/// orientations so messages (and gradients) flow either way.
#[derive(Debug, Clone)]
pub struct NormalizedBipartite<S> {
    rows: usize,
    cols: usize,
    by_row: Csr<S>,
    by_col: Csr<S>,
}

impl<S: Real> NormalizedBipartite<S> {
    /// Normalizes an edge list: weight `1 / sqrt(deg_row * deg_col)` per edge.
    /// Weights are computed in `f64` before conversion to `S`.
    pub fn from_edges(rows: usize, cols: usize, edges: &[(u32, u32)]) -> Self {
        let mut row_deg = vec![0u32; rows];
        let mut col_deg = vec![0u32; cols];
        for &(r, c) in edges {
            row_deg[r as usize] += 1;
            col_deg[c as usize] += 1;
        }
        let weight = |r: u32, c: u32| {
            1.0 / ((row_deg[r as usize] as f64) * (col_deg[c as usize] as f64)).sqrt()
        };
        let by_row = Csr::build(rows, edges.iter().map(|&(r, c)| (r, c, weight(r, c))));
        let by_col = Csr::build(cols, edges.iter().map(|&(r, c)| (c, r, weight(r, c))));
        Self { rows, cols, by_row, by_col }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn edge_count(&self) -> usize {
        self.by_row.adj.len()
    }

    /// Edges in row-major order with their normalized weights.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, S)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (self.by_row.ptr[r]..self.by_row.ptr[r + 1])
                .map(move |e| (r as u32, self.by_row.adj[e], self.by_row.w[e]))
        })
    }

    /// One hop into the row side: `out[r] = sum w * cols_block[c]`.
    pub fn hop_to_rows(&self, cols_block: &EmbeddingBlock<S>) -> EmbeddingBlock<S> {
        let mut out = EmbeddingBlock::zeros(self.rows, cols_block.dim());
        self.by_row.gather(cols_block, &mut out);
        out
    }

    /// One hop into the column side: `out[c] = sum w * rows_block[r]`.
    pub fn hop_to_cols(&self, rows_block: &EmbeddingBlock<S>) -> EmbeddingBlock<S> {
        let mut out = EmbeddingBlock::zeros(self.cols, rows_block.dim());
        self.by_col.gather(rows_block, &mut out);
        out
    }
}

/// Symmetric normalization of an interaction matrix.
pub fn normalize<S: Real>(m: &InteractionMatrix) -> NormalizedBipartite<S> {
    NormalizedBipartite::from_edges(m.rows(), m.cols(), m.edges())
}

/// A per-layer elementwise perturbation applied to propagated output.
/// `Scale` carries inverted-dropout multipliers, `Shift` additive noise;
/// both sides of the graph get their own buffer.
#[derive(Debug, Clone)]
pub enum LayerPerturb<S> {
    Scale { left: Vec<S>, right: Vec<S> },
    Shift { left: Vec<S>, right: Vec<S> },
}

impl<S: Real> LayerPerturb<S> {
    fn apply(&self, left: &mut EmbeddingBlock<S>, right: &mut EmbeddingBlock<S>) {
        match self {
            LayerPerturb::Scale { left: l, right: r } => {
                for (a, &m) in left.data_mut().iter_mut().zip(l) {
                    *a *= m;
                }
                for (a, &m) in right.data_mut().iter_mut().zip(r) {
                    *a *= m;
                }
            }
            LayerPerturb::Shift { left: l, right: r } => {
                for (a, &m) in left.data_mut().iter_mut().zip(l) {
                    *a += m;
                }
                for (a, &m) in right.data_mut().iter_mut().zip(r) {
                    *a += m;
                }
            }
        }
    }

    /// Adjoint on gradient blocks: scaling is self-adjoint, shifts vanish.
    fn apply_adjoint(&self, left: &mut EmbeddingBlock<S>, right: &mut EmbeddingBlock<S>) {
        if let LayerPerturb::Scale { left: l, right: r } = self {
            for (a, &m) in left.data_mut().iter_mut().zip(l) {
                *a *= m;
            }
            for (a, &m) in right.data_mut().iter_mut().zip(r) {
                *a *= m;
            }
        }
    }
}

fn check_dims<S: Real>(
    g: &NormalizedBipartite<S>,
    left0: &EmbeddingBlock<S>,
    right0: &EmbeddingBlock<S>,
) -> Result<()> {
    if left0.count() != g.rows() || right0.count() != g.cols() || left0.dim() != right0.dim() {
        return Err(Error::config(format!(
            "propagation shape mismatch: graph {}x{}, left {}x{}, right {}x{}",
            g.rows(),
            g.cols(),
            left0.count(),
            left0.dim(),
            right0.count(),
            right0.dim()
        )));
    }
    Ok(())
}

/// Layer lists for both sides of a bipartite graph, input layer first
/// (`k + 1` blocks each).
pub type LayerPair<S> = (Vec<EmbeddingBlock<S>>, Vec<EmbeddingBlock<S>>);

/// Alternating propagation for `k` hops. Returns the layer lists for both
/// sides, input layer first (`k + 1` blocks each).
pub fn propagate<S: Real>(
    g: &NormalizedBipartite<S>,
    left0: &EmbeddingBlock<S>,
    right0: &EmbeddingBlock<S>,
    k: usize,
) -> Result<LayerPair<S>> {
    propagate_perturbed(g, left0, right0, k, &[])
}

/// Propagation with per-layer perturbations. `perturbs` is either empty or
/// holds one entry per hop; each hop's output is perturbed before it feeds
/// both the pool and the next hop.
pub fn propagate_perturbed<S: Real>(
    g: &NormalizedBipartite<S>,
    left0: &EmbeddingBlock<S>,
    right0: &EmbeddingBlock<S>,
    k: usize,
    perturbs: &[LayerPerturb<S>],
) -> Result<LayerPair<S>> {
    check_dims(g, left0, right0)?;
    if !perturbs.is_empty() && perturbs.len() != k {
        return Err(Error::config(format!(
            "expected {k} layer perturbations, got {}",
            perturbs.len()
        )));
    }
    let mut lefts = Vec::with_capacity(k + 1);
    let mut rights = Vec::with_capacity(k + 1);
    lefts.push(left0.clone());
    rights.push(right0.clone());
    for hop in 0..k {
        let mut nl = g.hop_to_rows(&rights[hop]);
        let mut nr = g.hop_to_cols(&lefts[hop]);
        if let Some(p) = perturbs.get(hop) {
            p.apply(&mut nl, &mut nr);
        }
        lefts.push(nl);
        rights.push(nr);
    }
    Ok((lefts, rights))
}

/// Divisor used when pooling `k + 1` propagation layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolDivisor {
    /// Arithmetic mean over the pooled layers (divide by k + 1). Default.
    KPlusOne,
    /// Divide by the hop count k, keeping the layer sum otherwise.
    K,
}

impl PoolDivisor {
    fn value<S: Real>(self, layers: usize) -> Result<S> {
        let d = match self {
            PoolDivisor::KPlusOne => layers,
            PoolDivisor::K => layers - 1,
        };
        if d == 0 {
            return Err(Error::config(
                "hop-count pooling needs at least two layers",
            ));
        }
        Ok(s(d as f64))
    }
}

/// Pools a layer list into a single block.
pub fn layer_pool<S: Real>(
    layers: &[EmbeddingBlock<S>],
    divisor: PoolDivisor,
) -> Result<EmbeddingBlock<S>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::config("cannot pool an empty layer list"))?;
    let inv = S::one() / divisor.value::<S>(layers.len())?;
    let mut out = EmbeddingBlock::zeros(first.count(), first.dim());
    for layer in layers {
        out.add_scaled(layer, inv);
    }
    Ok(out)
}

/// Gradient of `layer_pool(propagate_perturbed(...))` with respect to both
/// input blocks. Pure adjoint: it never needs the forward activations, only
/// the same graph, perturbations, and pooled-output gradients.
pub fn backprop_pooled<S: Real>(
    g: &NormalizedBipartite<S>,
    grad_left_pooled: &EmbeddingBlock<S>,
    grad_right_pooled: &EmbeddingBlock<S>,
    k: usize,
    divisor: PoolDivisor,
    perturbs: &[LayerPerturb<S>],
) -> Result<(EmbeddingBlock<S>, EmbeddingBlock<S>)> {
    check_dims(g, grad_left_pooled, grad_right_pooled)?;
    let inv = S::one() / divisor.value::<S>(k + 1)?;
    let mut gl = grad_left_pooled.clone();
    let mut gr = grad_right_pooled.clone();
    gl.scale(inv);
    gr.scale(inv);
    // Invariant: entering iteration `hop`, (gl, gr) hold the total gradient
    // with respect to that hop's perturbed output.
    let mut acc_l = gl.clone();
    let mut acc_r = gr.clone();
    for hop in (1..=k).rev() {
        if let Some(p) = perturbs.get(hop - 1) {
            p.apply_adjoint(&mut acc_l, &mut acc_r);
        }
        let mut prev_l = g.hop_to_rows(&acc_r);
        let mut prev_r = g.hop_to_cols(&acc_l);
        // Every layer, the input one included, also feeds the pool directly.
        prev_l.add_scaled(&gl, S::one());
        prev_r.add_scaled(&gr, S::one());
        acc_l = prev_l;
        acc_r = prev_r;
    }
    Ok((acc_l, acc_r))
}

/// Which side of an interaction matrix receives the aggregated mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateInto {
    Rows,
    Cols,
}

/// Unweighted neighborhood mean over an interaction matrix, prebuilt in both
/// orientations so the adjoint is available.
#[derive(Debug, Clone)]
pub struct MeanAggregator<S> {
    targets: usize,
    sources: usize,
    by_target: Csr<S>,
    by_source: Csr<S>,
}

impl<S: Real> MeanAggregator<S> {
    pub fn new(m: &InteractionMatrix, into: AggregateInto) -> Self {
        let (targets, sources) = match into {
            AggregateInto::Rows => (m.rows(), m.cols()),
            AggregateInto::Cols => (m.cols(), m.rows()),
        };
        let oriented: Vec<(u32, u32)> = match into {
            AggregateInto::Rows => m.edges().to_vec(),
            AggregateInto::Cols => m.edges().iter().map(|&(r, c)| (c, r)).collect(),
        };
        let mut deg = vec![0u32; targets];
        for &(t, _) in &oriented {
            deg[t as usize] += 1;
        }
        let weight = |t: u32| 1.0 / deg[t as usize] as f64;
        let by_target = Csr::build(targets, oriented.iter().map(|&(t, src)| (t, src, weight(t))));
        let by_source = Csr::build(sources, oriented.iter().map(|&(t, src)| (src, t, weight(t))));
        Self { targets, sources, by_target, by_source }
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    /// `out[t] = mean of source rows over t's neighbors`; no neighbors, zero row.
    pub fn apply(&self, source: &EmbeddingBlock<S>) -> Result<EmbeddingBlock<S>> {
        if source.count() != self.sources {
            return Err(Error::config(format!(
                "aggregation expects {} source rows, got {}",
                self.sources,
                source.count()
            )));
        }
        let mut out = EmbeddingBlock::zeros(self.targets, source.dim());
        self.by_target.gather(source, &mut out);
        Ok(out)
    }

    /// Adjoint: routes target gradients back to sources with the same weights.
    pub fn adjoint(&self, target_grad: &EmbeddingBlock<S>) -> Result<EmbeddingBlock<S>> {
        if target_grad.count() != self.targets {
            return Err(Error::config(format!(
                "aggregation adjoint expects {} target rows, got {}",
                self.targets,
                target_grad.count()
            )));
        }
        let mut out = EmbeddingBlock::zeros(self.sources, target_grad.dim());
        self.by_source.gather(target_grad, &mut out);
        Ok(out)
    }
}

/// One-off neighborhood mean; see [`MeanAggregator`] for the reusable form.
pub fn mean_aggregate<S: Real>(
    m: &InteractionMatrix,
    source: &EmbeddingBlock<S>,
    into: AggregateInto,
) -> Result<EmbeddingBlock<S>> {
    MeanAggregator::new(m, into).apply(source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block64(count: usize, dim: usize, vals: &[f64]) -> EmbeddingBlock<f64> {
        EmbeddingBlock::from_vec(count, dim, vals.to_vec())
    }

    #[test]
    fn single_edge_weight_is_one() {
        let g = NormalizedBipartite::<f64>::from_edges(1, 1, &[(0, 0)]);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 0, 1.0)]);
    }

    #[test]
    fn weight_matches_degree_product() {
        // Row 0 has degree 2, col 0 degree 3.
        let edges = [(0, 0), (0, 1), (1, 0), (2, 0)];
        let g = NormalizedBipartite::<f64>::from_edges(3, 2, &edges);
        let w00 = g.edges().find(|&(r, c, _)| r == 0 && c == 0).unwrap().2;
        assert!((w00 - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_degree_rows_stay_zero() {
        let g = NormalizedBipartite::<f64>::from_edges(2, 1, &[(0, 0)]);
        let l0 = block64(2, 1, &[5.0, 7.0]);
        let r0 = block64(1, 1, &[3.0]);
        let (lefts, rights) = propagate(&g, &l0, &r0, 2).unwrap();
        // Row 1 is isolated: every propagated layer leaves it at zero.
        assert_eq!(lefts[1].row(1), &[0.0]);
        assert_eq!(lefts[2].row(1), &[0.0]);
        // Degree-1/1 edge keeps values swapping between the two sides.
        assert_eq!(lefts[1].row(0), &[3.0]);
        assert_eq!(rights[1].row(0), &[5.0]);
        assert_eq!(lefts[2].row(0), &[5.0]);
    }

    #[test]
    fn one_hop_matches_hand_computation() {
        // u0 -> {b0, b1}, u1 -> {b0}: deg(u0)=2, deg(u1)=1, deg(b0)=2, deg(b1)=1.
        let g = NormalizedBipartite::<f64>::from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let l0 = block64(2, 1, &[1.0, 2.0]);
        let r0 = block64(2, 1, &[4.0, 8.0]);
        let (lefts, rights) = propagate(&g, &l0, &r0, 1).unwrap();
        let w_u0b0 = 1.0 / (2.0f64 * 2.0).sqrt();
        let w_u0b1 = 1.0 / (2.0f64 * 1.0).sqrt();
        let w_u1b0 = 1.0 / (1.0f64 * 2.0).sqrt();
        assert!((lefts[1].row(0)[0] - (w_u0b0 * 4.0 + w_u0b1 * 8.0)).abs() < 1e-15);
        assert!((lefts[1].row(1)[0] - w_u1b0 * 4.0).abs() < 1e-15);
        assert!((rights[1].row(0)[0] - (w_u0b0 * 1.0 + w_u1b0 * 2.0)).abs() < 1e-15);
        assert!((rights[1].row(1)[0] - w_u0b1 * 1.0).abs() < 1e-15);
    }

    #[test]
    fn propagation_is_linear() {
        let g = NormalizedBipartite::<f64>::from_edges(3, 2, &[(0, 0), (1, 0), (1, 1), (2, 1)]);
        let a_l = block64(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let a_r = block64(2, 2, &[1.0, -1.0, 0.5, 0.25]);
        let b_l = block64(3, 2, &[0.7, -0.1, 0.2, 0.9, -0.4, 0.3]);
        let b_r = block64(2, 2, &[-0.5, 0.6, 0.1, -0.2]);
        let (alpha, beta) = (1.7, -0.4);

        let mut mix_l = EmbeddingBlock::zeros(3, 2);
        mix_l.add_scaled(&a_l, alpha);
        mix_l.add_scaled(&b_l, beta);
        let mut mix_r = EmbeddingBlock::zeros(2, 2);
        mix_r.add_scaled(&a_r, alpha);
        mix_r.add_scaled(&b_r, beta);

        let (la, _) = propagate(&g, &a_l, &a_r, 2).unwrap();
        let (lb, _) = propagate(&g, &b_l, &b_r, 2).unwrap();
        let (lm, _) = propagate(&g, &mix_l, &mix_r, 2).unwrap();
        for k in 0..=2 {
            for (i, &v) in lm[k].data().iter().enumerate() {
                let want = alpha * la[k].data()[i] + beta * lb[k].data()[i];
                assert!((v - want).abs() < 1e-12, "layer {k} entry {i}");
            }
        }
    }

    #[test]
    fn pool_divisors() {
        let ones = block64(1, 2, &[1.0, 1.0]);
        let layers = vec![ones.clone(), ones];
        let mean = layer_pool(&layers, PoolDivisor::KPlusOne).unwrap();
        assert_eq!(mean.data(), &[1.0, 1.0]);
        let hops = layer_pool(&layers, PoolDivisor::K).unwrap();
        assert_eq!(hops.data(), &[2.0, 2.0]);
    }

    #[test]
    fn pool_rejects_empty_and_single_layer_hop_mode() {
        assert!(layer_pool::<f64>(&[], PoolDivisor::KPlusOne).is_err());
        let one = vec![block64(1, 1, &[1.0])];
        assert!(layer_pool(&one, PoolDivisor::K).is_err());
        assert!(layer_pool(&one, PoolDivisor::KPlusOne).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let g = NormalizedBipartite::<f64>::from_edges(2, 2, &[(0, 0)]);
        let l0 = block64(3, 1, &[1.0, 2.0, 3.0]);
        let r0 = block64(2, 1, &[1.0, 2.0]);
        assert!(matches!(propagate(&g, &l0, &r0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn mean_aggregation_and_empty_neighborhoods() {
        // Bundle 0 holds items {0, 1}; bundle 1 holds nothing.
        let m = InteractionMatrix::from_edges(2, 2, vec![(0, 0), (0, 1)]).unwrap();
        let items = block64(2, 2, &[1.0, 3.0, 5.0, 7.0]);
        let out = mean_aggregate(&m, &items, AggregateInto::Rows).unwrap();
        assert_eq!(out.row(0), &[3.0, 5.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn aggregation_adjoint_matches_inner_product() {
        // <G, A x> must equal <A* G, x> exactly up to rounding.
        let m = InteractionMatrix::from_edges(3, 4, vec![(0, 0), (0, 2), (1, 1), (2, 1), (2, 3)])
            .unwrap();
        let agg = MeanAggregator::<f64>::new(&m, AggregateInto::Rows);
        let x = block64(4, 2, &[0.3, -0.7, 1.1, 0.2, -0.5, 0.9, 0.4, 0.6]);
        let gt = block64(3, 2, &[0.25, -0.1, 0.8, 0.3, -0.6, 0.05]);
        let ax = agg.apply(&x).unwrap();
        let atg = agg.adjoint(&gt).unwrap();
        let lhs: f64 = gt.data().iter().zip(ax.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = atg.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn backprop_pooled_is_exact_adjoint() {
        // For the linear map f(l0, r0) = pool(prop(...)), the claimed gradient
        // must satisfy <G, f(x)> = <backprop(G), x> for random G and x.
        let g = NormalizedBipartite::<f64>::from_edges(3, 2, &[(0, 0), (1, 0), (1, 1), (2, 1)]);
        let l0 = block64(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let r0 = block64(2, 2, &[1.0, -1.0, 0.5, 0.25]);
        let gl = block64(3, 2, &[0.9, -0.2, 0.1, 0.7, -0.8, 0.3]);
        let gr = block64(2, 2, &[0.2, 0.4, -0.6, 0.8]);
        for divisor in [PoolDivisor::KPlusOne, PoolDivisor::K] {
            let (lefts, rights) = propagate(&g, &l0, &r0, 2).unwrap();
            let pl = layer_pool(&lefts, divisor).unwrap();
            let pr = layer_pool(&rights, divisor).unwrap();
            let lhs: f64 = gl.data().iter().zip(pl.data()).map(|(&a, &b)| a * b).sum::<f64>()
                + gr.data().iter().zip(pr.data()).map(|(&a, &b)| a * b).sum::<f64>();
            let (bl, br) = backprop_pooled(&g, &gl, &gr, 2, divisor, &[]).unwrap();
            let rhs: f64 = bl.data().iter().zip(l0.data()).map(|(&a, &b)| a * b).sum::<f64>()
                + br.data().iter().zip(r0.data()).map(|(&a, &b)| a * b).sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-13, "{divisor:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn backprop_pooled_handles_perturbations() {
        let g = NormalizedBipartite::<f64>::from_edges(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        let l0 = block64(2, 2, &[0.3, -0.2, 0.8, 0.5]);
        let r0 = block64(2, 2, &[-0.1, 0.6, 0.2, -0.9]);
        let perturbs = vec![
            LayerPerturb::Scale {
                left: vec![2.0, 0.0, 1.0, 0.5],
                right: vec![1.0, 2.0, 0.0, 1.0],
            },
            LayerPerturb::Shift {
                left: vec![0.5, -0.5, 0.1, 0.2],
                right: vec![-0.3, 0.0, 0.7, 0.4],
            },
        ];
        let gl = block64(2, 2, &[0.4, 0.1, -0.7, 0.9]);
        let gr = block64(2, 2, &[0.6, -0.4, 0.3, 0.2]);

        // Directional derivative of the affine forward map equals the
        // inner product with the claimed gradient.
        let eval = |l: &EmbeddingBlock<f64>, r: &EmbeddingBlock<f64>| -> f64 {
            let (lefts, rights) = propagate_perturbed(&g, l, r, 2, &perturbs).unwrap();
            let pl = layer_pool(&lefts, PoolDivisor::KPlusOne).unwrap();
            let pr = layer_pool(&rights, PoolDivisor::KPlusOne).unwrap();
            gl.data().iter().zip(pl.data()).map(|(&a, &b)| a * b).sum::<f64>()
                + gr.data().iter().zip(pr.data()).map(|(&a, &b)| a * b).sum::<f64>()
        };
        let dl = block64(2, 2, &[0.11, -0.23, 0.05, 0.17]);
        let dr = block64(2, 2, &[-0.07, 0.13, 0.21, -0.02]);
        let mut l1 = l0.clone();
        l1.add_scaled(&dl, 1.0);
        let mut r1 = r0.clone();
        r1.add_scaled(&dr, 1.0);
        let lhs = eval(&l1, &r1) - eval(&l0, &r0);

        let (bl, br) =
            backprop_pooled(&g, &gl, &gr, 2, PoolDivisor::KPlusOne, &perturbs).unwrap();
        let rhs: f64 = bl.data().iter().zip(dl.data()).map(|(&a, &b)| a * b).sum::<f64>()
            + br.data().iter().zip(dr.data()).map(|(&a, &b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}

//! Adam optimizer over embedding tables.

use crate::num::{s, Real};
use crate::views::EmbeddingTable;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First and second moment estimates plus the global step counter. The
/// counter advances once per `step` call, shared by all rows.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: EmbeddingTable<S>,
    v: EmbeddingTable<S>,
    t: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(like: &EmbeddingTable<S>) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update. Rows whose gradient is identically zero keep their
    /// parameters and moments untouched.
    pub fn step(&mut self, theta: &mut EmbeddingTable<S>, grads: &EmbeddingTable<S>, lr: f64) {
        self.t += 1;
        let c1 = s::<S>(1.0 / (1.0 - BETA1.powi(self.t as i32)));
        let c2 = s::<S>(1.0 / (1.0 - BETA2.powi(self.t as i32)));
        let (b1, b2) = (s::<S>(BETA1), s::<S>(BETA2));
        let (one_m_b1, one_m_b2) = (s::<S>(1.0 - BETA1), s::<S>(1.0 - BETA2));
        let (lr_s, eps_s) = (s::<S>(lr), s::<S>(EPS));

        let dim = theta.dim();
        for block in 0..3 {
            let (t_block, g_block, m_block, v_block) = match block {
                0 => (&mut theta.users, &grads.users, &mut self.m.users, &mut self.v.users),
                1 => (&mut theta.bundles, &grads.bundles, &mut self.m.bundles, &mut self.v.bundles),
                _ => (&mut theta.items, &grads.items, &mut self.m.items, &mut self.v.items),
            };
            for row in 0..t_block.count() {
                let g = g_block.row(row);
                if g.iter().all(|x| x.is_zero()) {
                    continue;
                }
                let t_row = t_block.row_mut(row);
                let m_row = m_block.row_mut(row);
                let v_row = v_block.row_mut(row);
                for i in 0..dim {
                    m_row[i] = b1 * m_row[i] + one_m_b1 * g[i];
                    v_row[i] = b2 * v_row[i] + one_m_b2 * g[i] * g[i];
                    let m_hat = m_row[i] * c1;
                    let v_hat = v_row[i] * c2;
                    t_row[i] -= lr_s * m_hat / (v_hat.sqrt() + eps_s);
                }
            }
        }
    }
}

//! Uniform positive sampling with rejection-sampled negatives.

use rand::Rng;

use crate::dataset::InteractionMatrix;

/// Draws per negative before giving up on a user.
pub const NEGATIVE_REJECTION_CAP: usize = 1000;

/// One training comparison: `pos` carries a train edge from `user`,
/// `neg` does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// A sampled batch plus the number of triples abandoned because no negative
/// survived rejection within the cap.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub triples: Vec<TrainingTriple>,
    pub skipped: usize,
}

pub struct TripleSampler {
    edges: Vec<(u32, u32)>,
    /// Sorted positive bundles per user, for rejection lookups.
    user_pos: Vec<Vec<u32>>,
    bundles: usize,
}

impl TripleSampler {
    pub fn new(train: &InteractionMatrix) -> Self {
        Self {
            edges: train.edges().to_vec(),
            user_pos: train.row_lists(),
            bundles: train.cols(),
        }
    }

    /// Samples `ceil(batch_size / negatives_per_positive)` positives
    /// uniformly from the train edges, pairs each with
    /// `negatives_per_positive` independent negatives, and truncates to
    /// `batch_size` triples.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        negatives_per_positive: usize,
        rng: &mut impl Rng,
    ) -> SampledBatch {
        assert!(negatives_per_positive >= 1, "need at least one negative per positive");
        assert!(!self.edges.is_empty(), "train split is empty");
        let positives = batch_size.div_ceil(negatives_per_positive);
        let mut triples = Vec::with_capacity(batch_size);
        let mut skipped = 0usize;
        'outer: for _ in 0..positives {
            let (user, pos) = self.edges[rng.gen_range(0..self.edges.len())];
            for _ in 0..negatives_per_positive {
                match self.draw_negative(user, rng) {
                    Some(neg) => {
                        triples.push(TrainingTriple { user, pos, neg });
                        if triples.len() == batch_size {
                            break 'outer;
                        }
                    }
                    None => skipped += 1,
                }
            }
        }
        SampledBatch { triples, skipped }
    }

    fn draw_negative(&self, user: u32, rng: &mut impl Rng) -> Option<u32> {
        let positives = &self.user_pos[user as usize];
        for _ in 0..NEGATIVE_REJECTION_CAP {
            let b = rng.gen_range(0..self.bundles) as u32;
            if positives.binary_search(&b).is_err() {
                return Some(b);
            }
        }
        None
    }
}

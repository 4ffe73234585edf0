//! Synthetic dataset generators: a planted-group dataset whose structure a
//! working trainer must recover, and random instances for oracle checks.

use rand::Rng;

use crate::dataset::{Dataset, InteractionMatrix};
use crate::rng::{stream_rng, Stream};

/// A dataset with `groups` disjoint user/bundle/item communities. Bundle
/// items are exclusive to the bundle; users interact with every item of
/// their group and like only their group's bundles. Per user, one group
/// bundle goes to the test split, one to validation, the rest to train.
/// Fully deterministic.
pub fn planted_groups(
    groups: usize,
    users_per_group: usize,
    bundles_per_group: usize,
    items_per_bundle: usize,
) -> Dataset {
    assert!(bundles_per_group >= 3, "need train, validation, and test bundles per user");
    let users = groups * users_per_group;
    let bundles = groups * bundles_per_group;
    let items = bundles * items_per_bundle;

    let mut bi = Vec::new();
    for b in 0..bundles {
        for k in 0..items_per_bundle {
            bi.push((b as u32, (b * items_per_bundle + k) as u32));
        }
    }

    let mut ui = Vec::new();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for g in 0..groups {
        let group_bundles: Vec<usize> =
            (g * bundles_per_group..(g + 1) * bundles_per_group).collect();
        for local in 0..users_per_group {
            let u = (g * users_per_group + local) as u32;
            for &b in &group_bundles {
                for k in 0..items_per_bundle {
                    ui.push((u, (b * items_per_bundle + k) as u32));
                }
            }
            let test_slot = local % bundles_per_group;
            let valid_slot = (local + 1) % bundles_per_group;
            for (slot, &b) in group_bundles.iter().enumerate() {
                let edge = (u, b as u32);
                if slot == test_slot {
                    test.push(edge);
                } else if slot == valid_slot {
                    valid.push(edge);
                } else {
                    train.push(edge);
                }
            }
        }
    }
    Dataset::from_parts(users, bundles, items, train, valid, test, ui, bi)
        .expect("planted construction is consistent")
}

/// The default planted instance: 2 groups, 20 users, 10 bundles, 30 items.
pub fn planted_dataset() -> Dataset {
    planted_groups(2, 10, 5, 3)
}

/// A random bipartite relation with independent edge probability `p`.
pub fn random_bipartite(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut impl Rng,
) -> InteractionMatrix {
    let mut edges = Vec::new();
    for r in 0..rows as u32 {
        for c in 0..cols as u32 {
            if rng.gen_bool(p) {
                edges.push((r, c));
            }
        }
    }
    InteractionMatrix::from_edges(rows, cols, edges).expect("ids are in range")
}

/// A random dataset. User-bundle edges appear with probability `p_ub` and
/// are split train/valid/test roughly 3:1:1; `p_ui` and `p_bi` drive the
/// auxiliary relations. The train split is forced nonempty.
pub fn random_dataset(
    users: usize,
    bundles: usize,
    items: usize,
    p_ub: f64,
    p_ui: f64,
    p_bi: f64,
    seed: u64,
) -> Dataset {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut slot = 0usize;
    for u in 0..users as u32 {
        for b in 0..bundles as u32 {
            if rng.gen_bool(p_ub) {
                match slot % 5 {
                    0..=2 => train.push((u, b)),
                    3 => valid.push((u, b)),
                    _ => test.push((u, b)),
                }
                slot += 1;
            }
        }
    }
    if train.is_empty() {
        train.push((0, 0));
        valid.retain(|&e| e != (0, 0));
        test.retain(|&e| e != (0, 0));
    }
    let ui = random_bipartite(users, items, p_ui, &mut rng);
    let bi = random_bipartite(bundles, items, p_bi, &mut rng);
    Dataset::from_parts(
        users,
        bundles,
        items,
        train,
        valid,
        test,
        ui.edges().to_vec(),
        bi.edges().to_vec(),
    )
    .expect("random construction is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_default_has_the_documented_shape() {
        let d = planted_dataset();
        assert_eq!((d.users(), d.bundles(), d.items()), (20, 10, 30));
        // Each user: 3 train, 1 valid, 1 test edge.
        assert_eq!(d.train_ub.len(), 60);
        assert_eq!(d.valid_ub.len(), 20);
        assert_eq!(d.test_ub.len(), 20);
        // Bundles carry disjoint item triples.
        assert_eq!(d.bi.len(), 30);
        let mut seen = [false; 30];
        for &(_, i) in d.bi.edges() {
            assert!(!seen[i as usize], "item {i} in two bundles");
            seen[i as usize] = true;
        }
    }

    #[test]
    fn planted_users_stay_in_their_group() {
        let d = planted_dataset();
        for &(u, b) in d.ub.edges() {
            assert_eq!(u / 10, b / 5, "edge ({u},{b}) crosses groups");
        }
        for &(u, i) in d.ui.edges() {
            assert_eq!(u / 10, i / 15, "interaction ({u},{i}) crosses groups");
        }
    }

    #[test]
    fn planted_is_deterministic() {
        let a = planted_dataset();
        let b = planted_dataset();
        assert_eq!(a.train_ub.edges(), b.train_ub.edges());
        assert_eq!(a.ui.edges(), b.ui.edges());
    }

    #[test]
    fn random_dataset_is_reproducible_and_consistent() {
        let a = random_dataset(12, 9, 15, 0.2, 0.1, 0.3, 7);
        let b = random_dataset(12, 9, 15, 0.2, 0.1, 0.3, 7);
        assert_eq!(a.train_ub.edges(), b.train_ub.edges());
        assert_eq!(a.test_ub.edges(), b.test_ub.edges());
        assert!(!a.train_ub.is_empty());
        let c = random_dataset(12, 9, 15, 0.2, 0.1, 0.3, 8);
        assert_ne!(a.ui.edges(), c.ui.edges());
    }

    #[test]
    fn random_dataset_survives_extreme_densities() {
        let sparse = random_dataset(5, 4, 6, 0.0, 0.0, 0.0, 3);
        assert_eq!(sparse.train_ub.len(), 1);
        let dense = random_dataset(5, 4, 6, 1.0, 1.0, 1.0, 3);
        assert_eq!(dense.ui.len(), 30);
    }
}

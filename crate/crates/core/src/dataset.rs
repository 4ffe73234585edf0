//! On-disk dataset layout, loading, statistics, and sparsification.
//!
//! A dataset directory holds five whitespace-separated id-pair files:
//! `user_bundle_train.txt`, `user_bundle_tune.txt`, `user_bundle_test.txt`,
//! `user_item.txt`, `bundle_item.txt`. Lines starting with `#` are comments.
//! Entity counts are inferred as `max id + 1` across all files unless a
//! `data_size.txt` (or `<dir>_data_size.txt`) header declares `M N O`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

pub const FILE_UB_TRAIN: &str = "user_bundle_train.txt";
pub const FILE_UB_TUNE: &str = "user_bundle_tune.txt";
pub const FILE_UB_TEST: &str = "user_bundle_test.txt";
pub const FILE_UI: &str = "user_item.txt";
pub const FILE_BI: &str = "bundle_item.txt";

/// Which bipartite relation an edge set describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    UserBundle,
    UserItem,
    BundleItem,
}

/// A sparse binary interaction matrix stored as a sorted, deduplicated edge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionMatrix {
    rows: usize,
    cols: usize,
    edges: Vec<(u32, u32)>,
}

impl InteractionMatrix {
    /// Builds a matrix, sorting and deduplicating `edges`. Ids must fit the shape.
    pub fn from_edges(rows: usize, cols: usize, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        for &(r, c) in &edges {
            if r as usize >= rows || c as usize >= cols {
                return Err(Error::data(format!(
                    "edge ({r}, {c}) out of range for {rows}x{cols} matrix"
                )));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { rows, cols, edges })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, edges: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        self.edges.binary_search(&(row, col)).is_ok()
    }

    /// Neighbor lists per row, ascending. Rows without edges yield empty lists.
    pub fn row_lists(&self) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.rows];
        for &(r, c) in &self.edges {
            lists[r as usize].push(c);
        }
        lists
    }

    pub fn row_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.rows];
        for &(r, _) in &self.edges {
            deg[r as usize] += 1;
        }
        deg
    }

    pub fn col_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.cols];
        for &(_, c) in &self.edges {
            deg[c as usize] += 1;
        }
        deg
    }
}

/// A loaded dataset: the three relations plus the user-bundle split.
///
/// `ub` is the union of the three splits; the splits are pairwise disjoint.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ub: InteractionMatrix,
    pub ui: InteractionMatrix,
    pub bi: InteractionMatrix,
    pub train_ub: InteractionMatrix,
    pub valid_ub: InteractionMatrix,
    pub test_ub: InteractionMatrix,
}

impl Dataset {
    pub fn users(&self) -> usize {
        self.ui.rows()
    }

    pub fn bundles(&self) -> usize {
        self.bi.rows()
    }

    pub fn items(&self) -> usize {
        self.ui.cols()
    }

    /// Assembles a dataset from raw split edge lists, checking split disjointness.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        users: usize,
        bundles: usize,
        items: usize,
        train: Vec<(u32, u32)>,
        valid: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
        ui: Vec<(u32, u32)>,
        bi: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let train_ub = InteractionMatrix::from_edges(users, bundles, train)?;
        let valid_ub = InteractionMatrix::from_edges(users, bundles, valid)?;
        let test_ub = InteractionMatrix::from_edges(users, bundles, test)?;
        if train_ub.is_empty() {
            return Err(Error::data("training split has no user-bundle edges"));
        }
        for (a, b, name) in [
            (&train_ub, &valid_ub, "train/tune"),
            (&train_ub, &test_ub, "train/test"),
            (&valid_ub, &test_ub, "tune/test"),
        ] {
            if let Some(&(u, bnd)) = a.edges().iter().find(|e| b.contains(e.0, e.1)) {
                return Err(Error::data(format!(
                    "splits {name} overlap on user-bundle edge ({u}, {bnd})"
                )));
            }
        }
        let mut all = train_ub.edges().to_vec();
        all.extend_from_slice(valid_ub.edges());
        all.extend_from_slice(test_ub.edges());
        Ok(Dataset {
            ub: InteractionMatrix::from_edges(users, bundles, all)?,
            ui: InteractionMatrix::from_edges(users, items, ui)?,
            bi: InteractionMatrix::from_edges(bundles, items, bi)?,
            train_ub,
            valid_ub,
            test_ub,
        })
    }
}

fn parse_pair_file(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::data(format!("cannot read {}: {e}", path.display()))
    })?;
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u32> {
            tok.ok_or(())
                .and_then(|t| t.parse::<u32>().map_err(|_| ()))
                .map_err(|_| {
                    Error::data(format!(
                        "{}:{}: expected two non-negative integers, got {line:?}",
                        path.display(),
                        idx + 1
                    ))
                })
        };
        let a = parse(fields.next())?;
        let b = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(Error::data(format!(
                "{}:{}: expected two fields, got {line:?}",
                path.display(),
                idx + 1
            )));
        }
        edges.push((a, b));
    }
    Ok(edges)
}

/// Reads an optional `M N O` size header next to the relation files.
fn read_size_header(dir: &Path) -> Result<Option<(usize, usize, usize)>> {
    let mut candidates = vec![dir.join("data_size.txt")];
    if let Some(base) = dir.file_name().and_then(|n| n.to_str()) {
        candidates.push(dir.join(format!("{base}_data_size.txt")));
    }
    for path in candidates {
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let nums: Vec<usize> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|_| {
                    Error::data(format!("{}: malformed size header {text:?}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if nums.len() != 3 {
            return Err(Error::data(format!(
                "{}: size header must hold exactly M N O",
                path.display()
            )));
        }
        return Ok(Some((nums[0], nums[1], nums[2])));
    }
    Ok(None)
}

/// Loads a dataset directory. Entity counts come from the size header when
/// present, otherwise from the maximum id seen across all five files.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = parse_pair_file(&dir.join(FILE_UB_TRAIN))?;
    let valid = parse_pair_file(&dir.join(FILE_UB_TUNE))?;
    let test = parse_pair_file(&dir.join(FILE_UB_TEST))?;
    let ui = parse_pair_file(&dir.join(FILE_UI))?;
    let bi = parse_pair_file(&dir.join(FILE_BI))?;

    let (users, bundles, items) = match read_size_header(dir)? {
        Some(dims) => dims,
        None => {
            let max_plus_one = |it: &mut dyn Iterator<Item = u32>| {
                it.max().map(|m| m as usize + 1).unwrap_or(0)
            };
            let ub_iter = train.iter().chain(&valid).chain(&test);
            let users = max_plus_one(&mut ub_iter.clone().map(|e| e.0).chain(ui.iter().map(|e| e.0)));
            let bundles = max_plus_one(&mut ub_iter.clone().map(|e| e.1).chain(bi.iter().map(|e| e.0)));
            let items = max_plus_one(&mut ui.iter().map(|e| e.1).chain(bi.iter().map(|e| e.1)));
            (users, bundles, items)
        }
    };

    Dataset::from_parts(users, bundles, items, train, valid, test, ui, bi)
        .map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("{}: {msg}", dir.display())),
            other => other,
        })
}

/// Writes `d` into `dir` (created if needed) in the on-disk layout, including
/// a `data_size.txt` header so trailing zero-degree entities survive reload.
pub fn write_dataset(d: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
    let dump = |name: &str, edges: &[(u32, u32)]| -> Result<()> {
        let mut out = String::with_capacity(edges.len() * 12);
        for &(a, b) in edges {
            let _ = writeln!(out, "{a}\t{b}");
        }
        fs::write(dir.join(name), out)
            .map_err(|e| Error::data(format!("cannot write {name}: {e}")))
    };
    dump(FILE_UB_TRAIN, d.train_ub.edges())?;
    dump(FILE_UB_TUNE, d.valid_ub.edges())?;
    dump(FILE_UB_TEST, d.test_ub.edges())?;
    dump(FILE_UI, d.ui.edges())?;
    dump(FILE_BI, d.bi.edges())?;
    fs::write(
        dir.join("data_size.txt"),
        format!("{} {} {}\n", d.users(), d.bundles(), d.items()),
    )
    .map_err(|e| Error::data(format!("cannot write data_size.txt: {e}")))
}

/// Summary statistics of a dataset.
#[derive(Debug, Clone)]
pub struct StatisticsRecord {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub ub_train: usize,
    pub ub_tune: usize,
    pub ub_test: usize,
    pub ub_total: usize,
    pub ui_edges: usize,
    pub bi_edges: usize,
    /// |BI| / N.
    pub avg_bundle_size: f64,
    /// Per bundle: fraction of its items with zero user-item interactions.
    /// Bundles without items count as 0.
    pub biu_sparsity: Vec<f64>,
}

impl StatisticsRecord {
    /// `key=value` lines, one per scalar statistic.
    pub fn render(&self) -> String {
        let mean_biu = if self.biu_sparsity.is_empty() {
            0.0
        } else {
            self.biu_sparsity.iter().sum::<f64>() / self.biu_sparsity.len() as f64
        };
        let mut out = String::new();
        let _ = writeln!(out, "users={}", self.users);
        let _ = writeln!(out, "bundles={}", self.bundles);
        let _ = writeln!(out, "items={}", self.items);
        let _ = writeln!(out, "ub_train_edges={}", self.ub_train);
        let _ = writeln!(out, "ub_tune_edges={}", self.ub_tune);
        let _ = writeln!(out, "ub_test_edges={}", self.ub_test);
        let _ = writeln!(out, "ub_total_edges={}", self.ub_total);
        let _ = writeln!(out, "ui_edges={}", self.ui_edges);
        let _ = writeln!(out, "bi_edges={}", self.bi_edges);
        let _ = writeln!(out, "avg_items_per_bundle={:.2}", self.avg_bundle_size);
        let _ = writeln!(out, "mean_biu_sparsity={:.4}", mean_biu);
        out
    }
}

/// Recounts every statistic directly from the edge lists.
pub fn dataset_stats(d: &Dataset) -> StatisticsRecord {
    let item_ui_deg = d.ui.col_degrees();
    let bundle_items = d.bi.row_lists();
    let biu_sparsity = bundle_items
        .iter()
        .map(|items| {
            if items.is_empty() {
                0.0
            } else {
                let cold = items.iter().filter(|&&i| item_ui_deg[i as usize] == 0).count();
                cold as f64 / items.len() as f64
            }
        })
        .collect();
    StatisticsRecord {
        users: d.users(),
        bundles: d.bundles(),
        items: d.items(),
        ub_train: d.train_ub.len(),
        ub_tune: d.valid_ub.len(),
        ub_test: d.test_ub.len(),
        ub_total: d.ub.len(),
        ui_edges: d.ui.len(),
        bi_edges: d.bi.len(),
        avg_bundle_size: if d.bundles() == 0 {
            0.0
        } else {
            d.bi.len() as f64 / d.bundles() as f64
        },
        biu_sparsity,
    }
}

/// Returns a copy of `d` keeping exactly `round((1 - drop_rate) * |BI|)`
/// uniformly chosen bundle-item edges. User-bundle and user-item relations
/// are untouched.
pub fn sparsify_bi(d: &Dataset, drop_rate: f64, rng: &mut impl Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(Error::config(format!("drop_rate {drop_rate} outside [0, 1]")));
    }
    let total = d.bi.len();
    let keep = ((1.0 - drop_rate) * total as f64).round() as usize;
    // Partial Fisher-Yates: the first `keep` slots end up a uniform sample.
    let mut pool: Vec<u32> = (0..total as u32).collect();
    for i in 0..keep.min(total.saturating_sub(1)) {
        let j = rng.gen_range(i..total);
        pool.swap(i, j);
    }
    let mut kept: HashSet<u32> = pool[..keep].iter().copied().collect();
    let edges: Vec<(u32, u32)> = d
        .bi
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| kept.remove(&(*i as u32)))
        .map(|(_, &e)| e)
        .collect();
    let mut out = d.clone();
    out.bi = InteractionMatrix::from_edges(d.bundles(), d.items(), edges)?;
    Ok(out)
}

/// Output directory name for a sparsified copy of `base`.
pub fn sparsify_dir_name(base: &Path, drop_rate: f64, seed: u64) -> PathBuf {
    let name = base
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset");
    base.with_file_name(format!("{name}_bi_drop{drop_rate}_s{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use std::fs;

    fn write_fixture(dir: &Path) {
        fs::write(dir.join(FILE_UB_TRAIN), "0 0\n1 1\n# comment\n0 1\n").unwrap();
        fs::write(dir.join(FILE_UB_TUNE), "2 0\n").unwrap();
        fs::write(dir.join(FILE_UB_TEST), "2 1\n").unwrap();
        fs::write(dir.join(FILE_UI), "0 0\n1 1\n2 2\n2 3\n").unwrap();
        fs::write(dir.join(FILE_BI), "0 0\n0 1\n1 2\n1 3\n").unwrap();
    }

    #[test]
    fn loads_and_infers_counts() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let d = load_dataset(tmp.path()).unwrap();
        assert_eq!((d.users(), d.bundles(), d.items()), (3, 2, 4));
        assert_eq!(d.train_ub.len(), 3);
        assert_eq!(d.ub.len(), 5);
    }

    #[test]
    fn size_header_overrides_inference() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join("data_size.txt"), "10 5 6\n").unwrap();
        let d = load_dataset(tmp.path()).unwrap();
        assert_eq!((d.users(), d.bundles(), d.items()), (10, 5, 6));
    }

    #[test]
    fn header_rejects_out_of_range_ids() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join("data_size.txt"), "2 2 4\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn missing_file_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::remove_file(tmp.path().join(FILE_BI)).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains(FILE_BI), "{err}");
    }

    #[test]
    fn malformed_line_reports_position() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join(FILE_UI), "0 0\nnope 3\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("user_item.txt:2"), "{err}");
    }

    #[test]
    fn empty_train_split_is_fatal() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join(FILE_UB_TRAIN), "# nothing\n").unwrap();
        assert!(load_dataset(tmp.path()).is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join(FILE_UB_TEST), "0 0\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
    }

    #[test]
    fn empty_bundle_item_file_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join(FILE_BI), "").unwrap();
        fs::write(tmp.path().join("data_size.txt"), "3 2 4\n").unwrap();
        let d = load_dataset(tmp.path()).unwrap();
        assert_eq!(d.bi.len(), 0);
        assert_eq!(dataset_stats(&d).avg_bundle_size, 0.0);
    }

    #[test]
    fn duplicate_pairs_stored_once() {
        let m = InteractionMatrix::from_edges(2, 2, vec![(0, 1), (0, 1), (1, 0)]).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.contains(0, 1));
    }

    #[test]
    fn stats_recount_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let d = load_dataset(tmp.path()).unwrap();
        let s = dataset_stats(&d);
        assert_eq!(s.ub_train, 3);
        assert_eq!(s.ub_tune, 1);
        assert_eq!(s.ub_test, 1);
        assert_eq!(s.ui_edges, 4);
        assert_eq!(s.bi_edges, 4);
        assert_eq!(s.avg_bundle_size, 2.0);
        // Every bundle item has at least one UI interaction in the fixture.
        assert!(s.biu_sparsity.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn biu_rate_counts_cold_items() {
        // Bundle 0 holds items {0, 1}; item 1 has no UI edge.
        let d = Dataset::from_parts(
            2,
            1,
            2,
            vec![(0, 0)],
            vec![],
            vec![],
            vec![(0, 0), (1, 0)],
            vec![(0, 0), (0, 1)],
        )
        .unwrap();
        let s = dataset_stats(&d);
        assert_eq!(s.biu_sparsity, vec![0.5]);
    }

    #[test]
    fn round_trip_preserves_edges_and_dims() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let d = load_dataset(tmp.path()).unwrap();
        let out = tmp.path().join("copy");
        write_dataset(&d, &out).unwrap();
        let d2 = load_dataset(&out).unwrap();
        assert_eq!(d.ub, d2.ub);
        assert_eq!(d.ui, d2.ui);
        assert_eq!(d.bi, d2.bi);
        assert_eq!(d.train_ub, d2.train_ub);
    }

    #[test]
    fn sparsify_keeps_exact_count() {
        let edges: Vec<(u32, u32)> = (0..100).map(|i| (i / 10, i % 10)).collect();
        let d = Dataset::from_parts(1, 10, 10, vec![(0, 0)], vec![], vec![], vec![], edges)
            .unwrap();
        let mut rng = stream_rng(3, Stream::Sampling);
        let half = sparsify_bi(&d, 0.5, &mut rng).unwrap();
        assert_eq!(half.bi.len(), 50);
        assert_eq!(half.ub.len(), d.ub.len());

        let mut rng = stream_rng(3, Stream::Sampling);
        let none = sparsify_bi(&d, 0.0, &mut rng).unwrap();
        assert_eq!(none.bi, d.bi);

        let mut rng = stream_rng(3, Stream::Sampling);
        let all = sparsify_bi(&d, 1.0, &mut rng).unwrap();
        assert_eq!(all.bi.len(), 0);
    }

    #[test]
    fn sparsify_is_seed_deterministic() {
        let edges: Vec<(u32, u32)> = (0..60).map(|i| (i / 6, i % 6)).collect();
        let d = Dataset::from_parts(1, 10, 6, vec![(0, 0)], vec![], vec![], vec![], edges)
            .unwrap();
        let a = sparsify_bi(&d, 0.3, &mut stream_rng(11, Stream::Sampling)).unwrap();
        let b = sparsify_bi(&d, 0.3, &mut stream_rng(11, Stream::Sampling)).unwrap();
        let c = sparsify_bi(&d, 0.3, &mut stream_rng(12, Stream::Sampling)).unwrap();
        assert_eq!(a.bi, b.bi);
        assert_eq!(a.bi.len(), c.bi.len());
        assert_ne!(a.bi, c.bi);
    }

    #[test]
    fn sparsify_dir_name_template() {
        let p = sparsify_dir_name(Path::new("/data/youshu"), 0.8, 42);
        assert_eq!(p, Path::new("/data/youshu_bi_drop0.8_s42"));
    }
}

//! Random-forest regressor built from scratch: exact greedy splits on
//! pre-sorted feature lists, per-node feature subsampling, bootstrap row
//! weights, and SSE-reduction feature importances.
//!
//! Trees train independently (and in parallel), each from its own seed
//! derived from the forest seed, so results are identical regardless of
//! thread count.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{FeatureMatrix, LearnError};
use crate::seed::{derive_seed, tag};

/// Forest hyperparameters. The defaults favour many shallow, heavily
/// feature-subsampled trees over a few deep ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    /// Number of trees.
    pub n_trees: usize,
    /// Maximum number of split levels; the root sits at depth 0.
    pub max_depth: usize,
    /// Fraction of features drawn (without replacement) at every node;
    /// the count is `ceil(colsample_bynode * d)`, at least 1.
    pub colsample_bynode: f64,
    /// Minimum summed sample weight in each child. With squared loss the
    /// weight of a row is its bootstrap multiplicity, so the tiny default
    /// imposes no floor beyond `min_samples_leaf`.
    pub min_child_weight: f64,
    /// Minimum samples per leaf, counted with bootstrap multiplicity.
    pub min_samples_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 300,
            max_depth: 6,
            colsample_bynode: 0.6,
            min_child_weight: 0.001,
            min_samples_leaf: 1,
        }
    }
}

impl ForestParams {
    fn validate(&self) -> Result<(), LearnError> {
        if self.n_trees == 0
            || self.max_depth == 0
            || !(self.colsample_bynode > 0.0 && self.colsample_bynode <= 1.0)
            || !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite())
            || self.min_samples_leaf == 0
        {
            return Err(LearnError::BadParams);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: u32,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        left: u32,
        right: u32,
    },
}

/// One regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict_row(&self, row: impl Fn(usize) -> f64) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row(*feature as usize) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// A trained forest: trees, per-feature importances (total weighted SSE
/// reduction contributed by splits on that feature), and the metadata
/// needed to reproduce or apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub seed: u64,
    pub feature_names: Vec<String>,
    trees: Vec<RegressionTree>,
    importances: Vec<f64>,
}

impl ForestModel {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn feature_importances(&self) -> &[f64] {
        &self.importances
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Mean of the per-tree predictions. Every prediction lies within the
    /// range of the training targets; the model never extrapolates.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>, LearnError> {
        if x.n_cols() != self.n_features() {
            return Err(LearnError::DimensionMismatch {
                expected: self.n_features(),
                got: x.n_cols(),
            });
        }
        let mut out = Vec::with_capacity(x.n_rows());
        for i in 0..x.n_rows() {
            let mut sum = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for tree in &self.trees {
                let p = tree.predict_row(|f| x.get(i, f));
                sum += p;
                lo = lo.min(p);
                hi = hi.max(p);
            }
            // Clamping the mean into the per-tree range keeps predictions
            // inside the training target range even when summation error
            // would nudge them out by an ulp.
            out.push((sum / self.trees.len() as f64).clamp(lo, hi));
        }
        Ok(out)
    }
}

/// Default column names `f0..f{d-1}` used when a caller has none.
pub fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

/// One sorted-list entry, sized to a 16-byte cell so partition moves stay
/// cheap; `y` is read through `row` and is small enough to stay cached.
#[derive(Clone, Copy)]
struct Entry {
    /// Feature value of this row.
    val: f64,
    row: u32,
    /// Bootstrap multiplicity.
    w: u32,
}

struct TreeScratch<'a> {
    y: &'a [f64],
    n_features: usize,
    /// Active-row entries per feature, each segment sorted by value.
    /// Flat layout: feature f occupies `[f * seg, (f + 1) * seg)`, and a
    /// node's rows sit at the same `[lo, hi)` offsets in every segment.
    lists: Vec<Entry>,
    seg: usize,
    go_left: Vec<bool>,
    buffer: Vec<Entry>,
    feat_pool: Vec<u32>,
    k_feat: usize,
    min_weight: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
    importances: Vec<f64>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
    left_weight: f64,
    left_sum: f64,
}

#[derive(Clone, Copy)]
struct NodeStats {
    weight: f64,
    sum: f64,
    min_y: f64,
    max_y: f64,
}

impl<'a> TreeScratch<'a> {
    /// Aggregates weight, weighted target sum and target range over the
    /// entries at absolute positions `range` of `lists`.
    fn node_stats(&self, range: Range<usize>) -> NodeStats {
        let mut stats = NodeStats {
            weight: 0.0,
            sum: 0.0,
            min_y: f64::INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for entry in &self.lists[range] {
            let value = self.y[entry.row as usize];
            let weight = f64::from(entry.w);
            stats.weight += weight;
            stats.sum += weight * value;
            stats.min_y = stats.min_y.min(value);
            stats.max_y = stats.max_y.max(value);
        }
        stats
    }

    fn best_split(&mut self, lo: usize, hi: usize, stats: NodeStats) -> Option<BestSplit> {
        let d = self.n_features;
        self.feat_pool.clear();
        self.feat_pool.extend(0..d as u32);
        for i in 0..self.k_feat {
            let j = self.rng.gen_range(i..d);
            self.feat_pool.swap(i, j);
        }
        // Scan candidates by ascending index so equal-gain ties resolve
        // to the lowest feature, independent of draw order.
        self.feat_pool[..self.k_feat].sort_unstable();

        let y = self.y;
        let min_weight = self.min_weight;
        let parent_score = stats.sum * stats.sum / stats.weight;
        let mut best: Option<BestSplit> = None;
        let mut best_gain = 0.0;
        for ci in 0..self.k_feat {
            let f = self.feat_pool[ci] as usize;
            let segment = &self.lists[f * self.seg + lo..f * self.seg + hi];
            // Sorted segment: equal endpoints mean a constant feature.
            if segment[0].val == segment[segment.len() - 1].val {
                continue;
            }
            let mut wl = 0.0;
            let mut sl = 0.0;
            let mut iter = segment.iter();
            let mut prev = *iter.next().expect("non-constant segment is non-empty");
            for &next in iter {
                let weight = f64::from(prev.w);
                wl += weight;
                sl += weight * y[prev.row as usize];
                let lower = prev.val;
                prev = next;
                if next.val <= lower {
                    continue;
                }
                let wr = stats.weight - wl;
                if wl < min_weight || wr < min_weight {
                    continue;
                }
                let sr = stats.sum - sl;
                let gain = sl * sl / wl + sr * sr / wr - parent_score;
                if gain > best_gain {
                    // Midpoint between adjacent distinct values; when
                    // rounding lands on the upper value, fall back to the
                    // lower one so `<=` keeps the scanned partition.
                    let mut threshold = lower + (next.val - lower) / 2.0;
                    if threshold >= next.val {
                        threshold = lower;
                    }
                    best_gain = gain;
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold,
                        left_weight: wl,
                        left_sum: sl,
                    });
                }
            }
        }
        best
    }

    /// One pass over the split feature's segment: marks each row's side
    /// in `go_left` and returns (left length, left y-range, right
    /// y-range).
    fn mark_sides(
        &mut self,
        lo: usize,
        hi: usize,
        feature: usize,
        threshold: f64,
    ) -> (usize, (f64, f64), (f64, f64)) {
        let base = feature * self.seg;
        let y = self.y;
        let mut n_left = 0;
        let mut lmin = f64::INFINITY;
        let mut lmax = f64::NEG_INFINITY;
        let mut rmin = f64::INFINITY;
        let mut rmax = f64::NEG_INFINITY;
        let Self { lists, go_left, .. } = self;
        for entry in &lists[base + lo..base + hi] {
            let value = y[entry.row as usize];
            let left = entry.val <= threshold;
            go_left[entry.row as usize] = left;
            if left {
                n_left += 1;
                lmin = lmin.min(value);
                lmax = lmax.max(value);
            } else {
                rmin = rmin.min(value);
                rmax = rmax.max(value);
            }
        }
        (n_left, (lmin, lmax), (rmin, rmax))
    }

    /// Stably reorders every feature segment of `[lo, hi)` so the
    /// `n_left` rows marked in `go_left` come first. Value-constant
    /// segments are left untouched: every later read of such a segment
    /// starts with the endpoint equality check and bails out, so the
    /// stale row order is never observed.
    fn move_segments(&mut self, lo: usize, hi: usize, n_left: usize) {
        let seg = self.seg;
        let n_features = self.n_features;
        let Self {
            lists,
            buffer,
            go_left,
            ..
        } = self;
        let go_left = &go_left[..];
        for f in 0..n_features {
            let segment = &mut lists[f * seg + lo..f * seg + hi];
            if segment[0].val == segment[segment.len() - 1].val {
                continue;
            }
            buffer.clear();
            buffer.extend_from_slice(segment);
            let (left_part, right_part) = segment.split_at_mut(n_left);
            let mut left_iter = left_part.iter_mut();
            let mut right_iter = right_part.iter_mut();
            for &entry in buffer.iter() {
                if go_left[entry.row as usize] {
                    *left_iter.next().expect("left side sized by mark_sides") = entry;
                } else {
                    *right_iter.next().expect("right side sized by mark_sides") = entry;
                }
            }
        }
    }

    fn is_leaf(&self, depth: usize, stats: &NodeStats, len: usize) -> bool {
        depth >= self.max_depth
            || stats.min_y == stats.max_y
            || stats.weight < 2.0 * self.min_weight
            || len < 2
    }

    fn leaf_value(stats: &NodeStats) -> f64 {
        // Pure nodes keep the exact target value; mixed leaves take the
        // weighted mean.
        if stats.min_y == stats.max_y {
            stats.min_y
        } else {
            stats.sum / stats.weight
        }
    }

    fn grow(&mut self, lo: usize, hi: usize, depth: usize, stats: NodeStats) -> u32 {
        let index = self.nodes.len() as u32;
        self.nodes.push(TreeNode::Leaf { value: 0.0 });

        let best = if self.is_leaf(depth, &stats, hi - lo) {
            None
        } else {
            self.best_split(lo, hi, stats)
        };

        match best {
            Some(split) => {
                self.importances[split.feature] += split.gain;
                let (n_left, (lmin, lmax), (rmin, rmax)) =
                    self.mark_sides(lo, hi, split.feature, split.threshold);
                let mid = lo + n_left;
                let left_stats = NodeStats {
                    weight: split.left_weight,
                    sum: split.left_sum,
                    min_y: lmin,
                    max_y: lmax,
                };
                let right_stats = NodeStats {
                    weight: stats.weight - split.left_weight,
                    sum: stats.sum - split.left_sum,
                    min_y: rmin,
                    max_y: rmax,
                };
                let left_is_leaf = self.is_leaf(depth + 1, &left_stats, mid - lo);
                let right_is_leaf = self.is_leaf(depth + 1, &right_stats, hi - mid);
                // Both children terminal: their values are already known,
                // so skip the cross-segment reorder entirely.
                let (left, right) = if left_is_leaf && right_is_leaf {
                    let left = self.nodes.len() as u32;
                    self.nodes.push(TreeNode::Leaf {
                        value: Self::leaf_value(&left_stats),
                    });
                    let right = self.nodes.len() as u32;
                    self.nodes.push(TreeNode::Leaf {
                        value: Self::leaf_value(&right_stats),
                    });
                    (left, right)
                } else {
                    self.move_segments(lo, hi, n_left);
                    let left = self.grow(lo, mid, depth + 1, left_stats);
                    let right = self.grow(mid, hi, depth + 1, right_stats);
                    (left, right)
                };
                self.nodes[index as usize] = TreeNode::Split {
                    feature: split.feature as u32,
                    threshold: split.threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[index as usize] = TreeNode::Leaf {
                    value: Self::leaf_value(&stats),
                };
            }
        }
        index
    }
}

fn train_tree(
    n: usize,
    d: usize,
    y: &[f64],
    sorted: &[Vec<(u32, f64)>],
    params: &ForestParams,
    tree_seed: u64,
) -> (RegressionTree, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);

    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.gen_range(0..n)] += 1;
    }
    let m = counts.iter().filter(|&&c| c > 0).count();

    let mut lists = Vec::with_capacity(d * m);
    for feature_order in sorted {
        lists.extend(feature_order.iter().filter_map(|&(row, val)| {
            let w = counts[row as usize];
            (w > 0).then_some(Entry { val, row, w })
        }));
    }

    let k_feat = ((params.colsample_bynode * d as f64).ceil() as usize).clamp(1, d);
    let min_weight = params.min_child_weight.max(params.min_samples_leaf as f64);

    debug_assert_eq!(lists.len(), d * m);
    let mut scratch = TreeScratch {
        y,
        n_features: d,
        lists,
        seg: m,
        go_left: vec![false; n],
        buffer: Vec::with_capacity(m),
        feat_pool: Vec::with_capacity(d),
        k_feat,
        min_weight,
        max_depth: params.max_depth,
        rng,
        nodes: Vec::new(),
        importances: vec![0.0; d],
    };
    let root_stats = scratch.node_stats(0..m);
    scratch.grow(0, m, 0, root_stats);
    (
        RegressionTree {
            nodes: scratch.nodes,
        },
        scratch.importances,
    )
}

/// Trains a forest on `x` (rows) against `y`.
///
/// Each tree draws `n` rows with replacement; a row's bootstrap
/// multiplicity acts as its sample weight. Identical seeds give
/// identical forests, bit for bit, independent of thread count.
/// `feature_names` may be empty, in which case `f0..` placeholders are
/// stored.
pub fn rf_train(
    x: &FeatureMatrix,
    y: &[f64],
    feature_names: &[String],
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel, LearnError> {
    params.validate()?;
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(LearnError::Empty);
    }
    if x.n_rows() != y.len() {
        return Err(LearnError::LengthMismatch {
            left: x.n_rows(),
            right: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite);
    }
    let names = if feature_names.is_empty() {
        default_feature_names(x.n_cols())
    } else if feature_names.len() == x.n_cols() {
        feature_names.to_vec()
    } else {
        return Err(LearnError::NameCount {
            names: feature_names.len(),
            features: x.n_cols(),
        });
    };

    // Sorted per-feature row lists with values attached, shared by all
    // trees; ties sort by row index so the order is total.
    let sorted: Vec<Vec<(u32, f64)>> = (0..x.n_cols())
        .map(|f| {
            let col = x.col(f);
            let mut order: Vec<(u32, f64)> =
                (0..x.n_rows() as u32).map(|r| (r, col[r as usize])).collect();
            order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            order
        })
        .collect();

    let results: Vec<(RegressionTree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let tree_seed = derive_seed(seed, &[tag::TREE, t as u64]);
            train_tree(x.n_rows(), x.n_cols(), y, &sorted, params, tree_seed)
        })
        .collect();

    let mut trees = Vec::with_capacity(params.n_trees);
    let mut importances = vec![0.0; x.n_cols()];
    for (tree, tree_imp) in results {
        trees.push(tree);
        for (total, part) in importances.iter_mut().zip(&tree_imp) {
            *total += part;
        }
    }

    Ok(ForestModel {
        params: params.clone(),
        seed,
        feature_names: names,
        trees,
        importances,
    })
}

/// Ranks features by forest importance and returns the indices of the top
/// `k`, most important first (ties broken by lower index). `k == d` skips
/// training entirely and returns `0..d` in original order.
pub fn select_features(
    x: &FeatureMatrix,
    y: &[f64],
    k: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<Vec<usize>, LearnError> {
    let d = x.n_cols();
    if k == 0 || k > d {
        return Err(LearnError::KOutOfRange { k, d });
    }
    if k == d {
        return Ok((0..d).collect());
    }
    let model = rf_train(x, y, &[], params, seed)?;
    let importances = model.feature_importances();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor_like_data(n: usize) -> (FeatureMatrix, Vec<f64>) {
        // Deterministic grid: y depends on f0 alone, f1 is noise-free
        // but irrelevant, f2 is constant.
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a = (i % 10) as f64;
            let b = ((i * 7) % 5) as f64;
            rows.push(vec![a, b, 3.0]);
            y.push(if a < 5.0 { 0.2 } else { 0.8 });
        }
        (FeatureMatrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn learns_a_step_function() {
        let (x, y) = xor_like_data(200);
        let params = ForestParams {
            n_trees: 30,
            ..ForestParams::default()
        };
        let model = rf_train(&x, &y, &[], &params, 7).unwrap();
        let preds = model.predict(&x).unwrap();
        for (p, t) in preds.iter().zip(&y) {
            assert!((p - t).abs() < 0.05, "pred {p} vs target {t}");
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let (x, y) = xor_like_data(120);
        let params = ForestParams {
            n_trees: 20,
            ..ForestParams::default()
        };
        let a = rf_train(&x, &y, &[], &params, 42).unwrap();
        let b = rf_train(&x, &y, &[], &params, 42).unwrap();
        assert_eq!(a, b);
        let c = rf_train(&x, &y, &[], &params, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn deterministic_with_single_thread_pool() {
        let (x, y) = xor_like_data(120);
        let params = ForestParams {
            n_trees: 16,
            ..ForestParams::default()
        };
        let parallel = rf_train(&x, &y, &[], &params, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| rf_train(&x, &y, &[], &params, 5).unwrap());
        assert_eq!(parallel, serial);
    }

    #[test]
    fn predictions_bounded_by_target_range() {
        let (x, y) = xor_like_data(150);
        let model = rf_train(&x, &y, &[], &ForestParams::default(), 11).unwrap();
        let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let probe = FeatureMatrix::from_rows(&[vec![-100.0, 50.0, 0.0], vec![1e6, -1e6, 9.9]]).unwrap();
        for p in model.predict(&probe).unwrap() {
            assert!(p >= lo && p <= hi);
        }
    }

    #[test]
    fn constant_target_gives_constant_leaf() {
        let (x, _) = xor_like_data(50);
        let y = vec![0.25; 50];
        let model = rf_train(&x, &y, &[], &ForestParams::default(), 3).unwrap();
        for p in model.predict(&x).unwrap() {
            assert_eq!(p, 0.25);
        }
        assert!(model.feature_importances().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn importances_identify_signal_feature() {
        let (x, y) = xor_like_data(200);
        let model = rf_train(&x, &y, &[], &ForestParams::default(), 9).unwrap();
        let imp = model.feature_importances();
        assert!(imp[0] > imp[1]);
        assert_eq!(imp[2], 0.0);
    }

    #[test]
    fn single_row_trains_to_leaf() {
        let x = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let model = rf_train(&x, &[0.7], &[], &ForestParams::default(), 1).unwrap();
        assert_eq!(model.predict(&x).unwrap(), vec![0.7]);
    }

    #[test]
    fn selection_prefers_informative_features() {
        let (x, y) = xor_like_data(200);
        let selected = select_features(&x, &y, 1, &ForestParams::default(), 21).unwrap();
        assert_eq!(selected, vec![0]);
        let all = select_features(&x, &y, 3, &ForestParams::default(), 21).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(select_features(&x, &y, 4, &ForestParams::default(), 21).is_err());
        assert!(select_features(&x, &y, 0, &ForestParams::default(), 21).is_err());
    }

    #[test]
    fn bad_params_rejected() {
        let (x, y) = xor_like_data(10);
        let params = ForestParams {
            colsample_bynode: 0.0,
            ..ForestParams::default()
        };
        assert!(matches!(
            rf_train(&x, &y, &[], &params, 0),
            Err(LearnError::BadParams)
        ));
    }

    #[test]
    fn name_length_checked() {
        let (x, y) = xor_like_data(10);
        let names = vec!["a".to_string()];
        assert!(matches!(
            rf_train(&x, &y, &names, &ForestParams::default(), 0),
            Err(LearnError::NameCount { .. })
        ));
    }

    #[test]
    fn model_json_roundtrip() {
        let (x, y) = xor_like_data(40);
        let params = ForestParams {
            n_trees: 5,
            ..ForestParams::default()
        };
        let model = rf_train(&x, &y, &[], &params, 2).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: ForestModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}

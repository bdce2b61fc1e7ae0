//! Bipartite matching of query predictions to ground-truth instances: a cost
//! built from class probability, soft dice, and BCE, minimized exactly by a
//! potentials-based Hungarian solver.

use crate::loss::{PreparedGt, bce_mean_value, sigmoid_scalar, soft_dice_value};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { cls: 2.0, dice: 5.0, bce: 5.0 }
    }
}

/// Matched (query_index, gt_index) pairs; queries absent from `pairs` are
/// assigned no-object. Injective both ways, |pairs| = min(K_q, num_gt).
#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// gt index for each query, no-object queries = None.
    pub fn gt_of_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// cost[q][g] = cls·(1−p_class) + dice·(1−soft-dice) + bce·mean-BCE, all on
/// detached values (the match itself is not differentiated through).
pub fn cost_matrix(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    gts: &[PreparedGt],
    w: &CostWeights,
) -> Vec<Vec<f64>> {
    let k = class_logits.shape()[0];
    let num_class_slots = class_logits.shape()[1];
    let cells = mask_logits.numel() / mask_logits.shape()[0];
    let mut cost = vec![vec![0.0; gts.len()]; k];
    for q in 0..k {
        let logits_row: Vec<f64> = (0..num_class_slots)
            .map(|c| class_logits.at(&[q, c]))
            .collect();
        let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits_row.iter().map(|l| (l - max).exp()).sum();
        let mask_row = &mask_logits.data()[q * cells..(q + 1) * cells];
        let probs: Vec<f64> = mask_row.iter().map(|&l| sigmoid_scalar(l)).collect();
        for (g, gt) in gts.iter().enumerate() {
            let p_class = (logits_row[gt.class_id] - max).exp() / z;
            let dice = soft_dice_value(&probs, gt.mask.data());
            let bce = bce_mean_value(mask_row, gt.mask.data());
            cost[q][g] = w.cls * (1.0 - p_class) + w.dice * (1.0 - dice) + w.bce * bce;
        }
    }
    cost
}

/// Exact minimal assignment for a rectangular cost matrix with rows ≤ cols;
/// returns the column chosen for each row. O(rows²·cols) potentials method.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment expects rows <= cols");
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = 1-based row currently assigned to column j; 0 = free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal query↔gt matching. Empty gts → empty match (all queries
/// no-object). More gts than queries → every query matched, extra gts
/// dropped from supervision.
pub fn hungarian_match(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    gts: &[PreparedGt],
    w: &CostWeights,
) -> MatchResult {
    if gts.is_empty() {
        return MatchResult::default();
    }
    let cost = cost_matrix(class_logits, mask_logits, gts, w);
    let k = cost.len();
    let n = gts.len();
    let pairs = if k <= n {
        solve_assignment(&cost)
            .into_iter()
            .enumerate()
            .map(|(q, g)| (q, g))
            .collect()
    } else {
        // Transpose so rows (gts) <= cols (queries).
        let t: Vec<Vec<f64>> = (0..n).map(|g| (0..k).map(|q| cost[q][g]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = solve_assignment(&t)
            .into_iter()
            .enumerate()
            .map(|(g, q)| (q, g))
            .collect();
        pairs.sort_unstable();
        pairs
    };
    MatchResult { pairs }
}

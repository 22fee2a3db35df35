//! Matched clustering accuracy, attention masks and cost accounting.

use serde::{Deserialize, Serialize};

use crate::backbone::VitConfig;
use crate::error::{AfError, Result};
use crate::numcore::Matrix;

/// Minimum-cost perfect assignment of an `n x n` cost matrix.
/// Returns `assign[row] = column`. Exact, O(n^3).
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
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
            }
            for j in 0..=n {
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccReport {
    pub all: f64,
    pub old: f64,
    pub new: f64,
    /// `permutation[predicted] = true class`.
    pub permutation: Vec<usize>,
    pub count_all: usize,
    pub count_old: usize,
    pub count_new: usize,
}

pub const CSV_HEADER: &str = "run_id,all,old,new,seed,strategy,tau";

impl AccReport {
    pub fn csv_row(&self, run_id: &str, seed: u64, strategy: &str, tau: f64) -> String {
        format!("{run_id},{:.6},{:.6},{:.6},{seed},{strategy},{tau}", self.all, self.old, self.new)
    }
}

/// Accuracy after the best one-to-one relabeling of predictions. Old and New
/// are the subsets whose true class is / is not in `old_classes`, scored under
/// the same permutation.
pub fn hungarian_accuracy(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
    old_classes: &[usize],
) -> Result<AccReport> {
    if y_true.len() != y_pred.len() {
        return Err(AfError::Shape(format!("{} labels against {} predictions", y_true.len(), y_pred.len())));
    }
    let mut counts = vec![vec![0i64; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= num_classes {
                return Err(AfError::LabelOutOfRange { label, classes: num_classes });
            }
        }
        counts[p][t] += 1;
    }
    let cost: Vec<Vec<i64>> = counts.iter().map(|row| row.iter().map(|&c| -c).collect()).collect();
    let permutation = min_cost_assignment(&cost);
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let split = usize::from(!old_classes.contains(&t));
        totals[split] += 1;
        if permutation[p] == t {
            hits[split] += 1;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(AccReport {
        all: ratio(hits[0] + hits[1], totals[0] + totals[1]),
        old: ratio(hits[0], totals[0]),
        new: ratio(hits[1], totals[1]),
        permutation,
        count_all: y_true.len(),
        count_old: totals[0],
        count_new: totals[1],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub cells: Vec<bool>,
    pub retained_mass: f64,
    pub threshold: f64,
}

impl MaskGrid {
    /// Marks the given grid positions.
    pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Self {
        let mut cells = vec![false; height * width];
        for &i in indices {
            cells[i] = true;
        }
        MaskGrid { height, width, cells, retained_mass: f64::NAN, threshold: f64::NAN }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// ASCII PGM with max value 1.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n1\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<&str> = (0..self.width)
                .map(|c| if self.cells[r * self.width + c] { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Smallest set of patches, added in descending attention, whose renormalized
/// mass reaches `threshold`.
pub fn attention_mask(attention: &[f64], height: usize, width: usize, threshold: f64) -> Result<MaskGrid> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(AfError::Contract(format!("mask threshold must lie in (0, 1], got {threshold}")));
    }
    if attention.len() != height * width {
        return Err(AfError::Shape(format!("{} attention values for a {height}x{width} grid", attention.len())));
    }
    let total: f64 = attention.iter().sum();
    if !(total > 0.0) {
        return Err(AfError::Numerical("attention carries no patch mass".into()));
    }
    if threshold >= 1.0 {
        return Ok(MaskGrid { height, width, cells: vec![true; attention.len()], retained_mass: 1.0, threshold });
    }
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    let mut cells = vec![false; attention.len()];
    let mut mass = 0.0;
    for (added, &i) in order.iter().enumerate() {
        cells[i] = true;
        mass += attention[i] / total;
        if added + 1 == order.len() {
            mass = 1.0;
        }
        if mass >= threshold {
            break;
        }
    }
    Ok(MaskGrid { height, width, cells, retained_mass: mass, threshold })
}

/// Head-averaged CLS row of `maps`, scattered onto the full patch grid.
/// Pruned patches receive zero.
pub fn cls_patch_attention(maps: &[Matrix], original_index: &[usize], num_patches: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_patches];
    for m in maps {
        for (k, &orig) in original_index.iter().enumerate() {
            out[orig] += m.get(0, k + 1) / maps.len() as f64;
        }
    }
    out
}

/// FLOPs counted per multiply-add. The ViT-B/16 224px reference of 16.87G
/// matches the MAC count, so one multiply-add counts as one FLOP.
pub const FLOPS_PER_MAC: f64 = 1.0;

/// Multiply-adds of one transformer block over `s` tokens.
pub fn block_macs(cfg: &VitConfig, s: usize) -> f64 {
    let (s, d) = (s as f64, cfg.embed_dim as f64);
    let qkv = 3.0 * s * d * d;
    let attention = 2.0 * s * s * d;
    let proj = s * d * d;
    let ffn = 2.0 * s * d * cfg.mlp_hidden() as f64;
    qkv + attention + proj + ffn
}

/// Test-time FLOPs with `seq_len` tokens (CLS included) in every block.
/// `with_af` adds one query scoring per tapped block.
pub fn estimate_flops(cfg: &VitConfig, seq_len: usize, with_af: bool) -> f64 {
    estimate_flops_pruned(cfg, seq_len, seq_len, with_af)
}

/// Test-time FLOPs when blocks `1..L-1` see `seq_len` tokens and the last
/// block sees `final_len`.
pub fn estimate_flops_pruned(cfg: &VitConfig, seq_len: usize, final_len: usize, with_af: bool) -> f64 {
    let patches = seq_len.saturating_sub(1) as f64;
    let embed = patches * cfg.patch_dim() as f64 * cfg.embed_dim as f64;
    let tapped = (cfg.num_blocks - 1) as f64 * block_macs(cfg, seq_len);
    let last = block_macs(cfg, final_len);
    let scoring = if with_af {
        (cfg.num_blocks - 1) as f64 * seq_len as f64 * cfg.embed_dim as f64
    } else {
        0.0
    };
    FLOPS_PER_MAC * (embed + tapped + last + scoring)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub head: usize,
    pub time: usize,
    pub total: usize,
}

/// Parameter totals. At test time a TIME module keeps only its query.
pub fn count_params(cfg: &VitConfig, mode: Mode, with_af: bool, time_hidden: usize, proj_hidden_ratio: usize) -> ParamCount {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let linear = |i: usize, o: usize| i * o + o;
    let ln = 2 * d;
    let block = ln + linear(d, 3 * d) + linear(d, d) + ln + linear(d, h) + linear(h, d);
    let backbone = linear(cfg.patch_dim(), d) + d + (cfg.num_patches() + 1) * d + cfg.num_blocks * block + ln;

    let ph = proj_hidden_ratio * d;
    let head = linear(d, ph) + linear(ph, ph) + linear(ph, d) + cfg.num_total_classes * d;

    let per_module = match mode {
        Mode::Test => d,
        Mode::Train => d + ln + linear(d, time_hidden) + linear(time_hidden, d) + linear(d, cfg.num_known_classes),
    };
    let time = if with_af { (cfg.num_blocks - 1) * per_module } else { 0 };
    ParamCount { backbone, head, time, total: backbone + head + time }
}

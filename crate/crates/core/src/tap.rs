//! Token adaptive pruning.
//!
//! Per-block scores are softmaxed over the patch tokens (CLS dropped) and
//! averaged into one importance distribution. The adaptive strategy prunes the
//! longest low-importance prefix whose cumulative mass stays within `tau`;
//! the other strategies exist for ablations.

use serde::{Deserialize, Serialize};

use crate::backbone::RouteInput;
use crate::error::{AfError, Result};
use crate::numcore::matrix::softmax_in_place;
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Adaptive,
    FixedK,
    ClsAttention,
    PenultimateOnly,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Adaptive,
        Strategy::FixedK,
        Strategy::ClsAttention,
        Strategy::PenultimateOnly,
        Strategy::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::FixedK => "fixed_k",
            Strategy::ClsAttention => "cls_attention",
            Strategy::PenultimateOnly => "penultimate_only",
            Strategy::None => "none",
        }
    }

    /// Whether the strategy consumes TIME scores.
    pub fn uses_time(self) -> bool {
        matches!(self, Strategy::Adaptive | Strategy::FixedK | Strategy::PenultimateOnly)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = AfError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| AfError::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPolicy {
    #[default]
    SingleView,
    MultiView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub tau: f64,
    pub strategy: Strategy,
    /// Tokens removed by the fixed-k strategy.
    pub fixed_k: usize,
    pub view_policy: ViewPolicy,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { tau: 0.1, strategy: Strategy::Adaptive, fixed_k: 5, view_policy: ViewPolicy::SingleView }
    }
}

impl PruneConfig {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(AfError::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.strategy == Strategy::FixedK && self.fixed_k >= num_patches {
            return Err(AfError::Config(format!(
                "fixed_k {} must be below the patch count {num_patches}",
                self.fixed_k
            )));
        }
        Ok(())
    }
}

/// Fused importance over patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleScore {
    pub s_m: Vec<f64>,
    /// Softmaxed per-layer scores, CLS removed.
    pub per_layer: Vec<Vec<f64>>,
    /// Grid position of each entry.
    pub source_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// Ascending grid positions kept for the last block.
    pub retained: Vec<usize>,
    /// Grid positions removed, in pruning order.
    pub pruned: Vec<usize>,
    pub pruned_mass: f64,
    pub strategy: Strategy,
}

impl PruneOutcome {
    /// Keeps every patch.
    pub fn identity(source_indices: &[usize]) -> Self {
        let mut retained = source_indices.to_vec();
        retained.sort_unstable();
        PruneOutcome { retained, pruned: Vec::new(), pruned_mass: 0.0, strategy: Strategy::None }
    }
}

/// Drops the CLS entry of every layer, softmaxes the rest and averages.
pub fn fuse_scores(scores: &[Vec<f64>], source_indices: &[usize]) -> Result<MultiScaleScore> {
    let first = scores.first().ok_or_else(|| AfError::Contract("no score vectors to fuse".into()))?;
    if first.len() < 2 {
        return Err(AfError::Shape("score vector has no patch entries".into()));
    }
    let n = first.len() - 1;
    if source_indices.len() != n {
        return Err(AfError::Shape(format!("{n} scores for {} patches", source_indices.len())));
    }
    let mut per_layer = Vec::with_capacity(scores.len());
    for s in scores {
        if s.len() != n + 1 {
            return Err(AfError::Shape(format!("score lengths {} and {} differ", n + 1, s.len())));
        }
        let mut row = s[1..].to_vec();
        softmax_in_place(&mut row);
        per_layer.push(row);
    }
    let count = per_layer.len() as f64;
    let s_m = (0..n).map(|i| per_layer.iter().map(|r| r[i]).sum::<f64>() / count).collect();
    Ok(MultiScaleScore { s_m, per_layer, source_indices: source_indices.to_vec() })
}

/// Positions sorted by ascending score, ties by ascending grid position.
fn ascending_order(score: &MultiScaleScore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.s_m.len()).collect();
    order.sort_by(|&a, &b| {
        score.s_m[a]
            .total_cmp(&score.s_m[b])
            .then(score.source_indices[a].cmp(&score.source_indices[b]))
    });
    order
}

fn outcome_from_prefix(score: &MultiScaleScore, order: &[usize], cut: usize, mass: f64, strategy: Strategy) -> PruneOutcome {
    let pruned: Vec<usize> = order[..cut].iter().map(|&p| score.source_indices[p]).collect();
    let mut retained: Vec<usize> = order[cut..].iter().map(|&p| score.source_indices[p]).collect();
    retained.sort_unstable();
    PruneOutcome { retained, pruned, pruned_mass: mass, strategy }
}

/// Prunes the longest ascending prefix whose cumulative mass is at most `tau`.
pub fn adaptive_prune(score: &MultiScaleScore, tau: f64) -> Result<PruneOutcome> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(AfError::Contract(format!("tau must lie in [0, 1], got {tau}")));
    }
    let order = ascending_order(score);
    if tau >= 1.0 {
        log::warn!("tau = 1 prunes every patch token; only CLS reaches the last block");
        let mass = order.iter().map(|&p| score.s_m[p]).sum();
        return Ok(outcome_from_prefix(score, &order, order.len(), mass, Strategy::Adaptive));
    }
    let mut mass = 0.0;
    let mut cut = 0;
    for &p in &order {
        let next = mass + score.s_m[p];
        if next > tau {
            break;
        }
        mass = next;
        cut += 1;
    }
    if cut == order.len() && cut > 0 {
        log::warn!("tau = {tau} prunes every patch token; only CLS reaches the last block");
    }
    Ok(outcome_from_prefix(score, &order, cut, mass, Strategy::Adaptive))
}

/// Prunes exactly the `k` lowest-scoring patches.
pub fn fixed_k_prune(score: &MultiScaleScore, k: usize) -> Result<PruneOutcome> {
    let n = score.s_m.len();
    if k >= n {
        return Err(AfError::Contract(format!("fixed k = {k} must be below N = {n}")));
    }
    let order = ascending_order(score);
    let mass = order[..k].iter().map(|&p| score.s_m[p]).sum();
    Ok(outcome_from_prefix(score, &order, k, mass, Strategy::FixedK))
}

/// Head-averaged CLS-to-patch attention, renormalized over the patches.
pub fn cls_attention_scores(attn: &[Matrix], source_indices: &[usize]) -> Result<MultiScaleScore> {
    let first = attn.first().ok_or_else(|| AfError::Contract("no attention maps".into()))?;
    let n = source_indices.len();
    if first.cols() != n + 1 {
        return Err(AfError::Shape(format!("attention width {} for {n} patches", first.cols())));
    }
    let mut avg = vec![0.0; n];
    for m in attn {
        if m.cols() != n + 1 || m.rows() == 0 {
            return Err(AfError::Shape("attention maps differ in shape".into()));
        }
        for (a, v) in avg.iter_mut().zip(&m.row(0)[1..]) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= attn.len() as f64;
    }
    let total: f64 = avg.iter().sum();
    if total <= 0.0 {
        return Err(AfError::Numerical("CLS row carries no patch attention".into()));
    }
    let s_m: Vec<f64> = avg.iter().map(|v| v / total).collect();
    Ok(MultiScaleScore { per_layer: vec![s_m.clone()], s_m, source_indices: source_indices.to_vec() })
}

/// Builds the importance distribution the configured strategy ranks by.
/// `None` for the strategy that never prunes.
pub fn strategy_score(input: &RouteInput<'_>, cfg: &PruneConfig) -> Result<Option<MultiScaleScore>> {
    let raw = |vectors: &[crate::time::ScoreVector]| -> Result<Vec<Vec<f64>>> {
        if vectors.is_empty() {
            return Err(AfError::Contract(format!(
                "strategy {} needs TIME scores but none were computed",
                cfg.strategy
            )));
        }
        Ok(vectors.iter().map(|s| s.values(input.graph).to_vec()).collect())
    };
    match cfg.strategy {
        Strategy::None => Ok(None),
        Strategy::Adaptive | Strategy::FixedK => {
            Ok(Some(fuse_scores(&raw(input.scores)?, input.original_index)?))
        }
        Strategy::PenultimateOnly => {
            let last = input.scores.len().saturating_sub(1);
            Ok(Some(fuse_scores(&raw(&input.scores[last..])?, input.original_index)?))
        }
        Strategy::ClsAttention => {
            Ok(Some(cls_attention_scores(input.tapped_attention, input.original_index)?))
        }
    }
}

/// Routing for one view. With `prune` false the view passes unpruned.
pub fn route_single(input: &RouteInput<'_>, cfg: &PruneConfig, prune: bool) -> Result<PruneOutcome> {
    if !prune {
        return Ok(PruneOutcome::identity(input.original_index));
    }
    let Some(score) = strategy_score(input, cfg)? else {
        return Ok(PruneOutcome::identity(input.original_index));
    };
    let mut outcome = match cfg.strategy {
        Strategy::FixedK => fixed_k_prune(&score, cfg.fixed_k)?,
        _ => adaptive_prune(&score, cfg.tau)?,
    };
    outcome.strategy = cfg.strategy;
    Ok(outcome)
}

/// Whether each view is pruned: two views in training, one at test time.
pub fn apply_view_policy(policy: ViewPolicy, training: bool, views: usize) -> Result<Vec<bool>> {
    match (training, views) {
        (true, 2) => Ok(match policy {
            ViewPolicy::SingleView => vec![true, false],
            ViewPolicy::MultiView => vec![true, true],
        }),
        (true, n) => Err(AfError::Contract(format!("training needs two views, got {n}"))),
        (false, 1) => Ok(vec![true]),
        (false, n) => Err(AfError::Contract(format!("evaluation takes one view, got {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    fn score(s_m: Vec<f64>) -> MultiScaleScore {
        let n = s_m.len();
        MultiScaleScore { per_layer: vec![s_m.clone()], s_m, source_indices: (0..n).collect() }
    }

    fn is_partition(o: &PruneOutcome, n: usize) -> bool {
        let mut all: Vec<usize> = o.retained.iter().chain(&o.pruned).copied().collect();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn fuse_single_layer_is_softmax() {
        let raw = vec![9.0, 1.0, 2.0, 3.0];
        let f = fuse_scores(&[raw], &[0, 1, 2]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((f.s_m[i] - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_constant_layers_is_uniform() {
        let f = fuse_scores(&[vec![5.0; 9], vec![-2.0; 9]], &(0..8).collect::<Vec<_>>()).unwrap();
        assert!(f.s_m.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn fuse_two_layers_by_hand() {
        let a = [0.5f64, 1.0, -1.0];
        let b = [2.0f64, 0.0, 0.0];
        let f = fuse_scores(&[vec![7.0, a[0], a[1], a[2]], vec![-3.0, b[0], b[1], b[2]]], &[0, 1, 2]).unwrap();
        let za: f64 = a.iter().map(|v| v.exp()).sum();
        let zb: f64 = b.iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            let expect = (a[i].exp() / za + b[i].exp() / zb) / 2.0;
            assert!((f.s_m[i] - expect).abs() < 1e-15);
        }
        assert!((f.s_m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_errors() {
        assert!(fuse_scores(&[], &[]).is_err());
        assert!(fuse_scores(&[vec![0.0; 4], vec![0.0; 5]], &[0, 1, 2]).is_err());
    }

    #[test]
    fn adaptive_tau_zero_prunes_nothing() {
        let o = adaptive_prune(&score(vec![0.1, 0.2, 0.3, 0.4]), 0.0).unwrap();
        assert!(o.pruned.is_empty());
        assert_eq!(o.retained, vec![0, 1, 2, 3]);
    }

    #[test]
    fn adaptive_uniform_196_prunes_39() {
        let o = adaptive_prune(&score(vec![1.0 / 196.0; 196]), 0.2).unwrap();
        assert_eq!(o.pruned.len(), 39);
        assert_eq!(o.pruned, (0..39).collect::<Vec<_>>());
        assert!(o.pruned_mass <= 0.2);
    }

    #[test]
    fn adaptive_tau_one_prunes_every_patch() {
        let o = adaptive_prune(&score(vec![0.25; 4]), 1.0).unwrap();
        assert_eq!(o.pruned.len(), 4);
        assert!(o.retained.is_empty());
        assert!(adaptive_prune(&score(vec![0.25; 4]), 1.5).is_err());
    }

    #[test]
    fn fixed_k_cases() {
        let s = score(vec![0.3, 0.1, 0.4, 0.2]);
        assert_eq!(fixed_k_prune(&s, 0).unwrap().retained, vec![0, 1, 2, 3]);
        let o = fixed_k_prune(&s, 3).unwrap();
        assert_eq!(o.retained, vec![2]);
        assert_eq!(o.pruned, vec![1, 3, 0]);
        assert!(fixed_k_prune(&s, 4).is_err());
    }

    #[test]
    fn cls_attention_cases() {
        let uniform = Matrix::filled(5, 5, 0.2);
        let s = cls_attention_scores(&[uniform], &[0, 1, 2, 3]).unwrap();
        assert!(s.s_m.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let h1 = Matrix::from_rows(&[vec![0.4, 0.3, 0.2, 0.1], vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let h2 = Matrix::from_rows(&[vec![0.1, 0.1, 0.1, 0.7], vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let s = cls_attention_scores(&[h1, h2], &[0, 1, 2]).unwrap();
        let mean = [0.2, 0.15, 0.4];
        let total: f64 = mean.iter().sum();
        for i in 0..3 {
            assert!((s.s_m[i] - mean[i] / total).abs() < 1e-15);
        }
        assert!((s.s_m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn view_policy_cases() {
        assert_eq!(apply_view_policy(ViewPolicy::SingleView, true, 2).unwrap(), vec![true, false]);
        assert_eq!(apply_view_policy(ViewPolicy::MultiView, true, 2).unwrap(), vec![true, true]);
        assert_eq!(apply_view_policy(ViewPolicy::MultiView, false, 1).unwrap(), vec![true]);
        assert!(apply_view_policy(ViewPolicy::SingleView, true, 1).is_err());
    }

    #[test]
    fn outcome_json_round_trip() {
        let o = adaptive_prune(&score(vec![0.05, 0.5, 0.05, 0.4]), 0.1).unwrap();
        let text = serde_json::to_string(&o).unwrap();
        assert!(text.contains("\"strategy\":\"adaptive\""));
        let back: PruneOutcome = serde_json::from_str(&text).unwrap();
        assert_eq!(back, o);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }

    fn raw_layers() -> impl proptest::strategy::Strategy<Value = Vec<Vec<f64>>> {
        (2usize..20, 1usize..4).prop_flat_map(|(n, layers)| {
            prop::collection::vec(prop::collection::vec(-4.0f64..4.0, n + 1), layers)
        })
    }

    proptest! {
        #[test]
        fn adaptive_contract(layers in raw_layers(), tau in 0.0f64..1.0) {
            let n = layers[0].len() - 1;
            let idx: Vec<usize> = (0..n).collect();
            let s = fuse_scores(&layers, &idx).unwrap();
            prop_assert!((s.s_m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let o = adaptive_prune(&s, tau).unwrap();
            prop_assert!(is_partition(&o, n));
            prop_assert!(o.pruned_mass <= tau);
            let max_pruned = o.pruned.iter().map(|&p| s.s_m[p]).fold(f64::MIN, f64::max);
            for &r in &o.retained {
                if o.pruned.is_empty() || s.s_m[r] <= max_pruned {
                    prop_assert!(o.pruned_mass + s.s_m[r] > tau);
                }
            }
        }

        #[test]
        fn adaptive_is_monotone_in_tau(layers in raw_layers(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let n = layers[0].len() - 1;
            let s = fuse_scores(&layers, &(0..n).collect::<Vec<_>>()).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = adaptive_prune(&s, lo).unwrap();
            let large = adaptive_prune(&s, hi).unwrap();
            prop_assert!(small.pruned.iter().all(|p| large.pruned.contains(p)));
        }

        #[test]
        fn per_layer_shift_leaves_outcome(layers in raw_layers(), shift in -50.0f64..50.0, tau in 0.0f64..1.0) {
            let n = layers[0].len() - 1;
            let idx: Vec<usize> = (0..n).collect();
            let base = fuse_scores(&layers, &idx).unwrap();
            let mut moved = layers.clone();
            for v in &mut moved[0] {
                *v += shift;
            }
            let shifted = fuse_scores(&moved, &idx).unwrap();
            for (x, y) in base.s_m.iter().zip(&shifted.s_m) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let a = adaptive_prune(&base, tau).unwrap();
            let b = adaptive_prune(&shifted, tau).unwrap();
            prop_assert_eq!(a.retained, b.retained);
        }

        #[test]
        fn tiny_tau_equals_fixed_zero(layers in raw_layers()) {
            let n = layers[0].len() - 1;
            let s = fuse_scores(&layers, &(0..n).collect::<Vec<_>>()).unwrap();
            let min = s.s_m.iter().copied().fold(f64::MAX, f64::min);
            let a = adaptive_prune(&s, min / 2.0).unwrap();
            let f = fixed_k_prune(&s, 0).unwrap();
            prop_assert_eq!(a.retained, f.retained);
            prop_assert!(a.pruned.is_empty());
        }

        #[test]
        fn fixed_k_matches_sort_oracle(values in prop::collection::vec(0.0f64..1.0, 2..30), k in 0usize..29) {
            let n = values.len();
            let k = k % n;
            let o = fixed_k_prune(&score(values.clone()), k).unwrap();
            let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            prop_assert_eq!(o.pruned, expect);
        }

        #[test]
        fn penultimate_only_is_last_slice(layers in raw_layers()) {
            let n = layers[0].len() - 1;
            let idx: Vec<usize> = (0..n).collect();
            let last = fuse_scores(&layers[layers.len() - 1..], &idx).unwrap();
            let full = fuse_scores(&layers, &idx).unwrap();
            prop_assert_eq!(&last.per_layer[0], full.per_layer.last().unwrap());
        }
    }
}

//! ViT-style encoder: patch embedding, CLS token, pre-norm transformer blocks.
//!
//! [`forward_with_taps`] runs blocks `1..L-1` on the full sequence, scores each
//! block output with its TIME query, lets a router pick the patch tokens that
//! enter block `L`, and returns every intermediate state for inspection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfError, Result};
use crate::numcore::{Binding, Graph, Matrix, ParamId, ParamStore, Var};
use crate::tap::PruneOutcome;
use crate::time::{ScoreVector, TimeModule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_known_classes: usize,
    pub num_total_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// 32px single-channel images, 8px patches (N = 16), D = 32, L = 4, 2 heads.
    pub fn desk() -> Self {
        VitConfig {
            image_side: 32,
            patch_side: 8,
            channels: 1,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 2,
            mlp_ratio: 4.0,
            num_known_classes: 4,
            num_total_classes: 8,
        }
    }

    /// ViT-B/16 geometry at the given input resolution (used for cost accounting).
    pub fn vit_b16(image_side: usize) -> Self {
        VitConfig {
            image_side,
            patch_side: 16,
            channels: 3,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            num_known_classes: 100,
            num_total_classes: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AfError::Config(msg));
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return fail(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks < 2 {
            return fail(format!("num_blocks must be at least 2, got {}", self.num_blocks));
        }
        if self.embed_dim < 2 || self.channels == 0 {
            return fail("embed_dim must be >= 2 and channels >= 1".into());
        }
        if self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.num_known_classes == 0 || self.num_known_classes >= self.num_total_classes {
            return fail(format!(
                "need 0 < num_known_classes ({}) < num_total_classes ({})",
                self.num_known_classes, self.num_total_classes
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// N, the number of patch tokens.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Flattened patch length `P * P * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// A square image stored row-major as `[y][x][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Image { side, channels, data: vec![0.0; side * side * channels] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.side + x) * self.channels + c]
    }

    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.side + x) * self.channels + c]
    }

    /// Flattened patch `index` (row-major over the patch grid), ordered `[py][px][c]`.
    pub fn patch(&self, index: usize, patch_side: usize) -> Vec<f64> {
        let grid = self.side / patch_side;
        let (gy, gx) = (index / grid, index % grid);
        let mut out = Vec::with_capacity(patch_side * patch_side * self.channels);
        for py in 0..patch_side {
            for px in 0..patch_side {
                for c in 0..self.channels {
                    out.push(self.at(gy * patch_side + py, gx * patch_side + px, c));
                }
            }
        }
        out
    }

    /// Overwrites patch `index` with `values` laid out as in [`Image::patch`].
    pub fn set_patch(&mut self, index: usize, patch_side: usize, values: &[f64]) {
        let grid = self.side / patch_side;
        let (gy, gx) = (index / grid, index % grid);
        let mut k = 0;
        for py in 0..patch_side {
            for px in 0..patch_side {
                for c in 0..self.channels {
                    *self.at_mut(gy * patch_side + py, gx * patch_side + px, c) = values[k];
                    k += 1;
                }
            }
        }
    }
}

/// Tokens flowing through the encoder. Row 0 is always the CLS token; row
/// `i + 1` is the patch at grid position `original_index[i]`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid_height: usize,
    pub grid_width: usize,
    pub original_index: Vec<usize>,
}

impl TokenSequence {
    pub fn num_patches(&self) -> usize {
        self.original_index.len()
    }

    pub fn len(&self) -> usize {
        self.original_index.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn apply(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        g.layernorm(x, b.var(self.gain), b.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weight `fan_in x fan_out`, entries truncated-normal with the given std, zero bias.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{prefix}.weight"),
                Matrix::trunc_normal(fan_in, fan_out, std, rng),
            ),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn apply(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.var(self.weight))?;
        g.add_row(y, b.var(self.bias))
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Output pooling of the final token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every remaining token, CLS included.
    #[default]
    Mean,
    /// The CLS token alone.
    Cls,
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
}

impl Backbone {
    /// Registers the encoder parameters under `backbone.*`.
    ///
    /// The patch projection uses a `1/sqrt(fan_in)` std so tokens are O(1)
    /// regardless of patch size; everything else uses truncated normal 0.02.
    pub fn init<R: Rng + ?Sized>(cfg: &VitConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_std = 1.0 / (cfg.patch_dim() as f64).sqrt();
        let patch_embed = Linear::init(store, "backbone.patch", cfg.patch_dim(), d, patch_std, rng);
        let cls = store.add("backbone.cls", Matrix::trunc_normal(1, d, INIT_STD, rng));
        let pos = store.add(
            "backbone.pos",
            Matrix::trunc_normal(cfg.num_patches() + 1, d, INIT_STD, rng),
        );
        let blocks = (0..cfg.num_blocks)
            .map(|l| {
                let p = format!("backbone.blocks.{l}");
                BlockParams {
                    norm1: LayerNormParams::init(store, &format!("{p}.norm1"), d),
                    qkv: Linear::init(store, &format!("{p}.attn.qkv"), d, 3 * d, INIT_STD, rng),
                    proj: Linear::init(store, &format!("{p}.attn.proj"), d, d, INIT_STD, rng),
                    norm2: LayerNormParams::init(store, &format!("{p}.norm2"), d),
                    fc1: Linear::init(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden(), INIT_STD, rng),
                    fc2: Linear::init(store, &format!("{p}.mlp.fc2"), cfg.mlp_hidden(), d, INIT_STD, rng),
                }
            })
            .collect();
        let norm = LayerNormParams::init(store, "backbone.norm", d);
        Ok(Backbone { cfg: cfg.clone(), patch_embed, cls, pos, blocks, norm })
    }

    /// True for parameter names belonging to the last block or the final norm.
    pub fn is_last_block_param(&self, name: &str) -> bool {
        let last = format!("backbone.blocks.{}.", self.cfg.num_blocks - 1);
        name.starts_with(&last) || name.starts_with("backbone.norm.")
    }

    /// Flattens every patch, projects it, adds positional embeddings and
    /// prepends the CLS token.
    pub fn patchify(&self, g: &mut Graph, b: &Binding, image: &Image) -> Result<TokenSequence> {
        let cfg = &self.cfg;
        if image.side != cfg.image_side || image.channels != cfg.channels {
            return Err(AfError::Shape(format!(
                "image {}x{}x{} does not match config {}x{}x{}",
                image.side, image.side, image.channels, cfg.image_side, cfg.image_side, cfg.channels
            )));
        }
        let n = cfg.num_patches();
        let mut flat = Vec::with_capacity(n * cfg.patch_dim());
        for i in 0..n {
            flat.extend(image.patch(i, cfg.patch_side));
        }
        let patches = g.constant(Matrix::from_vec(n, cfg.patch_dim(), flat)?);
        let embedded = self.patch_embed.apply(g, b, patches)?;
        let with_cls = g.concat_rows(&[b.var(self.cls), embedded])?;
        let tokens = g.add(with_cls, b.var(self.pos))?;
        Ok(TokenSequence {
            tokens,
            grid_height: cfg.grid_side(),
            grid_width: cfg.grid_side(),
            original_index: (0..n).collect(),
        })
    }

    /// One pre-norm block; also returns the per-head attention maps.
    pub fn run_block(
        &self,
        g: &mut Graph,
        b: &Binding,
        block: usize,
        seq: &TokenSequence,
    ) -> Result<(TokenSequence, Vec<Matrix>)> {
        let p = &self.blocks[block];
        let d = self.cfg.embed_dim;
        let dh = self.cfg.head_dim();
        let x = seq.tokens;

        let h = p.norm1.apply(g, b, x)?;
        let qkv = p.qkv.apply(g, b, h)?;
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        let mut maps = Vec::with_capacity(self.cfg.num_heads);
        for head in 0..self.cfg.num_heads {
            let off = head * dh;
            let q = g.slice_cols(qkv, off, off + dh)?;
            let k = g.slice_cols(qkv, d + off, d + off + dh)?;
            let v = g.slice_cols(qkv, 2 * d + off, 2 * d + off + dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores);
            maps.push(g.value(attn).clone());
            heads.push(g.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn_out = p.proj.apply(g, b, merged)?;
        let x = g.add(x, attn_out)?;

        let h = p.norm2.apply(g, b, x)?;
        let h = p.fc1.apply(g, b, h)?;
        let h = g.gelu(h);
        let h = p.fc2.apply(g, b, h)?;
        let x = g.add(x, h)?;
        Ok((TokenSequence { tokens: x, ..seq.clone() }, maps))
    }

    /// Final LayerNorm applied to every token.
    pub fn final_norm(&self, g: &mut Graph, b: &Binding, seq: &TokenSequence) -> Result<TokenSequence> {
        let tokens = self.norm.apply(g, b, seq.tokens)?;
        Ok(TokenSequence { tokens, ..seq.clone() })
    }

    /// Plain L-block forward with no scoring or pruning, then the final norm.
    pub fn forward_plain(&self, g: &mut Graph, b: &Binding, image: &Image) -> Result<TokenSequence> {
        let mut seq = self.patchify(g, b, image)?;
        for l in 0..self.cfg.num_blocks {
            seq = self.run_block(g, b, l, &seq)?.0;
        }
        self.final_norm(g, b, &seq)
    }
}

/// Keeps CLS plus the patches whose grid positions are in `retained`.
pub fn select_patches(g: &mut Graph, seq: &TokenSequence, retained: &[usize]) -> Result<TokenSequence> {
    let mut rows = vec![0];
    let mut original_index = Vec::with_capacity(retained.len());
    for (row, &orig) in seq.original_index.iter().enumerate() {
        if retained.contains(&orig) {
            rows.push(row + 1);
            original_index.push(orig);
        }
    }
    if original_index.len() != retained.len() {
        return Err(AfError::Contract("retained index not present in sequence".into()));
    }
    let tokens = g.select_rows(seq.tokens, &rows)?;
    Ok(TokenSequence { tokens, original_index, ..seq.clone() })
}

/// Image representation from the final sequence.
pub fn pool_output(g: &mut Graph, seq: &TokenSequence, mode: Pooling) -> Result<Var> {
    match mode {
        Pooling::Mean => g.mean_rows(seq.tokens),
        Pooling::Cls => g.select_rows(seq.tokens, &[0]),
    }
}

/// Everything [`forward_with_taps`] computed for one view.
#[derive(Debug, Clone)]
pub struct TappedForward {
    /// Outputs of blocks `1..L-1`, on the full sequence.
    pub block_states: Vec<TokenSequence>,
    /// One score vector per tapped block; empty when no TIME modules ran.
    pub scores: Vec<ScoreVector>,
    /// Head attention maps of the last tapped block (block `L-1`).
    pub tapped_attention: Vec<Matrix>,
    pub outcome: PruneOutcome,
    /// Head attention maps of block `L`.
    pub final_attention: Vec<Matrix>,
    /// Block `L` output after the final norm.
    pub final_seq: TokenSequence,
}

/// Inputs available to a pruning router.
pub struct RouteInput<'a> {
    pub graph: &'a Graph,
    pub scores: &'a [ScoreVector],
    pub tapped_attention: &'a [Matrix],
    pub original_index: &'a [usize],
}

/// Runs the tapped pipeline. `time` must hold exactly `L-1` modules when
/// given. `route` returns which patches enter the last block.
pub fn forward_with_taps(
    g: &mut Graph,
    b: &Binding,
    backbone: &Backbone,
    time: Option<&[TimeModule]>,
    image: &Image,
    route: &mut dyn FnMut(&RouteInput<'_>) -> Result<PruneOutcome>,
) -> Result<TappedForward> {
    let num_blocks = backbone.cfg.num_blocks;
    if let Some(modules) = time {
        if modules.len() != num_blocks - 1 {
            return Err(AfError::Contract(format!(
                "expected {} TIME modules, got {}",
                num_blocks - 1,
                modules.len()
            )));
        }
    }
    let mut seq = backbone.patchify(g, b, image)?;
    let mut block_states = Vec::with_capacity(num_blocks - 1);
    let mut scores = Vec::new();
    let mut tapped_attention = Vec::new();
    for l in 0..num_blocks - 1 {
        let (next, maps) = backbone.run_block(g, b, l, &seq)?;
        seq = next;
        if let Some(modules) = time {
            scores.push(modules[l].measure(g, b, &seq)?);
        }
        block_states.push(seq.clone());
        tapped_attention = maps;
    }
    let outcome = route(&RouteInput {
        graph: g,
        scores: &scores,
        tapped_attention: &tapped_attention,
        original_index: &seq.original_index,
    })?;
    let pruned_seq = if outcome.pruned.is_empty() {
        seq
    } else {
        select_patches(g, &seq, &outcome.retained)?
    };
    let (last, final_attention) = backbone.run_block(g, b, num_blocks - 1, &pruned_seq)?;
    let final_seq = backbone.final_norm(g, b, &last)?;
    Ok(TappedForward { block_states, scores, tapped_attention, outcome, final_attention, final_seq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tap::{self, PruneConfig, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &VitConfig, seed: u64) -> (ParamStore, Backbone, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = Backbone::init(cfg, &mut store, &mut rng).unwrap();
        (store, bb, rng)
    }

    fn random_image(cfg: &VitConfig, rng: &mut ChaCha8Rng) -> Image {
        let m = Matrix::randn(1, cfg.image_side * cfg.image_side * cfg.channels, 1.0, rng);
        Image { side: cfg.image_side, channels: cfg.channels, data: m.into_vec() }
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::desk().validate().is_ok());
        assert!(VitConfig::vit_b16(224).validate().is_ok());
        assert_eq!(VitConfig::vit_b16(224).num_patches(), 196);
        let bad = VitConfig { image_side: 30, ..VitConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = VitConfig { num_heads: 3, ..VitConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = VitConfig { num_blocks: 1, ..VitConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_small_image() {
        let cfg = VitConfig { image_side: 8, patch_side: 4, ..VitConfig::desk() };
        let (store, bb, mut rng) = setup(&cfg, 1);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let seq = bb.patchify(&mut g, &b, &random_image(&cfg, &mut rng)).unwrap();
        assert_eq!(seq.num_patches(), 4);
        assert_eq!(g.value(seq.tokens).shape(), (5, cfg.embed_dim));

        // Zero image with zero projection bias: patch tokens are the positional embeddings.
        let seq = bb.patchify(&mut g, &b, &Image::zeros(8, 1)).unwrap();
        let tokens = g.value(seq.tokens).clone();
        let pos = store.get(bb.pos);
        for r in 1..5 {
            assert_eq!(tokens.row(r), pos.row(r));
        }
    }

    #[test]
    fn patchify_matches_patch_loop() {
        let cfg = VitConfig { channels: 2, ..VitConfig::desk() };
        let (store, bb, mut rng) = setup(&cfg, 2);
        let image = random_image(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let seq = bb.patchify(&mut g, &b, &image).unwrap();
        let tokens = g.value(seq.tokens);
        let w = store.get(bb.patch_embed.weight);
        let bias = store.get(bb.patch_embed.bias);
        let pos = store.get(bb.pos);
        let p = cfg.patch_side;
        for i in 0..cfg.num_patches() {
            let (gy, gx) = (i / cfg.grid_side(), i % cfg.grid_side());
            for d in 0..cfg.embed_dim {
                let mut acc = bias.get(0, d) + pos.get(i + 1, d);
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..cfg.channels {
                            acc += image.at(gy * p + py, gx * p + px, c) * w.get(k, d);
                            k += 1;
                        }
                    }
                }
                assert!((tokens.get(i + 1, d) - acc).abs() < 1e-12);
            }
        }
        let cls = store.get(bb.cls);
        for d in 0..cfg.embed_dim {
            assert!((tokens.get(0, d) - cls.get(0, d) - pos.get(0, d)).abs() < 1e-15);
        }
        assert!(bb.patchify(&mut g, &b, &Image::zeros(16, 2)).is_err());
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let cfg = VitConfig::desk();
        let (mut store, bb, mut rng) = setup(&cfg, 3);
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| store.name(id).starts_with("backbone.blocks.0.") && !store.name(id).contains("norm"))
            .collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = Matrix::zeros(r, c);
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let seq = bb.patchify(&mut g, &b, &random_image(&cfg, &mut rng)).unwrap();
        let (out, maps) = bb.run_block(&mut g, &b, 0, &seq).unwrap();
        assert_eq!(g.value(out.tokens), g.value(seq.tokens));
        for m in maps {
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_single_head_attention_by_hand() {
        let cfg = VitConfig {
            image_side: 4,
            patch_side: 4,
            embed_dim: 2,
            num_heads: 1,
            mlp_ratio: 1.0,
            ..VitConfig::desk()
        };
        let (mut store, bb, _) = setup(&cfg, 4);
        let p = bb.blocks[0].clone();
        // Layer norms become identity-like maps with zero bias; FFN disabled.
        let qkv_w = Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        ])
        .unwrap();
        *store.get_mut(p.qkv.weight) = qkv_w;
        *store.get_mut(p.proj.weight) = Matrix::identity(2);
        *store.get_mut(p.fc1.weight) = Matrix::zeros(2, 2);
        *store.get_mut(p.fc2.weight) = Matrix::zeros(2, 2);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let x = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let tokens = g.constant(x.clone());
        let seq = TokenSequence { tokens, grid_height: 1, grid_width: 1, original_index: vec![0] };
        let (out, maps) = bb.run_block(&mut g, &b, 0, &seq).unwrap();

        // LayerNorm of [2,0] (variance 1) and [0,1] (variance 1/4) with eps.
        let a = 1.0 / (1.0f64 + 1e-6).sqrt();
        let c = 0.5 / (0.25f64 + 1e-6).sqrt();
        let h = [[a, -a], [-c, c]];
        let dot = |u: [f64; 2], v: [f64; 2]| (u[0] * v[0] + u[1] * v[1]) / 2f64.sqrt();
        let mut expected = [[0.0; 2]; 2];
        for i in 0..2 {
            let s = [dot(h[i], h[0]), dot(h[i], h[1])];
            let m = s[0].max(s[1]);
            let e = [(s[0] - m).exp(), (s[1] - m).exp()];
            let w = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            assert!((maps[0].get(i, 0) - w[0]).abs() < 1e-12);
            for c in 0..2 {
                expected[i][c] = x.get(i, c) + w[0] * h[0][c] + w[1] * h[1][c];
            }
        }
        let got = g.value(out.tokens);
        for i in 0..2 {
            for c in 0..2 {
                assert!((got.get(i, c) - expected[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_cases() {
        let mut g = Graph::new();
        let one = g.constant(Matrix::row_vector(&[1.0, 2.0]));
        let seq = TokenSequence { tokens: one, grid_height: 1, grid_width: 1, original_index: vec![] };
        let p = pool_output(&mut g, &seq, Pooling::Mean).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
        let two = g.constant(Matrix::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap());
        let seq = TokenSequence { tokens: two, grid_height: 1, grid_width: 1, original_index: vec![0] };
        let p = pool_output(&mut g, &seq, Pooling::Mean).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::randn(5, 3, 1.0, &mut rng);
        let t = g.constant(m.clone());
        let seq = TokenSequence { tokens: t, grid_height: 2, grid_width: 2, original_index: vec![0, 1, 2, 3] };
        let p = pool_output(&mut g, &seq, Pooling::Mean).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for r in 0..5 {
                acc += m.get(r, c);
            }
            assert!((g.value(p).get(0, c) - acc / 5.0).abs() < 1e-12);
        }
        let cls = pool_output(&mut g, &seq, Pooling::Cls).unwrap();
        assert_eq!(g.value(cls).data(), m.row(0));
    }

    #[test]
    fn patch_permutation_leaves_pool_unchanged() {
        let cfg = VitConfig::desk();
        let (store, bb, mut rng) = setup(&cfg, 6);
        let image = random_image(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let seq = bb.patchify(&mut g, &b, &image).unwrap();
        let n = cfg.num_patches();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let mut rows = vec![0];
        rows.extend(perm.iter().map(|p| p + 1));
        let permuted = TokenSequence {
            tokens: g.select_rows(seq.tokens, &rows).unwrap(),
            original_index: perm.clone(),
            ..seq.clone()
        };
        let run = |g: &mut Graph, s: &TokenSequence| {
            let mut s = s.clone();
            for l in 0..cfg.num_blocks {
                s = bb.run_block(g, &b, l, &s).unwrap().0;
            }
            let s = bb.final_norm(g, &b, &s).unwrap();
            let p = pool_output(g, &s, Pooling::Mean).unwrap();
            g.value(p).clone()
        };
        let a = run(&mut g, &seq);
        let c = run(&mut g, &permuted);
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_with_taps_contracts() {
        let cfg = VitConfig { num_blocks: 2, ..VitConfig::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store, &mut rng).unwrap();
        let time = TimeModule::init_all(&cfg, 4 * cfg.embed_dim, &mut store, &mut rng);
        let image = random_image(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let prune = PruneConfig { tau: 0.0, strategy: Strategy::Adaptive, ..PruneConfig::default() };
        let mut route = |input: &RouteInput<'_>| tap::route_single(input, &prune, true);
        let out = forward_with_taps(&mut g, &b, &bb, Some(&time), &image, &mut route).unwrap();
        assert_eq!(out.scores.len(), 1);
        assert_eq!(out.final_seq.len(), cfg.num_patches() + 1);
        assert!(forward_with_taps(&mut g, &b, &bb, Some(&time[..0]), &image, &mut route).is_err());
    }

    #[test]
    fn unpruned_tapped_forward_equals_plain_forward() {
        let cfg = VitConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store, &mut rng).unwrap();
        let time = TimeModule::init_all(&cfg, 4 * cfg.embed_dim, &mut store, &mut rng);
        let image = random_image(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let plain = bb.forward_plain(&mut g, &b, &image).unwrap();
        let none = PruneConfig { strategy: Strategy::None, ..PruneConfig::default() };
        let mut route = |input: &RouteInput<'_>| tap::route_single(input, &none, true);
        let tapped = forward_with_taps(&mut g, &b, &bb, Some(&time), &image, &mut route).unwrap();
        let untapped = forward_with_taps(&mut g, &b, &bb, None, &image, &mut route).unwrap();
        let reference = g.value(plain.tokens);
        for out in [tapped, untapped] {
            let got = g.value(out.final_seq.tokens);
            assert!(got.data().iter().zip(reference.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn freezing_leaves_only_last_block_gradients() {
        let cfg = VitConfig::desk();
        let (store, bb, mut rng) = setup(&cfg, 12);
        let image = random_image(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |name| bb.is_last_block_param(name));
        let seq = bb.forward_plain(&mut g, &b, &image).unwrap();
        let pooled = pool_output(&mut g, &seq, Pooling::Mean).unwrap();
        let sq = g.mul(pooled, pooled).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        for id in store.ids() {
            let grad = b.gradient(&grads, &g, id);
            let nonzero = grad.data().iter().any(|&v| v != 0.0);
            if bb.is_last_block_param(store.name(id)) {
                assert!(nonzero || store.name(id).ends_with("bias"), "{}", store.name(id));
            } else {
                assert!(!nonzero, "{} should be frozen", store.name(id));
            }
        }
    }
}

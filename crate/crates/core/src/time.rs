//! Token importance measurement.
//!
//! Each tapped block owns a [`TimeModule`]: a learnable query scores every
//! token of the block output by scaled dot product, the softmaxed scores pool
//! the tokens into a representation, an FFN with residual refines it, and an
//! auxiliary classifier over the known classes supervises the query.
//!
//! Tokens enter through a stop-gradient, so the auxiliary loss trains only
//! the query, the FFN and the classifier. At test time only the query is used.

use rand::Rng;

use crate::backbone::{LayerNormParams, Linear, TokenSequence, VitConfig, INIT_STD};
use crate::error::{AfError, Result};
use crate::numcore::{Binding, Graph, Matrix, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct TimeModule {
    pub block: usize,
    pub query: ParamId,
    pub norm: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    /// `|Y_l| x D`.
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
    pub embed_dim: usize,
    pub num_known: usize,
}

/// Raw scores `Q Kᵀ / sqrt(D)` over every token of a block output.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    /// `1 x (N+1)`, CLS at index 0.
    pub scores: Var,
    /// The detached tokens that were scored; also the values for aggregation.
    pub keys: Var,
    pub block_index: usize,
}

impl ScoreVector {
    pub fn values<'g>(&self, g: &'g Graph) -> &'g [f64] {
        g.value(self.scores).data()
    }
}

impl TimeModule {
    pub fn init<R: Rng + ?Sized>(
        cfg: &VitConfig,
        block: usize,
        ffn_hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        let p = format!("time.{block}");
        TimeModule {
            block,
            query: store.add(format!("{p}.query"), Matrix::randn(1, d, INIT_STD, rng)),
            norm: LayerNormParams::init(store, &format!("{p}.norm"), d),
            fc1: Linear::init(store, &format!("{p}.mlp.fc1"), d, ffn_hidden, INIT_STD, rng),
            fc2: Linear::init(store, &format!("{p}.mlp.fc2"), ffn_hidden, d, INIT_STD, rng),
            classifier_weight: store.add(
                format!("{p}.classifier.weight"),
                Matrix::trunc_normal(cfg.num_known_classes, d, INIT_STD, rng),
            ),
            classifier_bias: store.add(
                format!("{p}.classifier.bias"),
                Matrix::zeros(1, cfg.num_known_classes),
            ),
            embed_dim: d,
            num_known: cfg.num_known_classes,
        }
    }

    /// One module for each of blocks `0..L-1`.
    pub fn init_all<R: Rng + ?Sized>(
        cfg: &VitConfig,
        ffn_hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Vec<Self> {
        (0..cfg.num_blocks - 1).map(|l| Self::init(cfg, l, ffn_hidden, store, rng)).collect()
    }

    /// Scores every token of `seq`; the tokens are detached first.
    pub fn measure(&self, g: &mut Graph, b: &Binding, seq: &TokenSequence) -> Result<ScoreVector> {
        let keys = g.stop_gradient(seq.tokens);
        self.measure_keys(g, b, keys)
    }

    /// Scores rows of `keys` without detaching them.
    pub fn measure_keys(&self, g: &mut Graph, b: &Binding, keys: Var) -> Result<ScoreVector> {
        let raw = g.matmul_nt(b.var(self.query), keys)?;
        let scores = g.scale(raw, 1.0 / (self.embed_dim as f64).sqrt());
        Ok(ScoreVector { scores, keys, block_index: self.block })
    }

    /// `Softmax(s) V` over all tokens, CLS included.
    pub fn aggregate(&self, g: &mut Graph, score: &ScoreVector) -> Result<Var> {
        let (_, n) = g.value(score.scores).shape();
        if n != g.value(score.keys).rows() {
            return Err(AfError::Shape(format!(
                "score length {n} does not match {} tokens",
                g.value(score.keys).rows()
            )));
        }
        let weights = g.softmax_rows(score.scores);
        g.matmul(weights, score.keys)
    }

    /// `MLP(LayerNorm(r)) + r`.
    pub fn refine(&self, g: &mut Graph, b: &Binding, r: Var) -> Result<Var> {
        let h = self.norm.apply(g, b, r)?;
        let h = self.fc1.apply(g, b, h)?;
        let h = g.gelu(h);
        let h = self.fc2.apply(g, b, h)?;
        g.add(h, r)
    }

    /// Classifier logits, one row per refined representation.
    pub fn logits(&self, g: &mut Graph, b: &Binding, refined: Var) -> Result<Var> {
        let z = g.matmul_nt(refined, b.var(self.classifier_weight))?;
        g.add_row(z, b.var(self.classifier_bias))
    }

    /// Cross-entropy of one labeled sample. `label` is `None` for unlabeled
    /// samples, which this loss must never see.
    pub fn auxiliary_loss(&self, g: &mut Graph, b: &Binding, refined: Var, label: Option<usize>) -> Result<Var> {
        let label = label.ok_or_else(|| {
            AfError::Contract("auxiliary loss is trained on labeled samples only".into())
        })?;
        self.auxiliary_loss_batch(g, b, &[refined], &[label])
    }

    /// Mean cross-entropy over labeled representations.
    pub fn auxiliary_loss_batch(
        &self,
        g: &mut Graph,
        b: &Binding,
        refined: &[Var],
        labels: &[usize],
    ) -> Result<Var> {
        let mut targets = Matrix::zeros(labels.len(), self.num_known);
        for (row, &label) in labels.iter().enumerate() {
            if label >= self.num_known {
                return Err(AfError::LabelOutOfRange { label, classes: self.num_known });
            }
            targets.set(row, label, 1.0);
        }
        self.auxiliary_loss_soft(g, b, refined, targets)
    }

    /// Mean cross-entropy against arbitrary target distributions over the known classes.
    pub fn auxiliary_loss_soft(
        &self,
        g: &mut Graph,
        b: &Binding,
        refined: &[Var],
        targets: Matrix,
    ) -> Result<Var> {
        if refined.is_empty() || refined.len() != targets.rows() || targets.cols() != self.num_known {
            return Err(AfError::Shape(format!(
                "{} representations against {}x{} targets",
                refined.len(),
                targets.rows(),
                targets.cols()
            )));
        }
        let stacked = if refined.len() == 1 { refined[0] } else { g.concat_rows(refined)? };
        let logits = self.logits(g, b, stacked)?;
        let logp = g.log_softmax_rows(logits);
        let count = targets.rows() as f64;
        let t = g.constant(targets);
        let picked = g.mul(logp, t)?;
        let total = g.sum(picked);
        Ok(g.scale(total, -1.0 / count))
    }
}

//! Parametric GCD objective: contrastive representation losses on projected
//! features, a cosine prototype classifier trained by self-distillation with
//! a mean-entropy regularizer, and the total loss that adds the TIME terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Linear;
use crate::error::{AfError, Result};
use crate::numcore::{Binding, Graph, Matrix, ParamId, ParamStore, Var};

/// Added to excluded similarity logits so their softmax weight underflows to zero.
const EXCLUDED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadHyper {
    pub lambda_sim: f64,
    pub tau_u: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    /// Mean-entropy weight.
    pub epsilon: f64,
    /// Weight of the summed TIME auxiliary losses.
    pub lambda: f64,
    /// Projector hidden width as a multiple of D.
    pub proj_hidden_ratio: usize,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper {
            lambda_sim: 0.35,
            tau_u: 0.07,
            tau_c: 1.0,
            tau_s: 0.1,
            tau_t_start: 0.07,
            tau_t_end: 0.04,
            tau_t_warmup_epochs: 30,
            epsilon: 1.0,
            lambda: 0.05,
            proj_hidden_ratio: 2,
        }
    }
}

impl HeadHyper {
    pub fn validate(&self) -> Result<()> {
        let temps = [self.tau_u, self.tau_c, self.tau_s, self.tau_t_start, self.tau_t_end];
        if temps.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(AfError::Config("all temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_sim) {
            return Err(AfError::Config(format!("lambda_sim must lie in [0, 1], got {}", self.lambda_sim)));
        }
        if self.lambda < 0.0 || self.epsilon < 0.0 {
            return Err(AfError::Config("lambda and epsilon must be nonnegative".into()));
        }
        if self.proj_hidden_ratio == 0 {
            return Err(AfError::Config("proj_hidden_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Teacher temperature: cosine ramp from `tau_t_start` to `tau_t_end`
    /// over the warm-up epochs, constant afterwards.
    pub fn teacher_temperature(&self, epoch: usize) -> f64 {
        let warm = self.tau_t_warmup_epochs;
        if epoch >= warm {
            return self.tau_t_end;
        }
        let progress = epoch as f64 / warm as f64;
        let weight = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.tau_t_end + (self.tau_t_start - self.tau_t_end) * weight
    }
}

#[derive(Debug, Clone)]
pub struct GcdHead {
    pub projector: Vec<Linear>,
    /// `K x D`.
    pub prototypes: ParamId,
    pub hyper: HeadHyper,
}

/// Backbone features of both augmented views of a batch.
#[derive(Debug, Clone)]
pub struct BatchViews {
    /// `B x D`.
    pub view1: Var,
    pub view2: Var,
    /// Known-class label for labeled samples.
    pub labels: Vec<Option<usize>>,
}

impl BatchViews {
    pub fn labeled(&self) -> (Vec<usize>, Vec<usize>) {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l)))
            .unzip()
    }
}

/// Every term of the objective, kept separate for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rep_unsup: Var,
    pub rep_sup: Var,
    pub rep: Var,
    pub cls: Var,
    pub gcd: Var,
}

impl GcdHead {
    pub fn init<R: Rng + ?Sized>(
        embed_dim: usize,
        num_classes: usize,
        hyper: HeadHyper,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        let hidden = hyper.proj_hidden_ratio * embed_dim;
        // Fan-in scaling keeps projector outputs O(1) at any width.
        let dims = [embed_dim, hidden, hidden, embed_dim];
        let projector = (0..3)
            .map(|i| {
                let std = 1.0 / (dims[i] as f64).sqrt();
                Linear::init(store, &format!("head.proj.{i}"), dims[i], dims[i + 1], std, rng)
            })
            .collect();
        let mut protos = Matrix::randn(num_classes, embed_dim, 1.0, rng);
        for r in 0..num_classes {
            let row = protos.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let prototypes = store.add("head.prototypes", protos);
        Ok(GcdHead { projector, prototypes, hyper })
    }

    pub fn num_classes(&self, store: &ParamStore) -> usize {
        store.get(self.prototypes).rows()
    }

    /// `g(h) / ||g(h)||` row by row.
    pub fn project_normalize(&self, g: &mut Graph, b: &Binding, h: Var) -> Result<Var> {
        let mut x = h;
        for (i, layer) in self.projector.iter().enumerate() {
            x = layer.apply(g, b, x)?;
            if i + 1 < self.projector.len() {
                x = g.gelu(x);
            }
        }
        g.l2_normalize_rows(x)
    }

    /// Cosine similarity of every feature row to every prototype, `B x K`.
    pub fn cosines(&self, g: &mut Graph, b: &Binding, h: Var) -> Result<Var> {
        let hn = g.l2_normalize_rows(h)?;
        let cn = g.l2_normalize_rows(b.var(self.prototypes))?;
        g.matmul_nt(hn, cn)
    }

    /// Prototype probabilities at the given temperature.
    pub fn proto_probs(&self, g: &mut Graph, b: &Binding, h: Var, temperature: f64) -> Result<Var> {
        let cos = self.cosines(g, b, h)?;
        let logits = g.scale(cos, 1.0 / temperature);
        Ok(g.softmax_rows(logits))
    }

    /// Every loss term for one batch at `epoch`.
    pub fn losses(&self, g: &mut Graph, b: &Binding, batch: &BatchViews, epoch: usize) -> Result<LossParts> {
        let hp = &self.hyper;
        let z1 = self.project_normalize(g, b, batch.view1)?;
        let z2 = self.project_normalize(g, b, batch.view2)?;
        let rep_unsup = unsup_contrastive(g, z1, z2, hp.tau_u)?;

        let (idx, labels) = batch.labeled();
        let rep_sup = if idx.is_empty() {
            g.constant(Matrix::scalar(0.0))
        } else {
            let l1 = g.select_rows(z1, &idx)?;
            let l2 = g.select_rows(z2, &idx)?;
            sup_contrastive(g, l1, l2, &labels, hp.tau_c)?
        };
        let a = g.scale(rep_unsup, 1.0 - hp.lambda_sim);
        let c = g.scale(rep_sup, hp.lambda_sim);
        let rep = g.add(a, c)?;

        let cos1 = self.cosines(g, b, batch.view1)?;
        let cos2 = self.cosines(g, b, batch.view2)?;
        let cls = classifier_loss(g, cos1, cos2, &batch.labels, hp, hp.teacher_temperature(epoch))?;
        let gcd = g.add(rep, cls)?;
        Ok(LossParts { rep_unsup, rep_sup, rep, cls, gcd })
    }

    /// Prototype argmax for each feature row.
    pub fn predict(&self, store: &ParamStore, features: &Matrix) -> Vec<usize> {
        let protos = store.get(self.prototypes);
        let norms: Vec<f64> = (0..protos.rows())
            .map(|k| protos.row(k).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        (0..features.rows())
            .map(|r| {
                let row = features.row(r);
                let mut best = (f64::NEG_INFINITY, 0);
                for k in 0..protos.rows() {
                    let dot: f64 = row.iter().zip(protos.row(k)).map(|(a, c)| a * c).sum();
                    let cos = dot / norms[k];
                    if cos > best.0 {
                        best = (cos, k);
                    }
                }
                best.1
            })
            .collect()
    }
}

/// `-mean(rowsum(targets * logp))`.
fn soft_cross_entropy(g: &mut Graph, targets: Var, logp: Var) -> Result<Var> {
    let rows = g.value(logp).rows() as f64;
    let prod = g.mul(targets, logp)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / rows))
}

/// Cross-view InfoNCE: each view of sample `i` is the positive for the other
/// and the other samples' opposite views are the negatives. Both directions
/// are averaged.
pub fn unsup_contrastive(g: &mut Graph, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let n = g.value(z1).rows();
    if n < 2 {
        return Err(AfError::Contract("contrastive loss needs at least two samples".into()));
    }
    let eye = g.constant(Matrix::identity(n));
    let mut terms = Vec::with_capacity(2);
    for (a, p) in [(z1, z2), (z2, z1)] {
        let sim = g.matmul_nt(a, p)?;
        let logits = g.scale(sim, 1.0 / tau);
        let logp = g.log_softmax_rows(logits);
        terms.push(soft_cross_entropy(g, eye, logp)?);
    }
    let both = g.add(terms[0], terms[1])?;
    Ok(g.scale(both, 0.5))
}

/// Supervised contrastive loss over both views of the labeled samples.
pub fn sup_contrastive(g: &mut Graph, z1: Var, z2: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let feats = g.concat_rows(&[z1, z2])?;
    let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
    sup_contrastive_flat(g, feats, &doubled, tau)
}

/// Supervised contrastive loss over one set of rows. For anchor `i`, every
/// other row is in the denominator and the other rows sharing its label are
/// the positives. Anchors without a positive are skipped.
pub fn sup_contrastive_flat(g: &mut Graph, feats: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let m = g.value(feats).rows();
    if labels.len() != m {
        return Err(AfError::Shape(format!("{} labels for {m} rows", labels.len())));
    }
    let mut weights = Matrix::zeros(m, m);
    let mut anchors = 0usize;
    for i in 0..m {
        let positives: Vec<usize> = (0..m).filter(|&q| q != i && labels[q] == labels[i]).collect();
        if positives.is_empty() {
            log::warn!("labeled anchor {i} (class {}) has no positive in the batch; skipped", labels[i]);
            continue;
        }
        anchors += 1;
        for q in &positives {
            weights.set(i, *q, 1.0 / positives.len() as f64);
        }
    }
    if anchors == 0 {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let mut mask = Matrix::zeros(m, m);
    for i in 0..m {
        mask.set(i, i, EXCLUDED_LOGIT);
    }
    let sim = g.matmul_nt(feats, feats)?;
    let logits = g.scale(sim, 1.0 / tau);
    let mask = g.constant(mask);
    let logits = g.add(logits, mask)?;
    let logp = g.log_softmax_rows(logits);
    let w = g.constant(weights);
    let prod = g.mul(w, logp)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / anchors as f64))
}

/// Entropy of the mean of the rows of `probs`.
pub fn mean_entropy(g: &mut Graph, probs: Var) -> Result<Var> {
    let mean = g.mean_rows(probs)?;
    let logm = g.ln(mean)?;
    let prod = g.mul(mean, logm)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0))
}

/// Self-distillation with mean-entropy regularization plus labeled cross-entropy.
///
/// `cos1`/`cos2` are `B x K` prototype cosines of the two views. The student
/// uses `tau_s`; the teacher is the other view's detached cosines at
/// `tau_t`.
pub fn classifier_loss(
    g: &mut Graph,
    cos1: Var,
    cos2: Var,
    labels: &[Option<usize>],
    hp: &HeadHyper,
    tau_t: f64,
) -> Result<Var> {
    let (b, k) = g.value(cos1).shape();
    if labels.len() != b || g.value(cos2).shape() != (b, k) {
        return Err(AfError::Shape(format!("{} labels for two {b}x{k} cosine views", labels.len())));
    }
    let mut student = Vec::with_capacity(2);
    let mut probs = Vec::with_capacity(2);
    let mut teacher = Vec::with_capacity(2);
    for cos in [cos1, cos2] {
        let logits = g.scale(cos, 1.0 / hp.tau_s);
        student.push(g.log_softmax_rows(logits));
        probs.push(g.softmax_rows(logits));
        let fixed = g.stop_gradient(cos);
        let sharp = g.scale(fixed, 1.0 / tau_t);
        teacher.push(g.softmax_rows(sharp));
    }
    let ce_a = soft_cross_entropy(g, teacher[1], student[0])?;
    let ce_b = soft_cross_entropy(g, teacher[0], student[1])?;
    let ce = g.add(ce_a, ce_b)?;
    let ce = g.scale(ce, 0.5);
    let stacked = g.concat_rows(&probs)?;
    let entropy = mean_entropy(g, stacked)?;
    let reg = g.scale(entropy, -hp.epsilon);
    let unsup = g.add(ce, reg)?;
    let unsup = g.scale(unsup, 1.0 - hp.lambda_sim);

    let mut rows = Vec::new();
    let mut onehot = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            if l >= k {
                return Err(AfError::LabelOutOfRange { label: l, classes: k });
            }
            rows.push(i);
            let mut t = vec![0.0; k];
            t[l] = 1.0;
            onehot.push(t);
        }
    }
    if rows.is_empty() {
        return Ok(unsup);
    }
    let mut sup_terms = Vec::with_capacity(2);
    let targets = g.constant(Matrix::from_rows(&onehot)?);
    for logp in &student {
        let picked = g.select_rows(*logp, &rows)?;
        sup_terms.push(soft_cross_entropy(g, targets, picked)?);
    }
    let sup = g.add(sup_terms[0], sup_terms[1])?;
    let sup = g.scale(sup, 0.5 * hp.lambda_sim);
    g.add(unsup, sup)
}

/// `L_gcd + lambda * sum(time_losses)`.
pub fn total_loss(g: &mut Graph, gcd: Var, time_losses: &[Var], lambda: f64) -> Result<Var> {
    let mut total = gcd;
    for &t in time_losses {
        let weighted = g.scale(t, lambda);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

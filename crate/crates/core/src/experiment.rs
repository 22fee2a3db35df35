//! Experiment configuration, training, evaluation, ablations, mask rendering
//! and cost reports.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_with_taps, pool_output, Backbone, Image, Pooling, RouteInput, TappedForward, VitConfig};
use crate::checkpoint;
use crate::error::{AfError, Result};
use crate::gcd_head::{total_loss, BatchViews, GcdHead, HeadHyper, LossParts};
use crate::metrics::{self, AccReport, MaskGrid, Mode};
use crate::numcore::{Binding, Graph, Matrix, ParamStore, Var};
use crate::synthdata::{pruning_precision, SynthDataset, SynthSpec};
use crate::tap::{self, PruneConfig, PruneOutcome, Strategy, ViewPolicy};
use crate::time::TimeModule;

/// Which samples supervise the TIME queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTraining {
    /// Labeled samples only.
    #[default]
    Labeled,
    /// Labeled samples plus teacher pseudo-labels on unlabeled samples whose
    /// pseudo-label is a known class.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 0.1, lr_floor: 1e-3, momentum: 0.9, weight_decay: 5e-5, epochs: 30, batch_size: 32 }
    }
}

impl OptimConfig {
    /// Cosine decay from `lr` to `lr * lr_floor` across the epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let floor = self.lr * self.lr_floor;
        let progress = epoch as f64 / self.epochs.max(1) as f64;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbone: VitConfig,
    pub prune: PruneConfig,
    pub head: HeadHyper,
    pub data: SynthSpec,
    pub optim: OptimConfig,
    /// Hidden width of the TIME refinement MLP as a multiple of D.
    pub time_mlp_ratio: f64,
    pub query_training: QueryTraining,
    pub pooling: Pooling,
    /// Train only the last block (and final norm) of the backbone.
    pub freeze_earlier_blocks: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// CPU-sized schedule on the synthetic benchmark.
    pub fn desk() -> Self {
        ExperimentConfig {
            run_id: "desk".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            backbone: VitConfig::desk(),
            prune: PruneConfig::default(),
            head: HeadHyper::default(),
            data: SynthSpec::default(),
            optim: OptimConfig::default(),
            time_mlp_ratio: 4.0,
            query_training: QueryTraining::Labeled,
            pooling: Pooling::Mean,
            freeze_earlier_blocks: false,
        }
    }

    /// The published schedule: batch 128, 200 epochs, last block fine-tuned.
    pub fn paper() -> Self {
        let desk = Self::desk();
        ExperimentConfig {
            run_id: "paper".into(),
            output_dir: PathBuf::from("runs/paper"),
            optim: OptimConfig { epochs: 200, batch_size: 128, ..OptimConfig::default() },
            freeze_earlier_blocks: true,
            ..desk
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(AfError::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }

    pub fn uses_time(&self) -> bool {
        self.prune.strategy.uses_time()
    }

    pub fn time_hidden(&self) -> usize {
        (self.backbone.embed_dim as f64 * self.time_mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.validate()?;
        self.head.validate()?;
        self.prune.validate(self.backbone.num_patches())?;
        let b = &self.backbone;
        let d = &self.data;
        let mismatch = |what: &str, x: usize, y: usize| {
            Err(AfError::Config(format!("backbone.{what} = {x} but data.{what} = {y}")))
        };
        if b.image_side != d.image_side {
            return mismatch("image_side", b.image_side, d.image_side);
        }
        if b.patch_side != d.patch_side {
            return mismatch("patch_side", b.patch_side, d.patch_side);
        }
        if b.num_known_classes != d.num_known {
            return mismatch("num_known", b.num_known_classes, d.num_known);
        }
        if b.num_total_classes != d.num_classes {
            return mismatch("num_classes", b.num_total_classes, d.num_classes);
        }
        if b.channels != 1 {
            return Err(AfError::Config("the synthetic benchmark is single-channel".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 || !(0.0..=1.0).contains(&o.lr_floor) {
            return Err(AfError::Config("optim: need lr > 0, momentum in [0, 1), weight_decay >= 0, lr_floor in [0, 1]".into()));
        }
        if o.epochs == 0 || o.batch_size < 2 {
            return Err(AfError::Config("optim: need epochs >= 1 and batch_size >= 2".into()));
        }
        if !(self.time_mlp_ratio > 0.0) || self.time_hidden() == 0 {
            return Err(AfError::Config("time_mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Parses JSON, rejecting unknown keys, and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| AfError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AfError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_BACKBONE: u64 = 1;
const STREAM_TIME: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;

#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Empty when the strategy does not use TIME scores.
    pub time: Vec<TimeModule>,
    pub head: GcdHead,
}

impl Model {
    /// Each component draws from its own stream so adding or removing TIME
    /// modules leaves the other initial weights unchanged.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&cfg.backbone, &mut store, &mut rng_stream(cfg.seed, STREAM_BACKBONE))?;
        let time = if cfg.uses_time() {
            TimeModule::init_all(&cfg.backbone, cfg.time_hidden(), &mut store, &mut rng_stream(cfg.seed, STREAM_TIME))
        } else {
            Vec::new()
        };
        let head = GcdHead::init(
            cfg.backbone.embed_dim,
            cfg.backbone.num_total_classes,
            cfg.head.clone(),
            &mut store,
            &mut rng_stream(cfg.seed, STREAM_HEAD),
        )?;
        Ok(Model { store, backbone, time, head })
    }

    /// Builds the model for `cfg` and overwrites its weights from a checkpoint.
    pub fn load(cfg: &ExperimentConfig, path: &Path) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        let saved = checkpoint::load(path)?;
        model.store.load_from(&saved)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    fn time_slice(&self) -> Option<&[TimeModule]> {
        if self.time.is_empty() {
            None
        } else {
            Some(&self.time)
        }
    }

    /// Pooled feature of one view plus everything the tapped forward computed.
    pub fn forward_view(
        &self,
        g: &mut Graph,
        b: &Binding,
        image: &Image,
        prune_cfg: &PruneConfig,
        prune: bool,
        pooling: Pooling,
    ) -> Result<(Var, TappedForward)> {
        let mut route = |input: &RouteInput<'_>| tap::route_single(input, prune_cfg, prune);
        let out = forward_with_taps(g, b, &self.backbone, self.time_slice(), image, &mut route)?;
        let pooled = pool_output(g, &out.final_seq, pooling)?;
        Ok((pooled, out))
    }

    /// Test-time forward of one image without gradients.
    pub fn infer(&self, cfg: &ExperimentConfig, image: &Image) -> Result<(Matrix, TappedForward)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let (pooled, out) = self.forward_view(&mut g, &b, image, &cfg.prune, true, cfg.pooling)?;
        Ok((g.value(pooled).clone(), out))
    }
}

/// Per-epoch averages written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub tau_t: f64,
    pub l_rep: f64,
    pub l_cls: f64,
    pub l_ce_sum: f64,
    pub l_gcd: f64,
    pub total: f64,
    /// Mean patches entering the last block on the pruned training view.
    pub mean_retained: f64,
}

pub struct Trainer<'a> {
    pub cfg: ExperimentConfig,
    pub data: &'a SynthDataset,
    pub model: Model,
    velocity: Vec<Matrix>,
    augment_rng: ChaCha8Rng,
    pub epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ExperimentConfig, data: &'a SynthDataset) -> Result<Self> {
        let model = Model::init(cfg)?;
        let velocity = model.store.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            model,
            velocity,
            augment_rng: rng_stream(cfg.seed, STREAM_AUGMENT),
            epoch: 0,
        })
    }

    fn trainable(&self, name: &str) -> bool {
        !self.cfg.freeze_earlier_blocks || !name.starts_with("backbone.") || self.model.backbone.is_last_block_param(name)
    }

    fn batches(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.samples.len()).collect();
        let mut rng = rng_stream(self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), STREAM_SHUFFLE);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        order
            .chunks(self.cfg.optim.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    /// One pass over the data. On a non-finite loss the update is skipped and
    /// the weights stay at their last finite state.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.cfg.optim.lr_at(self.epoch);
        let tau_t = self.cfg.head.teacher_temperature(self.epoch);
        let batches = self.batches();
        let mut sums = [0.0; 6];
        for batch in &batches {
            let stats = self.step(batch, lr)?;
            for (s, v) in sums.iter_mut().zip(stats) {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            tau_t,
            l_rep: sums[0] / n,
            l_cls: sums[1] / n,
            l_ce_sum: sums[2] / n,
            l_gcd: sums[3] / n,
            total: sums[4] / n,
            mean_retained: sums[5] / n,
        };
        self.epoch += 1;
        Ok(log)
    }

    fn step(&mut self, batch: &[usize], lr: f64) -> Result<[f64; 6]> {
        let data = self.data;
        let mut views = Vec::with_capacity(batch.len());
        for &i in batch {
            let sample = &data.samples[i];
            let first = data.augment(sample, &mut self.augment_rng);
            let second = data.augment(sample, &mut self.augment_rng);
            views.push([first, second]);
        }
        let labels: Vec<Option<usize>> = batch
            .iter()
            .map(|&i| data.samples[i].labeled.then_some(data.samples[i].label))
            .collect();
        let cfg = &self.cfg;
        let model = &self.model;
        let mut g = Graph::new();
        let b = model.store.bind(&mut g, |name| self.trainable(name));
        let BatchLosses { parts, ce: aux, total, mean_retained } =
            batch_losses(cfg, model, &mut g, &b, &views, &labels, self.epoch)?;

        let value = |v: Var| g.value(v).item();
        let ce_sum: f64 = aux.iter().map(|&v| value(v)).sum();
        let stats = [
            value(parts.rep),
            value(parts.cls),
            ce_sum,
            value(parts.gcd),
            value(total),
            mean_retained,
        ];
        if stats.iter().any(|s| !s.is_finite()) {
            return Err(AfError::Numerical(format!("non-finite loss at epoch {}", self.epoch)));
        }

        let grads = g.backward(total)?;
        let o = &cfg.optim;
        let ids: Vec<_> = model.store.ids().collect();
        let updates: Vec<Option<Matrix>> = ids
            .iter()
            .map(|&id| self.trainable(model.store.name(id)).then(|| b.gradient(&grads, &g, id)))
            .collect();
        if updates.iter().flatten().any(|m| !m.is_finite()) {
            return Err(AfError::Numerical(format!("non-finite gradient at epoch {}", self.epoch)));
        }
        for (id, grad) in ids.into_iter().zip(updates) {
            let Some(grad) = grad else { continue };
            let w = self.model.store.get_mut(id);
            let vel = &mut self.velocity[id.index()];
            for ((wv, vv), gv) in w.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                *vv = o.momentum * *vv + gv + o.weight_decay * *wv;
                *wv -= lr * *vv;
            }
        }
        Ok(stats)
    }
}

/// Loss nodes for one batch.
pub struct BatchLosses {
    pub parts: LossParts,
    /// One auxiliary cross-entropy per TIME module that saw a target.
    pub ce: Vec<Var>,
    pub total: Var,
    /// Mean patches entering the last block on the first view.
    pub mean_retained: f64,
}

/// Builds the full training objective for a batch of view pairs. `labels`
/// holds the class of labeled samples and `None` elsewhere.
pub fn batch_losses(
    cfg: &ExperimentConfig,
    model: &Model,
    g: &mut Graph,
    b: &Binding,
    views: &[[Image; 2]],
    labels: &[Option<usize>],
    epoch: usize,
) -> Result<BatchLosses> {
    if views.len() != labels.len() {
        return Err(AfError::Shape(format!("{} view pairs for {} labels", views.len(), labels.len())));
    }
    let flags = tap::apply_view_policy(cfg.prune.view_policy, true, 2)?;
    let mut feats: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut tapped: Vec<Vec<TappedForward>> = Vec::with_capacity(views.len());
    let mut retained = 0.0;
    for pair in views {
        let mut outs = Vec::with_capacity(2);
        for (v, (image, &prune)) in pair.iter().zip(&flags).enumerate() {
            let (pooled, out) = model.forward_view(g, b, image, &cfg.prune, prune, cfg.pooling)?;
            if v == 0 {
                retained += out.outcome.retained.len() as f64;
            }
            feats[v].push(pooled);
            outs.push(out);
        }
        tapped.push(outs);
    }
    let view1 = g.concat_rows(&feats[0])?;
    let view2 = g.concat_rows(&feats[1])?;

    // Teacher argmax of the opposite view, for pseudo-labeled query training.
    let pseudo: Option<[Vec<usize>; 2]> = (cfg.query_training == QueryTraining::All).then(|| {
        let p1 = model.head.predict(&model.store, g.value(view1));
        let p2 = model.head.predict(&model.store, g.value(view2));
        [p2, p1]
    });

    let parts = model.head.losses(g, b, &BatchViews { view1, view2, labels: labels.to_vec() }, epoch)?;

    let mut ce = Vec::with_capacity(model.time.len());
    for (l, module) in model.time.iter().enumerate() {
        let mut reps = Vec::new();
        let mut targets = Vec::new();
        for (k, outs) in tapped.iter().enumerate() {
            for (v, out) in outs.iter().enumerate() {
                let target = match (labels[k], &pseudo) {
                    (Some(y), _) => Some(y),
                    (None, Some(p)) if p[v][k] < cfg.backbone.num_known_classes => Some(p[v][k]),
                    _ => None,
                };
                if let Some(y) = target {
                    let r = module.aggregate(g, &out.scores[l])?;
                    reps.push(module.refine(g, b, r)?);
                    targets.push(y);
                }
            }
        }
        if !reps.is_empty() {
            ce.push(module.auxiliary_loss_batch(g, b, &reps, &targets)?);
        }
    }
    let total = total_loss(g, parts.gcd, &ce, cfg.head.lambda)?;
    Ok(BatchLosses { parts, ce, total, mean_retained: retained / views.len().max(1) as f64 })
}

/// Trains for the configured number of epochs.
pub fn train(cfg: &ExperimentConfig, data: &SynthDataset) -> Result<(Model, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut logs = Vec::with_capacity(cfg.optim.epochs);
    for _ in 0..cfg.optim.epochs {
        logs.push(trainer.run_epoch()?);
    }
    Ok((trainer.model, logs))
}

/// First line of a training log.
pub fn log_header(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::json!({ "config": cfg }))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: AccReport,
    pub mean_retained: f64,
    pub mean_pruned: f64,
    /// Background share of all pruned patches, pooled over samples.
    pub pruning_precision: f64,
    /// Mean of the per-sample precision (1 for samples with nothing pruned).
    pub mean_sample_precision: f64,
    pub num_patches: usize,
}

/// Prototype-argmax clustering of every unlabeled sample at test time.
pub fn evaluate(cfg: &ExperimentConfig, model: &Model, data: &SynthDataset) -> Result<EvalReport> {
    let indices = data.unlabeled_indices();
    let mut y_true = Vec::with_capacity(indices.len());
    let mut feats = Vec::with_capacity(indices.len() * cfg.backbone.embed_dim);
    let (mut retained, mut pruned, mut background, mut precision) = (0usize, 0usize, 0usize, 0.0);
    for &i in &indices {
        let sample = &data.samples[i];
        let (pooled, out) = model.infer(cfg, &sample.image)?;
        if !pooled.is_finite() {
            return Err(AfError::Numerical(format!("non-finite feature for sample {i}")));
        }
        feats.extend_from_slice(pooled.data());
        y_true.push(sample.label);
        retained += out.outcome.retained.len();
        pruned += out.outcome.pruned.len();
        background += out.outcome.pruned.iter().filter(|p| !sample.object_mask.contains(p)).count();
        precision += pruning_precision(&out.outcome, &sample.object_mask);
    }
    let features = Matrix::from_vec(indices.len(), cfg.backbone.embed_dim, feats)?;
    let y_pred = model.head.predict(&model.store, &features);
    let acc = metrics::hungarian_accuracy(&y_true, &y_pred, cfg.backbone.num_total_classes, &data.old_classes())?;
    let n = indices.len() as f64;
    Ok(EvalReport {
        acc,
        mean_retained: retained as f64 / n,
        mean_pruned: pruned as f64 / n,
        pruning_precision: if pruned == 0 { 1.0 } else { background as f64 / pruned as f64 },
        mean_sample_precision: precision / n,
        num_patches: cfg.backbone.num_patches(),
    })
}

/// Axes accepted by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Strategy,
    Tau,
    K,
    ViewPolicy,
    QueryTraining,
    Pooling,
    Multiscale,
}

impl std::str::FromStr for Axis {
    type Err = AfError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "strategy" => Axis::Strategy,
            "tau" => Axis::Tau,
            "k" => Axis::K,
            "view_policy" => Axis::ViewPolicy,
            "query_training" => Axis::QueryTraining,
            "pooling" => Axis::Pooling,
            "multiscale" => Axis::Multiscale,
            other => {
                return Err(AfError::Config(format!(
                    "unknown ablation axis {other:?} (expected strategy, tau, k, view_policy, query_training, pooling or multiscale)"
                )))
            }
        })
    }
}

/// Fixed-k values scaled from `{16, 64, 128}` of 196 patches to `n` patches.
pub fn scaled_k_values(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [16usize, 64, 128]
        .iter()
        .map(|&k| ((k * n) as f64 / 196.0).round().max(1.0) as usize)
        .filter(|&k| k < n)
        .collect();
    ks.dedup();
    ks
}

pub const TAU_SWEEP: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

/// Labeled config variants along one axis.
pub fn variants(base: &ExperimentConfig, axis: Axis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let strategy = |s: Strategy| with(&|c| c.prune.strategy = s);
    match axis {
        Axis::Strategy => Strategy::ALL.iter().map(|&s| (format!("strategy={s}"), strategy(s))).collect(),
        Axis::Tau => TAU_SWEEP
            .iter()
            .map(|&t| (format!("tau={t}"), with(&|c| {
                c.prune.strategy = Strategy::Adaptive;
                c.prune.tau = t;
            })))
            .collect(),
        Axis::K => scaled_k_values(base.backbone.num_patches())
            .into_iter()
            .map(|k| (format!("k={k}"), with(&|c| {
                c.prune.strategy = Strategy::FixedK;
                c.prune.fixed_k = k;
            })))
            .collect(),
        Axis::ViewPolicy => [("single_view", ViewPolicy::SingleView), ("multi_view", ViewPolicy::MultiView)]
            .iter()
            .map(|&(name, p)| (format!("view_policy={name}"), with(&|c| c.prune.view_policy = p)))
            .collect(),
        Axis::QueryTraining => [("labeled", QueryTraining::Labeled), ("all", QueryTraining::All)]
            .iter()
            .map(|&(name, q)| (format!("query_training={name}"), with(&|c| c.query_training = q)))
            .collect(),
        Axis::Pooling => [("mean", Pooling::Mean), ("cls", Pooling::Cls)]
            .iter()
            .map(|&(name, p)| (format!("pooling={name}"), with(&|c| c.pooling = p)))
            .collect(),
        Axis::Multiscale => vec![
            ("multiscale=all_blocks".into(), strategy(Strategy::Adaptive)),
            ("multiscale=penultimate_only".into(), strategy(Strategy::PenultimateOnly)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run_id: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub tau: f64,
    pub report: EvalReport,
}

pub const ABLATION_HEADER: &str = "run_id,all,old,new,seed,strategy,tau,mean_pruned,pruning_precision";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4}",
            self.report.acc.csv_row(&self.run_id, self.seed, self.strategy.as_str(), self.tau),
            self.report.mean_pruned,
            self.report.pruning_precision
        )
    }
}

/// Trains and evaluates one config.
pub fn run_variant(run_id: &str, cfg: &ExperimentConfig, data: &SynthDataset) -> Result<AblationRow> {
    let (model, _) = train(cfg, data)?;
    let report = evaluate(cfg, &model, data)?;
    Ok(AblationRow { run_id: run_id.into(), seed: cfg.seed, strategy: cfg.prune.strategy, tau: cfg.prune.tau, report })
}

/// Runs every variant of `axis` for every seed on one shared dataset,
/// using at most `threads` workers. Rows come back in variant-major order.
pub fn ablate(base: &ExperimentConfig, axis: Axis, seeds: &[u64], threads: usize) -> Result<Vec<AblationRow>> {
    use rayon::prelude::*;
    base.validate()?;
    let data = crate::synthdata::generate(&base.data)?;
    let jobs: Vec<(String, ExperimentConfig)> = variants(base, axis)
        .into_iter()
        .flat_map(|(name, cfg)| {
            seeds.iter().map(move |&s| (name.clone(), ExperimentConfig { seed: s, ..cfg.clone() }))
        })
        .collect();
    for (_, cfg) in &jobs {
        cfg.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| AfError::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|(name, cfg)| run_variant(name, cfg, &data)).collect())
}

/// Attention and TAP masks for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMasks {
    pub sample: usize,
    pub attention: MaskGrid,
    pub retained: MaskGrid,
    pub outcome: PruneOutcome,
}

/// Thresholded head-averaged CLS attention of the last block plus the
/// patches TAP kept, for each requested sample.
pub fn render_masks(
    cfg: &ExperimentConfig,
    model: &Model,
    data: &SynthDataset,
    ids: &[usize],
    threshold: f64,
) -> Result<Vec<SampleMasks>> {
    let grid = cfg.backbone.grid_side();
    ids.iter()
        .map(|&id| {
            let sample = data
                .samples
                .get(id)
                .ok_or_else(|| AfError::Contract(format!("sample {id} does not exist ({} samples)", data.samples.len())))?;
            let (_, out) = model.infer(cfg, &sample.image)?;
            let attn = metrics::cls_patch_attention(
                &out.final_attention,
                &out.final_seq.original_index,
                cfg.backbone.num_patches(),
            );
            Ok(SampleMasks {
                sample: id,
                attention: metrics::attention_mask(&attn, grid, grid, threshold)?,
                retained: MaskGrid::from_indices(grid, grid, &out.outcome.retained),
                outcome: out.outcome,
            })
        })
        .collect()
}

/// Writes `<run>_<sample>_<thr>.pgm` and `<run>_<sample>_tap.pgm` per sample.
pub fn write_masks(dir: &Path, run_id: &str, threshold: f64, masks: &[SampleMasks]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in masks {
        let attn = dir.join(format!("{run_id}_{}_{threshold}.pgm", m.sample));
        std::fs::write(&attn, m.attention.to_pgm())?;
        let tap = dir.join(format!("{run_id}_{}_tap.pgm", m.sample));
        std::fs::write(&tap, m.retained.to_pgm())?;
        written.push(attn);
        written.push(tap);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub seq_len: usize,
    pub flops: f64,
    pub params_train: usize,
    pub params_test: usize,
}

/// FLOPs and parameters with and without AF for the configured backbone and
/// the ViT-B/16 reference geometry.
pub fn cost_report(cfg: &ExperimentConfig) -> Vec<CostRow> {
    let mut rows = Vec::new();
    let mut push = |label: &str, vit: &VitConfig, hidden: usize, af: bool| {
        let s = vit.num_patches() + 1;
        let ratio = cfg.head.proj_hidden_ratio;
        rows.push(CostRow {
            label: label.into(),
            seq_len: s,
            flops: metrics::estimate_flops(vit, s, af),
            params_train: metrics::count_params(vit, Mode::Train, af, hidden, ratio).total,
            params_test: metrics::count_params(vit, Mode::Test, af, hidden, ratio).total,
        });
    };
    push("config baseline", &cfg.backbone, cfg.time_hidden(), false);
    push("config af", &cfg.backbone, cfg.time_hidden(), true);
    for side in [224, 112] {
        let vit = VitConfig::vit_b16(side);
        let hidden = 4 * vit.embed_dim;
        push(&format!("vit_b16@{side} baseline"), &vit, hidden, false);
        push(&format!("vit_b16@{side} af"), &vit, hidden, true);
    }
    rows
}

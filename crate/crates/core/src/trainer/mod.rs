//! Two-stage SGD training of an embedding backbone plus class weights.
//!
//! Stage 1 optimizes the margin softmax alone. From `stage2_start` on, the
//! IntraLoss term joins (when configured). The IntraLoss weights `w_intra`
//! and `1 − P_i` are constants during backpropagation.

mod backbone;
mod gradcheck;
mod sgd;

pub use backbone::{Backbone, BackboneKind, BackboneSpec, Batch, ForwardCache, LookupInit};
pub use gradcheck::{gradcheck, GradcheckEntry, GradcheckOptions, GradcheckReport};
pub use sgd::sgd_step;

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Matrix;
use crate::intra::{combined_forward, intra_forward, intra_only_grad_logits, IntraConfig, IntraParams, IntraResult};
use crate::margin::{lambda_at, softmax_cross_entropy, LossResult, MarginConfig, MarginLayer};
use crate::seed::{rng_for, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// What stage 2 optimizes when IntraLoss is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Objective {
    /// `L_s + L_intra`
    #[default]
    Joint,
    /// `L_intra` alone (negative control).
    IntraOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Iterations at which the learning rate is divided by `lr_decay_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub stage2_start: usize,
    pub stage2_objective: Stage2Objective,
    pub margin: MarginConfig,
    pub intra: Option<IntraParams>,
    pub backbone: BackboneSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_iterations(2000)
    }
}

impl TrainConfig {
    /// Defaults scaled to a run length: milestones at 40/70/90 %, stage 2 at 60 %.
    pub fn with_iterations(total: usize) -> Self {
        let at = |f: f64| (total as f64 * f).round() as usize;
        TrainConfig {
            learning_rate: 0.1,
            lr_milestones: vec![at(0.4), at(0.7), at(0.9)],
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            total_iterations: total,
            stage2_start: at(0.6),
            stage2_objective: Stage2Objective::Joint,
            margin: MarginConfig::default(),
            intra: None,
            backbone: BackboneSpec::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate", "must be positive"));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(Error::invalid("train.lr_decay_factor", "must be at least 1"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("train.lr_milestones", "must be strictly increasing"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be positive"));
        }
        if self.stage2_start > self.total_iterations {
            return Err(Error::invalid("train.stage2_start", "must not exceed total_iterations"));
        }
        if let Some(p) = self.intra {
            IntraConfig::new(p, &self.margin)?;
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| iteration >= m).count();
        self.learning_rate / self.lr_decay_factor.powi(passed as i32)
    }

    pub fn intra_config(&self) -> Result<Option<IntraConfig>> {
        self.intra.map(|p| IntraConfig::new(p, &self.margin)).transpose()
    }

    /// Objective in effect at `iteration`.
    pub fn objective_at(&self, iteration: usize) -> Result<Objective> {
        if iteration < self.stage2_start {
            return Ok(Objective::Base);
        }
        Ok(match (self.intra_config()?, self.stage2_objective) {
            (None, _) => Objective::Base,
            (Some(c), Stage2Objective::Joint) => Objective::Joint(c),
            (Some(c), Stage2Objective::IntraOnly) => Objective::IntraOnly(c),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Base,
    Joint(IntraConfig),
    IntraOnly(IntraConfig),
}

impl Objective {
    fn intra(&self) -> Option<&IntraConfig> {
        match self {
            Objective::Base => None,
            Objective::Joint(c) | Objective::IntraOnly(c) => Some(c),
        }
    }
}

/// IntraLoss weights pinned to fixed values, used to differentiate the
/// objective numerically under the same stop-gradient the analytic pass uses.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub w_intra: f64,
    pub one_minus_p: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss_s: f64,
    pub loss_intra: f64,
    /// Value of the optimized objective.
    pub objective: f64,
    pub w_intra: f64,
    pub mean_p: f64,
    pub base: LossResult,
    pub intra: Option<IntraResult>,
    pub backbone_grads: Vec<Matrix>,
    pub weight_grad: Matrix,
    pub frozen: FrozenWeights,
}

fn intra_with_frozen(z: &[f64], frozen: &FrozenWeights, cfg: &IntraConfig) -> IntraResult {
    let n = z.len() as f64;
    let per_sample_get: Vec<f64> = z.iter().map(|&v| crate::intra::get_term(v, cfg)).collect();
    let weighted: f64 = frozen.one_minus_p.iter().zip(&per_sample_get).map(|(q, g)| q * g).sum();
    IntraResult {
        l_intra: frozen.w_intra * weighted / n,
        w_intra: frozen.w_intra,
        grad_target_logits: z
            .iter()
            .zip(&frozen.one_minus_p)
            .map(|(&v, q)| frozen.w_intra * q * crate::intra::get_gradient(v, cfg) / n)
            .collect(),
        per_sample_get,
    }
}

/// Forward and backward pass of the objective on one batch.
pub fn evaluate(
    backbone: &Backbone,
    class_weights: &Matrix,
    batch: &Batch,
    margin: &MarginConfig,
    lambda: f64,
    objective: &Objective,
    frozen: Option<&FrozenWeights>,
) -> Result<Evaluation> {
    let cache = backbone.forward(batch)?;
    let layer = MarginLayer::new(&cache.features, class_weights, &batch.labels, margin, lambda)?;
    let stats = softmax_cross_entropy(layer.logits(), &batch.labels)?;
    let n = batch.len() as f64;
    let mean_p = stats.target_probs.iter().sum::<f64>() / n;
    let target_logits = layer.target_logits();
    let live = FrozenWeights {
        w_intra: mean_p,
        one_minus_p: stats.target_probs.iter().map(|p| 1.0 - p).collect(),
    };

    let base = LossResult {
        loss: stats.loss,
        labels: batch.labels.clone(),
        logits: layer.logits().clone(),
        target_logits: target_logits.clone(),
        target_probs: stats.target_probs.clone(),
        grad_logits: stats.grad_logits.clone(),
        grad_features: Matrix::zeros(0, 0),
        grad_weights: Matrix::zeros(0, 0),
    };

    let intra = match (objective.intra(), frozen) {
        (None, _) => None,
        (Some(cfg), Some(fz)) => Some(intra_with_frozen(&target_logits, fz, cfg)),
        (Some(cfg), None) => Some(intra_forward(&target_logits, &stats.target_probs, cfg)?),
    };

    let (objective_value, grad_logits) = match (objective, &intra) {
        (Objective::Joint(_), Some(r)) => combined_forward(&base, r)?,
        (Objective::IntraOnly(_), Some(r)) => (
            r.l_intra,
            intra_only_grad_logits(&batch.labels, class_weights.cols(), r)?,
        ),
        _ => (stats.loss, stats.grad_logits.clone()),
    };

    let (grad_features, weight_grad) = layer.backward(&grad_logits)?;
    let backbone_grads = backbone.backward(batch, &cache, &grad_features)?;
    Ok(Evaluation {
        loss_s: stats.loss,
        loss_intra: intra.as_ref().map_or(0.0, |r| r.l_intra),
        objective: objective_value,
        w_intra: mean_p,
        mean_p,
        base,
        intra,
        backbone_grads,
        weight_grad,
        frozen: frozen.cloned().unwrap_or(live),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub stage: u8,
    pub loss_s: f64,
    pub loss_intra: f64,
    pub w_intra: f64,
    pub mean_p: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "stage", "loss_s", "loss_intra", "w_intra", "mean_p", "lr"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.stage.to_string(),
                r.loss_s.to_string(),
                r.loss_intra.to_string(),
                r.w_intra.to_string(),
                r.mean_p.to_string(),
                r.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub backbone: Backbone,
    /// d×c, one column per class, unnormalized.
    pub class_weights: Matrix,
    pub trace: TrainTrace,
}

impl TrainedModel {
    /// Embeddings of one split, in dataset order. A lookup table only has
    /// rows for the training split.
    pub fn embed(&self, ds: &LabeledDataset, split: Split) -> Result<Matrix> {
        let (inputs, labels) = ds.split_view(split);
        if let Backbone::LookupTable { table } = &self.backbone {
            if split != Split::Train {
                return Err(Error::InsufficientData(
                    "a lookup-table backbone has no embeddings outside the training split".into(),
                ));
            }
            if table.rows() != inputs.rows() {
                return Err(Error::shape("lookup table rows", inputs.rows(), table.rows()));
            }
        }
        let ids: Vec<usize> = (0..inputs.rows()).collect();
        let batch = Batch {
            ids,
            inputs,
            labels,
        };
        Ok(self.backbone.forward(&batch)?.features)
    }
}

/// Deterministic epoch-wise shuffling over the training split.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.reshuffle();
        }
        let ids = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        ids
    }
}

/// Random unit-norm class directions, d×c.
pub fn init_class_weights(embed_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut w = Matrix::zeros(embed_dim, classes);
    for j in 0..classes {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..embed_dim).map(|_| rng.sample(StandardNormal)).collect();
            if crate::geometry::norm(&v) > 1e-9 {
                break v;
            }
        };
        let n = crate::geometry::norm(&v);
        for (k, x) in v.iter().enumerate() {
            w.set(k, j, x / n);
        }
    }
    w
}

/// Trains from freshly initialized parameters.
pub fn train(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    Ok(train_with_snapshots(ds, cfg, &[])?.0)
}

/// Parameters as they stood before `iteration` ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub backbone: Backbone,
    pub class_weights: Matrix,
}

impl Snapshot {
    pub fn model(&self) -> TrainedModel {
        TrainedModel {
            backbone: self.backbone.clone(),
            class_weights: self.class_weights.clone(),
            trace: TrainTrace::default(),
        }
    }
}

/// Like [`train`], also returning snapshots at the requested iterations
/// (`total_iterations` gives the final parameters).
pub fn train_with_snapshots(ds: &LabeledDataset, cfg: &TrainConfig, at: &[usize]) -> Result<(TrainedModel, Vec<Snapshot>)> {
    cfg.validate()?;
    let (inputs, _) = ds.split_view(Split::Train);
    let mut init_rng = rng_for(cfg.seed, Stream::Init);
    let backbone = Backbone::init(&cfg.backbone, &inputs, &mut init_rng)?;
    let weights = init_class_weights(cfg.backbone.embed_dim, ds.num_classes, &mut init_rng);
    run(ds, backbone, weights, cfg, at)
}

/// Trains starting from the given parameters; iterations and the learning
/// rate schedule still start at zero.
pub fn train_from(ds: &LabeledDataset, backbone: Backbone, weights: Matrix, cfg: &TrainConfig) -> Result<TrainedModel> {
    Ok(run(ds, backbone, weights, cfg, &[])?.0)
}

fn run(
    ds: &LabeledDataset,
    mut backbone: Backbone,
    mut weights: Matrix,
    cfg: &TrainConfig,
    snapshot_at: &[usize],
) -> Result<(TrainedModel, Vec<Snapshot>)> {
    cfg.validate()?;
    let (inputs, labels) = ds.split_view(Split::Train);
    if inputs.rows() == 0 {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    if weights.shape() != (backbone.embed_dim(), ds.num_classes) {
        return Err(Error::shape(
            "class weights",
            format!("{:?}", (backbone.embed_dim(), ds.num_classes)),
            format!("{:?}", weights.shape()),
        ));
    }
    let mut sampler = BatchSampler::new(inputs.rows(), rng_for(cfg.seed, Stream::Shuffle));
    let mut backbone_velocity: Vec<Matrix> = backbone.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut weight_velocity = Matrix::zeros(weights.rows(), weights.cols());
    let mut trace = TrainTrace::default();
    let mut snapshots = Vec::new();
    let mut take = |iteration: usize, backbone: &Backbone, weights: &Matrix| {
        if snapshot_at.contains(&iteration) {
            snapshots.push(Snapshot {
                iteration,
                backbone: backbone.clone(),
                class_weights: weights.clone(),
            });
        }
    };

    for iteration in 0..cfg.total_iterations {
        take(iteration, &backbone, &weights);
        let ids = sampler.next(cfg.batch_size);
        let batch = Batch::gather(&ids, &inputs, &labels);
        let lambda = lambda_at(iteration, &cfg.margin.lambda);
        let objective = cfg.objective_at(iteration)?;
        let eval = evaluate(&backbone, &weights, &batch, &cfg.margin, lambda, &objective, None)?;
        let finite = eval.objective.is_finite()
            && eval.weight_grad.is_finite()
            && eval.backbone_grads.iter().all(Matrix::is_finite);
        if !finite {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let lr = cfg.lr_at(iteration);
        for ((p, g), v) in backbone
            .params_mut()
            .into_iter()
            .zip(&eval.backbone_grads)
            .zip(backbone_velocity.iter_mut())
        {
            sgd_step(p, g, v, lr, cfg.momentum, cfg.weight_decay)?;
        }
        sgd_step(&mut weights, &eval.weight_grad, &mut weight_velocity, lr, cfg.momentum, cfg.weight_decay)?;
        trace.records.push(TraceRecord {
            iteration,
            stage: if iteration < cfg.stage2_start { 1 } else { 2 },
            loss_s: eval.loss_s,
            loss_intra: eval.loss_intra,
            w_intra: eval.w_intra,
            mean_p: eval.mean_p,
            lr,
        });
    }

    take(cfg.total_iterations, &backbone, &weights);
    Ok((
        TrainedModel {
            backbone,
            class_weights: weights,
            trace,
        },
        snapshots,
    ))
}

/// Fraction of training samples whose largest cosine (or raw logit for the
/// plain scheme) is their own class.
pub fn train_accuracy(model: &TrainedModel, ds: &LabeledDataset, margin: &MarginConfig) -> Result<f64> {
    let feats = model.embed(ds, Split::Train)?;
    let (_, labels) = ds.split_view(Split::Train);
    let layer = MarginLayer::new(&feats, &model.class_weights, &labels, margin, 0.0)?;
    let cos = layer.cosines();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = cos.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::margin::MarginScheme;

    fn small_ds() -> LabeledDataset {
        generate(&DatasetSpec {
            num_classes: 3,
            samples_per_class: 30,
            cluster_spread: 0.1,
            elongation: 1.0,
            seed: 4,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::with_iterations(100);
        assert_eq!(cfg.lr_milestones, vec![40, 70, 90]);
        assert_eq!(cfg.stage2_start, 60);
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(40) - 0.01).abs() < 1e-18);
        assert!((cfg.lr_at(95) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = TrainConfig::with_iterations(10);
        cfg.stage2_start = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::with_iterations(10);
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::with_iterations(10);
        cfg.margin.scheme = MarginScheme::Plain;
        cfg.intra = Some(IntraParams::default());
        assert!(matches!(cfg.validate(), Err(Error::UnsupportedScheme(_))));
    }

    #[test]
    fn trace_has_one_stage_switch() {
        let ds = small_ds();
        let mut cfg = TrainConfig::with_iterations(50);
        cfg.intra = Some(IntraParams::default());
        cfg.batch_size = 16;
        let model = train(&ds, &cfg).unwrap();
        let recs = &model.trace.records;
        assert_eq!(recs.len(), 50);
        assert!(recs.windows(2).all(|w| w[0].iteration < w[1].iteration));
        let switches = recs.windows(2).filter(|w| w[0].stage != w[1].stage).count();
        assert_eq!(switches, 1);
        assert_eq!(recs[30].stage, 2);
        assert!(recs[..30].iter().all(|r| r.loss_intra == 0.0 && r.w_intra > 0.0));
    }

    #[test]
    fn absent_intra_keeps_stage1_objective() {
        let ds = small_ds();
        let mut cfg = TrainConfig::with_iterations(40);
        cfg.batch_size = 16;
        let a = train(&ds, &cfg).unwrap();
        cfg.stage2_start = 40;
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.class_weights, b.class_weights);
        assert!(a.trace.records.iter().all(|r| r.loss_intra == 0.0));
    }

    #[test]
    fn identical_seeds_identical_parameters() {
        let ds = small_ds();
        let mut cfg = TrainConfig::with_iterations(30);
        cfg.intra = Some(IntraParams::default());
        cfg.seed = 12;
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 13;
        assert_ne!(a.class_weights, train(&ds, &cfg).unwrap().class_weights);
    }

    #[test]
    fn separable_points_reach_full_accuracy() {
        let ds = small_ds();
        let mut cfg = TrainConfig::with_iterations(500);
        cfg.margin = MarginConfig::with_scheme(MarginScheme::Norm);
        let model = train(&ds, &cfg).unwrap();
        assert_eq!(train_accuracy(&model, &ds, &cfg.margin).unwrap(), 1.0);
    }

    #[test]
    fn trace_csv_header() {
        let trace = TrainTrace {
            records: vec![TraceRecord {
                iteration: 0,
                stage: 1,
                loss_s: 1.5,
                loss_intra: 0.0,
                w_intra: 0.25,
                mean_p: 0.25,
                lr: 0.1,
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,stage,loss_s,loss_intra,w_intra,mean_p,lr\n0,1,1.5,0,0.25,0.25,0.1\n"
        );
    }
}

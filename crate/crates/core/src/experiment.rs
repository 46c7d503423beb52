//! A complete run: train on a dataset, then measure the embedding geometry.

use crate::data::{verification_pairs_in, LabeledDataset, Pair, Split};
use crate::error::Result;
use crate::eval::{distribution_report, DistributionReport};
use crate::intra::get_term;
use crate::margin::{MarginLayer, MarginScheme};
use crate::seed::{rng_for, Stream};
use crate::trainer::{
    gradcheck, init_class_weights, train_accuracy, train_with_snapshots, Backbone, Batch, GradcheckEntry, GradcheckOptions,
    Snapshot, TrainConfig, TrainedModel,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub const DEFAULT_NUM_PAIRS: usize = 600;

/// Split whose embeddings are evaluated: a lookup table only embeds the
/// training split.
pub fn eval_split(backbone: &Backbone) -> Split {
    match backbone {
        Backbone::LookupTable { .. } => Split::Train,
        Backbone::Mlp { .. } => Split::Test,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub train_accuracy: f64,
    pub eval_split: Split,
    pub pairs: Vec<Pair>,
    pub report: DistributionReport,
    pub snapshots: Vec<Snapshot>,
}

pub fn report_for(model: &TrainedModel, ds: &LabeledDataset, split: Split, pairs: &[Pair]) -> Result<DistributionReport> {
    let emb = model.embed(ds, split)?;
    let (_, labels) = ds.split_view(split);
    distribution_report(&emb, &labels, pairs)
}

/// Trains with `cfg` and reports on the evaluation split. Snapshots are kept
/// at the requested iterations.
pub fn run_experiment(ds: &LabeledDataset, cfg: &TrainConfig, num_pairs: usize, snapshot_at: &[usize]) -> Result<RunOutcome> {
    let (model, snapshots) = train_with_snapshots(ds, cfg, snapshot_at)?;
    let split = eval_split(&model.backbone);
    let pairs = verification_pairs_in(ds, split, num_pairs, cfg.seed)?;
    let report = report_for(&model, ds, split, &pairs)?;
    Ok(RunOutcome {
        train_accuracy: train_accuracy(&model, ds, &cfg.margin)?,
        eval_split: split,
        model,
        pairs,
        report,
        snapshots,
    })
}

/// Mean gradient-enhancing term over the training split. Zero without an
/// IntraLoss configuration.
pub fn mean_get(model: &TrainedModel, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<f64> {
    let Some(ic) = cfg.intra_config()? else {
        return Ok(0.0);
    };
    let feats = model.embed(ds, Split::Train)?;
    let (_, labels) = ds.split_view(Split::Train);
    let lambda = if cfg.margin.scheme == MarginScheme::MultiplicativeAngular {
        cfg.margin.lambda.min
    } else {
        0.0
    };
    let layer = MarginLayer::new(&feats, &model.class_weights, &labels, &cfg.margin, lambda)?;
    let z = layer.target_logits();
    Ok(z.iter().map(|&v| get_term(v, &ic)).sum::<f64>() / z.len() as f64)
}

/// Max relative error of one scheme/IntraLoss combination over several
/// random batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub scheme: MarginScheme,
    pub intra: bool,
    pub batches: usize,
    pub checked: usize,
    pub skipped_samples: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradcheckEntry>,
    pub passed: bool,
}

/// Schemes covered by the gradient check, each with and without IntraLoss
/// (the plain scheme has no IntraLoss optimum, so only without).
pub fn gradcheck_grid() -> Vec<(MarginScheme, bool)> {
    let mut grid = vec![(MarginScheme::Plain, false)];
    for s in [
        MarginScheme::Norm,
        MarginScheme::MultiplicativeAngular,
        MarginScheme::AdditiveCosine,
        MarginScheme::AdditiveAngular,
    ] {
        grid.push((s, false));
        grid.push((s, true));
    }
    grid
}

/// Runs [`gradcheck`] on `batches` random training batches of `batch_size`
/// samples for every entry of [`gradcheck_grid`]. Parameters are freshly
/// initialized per batch; class weights get a random scale so unnormalized
/// weights are exercised too.
pub fn gradcheck_suite(
    ds: &LabeledDataset,
    base: &TrainConfig,
    batch_size: usize,
    batches: usize,
    opts: &GradcheckOptions,
) -> Result<Vec<GradcheckRow>> {
    let (inputs, labels) = ds.split_view(Split::Train);
    let n = inputs.rows();
    let mut rows = Vec::new();
    for (scheme, intra) in gradcheck_grid() {
        let mut cfg = base.clone();
        cfg.margin.scheme = scheme;
        cfg.intra = intra.then(|| base.intra.unwrap_or_default());
        let mut rng = rng_for(base.seed, Stream::Gradcheck);
        let mut row = GradcheckRow {
            scheme,
            intra,
            batches,
            checked: 0,
            skipped_samples: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        };
        for _ in 0..batches {
            let mut backbone = Backbone::init(&cfg.backbone, &inputs, &mut rng)?;
            if let Backbone::LookupTable { table } = &mut backbone {
                // move rows off the data so features and weights are generic
                for v in table.as_mut_slice() {
                    *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut weights = init_class_weights(cfg.backbone.embed_dim, ds.num_classes, &mut rng);
            for v in weights.as_mut_slice() {
                *v *= rng.random_range(0.5..2.0);
            }
            let ids = rand::seq::index::sample(&mut rng, n, batch_size.min(n)).into_vec();
            let batch = Batch::gather(&ids, &inputs, &labels);
            let r = gradcheck(&backbone, &weights, &batch, &cfg, opts)?;
            row.checked += r.checked;
            row.skipped_samples += r.skipped_samples.len();
            row.passed &= r.passed;
            if r.max_rel_error >= row.max_rel_error {
                row.max_rel_error = r.max_rel_error;
                row.worst = r.worst;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

//! Embedding backbones with hand-written backward passes.

use crate::error::{Error, Result};
use crate::geometry::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// One free embedding per training sample.
    LookupTable,
    /// input → tanh hidden layer → linear embedding.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupInit {
    /// Rows start at `init_scale ·` the sample's input (needs input_dim == embed_dim).
    Inputs,
    /// Rows start as `N(0, init_scale²)` noise.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    pub lookup_init: LookupInit,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            kind: BackboneKind::LookupTable,
            embed_dim: 3,
            hidden_dim: 32,
            init_scale: 1.0,
            lookup_init: LookupInit::Inputs,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::invalid("backbone.embed_dim", "must be at least 2"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("backbone.init_scale", "must be positive"));
        }
        match self.kind {
            BackboneKind::Mlp if self.hidden_dim == 0 => Err(Error::invalid("backbone.hidden_dim", "must be positive")),
            BackboneKind::LookupTable if self.lookup_init == LookupInit::Inputs && input_dim != self.embed_dim => {
                Err(Error::invalid(
                    "backbone.lookup_init",
                    format!("`inputs` needs input_dim ({input_dim}) == embed_dim ({})", self.embed_dim),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Inputs of one mini-batch. `ids` index rows of the training split; the
/// lookup table reads them, the MLP reads `inputs`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn gather(ids: &[usize], inputs: &Matrix, labels: &[usize]) -> Batch {
        Batch {
            ids: ids.to_vec(),
            inputs: inputs.select_rows(ids),
            labels: ids.iter().map(|&i| labels[i]).collect(),
        }
    }

    /// Drops the samples at the given batch positions.
    pub fn without(&self, drop: &[usize]) -> Batch {
        let keep: Vec<usize> = (0..self.len()).filter(|i| !drop.contains(i)).collect();
        Batch {
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            inputs: self.inputs.select_rows(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    LookupTable {
        table: Matrix,
    },
    Mlp {
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    },
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub features: Matrix,
    hidden: Option<Matrix>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

impl Backbone {
    /// `train_inputs` are the training-split inputs, one row per sample.
    pub fn init(spec: &BackboneSpec, train_inputs: &Matrix, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate(train_inputs.cols())?;
        let e = spec.embed_dim;
        Ok(match spec.kind {
            BackboneKind::LookupTable => {
                let table = match spec.lookup_init {
                    LookupInit::Inputs => {
                        let mut t = train_inputs.clone();
                        t.as_mut_slice().iter_mut().for_each(|v| *v *= spec.init_scale);
                        t
                    }
                    LookupInit::Gaussian => gaussian_matrix(rng, train_inputs.rows(), e, spec.init_scale),
                };
                Backbone::LookupTable { table }
            }
            BackboneKind::Mlp => {
                let d = train_inputs.cols();
                let h = spec.hidden_dim;
                Backbone::Mlp {
                    w1: gaussian_matrix(rng, d, h, spec.init_scale / (d as f64).sqrt()),
                    b1: Matrix::zeros(1, h),
                    w2: gaussian_matrix(rng, h, e, spec.init_scale / (h as f64).sqrt()),
                    b2: Matrix::zeros(1, e),
                }
            }
        })
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::LookupTable { .. } => BackboneKind::LookupTable,
            Backbone::Mlp { .. } => BackboneKind::Mlp,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Backbone::LookupTable { table } => table.cols(),
            Backbone::Mlp { w2, .. } => w2.cols(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Backbone::LookupTable { .. } => &["table"],
            Backbone::Mlp { .. } => &["w1", "b1", "w2", "b2"],
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Backbone::LookupTable { table } => vec![table],
            Backbone::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Backbone::LookupTable { table } => vec![table],
            Backbone::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardCache> {
        match self {
            Backbone::LookupTable { table } => {
                if let Some(&bad) = batch.ids.iter().find(|&&i| i >= table.rows()) {
                    return Err(Error::shape("lookup id", format!("< {}", table.rows()), bad));
                }
                Ok(ForwardCache {
                    features: table.select_rows(&batch.ids),
                    hidden: None,
                })
            }
            Backbone::Mlp { w1, b1, w2, b2 } => {
                let mut hidden = batch.inputs.matmul(w1)?;
                for r in 0..hidden.rows() {
                    for (v, b) in hidden.row_mut(r).iter_mut().zip(b1.row(0)) {
                        *v = (*v + b).tanh();
                    }
                }
                let mut features = hidden.matmul(w2)?;
                for r in 0..features.rows() {
                    features.row_mut(r).iter_mut().zip(b2.row(0)).for_each(|(v, b)| *v += b);
                }
                Ok(ForwardCache {
                    features,
                    hidden: Some(hidden),
                })
            }
        }
    }

    /// Parameter gradients, aligned with [`Backbone::params`].
    pub fn backward(&self, batch: &Batch, cache: &ForwardCache, grad_features: &Matrix) -> Result<Vec<Matrix>> {
        grad_features.same_shape(&cache.features, "grad_features")?;
        match self {
            Backbone::LookupTable { table } => {
                let mut g = Matrix::zeros(table.rows(), table.cols());
                for (b, &id) in batch.ids.iter().enumerate() {
                    for (dst, src) in g.row_mut(id).iter_mut().zip(grad_features.row(b)) {
                        *dst += src;
                    }
                }
                Ok(vec![g])
            }
            Backbone::Mlp { w2, .. } => {
                let hidden = cache.hidden.as_ref().expect("mlp cache holds hidden activations");
                let g_w2 = hidden.transpose().matmul(grad_features)?;
                let g_b2 = column_sums(grad_features);
                let mut g_pre = grad_features.matmul(&w2.transpose())?;
                for (g, h) in g_pre.as_mut_slice().iter_mut().zip(hidden.as_slice()) {
                    *g *= 1.0 - h * h;
                }
                let g_w1 = batch.inputs.transpose().matmul(&g_pre)?;
                let g_b1 = column_sums(&g_pre);
                Ok(vec![g_w1, g_b1, g_w2, g_b2])
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

use crate::error::{Error, Result};
use crate::geometry::{l2_normalize_rows, Matrix};
use crate::intra::{get_gradient, IntraConfig};
use crate::margin::{softmax_cross_entropy, MarginConfig, MarginLayer};
use std::io::{Read, Write};

/// One embedding on the sphere with its target logit, probability and the
/// per-sample gradients of both losses w.r.t. that logit (without the batch
/// average).
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRow {
    pub sample_id: usize,
    pub label: usize,
    pub embedding: Vec<f64>,
    pub z: f64,
    pub p: f64,
    pub grad_softmax: f64,
    pub grad_intra: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereDump {
    pub dim: usize,
    pub rows: Vec<SphereRow>,
}

/// Builds the dump for `embeddings` against `weights`. Sample ids default to
/// row positions. `grad_intra` is zero when `intra` is `None`.
pub fn sphere_dump(
    embeddings: &Matrix,
    labels: &[usize],
    weights: &Matrix,
    margin: &MarginConfig,
    intra: Option<&IntraConfig>,
    lambda: f64,
) -> Result<SphereDump> {
    let unit = l2_normalize_rows(embeddings)?;
    let layer = MarginLayer::new(embeddings, weights, labels, margin, lambda)?;
    let stats = softmax_cross_entropy(layer.logits(), labels)?;
    let z = layer.target_logits();
    let w_intra = stats.target_probs.iter().sum::<f64>() / stats.target_probs.len().max(1) as f64;
    let rows = (0..unit.rows())
        .map(|i| {
            let p = stats.target_probs[i];
            SphereRow {
                sample_id: i,
                label: labels[i],
                embedding: unit.row(i).to_vec(),
                z: z[i],
                p,
                grad_softmax: p - 1.0,
                grad_intra: intra.map_or(0.0, |c| w_intra * (1.0 - p) * get_gradient(z[i], c)),
            }
        })
        .collect();
    Ok(SphereDump { dim: unit.cols(), rows })
}

impl SphereDump {
    pub fn set_sample_ids(&mut self, ids: &[usize]) -> Result<()> {
        if ids.len() != self.rows.len() {
            return Err(Error::shape("sample ids", self.rows.len(), ids.len()));
        }
        self.rows.iter_mut().zip(ids).for_each(|(r, &id)| r.sample_id = id);
        Ok(())
    }

    fn header(dim: usize) -> Vec<String> {
        let mut h = vec!["sample_id".to_string(), "label".to_string()];
        h.extend((0..dim).map(|k| format!("e{k}")));
        h.extend(["z", "p", "grad_softmax", "grad_intra"].map(String::from));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.dim))?;
        for r in &self.rows {
            let mut rec = vec![r.sample_id.to_string(), r.label.to_string()];
            rec.extend(r.embedding.iter().map(f64::to_string));
            rec.extend([r.z, r.p, r.grad_softmax, r.grad_intra].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<SphereDump> {
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        if header.len() < 7 {
            return Err(Error::Format {
                line: 1,
                reason: "too few columns".into(),
            });
        }
        let dim = header.len() - 6;
        if header != Self::header(dim) {
            return Err(Error::Format {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |reason: String| Error::Format { line, reason };
            let int = |k: usize| rec[k].parse::<usize>().map_err(|e| bad(e.to_string()));
            let float = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(e.to_string()));
            rows.push(SphereRow {
                sample_id: int(0)?,
                label: int(1)?,
                embedding: (0..dim).map(|k| float(2 + k)).collect::<Result<_>>()?,
                z: float(2 + dim)?,
                p: float(3 + dim)?,
                grad_softmax: float(4 + dim)?,
                grad_intra: float(5 + dim)?,
            });
        }
        Ok(SphereDump { dim, rows })
    }
}

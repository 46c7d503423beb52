//! Synthetic classification problems on the unit sphere.
//!
//! Each class gets a random mean direction. Samples are the mean plus
//! anisotropic Gaussian noise whose principal axis is a random tangent
//! direction stretched by `elongation`, projected back onto the sphere.

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, Matrix};
use crate::seed::{rng_for, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub elongation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            samples_per_class: 200,
            input_dim: 3,
            cluster_spread: 0.2,
            elongation: 3.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", format!("need at least 2, got {}", self.num_classes)));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid(
                "samples_per_class",
                format!("need at least 2, got {}", self.samples_per_class),
            ));
        }
        if self.input_dim < 2 {
            return Err(Error::invalid("input_dim", format!("need at least 2, got {}", self.input_dim)));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::invalid(
                "cluster_spread",
                format!("must be finite and non-negative, got {}", self.cluster_spread),
            ));
        }
        if !(self.elongation >= 1.0 && self.elongation.is_finite()) {
            return Err(Error::invalid("elongation", format!("must be at least 1, got {}", self.elongation)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Dataset rows belonging to `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Inputs and labels of one split, in dataset order.
    pub fn split_view(&self, split: Split) -> (Matrix, Vec<usize>) {
        let idx = self.split_indices(split);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.inputs.select_rows(&idx), labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `sample_id,label,split,x0..x{d-1}` with round-trippable floats.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sample_id".to_string(), "label".into(), "split".into()];
        header.extend((0..self.input_dim()).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), self.labels[i].to_string(), self.splits[i].as_str().to_string()];
            rec.extend(self.inputs.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let dim = header.len().saturating_sub(3);
        let expected_prefix = ["sample_id", "label", "split"];
        let ok = header.len() >= 4
            && header.iter().take(3).eq(expected_prefix.iter().copied())
            && header.iter().skip(3).enumerate().all(|(k, h)| h == format!("x{k}"));
        if !ok {
            return Err(Error::Format {
                line: 1,
                reason: "expected header sample_id,label,split,x0..".into(),
            });
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let bad = |reason: String| Error::Format { line, reason };
            let id: usize = rec[0].parse().map_err(|_| bad(format!("bad sample_id {:?}", &rec[0])))?;
            if id != row {
                return Err(bad(format!("sample_id {id} out of sequence")));
            }
            labels.push(rec[1].parse().map_err(|_| bad(format!("bad label {:?}", &rec[1])))?);
            splits.push(Split::parse(&rec[2]).ok_or_else(|| bad(format!("bad split {:?}", &rec[2])))?);
            for field in rec.iter().skip(3) {
                data.push(field.parse::<f64>().map_err(|_| bad(format!("bad float {field:?}")))?);
            }
        }
        let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let inputs = Matrix::from_vec(labels.len(), dim, data)?;
        Ok(LabeledDataset {
            num_classes,
            inputs,
            labels,
            splits,
        })
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to `mean`.
fn random_tangent(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, mean.len());
        let proj = dot(&v, mean);
        v.iter_mut().zip(mean).for_each(|(x, m)| *x -= proj * m);
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Number of training samples for a class of size `k`.
pub fn train_count(k: usize) -> usize {
    ((k as f64 * TRAIN_FRACTION).round() as usize).clamp(1, k - 1)
}

pub fn generate(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, Stream::Data);
    let d = spec.input_dim;
    let k = spec.samples_per_class;
    let n = spec.num_classes * k;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let n_train = train_count(k);

    for class in 0..spec.num_classes {
        let mean = random_unit(&mut rng, d);
        let axis = random_tangent(&mut rng, &mean);
        for _ in 0..k {
            let sample = loop {
                let z = gaussian_vec(&mut rng, d);
                let along = dot(&z, &axis) * (spec.elongation - 1.0);
                let v: Vec<f64> = (0..d)
                    .map(|j| mean[j] + spec.cluster_spread * (z[j] + along * axis[j]))
                    .collect();
                let nv = norm(&v);
                if nv > 1e-9 {
                    break v.into_iter().map(|x| x / nv).collect::<Vec<_>>();
                }
            };
            data.extend_from_slice(&sample);
            labels.push(class);
        }
        let mut tags: Vec<Split> = (0..k).map(|i| if i < n_train { Split::Train } else { Split::Test }).collect();
        tags.shuffle(&mut rng);
        splits.extend(tags);
    }

    Ok(LabeledDataset {
        num_classes: spec.num_classes,
        inputs: Matrix::from_vec(n, d, data)?,
        labels,
        splits,
    })
}

/// A verification pair. `a` and `b` index positions within the split the
/// pairs were drawn from (see [`LabeledDataset::split_indices`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Balanced same/different pairs from the test split.
pub fn verification_pairs(ds: &LabeledDataset, num_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    verification_pairs_in(ds, Split::Test, num_pairs, seed)
}

/// Balanced pairs from any split: `num_pairs / 2` positives (rounded down),
/// the rest negatives, without replacement while candidates last.
pub fn verification_pairs_in(ds: &LabeledDataset, split: Split, num_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    if num_pairs == 0 {
        return Err(Error::InsufficientData("zero pairs requested".into()));
    }
    let labels: Vec<usize> = ds.split_indices(split).iter().map(|&i| ds.labels[i]).collect();
    let m = labels.len();
    let mut per_class = vec![0usize; ds.num_classes.max(labels.iter().max().map_or(0, |x| x + 1))];
    for &y in &labels {
        per_class[y] += 1;
    }
    let pos_total: usize = per_class.iter().map(|&c| c * c.saturating_sub(1) / 2).sum();
    let all_pairs = m * m.saturating_sub(1) / 2;
    let neg_total = all_pairs - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return Err(Error::InsufficientData(format!(
            "{} split needs at least two classes and one class with two samples",
            split.as_str()
        )));
    }

    let mut rng = rng_for(seed, Stream::Pairs);
    let n_pos = num_pairs / 2;
    let n_neg = num_pairs - n_pos;
    let mut pairs = sample_pairs(&labels, true, n_pos, pos_total, &mut rng);
    pairs.extend(sample_pairs(&labels, false, n_neg, neg_total, &mut rng));
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

fn sample_pairs(labels: &[usize], same: bool, count: usize, available: usize, rng: &mut ChaCha8Rng) -> Vec<Pair> {
    let m = labels.len();
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    if 2 * count <= available {
        // rejection sampling; the acceptance rate stays reasonable because
        // fewer than half of the candidates are ever taken
        let mut seen = HashSet::with_capacity(count);
        while out.len() < count {
            let a = rng.random_range(0..m);
            let b = rng.random_range(0..m);
            if a == b || (labels[a] == labels[b]) != same {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                out.push(Pair { a: key.0, b: key.1, same });
            }
        }
        return out;
    }
    let mut all: Vec<Pair> = Vec::with_capacity(available);
    for a in 0..m {
        for b in a + 1..m {
            if (labels[a] == labels[b]) == same {
                all.push(Pair { a, b, same });
            }
        }
    }
    all.shuffle(rng);
    while out.len() < count {
        let take = (count - out.len()).min(all.len());
        out.extend_from_slice(&all[..take]);
        all.shuffle(rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unit_angle;

    fn spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let ds = generate(&DatasetSpec {
            cluster_spread: 0.0,
            elongation: 1.0,
            ..spec(3)
        })
        .unwrap();
        for class in 0..ds.num_classes {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            let first = ds.inputs.row(rows[0]).to_vec();
            for &r in &rows {
                assert_eq!(ds.inputs.row(r), first.as_slice());
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&spec(17)).unwrap();
        let b = generate(&spec(17)).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, generate(&spec(18)).unwrap());
    }

    #[test]
    fn inputs_are_unit_norm_and_split_is_stratified() {
        let ds = generate(&spec(1)).unwrap();
        for i in 0..ds.len() {
            assert!((norm(ds.inputs.row(i)) - 1.0).abs() < 1e-12);
        }
        for class in 0..8 {
            let train = (0..ds.len())
                .filter(|&i| ds.labels[i] == class && ds.splits[i] == Split::Train)
                .count();
            assert_eq!(train, 160);
        }
        assert_eq!(ds.class_counts(), vec![200; 8]);
    }

    #[test]
    fn empirical_spread_tracks_parameter() {
        let spread = 0.2;
        let ds = generate(&DatasetSpec {
            cluster_spread: spread,
            elongation: 1.0,
            ..spec(5)
        })
        .unwrap();
        let d = ds.input_dim();
        let mut means = Vec::new();
        for class in 0..8 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            let mut mean = vec![0.0; d];
            for &r in &rows {
                mean.iter_mut().zip(ds.inputs.row(r)).for_each(|(m, x)| *m += x);
            }
            let nm = norm(&mean);
            mean.iter_mut().for_each(|m| *m /= nm);
            // per tangent-axis angular std
            let ms: f64 = rows.iter().map(|&r| unit_angle(ds.inputs.row(r), &mean).powi(2)).sum::<f64>()
                / rows.len() as f64;
            let std = (ms / (d - 1) as f64).sqrt();
            assert!((std - spread).abs() < 0.3 * spread, "class {class}: {std}");
            means.push(mean);
        }
        let mut min_angle = f64::INFINITY;
        for a in 0..8 {
            for b in a + 1..8 {
                min_angle = min_angle.min(unit_angle(&means[a], &means[b]));
            }
        }
        assert!(min_angle > 0.0);
    }

    #[test]
    fn invalid_specs() {
        let bad = |s: DatasetSpec, field: &str| match generate(&s) {
            Err(Error::InvalidSpec { field: f, .. }) => assert_eq!(f, field),
            other => panic!("expected InvalidSpec for {field}, got {other:?}"),
        };
        bad(DatasetSpec { num_classes: 1, ..spec(0) }, "num_classes");
        bad(DatasetSpec { samples_per_class: 1, ..spec(0) }, "samples_per_class");
        bad(DatasetSpec { elongation: 0.5, ..spec(0) }, "elongation");
        bad(DatasetSpec { cluster_spread: -1.0, ..spec(0) }, "cluster_spread");
        bad(DatasetSpec { input_dim: 1, ..spec(0) }, "input_dim");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate(&DatasetSpec {
            num_classes: 3,
            samples_per_class: 5,
            ..spec(9)
        })
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,label,split,x0,x1,x2\n"));
        assert_eq!(text.lines().count(), 16);
        let back = LabeledDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(LabeledDataset::read_csv("a,b\n1,2\n".as_bytes()).is_err());
        let bad = "sample_id,label,split,x0\n0,0,train,zzz\n";
        assert!(matches!(LabeledDataset::read_csv(bad.as_bytes()), Err(Error::Format { line: 2, .. })));
        let bad = "sample_id,label,split,x0\n0,0,validation,1\n";
        assert!(LabeledDataset::read_csv(bad.as_bytes()).is_err());
    }

    fn tiny() -> LabeledDataset {
        // 2 classes × 2 test samples, plus train rows that must be ignored
        let inputs = Matrix::from_vec(6, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        LabeledDataset {
            num_classes: 2,
            inputs,
            labels: vec![0, 0, 1, 1, 0, 1],
            splits: vec![Split::Test, Split::Test, Split::Test, Split::Test, Split::Train, Split::Train],
        }
    }

    #[test]
    fn pair_balance_and_determinism() {
        let ds = generate(&spec(2)).unwrap();
        let pairs = verification_pairs(&ds, 10, 5).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 5);
        assert_eq!(pairs.iter().filter(|p| !p.same).count(), 5);
        assert_eq!(pairs, verification_pairs(&ds, 10, 5).unwrap());

        let test_labels: Vec<usize> = ds.split_indices(Split::Test).iter().map(|&i| ds.labels[i]).collect();
        let big = verification_pairs(&ds, 2000, 1).unwrap();
        let mut seen = HashSet::new();
        for p in &big {
            assert_eq!(test_labels[p.a] == test_labels[p.b], p.same);
            assert!(seen.insert((p.a, p.b)), "duplicate pair");
        }
    }

    #[test]
    fn minimal_pair_case() {
        let pairs = verification_pairs(&tiny(), 2, 0).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 1);
        // more positives requested than exist: reuse after exhausting
        let pairs = verification_pairs(&tiny(), 8, 0).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 4);
    }

    #[test]
    fn insufficient_pairs() {
        let mut ds = tiny();
        ds.labels = vec![0, 1, 2, 3, 0, 1];
        ds.num_classes = 4;
        assert!(matches!(verification_pairs(&ds, 4, 0), Err(Error::InsufficientData(_))));
        assert!(verification_pairs(&tiny(), 0, 0).is_err());
    }
}

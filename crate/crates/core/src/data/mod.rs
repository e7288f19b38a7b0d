//! Dataset files, split bookkeeping, normalisation, visual pivots and
//! mini-batch sampling.
//!
//! On-disk layout (all paths in the manifest are relative to its directory):
//!
//! * `manifest.json`: `{features_csv, attributes_csv, splits_json, d_v, d_s, n_classes, class_names}`
//! * features CSV: `label_id,f_1,...,f_dv`, one instance per line, no header
//! * attributes CSV: `class_id,a_1,...,a_ds`, one class per line, no header
//! * splits JSON: `{seen, unseen, train, test_seen, test_unseen}`; the last
//!   three hold instance ids, i.e. zero-based line numbers of the features CSV.

mod toy;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub use toy::{gen_toy, generate_toy, ToyMeta, ToySpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x d_v` visual features.
    pub visual: Tensor,
    /// `C x d_s` class semantics, row `c` belongs to class `c`.
    pub semantic: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn n_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.semantic.rows()
    }

    pub fn d_v(&self) -> usize {
        self.visual.cols()
    }

    pub fn d_s(&self) -> usize {
        self.semantic.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual.rows() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                self.visual.rows(),
                self.labels.len()
            )));
        }
        if self.class_names.len() != self.n_classes() {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.n_classes()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.n_classes())
        {
            return Err(Error::Data(format!(
                "label {l} of instance {i} out of range"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let seen: BTreeSet<usize> = self.seen.iter().copied().collect();
        let unseen: BTreeSet<usize> = self.unseen.iter().copied().collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Data(format!(
                "overlapping split: class {c} is both seen and unseen"
            )));
        }
        if seen.len() != self.seen.len() || unseen.len() != self.unseen.len() {
            return Err(Error::Data("duplicate class id in split".into()));
        }
        if let Some(&c) = seen.iter().chain(&unseen).find(|&&c| c >= ds.n_classes()) {
            return Err(Error::Data(format!("split class {c} out of range")));
        }
        let check = |name: &str, ids: &[usize], allowed: &BTreeSet<usize>| -> Result<()> {
            for &i in ids {
                let label = *ds
                    .labels
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("{name} instance {i} out of range")))?;
                if !allowed.contains(&label) {
                    return Err(Error::Data(format!(
                        "{name} instance {i} has class {label} outside its split"
                    )));
                }
            }
            Ok(())
        };
        check("train", &self.train, &seen)?;
        check("test_seen", &self.test_seen, &seen)?;
        check("test_unseen", &self.test_unseen, &unseen)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub features_csv: String,
    pub attributes_csv: String,
    pub splits_json: String,
    pub d_v: usize,
    pub d_s: usize,
    pub n_classes: usize,
    pub class_names: Vec<String>,
}

/// Accepts either the manifest file itself or a directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

pub fn load(manifest: impl AsRef<Path>) -> Result<(Dataset, SplitSpec)> {
    let path = manifest_path(manifest.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));

    if m.class_names.len() != m.n_classes {
        return Err(Error::Data(format!(
            "manifest lists {} class names for n_classes = {}",
            m.class_names.len(),
            m.n_classes
        )));
    }

    let feat_path = base.join(&m.features_csv);
    let rows = read_rows(&feat_path, m.d_v)?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no instances",
            feat_path.display()
        )));
    }
    let mut labels = Vec::with_capacity(rows.len());
    let mut visual = Vec::with_capacity(rows.len() * m.d_v);
    for (line, (id, values)) in rows.into_iter().enumerate() {
        if id >= m.n_classes {
            return Err(Error::Data(format!(
                "{}: label {id} out of range at line {}",
                feat_path.display(),
                line + 1
            )));
        }
        labels.push(id);
        visual.extend(values);
    }

    let attr_path = base.join(&m.attributes_csv);
    let attr_rows = read_rows(&attr_path, m.d_s)?;
    let mut semantic: Vec<Option<Vec<f64>>> = vec![None; m.n_classes];
    for (line, (id, values)) in attr_rows.into_iter().enumerate() {
        let slot = semantic.get_mut(id).ok_or_else(|| {
            Error::Data(format!(
                "{}: class id {id} out of range at line {}",
                attr_path.display(),
                line + 1
            ))
        })?;
        if slot.replace(values).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicate class id {id} at line {}",
                attr_path.display(),
                line + 1
            )));
        }
    }
    let mut sem = Vec::with_capacity(m.n_classes * m.d_s);
    for (c, row) in semantic.into_iter().enumerate() {
        sem.extend(
            row.ok_or_else(|| Error::Data(format!("{}: missing class {c}", attr_path.display())))?,
        );
    }

    let n = labels.len();
    let dataset = Dataset {
        visual: Tensor::matrix(n, m.d_v, visual)?,
        semantic: Tensor::matrix(m.n_classes, m.d_s, sem)?,
        labels,
        class_names: m.class_names,
    };

    let split_path = base.join(&m.splits_json);
    let split_text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split: SplitSpec = serde_json::from_str(&split_text)
        .map_err(|e| Error::Data(format!("{}: {e}", split_path.display())))?;

    dataset.validate()?;
    split.validate(&dataset)?;
    Ok((dataset, split))
}

/// Rows of `id,v_1..v_width`.
fn read_rows(path: &Path, width: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != width + 1 {
            return Err(Error::Data(format!(
                "{}: row width mismatch at line {line}: expected {} values, got {}",
                path.display(),
                width,
                rec.len().saturating_sub(1)
            )));
        }
        let id: usize = rec[0].trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}: bad id {:?} at line {line}",
                path.display(),
                &rec[0]
            ))
        })?;
        let values = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}: bad number {f:?} at line {line}",
                        path.display()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id, values));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => Error::Data(format!("{}: {msg}", path.display())),
    }
}

/// Writes `id,v_1,...` rows using the shortest round-tripping float format.
pub(crate) fn write_rows(path: &Path, ids: &[usize], values: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for (r, id) in ids.iter().enumerate() {
        let mut rec = Vec::with_capacity(values.cols() + 1);
        rec.push(id.to_string());
        rec.extend(values.row_slice(r).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-dimension min-max maps applied by [`normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub visual_min: Vec<f64>,
    pub visual_max: Vec<f64>,
    pub semantic_min: Vec<f64>,
    pub semantic_max: Vec<f64>,
    /// Visual dimensions that were constant on the training instances.
    pub constant_visual: Vec<usize>,
    pub constant_semantic: Vec<usize>,
}

impl NormalizationRecord {
    pub fn has_constant_dims(&self) -> bool {
        !self.constant_visual.is_empty() || !self.constant_semantic.is_empty()
    }

    /// Maps normalised visual features back to the original scale.
    pub fn invert_visual(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                let (lo, hi) = (self.visual_min[j], self.visual_max[j]);
                *v = if hi > lo {
                    (*v + 1.0) * 0.5 * (hi - lo) + lo
                } else {
                    lo
                };
            }
        }
        out
    }

    pub fn invert_semantic(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                let (lo, hi) = (self.semantic_min[j], self.semantic_max[j]);
                *v = if hi > lo { *v * (hi - lo) + lo } else { lo };
            }
        }
        out
    }
}

fn column_ranges(t: &Tensor, rows: impl Iterator<Item = usize>) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; t.cols()];
    let mut hi = vec![f64::NEG_INFINITY; t.cols()];
    for r in rows {
        for (j, &v) in t.row_slice(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    (lo, hi)
}

/// Min-max maps visual features onto `[-1, 1]` (ranges from training
/// instances only) and semantic rows onto `[0, 1]`. Constant dimensions map
/// to 0 and are listed in the record.
pub fn normalize(ds: &Dataset, split: &SplitSpec) -> Result<(Dataset, NormalizationRecord)> {
    if split.train.is_empty() {
        return Err(Error::Data("normalisation needs training instances".into()));
    }
    let (vmin, vmax) = column_ranges(&ds.visual, split.train.iter().copied());
    let (smin, smax) = column_ranges(&ds.semantic, 0..ds.n_classes());

    let mut visual = ds.visual.clone();
    for r in 0..visual.rows() {
        for (j, v) in visual.row_slice_mut(r).iter_mut().enumerate() {
            let (lo, hi) = (vmin[j], vmax[j]);
            *v = if hi > lo {
                2.0 * (*v - lo) / (hi - lo) - 1.0
            } else {
                0.0
            };
        }
    }
    let mut semantic = ds.semantic.clone();
    for r in 0..semantic.rows() {
        for (j, v) in semantic.row_slice_mut(r).iter_mut().enumerate() {
            let (lo, hi) = (smin[j], smax[j]);
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    let constant = |lo: &[f64], hi: &[f64]| -> Vec<usize> {
        (0..lo.len()).filter(|&j| hi[j] <= lo[j]).collect()
    };
    let record = NormalizationRecord {
        constant_visual: constant(&vmin, &vmax),
        constant_semantic: constant(&smin, &smax),
        visual_min: vmin,
        visual_max: vmax,
        semantic_min: smin,
        semantic_max: smax,
    };
    if record.has_constant_dims() {
        log::warn!(
            "constant dimensions mapped to 0: visual {:?}, semantic {:?}",
            record.constant_visual,
            record.constant_semantic
        );
    }
    Ok((
        Dataset {
            visual,
            semantic,
            labels: ds.labels.clone(),
            class_names: ds.class_names.clone(),
        },
        record,
    ))
}

/// Mean training feature of every seen class, in `split.seen` order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPivots {
    pub class_ids: Vec<usize>,
    /// `|seen| x d_v`, row `i` belongs to `class_ids[i]`.
    pub pivots: Tensor,
    pub counts: Vec<usize>,
}

impl VisualPivots {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn pivot(&self, i: usize) -> &[f64] {
        self.pivots.row_slice(i)
    }
}

pub fn compute_pivots(ds: &Dataset, split: &SplitSpec) -> Result<VisualPivots> {
    let d = ds.d_v();
    let mut sums = vec![vec![0.0; d]; split.seen.len()];
    let mut counts = vec![0usize; split.seen.len()];
    let position = class_positions(&split.seen, ds.n_classes());
    for &i in &split.train {
        let c = ds.labels[i];
        let p = position[c]
            .ok_or_else(|| Error::Data(format!("training instance {i} has non-seen class {c}")))?;
        counts[p] += 1;
        for (s, v) in sums[p].iter_mut().zip(ds.visual.row_slice(i)) {
            *s += v;
        }
    }
    if let Some(p) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "seen class {} has no training instances",
            split.seen[p]
        )));
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(VisualPivots {
        class_ids: split.seen.clone(),
        pivots: Tensor::from_rows(&sums)?,
        counts,
    })
}

/// `position[c] = Some(i)` when `ids[i] == c`.
pub fn class_positions(ids: &[usize], n_classes: usize) -> Vec<Option<usize>> {
    let mut pos = vec![None; n_classes];
    for (i, &c) in ids.iter().enumerate() {
        if c < n_classes {
            pos[c] = Some(i);
        }
    }
    pos
}

/// One mini-batch: visual rows paired with their class semantics.
#[derive(Clone, Debug)]
pub struct Batch {
    pub visual: Tensor,
    pub semantic: Tensor,
    pub labels: Vec<usize>,
}

/// Uniform sampling with replacement over the training instances.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    ds: &'a Dataset,
    train: &'a [usize],
    m: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a Dataset, split: &'a SplitSpec, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if split.train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        Ok(Self {
            ds,
            train: &split.train,
            m,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..self.m)
            .map(|_| self.train[rng.random_range(0..self.train.len())])
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.ds.labels[i]).collect();
        Batch {
            visual: self.ds.visual.select_rows(&idx),
            semantic: self.ds.semantic.select_rows(&labels),
            labels,
        }
    }
}

/// Normalised dataset plus everything derived from it that training and
/// evaluation share.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub record: NormalizationRecord,
    pub pivots: VisualPivots,
}

impl Prepared {
    pub fn new(raw: &Dataset, split: &SplitSpec) -> Result<Self> {
        raw.validate()?;
        split.validate(raw)?;
        let (dataset, record) = normalize(raw, split)?;
        let pivots = compute_pivots(&dataset, split)?;
        Ok(Self {
            dataset,
            split: split.clone(),
            record,
            pivots,
        })
    }

    /// Semantic rows of the seen classes, aligned with the pivots.
    pub fn seen_semantics(&self) -> Tensor {
        self.dataset.semantic.select_rows(&self.split.seen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Dataset, SplitSpec) {
        let ds = Dataset {
            visual: Tensor::matrix(4, 2, vec![0.0, 0.0, 2.0, 4.0, 5.0, 5.0, 7.0, 1.0]).unwrap(),
            semantic: Tensor::matrix(2, 3, vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.5]).unwrap(),
            labels: vec![0, 0, 1, 1],
            class_names: vec!["a".into(), "b".into()],
        };
        let split = SplitSpec {
            seen: vec![0],
            unseen: vec![1],
            train: vec![0, 1],
            test_seen: vec![],
            test_unseen: vec![2, 3],
        };
        (ds, split)
    }

    #[test]
    fn pivot_is_class_mean() {
        let (ds, split) = tiny();
        let p = compute_pivots(&ds, &split).unwrap();
        assert_eq!(p.pivot(0), &[1.0, 2.0]);
        assert_eq!(p.counts, vec![2]);
    }

    #[test]
    fn single_instance_pivot_is_that_instance() {
        let (ds, mut split) = tiny();
        split.train = vec![1];
        let p = compute_pivots(&ds, &split).unwrap();
        assert_eq!(p.pivot(0), ds.visual.row_slice(1));
    }

    #[test]
    fn seen_class_without_instances_errors() {
        let (ds, mut split) = tiny();
        split.train.clear();
        assert!(compute_pivots(&ds, &split).is_err());
    }

    #[test]
    fn overlapping_split_rejected() {
        let (ds, mut split) = tiny();
        split.unseen = vec![0, 1];
        let err = split.validate(&ds).unwrap_err().to_string();
        assert!(err.contains("overlapping split"), "{err}");
    }

    #[test]
    fn train_instance_must_be_seen() {
        let (ds, mut split) = tiny();
        split.train.push(3);
        assert!(split.validate(&ds).is_err());
    }

    #[test]
    fn normalisation_endpoints_and_midpoint() {
        let ds = Dataset {
            visual: Tensor::matrix(3, 2, vec![0.0, 3.0, 10.0, 3.0, 5.0, 3.0]).unwrap(),
            semantic: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            labels: vec![0, 0, 0],
            class_names: vec!["x".into()],
        };
        let split = SplitSpec {
            seen: vec![0],
            train: vec![0, 1, 2],
            ..Default::default()
        };
        let (n, rec) = normalize(&ds, &split).unwrap();
        assert_eq!(n.visual.row_slice(0)[0], -1.0);
        assert_eq!(n.visual.row_slice(1)[0], 1.0);
        assert_eq!(n.visual.row_slice(2)[0], 0.0);
        // constant dims
        assert!(n.visual.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
        assert_eq!(rec.constant_visual, vec![1]);
        assert_eq!(rec.constant_semantic, vec![0]);
        assert!(rec.has_constant_dims());
    }

    #[test]
    fn normalisation_inverts_on_train() {
        let (ds, split) = tiny();
        let (n, rec) = normalize(&ds, &split).unwrap();
        let back = rec.invert_visual(&n.visual);
        for &i in &split.train {
            for (a, b) in back.row_slice(i).iter().zip(ds.visual.row_slice(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let sb = rec.invert_semantic(&n.semantic);
        for (a, b) in sb.data().iter().zip(ds.semantic.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_sample_with_replacement() {
        let (ds, split) = tiny();
        let sampler = BatchSampler::new(&ds, &split, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sampler.sample(&mut rng);
        assert_eq!(b.visual.rows(), 7);
        assert_eq!(b.semantic.rows(), 7);
        assert!(b.labels.iter().all(|&l| l == 0));
        assert_eq!(b.semantic.row_slice(3), ds.semantic.row_slice(0));
    }

    #[test]
    fn batch_sequence_is_seeded() {
        let (ds, split) = tiny();
        let sampler = BatchSampler::new(&ds, &split, 5).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            assert_eq!(
                sampler.sample(&mut r1).visual,
                sampler.sample(&mut r2).visual
            );
        }
    }

    #[test]
    fn empty_train_or_zero_batch_rejected() {
        let (ds, mut split) = tiny();
        assert!(BatchSampler::new(&ds, &split, 0).is_err());
        split.train.clear();
        assert!(BatchSampler::new(&ds, &split, 4).is_err());
    }
}

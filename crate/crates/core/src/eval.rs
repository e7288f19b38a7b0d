//! Feature synthesis for unseen classes, classification, and the accuracy
//! metrics T1 (zero-shot), U / S / H (generalised).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::ndgrad::{cosine, euclidean, Graph, Tensor};
use crate::trainer::{adam_step, AdamConfig, AdamState, ModelBundle};

/// Something that produces visual features for a class.
pub trait FeatureSynthesizer {
    fn d_v(&self) -> usize;

    /// `n` features for class `class`, drawing noise from `rng`.
    fn synthesize_class(&self, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;

    /// Discriminator trunk, if the synthesizer has one.
    fn disc_features(&self, _v: &Tensor) -> Option<Result<Tensor>> {
        None
    }
}

/// A trained bundle paired with the class semantics it conditions on.
pub struct BundleSynthesizer<'a> {
    bundle: &'a ModelBundle,
    cond: Tensor,
}

impl<'a> BundleSynthesizer<'a> {
    pub fn new(bundle: &'a ModelBundle, prepared: &Prepared) -> Result<Self> {
        bundle.check_compatible(prepared)?;
        Ok(Self {
            bundle,
            cond: bundle.conditioning(&prepared.dataset.semantic)?,
        })
    }
}

impl FeatureSynthesizer for BundleSynthesizer<'_> {
    fn d_v(&self) -> usize {
        self.bundle.d_v
    }

    fn synthesize_class(&self, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if class >= self.cond.rows() {
            return Err(Error::Data(format!("unknown class id {class}")));
        }
        let d_z = self.bundle.config.d_z;
        let z: Vec<f64> = (0..n * d_z).map(|_| rng.sample(StandardNormal)).collect();
        let z = Tensor::matrix(n, d_z, z)?;
        let cond = self.cond.select_rows(&vec![class; n]);
        self.bundle
            .gen
            .mlp
            .forward(&Tensor::concat_cols(&[&cond, &z])?)
    }

    fn disc_features(&self, v: &Tensor) -> Option<Result<Tensor>> {
        Some(self.bundle.disc.features(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    NearestCentroid,
    /// Softmax head fitted on discriminator trunk features.
    DiscBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Zsl,
    Gzsl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_class: usize,
    pub seed: u64,
    pub metric: Metric,
    pub classifier: Classifier,
    /// Full-batch steps when fitting the discriminator-branch head.
    pub head_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_class: 300,
            seed: 0,
            metric: Metric::Euclidean,
            classifier: Classifier::NearestCentroid,
            head_steps: 300,
        }
    }
}

/// Synthetic features for `classes`, `n_per_class` each, in class order.
/// Each class draws from its own stream derived from `(seed, class)`.
pub fn synthesize(
    synth: &dyn FeatureSynthesizer,
    classes: &[usize],
    n_per_class: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if n_per_class == 0 {
        return Err(Error::Invalid("n_per_class must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(classes.len() * n_per_class * synth.d_v());
    let mut labels = Vec::with_capacity(classes.len() * n_per_class);
    for &c in classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let f = synthesize_checked(synth, c, n_per_class, &mut rng)?;
        rows.extend_from_slice(f.data());
        labels.extend(std::iter::repeat_n(c, n_per_class));
    }
    Ok((Tensor::matrix(labels.len(), synth.d_v(), rows)?, labels))
}

fn synthesize_checked(
    synth: &dyn FeatureSynthesizer,
    c: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let f = synth.synthesize_class(c, n, rng)?;
    if f.rows() != n || f.cols() != synth.d_v() {
        return Err(Error::dim(
            format!("synthetic features of class {c}"),
            n,
            f.rows(),
        ));
    }
    Ok(f)
}

/// Mean row of each class block produced by [`synthesize`].
fn block_means(features: &Tensor, n_classes: usize) -> Result<Tensor> {
    let n = features.rows() / n_classes.max(1);
    let mut out = Tensor::zeros(n_classes, features.cols());
    for c in 0..n_classes {
        let block = features.select_rows(&(c * n..(c + 1) * n).collect::<Vec<_>>());
        out.row_slice_mut(c)
            .copy_from_slice(block.column_means().data());
    }
    Ok(out)
}

/// Nearest centroid for each query row. Ties go to the smaller class id.
pub fn classify_nearest_centroid(
    queries: &Tensor,
    centroids: &Tensor,
    class_ids: &[usize],
    metric: Metric,
) -> Result<Vec<usize>> {
    if class_ids.is_empty() {
        return Err(Error::Invalid("empty centroid table".into()));
    }
    if class_ids.len() != centroids.rows() {
        return Err(Error::dim(
            "centroid ids",
            centroids.rows(),
            class_ids.len(),
        ));
    }
    if queries.cols() != centroids.cols() {
        return Err(Error::dim("query width", centroids.cols(), queries.cols()));
    }
    let mut out = Vec::with_capacity(queries.rows());
    for r in 0..queries.rows() {
        let q = queries.row_slice(r);
        let mut best: Option<(f64, usize)> = None;
        for (i, &id) in class_ids.iter().enumerate() {
            let d = match metric {
                Metric::Euclidean => euclidean(q, centroids.row_slice(i)),
                Metric::Cosine => 1.0 - cosine(q, centroids.row_slice(i))?,
            };
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && id < bid),
            };
            if better {
                best = Some((d, id));
            }
        }
        out.push(best.unwrap().1);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub acc: f64,
    pub n: usize,
}

/// Macro-averaged top-1 accuracy over `classes`, in percent, plus the
/// per-class table.
pub fn per_class_top1(
    predictions: &[usize],
    truth: &[usize],
    classes: &[usize],
) -> Result<(f64, Vec<ClassAccuracy>)> {
    if predictions.len() != truth.len() {
        return Err(Error::dim("predictions", truth.len(), predictions.len()));
    }
    if classes.is_empty() {
        return Err(Error::Invalid("empty class set".into()));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &t) in predictions.iter().zip(truth) {
        let e = tally
            .get_mut(&t)
            .ok_or_else(|| Error::Data(format!("label {t} outside the evaluated class set")))?;
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    let mut table = Vec::with_capacity(classes.len());
    for &c in classes {
        let (hit, n) = tally[&c];
        if n == 0 {
            return Err(Error::Data(format!("class {c} has no test instances")));
        }
        table.push(ClassAccuracy {
            class_id: c,
            acc: 100.0 * hit as f64 / n as f64,
            n,
        });
    }
    let mean = table.iter().map(|a| a.acc).sum::<f64>() / table.len() as f64;
    Ok((mean, table))
}

/// `2 U S / (U + S)`.
pub fn harmonic(u: f64, s: f64) -> Result<f64> {
    if u < 0.0 || s < 0.0 || !u.is_finite() || !s.is_finite() {
        return Err(Error::Invalid(format!(
            "accuracies must be finite and >= 0, got U={u} S={s}"
        )));
    }
    if u == 0.0 && s == 0.0 {
        return Err(Error::Invalid(
            "harmonic mean undefined for U = S = 0".into(),
        ));
    }
    Ok(2.0 * u * s / (u + s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    #[serde(rename = "T1", skip_serializing_if = "Option::is_none", default)]
    pub t1: Option<f64>,
    #[serde(rename = "U", skip_serializing_if = "Option::is_none", default)]
    pub u: Option<f64>,
    #[serde(rename = "S", skip_serializing_if = "Option::is_none", default)]
    pub s: Option<f64>,
    #[serde(rename = "H", skip_serializing_if = "Option::is_none", default)]
    pub h: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(format!("report: {e}")))
    }
}

fn instances(prepared: &Prepared, ids: &[usize]) -> (Tensor, Vec<usize>) {
    let ds = &prepared.dataset;
    (
        ds.visual.select_rows(ids),
        ids.iter().map(|&i| ds.labels[i]).collect(),
    )
}

/// Zero-shot: test instances of unseen classes against unseen classes only.
pub fn run_zsl(
    synth: &dyn FeatureSynthesizer,
    prepared: &Prepared,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let unseen = &prepared.split.unseen;
    let (feats, labels) = synthesize(synth, unseen, cfg.n_per_class, cfg.seed)?;
    let (queries, truth) = instances(prepared, &prepared.split.test_unseen);
    let pred = match cfg.classifier {
        Classifier::NearestCentroid => {
            let centroids = block_means(&feats, unseen.len())?;
            classify_nearest_centroid(&queries, &centroids, unseen, cfg.metric)?
        }
        Classifier::DiscBranch => disc_branch(synth, &feats, &labels, unseen, &queries, cfg)?,
    };
    let (t1, per_class) = per_class_top1(&pred, &truth, unseen)?;
    Ok(EvalReport {
        mode: Mode::Zsl,
        t1: Some(t1),
        u: None,
        s: None,
        h: None,
        per_class,
        config: cfg.clone(),
    })
}

/// Generalised: unseen classes represented by synthetic centroids, seen
/// classes by their real training pivots, all competing for every query.
pub fn run_gzsl(
    synth: &dyn FeatureSynthesizer,
    prepared: &Prepared,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let split = &prepared.split;
    let (feats, labels) = synthesize(synth, &split.unseen, cfg.n_per_class, cfg.seed)?;
    let (q_u, t_u) = instances(prepared, &split.test_unseen);
    let (q_s, t_s) = instances(prepared, &split.test_seen);
    let (p_u, p_s) = match cfg.classifier {
        Classifier::NearestCentroid => {
            let synth_c = block_means(&feats, split.unseen.len())?;
            let centroids = Tensor::concat_rows(&[&synth_c, &prepared.pivots.pivots])?;
            let ids: Vec<usize> = split.unseen.iter().chain(&split.seen).copied().collect();
            (
                classify_nearest_centroid(&q_u, &centroids, &ids, cfg.metric)?,
                classify_nearest_centroid(&q_s, &centroids, &ids, cfg.metric)?,
            )
        }
        Classifier::DiscBranch => {
            let (real, real_labels) = instances(prepared, &split.train);
            let train = Tensor::concat_rows(&[&feats, &real])?;
            let train_labels: Vec<usize> = labels.iter().chain(&real_labels).copied().collect();
            let ids: Vec<usize> = split.unseen.iter().chain(&split.seen).copied().collect();
            let both = Tensor::concat_rows(&[&q_u, &q_s])?;
            let pred = disc_branch(synth, &train, &train_labels, &ids, &both, cfg)?;
            let (a, b) = pred.split_at(q_u.rows());
            (a.to_vec(), b.to_vec())
        }
    };
    gzsl_report(&p_u, &t_u, &p_s, &t_s, split, cfg)
}

fn gzsl_report(
    p_u: &[usize],
    t_u: &[usize],
    p_s: &[usize],
    t_s: &[usize],
    split: &crate::data::SplitSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (u, mut per_class) = per_class_top1(p_u, t_u, &split.unseen)?;
    let (s, seen_table) = per_class_top1(p_s, t_s, &split.seen)?;
    per_class.extend(seen_table);
    per_class.sort_by_key(|a| a.class_id);
    let h = if u == 0.0 && s == 0.0 {
        0.0
    } else {
        harmonic(u, s)?
    };
    Ok(EvalReport {
        mode: Mode::Gzsl,
        t1: None,
        u: Some(u),
        s: Some(s),
        h: Some(h),
        per_class,
        config: cfg.clone(),
    })
}

/// GZSL scoring against an explicit centroid table. Classes without a row
/// can never be predicted.
pub fn gzsl_with_centroids(
    prepared: &Prepared,
    centroids: &Tensor,
    class_ids: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let split = &prepared.split;
    let (q_u, t_u) = instances(prepared, &split.test_unseen);
    let (q_s, t_s) = instances(prepared, &split.test_seen);
    let p_u = classify_nearest_centroid(&q_u, centroids, class_ids, cfg.metric)?;
    let p_s = classify_nearest_centroid(&q_s, centroids, class_ids, cfg.metric)?;
    gzsl_report(&p_u, &t_u, &p_s, &t_s, split, cfg)
}

/// Fits a softmax head on discriminator trunk features of `train` and
/// predicts `queries`.
fn disc_branch(
    synth: &dyn FeatureSynthesizer,
    train: &Tensor,
    train_labels: &[usize],
    classes: &[usize],
    queries: &Tensor,
    cfg: &EvalConfig,
) -> Result<Vec<usize>> {
    let no_disc = || Error::Invalid("disc_branch classifier needs a discriminator".into());
    let feats = synth.disc_features(train).ok_or_else(no_disc)??;
    let q = synth.disc_features(queries).ok_or_else(no_disc)??;
    let pos: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let targets: Vec<usize> = train_labels
        .iter()
        .map(|c| {
            pos.get(c)
                .copied()
                .ok_or_else(|| Error::Data(format!("unknown class id {c}")))
        })
        .collect::<Result<_>>()?;

    let mut w = Tensor::zeros(feats.cols(), classes.len());
    let mut b = Tensor::zeros(1, classes.len());
    let mut state = AdamState::new(&[&w, &b]);
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.head_steps {
        let mut g = Graph::new();
        let x = g.constant(feats.clone());
        let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
        let logits = g.affine(x, wv, bv)?;
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let grads = g.backward(loss)?;
        let gs = [grads.get_or_zeros(wv, &w), grads.get_or_zeros(bv, &b)];
        adam_step(&mut [&mut w, &mut b], &gs, &mut state, &adam)?;
    }
    let logits = q.matmul(&w)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row_slice(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                let bi = v + b.data()[i];
                let bb = row[best] + b.data()[best];
                if bi > bb || (bi == bb && classes[i] < classes[best]) {
                    best = i;
                }
            }
            classes[best]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_reported_values() {
        assert!((harmonic(41.46, 83.08).unwrap() - 55.31).abs() < 0.01);
        assert!((harmonic(31.29, 60.87).unwrap() - 41.34).abs() < 0.01);
    }

    #[test]
    fn harmonic_degenerate_cases() {
        assert_eq!(harmonic(37.5, 37.5).unwrap(), 37.5);
        assert_eq!(harmonic(0.0, 80.0).unwrap(), 0.0);
        assert!(harmonic(0.0, 0.0).is_err());
        assert!(harmonic(-1.0, 5.0).is_err());
    }

    #[test]
    fn centroid_rules() {
        let c = Tensor::matrix(3, 2, vec![0.0, 0.0, 4.0, 0.0, 0.0, 3.0]).unwrap();
        let ids = [7, 2, 5];
        // exact hit, tie between ids 7 and 2 at (2, 0), and a hand case:
        // (1, 2): distances sqrt(5), sqrt(13), sqrt(2) -> class 5
        let q = Tensor::matrix(3, 2, vec![4.0, 0.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let p = classify_nearest_centroid(&q, &c, &ids, Metric::Euclidean).unwrap();
        assert_eq!(p, vec![2, 2, 5]);
        let err = classify_nearest_centroid(&q, &c, &[], Metric::Euclidean).unwrap_err();
        assert!(err.to_string().contains("empty centroid table"));
    }

    #[test]
    fn macro_average() {
        let (all, _) = per_class_top1(&[1, 2, 2], &[1, 2, 2], &[1, 2]).unwrap();
        assert_eq!(all, 100.0);
        let (half, _) = per_class_top1(&[0, 0, 0, 0, 0, 0], &[0, 0, 1, 1, 1, 1], &[0, 1]).unwrap();
        assert_eq!(half, 50.0);
        // counts (1, 2, 3); correct (1, 1, 1): (100 + 50 + 33.33...) / 3
        let (m, table) =
            per_class_top1(&[0, 1, 0, 2, 0, 0], &[0, 1, 1, 2, 2, 2], &[0, 1, 2]).unwrap();
        assert!((m - (100.0 + 50.0 + 100.0 / 3.0) / 3.0).abs() < 1e-12);
        assert_eq!(table[2].n, 3);
    }

    #[test]
    fn empty_class_and_foreign_label_rejected() {
        assert!(per_class_top1(&[0], &[0], &[0, 1]).is_err());
        assert!(per_class_top1(&[3], &[3], &[0]).is_err());
    }
}

//! Synthetic zero-shot task with tunable semantic overlap.
//!
//! Each class owns a sparse binary attribute vector with `d_s / 4` active
//! attributes. Visual dimension `j` copies attribute `j mod d_s` plus
//! Gaussian noise, so visual class means share the cosine geometry of the
//! attribute vectors. Classes are paired within the seen and within the
//! unseen group; paired classes get disjoint attributes and their semantic
//! rows are pulled toward their midpoint by `overlap`, while the visual
//! means stay apart.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_rows, Dataset, Manifest, SplitSpec};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Share of each seen class's instances used for training.
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_v: usize,
    pub d_s: usize,
    pub overlap: f64,
    pub per_class: usize,
    /// Within-class standard deviation of each visual dimension.
    pub noise: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_seen: 10,
            n_unseen: 5,
            d_v: 32,
            d_s: 16,
            overlap: 0.3,
            per_class: 100,
            noise: 0.1,
        }
    }
}

/// Written next to the dataset as `toy.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMeta {
    pub spec: ToySpec,
    /// Class pairs whose semantics were pulled together.
    pub confusable: Vec<(usize, usize)>,
}

impl ToySpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("gen-toy: {m}")));
        if self.n_seen < 2 {
            return bad(format!("need at least 2 seen classes, got {}", self.n_seen));
        }
        if self.n_unseen < 1 {
            return bad("need at least 1 unseen class".into());
        }
        if self.d_s < 4 {
            return bad(format!("d_s must be >= 4, got {}", self.d_s));
        }
        if self.d_v < self.d_s {
            return bad(format!("d_v ({}) must be >= d_s ({})", self.d_v, self.d_s));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1], got {}", self.overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if self.per_class < 2 {
            return bad("per_class must be >= 2".into());
        }
        Ok(())
    }
}

pub fn generate_toy(spec: &ToySpec) -> Result<(Dataset, SplitSpec, ToyMeta)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_classes = spec.n_seen + spec.n_unseen;
    let k = spec.d_s / 4;

    let mut confusable = Vec::new();
    for (start, len) in [(0, spec.n_seen), (spec.n_seen, spec.n_unseen)] {
        for p in 0..len / 2 {
            confusable.push((start + 2 * p, start + 2 * p + 1));
        }
    }
    let partner = |c: usize| -> Option<usize> {
        confusable.iter().find_map(|&(a, b)| {
            if a == c {
                Some(b)
            } else if b == c {
                Some(a)
            } else {
                None
            }
        })
    };

    // Attribute supports: partners disjoint, any two classes share <= k/2.
    let max_shared = k / 2;
    let mut supports: Vec<Vec<usize>> = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let forbidden: Vec<usize> = match partner(c) {
            Some(p) if p < c => supports[p].clone(),
            _ => Vec::new(),
        };
        let pool: Vec<usize> = (0..spec.d_s).filter(|j| !forbidden.contains(j)).collect();
        let mut placed = false;
        for _ in 0..10_000 {
            let mut s: Vec<usize> = index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            s.sort_unstable();
            let ok = supports
                .iter()
                .all(|o| s.iter().filter(|j| o.contains(j)).count() <= max_shared);
            if ok {
                supports.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "gen-toy: cannot place {n_classes} distinct classes with d_s = {}",
                spec.d_s
            )));
        }
    }
    let attributes: Vec<Vec<f64>> = supports
        .iter()
        .map(|s| {
            let mut a = vec![0.0; spec.d_s];
            for &j in s {
                a[j] = 1.0;
            }
            a
        })
        .collect();

    let mut semantic = attributes.clone();
    let w = spec.overlap;
    for &(i, j) in &confusable {
        for d in 0..spec.d_s {
            let (ai, aj) = (attributes[i][d], attributes[j][d]);
            semantic[i][d] = ai + 0.5 * w * (aj - ai);
            semantic[j][d] = aj + 0.5 * w * (ai - aj);
        }
    }

    let n = n_classes * spec.per_class;
    let mut visual = Vec::with_capacity(n * spec.d_v);
    let mut labels = Vec::with_capacity(n);
    for (c, a) in attributes.iter().enumerate() {
        for _ in 0..spec.per_class {
            labels.push(c);
            for j in 0..spec.d_v {
                let noise: f64 = rng.sample(StandardNormal);
                visual.push(a[j % spec.d_s] + spec.noise * noise);
            }
        }
    }

    let n_train =
        ((spec.per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, spec.per_class - 1);
    let mut split = SplitSpec {
        seen: (0..spec.n_seen).collect(),
        unseen: (spec.n_seen..n_classes).collect(),
        ..Default::default()
    };
    for c in 0..n_classes {
        let base = c * spec.per_class;
        if c < spec.n_seen {
            split.train.extend(base..base + n_train);
            split
                .test_seen
                .extend(base + n_train..base + spec.per_class);
        } else {
            split.test_unseen.extend(base..base + spec.per_class);
        }
    }

    let dataset = Dataset {
        visual: Tensor::matrix(n, spec.d_v, visual)?,
        semantic: Tensor::from_rows(&semantic)?,
        labels,
        class_names: (0..n_classes).map(|c| format!("class_{c:02}")).collect(),
    };
    let meta = ToyMeta {
        spec: spec.clone(),
        confusable,
    };
    Ok((dataset, split, meta))
}

/// Generates the toy task and writes it under `out` as a loadable dataset.
pub fn gen_toy(spec: &ToySpec, out: impl AsRef<Path>) -> Result<ToyMeta> {
    let out = out.as_ref();
    let (ds, split, meta) = generate_toy(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    write_rows(&out.join("features.csv"), &ds.labels, &ds.visual)?;
    let class_ids: Vec<usize> = (0..ds.n_classes()).collect();
    write_rows(&out.join("attributes.csv"), &class_ids, &ds.semantic)?;

    let manifest = Manifest {
        features_csv: "features.csv".into(),
        attributes_csv: "attributes.csv".into(),
        splits_json: "splits.json".into(),
        d_v: spec.d_v,
        d_s: spec.d_s,
        n_classes: ds.n_classes(),
        class_names: ds.class_names.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("splits.json"), &split)?;
    write_json(&out.join("toy.json"), &meta)?;
    Ok(meta)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("serialise {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#![allow(dead_code)]

pub mod grad;

use rand_chacha::ChaCha8Rng;
use srgan::data::{generate_toy, Prepared, ToySpec};
use srgan::eval::FeatureSynthesizer;
use srgan::ndgrad::Tensor;
use srgan::trainer::TrainConfig;
use srgan::Result;

/// Emits the mean normalised feature of every instance of the class.
pub struct PivotEcho {
    pub means: Tensor,
}

impl PivotEcho {
    pub fn new(p: &Prepared) -> Self {
        let ds = &p.dataset;
        let mut means = Tensor::zeros(ds.n_classes(), ds.d_v());
        let mut counts = vec![0usize; ds.n_classes()];
        for (i, &c) in ds.labels.iter().enumerate() {
            counts[c] += 1;
            for (m, v) in means
                .row_slice_mut(c)
                .iter_mut()
                .zip(ds.visual.row_slice(i))
            {
                *m += v;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            means
                .row_slice_mut(c)
                .iter_mut()
                .for_each(|m| *m /= n as f64);
        }
        Self { means }
    }
}

impl FeatureSynthesizer for PivotEcho {
    fn d_v(&self) -> usize {
        self.means.cols()
    }

    fn synthesize_class(&self, class: usize, n: usize, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.means.select_rows(&vec![class; n]))
    }
}

pub fn toy(spec: ToySpec) -> Prepared {
    let (ds, split, _) = generate_toy(&spec).unwrap();
    Prepared::new(&ds, &split).unwrap()
}

/// A configuration small enough for a unit-test budget.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        srn_iters: 30,
        gan_iters: 6,
        d_z: 4,
        srn_hidden: 8,
        gen_hidden: 8,
        disc_hidden: 8,
        enc_hidden: 8,
        vp_draws: 2,
        seed,
        ..TrainConfig::toy()
    }
}

pub fn small_spec(seed: u64) -> ToySpec {
    ToySpec {
        seed,
        n_seen: 4,
        n_unseen: 2,
        d_v: 8,
        d_s: 8,
        per_class: 20,
        ..ToySpec::default()
    }
}

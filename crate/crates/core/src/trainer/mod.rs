//! Two-phase training: the rectifier first, then the adversarial networks
//! with the rectifier frozen.

mod adam;
pub mod checkpoint;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load, load_srn, save, save_srn, FORMAT_VERSION, MAGIC};

use crate::data::{class_positions, BatchSampler, Prepared};
use crate::error::{Error, Result};
use crate::ndgrad::{Gradients, Graph, Precision, Tensor, Var};
use crate::srgan::{self, DiscParams, EncParams, GanBatch, GenParams, PostParams};
use crate::srn::{self, Rectifier, SrnLoss, SrnParams};

const STREAM_SRN: u64 = 1;
const STREAM_GAN: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the rectifier phase.
    pub srn_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Discriminator updates per generator update.
    pub n_d: usize,
    /// Gradient penalty weight.
    pub lambda: f64,
    pub srn_iters: usize,
    pub gan_iters: usize,
    /// Extra repeats of each generator-side update.
    pub g_extra_updates: usize,
    pub d_z: usize,
    pub srn_hidden: usize,
    pub gen_hidden: usize,
    pub disc_hidden: usize,
    pub enc_hidden: usize,
    /// Noise draws per seen class in the pivot loss.
    pub vp_draws: usize,
    pub seed: u64,
    pub precision: Precision,
    pub use_srn: bool,
    pub use_rec: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            lr: 1e-4,
            srn_lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            n_d: 5,
            lambda: 10.0,
            srn_iters: 2000,
            gan_iters: 3000,
            g_extra_updates: 2,
            d_z: 100,
            srn_hidden: 1024,
            gen_hidden: 2048,
            disc_hidden: 2048,
            enc_hidden: 2048,
            vp_draws: 32,
            seed: 0,
            precision: Precision::F64,
            use_srn: true,
            use_rec: true,
        }
    }
}

impl TrainConfig {
    /// Narrow networks and a 256-row batch for the synthetic task.
    pub fn toy() -> Self {
        Self {
            batch_size: 256,
            srn_lr: 1e-3,
            d_z: 8,
            srn_hidden: 64,
            gen_hidden: 64,
            disc_hidden: 64,
            enc_hidden: 64,
            vp_draws: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("n_d", self.n_d),
            ("d_z", self.d_z),
            ("srn_hidden", self.srn_hidden),
            ("gen_hidden", self.gen_hidden),
            ("disc_hidden", self.disc_hidden),
            ("enc_hidden", self.enc_hidden),
            ("vp_draws", self.vp_draws),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, lr) in [("lr", self.lr), ("srn_lr", self.srn_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub fn srn_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.srn_lr,
            ..self.adam()
        }
    }
}

/// Adam moments for every network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerStates {
    pub srn: Option<AdamState>,
    pub gen: AdamState,
    pub disc: AdamState,
    pub enc: AdamState,
    pub post: AdamState,
}

/// Every trained network plus what is needed to resume or evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub d_v: usize,
    pub d_s: usize,
    /// Class ids behind the discriminator's classifier outputs.
    pub seen: Vec<usize>,
    pub srn: Option<SrnParams>,
    pub gen: GenParams,
    pub disc: DiscParams,
    pub enc: EncParams,
    pub post: PostParams,
    pub opt: OptimizerStates,
    /// Completed adversarial iterations.
    pub iteration: u64,
}

impl ModelBundle {
    /// Freshly initialised adversarial networks around an optional rectifier.
    pub fn init<R: Rng + ?Sized>(
        config: &TrainConfig,
        d_v: usize,
        d_s: usize,
        seen: &[usize],
        srn: Option<(SrnParams, AdamState)>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if let Some((p, _)) = &srn {
            if p.d_s() != d_s {
                return Err(Error::dim("rectifier width", d_s, p.d_s()));
            }
        }
        let gen = GenParams::init(d_s, config.d_z, config.gen_hidden, d_v, rng)?;
        let disc = DiscParams::init(d_v, config.disc_hidden, seen.len(), rng)?;
        let enc = EncParams::init(d_v, config.enc_hidden, config.d_z, rng)?;
        let post = PostParams::init(d_v, config.enc_hidden, d_s, config.d_z, rng)?;
        let (srn, srn_opt) = match srn {
            Some((p, s)) => (Some(p), Some(s)),
            None => (None, None),
        };
        let opt = OptimizerStates {
            srn: srn_opt,
            gen: AdamState::new(&gen.mlp.tensors()),
            disc: AdamState::new(&disc.tensors()),
            enc: AdamState::new(&enc.mlp.tensors()),
            post: AdamState::new(&post.mlp.tensors()),
        };
        Ok(Self {
            config: config.clone(),
            d_v,
            d_s,
            seen: seen.to_vec(),
            srn,
            gen,
            disc,
            enc,
            post,
            opt,
            iteration: 0,
        })
    }

    pub fn rectifier(&self) -> Rectifier<'_> {
        match &self.srn {
            Some(p) => Rectifier::Network(p),
            None => Rectifier::Identity,
        }
    }

    /// Fails when the bundle's widths or classes do not fit `prepared`.
    pub fn check_compatible(&self, prepared: &Prepared) -> Result<()> {
        let ds = &prepared.dataset;
        if self.d_v != ds.d_v() {
            return Err(Error::dim("model d_v", self.d_v, ds.d_v()));
        }
        if self.d_s != ds.d_s() {
            return Err(Error::dim("model d_s", self.d_s, ds.d_s()));
        }
        if let Some(&c) = self.seen.iter().find(|&&c| c >= ds.n_classes()) {
            return Err(Error::Data(format!("model seen class {c} not in dataset")));
        }
        Ok(())
    }

    /// `[s, R(s)]` for every class of `semantic`.
    pub fn conditioning(&self, semantic: &Tensor) -> Result<Tensor> {
        let r = self.rectifier().apply(semantic)?;
        Tensor::concat_cols(&[semantic, &r])
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iter: u64,
    pub loss_d: f64,
    /// Adversarial, classification and pivot terms together.
    pub loss_g: f64,
    pub loss_vp: f64,
    pub loss_e: f64,
    pub loss_f: f64,
}

pub fn write_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = String::from("iter,loss_D,loss_G,loss_VP,loss_E,loss_F\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.loss_d, r.loss_g, r.loss_vp, r.loss_e, r.loss_f
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A parameter update, reported to the hook of [`train_with_hook`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Update {
    Srn,
    Disc { iter: u64 },
    Gen { iter: u64 },
    Enc { iter: u64 },
    Post { iter: u64 },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub srn_history: Vec<SrnLoss>,
    pub history: Vec<LossRecord>,
}

pub fn train(prepared: &Prepared, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(prepared, config, |_| {})
}

/// Both phases, calling `hook` after every parameter update.
pub fn train_with_hook(
    prepared: &Prepared,
    config: &TrainConfig,
    mut hook: impl FnMut(Update),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (srn, srn_history) = if config.use_srn {
        let (p, s, h) = train_rectifier(prepared, config, &mut hook)?;
        (Some((p, s)), h)
    } else {
        (None, Vec::new())
    };
    let (bundle, history) = train_gan(prepared, config, srn, hook)?;
    Ok(TrainOutcome {
        bundle,
        srn_history,
        history,
    })
}

/// Phase one alone.
pub fn train_rectifier(
    prepared: &Prepared,
    config: &TrainConfig,
    hook: &mut impl FnMut(Update),
) -> Result<(SrnParams, AdamState, Vec<SrnLoss>)> {
    config.validate()?;
    let mut rng = rng_for(config.seed, STREAM_SRN);
    let params = SrnParams::init(prepared.dataset.d_s(), config.srn_hidden, &mut rng)?;
    let (p, s, h) = srn::continue_srn(params, prepared, config)?;
    for _ in 0..h.len() {
        hook(Update::Srn);
    }
    Ok((p, s, h))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn diverged(iter: u64, term: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Diverged {
        iter: iter as usize,
        term: term.to_string(),
        source: Box::new(e),
    }
}

fn grads_for(grads: &Gradients, vars: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect()
}

fn finite(g: &Graph, v: Var, op: &str) -> Result<f64> {
    let x = g.scalar(v);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

/// Phase two with a frozen rectifier (or none, for the identity variant).
pub fn train_gan(
    prepared: &Prepared,
    config: &TrainConfig,
    srn: Option<(SrnParams, AdamState)>,
    mut hook: impl FnMut(Update),
) -> Result<(ModelBundle, Vec<LossRecord>)> {
    let ds = &prepared.dataset;
    let split = &prepared.split;
    let mut rng = rng_for(config.seed, STREAM_GAN);
    let mut bundle = ModelBundle::init(config, ds.d_v(), ds.d_s(), &split.seen, srn, &mut rng)?;

    let cond_all = bundle.conditioning(&ds.semantic)?;
    let positions = class_positions(&split.seen, ds.n_classes());
    let vp_cond = cond_all.select_rows(&split.seen);
    let pivots = &prepared.pivots.pivots;
    let sampler = BatchSampler::new(ds, split, config.batch_size)?;
    let adam = config.adam();

    let draw_batch = |rng: &mut ChaCha8Rng| -> GanBatch {
        let b = sampler.sample(rng);
        let z = normal(rng, b.labels.len(), config.d_z);
        let eps = (0..b.labels.len()).map(|_| rng.random::<f64>()).collect();
        GanBatch {
            cond: cond_all.select_rows(&b.labels),
            targets: b.labels.iter().map(|&c| positions[c].unwrap()).collect(),
            visual: b.visual,
            z,
            eps,
        }
    };

    let mut history = Vec::with_capacity(config.gan_iters);
    for it in 0..config.gan_iters as u64 {
        let mut rec = LossRecord {
            iter: it,
            loss_d: 0.0,
            loss_g: 0.0,
            loss_vp: 0.0,
            loss_e: 0.0,
            loss_f: 0.0,
        };

        for _ in 0..config.n_d {
            let batch = draw_batch(&mut rng);
            rec.loss_d = disc_step(&mut bundle, &batch, &adam).map_err(diverged(it, "loss_D"))?;
            hook(Update::Disc { iter: it });
        }

        for _ in 0..=config.g_extra_updates {
            let batch = draw_batch(&mut rng);
            let vp_z = normal(&mut rng, vp_cond.rows() * config.vp_draws, config.d_z);
            let (lg, lvp) = gen_step(&mut bundle, &batch, &vp_cond, &vp_z, pivots, &adam)
                .map_err(diverged(it, "loss_G"))?;
            rec.loss_g = lg;
            rec.loss_vp = lvp;
            hook(Update::Gen { iter: it });
            if config.use_rec {
                rec.loss_e =
                    enc_step(&mut bundle, &batch, &adam).map_err(diverged(it, "loss_E"))?;
                hook(Update::Enc { iter: it });
                rec.loss_f =
                    post_step(&mut bundle, &batch, &adam).map_err(diverged(it, "loss_F"))?;
                hook(Update::Post { iter: it });
            }
        }
        bundle.iteration += 1;
        history.push(rec);
    }
    Ok((bundle, history))
}

fn disc_step(b: &mut ModelBundle, batch: &GanBatch, adam: &AdamConfig) -> Result<f64> {
    let mut g = Graph::with_precision(b.config.precision);
    let gen = b.gen.mlp.bind(&mut g, false);
    let disc = b.disc.bind(&mut g, true);
    let l = srgan::loss_d(&mut g, &gen, &disc, batch, b.config.lambda)?;
    let value = finite(&g, l.total, "loss_d")?;
    let grads = g.backward(l.total)?;
    let dg = grads_for(&grads, &disc.vars(), &b.disc.tensors());
    adam_step(&mut b.disc.tensors_mut(), &dg, &mut b.opt.disc, adam)?;
    Ok(value)
}

fn gen_step(
    b: &mut ModelBundle,
    batch: &GanBatch,
    vp_cond: &Tensor,
    vp_z: &Tensor,
    pivots: &Tensor,
    adam: &AdamConfig,
) -> Result<(f64, f64)> {
    let mut g = Graph::with_precision(b.config.precision);
    let gen = b.gen.mlp.bind(&mut g, true);
    let disc = b.disc.bind(&mut g, false);
    let adv = srgan::loss_g_adv_cls(&mut g, &gen, &disc, batch)?;
    let vp = srgan::loss_vp(&mut g, &gen, vp_cond, vp_z, pivots)?;
    let total = g.add(adv, vp)?;
    let value = finite(&g, total, "loss_g")?;
    let grads = g.backward(total)?;
    let gg = grads_for(&grads, &gen.vars(), &b.gen.mlp.tensors());
    adam_step(&mut b.gen.mlp.tensors_mut(), &gg, &mut b.opt.gen, adam)?;
    Ok((value, g.scalar(vp)))
}

fn enc_step(b: &mut ModelBundle, batch: &GanBatch, adam: &AdamConfig) -> Result<f64> {
    let mut g = Graph::with_precision(b.config.precision);
    let gen = b.gen.mlp.bind(&mut g, true);
    let enc = b.enc.mlp.bind(&mut g, true);
    let l = srgan::loss_pre(&mut g, &gen, &enc, batch)?;
    let value = finite(&g, l, "loss_pre")?;
    let grads = g.backward(l)?;
    let gg = grads_for(&grads, &gen.vars(), &b.gen.mlp.tensors());
    let eg = grads_for(&grads, &enc.vars(), &b.enc.mlp.tensors());
    adam_step(&mut b.gen.mlp.tensors_mut(), &gg, &mut b.opt.gen, adam)?;
    adam_step(&mut b.enc.mlp.tensors_mut(), &eg, &mut b.opt.enc, adam)?;
    Ok(value)
}

fn post_step(b: &mut ModelBundle, batch: &GanBatch, adam: &AdamConfig) -> Result<f64> {
    let mut g = Graph::with_precision(b.config.precision);
    let gen = b.gen.mlp.bind(&mut g, true);
    let post = b.post.mlp.bind(&mut g, true);
    let l = srgan::loss_post(&mut g, &gen, &post, batch)?;
    let value = finite(&g, l, "loss_post")?;
    let grads = g.backward(l)?;
    let gg = grads_for(&grads, &gen.vars(), &b.gen.mlp.tensors());
    let fg = grads_for(&grads, &post.vars(), &b.post.mlp.tensors());
    adam_step(&mut b.gen.mlp.tensors_mut(), &gg, &mut b.opt.gen, adam)?;
    adam_step(&mut b.post.mlp.tensors_mut(), &fg, &mut b.opt.post, adam)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy, ToySpec};

    fn small() -> (Prepared, TrainConfig) {
        let spec = ToySpec {
            n_seen: 4,
            n_unseen: 2,
            d_v: 8,
            d_s: 8,
            per_class: 10,
            ..Default::default()
        };
        let (ds, split, _) = generate_toy(&spec).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            d_z: 3,
            srn_hidden: 6,
            gen_hidden: 6,
            disc_hidden: 6,
            enc_hidden: 6,
            vp_draws: 2,
            srn_iters: 5,
            gan_iters: 3,
            ..TrainConfig::default()
        };
        (Prepared::new(&ds, &split).unwrap(), cfg)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            n_d: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            gan_iters: 0,
            srn_iters: 0,
            g_extra_updates: 0,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"lr": 0.1}"#).unwrap();
        assert_eq!(ok.lr, 0.1);
        assert_eq!(ok.n_d, 5);
    }

    #[test]
    fn update_counts_follow_schedule() {
        let (p, cfg) = small();
        let mut log = Vec::new();
        let out = train_with_hook(&p, &cfg, |u| log.push(u)).unwrap();
        assert_eq!(log.iter().filter(|u| **u == Update::Srn).count(), 5);
        assert_eq!(out.history.len(), 3);
        // per iteration: n_d disc updates, then (gen, enc, post) x (1 + extra)
        let gan: Vec<Update> = log.into_iter().filter(|u| *u != Update::Srn).collect();
        assert_eq!(gan.len(), 3 * (5 + 3 * 3));
        for (i, chunk) in gan.chunks(14).enumerate() {
            let it = i as u64;
            assert!(chunk[..5].iter().all(|u| *u == Update::Disc { iter: it }));
            for rep in chunk[5..].chunks(3) {
                assert_eq!(
                    rep,
                    &[
                        Update::Gen { iter: it },
                        Update::Enc { iter: it },
                        Update::Post { iter: it }
                    ]
                );
            }
        }
    }

    #[test]
    fn without_reconstruction_only_gen_updates_follow() {
        let (p, cfg) = small();
        let cfg = TrainConfig {
            use_rec: false,
            use_srn: false,
            ..cfg
        };
        let mut log = Vec::new();
        let out = train_with_hook(&p, &cfg, |u| log.push(u)).unwrap();
        assert!(out.bundle.srn.is_none());
        assert_eq!(log.len(), 3 * (5 + 3));
        assert!(out
            .history
            .iter()
            .all(|r| r.loss_e == 0.0 && r.loss_f == 0.0));
    }
}

//! Generator, discriminator and the two reconstruction networks, with every
//! loss term used to train them.
//!
//! Loss builders record onto a caller-owned [`Graph`] and return the scalar
//! [`Var`]; which parameters receive gradients is decided by how the caller
//! bound each network (trainable or frozen).

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{
    Activation, Graph, Layer, LayerVars, MlpParams, MlpVars, Residual, Tensor, Var,
};

/// `[s, R(s), z] -> h -> h -> h -> d_v` with tanh output and a residual link
/// from the first hidden output into the third hidden pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub mlp: MlpParams,
}

const GEN_ACTS: [Activation; 4] = [
    Activation::LeakyRelu,
    Activation::LeakyRelu,
    Activation::LeakyRelu,
    Activation::Tanh,
];
const GEN_RESIDUAL: Residual = Residual {
    source: 0,
    target: 2,
};

impl GenParams {
    pub fn init<R: Rng + ?Sized>(
        d_s: usize,
        d_z: usize,
        h: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = MlpParams::init(
            &[2 * d_s + d_z, h, h, h, d_v],
            &GEN_ACTS,
            Some(GEN_RESIDUAL),
            rng,
        )?;
        Ok(Self { mlp })
    }

    pub fn zeros(d_s: usize, d_z: usize, h: usize, d_v: usize) -> Result<Self> {
        let mlp = MlpParams::zeros(
            &[2 * d_s + d_z, h, h, h, d_v],
            &GEN_ACTS,
            Some(GEN_RESIDUAL),
        )?;
        Ok(Self { mlp })
    }

    pub fn d_v(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Synthesises one feature per row of `(s, r, z)`.
    pub fn generate(&self, s: &Tensor, r: &Tensor, z: &Tensor) -> Result<Tensor> {
        let input = Tensor::concat_cols(&[s, r, z])?;
        if input.cols() != self.mlp.input_dim() {
            return Err(Error::dim(
                "generator input width",
                self.mlp.input_dim(),
                input.cols(),
            ));
        }
        self.mlp.forward(&input)
    }
}

/// Shared leaky-ReLU trunk with a scalar critic head and a class-logit head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscParams {
    pub trunk: MlpParams,
    pub critic: Layer,
    pub classifier: Layer,
}

impl DiscParams {
    pub fn init<R: Rng + ?Sized>(
        d_v: usize,
        h: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            MlpParams::init(&[d_v, h], &[Activation::LeakyRelu], None, rng)?,
            Layer::init(h, 1, Activation::Linear, rng),
            Layer::init(h, n_classes, Activation::Linear, rng),
        )
    }

    pub fn zeros(d_v: usize, h: usize, n_classes: usize) -> Result<Self> {
        Self::new(
            MlpParams::zeros(&[d_v, h], &[Activation::LeakyRelu], None)?,
            Layer::zeros(h, 1, Activation::Linear),
            Layer::zeros(h, n_classes, Activation::Linear),
        )
    }

    pub fn new(trunk: MlpParams, critic: Layer, classifier: Layer) -> Result<Self> {
        for l in trunk.layers().iter().chain([&critic]) {
            if !l.activation.is_piecewise_linear() {
                return Err(Error::NotPiecewiseLinear(l.activation));
            }
        }
        if critic.outputs() != 1 {
            return Err(Error::dim("critic head width", 1, critic.outputs()));
        }
        for (name, head) in [
            ("critic head input", &critic),
            ("classifier head input", &classifier),
        ] {
            if head.inputs() != trunk.output_dim() {
                return Err(Error::dim(name, trunk.output_dim(), head.inputs()));
            }
        }
        Ok(Self {
            trunk,
            critic,
            classifier,
        })
    }

    pub fn d_v(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.outputs()
    }

    /// `trunk..., critic, classifier`, each as `w, b`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.trunk.tensors();
        t.extend([&self.critic.weight, &self.critic.bias]);
        t.extend([&self.classifier.weight, &self.classifier.bias]);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.trunk.tensors_mut();
        t.extend([&mut self.critic.weight, &mut self.critic.bias]);
        t.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        t
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut n = self.trunk.tensor_names(&format!("{prefix}.trunk"));
        for head in ["critic", "cls"] {
            n.push(format!("{prefix}.{head}.w"));
            n.push(format!("{prefix}.{head}.b"));
        }
        n
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscVars {
        let mut bind_layer = |l: &Layer| {
            let (w, b) = if trainable {
                (g.param(l.weight.clone()), g.param(l.bias.clone()))
            } else {
                (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
            };
            LayerVars {
                w,
                b,
                activation: l.activation,
                inputs: l.inputs(),
                outputs: l.outputs(),
            }
        };
        let critic = bind_layer(&self.critic);
        let classifier = bind_layer(&self.classifier);
        DiscVars {
            trunk: self.trunk.bind(g, trainable),
            critic,
            classifier,
        }
    }

    /// Critic scores (`n x 1`) and class logits (`n x K`) for each row of `v`.
    pub fn critic_and_classify(&self, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(v.clone());
        let (score, logits) = vars.forward(&mut g, x)?;
        Ok((g.value(score).clone(), g.value(logits).clone()))
    }

    /// Trunk features for each row of `v`.
    pub fn features(&self, v: &Tensor) -> Result<Tensor> {
        self.trunk.forward(v)
    }
}

#[derive(Clone, Debug)]
pub struct DiscVars {
    pub trunk: MlpVars,
    pub critic: LayerVars,
    pub classifier: LayerVars,
}

impl DiscVars {
    /// Vars in the order of [`DiscParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.trunk.vars();
        v.extend([
            self.critic.w,
            self.critic.b,
            self.classifier.w,
            self.classifier.b,
        ]);
        v
    }

    pub fn forward(&self, g: &mut Graph, v: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(g, v)?;
        let score = g.affine(h, self.critic.w, self.critic.b)?;
        let logits = g.affine(h, self.classifier.w, self.classifier.b)?;
        Ok((score, logits))
    }

    /// The trunk followed by the critic head, as one network.
    pub fn critic_path(&self) -> MlpVars {
        let mut layers = self.trunk.layers.clone();
        layers.push(self.critic);
        MlpVars {
            layers,
            residual: self.trunk.residual,
        }
    }
}

fn two_layer<R: Rng + ?Sized>(
    d_in: usize,
    h: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<MlpParams> {
    MlpParams::init(
        &[d_in, h, d_out],
        &[Activation::LeakyRelu, Activation::Linear],
        None,
        rng,
    )
}

/// Pre-reconstruction encoder `v -> z`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncParams {
    pub mlp: MlpParams,
}

impl EncParams {
    pub fn init<R: Rng + ?Sized>(d_v: usize, h: usize, d_z: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: two_layer(d_v, h, d_z, rng)?,
        })
    }
}

/// Post-reconstruction network `v -> [s, R(s), z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PostParams {
    pub mlp: MlpParams,
}

impl PostParams {
    pub fn init<R: Rng + ?Sized>(
        d_v: usize,
        h: usize,
        d_s: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: two_layer(d_v, h, 2 * d_s + d_z, rng)?,
        })
    }
}

/// Conditioning rows `[s, R(s)]`, visual rows, classifier targets, noise and
/// interpolation weights for one update.
#[derive(Clone, Debug)]
pub struct GanBatch {
    pub visual: Tensor,
    pub cond: Tensor,
    /// Positions in the classifier's label space.
    pub targets: Vec<usize>,
    pub z: Tensor,
    pub eps: Vec<f64>,
}

impl GanBatch {
    pub fn len(&self) -> usize {
        self.visual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.rows() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        for (what, got) in [
            ("batch cond rows", self.cond.rows()),
            ("batch targets", self.targets.len()),
            ("batch noise rows", self.z.rows()),
            ("batch eps", self.eps.len()),
        ] {
            if got != n {
                return Err(Error::dim(what, n, got));
            }
        }
        Ok(())
    }
}

/// `G([cond, z])` on the graph.
pub fn generate_var(g: &mut Graph, gen: &MlpVars, cond: Var, z: Var) -> Result<Var> {
    let input = g.concat_cols(&[cond, z])?;
    gen.forward(g, input)
}

/// Mean over rows of the per-row L1 distance.
pub fn l1_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let n = g.try_value(a)?.rows();
    let d = g.sub(a, b)?;
    let s = g.l1_norm(d)?;
    g.scale(s, 1.0 / n as f64)
}

/// Visual pivot loss from generated rows laid out as `draws` consecutive
/// rows per class, in pivot order.
pub fn vp_from_generated(
    g: &mut Graph,
    generated: Var,
    draws: usize,
    pivots: &Tensor,
) -> Result<Var> {
    let means = g.group_mean_rows(generated, draws)?;
    let p = g.constant(pivots.clone());
    let d = g.sub(p, means)?;
    let norms = g.row_l2_norm(d)?;
    g.mean(norms)
}

/// `-mean(score) + CE(logits, targets)`.
pub fn adv_cls_from_outputs(
    g: &mut Graph,
    score: Var,
    logits: Var,
    targets: &[usize],
) -> Result<Var> {
    let s = g.mean(score)?;
    let adv = g.scale(s, -1.0)?;
    let ce = g.softmax_cross_entropy(logits, targets)?;
    g.add(adv, ce)
}

/// Visual pivot loss: each pivot's class conditioning row is paired with
/// `z.rows() / n_classes` noise rows.
pub fn loss_vp(
    g: &mut Graph,
    gen: &MlpVars,
    cond: &Tensor,
    z: &Tensor,
    pivots: &Tensor,
) -> Result<Var> {
    let c = cond.rows();
    if pivots.rows() != c {
        return Err(Error::dim("pivot rows", c, pivots.rows()));
    }
    if c == 0 || z.rows() < c || !z.rows().is_multiple_of(c) {
        return Err(Error::dim(
            "vp noise rows",
            format!("multiple of {c}"),
            z.rows(),
        ));
    }
    let draws = z.rows() / c;
    let idx: Vec<usize> = (0..c).flat_map(|i| std::iter::repeat_n(i, draws)).collect();
    let cond = g.constant(cond.select_rows(&idx));
    let z = g.constant(z.clone());
    let fake = generate_var(g, gen, cond, z)?;
    vp_from_generated(g, fake, draws, pivots)
}

/// `lambda * mean_i (||grad_v D(v_hat_i)|| - 1)^2`.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &MlpVars,
    v_hat: &Tensor,
    lambda: f64,
) -> Result<Var> {
    let grad = critic.input_gradient(g, v_hat)?;
    let norms = g.row_l2_norm(grad)?;
    let off = g.add_scalar(norms, -1.0)?;
    let sq = g.square(off)?;
    let m = g.mean(sq)?;
    g.scale(m, lambda)
}

/// Terms of the discriminator loss.
#[derive(Clone, Copy, Debug)]
pub struct DLossVars {
    /// `mean D(fake) - mean D(real)`.
    pub critic: Var,
    pub penalty: Var,
    /// `(CE(fake) + CE(real)) / 2`.
    pub cls: Var,
    pub total: Var,
}

/// Discriminator loss. The interpolates `eps v + (1 - eps) G(...)` are fixed
/// values, so the penalty reaches the discriminator's parameters only.
pub fn loss_d(
    g: &mut Graph,
    gen: &MlpVars,
    disc: &DiscVars,
    batch: &GanBatch,
    lambda: f64,
) -> Result<DLossVars> {
    batch.check()?;
    let cond = g.constant(batch.cond.clone());
    let z = g.constant(batch.z.clone());
    let fake = generate_var(g, gen, cond, z)?;
    let real = g.constant(batch.visual.clone());
    loss_d_from_fake(g, disc, real, fake, batch, lambda)
}

/// [`loss_d`] with the synthetic rows already on the graph.
pub fn loss_d_from_fake(
    g: &mut Graph,
    disc: &DiscVars,
    real: Var,
    fake: Var,
    batch: &GanBatch,
    lambda: f64,
) -> Result<DLossVars> {
    let (rv, fv) = (g.try_value(real)?, g.try_value(fake)?);
    if !rv.same_shape(fv) {
        return Err(Error::dim("fake rows", rv.rows(), fv.rows()));
    }
    let mut v_hat = rv.clone();
    for (r, &e) in batch.eps.iter().enumerate() {
        for (h, f) in v_hat.row_slice_mut(r).iter_mut().zip(fv.row_slice(r)) {
            *h = e * *h + (1.0 - e) * f;
        }
    }

    let (s_fake, l_fake) = disc.forward(g, fake)?;
    let (s_real, l_real) = disc.forward(g, real)?;
    let mf = g.mean(s_fake)?;
    let mr = g.mean(s_real)?;
    let critic = g.sub(mf, mr)?;
    let penalty = gradient_penalty(g, &disc.critic_path(), &v_hat, lambda)?;
    let ce_f = g.softmax_cross_entropy(l_fake, &batch.targets)?;
    let ce_r = g.softmax_cross_entropy(l_real, &batch.targets)?;
    let ce = g.add(ce_f, ce_r)?;
    let cls = g.scale(ce, 0.5)?;
    let t = g.add(critic, penalty)?;
    let total = g.add(t, cls)?;
    Ok(DLossVars {
        critic,
        penalty,
        cls,
        total,
    })
}

/// Adversarial plus auxiliary classification loss of the generator.
pub fn loss_g_adv_cls(
    g: &mut Graph,
    gen: &MlpVars,
    disc: &DiscVars,
    batch: &GanBatch,
) -> Result<Var> {
    batch.check()?;
    let cond = g.constant(batch.cond.clone());
    let z = g.constant(batch.z.clone());
    let fake = generate_var(g, gen, cond, z)?;
    let (score, logits) = disc.forward(g, fake)?;
    adv_cls_from_outputs(g, score, logits, &batch.targets)
}

/// Pre-reconstruction: `|G(cond, E(v)) - v|_1`.
pub fn loss_pre(g: &mut Graph, gen: &MlpVars, enc: &MlpVars, batch: &GanBatch) -> Result<Var> {
    batch.check()?;
    let v = g.constant(batch.visual.clone());
    let code = enc.forward(g, v)?;
    let cond = g.constant(batch.cond.clone());
    let recon = generate_var(g, gen, cond, code)?;
    l1_rows(g, recon, v)
}

/// Post-reconstruction: `|F(G(cond, z)) - [cond, z]|_1`.
pub fn loss_post(g: &mut Graph, gen: &MlpVars, post: &MlpVars, batch: &GanBatch) -> Result<Var> {
    batch.check()?;
    let out_w = post.layers.last().unwrap().outputs;
    let want = batch.cond.cols() + batch.z.cols();
    if out_w != want {
        return Err(Error::dim("post-reconstruction output width", want, out_w));
    }
    let cond = g.constant(batch.cond.clone());
    let z = g.constant(batch.z.clone());
    let fake = generate_var(g, gen, cond, z)?;
    let back = post.forward(g, fake)?;
    let target = g.concat_cols(&[cond, z])?;
    l1_rows(g, back, target)
}

/// Handles of the four generator-side terms and their unit-weight sum.
#[derive(Clone, Copy, Debug)]
pub struct GLossVars {
    pub adv_cls: Var,
    pub vp: Var,
    pub pre: Var,
    pub post: Var,
    pub total: Var,
}

pub fn sum_g_terms(g: &mut Graph, adv_cls: Var, vp: Var, pre: Var, post: Var) -> Result<GLossVars> {
    let a = g.add(adv_cls, vp)?;
    let b = g.add(a, pre)?;
    let total = g.add(b, post)?;
    Ok(GLossVars {
        adv_cls,
        vp,
        pre,
        post,
        total,
    })
}

/// Full generator objective on one batch plus one pivot draw set.
#[allow(clippy::too_many_arguments)]
pub fn loss_g_total(
    g: &mut Graph,
    gen: &MlpVars,
    disc: &DiscVars,
    enc: &MlpVars,
    post: &MlpVars,
    batch: &GanBatch,
    vp_cond: &Tensor,
    vp_z: &Tensor,
    pivots: &Tensor,
) -> Result<GLossVars> {
    let a = loss_g_adv_cls(g, gen, disc, batch)?;
    let v = loss_vp(g, gen, vp_cond, vp_z, pivots)?;
    let e = loss_pre(g, gen, enc, batch)?;
    let f = loss_post(g, gen, post, batch)?;
    sum_g_terms(g, a, v, e, f)
}

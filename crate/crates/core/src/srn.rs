//! Semantic rectifying network.
//!
//! Maps a class attribute vector to a same-width vector in `(0, 1)` whose
//! pairwise cosine similarities across seen classes follow those of the
//! visual pivots, while staying close to the input.

use rand::Rng;

use crate::data::{Prepared, VisualPivots};
use crate::error::{Error, Result};
use crate::ndgrad::{cosine_matrix, Activation, Graph, MlpParams, Tensor, Var};
use crate::trainer::{adam_step, AdamConfig, AdamState, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SrnParams {
    pub mlp: MlpParams,
}

impl SrnParams {
    /// `d_s -> hidden (leaky-relu) -> d_s (sigmoid)`.
    pub fn init<R: Rng + ?Sized>(d_s: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::from_mlp(MlpParams::init(
            &[d_s, hidden, d_s],
            &[Activation::LeakyRelu, Activation::Sigmoid],
            None,
            rng,
        )?)
    }

    pub fn zeros(d_s: usize, hidden: usize) -> Result<Self> {
        Self::from_mlp(MlpParams::zeros(
            &[d_s, hidden, d_s],
            &[Activation::LeakyRelu, Activation::Sigmoid],
            None,
        )?)
    }

    pub fn from_mlp(mlp: MlpParams) -> Result<Self> {
        if mlp.input_dim() != mlp.output_dim() {
            return Err(Error::dim(
                "srn output width",
                mlp.input_dim(),
                mlp.output_dim(),
            ));
        }
        if mlp.layers().last().unwrap().activation != Activation::Sigmoid {
            return Err(Error::Invalid("srn output layer must be sigmoid".into()));
        }
        Ok(Self { mlp })
    }

    pub fn d_s(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Rectifies each row of `s`.
    pub fn rectify(&self, s: &Tensor) -> Result<Tensor> {
        if s.cols() != self.d_s() {
            return Err(Error::dim("rectify input width", self.d_s(), s.cols()));
        }
        self.mlp.forward(s)
    }
}

/// Rectifier used by the generator: a trained network or plain pass-through.
#[derive(Clone, Copy, Debug)]
pub enum Rectifier<'a> {
    Identity,
    Network(&'a SrnParams),
}

impl Rectifier<'_> {
    pub fn apply(&self, s: &Tensor) -> Result<Tensor> {
        match self {
            Rectifier::Identity => Ok(s.clone()),
            Rectifier::Network(p) => p.rectify(s),
        }
    }
}

/// Graph handles for the two terms of the rectifying loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct SrnLossVars {
    pub structure: Var,
    pub semantic: Var,
    pub total: Var,
}

/// Rectifying loss given already rectified rows.
///
/// `structure = (1/C^2) sum_ij |cos(p_i, p_j) - cos(r_i, r_j)|` over all
/// ordered pairs, `semantic = mean_i ||s_i - r_i||_2`.
pub fn srn_loss_terms(
    g: &mut Graph,
    rectified: Var,
    pivot_cos: &Tensor,
    semantics: &Tensor,
) -> Result<SrnLossVars> {
    let r = g.try_value(rectified)?;
    let c = r.rows();
    if pivot_cos.rows() != c || pivot_cos.cols() != c {
        return Err(Error::dim("pivot cosine matrix", c, pivot_cos.rows()));
    }
    if !semantics.same_shape(r) {
        return Err(Error::dim("srn semantics", r.rows(), semantics.rows()));
    }
    let cos_r = g.pairwise_cosine(rectified)?;
    let cos_p = g.constant(pivot_cos.clone());
    let diff = g.sub(cos_p, cos_r)?;
    let abs_sum = g.l1_norm(diff)?;
    let structure = g.scale(abs_sum, 1.0 / (c * c) as f64)?;

    let s = g.constant(semantics.clone());
    let gap = g.sub(s, rectified)?;
    let norms = g.row_l2_norm(gap)?;
    let semantic = g.mean(norms)?;

    let total = g.add(structure, semantic)?;
    Ok(SrnLossVars {
        structure,
        semantic,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrnLoss {
    pub structure: f64,
    pub semantic: f64,
    pub total: f64,
}

/// Evaluates the rectifying loss over the seen classes.
pub fn srn_loss(
    params: &SrnParams,
    pivots: &VisualPivots,
    seen_semantics: &Tensor,
) -> Result<SrnLoss> {
    if pivots.len() != seen_semantics.rows() {
        return Err(Error::dim(
            "srn classes",
            pivots.len(),
            seen_semantics.rows(),
        ));
    }
    let pivot_cos = cosine_matrix(&pivots.pivots)?;
    let mut g = Graph::new();
    let vars = params.mlp.bind(&mut g, false);
    let s = g.constant(seen_semantics.clone());
    let r = vars.forward(&mut g, s)?;
    let l = srn_loss_terms(&mut g, r, &pivot_cos, seen_semantics)?;
    Ok(SrnLoss {
        structure: g.scalar(l.structure),
        semantic: g.scalar(l.semantic),
        total: g.scalar(l.total),
    })
}

/// Full-batch Adam on the rectifying loss. Returns the trained parameters,
/// their optimiser state and the per-iteration loss.
pub fn train_srn<R: Rng + ?Sized>(
    prepared: &Prepared,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(SrnParams, AdamState, Vec<SrnLoss>)> {
    let params = SrnParams::init(prepared.dataset.d_s(), cfg.srn_hidden, rng)?;
    continue_srn(params, prepared, cfg)
}

/// Like [`train_srn`] but starting from given parameters.
pub fn continue_srn(
    mut params: SrnParams,
    prepared: &Prepared,
    cfg: &TrainConfig,
) -> Result<(SrnParams, AdamState, Vec<SrnLoss>)> {
    let semantics = prepared.seen_semantics();
    let pivot_cos = cosine_matrix(&prepared.pivots.pivots)?;
    let adam = cfg.srn_adam();
    let mut state = AdamState::new(&params.mlp.tensors());
    let mut history = Vec::with_capacity(cfg.srn_iters);
    for iter in 0..cfg.srn_iters {
        let step =
            srn_step(&mut params, &mut state, &adam, &semantics, &pivot_cos, cfg).map_err(|e| {
                Error::Diverged {
                    iter,
                    term: "srn".into(),
                    source: Box::new(e),
                }
            })?;
        history.push(step);
    }
    Ok((params, state, history))
}

fn srn_step(
    params: &mut SrnParams,
    state: &mut AdamState,
    adam: &AdamConfig,
    semantics: &Tensor,
    pivot_cos: &Tensor,
    cfg: &TrainConfig,
) -> Result<SrnLoss> {
    let mut g = Graph::with_precision(cfg.precision);
    let vars = params.mlp.bind(&mut g, true);
    let s = g.constant(semantics.clone());
    let r = vars.forward(&mut g, s)?;
    let l = srn_loss_terms(&mut g, r, pivot_cos, semantics)?;
    let grads = g.backward(l.total)?;
    let grads: Vec<Tensor> = vars
        .vars()
        .iter()
        .zip(params.mlp.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    adam_step(&mut params.mlp.tensors_mut(), &grads, state, adam)?;
    Ok(SrnLoss {
        structure: g.scalar(l.structure),
        semantic: g.scalar(l.semantic),
        total: g.scalar(l.total),
    })
}

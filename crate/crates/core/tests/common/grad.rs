use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srgan::ndgrad::{cosine_matrix, Graph, MlpParams, Tensor, Var};
use srgan::srgan::{
    gradient_penalty, loss_d, loss_g_adv_cls, loss_g_total, loss_post, loss_pre, loss_vp,
    DiscParams, EncParams, GanBatch, GenParams, PostParams,
};
use srgan::srn::{srn_loss_terms, SrnParams};

pub const SEEDS: u64 = 10;
pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let d = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(r, c, d).unwrap()
}

/// `build` rebuilds the loss from a flat parameter list and returns the
/// loss plus the vars holding those parameters, in order.
pub fn max_rel_error(
    params: &[Tensor],
    build: impl Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>),
) -> f64 {
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, params);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();

    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let (l, _) = build(&mut g, ps);
        g.scalar(l)
    };
    let mut work = params.to_vec();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let x = params[t].data()[i];
            work[t].data_mut()[i] = x + STEP;
            let fp = eval(&work);
            work[t].data_mut()[i] = x - STEP;
            let fm = eval(&work);
            work[t].data_mut()[i] = x;
            let fd = (fp - fm) / (2.0 * STEP);
            let a = analytic[t].data()[i];
            num += (a - fd).powi(2);
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

pub fn load(template: &MlpParams, ts: &[Tensor]) -> MlpParams {
    let mut m = template.clone();
    for (d, s) in m.tensors_mut().into_iter().zip(ts) {
        *d = s.clone();
    }
    m
}

pub fn load_disc(template: &DiscParams, ts: &[Tensor]) -> DiscParams {
    let mut m = template.clone();
    for (d, s) in m.tensors_mut().into_iter().zip(ts) {
        *d = s.clone();
    }
    m
}

pub fn owned(ts: Vec<&Tensor>) -> Vec<Tensor> {
    ts.into_iter().cloned().collect()
}

pub struct Setup {
    pub gen: GenParams,
    pub disc: DiscParams,
    pub enc: EncParams,
    pub post: PostParams,
    pub batch: GanBatch,
    pub vp_cond: Tensor,
    pub vp_z: Tensor,
    pub pivots: Tensor,
}

pub fn setup(seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_s = rng.random_range(2..=3);
    let d_z = rng.random_range(1..=3);
    let d_v = rng.random_range(2..=5);
    let h = rng.random_range(3..=8);
    let n_cls = 3;
    let m = rng.random_range(2..=4);
    let draws = 2;
    let gen = GenParams::init(d_s, d_z, h, d_v, &mut rng).unwrap();
    let disc = DiscParams::init(d_v, h, n_cls, &mut rng).unwrap();
    let enc = EncParams::init(d_v, h, d_z, &mut rng).unwrap();
    let post = PostParams::init(d_v, h, d_s, d_z, &mut rng).unwrap();
    let batch = GanBatch {
        visual: randn(&mut rng, m, d_v),
        cond: randn(&mut rng, m, 2 * d_s),
        targets: (0..m).map(|_| rng.random_range(0..n_cls)).collect(),
        z: randn(&mut rng, m, d_z),
        eps: (0..m).map(|_| rng.random::<f64>()).collect(),
    };
    Setup {
        gen,
        disc,
        enc,
        post,
        batch,
        vp_cond: randn(&mut rng, n_cls, 2 * d_s),
        vp_z: randn(&mut rng, n_cls * draws, d_z),
        pivots: randn(&mut rng, n_cls, d_v),
    }
}

/// Rectifying loss with respect to the rectifier.
pub fn srn_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let d_s = rng.random_range(2..=6);
    let c = rng.random_range(2..=4);
    let p = SrnParams::init(d_s, rng.random_range(2..=8), &mut rng).unwrap();
    let sem = randn(&mut rng, c, d_s).map(|x| x.abs());
    let piv = cosine_matrix(&randn(&mut rng, c, 5)).unwrap();
    max_rel_error(&owned(p.mlp.tensors()), |g, ts| {
        let vars = load(&p.mlp, ts).bind(g, true);
        let s = g.constant(sem.clone());
        let r = vars.forward(g, s).unwrap();
        (srn_loss_terms(g, r, &piv, &sem).unwrap().total, vars.vars())
    })
}

pub fn adv_cls_error(seed: u64) -> f64 {
    let s = setup(seed);
    max_rel_error(&owned(s.gen.mlp.tensors()), |g, ts| {
        let gen = load(&s.gen.mlp, ts).bind(g, true);
        let disc = s.disc.bind(g, false);
        (
            loss_g_adv_cls(g, &gen, &disc, &s.batch).unwrap(),
            gen.vars(),
        )
    })
}

pub fn loss_d_error(seed: u64) -> f64 {
    let s = setup(seed);
    max_rel_error(&owned(s.disc.tensors()), |g, ts| {
        let gen = s.gen.mlp.bind(g, false);
        let disc = load_disc(&s.disc, ts).bind(g, true);
        (
            loss_d(g, &gen, &disc, &s.batch, 10.0).unwrap().total,
            disc.vars(),
        )
    })
}

pub fn penalty_error(seed: u64) -> f64 {
    let s = setup(seed);
    let v_hat = s.batch.visual.map(|x| 0.7 * x + 0.1);
    max_rel_error(&owned(s.disc.tensors()), |g, ts| {
        let disc = load_disc(&s.disc, ts).bind(g, true);
        (
            gradient_penalty(g, &disc.critic_path(), &v_hat, 10.0).unwrap(),
            disc.vars(),
        )
    })
}

pub fn vp_error(seed: u64) -> f64 {
    let s = setup(seed);
    max_rel_error(&owned(s.gen.mlp.tensors()), |g, ts| {
        let gen = load(&s.gen.mlp, ts).bind(g, true);
        (
            loss_vp(g, &gen, &s.vp_cond, &s.vp_z, &s.pivots).unwrap(),
            gen.vars(),
        )
    })
}

pub fn pre_error(seed: u64) -> f64 {
    let s = setup(seed);
    let mut params = owned(s.gen.mlp.tensors());
    let n_gen = params.len();
    params.extend(owned(s.enc.mlp.tensors()));
    max_rel_error(&params, |g, ts| {
        let gen = load(&s.gen.mlp, &ts[..n_gen]).bind(g, true);
        let enc = load(&s.enc.mlp, &ts[n_gen..]).bind(g, true);
        let mut vars = gen.vars();
        vars.extend(enc.vars());
        (loss_pre(g, &gen, &enc, &s.batch).unwrap(), vars)
    })
}

pub fn post_error(seed: u64) -> f64 {
    let s = setup(seed);
    let mut params = owned(s.gen.mlp.tensors());
    let n_gen = params.len();
    params.extend(owned(s.post.mlp.tensors()));
    max_rel_error(&params, |g, ts| {
        let gen = load(&s.gen.mlp, &ts[..n_gen]).bind(g, true);
        let post = load(&s.post.mlp, &ts[n_gen..]).bind(g, true);
        let mut vars = gen.vars();
        vars.extend(post.vars());
        (loss_post(g, &gen, &post, &s.batch).unwrap(), vars)
    })
}

pub fn total_g_error(seed: u64) -> f64 {
    let s = setup(seed);
    let nets = [&s.gen.mlp, &s.enc.mlp, &s.post.mlp];
    let params: Vec<Tensor> = nets.iter().flat_map(|m| owned(m.tensors())).collect();
    let sizes: Vec<usize> = nets.iter().map(|m| m.tensors().len()).collect();
    max_rel_error(&params, |g, ts| {
        let (a, rest) = ts.split_at(sizes[0]);
        let (b, c) = rest.split_at(sizes[1]);
        let gen = load(&s.gen.mlp, a).bind(g, true);
        let enc = load(&s.enc.mlp, b).bind(g, true);
        let post = load(&s.post.mlp, c).bind(g, true);
        let disc = s.disc.bind(g, false);
        let l = loss_g_total(
            g, &gen, &disc, &enc, &post, &s.batch, &s.vp_cond, &s.vp_z, &s.pivots,
        )
        .unwrap();
        let mut vars = gen.vars();
        vars.extend(enc.vars());
        vars.extend(post.vars());
        (l.total, vars)
    })
}

pub type Check = (&'static str, fn(u64) -> f64);

pub const CHECKS: [Check; 8] = [
    ("rectifying", srn_error),
    ("adversarial+classification (G)", adv_cls_error),
    ("visual pivot", vp_error),
    ("discriminator with penalty", loss_d_error),
    ("gradient penalty", penalty_error),
    ("pre-reconstruction", pre_error),
    ("post-reconstruction", post_error),
    ("generator total", total_g_error),
];

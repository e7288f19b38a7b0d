//! End-to-end acceptance checks. Each test prints one PASS/FAIL line straight
//! to stderr so it shows up without `--nocapture`.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use common::grad::{CHECKS, SEEDS, TOL};
use common::{toy, PivotEcho};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srgan::data::ToySpec;
use srgan::eval::{self, harmonic, BundleSynthesizer, EvalConfig};
use srgan::mds::{classical_mds, distance_matrix};
use srgan::ndgrad::{cosine_matrix, Activation, Graph, Layer, MlpParams, Tensor};
use srgan::srgan::{gradient_penalty, vp_from_generated, DiscParams};
use srgan::srn::{srn_loss_terms, Rectifier};
use srgan::trainer::{self, checkpoint, write_history, TrainConfig};

/// Training runs share one core; run them one at a time so timings mean
/// something.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, detail: String) {
    let line = format!(
        "acceptance criterion {n}: {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn criterion_1_harmonic_mean() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let a = harmonic(41.46, 83.08).unwrap();
    let b = harmonic(31.29, 60.87).unwrap();
    let pass = (a - 55.31).abs() <= 0.01 && (b - 41.34).abs() <= 0.01;
    report(
        1,
        pass,
        format!("H(41.46, 83.08) = {a:.4} (55.31), H(31.29, 60.87) = {b:.4} (41.34), tol 0.01"),
    );
}

#[test]
fn criterion_2_gradient_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut worst = (0.0f64, "", 0);
    for (name, f) in CHECKS {
        for seed in 0..SEEDS {
            let e = f(seed);
            if e > worst.0 {
                worst = (e, name, seed);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        worst.0 < TOL && secs < 60.0,
        format!(
            "{} losses x {SEEDS} seeds, worst relative error {:.2e} ({} seed {}), {secs:.1} s",
            CHECKS.len(),
            worst.0,
            worst.1,
            worst.2
        ),
    );
}

#[test]
fn criterion_3_closed_form_losses() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let penalty = {
        let mut trunk = MlpParams::zeros(&[4, 4], &[Activation::LeakyRelu], None).unwrap();
        *trunk.tensors_mut()[0] = Tensor::identity(4);
        *trunk.tensors_mut()[1] = Tensor::filled(1, 4, 100.0);
        let mut critic = Layer::zeros(4, 1, Activation::Linear);
        for (i, w) in [0.5, -0.5, 0.5, 0.5].into_iter().enumerate() {
            critic.weight.set(i, 0, w);
        }
        let disc = DiscParams::new(trunk, critic, Layer::zeros(4, 3, Activation::Linear)).unwrap();
        let mut g = Graph::new();
        let vars = disc.bind(&mut g, true);
        let v = Tensor::from_rows(&[[0.2, -0.4, 0.9, 0.0], [-1.0, 1.0, 0.3, -0.7]]).unwrap();
        let p = gradient_penalty(&mut g, &vars.critic_path(), &v, 10.0).unwrap();
        g.scalar(p)
    };

    let prepared = toy(ToySpec::default());
    let sem = prepared.seen_semantics();
    let rectifying = {
        let mut g = Graph::new();
        let r = g.constant(Rectifier::Identity.apply(&sem).unwrap());
        let l = srn_loss_terms(&mut g, r, &cosine_matrix(&sem).unwrap(), &sem).unwrap();
        g.scalar(l.total)
    };

    let pivots = &prepared.pivots.pivots;
    let draws = 4;
    let echo: Vec<usize> = (0..pivots.rows()).flat_map(|i| vec![i; draws]).collect();
    let pivot_loss = {
        let mut g = Graph::new();
        let gen = g.constant(pivots.select_rows(&echo));
        let l = vp_from_generated(&mut g, gen, draws, pivots).unwrap();
        g.scalar(l)
    };
    report(
        3,
        penalty == 0.0 && rectifying < 1e-12 && pivot_loss < 1e-12,
        format!("penalty {penalty:e} (== 0), rectifying {rectifying:e} (< 1e-12), pivot {pivot_loss:e} (< 1e-12)"),
    );
}

#[test]
fn criterion_4_oracle_generator() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let prepared = toy(ToySpec {
        noise: 0.0,
        ..ToySpec::default()
    });
    let echo = PivotEcho::new(&prepared);
    let cfg = EvalConfig::default();
    let z = eval::run_zsl(&echo, &prepared, &cfg).unwrap();
    let g = eval::run_gzsl(&echo, &prepared, &cfg).unwrap();
    let pass =
        z.t1 == Some(100.0) && g.u == Some(100.0) && g.s == Some(100.0) && g.h == Some(100.0);
    report(
        4,
        pass,
        format!(
            "T1 {:?}, U {:?}, S {:?}, H {:?} (all 100)",
            z.t1, g.u, g.s, g.h
        ),
    );
}

#[test]
fn criterion_5_trained_end_to_end() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut t1s = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 1..=5u64 {
        let t = Instant::now();
        let prepared = toy(ToySpec {
            seed,
            n_seen: 10,
            n_unseen: 5,
            d_v: 32,
            d_s: 16,
            overlap: 0.3,
            per_class: 100,
            ..ToySpec::default()
        });
        let cfg = TrainConfig {
            srn_iters: 2000,
            gan_iters: 3000,
            batch_size: 256,
            seed,
            ..TrainConfig::toy()
        };
        let out = trainer::train(&prepared, &cfg).unwrap();
        let synth = BundleSynthesizer::new(&out.bundle, &prepared).unwrap();
        t1s.push(
            eval::run_zsl(&synth, &prepared, &EvalConfig::default())
                .unwrap()
                .t1
                .unwrap(),
        );
        slowest = slowest.max(t.elapsed().as_secs_f64());
    }
    let listed = format!("{t1s:?}");
    let m = median(&mut t1s);
    report(
        5,
        m >= 80.0 && slowest < 600.0,
        format!(
            "median unseen T1 {m:.2} (>= 80) over seeds 1..=5 {listed}, slowest run {slowest:.0} s (< 600)"
        ),
    );
}

#[test]
fn criterion_6_rectifier_ablation_trend() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut base = Vec::new();
    let mut with_srn = Vec::new();
    for seed in 1..=7u64 {
        let prepared = toy(ToySpec {
            seed,
            overlap: 0.9,
            ..ToySpec::default()
        });
        let cfg = TrainConfig {
            gan_iters: 1500,
            use_rec: false,
            seed,
            ..TrainConfig::toy()
        };
        let (p, s, _) = trainer::train_rectifier(&prepared, &cfg, &mut |_| {}).unwrap();
        let eval_cfg = EvalConfig::default();
        for (srn, out) in [(None, &mut base), (Some((p, s)), &mut with_srn)] {
            let c = TrainConfig {
                use_srn: srn.is_some(),
                ..cfg.clone()
            };
            let (bundle, _) = trainer::train_gan(&prepared, &c, srn, |_| {}).unwrap();
            let synth = BundleSynthesizer::new(&bundle, &prepared).unwrap();
            out.push(
                eval::run_zsl(&synth, &prepared, &eval_cfg)
                    .unwrap()
                    .t1
                    .unwrap(),
            );
        }
    }
    let detail = format!("baseline {base:?}, +SRN {with_srn:?}");
    let (mb, ms) = (median(&mut base), median(&mut with_srn));
    report(
        6,
        ms >= mb + 5.0,
        format!("median T1 +SRN {ms:.2} vs baseline {mb:.2} (need +5) over 7 seeds at overlap 0.9; {detail}"),
    );
}

#[test]
fn criterion_7_rectification_geometry() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut ratios = Vec::new();
    for seed in 1..=3u64 {
        let prepared = toy(ToySpec {
            seed,
            overlap: 0.9,
            ..ToySpec::default()
        });
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::toy()
        };
        let (srn, _, _) = trainer::train_rectifier(&prepared, &cfg, &mut |_| {}).unwrap();
        let sem = prepared.seen_semantics();
        let pc = cosine_matrix(&prepared.pivots.pivots).unwrap();
        let raw = frobenius(&cosine_matrix(&sem).unwrap(), &pc);
        let rect = frobenius(&cosine_matrix(&srn.rectify(&sem).unwrap()).unwrap(), &pc);
        ratios.push(rect / raw);
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    report(
        7,
        worst < 0.5,
        format!("rectified/raw Frobenius distance to pivot cosines {ratios:.3?} (each < 0.5)"),
    );
}

#[test]
fn criterion_8_mds_exactness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [1usize, 2, 3, 5, 10, 25, 50] {
        for trial in 0..20 {
            let pts: Vec<f64> = match trial % 4 {
                0 => (0..n)
                    .flat_map(|_| {
                        [
                            rng.random_range(-10.0..10.0),
                            rng.random_range(-10.0..10.0),
                            0.0,
                        ]
                    })
                    .collect(),
                1 => (0..n)
                    .flat_map(|_| {
                        let t: f64 = rng.random_range(-5.0..5.0);
                        [t, -2.0 * t, 0.5 * t]
                    })
                    .collect(),
                2 => (0..n)
                    .flat_map(|i| {
                        let (a, b): (f64, f64) = if i % 3 == 0 {
                            (1.0, 2.0)
                        } else {
                            (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        };
                        [a + b, a - b, 2.0 * a]
                    })
                    .collect(),
                _ => vec![3.0; 3 * n],
            };
            let d = distance_matrix(&Tensor::matrix(n, 3, pts).unwrap());
            let back = distance_matrix(&classical_mds(&d, 2).unwrap().coords);
            for (a, b) in d.data().iter().zip(back.data()) {
                worst = worst.max((a - b).abs());
            }
            cases += 1;
        }
    }
    report(
        8,
        worst < 1e-6,
        format!(
            "{cases} rank <= 2 configurations up to 50 points, worst error {worst:.2e} (< 1e-6)"
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let prepared = toy(ToySpec::default());
    let cfg = TrainConfig {
        srn_iters: 200,
        gan_iters: 100,
        seed: 7,
        ..TrainConfig::toy()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let out = trainer::train(&prepared, &cfg).unwrap();
        let hist = dir.path().join(format!("history{run}.csv"));
        let ckpt = dir.path().join(format!("model{run}.ckpt"));
        write_history(&hist, &out.history).unwrap();
        checkpoint::save(&out.bundle, &ckpt).unwrap();
        files.push((std::fs::read(hist).unwrap(), std::fs::read(ckpt).unwrap()));
    }
    let same = files[0] == files[1];
    report(
        9,
        same,
        format!(
            "two runs with seed 7: history {} bytes, checkpoint {} bytes, identical = {same}",
            files[0].0.len(),
            files[0].1.len()
        ),
    );
}

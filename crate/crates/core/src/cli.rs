//! Command-line front end. `run` parses argv and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{self, gen_toy, Prepared, ToySpec};
use crate::error::{Error, Result};
use crate::eval::{self, BundleSynthesizer, EvalConfig, EvalReport, Metric, Mode};
use crate::mds;
use crate::trainer::{self, ModelBundle, TrainConfig, Update};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

const LOG_EVERY: u64 = 500;

#[derive(Debug, Parser)]
#[command(
    name = "srgan",
    version,
    about = "Semantic-rectified feature generation for zero-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with controllable semantic overlap.
    GenToy(GenToyArgs),
    /// Train the semantic rectifier alone.
    TrainSrn(TrainArgs),
    /// Train the generator (and the rectifier too, unless --srn is given).
    TrainGan(TrainArgs),
    /// Score a trained model.
    Eval(EvalArgs),
    /// Embed semantic, rectified and pivot geometry in 2-D.
    VizMds(VizArgs),
    /// Train and score the four component variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seen classes [default: 10]
    #[arg(long)]
    seen: Option<usize>,
    /// Number of unseen classes [default: 5]
    #[arg(long)]
    unseen: Option<usize>,
    /// Visual feature width [default: 32]
    #[arg(long)]
    dv: Option<usize>,
    /// Semantic width [default: 16]
    #[arg(long)]
    ds: Option<usize>,
    /// Semantic similarity forced onto confusable pairs, in [0, 1) [default: 0.3]
    #[arg(long)]
    overlap: Option<f64>,
    /// Instances per class [default: 100]
    #[arg(long)]
    per_class: Option<usize>,
    /// Within-class visual noise [default: 0.1]
    #[arg(long)]
    noise: Option<f64>,
    /// TOML or run.json file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Full-size networks (hidden 2048, batch 1024)
    #[default]
    Full,
    /// Width-64 networks, batch 256, for the synthetic task
    Toy,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or manifest.json
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Pre-trained rectifier (srn.ckpt); train-gan only
    #[arg(long)]
    srn: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations of this phase [default: 2000 rectifier, 3000 adversarial]
    #[arg(long)]
    iters: Option<usize>,
    /// Hyper-parameter preset the config file and flags apply on top of
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Skip the rectifier; G is conditioned on [s, s, z]
    #[arg(long)]
    no_srn: bool,
    /// Drop the pre/post reconstruction terms
    #[arg(long)]
    no_rec: bool,
    /// TOML or run.json file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Zsl,
    Gzsl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassifierArg {
    NearestCentroid,
    DiscBranch,
}

#[derive(Debug, Args)]
struct EvalOptions {
    /// Synthetic features per unseen class [default: 300]
    #[arg(long)]
    n_per_class: Option<usize>,
    /// [default: euclidean]
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// [default: nearest-centroid]
    #[arg(long, value_enum)]
    classifier: Option<ClassifierArg>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained model.ckpt
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Synthesis seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    opts: EvalOptions,
    /// Directory for eval.json and run.json; the report always goes to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// srn.ckpt, or a model.ckpt holding a rectifier
    #[arg(long)]
    srn: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Adversarial iterations per variant [default: 3000]
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[command(flatten)]
    opts: EvalOptions,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Contents of `--config` files and of the `run.json` every command writes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub command: Option<String>,
    pub data: Option<PathBuf>,
    pub srn: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub preset: Option<String>,
    pub toy: Option<ToySpec>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalConfig>,
}

impl RunFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e == "json");
        if json {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message().trim())))
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.json");
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn read_config(path: &Option<PathBuf>) -> Result<RunFile> {
    path.as_deref()
        .map_or_else(|| Ok(RunFile::default()), RunFile::read)
}

fn preset_name(p: Preset) -> String {
    match p {
        Preset::Full => "full".into(),
        Preset::Toy => "toy".into(),
    }
}

fn resolve_train(
    file: &RunFile,
    preset: Option<Preset>,
    seed: Option<u64>,
) -> Result<(TrainConfig, Preset)> {
    let from_file = match file.preset.as_deref() {
        None => None,
        Some("full") => Some(Preset::Full),
        Some("toy") => Some(Preset::Toy),
        Some(other) => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };
    let preset = preset.or(from_file).unwrap_or_default();
    let mut cfg = match (&file.train, preset) {
        (Some(t), _) => t.clone(),
        (None, Preset::Full) => TrainConfig::default(),
        (None, Preset::Toy) => TrainConfig::toy(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, preset))
}

fn resolve_eval(file: &RunFile, opts: &EvalOptions, seed: Option<u64>) -> EvalConfig {
    let mut cfg = file.eval.clone().unwrap_or_default();
    if let Some(n) = opts.n_per_class {
        cfg.n_per_class = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = opts.metric {
        cfg.metric = match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        };
    }
    if let Some(c) = opts.classifier {
        cfg.classifier = match c {
            ClassifierArg::NearestCentroid => eval::Classifier::NearestCentroid,
            ClassifierArg::DiscBranch => eval::Classifier::DiscBranch,
        };
    }
    cfg
}

fn data_path(flag: &Option<PathBuf>, file: &RunFile) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| Error::Config("--data is required".into()))
}

fn prepare(path: &Path) -> Result<Prepared> {
    let (raw, split) = data::load(path)?;
    Prepared::new(&raw, &split)
}

fn progress() -> impl FnMut(Update) {
    let mut last = None;
    move |update| {
        if let Update::Gen { iter } = update {
            if iter % LOG_EVERY == 0 && last != Some(iter) {
                last = Some(iter);
                info!("adversarial iteration {iter}");
            }
        }
    }
}

fn cmd_gen_toy(a: GenToyArgs) -> Result<()> {
    let file = read_config(&a.config)?;
    let mut spec = file.toy.clone().unwrap_or_default();
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut spec.n_seen, a.seen);
    set(&mut spec.n_unseen, a.unseen);
    set(&mut spec.d_v, a.dv);
    set(&mut spec.d_s, a.ds);
    set(&mut spec.per_class, a.per_class);
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(o) = a.overlap {
        spec.overlap = o;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    gen_toy(&spec, &a.out)?;
    info!("wrote toy dataset to {}", a.out.display());
    RunFile {
        command: Some("gen-toy".into()),
        toy: Some(spec),
        ..RunFile::default()
    }
    .write(&a.out)
}

fn cmd_train(a: TrainArgs, gan: bool) -> Result<()> {
    let file = read_config(&a.config)?;
    let data = data_path(&a.data, &file)?;
    let (mut cfg, preset) = resolve_train(&file, a.preset, a.seed)?;
    if a.no_srn {
        cfg.use_srn = false;
    }
    if a.no_rec {
        cfg.use_rec = false;
    }
    if let Some(n) = a.iters {
        if gan {
            cfg.gan_iters = n;
        } else {
            cfg.srn_iters = n;
        }
    }
    let srn_file = a.srn.clone().or_else(|| file.srn.clone());
    if !gan && !cfg.use_srn {
        return Err(Error::Config(
            "train-srn with use_srn = false has nothing to train".into(),
        ));
    }
    cfg.validate()?;
    let prepared = prepare(&data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let srn = match (&srn_file, cfg.use_srn) {
        (_, false) => None,
        (Some(p), true) => {
            let (_, params, state) = trainer::load_srn(p)?;
            Some((params, state))
        }
        (None, true) => {
            let (params, state, hist) = trainer::train_rectifier(&prepared, &cfg, &mut |_| {})?;
            write_srn_history(&a.out.join("srn_history.csv"), &hist)?;
            trainer::save_srn(&cfg, &params, &state, a.out.join("srn.ckpt"))?;
            info!(
                "rectifier trained, final loss {:.6}",
                hist.last().map_or(0.0, |l| l.total)
            );
            Some((params, state))
        }
    };
    if gan {
        let (bundle, history) = trainer::train_gan(&prepared, &cfg, srn, progress())?;
        trainer::write_history(&a.out.join("history.csv"), &history)?;
        trainer::save(&bundle, a.out.join("model.ckpt"))?;
        info!("model written to {}", a.out.join("model.ckpt").display());
    }
    RunFile {
        command: Some(if gan { "train-gan" } else { "train-srn" }.into()),
        data: Some(data),
        srn: srn_file,
        preset: Some(preset_name(preset)),
        train: Some(cfg),
        ..RunFile::default()
    }
    .write(&a.out)
}

fn write_srn_history(path: &Path, hist: &[crate::srn::SrnLoss]) -> Result<()> {
    let mut text = String::from("iter,structure,semantic,total\n");
    for (i, l) in hist.iter().enumerate() {
        text.push_str(&format!("{i},{},{},{}\n", l.structure, l.semantic, l.total));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn evaluate(
    bundle: &ModelBundle,
    prepared: &Prepared,
    cfg: &EvalConfig,
    mode: Mode,
) -> Result<EvalReport> {
    bundle.check_compatible(prepared)?;
    let synth = BundleSynthesizer::new(bundle, prepared)?;
    match mode {
        Mode::Zsl => eval::run_zsl(&synth, prepared, cfg),
        Mode::Gzsl => eval::run_gzsl(&synth, prepared, cfg),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = read_config(&a.config)?;
    let data = data_path(&a.data, &file)?;
    let cfg = resolve_eval(&file, &a.opts, a.seed);
    let prepared = prepare(&data)?;
    let bundle = trainer::load(&a.model)?;
    let mode = match a.mode {
        ModeArg::Zsl => Mode::Zsl,
        ModeArg::Gzsl => Mode::Gzsl,
    };
    let report = evaluate(&bundle, &prepared, &cfg, mode)?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(out) = &a.out {
        RunFile {
            command: Some("eval".into()),
            data: Some(data),
            model: Some(a.model.clone()),
            eval: Some(cfg),
            ..RunFile::default()
        }
        .write(out)?;
        let path = out.join("eval.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let file = read_config(&a.config)?;
    let data = data_path(&a.data, &file)?;
    let prepared = prepare(&data)?;
    let srn = match trainer::load_srn(&a.srn) {
        Ok((_, p, _)) => p,
        Err(Error::Checkpoint(first)) => trainer::load(&a.srn)
            .map_err(|_| Error::Checkpoint(first))?
            .srn
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no rectifier", a.srn.display())))?,
        Err(e) => return Err(e),
    };
    let diag = mds::build_diagnostic(&prepared, &srn)?;
    diag.write(&a.out)?;
    for s in &diag.spaces {
        info!("{} embedding stress {:.4}", s.space, s.embedding.stress);
    }
    RunFile {
        command: Some("viz-mds".into()),
        data: Some(data),
        srn: Some(a.srn.clone()),
        ..RunFile::default()
    }
    .write(&a.out)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub t1: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("+rec", false, true),
    ("+SRN", true, false),
    ("+rec+SRN", true, true),
];

/// Trains the rectifier once, then one adversarial run per variant.
pub fn ablate(
    prepared: &Prepared,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let srn = {
        let c = TrainConfig {
            use_srn: true,
            ..cfg.clone()
        };
        let (p, s, _) = trainer::train_rectifier(prepared, &c, &mut |_| {})?;
        (p, s)
    };
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (variant, use_srn, use_rec) in VARIANTS {
        let c = TrainConfig {
            use_srn,
            use_rec,
            ..cfg.clone()
        };
        let (bundle, _) =
            trainer::train_gan(prepared, &c, use_srn.then(|| srn.clone()), progress())?;
        let z = evaluate(&bundle, prepared, eval_cfg, Mode::Zsl)?;
        let g = evaluate(&bundle, prepared, eval_cfg, Mode::Gzsl)?;
        let row = AblationRow {
            variant,
            t1: z.t1.unwrap_or(0.0),
            u: g.u.unwrap_or(0.0),
            s: g.s.unwrap_or(0.0),
            h: g.h.unwrap_or(0.0),
        };
        info!(
            "{variant}: T1 {:.2} U {:.2} S {:.2} H {:.2}",
            row.t1, row.u, row.s, row.h
        );
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut text = String::from("variant,T1,U,S,H\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.2},{:.2},{:.2},{:.2}\n",
            r.variant, r.t1, r.u, r.s, r.h
        ));
    }
    text
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let file = read_config(&a.config)?;
    let data = data_path(&a.data, &file)?;
    let (mut cfg, preset) = resolve_train(&file, a.preset, a.seed)?;
    if let Some(n) = a.iters {
        cfg.gan_iters = n;
    }
    cfg.validate()?;
    let eval_cfg = resolve_eval(&file, &a.opts, None);
    let prepared = prepare(&data)?;
    let rows = ablate(&prepared, &cfg, &eval_cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("ablation.csv");
    let csv = ablation_csv(&rows);
    print!("{csv}");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    RunFile {
        command: Some("ablate".into()),
        data: Some(data),
        preset: Some(preset_name(preset)),
        train: Some(cfg),
        eval: Some(eval_cfg),
        ..RunFile::default()
    }
    .write(&a.out)
}

/// Exit code for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Dim { .. } => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenToy(a) => cmd_gen_toy(a),
        Command::TrainSrn(a) => cmd_train(a, false),
        Command::TrainGan(a) => cmd_train(a, true),
        Command::Eval(a) => cmd_eval(a),
        Command::VizMds(a) => cmd_viz(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

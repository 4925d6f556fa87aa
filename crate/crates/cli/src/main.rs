//! `gsasv`: command-line driver for data synthesis, trial generation,
//! training, adaptation, scoring, evaluation and sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gsasv::check::full_suite;
use gsasv::checkpoint::{load_checkpoint, save_checkpoint};
use gsasv::data::{
    read_embeddings, read_metadata, read_trials, synth_generate, write_embeddings, write_metadata, write_trials,
    AttributeKind, Dataset, SynthConfig, TrialOptions,
};
use gsasv::data::trials::{scores_to_tsv, PairingConvention, TrialMode};
use gsasv::experiment::{
    load_workspace, resolve_model, run_adapt, run_eval, run_sweep, run_train, split_trials, with_threads,
    ExperimentConfig, Manifest,
};
use gsasv::scoring::{evaluate, ScoringConfig};
use gsasv::seed::derive_seed;
use gsasv::{Error, Result, Variant};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "gsasv", version, about = "Spoof-aware speaker verification backend")]
struct Cli {
    /// Worker threads (0 = all cores). Falls back to GSASV_THREADS.
    #[arg(long, global = true, env = "GSASV_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic speaker/spoof embeddings and metadata.
    GenSynth(GenSynthArgs),
    /// Build trial lists from a metadata table.
    GenTrials(GenTrialsArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Fine-tune selected parameter groups on spoof-domain trials.
    Adapt(AdaptArgs),
    /// Write LLR scores for a trial list.
    Score(ScoreArgs),
    /// Score a trial list and report joint, bonafide and spoof EERs.
    Eval(ScoreArgs),
    /// Evaluate over a parameter grid.
    Sweep(SweepArgs),
    /// Run the gradient-check and EER-oracle suites.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Named preset: separable or tiny.
    #[arg(long, default_value = "separable")]
    preset: String,
    /// JSON generator settings; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; the generator seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenTrialsArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Share of each speaker's utterances held out (writes train.tsv and
    /// eval.tsv); 0 writes a single trials.tsv.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Per-class caps `target,nontarget,spoof` for uniform subsampling.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    sample: Option<Vec<usize>>,
    /// Emit both orderings of each bonafide pair.
    #[arg(long)]
    ordered: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by commands that build an experiment.
#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    /// Experiment JSON. Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory from gen-synth / gen-trials (asv.emb, cm.emb, meta.tsv,
    /// train.tsv, eval.tsv).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate data in memory from a synthetic preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    srelu: bool,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    attr_kind: Option<AttributeKind>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluation trial list.
    #[arg(long)]
    trials: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    model: PathBuf,
    /// Parameter groups to update, e.g. BN or NETWORK,SRELU.
    #[arg(long)]
    groups: Option<String>,
    /// Insert identity-initialised sReLU scales before adapting.
    #[arg(long)]
    add_srelu: bool,
    #[arg(long)]
    adapt_epochs: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Speaker embeddings; defaults to asv.emb beside the trial list.
    #[arg(long)]
    asv: Option<PathBuf>,
    /// Experiment JSON whose scoring section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory; defaults to the directory of the model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// `name=start:step:end` or `name=v1,v2,..` over alpha, lambda, gamma,
    /// epsilon or attr_kind.
    #[arg(long)]
    grid: Option<String>,
    /// Variants to retrain per point (default: the configured one).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    /// Trained model to rescore for alpha sweeps.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Random points per gradient check.
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    let threads = cli.threads.unwrap_or(0);
    let result = with_threads(threads, || run(cli.command, argv)).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command, argv: Vec<String>) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a, argv),
        Command::GenTrials(a) => gen_trials(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Adapt(a) => adapt(a, argv),
        Command::Score(a) => score(a, argv, false),
        Command::Eval(a) => score(a, argv, true),
        Command::Sweep(a) => sweep(a, argv),
        Command::Check(a) => check(a),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

/// Writes `<command>.config.json` (the resolved configuration) and
/// `<command>.manifest.json` into `dir`.
fn finish(cmd: &str, dir: &Path, argv: Vec<String>, seed: u64, config: serde_json::Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let echo = dir.join(format!("{cmd}.config.json"));
    write(&echo, &pretty(&config))?;
    let mut m = Manifest::new(argv, seed, config);
    for p in inputs {
        m.add_input(p)?;
    }
    for p in outputs.iter().chain([&echo]) {
        m.add_output(p)?;
    }
    m.write(&dir.join(format!("{cmd}.manifest.json")))?;
    Ok(())
}

fn gen_synth(a: GenSynthArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::preset(&a.preset)?,
    };
    if let Some(s) = a.seed {
        cfg.seed = derive_seed(s, "synth");
    }
    let data = synth_generate(&cfg)?;
    mkdir(&a.out)?;
    let files = [a.out.join("asv.emb"), a.out.join("cm.emb"), a.out.join("meta.tsv")];
    write_embeddings(&data.asv, &files[0])?;
    write_embeddings(&data.cm, &files[1])?;
    write_metadata(&data.meta, &files[2])?;
    let inputs: Vec<PathBuf> = a.config.into_iter().collect();
    finish("gen-synth", &a.out, argv, cfg.seed, serde_json::to_value(&cfg).expect("serialisable"), &inputs, &files)?;
    say!(
        "wrote {} speaker and {} spoof embeddings, {} records to {}",
        data.asv.len(),
        data.cm.len(),
        data.meta.records.len(),
        a.out.display()
    );
    Ok(())
}

fn gen_trials(a: GenTrialsArgs, argv: Vec<String>) -> Result<()> {
    let meta = read_metadata(&a.metadata)?;
    let opts = TrialOptions {
        mode: match &a.sample {
            Some(c) => TrialMode::Sampled { caps: [c[0], c[1], c[2]] },
            None => TrialMode::Full,
        },
        convention: if a.ordered { PairingConvention::Ordered } else { PairingConvention::Unordered },
        seed: derive_seed(a.seed, "trials"),
    };
    mkdir(&a.out)?;
    let mut outputs = Vec::new();
    if a.holdout > 0.0 {
        let (train, eval) = split_trials(&meta, a.holdout, &opts)?;
        for (name, t) in [("train.tsv", &train), ("eval.tsv", &eval)] {
            let p = a.out.join(name);
            write_trials(t, &p)?;
            say!("{}: {} trials", p.display(), t.len());
            outputs.push(p);
        }
    } else {
        let t = gsasv::data::generate_trials(&meta.records, &opts)?;
        let p = a.out.join("trials.tsv");
        write_trials(&t, &p)?;
        say!("{}: {} trials", p.display(), t.len());
        outputs.push(p);
    }
    let config = json!({ "holdout": a.holdout, "options": opts });
    finish("gen-trials", &a.out, argv, a.seed, config, &[a.metadata], &outputs)
}

/// Builds the experiment from defaults, then the file, then flags.
fn build_experiment(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let mut c = ExperimentConfig::load(p)?;
            c.rebase(p.parent().unwrap_or(Path::new(".")));
            c
        }
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &a.data {
        let existing = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        cfg.data.asv = Some(dir.join("asv.emb"));
        cfg.data.cm = existing("cm.emb");
        cfg.data.metadata = existing("meta.tsv");
        cfg.data.train_trials = existing("train.tsv").or(cfg.data.train_trials.take());
        cfg.eval.trials = existing("eval.tsv").or(cfg.eval.trials.take());
        cfg.data.synth = None;
    }
    if let Some(p) = &a.preset {
        cfg.data.synth = Some(SynthConfig::preset(p)?);
        cfg.data.asv = None;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if a.srelu {
        cfg.model.use_srelu = true;
    }
    if let Some(h) = &a.hidden {
        cfg.model.hidden_dims = h.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr_init = v;
    }
    if let Some(v) = a.lambda {
        t.loss_weights.lambda = v;
    }
    if let Some(v) = a.gamma {
        t.loss_weights.gamma = v;
    }
    if let Some(v) = a.epsilon {
        t.smoothing_epsilon = v;
    }
    if let Some(k) = a.attr_kind {
        cfg.data.attr_kind = k;
    }
    if let Some(v) = a.alpha {
        cfg.scoring.alpha = v;
    }
    if let Some(p) = &a.trials {
        cfg.eval.trials = Some(p.clone());
    }
    cfg.derive_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("serialisable")
}

fn train(a: TrainArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = build_experiment(&a.exp)?;
    let ws = load_workspace(&cfg)?;
    resolve_model(&mut cfg, &ws)?;
    let (model, log) = run_train(&cfg, &ws)?;
    mkdir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let log_path = a.out.join("train_log.tsv");
    save_checkpoint(&model, &ckpt)?;
    write(&log_path, &log.to_tsv())?;
    let mut outputs = vec![ckpt, log_path];
    if !ws.eval_trials.is_empty() {
        let (report, scores) = run_eval(&cfg, &ws, &model)?;
        let r = a.out.join("report.json");
        let s = a.out.join("scores.tsv");
        write(&r, &report.to_json())?;
        write(&s, &scores_to_tsv(&ws.eval_trials, &scores))?;
        outputs.extend([r, s]);
        let pct = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}%"));
        say!(
            "eer_joint {}  eer_bonafide {}  eer_spoof {}",
            pct(report.eer_joint),
            pct(report.eer_bonafide),
            pct(report.eer_spoof)
        );
    }
    if let Some(last) = log.epochs.last() {
        eprintln!("trained {} epochs, final loss {:.6}", log.epochs.len(), last.loss_total);
    }
    finish("train", &a.out, argv, cfg.seed, config_value(&cfg), &ws.inputs, &outputs)
}

fn adapt(a: AdaptArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = build_experiment(&a.exp)?;
    let mut model = load_checkpoint(&a.model)?;
    let mut ac = cfg.adapt.clone().unwrap_or_default();
    if let Some(g) = &a.groups {
        ac.groups = g.clone();
    }
    if a.add_srelu {
        ac.add_srelu = true;
    }
    if let Some(e) = a.adapt_epochs {
        ac.epochs = e;
    }
    if let Some(lr) = a.adapt_lr {
        ac.lr_init = lr;
    }
    ac.group_set()?;
    cfg.model = model.config().clone();
    cfg.adapt = Some(ac.clone());
    let ws = load_workspace(&cfg)?;
    let log = run_adapt(&cfg, &ws, &mut model, &ac)?;
    mkdir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let log_path = a.out.join("adapt_log.tsv");
    save_checkpoint(&model, &ckpt)?;
    write(&log_path, &log.to_tsv())?;
    let mut inputs = ws.inputs.clone();
    inputs.push(a.model.clone());
    finish("adapt", &a.out, argv, cfg.seed, config_value(&cfg), &inputs, &[ckpt, log_path])
}

fn score(a: ScoreArgs, argv: Vec<String>, report: bool) -> Result<()> {
    let mut scoring = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.scoring,
        None => ScoringConfig::default(),
    };
    if let Some(al) = a.alpha {
        scoring.alpha = al;
    }
    scoring.validate()?;
    let asv_path = a
        .asv
        .clone()
        .unwrap_or_else(|| a.trials.parent().unwrap_or(Path::new(".")).join("asv.emb"));
    let model = load_checkpoint(&a.model)?;
    let trials = read_trials(&a.trials)?;
    let asv = read_embeddings(&asv_path)?;
    let data = Dataset::new(&trials, &asv, None)?;
    let (rep, scores) = evaluate(&model, &data, &scoring)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.model.parent().unwrap_or(Path::new(".")).to_path_buf());
    mkdir(&out)?;
    let s = out.join("scores.tsv");
    write(&s, &scores_to_tsv(&trials, &scores))?;
    let mut outputs = vec![s];
    if report {
        let r = out.join("report.json");
        write(&r, &rep.to_json())?;
        say!("{}", rep.to_json().trim_end());
        outputs.push(r);
    }
    let config = json!({
        "model": a.model,
        "trials": a.trials,
        "asv": asv_path,
        "scoring": scoring,
    });
    let mut inputs = vec![a.model.clone(), a.trials.clone(), asv_path];
    inputs.extend(a.config.iter().cloned());
    finish(if report { "eval" } else { "score" }, &out, argv, model.config().seed, config, &inputs, &outputs)
}

fn sweep(a: SweepArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = build_experiment(&a.exp)?;
    let mut section = cfg.sweep.clone().unwrap_or_default();
    if let Some(g) = &a.grid {
        section.grid = g.clone();
    }
    if let Some(v) = &a.variants {
        section.variants = v.clone();
    }
    if section.grid.is_empty() {
        return Err(Error::Config("no grid given (--grid or sweep.grid)".into()));
    }
    gsasv::sweep::parse_grid(&section.grid)?;
    cfg.sweep = Some(section);
    let model = a.model.as_ref().map(load_checkpoint).transpose()?;
    if let Some(m) = &model {
        cfg.model = m.config().clone();
    }
    let ws = load_workspace(&cfg)?;
    if model.is_none() {
        resolve_model(&mut cfg, &ws)?;
    }
    let table = run_sweep(&cfg, &ws, model.as_ref())?;
    mkdir(&a.out)?;
    let p = a.out.join("sweep.tsv");
    let tsv = table.to_tsv();
    write(&p, &tsv)?;
    {
        use std::io::Write;
        let _ = std::io::stdout().write_all(tsv.as_bytes());
    }
    let mut inputs = ws.inputs.clone();
    inputs.extend(a.model.iter().cloned());
    finish("sweep", &a.out, argv, cfg.seed, config_value(&cfg), &inputs, &[p])
}

fn check(a: CheckArgs) -> Result<()> {
    let results = full_suite(a.seed, a.points)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        say!(
            "{status}  {:<56} points={:<4} max_err={:.3e} tol={:.0e}",
            r.name, r.points, r.max_rel_error, r.tolerance
        );
    }
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} of {} checks failed", results.len())));
    }
    say!("all {} checks passed", results.len());
    Ok(())
}

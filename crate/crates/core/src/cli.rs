//! The `flowpref` command line: argument parsing, dispatch, manifests and
//! held-out evaluation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::advantage::{compute_advantage, read_rewards_csv, write_advantage_csv, AdvantageConfig, AdvantageMode};
use crate::analysis::{emit_report, separability_sweep, DagcBasis};
use crate::config::RunConfig;
use crate::consistency::{evaluate_pairs, new_head, pair_scores_csv, train_projection, ConsistencyModel, Featurizer};
use crate::error::{Error, Result};
use crate::flowcore::{sample_batch, train_flow, VelocityModel};
use crate::nft::{finetune, FinetuneMode, PolicyPair};
use crate::numerics::rng::{derive_seed, stream};
use crate::numerics::{load_mlp, save_mlp, Mlp};
use crate::rewards::{QualityReference, RewardContext};
use crate::toyworld::{corpus::build_corpus_sized, Corpus, Profile, SpecDistribution, Split, ToyImage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "flowpref", version, about = "Multi-reward preference fine-tuning of toy flow-matching restorers")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set rl.beta=0.2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic (clean, degraded) corpus.
    GenData(GenData),
    /// Train the base conditional flow model.
    TrainFlow(TrainFlow),
    /// Train the consistency projection head.
    TrainConsistency(TrainConsistency),
    /// Reward-weighted fine-tuning of a base policy.
    Finetune(Finetune),
    /// Advantage separability sweep over rollout counts.
    Analyze(Analyze),
    /// Advantages and reward weights for a rewards CSV.
    AnalyzeAdvantage(AnalyzeAdvantage),
    /// Held-out quality and consistency metrics.
    Eval(Eval),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainFlow {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (step, loss).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainConsistency {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Held-out matched/swapped scores CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Finetune {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Consistency head; required when a consistency reward is configured.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<FinetuneMode>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Euler steps per rollout.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub outer: Option<usize>,
    #[arg(long)]
    pub inner: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Analyze {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub modes: Option<Vec<AdvantageMode>>,
    #[arg(long)]
    pub level_eps: Option<f64>,
    #[arg(long, value_enum)]
    pub basis: Option<DagcBasis>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeAdvantage {
    #[arg(long, value_enum)]
    pub mode: AdvantageMode,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Objective weights; all 1 by default.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub z_c: Option<f64>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Summary metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-image metrics CSV.
    #[arg(long)]
    pub per_image: Option<PathBuf>,
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status. Messages go to stdout/stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.workers > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    match cli.command {
        Command::GenData(a) => gen_data(&mut cfg, a),
        Command::TrainFlow(a) => train_flow_cmd(&mut cfg, a),
        Command::TrainConsistency(a) => train_consistency_cmd(&mut cfg, a),
        Command::Finetune(a) => finetune_cmd(&mut cfg, a),
        Command::Analyze(a) => analyze_cmd(&mut cfg, a),
        Command::AnalyzeAdvantage(a) => analyze_advantage_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&mut cfg, a),
    }
}

// ---- manifests ----

#[derive(Serialize)]
struct FileRecord {
    role: &'static str,
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn records(files: &[(&'static str, &Path)]) -> Result<Vec<FileRecord>> {
    files
        .iter()
        .map(|&(role, p)| {
            Ok(FileRecord {
                role,
                file: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Path of the manifest written next to `primary`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        return primary.join("manifest.json");
    }
    let mut name = primary.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn write_manifest(
    command: &'static str,
    cfg: &RunConfig,
    inputs: &[(&'static str, &Path)],
    outputs: &[(&'static str, &Path)],
    primary: &Path,
) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        inputs: records(inputs)?,
        outputs: records(outputs)?,
    };
    let path = manifest_path(primary);
    let mut text = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path)
}

fn load_policy(path: &Path) -> Result<VelocityModel<f32>> {
    VelocityModel::from_net(load_mlp(path)?)
}

// ---- shared setup ----

/// Quality reference fitted on the corpus's clean training images, plus the
/// consistency model when a head is given.
pub fn reward_context(corpus: &Corpus, head: Option<Mlp<f32>>, featurizer_seed: u64) -> Result<RewardContext> {
    let quality = QualityReference::fit(corpus.split_pairs(Split::Train).iter().map(|p| &p.clean))?;
    let consistency = head
        .map(|h| ConsistencyModel::new(Featurizer::new(featurizer_seed), h))
        .transpose()?;
    Ok(RewardContext {
        quality: Some(quality),
        consistency,
    })
}

/// Base flow model initialized from the run seed.
pub fn init_policy(x_dim: usize, hidden: &[usize], seed: u64) -> Result<VelocityModel<f32>> {
    VelocityModel::new(x_dim, hidden, &mut stream(seed, &[0x1417]))
}

pub fn init_head(seed: u64) -> Result<Mlp<f32>> {
    new_head(&mut stream(seed, &[0x4ead]))
}

// ---- evaluation ----

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub pair_id: usize,
    pub quality: f64,
    pub consistency: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MetricSummary>,
}

impl EvalReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.metric == metric).map(|s| s.mean)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,mean,stderr,n\n");
        for m in &self.summary {
            let _ = writeln!(s, "{},{},{},{}", m.metric, m.mean, m.stderr, m.n);
        }
        s
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("pair_id,quality,consistency,mse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.pair_id, r.quality, r.consistency, r.mse);
        }
        s
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One restoration per pair of `split`, seeded by `(seed, pair index)` so two
/// policies evaluated with the same seed see the same noise.
pub fn evaluate(
    policy: &VelocityModel<f32>,
    corpus: &Corpus,
    split: Split,
    limit: Option<usize>,
    ctx: &RewardContext,
    sample_steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut ids = corpus.indices(split);
    if let Some(l) = limit {
        ids.truncate(l);
    }
    if ids.is_empty() {
        return Err(Error::contract(format!("{split:?} split is empty")));
    }
    let quality = ctx
        .quality
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs a quality reference".into()))?;
    let consistency = ctx
        .consistency
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs a consistency head".into()))?;
    let conds: Vec<&ToyImage> = ids.iter().map(|&i| &corpus.pairs()[i].degraded).collect();
    let seeds: Vec<u64> = ids.iter().map(|&i| derive_seed(seed, &[0xe7a1, i as u64])).collect();
    let out = sample_batch(policy, &conds, &seeds, sample_steps)?;
    let rows: Vec<EvalRow> = ids
        .iter()
        .zip(&out)
        .map(|(&i, sr)| {
            let p = &corpus.pairs()[i];
            Ok(EvalRow {
                pair_id: i,
                quality: quality.score(sr),
                consistency: 0.5 * (consistency.score(&p.degraded, sr)? + 1.0),
                mse: sr.mse(&p.clean),
            })
        })
        .collect::<Result<_>>()?;
    let col = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let summary = [
        ("quality", col(|r| r.quality)),
        ("consistency", col(|r| r.consistency)),
        ("mse", col(|r| r.mse)),
    ]
    .into_iter()
    .map(|(metric, xs)| {
        let (mean, stderr) = mean_stderr(&xs);
        MetricSummary {
            metric,
            mean,
            stderr,
            n: xs.len(),
        }
    })
    .collect();
    Ok(EvalReport { rows, summary })
}

// ---- commands ----

fn gen_data(cfg: &mut RunConfig, a: GenData) -> Result<()> {
    if let Some(v) = a.n {
        cfg.data.n = v;
    }
    if let Some(v) = a.size {
        cfg.data.size = v;
    }
    if let Some(v) = a.profile {
        cfg.data.profile = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = build_corpus_sized(cfg.data.n, &SpecDistribution::profile(cfg.data.profile), cfg.seed, cfg.data.size)?;
    corpus.save(&a.out)?;
    write_manifest("gen-data", cfg, &[], &[("corpus", &a.out)], &a.out)?;
    println!("wrote {} pairs to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_flow_cmd(cfg: &mut RunConfig, a: TrainFlow) -> Result<()> {
    if let Some(v) = a.steps {
        cfg.flow.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.flow.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = load_corpus(&a.corpus)?;
    let mut model = init_policy(corpus.pixel_count(), &cfg.flow.hidden, cfg.seed)?;
    let trace = train_flow(&mut model, &corpus, &cfg.flow_train())?;
    save_mlp(model.net(), &a.out)?;
    let mut outputs = vec![("model", a.out.as_path())];
    if let Some(t) = &a.trace {
        write_text(t, &trace.to_csv())?;
        outputs.push(("trace", t.as_path()));
    }
    write_manifest("train-flow", cfg, &[("corpus", &a.corpus)], &outputs, &a.out)?;
    println!(
        "smoothed loss {:.4} -> {:.4}",
        trace.initial_smoothed().unwrap_or(f64::NAN),
        trace.final_smoothed().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_consistency_cmd(cfg: &mut RunConfig, a: TrainConsistency) -> Result<()> {
    if let Some(v) = a.steps {
        cfg.consistency.steps = v;
    }
    if let Some(v) = a.tau {
        cfg.consistency.tau = v;
    }
    if let Some(v) = a.lr {
        cfg.consistency.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = load_corpus(&a.corpus)?;
    let featurizer = Featurizer::new(cfg.consistency.featurizer_seed);
    let mut head = init_head(cfg.seed)?;
    let trace = train_projection(&mut head, &featurizer, &corpus, &cfg.consistency_train())?;
    save_mlp(&head, &a.out)?;
    let mut outputs = vec![("head", a.out.as_path())];
    if let Some(t) = &a.trace {
        write_text(t, &trace.to_csv())?;
        outputs.push(("trace", t.as_path()));
    }
    if let Some(s) = &a.scores {
        let model = ConsistencyModel::new(featurizer, head)?;
        let test: Vec<_> = corpus.indices(Split::Test).into_iter().map(|i| (i, &corpus.pairs()[i])).collect();
        write_text(s, &pair_scores_csv(&evaluate_pairs(&model, &test)?))?;
        outputs.push(("scores", s.as_path()));
    }
    write_manifest("train-consistency", cfg, &[("corpus", &a.corpus)], &outputs, &a.out)?;
    Ok(())
}

fn finetune_cmd(cfg: &mut RunConfig, a: Finetune) -> Result<()> {
    if let Some(v) = a.mode {
        cfg.rl.mode = v;
    }
    if let Some(v) = a.rollouts {
        cfg.rl.rollouts = v;
    }
    if let Some(v) = a.steps {
        cfg.rl.steps = v;
    }
    if let Some(v) = a.outer {
        cfg.rl.outer_iters = v;
    }
    if let Some(v) = a.inner {
        cfg.rl.inner_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.rl.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let base = load_policy(&a.base)?;
    let head = a.head.as_deref().map(load_mlp).transpose()?;
    let ctx = reward_context(&corpus, head, cfg.consistency.featurizer_seed)?;
    let mut pair = PolicyPair::new(base, cfg.nft_params(), cfg.rl.ema_decay)?;
    let trace = finetune(&mut pair, &corpus, &cfg.registry()?, &ctx, &cfg.finetune())?;
    save_mlp(pair.theta.net(), &a.out)?;
    let mut inputs = vec![("base", a.base.as_path()), ("corpus", a.corpus.as_path())];
    if let Some(h) = &a.head {
        inputs.push(("head", h.as_path()));
    }
    let mut outputs = vec![("policy", a.out.as_path())];
    if let Some(t) = &a.trace {
        write_text(t, &trace.to_csv())?;
        outputs.push(("trace", t.as_path()));
    }
    write_manifest("finetune", cfg, &inputs, &outputs, &a.out)?;
    if let Some(last) = trace.rows.last() {
        println!(
            "iteration {}: quality {:.4}, consistency {:.4}, loss {:.4}",
            last.iter, last.mean_quality, last.mean_consistency, last.loss
        );
    }
    Ok(())
}

fn analyze_cmd(cfg: &mut RunConfig, a: Analyze) -> Result<()> {
    if let Some(v) = a.groups {
        cfg.analysis.groups = v;
    }
    if let Some(v) = a.m {
        cfg.analysis.m = v;
    }
    if let Some(v) = a.modes {
        cfg.analysis.modes = v;
    }
    if let Some(v) = a.level_eps {
        cfg.analysis.level_eps = v;
    }
    if let Some(v) = a.basis {
        cfg.analysis.basis = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = load_corpus(&a.corpus)?;
    let policy = load_policy(&a.policy)?;
    let head = a.head.as_deref().map(load_mlp).transpose()?;
    let ctx = reward_context(&corpus, head, cfg.consistency.featurizer_seed)?;
    let ids = corpus.indices(Split::Test);
    if ids.len() < cfg.analysis.groups {
        return Err(Error::validation(
            "groups",
            format!("{} requested but the test split holds {}", cfg.analysis.groups, ids.len()),
        ));
    }
    let inputs: Vec<(usize, &ToyImage)> =
        ids[..cfg.analysis.groups].iter().map(|&i| (i, &corpus.pairs()[i].degraded)).collect();
    let report = separability_sweep(&inputs, &policy, &cfg.analysis_registry()?, &ctx, &cfg.sweep())?;
    emit_report(&report, &a.out)?;
    let mut inputs = vec![("policy", a.policy.as_path()), ("corpus", a.corpus.as_path())];
    if let Some(h) = &a.head {
        inputs.push(("head", h.as_path()));
    }
    let g = a.out.join(crate::analysis::GROUPS_FILE);
    let s = a.out.join(crate::analysis::SUMMARY_FILE);
    write_manifest("analyze", cfg, &inputs, &[("groups", &g), ("summary", &s)], &a.out)?;
    let mut out = std::io::stdout().lock();
    for r in &report.summary {
        let _ = writeln!(
            out,
            "{:>12} M={:<2} dagc {:.3} top1 |dA| {:.4}",
            r.mode.name(),
            r.m,
            r.mean_dagc,
            r.mean_top1_gap
        );
    }
    Ok(())
}

fn analyze_advantage_cmd(cfg: &RunConfig, a: AnalyzeAdvantage) -> Result<()> {
    let file = std::fs::File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let table = read_rewards_csv(file)?;
    let weights = a.weights.unwrap_or_else(|| vec![1.0; table.batch.k()]);
    let mut adv = AdvantageConfig::new(a.mode, weights);
    adv.z_c = a.z_c.unwrap_or(cfg.rl.z_c);
    adv.epsilon = cfg.rl.epsilon;
    let result = compute_advantage(&table.batch, &adv)?;
    let mut buf = Vec::new();
    write_advantage_csv(&table, &result, &mut buf)?;
    std::fs::write(&a.out, buf).map_err(|e| Error::io(&a.out, e))?;
    write_manifest("analyze-advantage", cfg, &[("rewards", &a.input)], &[("advantages", &a.out)], &a.out)
}

fn eval_cmd(cfg: &mut RunConfig, a: Eval) -> Result<()> {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = load_corpus(&a.corpus)?;
    let policy = load_policy(&a.policy)?;
    let ctx = reward_context(&corpus, Some(load_mlp(&a.head)?), cfg.consistency.featurizer_seed)?;
    let report = evaluate(&policy, &corpus, a.split, None, &ctx, cfg.flow.sample_steps, cfg.seed)?;
    write_text(&a.out, &report.summary_csv())?;
    let mut outputs = vec![("metrics", a.out.as_path())];
    if let Some(p) = &a.per_image {
        write_text(p, &report.rows_csv())?;
        outputs.push(("per_image", p.as_path()));
    }
    let inputs = [("policy", a.policy.as_path()), ("corpus", a.corpus.as_path()), ("head", a.head.as_path())];
    write_manifest("eval", cfg, &inputs, &outputs, &a.out)?;
    print!("{}", report.summary_csv());
    Ok(())
}

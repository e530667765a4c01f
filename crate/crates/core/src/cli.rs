//! Command-line entry point.
//!
//! Every command writes a `manifest.json` into its output directory recording
//! the effective configuration, the seed, and sha256 digests of every input
//! and artifact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::checks;
use crate::config::{TrainConfig, Variant};
use crate::data::{parse_behaviors, split_by_time, Impression, NewsStore};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::persona::report_line;
use crate::recommender::{persona_for, Recommender};
use crate::synth::{self, SynthConfig};
use crate::text::{import_frozen_vectors, Vocabulary};
use crate::trainer::{Trainer, NDCG_KS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

pub const ENV_NEWS: &str = "PERCONET_NEWS";
pub const ENV_BEHAVIORS: &str = "PERCONET_BEHAVIORS";
pub const ENV_DEV_BEHAVIORS: &str = "PERCONET_DEV_BEHAVIORS";
pub const ENV_WORD_VECTORS: &str = "PERCONET_WORD_VECTORS";
pub const ENV_ENTITY_VECTORS: &str = "PERCONET_ENTITY_VECTORS";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PERSONA_FILE: &str = "personas.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "param_value,auc,mrr,ndcg";

#[derive(Parser, Debug)]
#[command(name = "perconet", version, about = "Persona-aware news recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, log and manifest.
    Train(TrainArgs),
    /// Score impressions with a trained run.
    Eval(EvalArgs),
    /// Train and evaluate once per value of a single hyperparameter.
    Sweep(SweepArgs),
    /// Explain a user's top recommendations through persona entities.
    Explain(ExplainArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic MIND-format dataset with known interests.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, env = ENV_NEWS)]
    pub news: PathBuf,
    #[arg(long, env = ENV_BEHAVIORS)]
    pub behaviors: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_g: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Run sequentially even when built with the `parallel` feature.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out impressions; otherwise the latest `dev_fraction` is used.
    #[arg(long, env = ENV_DEV_BEHAVIORS)]
    pub dev_behaviors: Option<PathBuf>,
    /// Frozen token vectors (`count dim` header, then `token v..` lines).
    #[arg(long, env = ENV_WORD_VECTORS)]
    pub word_vectors: Option<PathBuf>,
    /// Frozen entity vectors keyed by WikiData id.
    #[arg(long, env = ENV_ENTITY_VECTORS)]
    pub entity_vectors: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = ENV_DEV_BEHAVIORS)]
    pub dev_behaviors: Option<PathBuf>,
    /// Comma-separated λ values.
    #[arg(long = "lambda-values", value_delimiter = ',')]
    pub lambda_values: Vec<f64>,
    /// Comma-separated top-K values.
    #[arg(long = "top-k-values", value_delimiter = ',')]
    pub top_k_values: Vec<usize>,
    /// Comma-separated top-G values.
    #[arg(long = "top-g-values", value_delimiter = ',')]
    pub top_g_values: Vec<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub user: String,
    /// Candidate news ids; defaults to the user's latest impression.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    #[arg(long, default_value_t = 3)]
    pub terms: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = checks::DEFAULT_TOL)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub news: Option<usize>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub impressions_per_user: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// One per command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(digest(role, path)?);
        Ok(())
    }

    fn artifact(&mut self, role: &str, path: &Path) -> Result<()> {
        self.artifacts.push(digest(role, path)?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_file(&path, body.as_bytes())?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = read_file(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn input_path(&self, role: &str) -> Option<&Path> {
        self.inputs.iter().find(|d| d.role == role).map(|d| d.path.as_path())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest(role: &str, path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        role: role.into(),
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    ChecksFailed(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::ChecksFailed(_) => EXIT_CHECK_FAILED,
            Failure::Error(e) => match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Parse { .. }
                | Error::Format(_)
                | Error::Io { .. }
                | Error::Vocabulary { .. }
                | Error::UnknownUser(_)
                | Error::DegenerateInput(_) => EXIT_DATA,
                _ => EXIT_RUNTIME,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Error(e) => write!(f, "{e}"),
            Failure::ChecksFailed(n) => write!(f, "{n} gradient check(s) failed"),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Train(a) => Ok(cmd_train(&a).map(|_| ())?),
        Command::Eval(a) => Ok(cmd_eval(&a).map(|_| ())?),
        Command::Sweep(a) => Ok(cmd_sweep(&a).map(|_| ())?),
        Command::Explain(a) => Ok(cmd_explain(&a).map(|_| ())?),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => Ok(cmd_synth(&a).map(|_| ())?),
    }
}

/// Config file, then `--seed`, then the per-field overrides.
pub fn resolve_config(common: &Common, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml(&read_file(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = o.variant {
        cfg = cfg.with_variant(v);
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(l) = o.lambda {
        cfg.lambda = l;
    }
    if let Some(k) = o.top_k {
        cfg.top_k = k;
    }
    if let Some(g) = o.top_g {
        cfg.top_g = g;
    }
    if let Some(lr) = o.lr {
        cfg.lr = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if o.sequential {
        cfg.parallel = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_store(news: &Path, vocab: Vocabulary, entity_vocab: Vocabulary, n_w: usize) -> Result<NewsStore> {
    let mut store = NewsStore::new(vocab, entity_vocab, n_w);
    store.load(news)?;
    Ok(store)
}

/// Token and entity vocabularies of a run, saved so later commands map text
/// to the same ids.
#[derive(Serialize, Deserialize)]
struct SavedVocab {
    words: Vocabulary,
    entities: Vocabulary,
}

fn load_vocab(dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
    let path = dir.join(VOCAB_FILE);
    let saved: SavedVocab = serde_json::from_str(&read_file(&path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (mut w, mut e) = (saved.words, saved.entities);
    w.reindex();
    e.reindex();
    w.freeze();
    e.freeze();
    Ok((w, e))
}

fn build_model(
    cfg: &TrainConfig,
    store: &NewsStore,
    word_vectors: Option<&Path>,
    entity_vectors: Option<&Path>,
) -> Result<Model> {
    let mut model = Model::new(cfg, store.vocab.len(), store.entity_vocab.len(), cfg.seed)?;
    if let Some(p) = word_vectors {
        model
            .arch
            .set_text_backend(import_frozen_vectors(p, &store.vocab, cfg.dims.d_w)?)?;
    }
    if let Some(p) = entity_vectors {
        model
            .arch
            .set_entity_backend(import_frozen_vectors(p, &store.entity_vocab, cfg.dims.d_e)?)?;
    }
    Ok(model)
}

/// A trained run loaded back from its output directory.
pub struct LoadedRun {
    pub config: TrainConfig,
    pub store: NewsStore,
    pub model: Model,
}

/// Reloads the configuration, vocabularies and checkpoint written by `train`,
/// reading news from `news`.
pub fn load_run(dir: &Path, news: &Path) -> Result<LoadedRun> {
    let config = TrainConfig::from_toml(&read_file(&dir.join(CONFIG_FILE))?)?;
    let manifest = RunManifest::read(dir)?;
    let (vocab, entities) = load_vocab(dir)?;
    let store = load_store(news, vocab, entities, config.n_w)?;
    let mut model = build_model(
        &config,
        &store,
        manifest.input_path("word_vectors"),
        manifest.input_path("entity_vectors"),
    )?;
    checkpoint::load_into(&mut model.params, &dir.join(CHECKPOINT_FILE))?;
    Ok(LoadedRun { config, store, model })
}

/// What `train` produced.
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub log: Vec<crate::trainer::EpochRecord>,
    pub manifest: RunManifest,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainArtifacts> {
    let cfg = resolve_config(&a.common, &a.overrides)?;
    let dir = &a.common.out;
    let mut manifest = RunManifest::new("train", cfg.seed, serde_json::to_value(&cfg).expect("config serialises"));

    let store = load_store(&a.data.news, Vocabulary::new(), Vocabulary::new(), cfg.n_w)?;
    manifest.input("news", &a.data.news)?;
    let impressions = parse_behaviors(&a.data.behaviors, &store, cfg.n_u)?;
    manifest.input("behaviors", &a.data.behaviors)?;
    let (train, dev) = match &a.dev_behaviors {
        Some(p) => {
            manifest.input("dev_behaviors", p)?;
            (impressions, parse_behaviors(p, &store, cfg.n_u)?)
        }
        None => split_by_time(&impressions, cfg.dev_fraction),
    };
    if let Some(p) = &a.word_vectors {
        manifest.input("word_vectors", p)?;
    }
    if let Some(p) = &a.entity_vectors {
        manifest.input("entity_vectors", p)?;
    }
    info!(
        "{} news, {} train / {} dev impressions, variant {}",
        store.len(),
        train.len(),
        dev.len(),
        cfg.variant().map_or("custom", |v| v.name())
    );

    let model = build_model(&cfg, &store, a.word_vectors.as_deref(), a.entity_vectors.as_deref())?;
    ensure_dir(dir)?;
    let mut trainer = Trainer::with_model(cfg.clone(), &store, model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut log_text = String::new();
    for _ in 0..cfg.epochs {
        let rec = trainer.run_epoch(&train, &dev)?;
        log_text.push_str(&rec.to_json_line());
        log_text.push('\n');
        log.push(rec);
    }

    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&trainer.model.params, &ckpt)?;
    manifest.artifact("checkpoint", &ckpt)?;
    let log_path = dir.join(LOG_FILE);
    write_file(&log_path, log_text.as_bytes())?;
    manifest.artifact("log", &log_path)?;
    let cfg_path = dir.join(CONFIG_FILE);
    write_file(&cfg_path, cfg.to_toml().as_bytes())?;
    manifest.artifact("config", &cfg_path)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let saved = SavedVocab {
        words: store.vocab.clone(),
        entities: store.entity_vocab.clone(),
    };
    write_file(&vocab_path, serde_json::to_string(&saved).expect("vocab serialises").as_bytes())?;
    manifest.artifact("vocab", &vocab_path)?;
    let persona_path = dir.join(PERSONA_FILE);
    write_file(&persona_path, persona_report(&store, &cfg, &train)?.as_bytes())?;
    manifest.artifact("personas", &persona_path)?;
    manifest.write(dir)?;
    Ok(TrainArtifacts {
        dir: dir.clone(),
        log,
        manifest,
    })
}

/// One line per user from the latest impression of that user.
fn persona_report(store: &NewsStore, cfg: &TrainConfig, impressions: &[Impression]) -> Result<String> {
    let mut latest: std::collections::BTreeMap<&str, &Impression> = Default::default();
    for imp in impressions {
        let e = latest.entry(imp.user_id.as_str()).or_insert(imp);
        if imp.timestamp >= e.timestamp {
            *e = imp;
        }
    }
    let pc = cfg.persona()?;
    let mut out = String::new();
    for (user, imp) in latest {
        let p = persona_for(store, user, &imp.history, pc, cfg.title_entities_only);
        writeln!(out, "{}", report_line(&p, |e| store.entity_label(e))).unwrap();
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport> {
    let run = load_run(&a.run, &a.data.news)?;
    let mut cfg = run.config.clone();
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let impressions = parse_behaviors(&a.data.behaviors, &run.store, cfg.n_u)?;
    let rec = Recommender::new(&run.model, &run.store, cfg.persona()?, cfg.title_entities_only);
    let report = evaluate(&rec, &impressions, &NDCG_KS, cfg.parallel)?;
    print!("{}", report.to_text());

    let dir = &a.common.out;
    ensure_dir(dir)?;
    let mut manifest = RunManifest::new("eval", cfg.seed, serde_json::to_value(&cfg).expect("config serialises"));
    manifest.input("news", &a.data.news)?;
    manifest.input("behaviors", &a.data.behaviors)?;
    manifest.input("checkpoint", &a.run.join(CHECKPOINT_FILE))?;
    let path = dir.join(METRICS_FILE);
    write_file(&path, report.to_json().as_bytes())?;
    manifest.artifact("metrics", &path)?;
    manifest.write(dir)?;
    Ok(report)
}

/// The single hyperparameter a sweep varies.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Lambda(Vec<f64>),
    TopK(Vec<usize>),
    TopG(Vec<usize>),
}

impl SweepAxis {
    pub fn from_args(a: &SweepArgs) -> Result<Self> {
        let given = [!a.lambda_values.is_empty(), !a.top_k_values.is_empty(), !a.top_g_values.is_empty()];
        match given.iter().filter(|g| **g).count() {
            1 => {}
            0 => return Err(Error::Config("a sweep needs values for one of lambda, top-k, top-g".into())),
            _ => {
                return Err(Error::Config(
                    "a sweep varies exactly one of lambda, top-k, top-g".into(),
                ))
            }
        }
        Ok(if given[0] {
            SweepAxis::Lambda(a.lambda_values.clone())
        } else if given[1] {
            SweepAxis::TopK(a.top_k_values.clone())
        } else {
            SweepAxis::TopG(a.top_g_values.clone())
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Lambda(_) => "lambda",
            SweepAxis::TopK(_) => "top_k",
            SweepAxis::TopG(_) => "top_g",
        }
    }

    /// `(label, config)` per value.
    fn configs(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            SweepAxis::Lambda(vs) => vs
                .iter()
                .map(|&v| (v.to_string(), TrainConfig { lambda: v, ..base.clone() }))
                .collect(),
            SweepAxis::TopK(vs) => vs
                .iter()
                .map(|&v| (v.to_string(), TrainConfig { top_k: v, ..base.clone() }))
                .collect(),
            SweepAxis::TopG(vs) => vs
                .iter()
                .map(|&v| (v.to_string(), TrainConfig { top_g: v, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub auc: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// nDCG column of the sweep file is nDCG@10.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:.6}", r.value, r.auc, r.mrr, r.ndcg).unwrap();
    }
    s
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let axis = SweepAxis::from_args(a)?;
    let base = resolve_config(&a.common, &a.overrides)?;
    let store = load_store(&a.data.news, Vocabulary::new(), Vocabulary::new(), base.n_w)?;
    let impressions = parse_behaviors(&a.data.behaviors, &store, base.n_u)?;
    let (train, dev) = match &a.dev_behaviors {
        Some(p) => (impressions, parse_behaviors(p, &store, base.n_u)?),
        None => split_by_time(&impressions, base.dev_fraction),
    };
    if dev.is_empty() {
        return Err(Error::DegenerateInput("sweep needs held-out impressions".into()));
    }
    let mut rows = Vec::new();
    for (value, cfg) in axis.configs(&base) {
        cfg.validate()?;
        let start = Instant::now();
        let mut trainer = Trainer::new(cfg.clone(), &store)?;
        for _ in 0..cfg.epochs {
            trainer.run_epoch(&train, &[])?;
        }
        let r = trainer.evaluate(&dev)?;
        info!("{}={value} auc={:.4} ({:.1?})", axis.name(), r.auc(), start.elapsed());
        rows.push(SweepRow {
            value,
            auc: r.auc(),
            mrr: r.get("mrr"),
            ndcg: r.get("ndcg@10"),
        });
    }

    println!("{:>10} {:>8} {:>8} {:>8}", axis.name(), "AUC", "MRR", "nDCG@10");
    for r in &rows {
        println!("{:>10} {:>8.4} {:>8.4} {:>8.4}", r.value, r.auc, r.mrr, r.ndcg);
    }

    let dir = &a.common.out;
    ensure_dir(dir)?;
    let mut manifest = RunManifest::new("sweep", base.seed, serde_json::to_value(&base).expect("config serialises"));
    manifest.input("news", &a.data.news)?;
    manifest.input("behaviors", &a.data.behaviors)?;
    if let Some(p) = &a.dev_behaviors {
        manifest.input("dev_behaviors", p)?;
    }
    let path = dir.join(SWEEP_FILE);
    write_file(&path, sweep_csv(&rows).as_bytes())?;
    manifest.artifact("sweep", &path)?;
    manifest.write(dir)?;
    Ok(rows)
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<crate::recommender::Explanation> {
    let run = load_run(&a.run, &a.data.news)?;
    let cfg = &run.config;
    let impressions = parse_behaviors(&a.data.behaviors, &run.store, cfg.n_u)?;
    let latest = impressions
        .iter()
        .filter(|i| i.user_id == a.user)
        .max_by_key(|i| i.timestamp)
        .ok_or_else(|| Error::UnknownUser(a.user.clone()))?;
    let candidates: Vec<&str> = if a.candidates.is_empty() {
        latest.candidates.iter().map(|(id, _)| id.as_str()).collect()
    } else {
        a.candidates.iter().map(String::as_str).collect()
    };
    let rec = Recommender::new(&run.model, &run.store, cfg.persona()?, cfg.title_entities_only);
    let persona = rec.persona(&a.user, &latest.history);
    let explanation = rec.explain(&a.user, &latest.history, &candidates, a.top, a.terms)?;
    println!("{}", report_line(&persona, |e| run.store.entity_label(e)));
    print!("{}", explanation.to_text());

    let dir = &a.common.out;
    ensure_dir(dir)?;
    let mut manifest = RunManifest::new("explain", cfg.seed, serde_json::to_value(cfg).expect("config serialises"));
    manifest.input("news", &a.data.news)?;
    manifest.input("behaviors", &a.data.behaviors)?;
    manifest.input("checkpoint", &a.run.join(CHECKPOINT_FILE))?;
    let path = dir.join(format!("explain_{}.json", a.user));
    write_file(
        &path,
        serde_json::to_string_pretty(&explanation).expect("explanation serialises").as_bytes(),
    )?;
    manifest.artifact("explanation", &path)?;
    manifest.write(dir)?;
    Ok(explanation)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> std::result::Result<(), Failure> {
    if let Some(p) = &a.common.config {
        TrainConfig::from_toml(&read_file(p)?)?;
    }
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {}", a.tol)).into());
    }
    let start = Instant::now();
    let reports = checks::run_suite(a.tol)?;
    let mut text = String::new();
    for r in &reports {
        writeln!(text, "{r}").unwrap();
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    writeln!(
        text,
        "{} checks, {} failed, {:.1?}",
        reports.len(),
        failed,
        start.elapsed()
    )
    .unwrap();
    print!("{text}");

    let dir = &a.common.out;
    ensure_dir(dir)?;
    let mut manifest = RunManifest::new(
        "gradcheck",
        a.common.seed.unwrap_or(0),
        serde_json::json!({ "tol": a.tol }),
    );
    let path = dir.join("gradcheck.json");
    write_file(&path, serde_json::to_string_pretty(&reports).expect("reports serialise").as_bytes())?;
    manifest.artifact("report", &path)?;
    manifest.write(dir)?;
    if failed > 0 {
        return Err(Failure::ChecksFailed(failed));
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<synth::SynthData> {
    let mut cfg: SynthConfig = match &a.common.config {
        Some(p) => toml::from_str(&read_file(p)?).map_err(|e| Error::Config(e.message().to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.users {
        cfg.users = v;
    }
    if let Some(v) = a.news {
        cfg.news = v;
    }
    if let Some(v) = a.entities {
        cfg.entities = v;
    }
    if let Some(v) = a.impressions_per_user {
        cfg.impressions_per_user = v;
    }
    let data = cfg.generate()?;
    let dir = &a.common.out;
    let paths = data.write(dir)?;
    let mut manifest = RunManifest::new("synth", cfg.seed, serde_json::to_value(&cfg).expect("config serialises"));
    for (role, p) in ["news", "behaviors", "interests"].iter().zip(&paths) {
        manifest.artifact(role, p)?;
    }
    manifest.write(dir)?;
    println!(
        "wrote {} users, {} news, {} entities to {}",
        cfg.users,
        cfg.news,
        cfg.entities,
        dir.display()
    );
    Ok(data)
}

//! Command-line interface.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{preset, synthetic_preset, RunConfig};
use crate::data::{
    build_dataset, generate_synthetic, load_events, quantile_cut, read_samples, split_by_time, time_quantile,
    write_samples, BehaviorEvent, Planting, Sample, Schema, SynthConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::export::{attention_rows, write_attention};
use crate::hpmn::UpdateSchedule;
use crate::model::{checkpoint_kind, load_checkpoint, save_checkpoint, HpmnModel, ModelConfig, Network, SumPoolModel};
use crate::store::MemoryStore;
use crate::trainer::{evaluate, fit, grad_check_model, write_curve, TrainConfig};

/// Environment variable holding the log filter (e.g. `debug`, `hpmn=trace`).
pub const LOG_ENV: &str = "HPMN_LOG";

#[derive(Parser, Debug)]
#[command(name = "hpmn", version, about = "Hierarchical periodic memory networks for user response prediction")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Build a labeled dataset directory from a JSONL behavior log.
    BuildDataset(BuildArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and print metrics JSON.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck(GradcheckArgs),
    /// Replay an ingest/query trace against a memory store.
    ServeSim(ServeArgs),
    /// Append a memory layer to a checkpoint (and optionally a store).
    Expand(ExpandArgs),
    /// Write per-sample attention weights as JSONL.
    ExportAttention(ExportArgs),
    /// Train with 1..D exponential layers and write AUC against depth.
    SweepCapacity(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlantingArg {
    Natural,
    LongRange,
    Recent,
    Both,
    Absent,
}

impl From<PlantingArg> for Planting {
    fn from(p: PlantingArg) -> Self {
        match p {
            PlantingArg::Natural => Planting::Natural,
            PlantingArg::LongRange => Planting::LongRange,
            PlantingArg::Recent => Planting::Recent,
            PlantingArg::Both => Planting::Both,
            PlantingArg::Absent => Planting::Absent,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Start from the benchmark generator settings instead of the defaults.
    #[arg(long)]
    benchmark: bool,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    cats: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "natural")]
    planting: PlantingArg,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Existing vocabulary; built from the log when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    side_slots: usize,
    #[arg(long, default_value_t = 0.5)]
    neg_ratio: f64,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_delimiter = ',')]
    periods: Option<Vec<u64>>,
    #[arg(long)]
    slot_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelFlags {
    fn run_config(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(file.overridden_by(RunConfig {
            preset: self.preset.clone(),
            periods: self.periods.clone(),
            slot_dim: self.slot_dim,
            embed_dim: self.embed_dim,
            learning_rate: self.lr,
            lambda: self.lambda,
            mu: self.mu,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train the sum-pooling baseline instead of the memory network.
    #[arg(long)]
    baseline: bool,
    /// Learning-curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "small")]
    preset: String,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    mu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL trace of `register`, `ingest` and `query` operations.
    #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
    trace: Option<PathBuf>,
    /// Replay a samples file: each history is ingested, then its target queried.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from a persisted store.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Persist the store after the replay.
    #[arg(long)]
    save_store: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExpandArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    period: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, requires = "store_out")]
    store: Option<PathBuf>,
    #[arg(long)]
    store_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Samples JSONL to score.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    depths: Vec<usize>,
    #[command(flatten)]
    flags: ModelFlags,
}

/// One operation of a serving trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TraceOp {
    Register { user: String, user_side: Vec<u32> },
    Ingest { user: String, event: BehaviorEvent },
    Query { user: String, target: BehaviorEvent, #[serde(default)] context: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user: String,
    pub target_item: u32,
    pub probability: f64,
    pub weights: Vec<f64>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildDataset(a) => build(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ServeSim(a) => serve(a),
        Command::Expand(a) => expand(a),
        Command::ExportAttention(a) => export(a),
        Command::SweepCapacity(a) => sweep(a),
    }
}

struct Dataset {
    schema: Schema,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn write_dataset(dir: &Path, schema: &Schema, train: &[Sample], test: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("schema.json"), serde_json::to_string_pretty(schema)?)?;
    write_samples(&dir.join("train.jsonl"), train)?;
    write_samples(&dir.join("test.jsonl"), test)?;
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    let schema: Schema = serde_json::from_str(&std::fs::read_to_string(dir.join("schema.json"))?)?;
    let train = read_samples(&dir.join("train.jsonl"))?;
    let test = read_samples(&dir.join("test.jsonl"))?;
    for s in train.iter().chain(&test) {
        schema.check_sample(s)?;
    }
    Ok(Dataset { schema, train, test })
}

fn synth(a: SynthArgs) -> Result<i32> {
    let base = if a.benchmark { synthetic_preset(a.seed) } else { SynthConfig { seed: a.seed, ..Default::default() } };
    let cfg = SynthConfig {
        n_users: a.users.unwrap_or(base.n_users),
        seq_len: a.seq_len.unwrap_or(base.seq_len),
        n_items: a.items.unwrap_or(base.n_items),
        n_cats: a.cats.unwrap_or(base.n_cats),
        planting: a.planting.into(),
        ..base
    };
    check_fraction(a.train_frac)?;
    let samples = generate_synthetic(&cfg)?;
    let cut = quantile_cut(&samples, a.train_frac);
    let (train, test) = split_by_time(samples, cut);
    write_dataset(&a.out, &cfg.schema(), &train, &test)?;
    cfg.vocabulary().save(&a.out.join("vocab.json"))?;
    log::info!("wrote {} train and {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(0)
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("train fraction {f} outside [0, 1]")))
    }
}

fn build(a: BuildArgs) -> Result<i32> {
    check_fraction(a.train_frac)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build_from_log(&a.log)?,
    };
    let seqs = load_events(&a.log, &vocab, a.side_slots)?;
    let last: Vec<i64> = seqs.iter().filter_map(|s| s.events.last().map(|e| e.timestamp)).collect();
    let cut = time_quantile(last, a.train_frac);
    let (train, test) = build_dataset(&seqs, cut, a.neg_ratio, a.seed)?;
    write_dataset(&a.out, &vocab.schema(a.side_slots), &train, &test)?;
    vocab.save(&a.out.join("vocab.json"))?;
    log::info!("wrote {} train and {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(0)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn train_and_save<M: Network>(model: M, data: &Dataset, cfg: &TrainConfig, a: &TrainArgs) -> Result<MetricsReport> {
    let test = if data.test.is_empty() { &data.train } else { &data.test };
    let result = fit(model, &data.train, test, cfg)?;
    if let Some(path) = &a.curve {
        write_curve(path, &result.curve)?;
    }
    save_checkpoint(&a.out, &result.best)?;
    log::info!("best epoch {}", result.best_epoch);
    Ok(result.test[result.best_epoch - 1].clone())
}

fn train(a: TrainArgs) -> Result<i32> {
    let data = read_dataset(&a.data)?;
    if data.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let cfg = a.flags.run_config()?.train_config()?;
    let report = if a.baseline {
        let model = SumPoolModel::init(data.schema, cfg.model.embed_dim, cfg.seed)?;
        train_and_save(model, &data, &cfg, &a)?
    } else {
        let model = HpmnModel::init(data.schema, &cfg.model, cfg.seed)?;
        train_and_save(model, &data, &cfg, &a)?
    };
    print_json(&report)?;
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let data = read_dataset(&a.data)?;
    let samples = match a.split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let report = match checkpoint_kind(&a.model)?.as_str() {
        HpmnModel::KIND => evaluate(&load_checkpoint::<HpmnModel>(&a.model)?, samples)?,
        SumPoolModel::KIND => evaluate(&load_checkpoint::<SumPoolModel>(&a.model)?, samples)?,
        other => return Err(Error::Invalid(format!("unknown model kind {other:?}"))),
    };
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)?;
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let p = preset(&a.preset)?;
    let synth = SynthConfig { n_users: a.batch, seq_len: a.seq_len, n_items: 40, n_cats: 5, seed: a.seed, ..Default::default() };
    let samples = generate_synthetic(&synth)?;
    let model = HpmnModel::init(synth.schema(), &p.model_config(), a.seed)?;
    let report = grad_check_model(&model, &samples, a.lambda, a.mu, a.tolerance)?;
    for t in &report.tensors {
        let verdict = if t.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<16} {:>6} params  max rel err {:.3e}  max abs err {:.3e}  {verdict}", t.name, t.len, t.max_rel_error, t.max_abs_error);
    }
    let passed = report.passed();
    println!("{} ({} tensors, tolerance {:e})", if passed { "passed" } else { "failed" }, report.tensors.len(), report.tolerance);
    Ok(if passed { 0 } else { 1 })
}

fn read_trace(path: &Path) -> Result<Vec<TraceOp>> {
    let reader = BufReader::new(File::open(path)?);
    let mut ops = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let op = serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: k + 1, msg: e.to_string() })?;
        ops.push(op);
    }
    Ok(ops)
}

/// Trace that ingests every history in `samples` and then queries each target.
pub fn trace_from_samples(samples: &[Sample]) -> Vec<TraceOp> {
    let mut ops = Vec::new();
    for s in samples {
        let user = s.sequence.user_id.clone();
        ops.push(TraceOp::Register { user: user.clone(), user_side: s.sequence.user_side.clone() });
        for e in &s.sequence.events {
            ops.push(TraceOp::Ingest { user: user.clone(), event: e.clone() });
        }
    }
    for s in samples {
        ops.push(TraceOp::Query { user: s.sequence.user_id.clone(), target: s.target.clone(), context: s.context.clone() });
    }
    ops
}

/// Applies `ops` to `store`, returning one prediction per query.
pub fn replay(store: &MemoryStore, model: &HpmnModel, ops: &[TraceOp]) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for op in ops {
        match op {
            TraceOp::Register { user, user_side } => store.register(user, user_side),
            TraceOp::Ingest { user, event } => store.ingest(user, event, model)?,
            TraceOp::Query { user, target, context } => {
                let q = store.query(user, target, context, model)?;
                out.push(Prediction {
                    user: user.clone(),
                    target_item: target.item,
                    probability: q.probability,
                    weights: q.weights.into_inner(),
                });
            }
        }
    }
    Ok(out)
}

fn serve(a: ServeArgs) -> Result<i32> {
    let model: HpmnModel = load_checkpoint(&a.model)?;
    let store = match &a.store {
        Some(p) => MemoryStore::load(p, &model.fingerprint())?,
        None => MemoryStore::for_model(&model),
    };
    let ops = match (&a.trace, &a.samples) {
        (Some(t), _) => read_trace(t)?,
        (None, Some(s)) => trace_from_samples(&read_samples(s)?),
        (None, None) => return Err(Error::Invalid("one of --trace or --samples is required".into())),
    };
    let preds = replay(&store, &model, &ops)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    for p in &preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(p) = &a.save_store {
        store.persist(p)?;
    }
    log::info!("{} operations, {} predictions, {} users", ops.len(), preds.len(), store.len());
    Ok(0)
}

fn expand(a: ExpandArgs) -> Result<i32> {
    let mut model: HpmnModel = load_checkpoint(&a.model)?;
    let old_version = model.fingerprint();
    model.expand(a.period, a.seed)?;
    save_checkpoint(&a.out, &model)?;
    if let (Some(src), Some(dst)) = (&a.store, &a.store_out) {
        MemoryStore::load(src, &old_version)?.expanded(&model)?.persist(dst)?;
    }
    println!("{}", serde_json::json!({ "depth": model.memory.depth(), "periods": model.memory.schedule.periods() }));
    Ok(0)
}

fn export(a: ExportArgs) -> Result<i32> {
    let model: HpmnModel = load_checkpoint(&a.model)?;
    let rows = attention_rows(&model, &read_samples(&a.samples)?)?;
    write_attention(&a.out, &rows)?;
    Ok(0)
}

fn sweep(a: SweepArgs) -> Result<i32> {
    let data = read_dataset(&a.data)?;
    let base = a.flags.run_config()?.train_config()?;
    let test = if data.test.is_empty() { &data.train } else { &data.test };
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "depth,periods,test_auc,test_logloss")?;
    for &depth in &a.depths {
        let schedule = UpdateSchedule::exponential(depth)?;
        let cfg = TrainConfig { model: ModelConfig { periods: schedule.periods().to_vec(), ..base.model.clone() }, ..base.clone() };
        let model = HpmnModel::init(data.schema, &cfg.model, cfg.seed)?;
        let result = fit(model, &data.train, test, &cfg)?;
        let best = &result.test[result.best_epoch - 1];
        let periods: Vec<String> = schedule.periods().iter().map(u64::to_string).collect();
        writeln!(w, "{depth},{},{},{}", periods.join(" "), best.auc, best.logloss / best.n as f64)?;
        log::info!("depth {depth}: auc {:.4}", best.auc);
    }
    w.flush()?;
    Ok(0)
}

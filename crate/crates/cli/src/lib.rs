//! The `cpforest` command line. [`run`] parses arguments, executes one
//! command and returns the process exit code: 0 on success, 1 for usage,
//! validation and configuration errors, 2 for runtime failures.

mod args;
mod explain;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, IsTerminal, Write};
use std::path::Path;

use clap::error::ErrorKind;
use clap::Parser;
use cpforest_core::causal::ExplanationRecord;
use cpforest_core::corpus::{gen_synthetic, parse_jsonl, write_jsonl, Instance, LabelVocab, SyntheticConfig};
use cpforest_core::harness::{
    crossval, explanation_records, fit_explainer, pretrain_base, sweep, sweep_csv, to_json_bytes, train_full,
    Checkpoint, ExplainerCheckpoint, Predictor, RunConfig, Stage, SweepGrid,
};
use cpforest_core::Error;
use serde::Serialize;

pub use args::{Cli, Command};
pub use explain::{averaged_explanation, explain_instance, rank_pairs, to_dot, InstanceExplanation, RankedEdge};

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::validation(e.to_string())
        } else {
            Failure::runtime(e.to_string())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn report(msg: &str) {
    let color = std::env::var_os("NO_COLOR").is_none() && std::io::stderr().is_terminal();
    if color {
        eprintln!("\x1b[1;31merror:\x1b[0m {msg}");
    } else {
        eprintln!("error: {msg}");
    }
}

/// Runs the command in `argv` (program name first) and returns its exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{}", e.render());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            report(&f.message);
            f.code
        }
    }
}

pub fn execute(command: Command) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::ExplainDataset(a) => explain_dataset(a),
        Command::TrainExplainer(a) => train_explainer(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Crossval(a) => crossval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::ExplainInstance(a) => explain_instance_cmd(a),
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome {
    let fail = |e: std::io::Error| Failure::runtime(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn open(path: &Path) -> std::result::Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))
}

fn load_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> std::result::Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Outcome {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::runtime(format!("cannot write to standard output: {e}"))),
    }
}

struct Data {
    instances: Vec<Instance>,
    labels: LabelVocab,
}

fn load_data(a: &args::DataArgs) -> std::result::Result<Data, Failure> {
    let parsed = parse_jsonl(open(&a.data)?, !a.lenient).map_err(|e| Failure::validation(format!("{}: {e}", a.data.display())))?;
    for (line, msg) in &parsed.skipped {
        eprintln!("warning: {} line {line} skipped: {msg}", a.data.display());
    }
    if parsed.instances.is_empty() {
        return Err(Failure::validation(format!("{} holds no instances", a.data.display())));
    }
    Ok(Data {
        instances: parsed.instances,
        labels: parsed.labels,
    })
}

fn run_config(a: &args::RunArgs) -> std::result::Result<RunConfig, Failure> {
    let mut c: RunConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &a.task {
        c.task = serde_json::from_value(serde_json::Value::String(t.clone()))
            .map_err(|_| Failure::validation(format!("unknown task {t:?} (expected sentence-level or n-ary)")))?;
    }
    macro_rules! set {
        ($($f:ident),*) => {$( if let Some(v) = a.$f { c.$f = v; } )*};
    }
    set!(seed, entities, heads, blocks, layers, dim, alpha, beta, kappa, embed_dim, hidden_dim, lr, epochs, batch_size, explain_fraction, folds);
    if let Some(e) = a.explainer_epochs {
        c.explainer.epochs = e;
    }
    c.disable_semantic |= a.disable_semantic;
    c.disable_pruning |= a.disable_pruning;
    c.validate()?;
    Ok(c)
}

fn gen_data(a: args::GenDataArgs) -> Outcome {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.instances {
        cfg.num_instances = n;
    }
    if let Some(m) = a.classes {
        cfg.num_classes = m;
    }
    let corpus = gen_synthetic(&cfg)?;
    let mut bytes = Vec::new();
    write_jsonl(&corpus.instances, &mut bytes)?;
    if let Some(p) = &a.planted {
        write_atomic(p, &pretty(&corpus.planted)?)?;
    }
    write_atomic(&a.out, &bytes)?;
    eprintln!("wrote {} instances to {}", corpus.instances.len(), a.out.display());
    Ok(())
}

fn last_loss(losses: &[f64]) -> String {
    losses.last().map_or_else(|| "n/a".into(), |l| format!("{l:.6}"))
}

fn pretrain(a: args::PretrainArgs) -> Outcome {
    let cfg = run_config(&a.run)?;
    let data = load_data(&a.data)?;
    let out = pretrain_base(&cfg, &data.instances, &data.labels)?;
    write_atomic(&a.out, &to_json_bytes(&out.checkpoint)?)?;
    eprintln!("pre-trained {} epochs, final loss {}", out.epoch_losses.len(), last_loss(&out.epoch_losses));
    Ok(())
}

fn checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    let ck: Checkpoint = load_json(path)?;
    Ok(ck)
}

fn explain_dataset(a: args::ExplainDatasetArgs) -> Outcome {
    let base = checkpoint(&a.ckpt)?;
    if base.provenance.stage != Stage::Pretrain {
        return Err(Failure::validation(format!("{} is not a pre-trained checkpoint", a.ckpt.display())));
    }
    let data = load_data(&a.data)?;
    let records = explanation_records(&base, &data.instances, a.jobs.max(1))?;
    let mut bytes = Vec::new();
    for r in &records {
        bytes.extend(to_json_bytes(r)?);
    }
    write_atomic(&a.out, &bytes)?;
    eprintln!("wrote {} explanation records", records.len());
    Ok(())
}

fn read_records(path: &Path) -> std::result::Result<Vec<ExplanationRecord>, Failure> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExplanationRecord = serde_json::from_str(&line)
            .map_err(|e| Failure::validation(format!("{} line {}: {e}", path.display(), k + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn train_explainer(a: args::TrainExplainerArgs) -> Outcome {
    let base = checkpoint(&a.ckpt)?;
    let records = read_records(&a.records)?;
    let ex = fit_explainer(&base, &records)?;
    write_atomic(&a.out, &to_json_bytes(&ex)?)?;
    eprintln!("explainer trained, final loss {}", last_loss(&ex.epoch_losses));
    Ok(())
}

fn train(a: args::TrainArgs) -> Outcome {
    let cfg = run_config(&a.run)?;
    let data = load_data(&a.data)?;
    let explainer: ExplainerCheckpoint = load_json(&a.explainer)?;
    let out = train_full(&cfg, &data.instances, &data.labels, &explainer, a.allow_mismatch)?;
    write_atomic(&a.out, &to_json_bytes(&out.checkpoint)?)?;
    eprintln!("trained {} epochs, final loss {}", out.epoch_losses.len(), last_loss(&out.epoch_losses));
    Ok(())
}

fn eval(a: args::EvalArgs) -> Outcome {
    let ck = checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let metrics = Predictor::from_checkpoint(&ck)?.evaluate(&data.instances)?;
    emit(a.out.as_deref(), &pretty(&metrics)?)
}

fn crossval_cmd(a: args::CrossvalArgs) -> Outcome {
    let cfg = run_config(&a.run)?;
    let data = load_data(&a.data)?;
    let report = crossval(&cfg, &data.instances, &data.labels, a.jobs.max(1))?;
    emit(a.out.as_deref(), &pretty(&report)?)
}

fn sweep_cmd(a: args::SweepArgs) -> Outcome {
    let cfg = run_config(&a.run)?;
    let grid: SweepGrid = match &a.grid {
        Some(p) => load_json(p)?,
        None => SweepGrid::default(),
    };
    let train = load_data(&a.data)?;
    let test = load_data(&args::DataArgs {
        data: a.test.clone(),
        lenient: a.data.lenient,
    })?;
    let rows = sweep(&cfg, &grid, &train.instances, &test.instances, &train.labels, a.jobs.max(1), a.timing)?;
    write_atomic(&a.out, &sweep_csv(&rows)?)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!("sweep wrote {} rows ({failed} failed)", rows.len());
    Ok(())
}

fn explain_instance_cmd(a: args::ExplainInstanceArgs) -> Outcome {
    let ck = checkpoint(&a.ckpt)?;
    let explainer = match &a.explainer {
        Some(p) => load_json::<ExplainerCheckpoint>(p)?.explainer()?,
        None => ck.explainer()?.ok_or_else(|| {
            Failure::validation(format!("{} holds no explainer; pass --explainer", a.ckpt.display()))
        })?,
    };
    let data = load_data(&a.data)?;
    let inst = data
        .instances
        .iter()
        .find(|i| i.id == a.instance_id)
        .ok_or_else(|| Failure::validation(format!("no instance {:?} in {}", a.instance_id, a.data.data.display())))?;
    let predictor = Predictor::from_checkpoint(&ck)?;
    let ex = predictor.example(inst)?;
    let explanation = explain_instance(&predictor.model, &explainer, inst, &ex, a.top)?;
    if let Some(p) = &a.dot {
        write_atomic(p, to_dot(&explanation).as_bytes())?;
    }
    emit(a.out.as_deref(), &pretty(&explanation)?)
}

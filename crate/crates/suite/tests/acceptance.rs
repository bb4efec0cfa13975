//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use cpforest_core::causal::{build_explanation_dataset, Explainer, ExplainerConfig, ExplainerTraining};
use cpforest_core::corpus::{gen_synthetic, split_folds, EntityMention, Instance, LabelVocab, SyntheticConfig};
use cpforest_core::dcgcn::DcgcnConfig;
use cpforest_core::encoder::EncoderConfig;
use cpforest_core::gradcheck::finite_diff_check;
use cpforest_core::harness::{
    evaluate, explanation_records, fit_explainer, prepare_examples, pretrain_base, sweep, sweep_csv, to_json_bytes,
    train_full, Checkpoint, Predictor, RunConfig, SweepGrid,
};
use cpforest_core::model::{Example, ForwardOptions, Model, ModelConfig, Pruning, Vocabs};
use cpforest_core::{Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn synthetic(num_instances: usize, min_len: usize, max_len: usize, seed: u64) -> (Vec<Instance>, LabelVocab) {
    let c = gen_synthetic(&SyntheticConfig {
        num_instances,
        min_len,
        max_len,
        seed,
        ..Default::default()
    })
    .unwrap();
    (c.instances, c.labels)
}

fn small_run() -> RunConfig {
    RunConfig {
        dim: 8,
        embed_dim: 8,
        hidden_dim: 8,
        epochs: 3,
        lr: 0.2,
        kappa: 5,
        explainer: ExplainerTraining { epochs: 5, ..Default::default() },
        ..Default::default()
    }
}

fn gradient_integrity() -> Verdict {
    let started = Instant::now();
    let inst = Instance {
        id: "g".into(),
        tokens: ["chem1", "binds", "gene2", "w3"].map(String::from).to_vec(),
        sentence_breaks: vec![0],
        heads: vec![1, -1, 1, 2],
        deprels: ["nsubj", "root", "obj", "amod"].map(String::from).to_vec(),
        entities: vec![
            EntityMention { role: 1, token_indices: vec![0] },
            EntityMention { role: 2, token_indices: vec![2] },
        ],
        relation: "R1".into(),
    };
    let labels = LabelVocab::new(vec!["None".into(), "R1".into()]).unwrap();
    let vocabs = Vocabs::from_training(std::slice::from_ref(&inst), labels);
    let cfg = ModelConfig {
        encoder: EncoderConfig { vocab_size: vocabs.words.len(), embed_dim: 6, hidden_dim: 5 },
        graph: DcgcnConfig { layers: 2, heads: 2, blocks: 2, dim: 8 },
        num_types: vocabs.types.len(),
        num_labels: 2,
        entities: 2,
        alpha: 0.9,
    };
    let model = Model::new(cfg, 11).unwrap();
    let ex = Example::new(&inst, &vocabs).unwrap();
    let explainer = Explainer::new(ExplainerConfig { input_dim: 10, hidden_dim: 16 }, 5).unwrap();
    let opts = ForwardOptions::with_pruning(Pruning::Causal { explainer: &explainer, beta: 1.0 });
    let mut store = model.store().clone();
    let report = finite_diff_check(&mut store, 1e-6, |s, t| Ok(model.forward_with(s, t, &ex, opts)?.loss.unwrap())).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let (a, c) = report.worst_values.unwrap_or((0.0, 0.0));
    verdict(
        report.max_rel_error <= 1e-5 && secs < 30.0,
        format!(
            "max rel error {:.3e} over {} entries at {:?} (analytic {a:.3e}, numeric {c:.3e}); entries with |g| >= 1e-4: {:.3e}; {secs:.1}s",
            report.max_rel_error,
            report.entries,
            report.worst.clone().unwrap_or_default(),
            report.max_rel_error_with_floor(1e-4)
        ),
    )
}

fn stochasticity() -> Verdict {
    let (mut worst_row, mut worst_sym) = (0.0f64, 0.0f64);
    let mut x_in_range = true;
    let mut count = 0;
    for seed in 0..10u64 {
        let (insts, labels) = synthetic(10, 4, 4 + 2 * seed as usize, 100 + seed);
        let vocabs = Vocabs::from_training(&insts, labels);
        let cfg = RunConfig {
            heads: 1 + seed as usize % 3,
            blocks: 1 + seed as usize % 2,
            alpha: seed as f64 / 9.0,
            dim: 8,
            embed_dim: 6,
            hidden_dim: 4,
            ..Default::default()
        };
        let model = Model::new(cfg.model_config(&vocabs), seed).unwrap();
        let explainer = Explainer::new(ExplainerConfig { input_dim: 8, hidden_dim: 16 }, seed).unwrap();
        let beta = 1.0 - seed as f64 / 10.0;
        for ex in prepare_examples(&insts, &vocabs).unwrap() {
            count += 1;
            let mut tape = Tape::new();
            let opts = ForwardOptions::with_pruning(Pruning::Causal { explainer: &explainer, beta });
            let fw = model.forward(&mut tape, &ex, opts).unwrap();
            for &m in fw.forests.iter().chain(&fw.pruned) {
                let t = tape.value(m);
                for r in 0..t.rows() {
                    let s: f64 = t.row(r).iter().sum();
                    worst_row = worst_row.max((s - 1.0).abs());
                }
            }
            for &x in &fw.explanations {
                let t = tape.value(x);
                worst_sym = worst_sym.max(t.max_abs_diff(&t.transpose().unwrap()));
                x_in_range &= t.values().iter().all(|&v| v > 0.0 && v < 1.0);
            }
        }
    }
    verdict(
        count == 100 && worst_row <= 1e-12 && worst_sym <= 1e-12 && x_in_range,
        format!("{count} instances; worst row-sum error {worst_row:.2e}; worst asymmetry {worst_sym:.2e}; X in (0,1): {x_in_range}"),
    )
}

fn cross_entropy(logits: &[f64], gold: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[gold]
}

fn brute_loss(model: &Model, ex: &Example, forests: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        pruning: Pruning::Disabled,
        forests: Some(forests),
    };
    let fw = model.forward(&mut tape, ex, opts).unwrap();
    cross_entropy(tape.value(fw.logits).values(), ex.gold.unwrap())
}

fn brute_top_k(model: &Model, ex: &Example, k: usize) -> Vec<(usize, usize)> {
    let (forests, _) = model.forests(ex).unwrap();
    let n = ex.len();
    let mut deltas = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let cut: Vec<Tensor> = forests
                .iter()
                .map(|f| {
                    let mut g = f.clone();
                    g.set(i, j, 0.0);
                    g.set(j, i, 0.0);
                    g
                })
                .collect();
            deltas.push(((i, j), brute_loss(model, ex, &cut) - brute_loss(model, ex, &forests)));
        }
    }
    deltas.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    deltas.into_iter().take(k).map(|(p, _)| p).collect()
}

fn attribution_fixture() -> (Model, Vec<Example>) {
    let (insts, labels) = synthetic(50, 4, 6, 21);
    let cfg = RunConfig { alpha: 0.5, ..small_run() };
    let base = pretrain_base(&cfg, &insts, &labels).unwrap();
    let examples = prepare_examples(&insts, &base.checkpoint.vocab).unwrap();
    (base.model, examples)
}

fn attribution_oracle(model: &Model, examples: &[Example]) -> Verdict {
    let started = Instant::now();
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for k in [3, 5, 20] {
        let recs = build_explanation_dataset(model, examples, k, 1).unwrap();
        for (r, ex) in recs.iter().zip(examples) {
            assert!(ex.len() <= 6);
            let got: BTreeSet<_> = r.topk.iter().copied().collect();
            let want: BTreeSet<_> = brute_top_k(model, ex, k).into_iter().collect();
            compared += 1;
            if got != want {
                mismatches.push(format!("{} k={k}", r.id));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        mismatches.is_empty() && secs < 120.0,
        format!("{compared} instance/K comparisons, {} mismatches {:?}; {secs:.1}s", mismatches.len(), mismatches),
    )
}

fn null_attribution(model: &Model, examples: &[Example]) -> Verdict {
    let mut zeroed = model.clone();
    let names: Vec<String> = zeroed.store().names().filter(|n| n.contains(".gcn")).map(str::to_string).collect();
    for name in &names {
        let t = zeroed.store_mut().by_name_mut(name).unwrap();
        t.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let recs = build_explanation_dataset(&zeroed, examples, 5, 1).unwrap();
    let total: usize = recs.iter().map(|r| r.deltas.len()).sum();
    let nonzero = recs.iter().flat_map(|r| &r.deltas).filter(|d| d.delta != 0.0).count();
    verdict(
        nonzero == 0 && total > 0,
        format!("{} graph-encoder tensors zeroed; {nonzero} of {total} deltas non-zero", names.len()),
    )
}

fn gate_endpoints() -> Verdict {
    let (insts, labels) = synthetic(40, 5, 12, 33);
    let vocabs = Vocabs::from_training(&insts, labels.clone());
    let mut worst_off = 0.0f64;
    for seed in 0..3 {
        let cfg = RunConfig { alpha: 1.0, heads: 2, blocks: 2, ..small_run() };
        let model = Model::new(cfg.model_config(&vocabs), seed).unwrap();
        for (ex, inst) in prepare_examples(&insts, &vocabs).unwrap().iter().zip(&insts) {
            let (forests, _) = model.forests(ex).unwrap();
            for f in &forests {
                for i in 0..inst.len() {
                    let off: f64 = (0..inst.len())
                        .filter(|&j| j != i && !ex.adjacency.is_edge(i, j))
                        .map(|j| f.get(i, j))
                        .sum();
                    worst_off = worst_off.max(off);
                }
            }
        }
    }
    let mass_ok = worst_off < 1e-30;

    let (train, test) = insts.split_at(30);
    let cfg = RunConfig { beta: 0.0, ..small_run() };
    let base = pretrain_base(&cfg, train, &labels).unwrap();
    let records = explanation_records(&base.checkpoint, train, 1).unwrap();
    let explainer = fit_explainer(&base.checkpoint, &records).unwrap();
    let gated = train_full(&cfg, train, &labels, &explainer, false).unwrap();
    let ablation_cfg = RunConfig { disable_pruning: true, ..cfg.clone() };
    let ablated = train_full(&ablation_cfg, train, &labels, &explainer, false).unwrap();
    let (pg, pa) = (
        Predictor::from_checkpoint(&gated.checkpoint).unwrap(),
        Predictor::from_checkpoint(&ablated.checkpoint).unwrap(),
    );
    let mut differing = 0;
    for inst in test {
        let (lg, la) = (pg.predict(inst).unwrap().logits, pa.predict(inst).unwrap().logits);
        if lg.iter().zip(&la).any(|(a, b)| a.to_bits() != b.to_bits()) {
            differing += 1;
        }
    }
    let same_losses = gated.epoch_losses.iter().zip(&ablated.epoch_losses).all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        mass_ok && differing == 0 && same_losses,
        format!(
            "alpha=1 worst off-tree row mass {worst_off:.1e}; beta=0 vs ablation: {differing} of {} logit vectors differ, epoch losses identical: {same_losses}",
            test.len()
        ),
    )
}

/// Settings used for the planted-trigger corpus.
fn synthetic_run() -> RunConfig {
    RunConfig {
        alpha: 0.0,
        blocks: 1,
        dim: 32,
        embed_dim: 32,
        hidden_dim: 32,
        lr: 0.2,
        epochs: 60,
        ..Default::default()
    }
}

fn synthetic_end_to_end() -> Verdict {
    let corpus = gen_synthetic(&SyntheticConfig::default()).unwrap();
    let fold = &split_folds(corpus.instances.len(), 5, 7).unwrap()[0];
    let (train, test) = fold.select_cloned(&corpus.instances);
    let cfg = synthetic_run();

    let started = Instant::now();
    let base = pretrain_base(&cfg, &train, &corpus.labels).unwrap();
    let pre_secs = started.elapsed().as_secs_f64();
    let tr = evaluate(&base.checkpoint, &train).unwrap().accuracy;
    let te = evaluate(&base.checkpoint, &test).unwrap().accuracy;

    let examples = prepare_examples(&test, &base.checkpoint.vocab).unwrap();
    let recs = build_explanation_dataset(&base.model, &examples, 5, 1).unwrap();
    let hits = recs.iter().filter(|r| r.topk.contains(&corpus.planted[&r.id])).count();
    let hit_rate = hits as f64 / recs.len() as f64;

    let records = explanation_records(&base.checkpoint, &train, 1).unwrap();
    let explainer = fit_explainer(&base.checkpoint, &records).unwrap();
    let full = train_full(&cfg, &train, &corpus.labels, &explainer, false).unwrap();
    let full_acc = evaluate(&full.checkpoint, &test).unwrap().accuracy;
    let ablation_cfg = RunConfig { disable_pruning: true, ..cfg.clone() };
    let ablated = train_full(&ablation_cfg, &train, &corpus.labels, &explainer, false).unwrap();
    let ablation_acc = evaluate(&ablated.checkpoint, &test).unwrap().accuracy;

    let predictor = Predictor::from_checkpoint(&full.checkpoint).unwrap();
    let frozen = explainer.explainer().unwrap();
    let top3 = test
        .iter()
        .filter(|inst| {
            let ex = predictor.example(inst).unwrap();
            let e = cpforest_cli::explain_instance(&predictor.model, &frozen, inst, &ex, 3).unwrap();
            e.edges.iter().any(|edge| (edge.i, edge.j) == corpus.planted[&inst.id])
        })
        .count();

    verdict(
        tr >= 0.95 && te >= 0.90 && pre_secs <= 300.0 && hit_rate >= 0.80 && full_acc >= ablation_acc - 0.01,
        format!(
            "pretrain {pre_secs:.1}s train {tr:.3} test {te:.3}; planted pair in top-5 for {hits}/{}; full {full_acc:.3} vs ablation {ablation_acc:.3}; planted pair in explainer top-3 for {top3}/{}",
            recs.len(),
            test.len()
        ),
    )
}

fn cli(args: &[&str]) -> i32 {
    cpforest_cli::run(std::iter::once("cpforest").chain(args.iter().copied()))
}

fn run_all_commands(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(
        p("run.json"),
        r#"{"dim":8,"embed_dim":8,"hidden_dim":8,"epochs":2,"kappa":5,"folds":2,"explainer":{"epochs":3}}"#,
    )
    .unwrap();
    std::fs::write(p("synth.json"), r#"{"num_instances":30}"#).unwrap();
    std::fs::write(p("grid.json"), r#"{"heads":[1,2],"alpha":[0.9],"beta":[0.0,1.0]}"#).unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data", "--config", &p("synth.json"), "--out", &p("all.jsonl"), "--planted", &p("planted.json")],
        vec!["gen-data", "--config", &p("synth.json"), "--seed", "8", "--instances", "10", "--out", &p("test.jsonl")],
        vec!["pretrain", "--data", &p("all.jsonl"), "--config", &p("run.json"), "--out", &p("base.json")],
        vec!["explain-dataset", "--ckpt", &p("base.json"), "--data", &p("all.jsonl"), "--jobs", "2", "--out", &p("records.jsonl")],
        vec!["train-explainer", "--ckpt", &p("base.json"), "--records", &p("records.jsonl"), "--out", &p("explainer.json")],
        vec!["train", "--data", &p("all.jsonl"), "--config", &p("run.json"), "--explainer", &p("explainer.json"), "--out", &p("full.json")],
        vec!["eval", "--ckpt", &p("full.json"), "--data", &p("test.jsonl"), "--out", &p("metrics.json")],
        vec!["crossval", "--data", &p("all.jsonl"), "--config", &p("run.json"), "--jobs", "2", "--out", &p("crossval.json")],
        vec!["sweep", "--data", &p("all.jsonl"), "--test", &p("test.jsonl"), "--config", &p("run.json"), "--grid", &p("grid.json"), "--jobs", "2", "--out", &p("sweep.csv")],
        vec!["explain-instance", "--ckpt", &p("full.json"), "--data", &p("all.jsonl"), "--instance-id", "syn00003", "--top", "10", "--dot", &p("case.dot"), "--out", &p("case.json")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        assert_eq!(cli(&args), 0, "command failed: {args:?}");
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism_and_persistence() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (run_all_commands(a.path()), run_all_commands(b.path()));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_files = fa.len() == fb.len() && differing.is_empty();

    let (insts, labels) = synthetic(60, 6, 14, 44);
    let (train, probes) = insts.split_at(40);
    let cfg = small_run();
    let base = pretrain_base(&cfg, train, &labels).unwrap();
    let records = explanation_records(&base.checkpoint, train, 1).unwrap();
    let explainer = fit_explainer(&base.checkpoint, &records).unwrap();
    let full = train_full(&cfg, train, &labels, &explainer, false).unwrap();
    let bytes = to_json_bytes(&full.checkpoint).unwrap();
    let loaded: Checkpoint = serde_json::from_slice(&bytes).unwrap();
    let resaved = to_json_bytes(&loaded).unwrap() == bytes;
    let before = Predictor::from_checkpoint(&full.checkpoint).unwrap();
    let after = Predictor::from_checkpoint(&loaded).unwrap();
    let mut identical = 0;
    for inst in probes {
        let (x, y) = (before.predict(inst).unwrap().logits, after.predict(inst).unwrap().logits);
        let frozen_model = full.model.predict(&before.example(inst).unwrap(), before.options()).unwrap().logits;
        if x.iter().zip(&y).chain(x.iter().zip(&frozen_model)).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        }
    }
    verdict(
        same_files && resaved && identical == probes.len() && probes.len() == 20,
        format!(
            "{} output files from 10 command runs, byte-identical on rerun: {same_files} {differing:?}; save-load-save identical: {resaved}; bit-identical logits on {identical}/{} probes",
            fa.len(),
            probes.len()
        ),
    )
}

fn sweep_structure() -> Verdict {
    let (insts, labels) = synthetic(60, 6, 12, 55);
    let (train, test) = insts.split_at(40);
    let cfg = RunConfig { epochs: 2, ..small_run() };
    let grid = SweepGrid::default();
    let started = Instant::now();
    let rows = sweep(&cfg, &grid, train, test, &labels, 1, false).unwrap();
    let csv_bytes = sweep_csv(&rows).unwrap();
    let mut reader = csv::Reader::from_reader(csv_bytes.as_slice());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let mut cells = BTreeSet::new();
    let mut well_formed = header == ["N", "alpha", "beta", "f1", "accuracy", "seconds", "error"];
    let mut optimum_ok = false;
    let mut failed = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        well_formed &= rec.len() == 7;
        let n: usize = rec[0].parse().unwrap();
        let (a, b): (f64, f64) = (rec[1].parse().unwrap(), rec[2].parse().unwrap());
        let f1 = rec[3].parse::<f64>().ok();
        let acc = rec[4].parse::<f64>().ok();
        well_formed &= f1.is_none_or(|v| (0.0..=1.0).contains(&v)) && acc.is_none_or(|v| (0.0..=1.0).contains(&v));
        if !rec[6].is_empty() {
            failed += 1;
        }
        if n == 2 && a == 0.9 && b == 1.0 {
            optimum_ok = f1.is_some() && rec[6].is_empty();
        }
        cells.insert((n, a.to_bits(), b.to_bits()));
    }
    verdict(
        well_formed && cells.len() == 27 && failed == 0 && optimum_ok,
        format!(
            "{} distinct cells, {failed} failed, well-formed: {well_formed}, cell (2, 0.9, 1) ran: {optimum_ok}; {:.1}s",
            cells.len(),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let (model, examples) = attribution_fixture();
    type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient integrity", Box::new(gradient_integrity)),
        ("stochasticity invariants", Box::new(stochasticity)),
        ("attribution oracle", Box::new(|| attribution_oracle(&model, &examples))),
        ("null attribution", Box::new(|| null_attribution(&model, &examples))),
        ("gate endpoints", Box::new(gate_endpoints)),
        ("synthetic end-to-end", Box::new(synthetic_end_to_end)),
        ("determinism and persistence", Box::new(determinism_and_persistence)),
        ("sweep structure", Box::new(sweep_structure)),
    ];
    let mut failures = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failures += 1;
        }
        println!("criterion {} {name}: {} ({})", k + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

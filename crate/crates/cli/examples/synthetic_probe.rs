//! Runs the two-stage protocol on the planted-trigger corpus and reports
//! accuracy and how often the trigger pair ranks among the top attributions.
//!
//! `cargo run --release -p cpforest-cli --example synthetic_probe -- '{"alpha":0.0}'`

use std::time::Instant;

use cpforest_core::causal::{build_explanation_dataset, select_top_k};
use cpforest_core::corpus::{gen_synthetic, split_folds, SyntheticConfig};
use cpforest_core::harness::{evaluate, explanation_records, fit_explainer, prepare_examples, pretrain_base, train_full, RunConfig};

fn main() -> cpforest_core::Result<()> {
    let overrides = std::env::args().nth(1).unwrap_or_else(|| "{}".into());
    let cfg: RunConfig = serde_json::from_str(&overrides)?;
    let corpus = gen_synthetic(&SyntheticConfig::default())?;
    let fold = &split_folds(corpus.instances.len(), 5, 7)?[0];
    let (train, test) = fold.select_cloned(&corpus.instances);

    let t = Instant::now();
    let base = pretrain_base(&cfg, &train, &corpus.labels)?;
    let pre_secs = t.elapsed().as_secs_f64();
    let tr = evaluate(&base.checkpoint, &train)?;
    let te = evaluate(&base.checkpoint, &test)?;
    println!("pretrain {pre_secs:.1}s losses {:?}", base.epoch_losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("pretrain acc train {:.3} test {:.3}", tr.accuracy, te.accuracy);

    let t = Instant::now();
    let examples = prepare_examples(&test, &base.checkpoint.vocab)?;
    let recs = build_explanation_dataset(&base.model, &examples, 5, 4)?;
    let hits = recs
        .iter()
        .filter(|r| {
            let p = corpus.planted[&r.id];
            select_top_k(&r.deltas, 5).contains(&p)
        })
        .count();
    println!("planted in top-5: {}/{} ({:.1}s)", hits, recs.len(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let records = explanation_records(&base.checkpoint, &train, 4)?;
    let ex = fit_explainer(&base.checkpoint, &records)?;
    println!("explainer {:.1}s losses first {:.4} last {:.4}", t.elapsed().as_secs_f64(), ex.epoch_losses[0], ex.epoch_losses.last().unwrap());

    let t = Instant::now();
    let full = train_full(&cfg, &train, &corpus.labels, &ex, false)?;
    let fm = evaluate(&full.checkpoint, &test)?;
    let abl = RunConfig { disable_pruning: true, ..cfg.clone() };
    let ablated = train_full(&abl, &train, &corpus.labels, &ex, false)?;
    let am = evaluate(&ablated.checkpoint, &test)?;
    println!("full test {:.3} ablation test {:.3} ({:.1}s)", fm.accuracy, am.accuracy, t.elapsed().as_secs_f64());

    let frozen = ex.explainer()?;
    for (name, model) in [("base", &base.model), ("full", &full.model)] {
        let mut top3 = 0;
        for (inst, exm) in test.iter().zip(&examples) {
            let e = cpforest_cli::explain_instance(model, &frozen, inst, exm, 3)?;
            top3 += e.edges.iter().any(|edge| (edge.i, edge.j) == corpus.planted[&inst.id]) as usize;
        }
        println!("planted in explainer top-3 ({name} forests): {top3}/{}", test.len());
    }
    Ok(())
}

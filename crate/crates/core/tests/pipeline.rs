use cpforest_core::corpus::{gen_synthetic, Instance, LabelVocab, SyntheticConfig};
use cpforest_core::harness::{
    evaluate, explanation_records, fit_explainer, pretrain_base, to_json_bytes, train_full, Checkpoint, Predictor,
    RunConfig,
};
use cpforest_core::Error;

fn data(n: usize, seed: u64) -> (Vec<Instance>, LabelVocab) {
    let c = gen_synthetic(&SyntheticConfig { num_instances: n, seed, ..Default::default() }).unwrap();
    (c.instances, c.labels)
}

fn small() -> RunConfig {
    RunConfig { dim: 8, embed_dim: 8, hidden_dim: 6, epochs: 2, kappa: 4, ..Default::default() }
}

#[test]
fn pretraining_halves_the_loss() {
    let (insts, labels) = data(40, 7);
    let cfg = RunConfig {
        alpha: 0.0,
        blocks: 1,
        lr: 0.2,
        epochs: 150,
        ..Default::default()
    };
    let out = pretrain_base(&cfg, &insts, &labels).unwrap();
    let (first, last) = (out.epoch_losses[0], *out.epoch_losses.last().unwrap());
    assert!(last <= 0.5 * first, "{first} -> {last}");
    assert!(evaluate(&out.checkpoint, &insts).unwrap().accuracy >= 0.95);
}

#[test]
fn zero_beta_equals_ablation_bitwise() {
    let (insts, labels) = data(24, 3);
    let (train, test) = insts.split_at(16);
    let cfg = RunConfig { beta: 0.0, ..small() };
    let base = pretrain_base(&cfg, train, &labels).unwrap();
    let recs = explanation_records(&base.checkpoint, train, 1).unwrap();
    let ex = fit_explainer(&base.checkpoint, &recs).unwrap();
    let gated = train_full(&cfg, train, &labels, &ex, false).unwrap();
    let ablated = train_full(&RunConfig { disable_pruning: true, ..cfg }, train, &labels, &ex, false).unwrap();
    assert_eq!(gated.checkpoint.tensors, ablated.checkpoint.tensors);
    let (a, b) = (
        Predictor::from_checkpoint(&gated.checkpoint).unwrap(),
        Predictor::from_checkpoint(&ablated.checkpoint).unwrap(),
    );
    for inst in test {
        let (x, y) = (a.predict(inst).unwrap().logits, b.predict(inst).unwrap().logits);
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn full_checkpoint_round_trip_keeps_logits() {
    let (insts, labels) = data(36, 9);
    let (train, probes) = insts.split_at(16);
    let cfg = small();
    let base = pretrain_base(&cfg, train, &labels).unwrap();
    let recs = explanation_records(&base.checkpoint, train, 2).unwrap();
    let ex = fit_explainer(&base.checkpoint, &recs).unwrap();
    let full = train_full(&cfg, train, &labels, &ex, false).unwrap();
    let bytes = to_json_bytes(&full.checkpoint).unwrap();
    let back: Checkpoint = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(to_json_bytes(&back).unwrap(), bytes);
    let (p, q) = (Predictor::from_checkpoint(&full.checkpoint).unwrap(), Predictor::from_checkpoint(&back).unwrap());
    assert_eq!(probes.len(), 20);
    for inst in probes {
        let (x, y) = (p.predict(inst).unwrap().logits, q.predict(inst).unwrap().logits);
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn explainer_from_another_run_is_rejected_unless_allowed() {
    let (insts, labels) = data(12, 4);
    let cfg = small();
    let base = pretrain_base(&cfg, &insts, &labels).unwrap();
    let recs = explanation_records(&base.checkpoint, &insts, 1).unwrap();
    let ex = fit_explainer(&base.checkpoint, &recs).unwrap();
    let other = RunConfig { seed: 8, ..cfg.clone() };
    assert!(matches!(train_full(&other, &insts, &labels, &ex, false), Err(Error::Config(_))));
    assert!(train_full(&other, &insts, &labels, &ex, true).is_ok());
    assert!(matches!(train_full(&cfg, &insts[1..], &labels, &ex, false), Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let (insts, labels) = data(8, 2);
    let cfg = RunConfig { lr: 1e300, clip: 1e300, ..small() };
    let err = pretrain_base(&cfg, &insts, &labels).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
}

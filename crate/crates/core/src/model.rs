//! The full relation-extraction network: encoder → M blocks of
//! (forest generation → pruning → dense graph convolution per head → head
//! fusion) → pooled relation classifier.

use serde::{Deserialize, Serialize};

use crate::causal::{causal_prune, Explainer};
use crate::corpus::{build_typed_adjacency, Instance, LabelVocab, TypeVocab, TypedAdjacency, WordVocab};
use crate::dcgcn::{encode_forest, fuse_heads, DcgcnConfig, DenseStack};
use crate::encoder::{EncoderConfig, SentenceEncoder};
use crate::error::{Error, Result};
use crate::forest::{check_unit_interval, fuse_gate, semantic_matrix, type_scores};
use crate::head::{pool_entity, pool_sentence, PredictionOutput, RelationHead};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub graph: DcgcnConfig,
    pub num_types: usize,
    pub num_labels: usize,
    pub entities: usize,
    /// Switch-gate weight of the syntactic matrix.
    pub alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        check_unit_interval("alpha", self.alpha)?;
        if self.num_types < 2 {
            return Err(Error::config("type vocabulary must contain none and self"));
        }
        Ok(())
    }

    pub fn forest_count(&self) -> usize {
        self.graph.heads * self.graph.blocks
    }
}

/// Vocabularies a trained model is bound to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabs {
    pub words: WordVocab,
    pub types: TypeVocab,
    pub labels: LabelVocab,
}

impl Vocabs {
    pub fn from_training(train: &[Instance], labels: LabelVocab) -> Self {
        Vocabs {
            words: WordVocab::from_instances(train),
            types: TypeVocab::from_instances(train),
            labels,
        }
    }
}

/// An instance resolved against a model's vocabularies.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub adjacency: TypedAdjacency,
    /// Token indices per entity role, in role order.
    pub mentions: Vec<Vec<usize>>,
    pub gold: Option<usize>,
}

impl Example {
    pub fn new(inst: &Instance, vocabs: &Vocabs) -> Result<Self> {
        Ok(Example {
            id: inst.id.clone(),
            token_ids: vocabs.words.encode(&inst.tokens),
            adjacency: build_typed_adjacency(inst, &vocabs.types)?,
            mentions: inst
                .mentions_by_role()
                .into_iter()
                .map(|m| m.token_indices.clone())
                .collect(),
            gold: Some(vocabs.labels.require(&inst.relation)?),
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// How each forest is turned into the adjacency the graph encoder sees.
#[derive(Clone, Copy, Debug)]
pub enum Pruning<'a> {
    /// Ablation path: `row_softmax(F)`, the `beta = 0` limit of causal pruning.
    Disabled,
    Causal { explainer: &'a Explainer, beta: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub pruning: Pruning<'a>,
    /// Replaces the generated forests, block-major (`block * heads + head`).
    pub forests: Option<&'a [Tensor]>,
}

impl<'a> ForwardOptions<'a> {
    pub fn unpruned() -> Self {
        ForwardOptions {
            pruning: Pruning::Disabled,
            forests: None,
        }
    }

    pub fn with_pruning(pruning: Pruning<'a>) -> Self {
        ForwardOptions {
            pruning,
            forests: None,
        }
    }
}

/// Handles to the interesting intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub loss: Option<Var>,
    pub h0: Var,
    /// `F^p` per block and head, block-major.
    pub forests: Vec<Var>,
    /// Adjacency actually fed to the graph encoder, same order.
    pub pruned: Vec<Var>,
    /// `X^p` per forest when causal pruning is active.
    pub explanations: Vec<Var>,
    /// Node features handed to the explainer for each forest.
    pub explainer_inputs: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    stack: DenseStack,
}

#[derive(Clone, Debug)]
struct BlockParams {
    heads: Vec<HeadParams>,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParameterStore,
    encoder: SentenceEncoder,
    proj_w: ParamId,
    proj_b: ParamId,
    type_table: ParamId,
    blocks: Vec<BlockParams>,
    head: RelationHead,
}

impl Model {
    /// Registers every parameter in a fixed order from a store seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new(seed);
        let encoder = SentenceEncoder::register(&mut store, cfg.encoder)?;
        let d = cfg.graph.dim;
        let proj_w = store.add_weight("input.proj.w", cfg.encoder.feature_dim(), d)?;
        let proj_b = store.add_bias("input.proj.b", d)?;
        let type_table = store.add_weight("types.score", cfg.num_types, 1)?;
        let mut blocks = Vec::with_capacity(cfg.graph.blocks);
        for b in 0..cfg.graph.blocks {
            let mut heads = Vec::with_capacity(cfg.graph.heads);
            for p in 0..cfg.graph.heads {
                let prefix = format!("block{b}.head{p}");
                heads.push(HeadParams {
                    wq: store.add_weight(&format!("{prefix}.wq"), d, d)?,
                    wk: store.add_weight(&format!("{prefix}.wk"), d, d)?,
                    stack: DenseStack::register(&mut store, &prefix, &cfg.graph)?,
                });
            }
            blocks.push(BlockParams {
                heads,
                fuse_w: store.add_weight(&format!("block{b}.fuse.w"), cfg.graph.heads * d, d)?,
                fuse_b: store.add_bias(&format!("block{b}.fuse.b"), d)?,
            });
        }
        let head = RelationHead::register(&mut store, d, cfg.entities, cfg.num_labels)?;
        Ok(Model {
            cfg,
            store,
            encoder,
            proj_w,
            proj_b,
            type_table,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Records one forward pass on `tape` using the given parameter store, which
    /// must have this model's layout (the model's own store, or a perturbed copy
    /// during gradient checking).
    pub fn forward_with(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        ex: &Example,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let n = ex.len();
        if n == 0 {
            return Err(Error::shape("empty instance"));
        }
        if ex.adjacency.n() != n {
            return Err(Error::shape("adjacency size differs from token count"));
        }
        if ex.mentions.len() != self.cfg.entities {
            return Err(Error::config(format!(
                "model expects {} entity mentions, instance {} has {}",
                self.cfg.entities,
                ex.id,
                ex.mentions.len()
            )));
        }
        let forest_count = self.cfg.forest_count();
        if let Some(f) = opts.forests {
            if f.len() != forest_count {
                return Err(Error::shape(format!("expected {forest_count} forests, got {}", f.len())));
            }
            if let Some(bad) = f.iter().find(|t| t.shape() != [n, n]) {
                return Err(Error::shape(format!("forest shape {:?} for {n} tokens", bad.shape())));
            }
        }
        let explainer = match opts.pruning {
            Pruning::Disabled => None,
            Pruning::Causal { explainer, beta } => {
                check_unit_interval("beta", beta)?;
                Some((explainer.bind(tape, false), beta))
            }
        };

        let x = self.encoder.embed(tape, store, &ex.token_ids)?;
        let h0 = self.encoder.bilstm_encode(tape, store, x)?;
        let pw = tape.param(store, self.proj_w);
        let pb = tape.param(store, self.proj_b);
        let proj = tape.matmul(h0, pw)?;
        let mut h = tape.add_row(proj, pb)?;

        let syntactic = if opts.forests.is_none() {
            let table = tape.param(store, self.type_table);
            Some(type_scores(tape, table, &ex.adjacency)?)
        } else {
            None
        };

        let mut trace = Forward {
            logits: h,
            loss: None,
            h0,
            forests: Vec::with_capacity(forest_count),
            pruned: Vec::with_capacity(forest_count),
            explanations: Vec::new(),
            explainer_inputs: Vec::new(),
            output: h,
        };

        for (b, block) in self.blocks.iter().enumerate() {
            let mut head_outputs = Vec::with_capacity(block.heads.len());
            for (p, hp) in block.heads.iter().enumerate() {
                let f = match (opts.forests, syntactic) {
                    (Some(given), _) => tape.constant(given[b * self.cfg.graph.heads + p].clone()),
                    (None, Some(c)) => {
                        let wq = tape.param(store, hp.wq);
                        let wk = tape.param(store, hp.wk);
                        let a = semantic_matrix(tape, h, wq, wk)?;
                        fuse_gate(tape, a, c, self.cfg.alpha)?
                    }
                    (None, None) => unreachable!("syntactic scores exist whenever forests are generated"),
                };
                let f_hat = match &explainer {
                    None => tape.row_softmax(f)?,
                    Some((vars, beta)) => {
                        let xm = vars.explain(tape, f, h0)?;
                        trace.explanations.push(xm);
                        trace.explainer_inputs.push(h0);
                        causal_prune(tape, f, xm, *beta)?
                    }
                };
                trace.forests.push(f);
                trace.pruned.push(f_hat);
                let layers = hp.stack.bind(tape, store);
                head_outputs.push(encode_forest(tape, f_hat, h, &layers)?);
            }
            let fw = tape.param(store, block.fuse_w);
            let fb = tape.param(store, block.fuse_b);
            h = fuse_heads(tape, &head_outputs, fw, fb)?;
        }
        trace.output = h;

        let hs = pool_sentence(tape, h)?;
        let he = ex
            .mentions
            .iter()
            .map(|m| pool_entity(tape, h, m))
            .collect::<Result<Vec<_>>>()?;
        trace.logits = self.head.logits(tape, store, hs, &he)?;
        if let Some(g) = ex.gold {
            trace.loss = Some(tape.cross_entropy(trace.logits, g)?);
        }
        Ok(trace)
    }

    pub fn forward(&self, tape: &mut Tape, ex: &Example, opts: ForwardOptions<'_>) -> Result<Forward> {
        self.forward_with(&self.store, tape, ex, opts)
    }

    pub fn predict(&self, ex: &Example, opts: ForwardOptions<'_>) -> Result<PredictionOutput> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, ex, opts)?;
        let logits = tape.value(fw.logits).values().to_vec();
        Ok(PredictionOutput {
            predicted: argmax(&logits),
            logits,
            loss: fw.loss.map(|l| tape.value(l).values()[0]),
        })
    }

    /// Cross-entropy of the gold label; requires `ex.gold`.
    pub fn loss(&self, ex: &Example, opts: ForwardOptions<'_>) -> Result<f64> {
        self.predict(ex, opts)?
            .loss
            .ok_or_else(|| Error::config(format!("instance {} has no gold label", ex.id)))
    }

    /// Runs forward and backward, adding this example's gradient to the store.
    pub fn accumulate_gradient(&mut self, ex: &Example, opts: ForwardOptions<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, ex, opts)?;
        let loss = fw
            .loss
            .ok_or_else(|| Error::config(format!("instance {} has no gold label", ex.id)))?;
        let value = tape.value(loss).values()[0];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {value} on instance {}", ex.id)));
        }
        tape.backward(loss, &mut self.store)?;
        Ok(value)
    }

    /// Forest values `F^p` of one unpruned forward pass, block-major, plus `H_0`.
    pub fn forests(&self, ex: &Example) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, ex, ForwardOptions::unpruned())?;
        let forests = fw.forests.iter().map(|&f| tape.value(f).clone()).collect();
        Ok((forests, tape.value(fw.h0).clone()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticConfig};

    pub(crate) fn tiny_setup(heads: usize, blocks: usize) -> (Model, Vec<Example>) {
        let corpus = gen_synthetic(&SyntheticConfig {
            num_instances: 6,
            min_len: 4,
            max_len: 6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let vocabs = Vocabs::from_training(&corpus.instances, corpus.labels.clone());
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                vocab_size: vocabs.words.len(),
                embed_dim: 4,
                hidden_dim: 3,
            },
            graph: DcgcnConfig { layers: 2, heads, blocks, dim: 4 },
            num_types: vocabs.types.len(),
            num_labels: vocabs.labels.len(),
            entities: 2,
            alpha: 0.5,
        };
        let model = Model::new(cfg, 3).unwrap();
        let examples = corpus
            .instances
            .iter()
            .map(|i| Example::new(i, &vocabs).unwrap())
            .collect();
        (model, examples)
    }

    #[test]
    fn parameter_layout() {
        let (model, _) = tiny_setup(2, 2);
        let names: Vec<&str> = model.store().names().collect();
        assert_eq!(names[0], "embed.table");
        assert!(names.contains(&"block1.head1.gcn1.w"));
        assert!(names.contains(&"block0.fuse.w"));
        assert_eq!(model.store().by_name("block0.head0.gcn1.w").unwrap().shape(), &[6, 2]);
        assert_eq!(*names.last().unwrap(), "head.out.b");
    }

    #[test]
    fn forward_shapes_and_stochastic_forests() {
        let (model, examples) = tiny_setup(2, 2);
        for ex in &examples {
            let mut tape = Tape::new();
            let fw = model.forward(&mut tape, ex, ForwardOptions::unpruned()).unwrap();
            assert_eq!(fw.forests.len(), 4);
            assert_eq!(tape.value(fw.output).shape(), &[ex.len(), 4]);
            assert_eq!(tape.value(fw.logits).shape(), &[1, 2]);
            for &f in fw.forests.iter().chain(&fw.pruned) {
                for r in 0..ex.len() {
                    let s: f64 = tape.value(f).row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn supplied_forests_reproduce_generated_ones() {
        let (model, examples) = tiny_setup(2, 2);
        let ex = &examples[0];
        let (forests, _) = model.forests(ex).unwrap();
        let plain = model.predict(ex, ForwardOptions::unpruned()).unwrap();
        let supplied = model
            .predict(
                ex,
                ForwardOptions {
                    pruning: Pruning::Disabled,
                    forests: Some(&forests),
                },
            )
            .unwrap();
        assert_eq!(plain, supplied);
        let wrong = &forests[..1];
        assert!(model
            .predict(ex, ForwardOptions { pruning: Pruning::Disabled, forests: Some(wrong) })
            .is_err());
    }

    #[test]
    fn entity_count_mismatch_is_config_error() {
        let (model, examples) = tiny_setup(1, 1);
        let mut ex = examples[0].clone();
        ex.mentions.push(vec![0]);
        assert!(matches!(model.predict(&ex, ForwardOptions::unpruned()), Err(Error::Config(_))));
    }

    #[test]
    fn single_block_is_one_block_application() {
        let (model, examples) = tiny_setup(2, 1);
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, &examples[1], ForwardOptions::unpruned()).unwrap();
        assert_eq!(fw.forests.len(), 2);
    }
}

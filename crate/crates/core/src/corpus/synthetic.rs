//! Synthetic corpus with a planted, label-determining token pair.
//!
//! Every instance carries one `ta<i>` and one `tb<j>` trigger token; the gold
//! class is `(i + j) mod m`, so neither trigger alone says anything about the
//! label. Class 0 is named `None`, the rest `R1..R<m-1>`. The dependency tree is
//! a random projective tree that links the two triggers directly in about half
//! of the instances.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EntityMention, Instance, LabelVocab};
use crate::error::{Error, Result};

const DEPRELS: [&str; 8] = ["nsubj", "dobj", "amod", "nmod", "det", "advmod", "conj", "case"];
const ENTITY_VARIANTS: usize = 4;
const MAX_TREE_TRIES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_instances: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 40,
            min_len: 6,
            max_len: 10,
            num_instances: 500,
            num_classes: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("synthetic vocab_size must be at least 8"));
        }
        if self.min_len < 4 {
            return Err(Error::config("synthetic sentences need at least 4 tokens"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("synthetic max_len < min_len"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("synthetic corpus needs at least 2 classes"));
        }
        if self.num_instances == 0 {
            return Err(Error::config("synthetic corpus needs at least one instance"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub instances: Vec<Instance>,
    pub labels: LabelVocab,
    /// Instance id → trigger token positions `(low, high)`.
    pub planted: BTreeMap<String, (usize, usize)>,
}

pub fn class_name(c: usize) -> String {
    if c == 0 {
        "None".to_string()
    } else {
        format!("R{c}")
    }
}

/// Recomputes the gold class from the trigger tokens, or `None` if the tokens
/// do not hold exactly one trigger pair.
pub fn synthetic_label(tokens: &[String], num_classes: usize) -> Option<usize> {
    let find = |prefix: &str| -> Option<usize> {
        let mut hits = tokens.iter().filter_map(|t| t.strip_prefix(prefix)?.parse::<usize>().ok());
        let first = hits.next()?;
        hits.next().is_none().then_some(first)
    };
    Some((find("ta")? + find("tb")?) % num_classes)
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let m = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = LabelVocab::new((0..m).map(class_name).collect())?;
    let mut instances = Vec::with_capacity(cfg.num_instances);
    let mut planted = BTreeMap::new();

    for k in 0..cfg.num_instances {
        let id = format!("syn{k:05}");
        // round-robin classes keep the label distribution balanced
        let class = k % m;
        let a = rng.gen_range(0..m);
        let b = (class + m - a) % m;

        let n = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(&mut rng);
        let (e1, e2, ta, tb) = (positions[0], positions[1], positions[2], positions[3]);

        let mut tokens: Vec<String> = (0..n)
            .map(|_| format!("w{}", rng.gen_range(0..cfg.vocab_size)))
            .collect();
        tokens[e1] = format!("chem{}", rng.gen_range(0..ENTITY_VARIANTS));
        tokens[e2] = format!("gene{}", rng.gen_range(0..ENTITY_VARIANTS));
        tokens[ta] = format!("ta{a}");
        tokens[tb] = format!("tb{b}");

        let want_direct = rng.gen_bool(0.5);
        let mut heads = None;
        for _ in 0..MAX_TREE_TRIES {
            let h = random_projective_tree(n, &mut rng);
            let direct = h[ta] == tb as i64 || h[tb] == ta as i64;
            if direct == want_direct {
                heads = Some(h);
                break;
            }
        }
        let heads = heads.ok_or_else(|| Error::config("could not place trigger pair in a tree"))?;
        let deprels = heads
            .iter()
            .map(|&h| {
                if h < 0 {
                    "root".to_string()
                } else {
                    DEPRELS[rng.gen_range(0..DEPRELS.len())].to_string()
                }
            })
            .collect();

        planted.insert(id.clone(), (ta.min(tb), ta.max(tb)));
        let inst = Instance {
            id,
            tokens,
            sentence_breaks: vec![0],
            heads,
            deprels,
            entities: vec![
                EntityMention { role: 1, token_indices: vec![e1] },
                EntityMention { role: 2, token_indices: vec![e2] },
            ],
            relation: class_name(class),
        };
        inst.validate()?;
        instances.push(inst);
    }
    Ok(SyntheticCorpus {
        instances,
        labels,
        planted,
    })
}

/// Heads of a uniformly-rooted recursive projective tree over `n` tokens.
fn random_projective_tree<R: Rng>(n: usize, rng: &mut R) -> Vec<i64> {
    let mut heads = vec![-1; n];
    let mut stack = vec![(0, n, -1i64)];
    while let Some((lo, hi, parent)) = stack.pop() {
        if lo >= hi {
            continue;
        }
        let root = rng.gen_range(lo..hi);
        heads[root] = parent;
        stack.push((lo, root, root as i64));
        stack.push((root + 1, hi, root as i64));
    }
    heads
}

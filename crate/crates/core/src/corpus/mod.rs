//! Relation-extraction instances, vocabularies and dependency adjacency.

mod folds;
mod synthetic;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{split_folds, Fold};
pub use synthetic::{gen_synthetic, synthetic_label, SyntheticConfig, SyntheticCorpus};

/// Type id of "no edge".
pub const NONE_TYPE: usize = 0;
/// Type id of the self-loop on the diagonal.
pub const SELF_TYPE: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMention {
    pub role: usize,
    pub token_indices: Vec<usize>,
}

/// One annotated example: a token sequence (possibly several sentences), its
/// dependency heads and relation types, the entity mentions and the gold label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub sentence_breaks: Vec<usize>,
    pub heads: Vec<i64>,
    pub deprels: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub relation: String,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entity mentions ordered by role.
    pub fn mentions_by_role(&self) -> Vec<&EntityMention> {
        let mut m: Vec<&EntityMention> = self.entities.iter().collect();
        m.sort_by_key(|e| e.role);
        m
    }

    /// Sentence span `[start, end)` containing token `i`.
    fn span_of(&self, i: usize) -> (usize, usize) {
        let n = self.len();
        let k = self.sentence_breaks.partition_point(|&b| b <= i);
        let start = self.sentence_breaks[k - 1];
        let end = self.sentence_breaks.get(k).copied().unwrap_or(n);
        (start, end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Invalid {
            id: self.id.clone(),
            msg,
        };
        let n = self.len();
        if n == 0 {
            return Err(bad("no tokens".into()));
        }
        if self.heads.len() != n {
            return Err(bad(format!("heads has {} entries for {n} tokens", self.heads.len())));
        }
        if self.deprels.len() != n {
            return Err(bad(format!("deprels has {} entries for {n} tokens", self.deprels.len())));
        }
        if self.sentence_breaks.first() != Some(&0) {
            return Err(bad("sentence_breaks must start with 0".into()));
        }
        if self.sentence_breaks.windows(2).any(|w| w[0] >= w[1])
            || self.sentence_breaks.iter().any(|&b| b >= n)
        {
            return Err(bad("sentence_breaks must be strictly increasing and < n".into()));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == i as i64 {
                return Err(bad(format!("heads[{i}] self-reference")));
            }
            if h < -1 || h >= n as i64 {
                return Err(bad(format!("heads[{i}] = {h} out of range")));
            }
            if h >= 0 {
                let (s, e) = self.span_of(i);
                if !(s..e).contains(&(h as usize)) {
                    return Err(bad(format!("heads[{i}] crosses a sentence break")));
                }
            }
        }
        for (k, &start) in self.sentence_breaks.iter().enumerate() {
            let end = self.sentence_breaks.get(k + 1).copied().unwrap_or(n);
            let roots = (start..end).filter(|&i| self.heads[i] == -1).count();
            if roots != 1 {
                return Err(bad(format!("sentence starting at {start} has {roots} roots")));
            }
        }
        for i in 0..n {
            let mut cur = i;
            let mut steps = 0;
            while self.heads[cur] >= 0 {
                cur = self.heads[cur] as usize;
                steps += 1;
                if steps > n {
                    return Err(bad(format!("head cycle through token {i}")));
                }
            }
        }
        let q = self.entities.len();
        if !(2..=3).contains(&q) {
            return Err(bad(format!("expected 2 or 3 entity mentions, got {q}")));
        }
        let mut roles: Vec<usize> = self.entities.iter().map(|e| e.role).collect();
        roles.sort_unstable();
        if roles != (1..=q).collect::<Vec<_>>() {
            return Err(bad(format!("entity roles must be 1..={q}, got {roles:?}")));
        }
        for e in &self.entities {
            if e.token_indices.is_empty() {
                return Err(bad(format!("entity {} has no tokens", e.role)));
            }
            if e.token_indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad(format!("entity {} indices not strictly increasing", e.role)));
            }
            if let Some(&i) = e.token_indices.iter().find(|&&i| i >= n) {
                return Err(bad(format!("entity {} index {i} out of range", e.role)));
            }
        }
        Ok(())
    }
}

/// Relation labels in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVocab {
    labels: Vec<String>,
}

impl LabelVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut v = LabelVocab::default();
        for l in labels {
            if v.index(&l).is_some() {
                return Err(Error::Vocab(format!("duplicate label {l}")));
            }
            v.labels.push(l);
        }
        Ok(v)
    }

    pub fn insert(&mut self, label: &str) -> usize {
        match self.index(label) {
            Some(i) => i,
            None => {
                self.labels.push(label.to_string());
                self.labels.len() - 1
            }
        }
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn require(&self, label: &str) -> Result<usize> {
        self.index(label)
            .ok_or_else(|| Error::Vocab(format!("unknown relation label {label}")))
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Dependency-type vocabulary; id 0 is "none" and id 1 is "self".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeVocab {
    types: Vec<String>,
}

impl Default for TypeVocab {
    fn default() -> Self {
        TypeVocab {
            types: vec!["none".to_string(), "self".to_string()],
        }
    }
}

impl TypeVocab {
    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut v = TypeVocab::default();
        for inst in instances {
            for (rel, &h) in inst.deprels.iter().zip(&inst.heads) {
                if h >= 0 && v.id(rel).is_none() {
                    v.types.push(rel.clone());
                }
            }
        }
        v
    }

    pub fn from_list(types: Vec<String>) -> Result<Self> {
        if types.len() < 2 || types[0] != "none" || types[1] != "self" {
            return Err(Error::Vocab("type vocabulary must start with none, self".into()));
        }
        Ok(TypeVocab { types })
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }
}

/// Word vocabulary; id 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordVocab {
    fn from(words: Vec<String>) -> Self {
        WordVocab::from_list(words)
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

impl WordVocab {
    pub const UNK: &'static str = "<unk>";

    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut v = WordVocab::from_list(vec![Self::UNK.to_string()]);
        for inst in instances {
            for t in &inst.tokens {
                if !v.index.contains_key(t) {
                    v.index.insert(t.clone(), v.words.len());
                    v.words.push(t.clone());
                }
            }
        }
        v
    }

    pub fn from_list(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordVocab { words, index }
    }

    /// Token ids, with unknown words folded to 0.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Symmetric `n x n` matrix of dependency-type ids with "self" on the diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypedAdjacency {
    n: usize,
    ids: Vec<usize>,
}

impl TypedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.ids[i * self.n + j]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != NONE_TYPE
    }
}

/// Unoriented typed adjacency of the dependency tree(s), with self-loops.
pub fn build_typed_adjacency(inst: &Instance, types: &TypeVocab) -> Result<TypedAdjacency> {
    let n = inst.len();
    let mut ids = vec![NONE_TYPE; n * n];
    for i in 0..n {
        ids[i * n + i] = SELF_TYPE;
    }
    for (i, &h) in inst.heads.iter().enumerate() {
        if h < 0 {
            continue;
        }
        let j = h as usize;
        let t = types
            .id(&inst.deprels[i])
            .ok_or_else(|| Error::Vocab(format!("unknown dependency type {}", inst.deprels[i])))?;
        ids[i * n + j] = t;
        ids[j * n + i] = t;
    }
    Ok(TypedAdjacency { n, ids })
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub instances: Vec<Instance>,
    pub labels: LabelVocab,
    /// `(line number, message)` for every line skipped in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

/// Reads one instance per line. Blank lines are ignored. In strict mode the
/// first bad line aborts; otherwise bad lines are skipped and recorded.
pub fn parse_jsonl<R: BufRead>(reader: R, strict: bool) -> Result<ParsedCorpus> {
    let mut out = ParsedCorpus::default();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Instance>(&line)
            .map_err(|e| e.to_string())
            .and_then(|inst| inst.validate().map(|_| inst).map_err(|e| e.to_string()));
        match parsed {
            Ok(inst) => {
                out.labels.insert(&inst.relation);
                out.instances.push(inst);
            }
            Err(msg) if strict => return Err(Error::Parse { line: line_no, msg }),
            Err(msg) => out.skipped.push((line_no, msg)),
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(instances: &[Instance], mut w: W) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"id":"a","tokens":["x","y"],"heads":[-1,0],"deprels":["root","dobj"],"entities":[{"role":1,"token_indices":[0]},{"role":2,"token_indices":[1]}],"relation":"R1","sentence_breaks":[0]}"#;

    fn inst(heads: Vec<i64>, deprels: &[&str]) -> Instance {
        let n = heads.len();
        Instance {
            id: "t".into(),
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            sentence_breaks: vec![0],
            heads,
            deprels: deprels.iter().map(|s| s.to_string()).collect(),
            entities: vec![
                EntityMention { role: 1, token_indices: vec![0] },
                EntityMention { role: 2, token_indices: vec![n - 1] },
            ],
            relation: "R".into(),
        }
    }

    #[test]
    fn minimal_record_parses() {
        let c = parse_jsonl(MINIMAL.as_bytes(), true).unwrap();
        assert_eq!(c.instances.len(), 1);
        assert_eq!(c.labels.labels(), ["R1"]);
    }

    #[test]
    fn self_head_rejected() {
        let line = MINIMAL.replace("[-1,0]", "[0,1]");
        let err = parse_jsonl(line.as_bytes(), true).unwrap_err();
        assert!(err.to_string().contains("heads[0] self-reference"), "{err}");
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn lenient_mode_skips_and_counts() {
        let mut lines = Vec::new();
        for i in 0..10 {
            let l = MINIMAL.replace("\"a\"", &format!("\"i{i}\""));
            lines.push(match i {
                3 => l.replace("[-1,0]", "[1,0]"),
                7 => "{not json".to_string(),
                _ => l,
            });
        }
        let text = lines.join("\n");
        let c = parse_jsonl(text.as_bytes(), false).unwrap();
        assert_eq!(c.instances.len(), 8);
        assert_eq!(c.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), [4, 8]);
        assert!(parse_jsonl(text.as_bytes(), true).is_err());
    }

    #[test]
    fn validation_errors() {
        let mut i = inst(vec![-1, 0], &["root", "dobj"]);
        i.entities[1].token_indices = vec![5];
        assert!(i.validate().unwrap_err().to_string().contains("out of range"));
        let i = inst(vec![-1, 2, 1], &["root", "a", "b"]);
        assert!(i.validate().unwrap_err().to_string().contains("cycle"));
        let i = inst(vec![-1, -1], &["root", "root"]);
        assert!(i.validate().unwrap_err().to_string().contains("2 roots"));
        let mut i = inst(vec![-1, 0, -1, 2], &["root", "a", "root", "b"]);
        i.sentence_breaks = vec![0, 2];
        i.validate().unwrap();
        i.heads[1] = 2;
        assert!(i.validate().unwrap_err().to_string().contains("crosses"));
        let line = MINIMAL.replace(",\"relation\":\"R1\"", "");
        assert!(parse_jsonl(line.as_bytes(), true).unwrap_err().to_string().contains("relation"));
    }

    #[test]
    fn adjacency_two_tokens() {
        let i = inst(vec![-1, 0], &["root", "dobj"]);
        let types = TypeVocab::from_instances([&i]);
        let adj = build_typed_adjacency(&i, &types).unwrap();
        let dobj = types.id("dobj").unwrap();
        assert_eq!(dobj, 2);
        assert_eq!(adj.ids(), &[SELF_TYPE, dobj, dobj, SELF_TYPE]);
    }

    #[test]
    fn adjacency_single_and_star() {
        let i = inst(vec![-1], &["root"]);
        let types = TypeVocab::from_instances([&i]);
        assert_eq!(build_typed_adjacency(&i, &types).unwrap().ids(), &[SELF_TYPE]);

        let i = inst(vec![-1, 0, 0], &["root", "a", "b"]);
        let types = TypeVocab::from_instances([&i]);
        let adj = build_typed_adjacency(&i, &types).unwrap();
        let (a, b) = (types.id("a").unwrap(), types.id("b").unwrap());
        // hand enumeration of all 9 cells
        let expected = [SELF_TYPE, a, b, a, SELF_TYPE, NONE_TYPE, b, NONE_TYPE, SELF_TYPE];
        assert_eq!(adj.ids(), &expected);
    }

    #[test]
    fn multi_sentence_is_block_diagonal() {
        let mut i = inst(vec![-1, 0, 3, -1], &["root", "a", "b", "root"]);
        i.sentence_breaks = vec![0, 2];
        i.validate().unwrap();
        let types = TypeVocab::from_instances([&i]);
        let adj = build_typed_adjacency(&i, &types).unwrap();
        for r in 0..2 {
            for c in 2..4 {
                assert!(!adj.is_edge(r, c) && !adj.is_edge(c, r));
            }
        }
        assert!(adj.is_edge(2, 3));
    }

    #[test]
    fn unknown_type_is_vocab_error() {
        let i = inst(vec![-1, 0], &["root", "dobj"]);
        let types = TypeVocab::default();
        assert!(matches!(build_typed_adjacency(&i, &types), Err(Error::Vocab(_))));
    }

    #[test]
    fn word_vocab_folds_unknowns() {
        let i = inst(vec![-1, 0], &["root", "dobj"]);
        let v = WordVocab::from_instances([&i]);
        assert_eq!(v.encode(&["w1".into(), "zzz".into(), "w0".into()]), [2, 0, 1]);
    }
}

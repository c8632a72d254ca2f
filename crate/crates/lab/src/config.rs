//! `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment. Unknown keys and repeated
//! keys are rejected. `--set key=value` overrides are applied on top.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::fsutil;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed (default 0)"),
    ("precision", "f32 | f64 (default f32)"),
    ("tag", "run tag written in run files (default lftlab)"),
    ("model", "mono | twin | colbert"),
    ("binding", "cross | siamese | semi_siamese | hetero_full"),
    ("ss.prefix", "average | concat | none | off (default: suggested variant)"),
    ("ss.prefix.common_len", "common positions of the concat variant (default 5)"),
    ("ss.lora", "shared_q | shared_v | hetero_both | off (default: suggested variant)"),
    ("lft.method", "full | prompt | prefix | lora | lora_plus | hybrid"),
    ("lft.prompt_len", "prompt slots (default 10)"),
    ("lft.prefix_len", "prefix slots (default 10)"),
    ("lft.prefix_source_dim", "prefix source embedding width (default 768)"),
    ("lft.prefix_mlp_hidden", "prefix MLP hidden width (default 256)"),
    ("lft.lora_rank", "LoRA rank (default 16)"),
    ("lft.lora_alpha", "LoRA alpha (default 32)"),
    ("lft.lora_dropout", "LoRA input dropout (default 0.1)"),
    ("lft.hybrid.first", "first hybrid member: prompt | prefix | lora | lora_plus"),
    ("lft.hybrid.second", "second hybrid member"),
    ("lft.hybrid.mode", "sequential | concurrent (default sequential)"),
    ("lft.hybrid.m", "first-stage epochs (default 30)"),
    ("lft.hybrid.n", "second-stage epochs (default 10)"),
    ("encoder.preset", "bert_base | custom (default custom)"),
    ("encoder.layers", "encoder layers"),
    ("encoder.dim", "model width"),
    ("encoder.heads", "attention heads"),
    ("encoder.ffn_dim", "feed-forward width (default 4 × dim)"),
    ("encoder.vocab_size", "vocabulary size (default: size of the built vocabulary)"),
    ("encoder.max_seq_len", "maximum sequence length, slots included (default 64)"),
    ("encoder.dropout", "dropout rate (default 0.1)"),
    ("ranker.colbert_dim", "ColBERT projection width (default 32)"),
    ("count.convention", "retained | optimizer (default retained)"),
    ("train.lr_ranker", "ranker learning rate (default 1e-4)"),
    ("train.lr_encoder", "encoder learning rate, full fine-tuning (default 2e-5)"),
    ("train.lr_prefix", "prompt/prefix learning rate (default 1e-4)"),
    ("train.lr_lora", "LoRA learning rate (default 1e-4)"),
    ("train.batch_size", "triplets per batch (default 16)"),
    ("train.max_epochs", "epochs of non-hybrid methods (default 30)"),
    ("train.val_k", "validation P@k cutoff (default 10)"),
    ("train.n_folds", "cross-validation folds (default 5)"),
    ("train.fold", "rotation: test fold r, validation fold r+1 (default 0)"),
    ("pretrain.steps", "masked-token pre-training steps (default 500)"),
    ("pretrain.batch_size", "sequences per pre-training step (default 8)"),
    ("pretrain.mask_prob", "masking probability (default 0.15)"),
    ("pretrain.lr", "pre-training learning rate (default 1e-3)"),
    ("corpus.n_topics", "topics (default 5)"),
    ("corpus.n_docs", "documents (default 200)"),
    ("corpus.n_queries", "queries (default 40)"),
    ("corpus.candidates_per_query", "candidates per query (default 20)"),
    ("corpus.regime", "short | long (default short)"),
    ("corpus.doc_len_mean", "mean document length (default 24)"),
    ("corpus.doc_len_spread", "document length deviation (default 6)"),
    ("corpus.vocab_size", "distinct content words (default 300)"),
    ("corpus.relevant_fraction", "relevant share of candidates (default 0.4)"),
    ("corpus.query_side_fraction", "share of topic words used by queries (default 0.1)"),
    ("corpus.query_word_rate", "chance a document word is query-side (default 0)"),
    ("corpus.triplets_per_query", "triplets per query (default 16)"),
    ("vocab.size", "vocabulary cap, reserved ids included (default 30522)"),
    ("paths.data", "directory with documents.tsv, queries.tsv, qrels.txt, candidates.tsv, triplets.tsv"),
    ("paths.encoder", "pre-trained encoder checkpoint"),
    ("paths.model", "trained model checkpoint"),
    ("eval.k", "metric cutoff (default 10)"),
    ("eval.split", "test | val | train | all (default test)"),
];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{}:{}", path.display(), i + 1);
            match split_pair(line) {
                None => problems.push(format!("{at}: expected `key = value`, found `{raw}`")),
                Some((k, _)) if !known(k) => problems.push(format!("{at}: unknown key `{k}`")),
                Some((k, v)) => {
                    if cfg.values.insert(k.into(), v.into()).is_some() {
                        problems.push(format!("{at}: key `{k}` set twice"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(LabError::Config(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_to_string(path)?, path)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_pair(assignment)
            .ok_or_else(|| LabError::Config(format!("--set expects key=value, found `{assignment}`")))?;
        if !known(k) {
            return Err(LabError::Config(format!("--set: unknown key `{k}`")));
        }
        self.values.insert(k.into(), v.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "undeclared key {key}");
        self.values.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Fails listing every key in `keys` that is not set.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing: Vec<&str> = keys.iter().copied().filter(|k| self.get(k).is_none()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(format!("missing required keys: {}", missing.join(", "))))
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn parsed<N: FromStr>(&self, key: &str) -> Result<Option<N>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| LabError::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn parsed_or<N: FromStr>(&self, key: &str, default: N) -> Result<N> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// A value from a fixed set of choices.
    pub fn choice<'a>(&'a self, key: &str, choices: &[&str], default: Option<&'a str>) -> Result<&'a str> {
        let v = self
            .get(key)
            .or(default)
            .ok_or_else(|| LabError::Config(format!("missing required keys: {key}")))?;
        if choices.contains(&v) {
            Ok(v)
        } else {
            Err(LabError::Config(format!("key `{key}`: `{v}` is not one of {}", choices.join(" | "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("exp.cfg")
    }

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = ExperimentConfig::parse("# comment\nmodel = colbert  # trailing\n\nseed=3\n", p()).unwrap();
        assert_eq!(c.get("model"), Some("colbert"));
        assert_eq!(c.parsed_or("seed", 0u64).unwrap(), 3);
        c.set("seed=9").unwrap();
        assert_eq!(c.parsed_or("seed", 0u64).unwrap(), 9);
        assert!(c.set("nonsense=1").is_err());
    }

    #[test]
    fn unknown_keys_are_reported_with_lines() {
        let e = ExperimentConfig::parse("model = twin\nmodle = x\nfoo = 1\n", p()).unwrap_err().to_string();
        assert!(e.contains("exp.cfg:2: unknown key `modle`"), "{e}");
        assert!(e.contains("exp.cfg:3: unknown key `foo`"), "{e}");
    }

    #[test]
    fn missing_keys_are_reported_together() {
        let c = ExperimentConfig::parse("model = twin\n", p()).unwrap();
        let e = c.require(&["model", "binding", "lft.method"]).unwrap_err().to_string();
        assert!(e.contains("binding, lft.method"), "{e}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let c = ExperimentConfig::parse("train.batch_size = many\nmodel = bert\n", p()).unwrap();
        let e = c.parsed::<usize>("train.batch_size").unwrap_err().to_string();
        assert!(e.contains("train.batch_size"));
        let e = c.choice("model", &["mono", "twin", "colbert"], None).unwrap_err().to_string();
        assert!(e.contains("`model`"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2\n", p()).is_err());
    }
}

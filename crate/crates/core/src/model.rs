//! A ranking model: encoder copy, adapters, tower binding and scoring head
//! in one parameter store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::special;
use crate::encoder::{self, EncoderConfig, TokenSequence};
use crate::eval::{rerank_scores, RunRecord};
use crate::lft::{self, FreezePlan, LftSpec};
use crate::rankers::{self, DocCache, Rep, RankerKind, RepVars};
use crate::tensor::{Graph, ParamStore, Scalar, Var};
use crate::towers::{self, Tower, TowerBinding};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ranker: RankerKind,
    pub binding: TowerBinding,
    pub lft: LftSpec,
    pub colbert_dim: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, ranker: RankerKind, binding: TowerBinding, lft: LftSpec) -> Result<Self> {
        let c = Self {
            encoder,
            ranker,
            binding,
            lft,
            colbert_dim: rankers::DEFAULT_COLBERT_DIM,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.lft.validate(&self.encoder)?;
        self.binding.validate(&self.lft)?;
        match (self.ranker, self.binding.is_bi_encoder()) {
            (RankerKind::Mono, true) => Err(Error::Config("the mono ranker needs the cross binding".into())),
            (RankerKind::Twin | RankerKind::ColBert, false) => {
                Err(Error::Config("twin and colbert rankers need a bi-encoder binding".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> RankingModel<T> {
    /// Copies the encoder from `base`, then adds adapters and a fresh head.
    /// Trainability follows the method's freeze plan.
    pub fn new(config: ModelConfig, base: &ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let roots: &[&str] = if matches!(config.binding, TowerBinding::HeteroFullBi) {
            &["", "doc."]
        } else {
            &[""]
        };
        for (local, shape) in encoder::parameter_shapes(&config.encoder) {
            let t = base
                .get(&local)
                .map_err(|_| Error::Config(format!("base encoder lacks `{local}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load base encoder",
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
            for root in roots {
                store.insert(encoder::param_name(root, &local), t.clone(), true)?;
            }
        }
        lft::init_adapters(&config.lft, &config.binding, &config.encoder, seed, &mut store)?;
        rankers::init_head(config.ranker, config.encoder.dim(), config.colbert_dim, seed, &mut store)?;
        let mut model = Self { config, store };
        model.freeze_plan().apply(&mut model.store);
        Ok(model)
    }

    /// Ranker plus every parameter owned by the method (all hybrid members).
    pub fn freeze_plan(&self) -> FreezePlan {
        lft::build_freeze_plan(&self.config.lft, &self.store)
    }

    pub fn slots(&self) -> usize {
        self.config.lft.slot_len()
    }

    /// `[CLS] words [SEP]`, truncated to leave room for slots.
    pub fn single_sequence(&self, words: &[u32]) -> Result<TokenSequence> {
        let budget = self
            .config
            .encoder
            .max_seq_len()
            .saturating_sub(self.slots() + 2);
        let mut ids = Vec::with_capacity(words.len().min(budget) + 2);
        ids.push(special::CLS);
        ids.extend_from_slice(&words[..words.len().min(budget)]);
        ids.push(special::SEP);
        TokenSequence::from_ids(ids)
    }

    /// `[CLS] q [SEP] d [SEP]` with segment ids 0 then 1; the query keeps at most half of the budget.
    pub fn pair_sequence(&self, query: &[u32], doc: &[u32]) -> Result<TokenSequence> {
        let budget = self
            .config
            .encoder
            .max_seq_len()
            .saturating_sub(self.slots() + 3);
        let q = query.len().min(budget / 2);
        let d = doc.len().min(budget - q);
        let mut ids = Vec::with_capacity(q + d + 3);
        ids.push(special::CLS);
        ids.extend_from_slice(&query[..q]);
        ids.push(special::SEP);
        let first = ids.len();
        ids.extend_from_slice(&doc[..d]);
        ids.push(special::SEP);
        let n = ids.len();
        let mut segments = alloc::vec![0u8; first];
        segments.resize(n, 1);
        TokenSequence::new(ids, alloc::vec![1; n], segments)
    }

    /// One tower's representation of `words`.
    pub fn rep(&self, g: &mut Graph<T>, words: &[u32], tower: Tower) -> Result<RepVars> {
        let seq = self.single_sequence(words)?;
        let c = &self.config;
        let enc = towers::encode_tower(g, &self.store, &c.binding, &c.lft, &c.encoder, &seq, tower)?;
        let last = enc.last();
        let cls = g.slice_rows(last, enc.slots, 1)?;
        let tokens = match c.ranker {
            RankerKind::ColBert => {
                let rows = rankers::scored_rows(enc.slots, seq.real_len());
                Some(rankers::colbert_project(g, &self.store, last, &rows)?)
            }
            _ => None,
        };
        Ok(RepVars { cls, tokens })
    }

    pub fn rep_values(&self, words: &[u32], tower: Tower) -> Result<Rep<T>> {
        let mut g = Graph::new();
        let r = self.rep(&mut g, words, tower)?;
        Ok(r.values(&g))
    }

    /// Relevance score of a (query, document) pair on the tape.
    pub fn score(&self, g: &mut Graph<T>, query: &[u32], doc: &[u32]) -> Result<Var> {
        let c = &self.config;
        if c.binding.is_bi_encoder() {
            let q = self.rep(g, query, Tower::Query)?;
            let d = self.rep(g, doc, Tower::Document)?;
            rankers::score_reps(g, &self.store, c.ranker, q, d)
        } else {
            let seq = self.pair_sequence(query, doc)?;
            let enc = towers::encode_joint(g, &self.store, &c.binding, &c.lft, &c.encoder, &seq)?;
            let last = enc.last();
            rankers::score_mono(g, &self.store, last, enc.slots)
        }
    }

    /// Scores of one query against two documents, sharing the query tower pass.
    pub fn score_pair(&self, g: &mut Graph<T>, query: &[u32], pos: &[u32], neg: &[u32]) -> Result<(Var, Var)> {
        let c = &self.config;
        if c.binding.is_bi_encoder() {
            let q = self.rep(g, query, Tower::Query)?;
            let p = self.rep(g, pos, Tower::Document)?;
            let n = self.rep(g, neg, Tower::Document)?;
            Ok((
                rankers::score_reps(g, &self.store, c.ranker, q, p)?,
                rankers::score_reps(g, &self.store, c.ranker, q, n)?,
            ))
        } else {
            Ok((self.score(g, query, pos)?, self.score(g, query, neg)?))
        }
    }

    /// Inference score (dropout off).
    pub fn score_value(&self, query: &[u32], doc: &[u32]) -> Result<T> {
        let mut g = Graph::new();
        let s = self.score(&mut g, query, doc)?;
        Ok(g.scalar(s))
    }

    /// Scores a cached document against a query representation.
    pub fn score_cached(&self, query: &Rep<T>, cache: &DocCache<T>, doc_id: &str) -> Result<T> {
        let d = cache.get(doc_id, self.store.version())?;
        let mut g = Graph::new();
        let qv = query.on_tape(&mut g);
        let dv = d.on_tape(&mut g);
        let s = rankers::score_reps(&mut g, &self.store, self.config.ranker, qv, dv)?;
        Ok(g.scalar(s))
    }

    /// Document-tower representations of `docs`, tied to the current store version.
    pub fn precompute_docs<'a, I>(&self, docs: I) -> Result<DocCache<T>>
    where
        I: IntoIterator<Item = (&'a str, &'a [u32])>,
    {
        if !self.config.binding.is_bi_encoder() {
            return Err(Error::Contract(
                "pre-computation is impossible for cross-encoders: the document is encoded jointly with the query".into(),
            ));
        }
        let mut reps = BTreeMap::new();
        for (id, words) in docs {
            reps.insert(String::from(id), self.rep_values(words, Tower::Document)?);
        }
        Ok(DocCache::new(self.store.version(), reps))
    }

    /// Orders `candidates` for one query. Bi-encoders read documents from `cache`;
    /// cross-encoders read their words from `docs`.
    pub fn rerank(
        &self,
        qid: &str,
        query: &[u32],
        candidates: &[String],
        docs: &BTreeMap<String, Vec<u32>>,
        cache: Option<&DocCache<T>>,
        tag: &str,
    ) -> Result<Vec<RunRecord>> {
        let mut scored = Vec::with_capacity(candidates.len());
        if self.config.binding.is_bi_encoder() {
            let cache = cache.ok_or_else(|| Error::Contract("bi-encoder re-ranking needs a document cache".into()))?;
            let q = self.rep_values(query, Tower::Query)?;
            for id in candidates {
                scored.push((id.clone(), self.score_cached(&q, cache, id)?.as_f64()));
            }
        } else {
            for id in candidates {
                let d = docs.get(id).ok_or_else(|| Error::UnknownDocument(id.clone()))?;
                scored.push((id.clone(), self.score_value(query, d)?.as_f64()));
            }
        }
        Ok(rerank_scores(qid, scored, tag))
    }

    /// Folds shared LoRA adapters into the base weights (their `B` becomes zero).
    pub fn merge_lora(&mut self) -> Result<usize> {
        let c = &self.config;
        lft::merge_lora_into_base(&mut self.store, &c.lft, &c.binding, &c.encoder)
    }

    /// Trainable elements outside the head, as the optimizer sees them.
    pub fn adapter_numel(&self) -> usize {
        self.freeze_plan().adapter_numel(&self.store)
    }
}

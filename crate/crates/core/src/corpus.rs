//! Whitespace tokenizer, vocabulary, and a seeded synthetic retrieval corpus
//! whose topics are disjoint word clusters.
//!
//! Each topic's words are split into a query side and a document side.
//! Queries use only the query side, while documents mostly use the
//! document side, so a ranker has to learn which words go together rather
//! than count exact matches.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::encoder::TokenSequence;
use crate::eval::{Qrels, Triplet};
use crate::tensor::rng;
use crate::{Error, Result};

/// Reserved token ids.
pub mod special {
    pub const PAD: u32 = 0;
    pub const CLS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const MASK: u32 = 3;
    pub const UNK: u32 = 4;
    /// First id handed to a corpus word.
    pub const FIRST_WORD: u32 = 5;

    pub const NAMES: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
}

/// Lowercased words of `text`, split on whitespace and punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocab {
    /// A vocabulary holding the reserved tokens followed by `words` in order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut v = Self {
            tokens: special::NAMES.iter().map(|s| s.to_string()).collect(),
            ids: BTreeMap::new(),
        };
        for (i, t) in v.tokens.iter().enumerate() {
            v.ids.insert(t.clone(), i as u32);
        }
        for w in words {
            if v.ids.contains_key(&w) {
                return Err(Error::Data(format!("duplicate vocabulary entry `{w}`")));
            }
            v.ids.insert(w.clone(), v.tokens.len() as u32);
            v.tokens.push(w);
        }
        Ok(v)
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= special::FIRST_WORD as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Corpus words in id order (reserved tokens excluded).
    pub fn words(&self) -> &[String] {
        &self.tokens[special::FIRST_WORD as usize..]
    }

    /// Word ids of `text` without `[CLS]`/`[SEP]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect()
    }
}

/// Keeps the `size − 5` most frequent words (ties in lexicographic order).
pub fn build_vocab<'a, I: IntoIterator<Item = &'a str>>(texts: I, size: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in words(t) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = size.saturating_sub(special::FIRST_WORD as usize);
    Vocab::from_words(ranked.into_iter().take(keep).map(|(w, _)| w))
}

/// `[CLS] words… [SEP]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids = Vec::with_capacity(8);
    ids.push(special::CLS);
    ids.extend(vocab.encode(text));
    ids.push(special::SEP);
    TokenSequence::from_ids(ids).expect("unpadded sequence")
}

// ------------------------------------------------------------ generator

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryRegime {
    /// Keyword queries, about 2.5 words.
    Short,
    /// Sentence-like queries, about 6 words, padded with function words.
    Long,
}

impl QueryRegime {
    pub fn target_mean(self) -> f64 {
        match self {
            Self::Short => 2.5,
            Self::Long => 6.0,
        }
    }
}

const FUNCTION_WORDS: [&str; 16] = [
    "the", "of", "what", "is", "how", "does", "a", "to", "in", "for", "when", "why", "are", "do", "about", "which",
];
const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pu", "ga", "he"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusConfig {
    pub n_topics: usize,
    pub n_docs: usize,
    pub n_queries: usize,
    pub candidates_per_query: usize,
    pub query_regime: QueryRegime,
    pub doc_len_mean: f64,
    pub doc_len_spread: f64,
    /// Distinct content words (topic clusters plus a shared background pool).
    pub vocab_size: usize,
    /// Share of each candidate list drawn from the query's topic.
    pub relevant_fraction: f64,
    /// Share of each topic's words reserved for queries.
    pub query_side_fraction: f64,
    /// Chance that an on-topic document word comes from the query side.
    pub query_word_rate: f64,
    pub triplets_per_query: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_topics: 5,
            n_docs: 200,
            n_queries: 40,
            candidates_per_query: 20,
            query_regime: QueryRegime::Short,
            doc_len_mean: 24.0,
            doc_len_spread: 6.0,
            vocab_size: 300,
            relevant_fraction: 0.4,
            query_side_fraction: 0.1,
            query_word_rate: 0.0,
            triplets_per_query: 16,
            seed: 7,
        }
    }
}

impl SyntheticCorpusConfig {
    fn background_words(&self) -> usize {
        self.vocab_size / 5
    }

    fn topic_words(&self) -> usize {
        (self.vocab_size - self.background_words()) / self.n_topics.max(1)
    }

    fn relevant_per_query(&self) -> usize {
        let n = libm::round(self.candidates_per_query as f64 * self.relevant_fraction) as usize;
        n.clamp(1, self.candidates_per_query.saturating_sub(1).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_topics < 2 {
            return bad("n_topics must be at least 2".into());
        }
        if self.candidates_per_query < 2 {
            return bad("candidates_per_query must be at least 2".into());
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive".into());
        }
        if self.vocab_size > SYLLABLES.len().pow(3) {
            return bad(format!("vocab_size {} exceeds the generator's {} words", self.vocab_size, SYLLABLES.len().pow(3)));
        }
        if self.topic_words() < 6 {
            return bad(format!(
                "vocab_size {} too small for {} topics (need at least 6 words per topic)",
                self.vocab_size, self.n_topics
            ));
        }
        if !(self.relevant_fraction > 0.0 && self.relevant_fraction < 1.0) {
            return bad("relevant_fraction must lie in (0, 1)".into());
        }
        if !(self.query_side_fraction > 0.0 && self.query_side_fraction < 1.0) {
            return bad("query_side_fraction must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.query_word_rate) {
            return bad("query_word_rate must lie in [0, 1]".into());
        }
        if !(self.doc_len_mean >= 1.0 && self.doc_len_spread >= 0.0) {
            return bad("doc length mean must be ≥ 1 and spread ≥ 0".into());
        }
        let per_topic = self.n_docs / self.n_topics;
        let rel = self.relevant_per_query();
        let irrel = self.candidates_per_query - rel;
        if per_topic < rel || self.n_docs - per_topic - 1 < irrel {
            return bad(format!(
                "{} documents over {} topics cannot fill {} candidates per query",
                self.n_docs, self.n_topics, self.candidates_per_query
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub topic: usize,
    /// 2 for topic-pure documents, 1 for mixed ones.
    pub grade: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub topic: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub candidates: BTreeMap<String, Vec<String>>,
    pub triplets: Vec<Triplet>,
}

impl SyntheticCorpus {
    pub fn document_texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.text.as_str())
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.id.clone()).collect()
    }

    /// Mean number of words per query.
    pub fn mean_query_len(&self) -> f64 {
        let total: usize = self.queries.iter().map(|q| words(&q.text).count()).sum();
        total as f64 / self.queries.len() as f64
    }
}

fn synth_word(i: usize) -> String {
    let n = SYLLABLES.len();
    let mut w = String::new();
    w.push_str(SYLLABLES[i % n]);
    w.push_str(SYLLABLES[(i / n) % n]);
    w.push_str(SYLLABLES[(i / (n * n)) % n]);
    w
}

fn id_width(n: usize) -> usize {
    format!("{}", n.max(1) - 1).len().max(3)
}

pub fn generate_corpus(config: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let seed = config.seed;
    let per_topic = config.topic_words();
    let topics: Vec<Vec<String>> = (0..config.n_topics)
        .map(|t| (0..per_topic).map(|j| synth_word(t * per_topic + j)).collect())
        .collect();
    // the first `q_side` words of each topic are query-side, the rest document-side
    let q_side = (libm::round(per_topic as f64 * config.query_side_fraction) as usize).clamp(4, per_topic - 2);
    let d_side = per_topic - q_side;
    let background: Vec<String> = (0..config.background_words())
        .map(|j| synth_word(config.n_topics * per_topic + j))
        .collect();

    // documents
    let mut r = rng::stream(seed, "corpus.documents");
    let len_dist = Normal::new(config.doc_len_mean, config.doc_len_spread).map_err(|e| Error::Config(format!("{e}")))?;
    let dw = id_width(config.n_docs);
    let mut documents = Vec::with_capacity(config.n_docs);
    for i in 0..config.n_docs {
        let topic = i % config.n_topics;
        let pure = r.random_bool(0.5);
        let purity = if pure { 0.85 } else { 0.55 };
        let len = libm::round(len_dist.sample(&mut r)).max(3.0) as usize;
        let mut ws: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..len {
            let w = if r.random_bool(purity) {
                if r.random_bool(config.query_word_rate) {
                    &topics[topic][r.random_range(0..q_side)]
                } else {
                    &topics[topic][q_side + r.random_range(0..d_side)]
                }
            } else if background.is_empty() || r.random_bool(0.5) {
                let other = (topic + 1 + r.random_range(0..config.n_topics - 1)) % config.n_topics;
                &topics[other][r.random_range(0..per_topic)]
            } else {
                &background[r.random_range(0..background.len())]
            };
            ws.push(w);
        }
        documents.push(Document {
            id: format!("d{:0dw$}", i),
            text: ws.join(" "),
            topic,
            grade: if pure { 2 } else { 1 },
        });
    }

    // queries
    let mut r = rng::stream(seed, "corpus.queries");
    let qw = id_width(config.n_queries);
    let mut queries = Vec::with_capacity(config.n_queries);
    for i in 0..config.n_queries {
        let topic = i % config.n_topics;
        queries.push(Query {
            id: format!("q{:0qw$}", i),
            text: query_text(config.query_regime, &topics[topic][..q_side], &mut r),
            topic,
        });
    }

    // candidates, qrels, triplets
    let mut r = rng::stream(seed, "corpus.candidates");
    let n_rel = config.relevant_per_query();
    let mut qrels = Qrels::default();
    let mut candidates = BTreeMap::new();
    let mut triplets = Vec::new();
    for q in &queries {
        let mut on_topic: Vec<&Document> = documents.iter().filter(|d| d.topic == q.topic).collect();
        let mut off_topic: Vec<&Document> = documents.iter().filter(|d| d.topic != q.topic).collect();
        on_topic.shuffle(&mut r);
        off_topic.shuffle(&mut r);
        let rel = &on_topic[..n_rel];
        let irrel = &off_topic[..config.candidates_per_query - n_rel];
        let mut list: Vec<String> = Vec::with_capacity(config.candidates_per_query);
        for d in rel {
            qrels.insert(&q.id, &d.id, d.grade);
            list.push(d.id.clone());
        }
        for d in irrel {
            qrels.insert(&q.id, &d.id, 0);
            list.push(d.id.clone());
        }
        list.sort();
        for _ in 0..config.triplets_per_query {
            triplets.push(Triplet {
                query: q.text.clone(),
                positive: rel[r.random_range(0..rel.len())].id.clone(),
                negative: irrel[r.random_range(0..irrel.len())].id.clone(),
            });
        }
        candidates.insert(q.id.clone(), list);
    }

    Ok(SyntheticCorpus {
        documents,
        queries,
        qrels,
        candidates,
        triplets,
    })
}

fn query_text(regime: QueryRegime, topic: &[String], r: &mut rng::Rng) -> String {
    let pick_topic = |r: &mut rng::Rng, n: usize| -> Vec<&str> {
        rand::seq::index::sample(r, topic.len(), n.min(topic.len()))
            .into_iter()
            .map(|i| topic[i].as_str())
            .collect()
    };
    match regime {
        QueryRegime::Short => {
            // lengths 1..4 with weights 1:4:4:1, mean 2.5
            let u = r.random_range(0..10);
            let n = match u {
                0 => 1,
                1..=4 => 2,
                5..=8 => 3,
                _ => 4,
            };
            pick_topic(r, n).join(" ")
        }
        QueryRegime::Long => {
            let len = libm::round(Normal::new(6.0, 2.0).expect("valid").sample(r)).clamp(3.0, 12.0) as usize;
            let content = (len / 2).max(1);
            let mut ws: Vec<&str> = pick_topic(r, content);
            while ws.len() < len {
                let at = r.random_range(0..=ws.len());
                ws.insert(at, FUNCTION_WORDS[r.random_range(0..FUNCTION_WORDS.len())]);
            }
            ws.join(" ")
        }
    }
}

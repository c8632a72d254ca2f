//! Experiment steps shared by the command line and the test suites: typed
//! settings from an [`ExperimentConfig`], dataset directories, pre-training,
//! training and re-ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use lft_core::corpus::{self, QueryRegime, SyntheticCorpus, SyntheticCorpusConfig, Vocab};
use lft_core::encoder::{self, EncoderConfig, PretrainSchedule, Pretrained, TokenSequence};
use lft_core::eval::{fold_split, Qrels, RunRecord, Split, Triplet};
use lft_core::lft::{self, CountConvention, HybridMode, LftSpec, LoraSpec, PrefixSpec};
use lft_core::model::{ModelConfig, RankingModel};
use lft_core::rankers::{RankerKind, DEFAULT_COLBERT_DIM};
use lft_core::tensor::{rng, GradCheckOptions, GradCheckReport, Graph, ParamStore, Scalar};
use lft_core::towers::{SsLoraVariant, SsPrefixVariant, TowerBinding, DEFAULT_COMMON_LEN};
use lft_core::train::{self, Corpus, EvalSet, TrainConfig, TrainOutcome};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::formats;

pub const DOCUMENTS: &str = "documents.tsv";
pub const QUERIES: &str = "queries.tsv";
pub const QRELS: &str = "qrels.txt";
pub const CANDIDATES: &str = "candidates.tsv";
pub const TRIPLETS: &str = "triplets.tsv";

pub const DEFAULT_VOCAB_CAP: usize = 30522;

fn cfg_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

// ------------------------------------------------------------ settings

pub fn seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.parsed_or("seed", 0)
}

pub fn corpus_config(cfg: &ExperimentConfig) -> Result<SyntheticCorpusConfig> {
    let d = SyntheticCorpusConfig::default();
    let regime = match cfg.choice("corpus.regime", &["short", "long"], Some("short"))? {
        "long" => QueryRegime::Long,
        _ => QueryRegime::Short,
    };
    Ok(SyntheticCorpusConfig {
        n_topics: cfg.parsed_or("corpus.n_topics", d.n_topics)?,
        n_docs: cfg.parsed_or("corpus.n_docs", d.n_docs)?,
        n_queries: cfg.parsed_or("corpus.n_queries", d.n_queries)?,
        candidates_per_query: cfg.parsed_or("corpus.candidates_per_query", d.candidates_per_query)?,
        query_regime: regime,
        doc_len_mean: cfg.parsed_or("corpus.doc_len_mean", d.doc_len_mean)?,
        doc_len_spread: cfg.parsed_or("corpus.doc_len_spread", d.doc_len_spread)?,
        vocab_size: cfg.parsed_or("corpus.vocab_size", d.vocab_size)?,
        relevant_fraction: cfg.parsed_or("corpus.relevant_fraction", d.relevant_fraction)?,
        query_side_fraction: cfg.parsed_or("corpus.query_side_fraction", d.query_side_fraction)?,
        query_word_rate: cfg.parsed_or("corpus.query_word_rate", d.query_word_rate)?,
        triplets_per_query: cfg.parsed_or("corpus.triplets_per_query", d.triplets_per_query)?,
        seed: seed(cfg)?,
    })
}

/// `vocab_len` fills in `encoder.vocab_size` when the key is absent.
pub fn encoder_config(cfg: &ExperimentConfig, vocab_len: Option<usize>) -> Result<EncoderConfig> {
    let c = match cfg.choice("encoder.preset", &["bert_base", "custom"], Some("custom"))? {
        "bert_base" => EncoderConfig::bert_base(),
        _ => {
            cfg.require(&["encoder.layers", "encoder.dim", "encoder.heads"])?;
            let dim: usize = cfg.parsed_or("encoder.dim", 0)?;
            let vocab = match (cfg.parsed::<usize>("encoder.vocab_size")?, vocab_len) {
                (Some(v), _) | (None, Some(v)) => v,
                (None, None) => return Err(cfg_err("missing required keys: encoder.vocab_size")),
            };
            EncoderConfig::new(
                cfg.parsed_or("encoder.layers", 0)?,
                dim,
                cfg.parsed_or("encoder.heads", 0)?,
                cfg.parsed_or("encoder.ffn_dim", 4 * dim)?,
                vocab,
                cfg.parsed_or("encoder.max_seq_len", 64)?,
            )?
        }
    };
    Ok(c.with_dropout(cfg.parsed_or("encoder.dropout", 0.1)?)?)
}

fn member_spec(cfg: &ExperimentConfig, name: &str, key: &str) -> Result<LftSpec> {
    let pd = PrefixSpec::default();
    let ld = LoraSpec::default();
    let lora = || -> Result<LoraSpec> {
        Ok(LoraSpec {
            rank: cfg.parsed_or("lft.lora_rank", ld.rank)?,
            alpha: cfg.parsed_or("lft.lora_alpha", ld.alpha)?,
            dropout: cfg.parsed_or("lft.lora_dropout", ld.dropout)?,
        })
    };
    Ok(match name {
        "full" => LftSpec::FullFt,
        "prompt" => LftSpec::Prompt {
            prompt_len: cfg.parsed_or("lft.prompt_len", 10)?,
        },
        "prefix" => LftSpec::Prefix(PrefixSpec {
            prefix_len: cfg.parsed_or("lft.prefix_len", pd.prefix_len)?,
            source_dim: cfg.parsed_or("lft.prefix_source_dim", pd.source_dim)?,
            mlp_hidden: cfg.parsed_or("lft.prefix_mlp_hidden", pd.mlp_hidden)?,
        }),
        "lora" => LftSpec::Lora(lora()?),
        "lora_plus" => LftSpec::LoraPlus(lora()?),
        other => {
            return Err(cfg_err(format!(
                "key `{key}`: `{other}` is not one of full | prompt | prefix | lora | lora_plus"
            )))
        }
    })
}

pub fn lft_spec(cfg: &ExperimentConfig) -> Result<LftSpec> {
    cfg.require(&["lft.method"])?;
    let method = cfg.choice("lft.method", &["full", "prompt", "prefix", "lora", "lora_plus", "hybrid"], None)?;
    if method != "hybrid" {
        return member_spec(cfg, method, "lft.method");
    }
    cfg.require(&["lft.hybrid.first", "lft.hybrid.second"])?;
    let first = member_spec(cfg, cfg.str_or("lft.hybrid.first", ""), "lft.hybrid.first")?;
    let second = member_spec(cfg, cfg.str_or("lft.hybrid.second", ""), "lft.hybrid.second")?;
    let mode = match cfg.choice("lft.hybrid.mode", &["sequential", "concurrent"], Some("sequential"))? {
        "concurrent" => HybridMode::Concurrent,
        _ => HybridMode::Sequential,
    };
    Ok(LftSpec::hybrid(
        first,
        second,
        mode,
        cfg.parsed_or("lft.hybrid.m", 30)?,
        cfg.parsed_or("lft.hybrid.n", 10)?,
    ))
}

pub fn binding(cfg: &ExperimentConfig, spec: &LftSpec) -> Result<TowerBinding> {
    cfg.require(&["binding"])?;
    Ok(match cfg.choice("binding", &["cross", "siamese", "semi_siamese", "hetero_full"], None)? {
        "cross" => TowerBinding::Cross,
        "siamese" => TowerBinding::SiameseBi,
        "hetero_full" => TowerBinding::HeteroFullBi,
        _ => {
            let TowerBinding::SemiSiameseBi { prefix, lora } = TowerBinding::semi_siamese_for(spec) else {
                unreachable!("semi_siamese_for returns a semi-Siamese binding")
            };
            let prefix = match cfg.get("ss.prefix") {
                None => prefix,
                Some(_) => match cfg.choice("ss.prefix", &["average", "concat", "none", "off"], None)? {
                    "average" => Some(SsPrefixVariant::Average),
                    "concat" => Some(SsPrefixVariant::Concat {
                        common_len: cfg.parsed_or("ss.prefix.common_len", DEFAULT_COMMON_LEN)?,
                    }),
                    "none" => Some(SsPrefixVariant::None),
                    _ => None,
                },
            };
            let lora = match cfg.get("ss.lora") {
                None => lora,
                Some(_) => match cfg.choice("ss.lora", &["shared_q", "shared_v", "hetero_both", "off"], None)? {
                    "shared_q" => Some(SsLoraVariant::SharedQHeteroV),
                    "shared_v" => Some(SsLoraVariant::SharedVHeteroQ),
                    "hetero_both" => Some(SsLoraVariant::HeteroBoth),
                    _ => None,
                },
            };
            TowerBinding::SemiSiameseBi { prefix, lora }
        }
    })
}

pub fn ranker(cfg: &ExperimentConfig) -> Result<RankerKind> {
    cfg.require(&["model"])?;
    Ok(match cfg.choice("model", &["mono", "twin", "colbert"], None)? {
        "mono" => RankerKind::Mono,
        "twin" => RankerKind::Twin,
        _ => RankerKind::ColBert,
    })
}

pub fn model_config(cfg: &ExperimentConfig, vocab_len: Option<usize>) -> Result<ModelConfig> {
    let mut problems = Vec::new();
    for k in ["model", "binding", "lft.method"] {
        if cfg.get(k).is_none() {
            problems.push(k);
        }
    }
    if !problems.is_empty() {
        return Err(cfg_err(format!("missing required keys: {}", problems.join(", "))));
    }
    let spec = lft_spec(cfg)?;
    let b = binding(cfg, &spec)?;
    let mut mc = ModelConfig::new(encoder_config(cfg, vocab_len)?, ranker(cfg)?, b, spec)?;
    mc.colbert_dim = cfg.parsed_or("ranker.colbert_dim", DEFAULT_COLBERT_DIM)?;
    Ok(mc)
}

pub fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let t = TrainConfig {
        lr_ranker: cfg.parsed_or("train.lr_ranker", d.lr_ranker)?,
        lr_encoder: cfg.parsed_or("train.lr_encoder", d.lr_encoder)?,
        lr_prefix: cfg.parsed_or("train.lr_prefix", d.lr_prefix)?,
        lr_lora: cfg.parsed_or("train.lr_lora", d.lr_lora)?,
        batch_size: cfg.parsed_or("train.batch_size", d.batch_size)?,
        max_epochs: cfg.parsed_or("train.max_epochs", d.max_epochs)?,
        val_k: cfg.parsed_or("train.val_k", d.val_k)?,
        seed: seed(cfg)?,
        adam: d.adam,
    };
    t.validate()?;
    Ok(t)
}

pub fn pretrain_schedule(cfg: &ExperimentConfig) -> Result<PretrainSchedule> {
    let d = PretrainSchedule::default();
    Ok(PretrainSchedule {
        steps: cfg.parsed_or("pretrain.steps", d.steps)?,
        batch_size: cfg.parsed_or("pretrain.batch_size", d.batch_size)?,
        mask_prob: cfg.parsed_or("pretrain.mask_prob", d.mask_prob)?,
        lr: cfg.parsed_or("pretrain.lr", d.lr)?,
        seed: seed(cfg)?,
    })
}

pub fn count_convention(cfg: &ExperimentConfig) -> Result<CountConvention> {
    Ok(match cfg.choice("count.convention", &["retained", "optimizer"], Some("retained"))? {
        "optimizer" => CountConvention::Optimizer,
        _ => CountConvention::Retained,
    })
}

/// Trainable parameter count of the configured method (head excluded) and its display form.
pub fn count_params(cfg: &ExperimentConfig) -> Result<(usize, String)> {
    let spec = lft_spec(cfg)?;
    let b = binding(cfg, &spec)?;
    let enc = encoder_config(cfg, None)?;
    spec.validate(&enc)?;
    b.validate(&spec)?;
    let n = lft::count_trainable(&spec, &b, &enc, count_convention(cfg)?);
    Ok((n, lft::format_count(n)))
}

// ------------------------------------------------------------ data

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub documents: Vec<(String, String)>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
    pub candidates: BTreeMap<String, Vec<String>>,
    pub triplets: Vec<Triplet>,
}

impl Dataset {
    pub fn from_corpus(c: &SyntheticCorpus) -> Self {
        Self {
            documents: c.documents.iter().map(|d| (d.id.clone(), d.text.clone())).collect(),
            queries: c.queries.iter().map(|q| (q.id.clone(), q.text.clone())).collect(),
            qrels: c.qrels.clone(),
            candidates: c.candidates.clone(),
            triplets: c.triplets.clone(),
        }
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self::from_corpus(&corpus::generate_corpus(&corpus_config(cfg)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        formats::write_texts(&dir.join(DOCUMENTS), &self.documents)?;
        formats::write_texts(&dir.join(QUERIES), &self.queries)?;
        formats::write_qrels(&dir.join(QRELS), &self.qrels)?;
        formats::write_candidates(&dir.join(CANDIDATES), &self.candidates)?;
        formats::write_triplets(&dir.join(TRIPLETS), &self.triplets)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ds = Self {
            documents: formats::read_texts(&dir.join(DOCUMENTS))?,
            queries: formats::read_texts(&dir.join(QUERIES))?,
            qrels: formats::read_qrels(&dir.join(QRELS))?,
            candidates: formats::read_candidates(&dir.join(CANDIDATES))?,
            triplets: formats::read_triplets(&dir.join(TRIPLETS))?,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Every referenced document and query exists.
    pub fn check(&self) -> Result<()> {
        let docs: BTreeSet<&str> = self.documents.iter().map(|d| d.0.as_str()).collect();
        let queries: BTreeSet<&str> = self.queries.iter().map(|q| q.0.as_str()).collect();
        for (q, list) in &self.candidates {
            if !queries.contains(q.as_str()) {
                return Err(LabError::Core(lft_core::Error::Data(format!("{CANDIDATES}: unknown query `{q}`"))));
            }
            if let Some(d) = list.iter().find(|d| !docs.contains(d.as_str())) {
                return Err(LabError::Core(lft_core::Error::UnknownDocument(d.clone())));
            }
        }
        for t in &self.triplets {
            for d in [&t.positive, &t.negative] {
                if !docs.contains(d.as_str()) {
                    return Err(LabError::Core(lft_core::Error::UnknownDocument(d.clone())));
                }
            }
        }
        Ok(())
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.0.clone()).collect()
    }

    /// Vocabulary over document then query texts.
    pub fn vocab(&self, cap: usize) -> Result<Vocab> {
        let texts = self.documents.iter().chain(&self.queries).map(|(_, t)| t.as_str());
        Ok(corpus::build_vocab(texts, cap)?)
    }

    pub fn doc_tokens(&self, vocab: &Vocab) -> BTreeMap<String, Vec<u32>> {
        self.documents.iter().map(|(id, t)| (id.clone(), vocab.encode(t))).collect()
    }

    /// Triplets whose query text belongs to one of `qids`.
    pub fn triplets_for(&self, qids: &[String]) -> Vec<Triplet> {
        let wanted: BTreeSet<&str> = qids.iter().map(String::as_str).collect();
        let texts: BTreeSet<&str> = self
            .queries
            .iter()
            .filter(|(id, _)| wanted.contains(id.as_str()))
            .map(|(_, t)| t.as_str())
            .collect();
        self.triplets.iter().filter(|t| texts.contains(t.query.as_str())).cloned().collect()
    }

    pub fn eval_set(&self, qids: &[String]) -> EvalSet<'_> {
        let wanted: BTreeSet<&str> = qids.iter().map(String::as_str).collect();
        EvalSet {
            queries: self.queries.iter().filter(|(id, _)| wanted.contains(id.as_str())).cloned().collect(),
            candidates: &self.candidates,
            qrels: &self.qrels,
        }
    }

    pub fn split(&self, cfg: &ExperimentConfig) -> Result<Split> {
        let folds = fold_split(&self.query_ids(), cfg.parsed_or("train.n_folds", 5)?, seed(cfg)?)?;
        Ok(folds.rotation(cfg.parsed_or("train.fold", 0)?)?)
    }
}

/// Dataset, vocabulary and tokenized documents of `paths.data`.
pub struct Loaded {
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub docs: BTreeMap<String, Vec<u32>>,
}

impl Loaded {
    pub fn new(dataset: Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        let vocab = dataset.vocab(cfg.parsed_or("vocab.size", DEFAULT_VOCAB_CAP)?)?;
        let docs = dataset.doc_tokens(&vocab);
        Ok(Self { dataset, vocab, docs })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.require(&["paths.data"])?;
        Self::new(Dataset::load(Path::new(cfg.str_or("paths.data", "")))?, cfg)
    }

    pub fn corpus(&self) -> Corpus<'_> {
        Corpus {
            vocab: &self.vocab,
            docs: &self.docs,
        }
    }
}

// ------------------------------------------------------------ steps

pub fn pretrain<T: Scalar>(data: &Loaded, cfg: &ExperimentConfig) -> Result<(EncoderConfig, Pretrained<T>)> {
    let enc = encoder_config(cfg, Some(data.vocab.len()))?;
    let seqs: Vec<TokenSequence> = data
        .dataset
        .documents
        .iter()
        .map(|(_, t)| corpus::tokenize(t, &data.vocab))
        .map(|s| truncate(s, enc.max_seq_len()))
        .collect();
    let p = encoder::pretrain_masked(&seqs, &enc, &pretrain_schedule(cfg)?)?;
    Ok((enc, p))
}

fn truncate(seq: TokenSequence, max: usize) -> TokenSequence {
    if seq.len() <= max {
        return seq;
    }
    let mut ids = seq.ids()[..max - 1].to_vec();
    ids.push(corpus::special::SEP);
    TokenSequence::from_ids(ids).expect("non-empty")
}

/// A fresh model over `base` (encoder tensors with local names).
pub fn new_model<T: Scalar>(cfg: &ExperimentConfig, vocab_len: usize, base: &ParamStore<T>) -> Result<RankingModel<T>> {
    Ok(RankingModel::new(model_config(cfg, Some(vocab_len))?, base, seed(cfg)?)?)
}

pub struct Trained<T> {
    pub model: RankingModel<T>,
    pub outcome: TrainOutcome,
    pub split: Split,
}

/// Trains on the configured fold rotation: train folds for triplets, the validation fold for checkpoint selection.
pub fn train_model<T: Scalar>(data: &Loaded, cfg: &ExperimentConfig, base: &ParamStore<T>) -> Result<Trained<T>> {
    let split = data.dataset.split(cfg)?;
    let mut model = new_model(cfg, data.vocab.len(), base)?;
    let tc = train_config(cfg)?;
    let triplets = data.dataset.triplets_for(&split.train);
    let val = data.dataset.eval_set(&split.val);
    let outcome = train::train(&mut model, &triplets, data.corpus(), &val, &tc)?;
    Ok(Trained { model, outcome, split })
}

/// Re-ranks the candidates of `qids`; records in qid then rank order.
pub fn rerank<T: Scalar>(model: &RankingModel<T>, data: &Loaded, qids: &[String], tag: &str) -> Result<Vec<RunRecord>> {
    let run = train::rank_queries(model, data.corpus(), &data.dataset.eval_set(qids), tag)?;
    Ok(run.into_values().flatten().collect())
}

/// Query ids selected by `eval.split`.
pub fn split_qids(data: &Loaded, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let which = cfg.choice("eval.split", &["test", "val", "train", "all"], Some("test"))?;
    if which == "all" {
        return Ok(data.dataset.query_ids());
    }
    let s = data.dataset.split(cfg)?;
    Ok(match which {
        "val" => s.val,
        "train" => s.train,
        _ => s.test,
    })
}

/// Fills every adapter tensor (and the head) with `N(0, std²)` noise, so
/// that gradients flow through all of them.
pub fn randomize_adapters<T: Scalar>(store: &mut ParamStore<T>, seed: u64, std: f64) -> Result<()> {
    randomize_where(store, seed, std, |n| !lft::is_base_name(n))
}

/// Replaces every tensor selected by `pred` with `N(0, std²)` noise
/// (`N(1, std²)` for layer-norm gains).
pub fn randomize_where<T: Scalar>(store: &mut ParamStore<T>, seed: u64, std: f64, pred: impl Fn(&str) -> bool) -> Result<()> {
    let names: Vec<String> = store.names().filter(|n| pred(n)).map(String::from).collect();
    for n in names {
        let shape = store.get(&n)?.shape().to_vec();
        let mut t = rng::normal_named::<T>(seed, &n, &shape, std);
        if n.ends_with(".gain") {
            t = t.map(|x| x + T::one());
        }
        *store.get_mut(&n)? = t;
    }
    Ok(())
}

/// Random word ids in `[FIRST_WORD, vocab)`.
pub fn random_words(seed: u64, name: &str, len: usize, vocab: usize) -> Vec<u32> {
    use rand::Rng;
    let mut r = rng::stream(seed, name);
    (0..len).map(|_| r.random_range(corpus::special::FIRST_WORD..vocab as u32)).collect()
}

/// Evaluation point of [`gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckPoint {
    /// Standard deviation of every tensor, base included.
    pub std: f64,
    pub query_len: usize,
    pub pos_len: usize,
    pub neg_len: usize,
}

impl Default for GradCheckPoint {
    fn default() -> Self {
        Self {
            std: 0.3,
            query_len: 3,
            pos_len: 6,
            neg_len: 5,
        }
    }
}

/// Finite-difference check of the triplet loss through the configured model at 64-bit with dropout off.
///
/// Every tensor is redrawn at `point.std`, so that attention is far from
/// uniform and gradients sit well above finite-difference noise.
pub fn gradcheck(cfg: &ExperimentConfig, opts: GradCheckOptions, point: GradCheckPoint) -> Result<GradCheckReport> {
    let mut mc = model_config(cfg, None)?;
    mc.encoder = mc.encoder.with_dropout(0.0)?;
    if let Some(l) = lora_spec_mut(&mut mc.lft) {
        l.dropout = 0.0;
    }
    let s = seed(cfg)?;
    let base = encoder::new_encoder::<f64>(&mc.encoder, s);
    let mut model = RankingModel::new(mc, &base, s)?;
    randomize_where(&mut model.store, s ^ 0x5eed, point.std, |n| n != lft::PREFIX_SOURCE)?;
    // Unit-scale source rows, like token embeddings, so prefixes compete in attention.
    randomize_where(&mut model.store, s ^ 0x5eed, 1.0, |n| n == lft::PREFIX_SOURCE)?;
    let v = model.config.encoder.vocab_size();
    let q = random_words(s, "gc.query", point.query_len, v);
    let pos = random_words(s, "gc.pos", point.pos_len, v);
    let neg = random_words(s, "gc.neg", point.neg_len, v);
    let config = model.config.clone();
    let report = lft_core::tensor::grad_check(
        &model.store,
        |store: &ParamStore<f64>, g: &mut Graph<f64>| {
            let m = RankingModel {
                config: config.clone(),
                store: store.clone(),
            };
            let pair = m.score_pair(g, &q, &pos, &neg)?;
            lft_core::eval::triplet_loss_var(g, &[pair])
        },
        opts,
    )?;
    Ok(report)
}

fn lora_spec_mut(spec: &mut LftSpec) -> Option<&mut LoraSpec> {
    match spec {
        LftSpec::Lora(l) | LftSpec::LoraPlus(l) => Some(l),
        LftSpec::Hybrid { first, second, .. } => lora_spec_mut(first).or(lora_spec_mut(second)),
        _ => None,
    }
}

/// Rebuilds the configured model and fills it from a checkpoint holding every tensor of the model.
pub fn load_model<T: Scalar>(cfg: &ExperimentConfig, vocab_len: usize, path: &Path) -> Result<RankingModel<T>> {
    let mc = model_config(cfg, Some(vocab_len))?;
    let base = encoder::new_encoder::<T>(&mc.encoder, 0);
    let mut model = RankingModel::new(mc, &base, seed(cfg)?)?;
    let n = crate::checkpoint::load_into(&mut model.store, path)?;
    if n != model.store.len() {
        let have: BTreeSet<String> = crate::checkpoint::load::<f32>(path)?.names().map(String::from).collect();
        let missing: Vec<&str> = model.store.names().filter(|m| !have.contains(*m)).take(3).collect();
        return Err(LabError::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "holds {n} of the model's {} tensors (missing `{}`...)",
                model.store.len(),
                missing.join("`, `")
            ),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(settings: &[&str]) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        for s in settings {
            c.set(s).unwrap();
        }
        c
    }

    const SMALL: &[&str] = &["seed=5", "corpus.n_docs=30", "corpus.n_queries=10", "corpus.candidates_per_query=5"];

    #[test]
    fn custom_encoder_needs_its_shape() {
        let e = encoder_config(&cfg(&["encoder.layers=2"]), Some(50)).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("encoder.dim") && msg.contains("encoder.heads"), "{msg}");
        let c = encoder_config(&cfg(&["encoder.layers=2", "encoder.dim=16", "encoder.heads=4"]), Some(50)).unwrap();
        assert_eq!(c, EncoderConfig::tiny(2, 16, 4, 50, 64).unwrap().with_dropout(0.1).unwrap());
    }

    #[test]
    fn semi_siamese_defaults_follow_the_method() {
        let c = cfg(&["binding=semi_siamese", "lft.method=lora"]);
        let spec = lft_spec(&c).unwrap();
        assert!(matches!(binding(&c, &spec).unwrap(), TowerBinding::SemiSiameseBi { .. }));
        let shape = ["encoder.layers=1", "encoder.dim=8", "encoder.heads=2", "model=colbert", "lft.lora_rank=2"];
        let with = |extra: &str| {
            let mut all = shape.to_vec();
            all.extend(["binding=semi_siamese", "lft.method=lora", extra]);
            model_config(&cfg(&all), Some(20))
        };
        assert!(with("ss.lora=hetero_both").is_ok());
        assert!(with("ss.prefix=average").is_err());
    }

    #[test]
    fn dataset_directory_round_trips() {
        let c = cfg(SMALL);
        let ds = Dataset::generate(&c).unwrap();
        ds.check().unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        assert_eq!(Dataset::generate(&c).unwrap(), ds);
    }

    #[test]
    fn split_partitions_queries_and_triplets_follow_it() {
        let c = cfg(SMALL);
        let ds = Dataset::generate(&c).unwrap();
        let s = ds.split(&c).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        assert_eq!(all, ds.query_ids());
        let train_texts: BTreeSet<&str> = ds
            .queries
            .iter()
            .filter(|(id, _)| s.train.contains(id))
            .map(|(_, t)| t.as_str())
            .collect();
        let picked = ds.triplets_for(&s.train);
        assert!(!picked.is_empty());
        assert!(picked.iter().all(|t| train_texts.contains(t.query.as_str())));
        assert_eq!(ds.eval_set(&s.test).queries.len(), s.test.len());
    }

    #[test]
    fn randomizing_adapters_leaves_the_base_alone() {
        let c = cfg(&[
            "encoder.layers=1",
            "encoder.dim=8",
            "encoder.heads=2",
            "encoder.vocab_size=20",
            "model=colbert",
            "binding=siamese",
            "lft.method=lora",
            "lft.lora_rank=2",
        ]);
        let enc = encoder_config(&c, Some(20)).unwrap();
        let base = encoder::new_encoder::<f64>(&enc, 1);
        let mut model = new_model(&c, 20, &base).unwrap();
        let before = model.store.clone();
        randomize_adapters(&mut model.store, 9, 0.5).unwrap();
        for (name, p) in before.iter() {
            let same = model.store.get(name).unwrap().bit_eq(&p.tensor);
            assert_eq!(same, lft::is_base_name(name), "{name}");
        }
    }

    #[test]
    fn random_words_are_seeded_and_skip_reserved_ids() {
        let a = random_words(3, "q", 12, 40);
        assert_eq!(a, random_words(3, "q", 12, 40));
        assert_ne!(a, random_words(3, "d", 12, 40));
        assert!(a.iter().all(|&w| (corpus::special::FIRST_WORD..40).contains(&w)));
    }
}

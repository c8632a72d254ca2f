//! Triplet-loss training with grouped learning rates, per-epoch validation
//! and best-epoch checkpoint selection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::Vocab;
use crate::eval::{self, precision_at_k, Qrels, Run, Triplet};
use crate::lft::{self, HybridStage, LftSpec};
use crate::model::RankingModel;
use crate::rankers::DocCache;
use crate::tensor::{rng, AdamConfig, AdamState, Graph, LrGroups, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_ranker: f64,
    /// Encoder base weights (full fine-tuning only).
    pub lr_encoder: f64,
    /// Prompt and prefix parameters.
    pub lr_prefix: f64,
    pub lr_lora: f64,
    pub batch_size: usize,
    /// Epochs for non-hybrid methods; hybrids run their own `m + n`.
    pub max_epochs: usize,
    /// Cutoff of the validation P@k used for checkpoint selection.
    pub val_k: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_ranker: 1e-4,
            lr_encoder: 2e-5,
            lr_prefix: 1e-4,
            lr_lora: 1e-4,
            batch_size: 16,
            max_epochs: 30,
            val_k: 10,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, lr) in [
            ("lr_ranker", self.lr_ranker),
            ("lr_encoder", self.lr_encoder),
            ("lr_prefix", self.lr_prefix),
            ("lr_lora", self.lr_lora),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.val_k == 0 {
            return Err(Error::Config("val_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_groups(&self) -> LrGroups {
        LrGroups::new()
            .with("", self.lr_encoder)
            .with("ranker.", self.lr_ranker)
            .with("prompt.", self.lr_prefix)
            .with("prefix.", self.lr_prefix)
            .with("lora.", self.lr_lora)
    }

    /// Epochs the schedule runs for `spec`.
    pub fn epochs_for(&self, spec: &LftSpec) -> usize {
        match spec {
            LftSpec::Hybrid { m_epochs, n_epochs, .. } => m_epochs + n_epochs,
            _ => self.max_epochs,
        }
    }
}

/// Tokenized documents plus the vocabulary used for query texts.
#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub vocab: &'a Vocab,
    pub docs: &'a BTreeMap<String, Vec<u32>>,
}

impl Corpus<'_> {
    pub fn doc(&self, id: &str) -> Result<&[u32]> {
        self.docs
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownDocument(id.into()))
    }
}

/// Queries to rank, with their candidate lists and judgments.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    /// `(qid, query text)`.
    pub queries: Vec<(String, String)>,
    pub candidates: &'a BTreeMap<String, Vec<String>>,
    pub qrels: &'a Qrels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

struct Sample {
    query: Vec<u32>,
    pos: String,
    neg: String,
}

/// Scores every query's candidates and returns the run.
pub fn rank_queries<T: Scalar>(model: &RankingModel<T>, corpus: Corpus<'_>, set: &EvalSet<'_>, tag: &str) -> Result<Run> {
    let cache: Option<DocCache<T>> = if model.config.binding.is_bi_encoder() {
        let mut ids = BTreeSet::new();
        for (qid, _) in &set.queries {
            if let Some(list) = set.candidates.get(qid) {
                ids.extend(list.iter().map(String::as_str));
            }
        }
        let mut docs = Vec::with_capacity(ids.len());
        for id in ids {
            docs.push((id, corpus.doc(id)?));
        }
        Some(model.precompute_docs(docs)?)
    } else {
        None
    };
    let mut run = Run::new();
    for (qid, text) in &set.queries {
        let Some(list) = set.candidates.get(qid) else {
            continue;
        };
        let q = corpus.vocab.encode(text);
        let records = model.rerank(qid, &q, list, corpus.docs, cache.as_ref(), tag)?;
        run.insert(qid.clone(), records);
    }
    Ok(run)
}

/// Mean P@k of `model` on `set`.
pub fn validation_metric<T: Scalar>(model: &RankingModel<T>, corpus: Corpus<'_>, set: &EvalSet<'_>, k: usize) -> Result<f64> {
    let run = rank_queries(model, corpus, set, "val")?;
    Ok(precision_at_k(&run, set.qrels, k)?.mean())
}

/// Trains `model` in place and leaves it at the best validation epoch.
///
/// Sequential hybrids restore the best stage-1 state when stage 2 begins and
/// keep the first member frozen from then on; the returned checkpoint is the
/// best stage-2 epoch.
pub fn train<T: Scalar>(
    model: &mut RankingModel<T>,
    triplets: &[Triplet],
    corpus: Corpus<'_>,
    val: &EvalSet<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut samples = Vec::with_capacity(triplets.len());
    for t in triplets {
        corpus.doc(&t.positive)?;
        corpus.doc(&t.negative)?;
        samples.push(Sample {
            query: corpus.vocab.encode(&t.query),
            pos: t.positive.clone(),
            neg: t.negative.clone(),
        });
    }

    let spec = model.config.lft.clone();
    let full_plan = model.freeze_plan();
    let keep = |store: &crate::tensor::ParamStore<T>| store.snapshot(|n| full_plan.contains(n));
    let lrs = config.lr_groups();
    let mut adam = AdamState::new(config.adam);
    let epochs = config.epochs_for(&spec);

    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor<T>>)> = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for e in 0..epochs {
        let (label, plan) = match &spec {
            LftSpec::Hybrid { .. } => {
                let stage = lft::hybrid_stage(&spec, e)?;
                if let HybridStage::Second { entering: true, .. } = stage {
                    if let Some((_, _, snap)) = best.take() {
                        model.store.restore(&snap)?;
                    }
                }
                (stage.label(), stage.plan(&model.store))
            }
            _ => ("train", full_plan.clone()),
        };
        plan.apply(&mut model.store);

        order.shuffle(&mut rng::stream(config.seed, &format!("epoch.{e}")));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let dropout_seed = rng::stream(config.seed, &format!("dropout.{e}.{b}")).random::<u64>();
            let mut g = Graph::training(dropout_seed);
            let mut pairs = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                pairs.push(model.score_pair(&mut g, &s.query, corpus.doc(&s.pos)?, corpus.doc(&s.neg)?)?);
            }
            let loss = eval::triplet_loss_var(&mut g, &pairs)?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: e + 1, batch: b });
            }
            loss_sum += value * batch.len() as f64;
            let grads = g.backward(loss)?.named(&model.store);
            adam.step(&mut model.store, &grads, &lrs)?;
        }

        let metric = if val.queries.is_empty() {
            0.0
        } else {
            validation_metric(model, corpus, val, config.val_k)?
        };
        log.push(EpochLog {
            epoch: e + 1,
            train_loss: loss_sum / samples.len() as f64,
            val_metric: metric,
            stage: label.into(),
        });
        let improved = match &best {
            None => true,
            Some((_, m, _)) => metric > *m || val.queries.is_empty(),
        };
        if improved {
            best = Some((e + 1, metric, keep(&model.store)));
        }
    }

    full_plan.apply(&mut model.store);
    let (best_epoch, best_metric) = match best {
        Some((epoch, metric, snap)) => {
            model.store.restore(&snap)?;
            (Some(epoch), Some(metric))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_metric,
    })
}

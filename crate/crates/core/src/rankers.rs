//! Scoring heads: a linear layer over the joint `[CLS]` (mono), an MLP over
//! symmetric features of two `[CLS]` vectors (twin), and late interaction
//! over L2-normalized projected token vectors (ColBERT).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{rng, Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const MONO_W: &str = "ranker.mono.weight";
pub const MONO_B: &str = "ranker.mono.bias";
pub const TWIN_HIDDEN_W: &str = "ranker.twin.hidden.weight";
pub const TWIN_HIDDEN_B: &str = "ranker.twin.hidden.bias";
pub const TWIN_OUT_W: &str = "ranker.twin.out.weight";
pub const TWIN_OUT_B: &str = "ranker.twin.out.bias";
pub const COLBERT_PROJ: &str = "ranker.colbert.proj.weight";

pub const DEFAULT_COLBERT_DIM: usize = 32;
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankerKind {
    /// Cross-encoder: linear over the final joint `[CLS]`.
    Mono,
    /// Bi-encoder: MLP over `[q ‖ d ‖ |q − d| ‖ q ⊙ d]` of the two `[CLS]` vectors.
    Twin,
    /// Bi-encoder: MaxSim over projected, normalized token vectors.
    ColBert,
}

/// Creates the randomly initialized head for `kind` (all trainable).
///
/// The twin head's hidden layer has width `d`.
pub fn init_head<T: Scalar>(kind: RankerKind, dim: usize, colbert_dim: usize, seed: u64, store: &mut ParamStore<T>) -> Result<()> {
    let normal = |store: &mut ParamStore<T>, name: &str, shape: &[usize]| {
        store.insert(name, rng::normal_named(seed, name, shape, HEAD_INIT_STD), true)
    };
    match kind {
        RankerKind::Mono => {
            normal(store, MONO_W, &[1, dim])?;
            store.insert(MONO_B, Tensor::zeros(&[1]), true)
        }
        RankerKind::Twin => {
            normal(store, TWIN_HIDDEN_W, &[dim, 4 * dim])?;
            store.insert(TWIN_HIDDEN_B, Tensor::zeros(&[dim]), true)?;
            normal(store, TWIN_OUT_W, &[1, dim])?;
            store.insert(TWIN_OUT_B, Tensor::zeros(&[1]), true)
        }
        RankerKind::ColBert => {
            if colbert_dim == 0 {
                return Err(Error::Config("ColBERT projection dimension must be positive".into()));
            }
            normal(store, COLBERT_PROJ, &[colbert_dim, dim])
        }
    }
}

/// `w · h[cls] + b` over the final hidden states of a joint sequence.
pub fn score_mono<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var, cls_row: usize) -> Result<Var> {
    let cls = g.slice_rows(hidden, cls_row, 1)?;
    let w = g.param(store, MONO_W)?;
    let b = g.param(store, MONO_B)?;
    g.linear(cls, w, Some(b))
}

/// `[q ‖ d ‖ |q − d| ‖ q ⊙ d]` as one `1 × 4d` row.
pub fn twin_features<T: Scalar>(g: &mut Graph<T>, cls_q: Var, cls_d: Var) -> Result<Var> {
    let (sq, sd) = (g.value(cls_q), g.value(cls_d));
    if sq.len() != sd.len() {
        return Err(Error::Shape {
            op: "twin_features",
            left: sq.shape().to_vec(),
            right: sd.shape().to_vec(),
        });
    }
    let diff = g.sub(cls_q, cls_d)?;
    let diff = g.abs(diff)?;
    let prod = g.mul(cls_q, cls_d)?;
    g.concat_cols(&[cls_q, cls_d, diff, prod])
}

pub fn score_twin<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cls_q: Var, cls_d: Var) -> Result<Var> {
    let f = twin_features(g, cls_q, cls_d)?;
    let hw = g.param(store, TWIN_HIDDEN_W)?;
    let hb = g.param(store, TWIN_HIDDEN_B)?;
    let ow = g.param(store, TWIN_OUT_W)?;
    let ob = g.param(store, TWIN_OUT_B)?;
    let h = g.linear(f, hw, Some(hb))?;
    let h = g.relu(h)?;
    g.linear(h, ow, Some(ob))
}

/// Projects the selected rows of `hidden` to the ColBERT space and L2-normalizes them.
pub fn colbert_project<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
    let sel = g.gather_rows(hidden, rows)?;
    let w = g.param(store, COLBERT_PROJ)?;
    let p = g.linear(sel, w, None)?;
    g.l2_normalize_rows(p)
}

/// `Σ_i max_j q_i · d_j` over unit-norm rows.
pub fn score_colbert<T: Scalar>(g: &mut Graph<T>, q: Var, d: Var) -> Result<Var> {
    if g.value(q).is_empty() || g.value(d).is_empty() {
        return Err(Error::Contract("MaxSim needs at least one query and one document row".into()));
    }
    g.maxsim(q, d)
}

/// [`score_colbert`] on plain tensors.
pub fn score_colbert_values<T: Scalar>(q: &Tensor<T>, d: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let (qv, dv) = (g.constant(q.clone()), g.constant(d.clone()));
    let s = score_colbert(&mut g, qv, dv)?;
    Ok(g.scalar(s))
}

/// A tower's output as the head consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rep<T> {
    /// Final `[CLS]` vector, `1 × d`.
    pub cls: Tensor<T>,
    /// Normalized token rows (`[CLS]` and text, no slots, `[SEP]` or padding); ColBERT only.
    pub tokens: Option<Tensor<T>>,
}

pub type QueryRep<T> = Rep<T>;
pub type DocRep<T> = Rep<T>;

/// [`Rep`] as tape variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepVars {
    pub cls: Var,
    pub tokens: Option<Var>,
}

impl RepVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Rep<T> {
        Rep {
            cls: g.value(self.cls).clone(),
            tokens: self.tokens.map(|t| g.value(t).clone()),
        }
    }
}

impl<T: Scalar> Rep<T> {
    pub fn on_tape(&self, g: &mut Graph<T>) -> RepVars {
        RepVars {
            cls: g.constant(self.cls.clone()),
            tokens: self.tokens.clone().map(|t| g.constant(t)),
        }
    }
}

/// Scores two tower representations with the bi-encoder head `kind`.
pub fn score_reps<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, kind: RankerKind, q: RepVars, d: RepVars) -> Result<Var> {
    match kind {
        RankerKind::Mono => Err(Error::Contract("the mono head scores joint sequences only".into())),
        RankerKind::Twin => score_twin(g, store, q.cls, d.cls),
        RankerKind::ColBert => {
            let (Some(qt), Some(dt)) = (q.tokens, d.tokens) else {
                return Err(Error::Contract("ColBERT scoring needs token rows".into()));
            };
            score_colbert(g, qt, dt)
        }
    }
}

/// Pre-computed document representations, tied to the parameter-store
/// version they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct DocCache<T> {
    pub(crate) version: u64,
    pub(crate) reps: BTreeMap<String, DocRep<T>>,
}

impl<T: Scalar> DocCache<T> {
    pub fn new(version: u64, reps: BTreeMap<String, DocRep<T>>) -> Self {
        Self { version, reps }
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.reps.keys().map(String::as_str)
    }

    /// The cached representation, after checking the cache against `store_version`.
    pub fn get(&self, doc_id: &str, store_version: u64) -> Result<&DocRep<T>> {
        if self.version != store_version {
            return Err(Error::StaleCache {
                cached: self.version,
                current: store_version,
            });
        }
        self.reps
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.into()))
    }
}

/// Rows scored by ColBERT: `[CLS]` and text tokens after `slots`, excluding the trailing `[SEP]`.
pub fn scored_rows(slots: usize, real_len: usize) -> Vec<usize> {
    (slots..slots + real_len.saturating_sub(1).max(1)).collect()
}

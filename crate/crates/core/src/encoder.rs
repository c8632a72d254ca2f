//! Miniature BERT-style encoder: token, position and segment embeddings,
//! post-LN multi-head self-attention and GELU feed-forward blocks, with
//! hook points for prompts, prefixes and low-rank adapters.
//!
//! Parameter names (optionally under a root such as `doc.`):
//! `embeddings.{token,position,segment}`, `embeddings.ln.{gain,bias}`,
//! `layer.{l}.attn.{wq,wk,wv,dense}.{weight,bias}`,
//! `layer.{l}.ffn.{up,down}.{weight,bias}`, `layer.{l}.{ln1,ln2}.{gain,bias}`.
//! Linear weights are stored `[out × in]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::corpus::special;
use crate::lft::lora_forward;
use crate::tensor::{rng, AdamConfig, AdamState, Graph, LrGroups, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const SEGMENTS: usize = 2;
const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;
const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    layers: usize,
    dim: usize,
    heads: usize,
    ffn_dim: usize,
    vocab_size: usize,
    max_seq_len: usize,
    dropout: f64,
}

impl EncoderConfig {
    pub fn new(
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if [layers, dim, heads, ffn_dim, vocab_size, max_seq_len].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        if max_seq_len < 4 {
            return Err(Error::Config("max_seq_len must be at least 4".into()));
        }
        Ok(Self {
            layers,
            dim,
            heads,
            ffn_dim,
            vocab_size,
            max_seq_len,
            dropout: 0.1,
        })
    }

    /// Dimensions of BERT-base, used for parameter accounting.
    pub fn bert_base() -> Self {
        Self::new(12, 768, 12, 3072, 30522, 512).expect("valid preset")
    }

    /// `L` layers, `d` model dim, `H` heads, `4d` feed-forward.
    pub fn tiny(layers: usize, dim: usize, heads: usize, vocab_size: usize, max_seq_len: usize) -> Result<Self> {
        Self::new(layers, dim, heads, 4 * dim, vocab_size, max_seq_len)
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout = rate;
        Ok(self)
    }

    pub fn with_layers(self, layers: usize) -> Result<Self> {
        Self::new(layers, self.dim, self.heads, self.ffn_dim, self.vocab_size, self.max_seq_len)?
            .with_dropout(self.dropout)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim
    }
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }
    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Checks room for `slots` prefix/prompt positions plus `[CLS]`, one token and `[SEP]`.
    pub fn check_slots(&self, slots: usize) -> Result<()> {
        if self.max_seq_len < slots + 3 {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold {slots} prefix slots plus 3 positions",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    /// Parameters in one transformer layer.
    pub fn layer_parameters(&self) -> usize {
        let (d, f) = (self.dim, self.ffn_dim);
        4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d
    }

    pub fn embedding_parameters(&self) -> usize {
        let d = self.dim;
        (self.vocab_size + self.max_seq_len + SEGMENTS) * d + 2 * d
    }
}

/// Closed-form parameter count of an encoder with `config`.
pub fn count_parameters(config: &EncoderConfig) -> usize {
    config.embedding_parameters() + config.layers * config.layer_parameters()
}

/// Full name of an encoder parameter under `root` (`""` or e.g. `"doc."`).
pub fn param_name(root: &str, local: &str) -> String {
    format!("{root}{local}")
}

/// Every `(local name, shape)` of an encoder, in construction order.
pub fn parameter_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.dim, config.ffn_dim);
    let mut out = vec![
        ("embeddings.token".into(), vec![config.vocab_size, d]),
        ("embeddings.position".into(), vec![config.max_seq_len, d]),
        ("embeddings.segment".into(), vec![SEGMENTS, d]),
        ("embeddings.ln.gain".into(), vec![d]),
        ("embeddings.ln.bias".into(), vec![d]),
    ];
    for l in 0..config.layers {
        for p in ["wq", "wk", "wv", "dense"] {
            out.push((format!("layer.{l}.attn.{p}.weight"), vec![d, d]));
            out.push((format!("layer.{l}.attn.{p}.bias"), vec![d]));
        }
        out.push((format!("layer.{l}.ffn.up.weight"), vec![f, d]));
        out.push((format!("layer.{l}.ffn.up.bias"), vec![f]));
        out.push((format!("layer.{l}.ffn.down.weight"), vec![d, f]));
        out.push((format!("layer.{l}.ffn.down.bias"), vec![d]));
        for ln in ["ln1", "ln2"] {
            out.push((format!("layer.{l}.{ln}.gain"), vec![d]));
            out.push((format!("layer.{l}.{ln}.bias"), vec![d]));
        }
    }
    out
}

/// Whether `local` (a name without root) belongs to the encoder naming scheme.
pub fn is_encoder_name(local: &str) -> bool {
    let parts: Vec<&str> = local.split('.').collect();
    match parts.as_slice() {
        ["embeddings", "token" | "position" | "segment"] => true,
        ["embeddings", "ln", "gain" | "bias"] => true,
        ["layer", l, rest @ ..] if l.parse::<usize>().is_ok() => matches!(
            rest,
            ["attn", "wq" | "wk" | "wv" | "dense", "weight" | "bias"]
                | ["ffn", "up" | "down", "weight" | "bias"]
                | ["ln1" | "ln2", "gain" | "bias"]
        ),
        _ => false,
    }
}

/// Seeded initialization: weights `N(0, 0.02²)`, biases 0, norm gains 1.
pub fn init_encoder<T: Scalar>(config: &EncoderConfig, seed: u64, root: &str, store: &mut ParamStore<T>) -> Result<()> {
    for (local, shape) in parameter_shapes(config) {
        let t = if local.ends_with(".gain") {
            Tensor::full(&shape, T::one())
        } else if local.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            rng::normal_named(seed, &local, &shape, INIT_STD)
        };
        store.insert(param_name(root, &local), t, true)?;
    }
    Ok(())
}

pub fn new_encoder<T: Scalar>(config: &EncoderConfig, seed: u64) -> ParamStore<T> {
    let mut s = ParamStore::new();
    init_encoder(config, seed, "", &mut s).expect("fresh store has no duplicates");
    s
}

/// Token ids with attention mask and segment ids; padding is a contiguous suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<u8>,
    segments: Vec<u8>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, mask: Vec<u8>, segments: Vec<u8>) -> Result<Self> {
        if ids.is_empty() || ids.len() != mask.len() || ids.len() != segments.len() {
            return Err(Error::Contract("token sequence fields must be non-empty and equal length".into()));
        }
        if mask.iter().any(|&m| m > 1) || segments.iter().any(|&s| s as usize >= SEGMENTS) {
            return Err(Error::Contract("mask and segment ids must be 0 or 1".into()));
        }
        let real = mask.iter().take_while(|&&m| m == 1).count();
        if mask[real..].iter().any(|&m| m != 0) || real == 0 {
            return Err(Error::Contract("padding must be a contiguous non-total suffix".into()));
        }
        Ok(Self { ids, mask, segments })
    }

    /// All positions real, segment 0.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let n = ids.len();
        Self::new(ids, vec![1; n], vec![0; n])
    }

    /// Appends `n` padding positions.
    pub fn padded(&self, n: usize) -> Self {
        let mut s = self.clone();
        s.ids.extend(core::iter::repeat_n(special::PAD, n));
        s.mask.extend(core::iter::repeat_n(0, n));
        s.segments.extend(core::iter::repeat_n(0, n));
        s
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }
    pub fn segments(&self) -> &[u8] {
        &self.segments
    }
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Low-rank residual on one projection: `scale · B·A·dropout(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraHook {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerLora {
    pub q: Option<LoraHook>,
    pub v: Option<LoraHook>,
    pub dense: Option<LoraHook>,
}

/// What occupies the leading slot positions of the sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SlotHook {
    #[default]
    None,
    /// `[len × d]` vectors placed at the input only.
    Prompt(Var),
    /// `L + 1` tensors of `[len × d]`: point 0 replaces the slot embeddings,
    /// point `l + 1` replaces the slot activations entering layer `l`.
    Prefix(Vec<Var>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterHooks {
    pub slots: SlotHook,
    /// Empty, or one entry per layer.
    pub lora: Vec<LayerLora>,
}

impl AdapterHooks {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn slot_len<T: Scalar>(&self, g: &Graph<T>) -> usize {
        match &self.slots {
            SlotHook::None => 0,
            SlotHook::Prompt(p) => g.value(*p).rows(),
            SlotHook::Prefix(ps) => ps.first().map_or(0, |p| g.value(*p).rows()),
        }
    }
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `L + 1` states: index 0 is the embedding output entering layer 0,
    /// index `l` is the output of layer `l − 1` (after any slot overwrite
    /// for the next layer), index `L` is the final output.
    pub layers: Vec<Var>,
    /// Leading slot positions preceding the text.
    pub slots: usize,
}

impl Encoded {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one layer state")
    }
}

/// Replaces rows `0..len(prefix)` of `hidden` with `prefix`.
///
/// Gradients do not flow through the replaced rows into `hidden`.
pub fn apply_prefix<T: Scalar>(g: &mut Graph<T>, hidden: Var, prefix: Var) -> Result<Var> {
    let n = g.value(prefix).rows();
    let len = g.value(hidden).rows();
    if len < n {
        return Err(Error::Contract(format!(
            "cannot place {n} prefix slots in a sequence of {len} positions"
        )));
    }
    if n == len {
        return Ok(prefix);
    }
    let rest = g.slice_rows(hidden, n, len - n)?;
    g.concat_rows(&[prefix, rest])
}

/// Runs the encoder whose parameters live under `root` in `store`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    root: &str,
    config: &EncoderConfig,
    seq: &TokenSequence,
    hooks: &AdapterHooks,
) -> Result<Encoded> {
    let n_slots = hooks.slot_len(g);
    let total = n_slots + seq.len();
    if total > config.max_seq_len {
        return Err(Error::Length {
            len: total,
            max: config.max_seq_len,
        });
    }
    if !hooks.lora.is_empty() && hooks.lora.len() != config.layers {
        return Err(Error::Contract(format!(
            "{} LoRA layer hooks for {} layers",
            hooks.lora.len(),
            config.layers
        )));
    }
    if let SlotHook::Prefix(ps) = &hooks.slots {
        if ps.len() != config.layers + 1 {
            return Err(Error::Contract(format!(
                "{} prefix points for {} layers",
                ps.len(),
                config.layers
            )));
        }
    }
    let p = |local: &str| param_name(root, local);

    let mut ids: Vec<usize> = vec![special::PAD as usize; n_slots];
    ids.extend(seq.ids().iter().map(|&i| i as usize));
    if let Some(&bad) = ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let mut segs: Vec<usize> = vec![0; n_slots];
    segs.extend(seq.segments().iter().map(|&s| s as usize));
    let positions: Vec<usize> = (0..total).collect();

    let tok_table = g.param(store, &p("embeddings.token"))?;
    let pos_table = g.param(store, &p("embeddings.position"))?;
    let seg_table = g.param(store, &p("embeddings.segment"))?;
    let tok = g.gather_rows(tok_table, &ids)?;
    let pos = g.gather_rows(pos_table, &positions)?;
    let seg = g.gather_rows(seg_table, &segs)?;
    let e = g.add(tok, pos)?;
    let mut e = g.add(e, seg)?;
    match &hooks.slots {
        SlotHook::None => {}
        SlotHook::Prompt(v) => e = apply_prefix(g, e, *v)?,
        SlotHook::Prefix(ps) => e = apply_prefix(g, e, ps[0])?,
    }
    let ln_g = g.param(store, &p("embeddings.ln.gain"))?;
    let ln_b = g.param(store, &p("embeddings.ln.bias"))?;
    let mut h = g.layer_norm(e, ln_g, ln_b, T::from_f64(LN_EPS))?;

    let mut bias = vec![T::zero(); n_slots];
    bias.extend(
        seq.mask()
            .iter()
            .map(|&m| if m == 1 { T::zero() } else { T::from_f64(MASK_BIAS) }),
    );
    let key_bias = g.constant(Tensor::new(&[total], bias)?);

    let mut layers = Vec::with_capacity(config.layers + 1);
    for l in 0..config.layers {
        if let SlotHook::Prefix(ps) = &hooks.slots {
            h = apply_prefix(g, h, ps[l + 1])?;
        }
        layers.push(h);
        let lora = hooks.lora.get(l);
        let a = attention_block(g, store, root, config, l, h, key_bias, lora)?;
        h = ffn_block(g, store, root, config, l, a)?;
    }
    layers.push(h);
    Ok(Encoded {
        layers,
        slots: n_slots,
    })
}

/// Multi-head self-attention with residual and layer norm.
///
/// `key_bias` (length = sequence) is added to every attention logit row;
/// masked keys carry a large negative bias.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    root: &str,
    config: &EncoderConfig,
    layer: usize,
    hidden: Var,
    key_bias: Var,
    lora: Option<&LayerLora>,
) -> Result<Var> {
    let d = config.dim;
    if g.value(hidden).cols() != d {
        return Err(Error::Shape {
            op: "attention_block",
            left: g.value(hidden).shape().to_vec(),
            right: vec![d],
        });
    }
    let p = |local: &str| param_name(root, &format!("layer.{layer}.{local}"));
    let proj = |g: &mut Graph<T>, which: &str, hook: Option<LoraHook>| -> Result<Var> {
        let w = g.param(store, &p(&format!("attn.{which}.weight")))?;
        let b = g.param(store, &p(&format!("attn.{which}.bias")))?;
        lora_forward(g, hidden, w, b, hook)
    };
    let q = proj(g, "wq", lora.and_then(|l| l.q))?;
    let k = proj(g, "wk", None)?;
    let v = proj(g, "wv", lora.and_then(|l| l.v))?;

    let dh = config.head_dim();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let s = g.add_row(s, key_bias)?;
        let a = g.softmax_rows(s)?;
        let a = g.dropout(a, config.dropout)?;
        heads.push(g.matmul(a, vh)?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let w = g.param(store, &p("attn.dense.weight"))?;
    let b = g.param(store, &p("attn.dense.bias"))?;
    let out = lora_forward(g, ctx, w, b, lora.and_then(|l| l.dense))?;
    let res = g.add(out, hidden)?;
    let lg = g.param(store, &p("ln1.gain"))?;
    let lb = g.param(store, &p("ln1.bias"))?;
    g.layer_norm(res, lg, lb, T::from_f64(LN_EPS))
}

fn ffn_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    root: &str,
    config: &EncoderConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let p = |local: &str| param_name(root, &format!("layer.{layer}.{local}"));
    let w1 = g.param(store, &p("ffn.up.weight"))?;
    let b1 = g.param(store, &p("ffn.up.bias"))?;
    let w2 = g.param(store, &p("ffn.down.weight"))?;
    let b2 = g.param(store, &p("ffn.down.bias"))?;
    let u = g.linear(x, w1, Some(b1))?;
    let u = g.gelu(u)?;
    let o = g.linear(u, w2, Some(b2))?;
    let o = g.dropout(o, config.dropout)?;
    let res = g.add(o, x)?;
    let lg = g.param(store, &p("ln2.gain"))?;
    let lb = g.param(store, &p("ln2.bias"))?;
    g.layer_norm(res, lg, lb, T::from_f64(LN_EPS))
}

/// Encodes on a fresh inference tape and returns the `L + 1` state tensors.
pub fn encode_values<T: Scalar>(
    store: &ParamStore<T>,
    config: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let enc = encode(&mut g, store, "", config, seq, &AdapterHooks::none())?;
    Ok(enc.layers.iter().map(|&v| g.value(v).clone()).collect())
}

/// Schedule of the masked-token surrogate pre-training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            mask_prob: 0.15,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Result of [`pretrain_masked`]: the encoder plus the (discardable) prediction head.
#[derive(Debug, Clone)]
pub struct Pretrained<T> {
    pub encoder: ParamStore<T>,
    pub head: ParamStore<T>,
    pub losses: Vec<f64>,
}

const HEAD_W: &str = "mlm.weight";
const HEAD_B: &str = "mlm.bias";

fn mask_positions(rng: &mut rng::Rng, seq: &TokenSequence, prob: f64) -> Vec<usize> {
    let candidates: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.mask()[i] == 1 && seq.ids()[i] >= special::FIRST_WORD)
        .collect();
    let mut picked: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < prob)
        .collect();
    if picked.is_empty() && !candidates.is_empty() {
        picked.push(candidates[rng.random_range(0..candidates.len())]);
    }
    picked
}

fn masked_logits<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &ParamStore<T>,
    head: &ParamStore<T>,
    config: &EncoderConfig,
    seq: &TokenSequence,
    positions: &[usize],
) -> Result<Var> {
    let mut ids = seq.ids().to_vec();
    for &i in positions {
        ids[i] = special::MASK;
    }
    let masked = TokenSequence::new(ids, seq.mask().to_vec(), seq.segments().to_vec())?;
    let enc = encode(g, encoder, "", config, &masked, &AdapterHooks::none())?;
    let rows = g.gather_rows(enc.last(), positions)?;
    let w = g.param(head, HEAD_W)?;
    let b = g.param(head, HEAD_B)?;
    g.linear(rows, w, Some(b))
}

/// Trains a fresh encoder with masked-token prediction.
///
/// Deterministic in `schedule.seed`; with zero steps the result is the
/// seeded initialization.
pub fn pretrain_masked<T: Scalar>(
    corpus: &[TokenSequence],
    config: &EncoderConfig,
    schedule: &PretrainSchedule,
) -> Result<Pretrained<T>> {
    if corpus.is_empty() {
        return Err(Error::Data("pre-training corpus is empty".into()));
    }
    if !(schedule.mask_prob > 0.0 && schedule.mask_prob < 1.0) {
        return Err(Error::Config(format!("mask probability {} outside (0, 1)", schedule.mask_prob)));
    }
    let mut encoder = new_encoder::<T>(config, schedule.seed);
    let mut head = ParamStore::new();
    head.insert(
        HEAD_W,
        rng::normal_named(schedule.seed, HEAD_W, &[config.vocab_size, config.dim], INIT_STD),
        true,
    )?;
    head.insert(HEAD_B, Tensor::zeros(&[config.vocab_size]), true)?;

    let mut sampler = rng::stream(schedule.seed, "pretrain.batches");
    let mut enc_opt = AdamState::new(AdamConfig::default());
    let mut head_opt = AdamState::new(AdamConfig::default());
    let lrs = LrGroups::new().with("", schedule.lr);
    let batch = schedule.batch_size.max(1).min(corpus.len());
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let picks = sample(&mut sampler, corpus.len(), batch).into_vec();
        let mut g = Graph::training(schedule.seed ^ (step as u64).wrapping_mul(0x9e37_79b9));
        let mut terms = Vec::with_capacity(batch);
        for i in picks {
            let seq = &corpus[i];
            let positions = mask_positions(&mut sampler, seq, schedule.mask_prob);
            if positions.is_empty() {
                continue;
            }
            let targets: Vec<usize> = positions.iter().map(|&p| seq.ids()[p] as usize).collect();
            let logits = masked_logits(&mut g, &encoder, &head, config, seq, &positions)?;
            terms.push(g.cross_entropy(logits, &targets)?);
        }
        if terms.is_empty() {
            continue;
        }
        let stacked = g.concat_rows(&terms)?;
        let loss = g.mean(stacked)?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: step });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let named = grads.named(&encoder);
        enc_opt.step(&mut encoder, &named, &lrs)?;
        let named = grads.named(&head);
        head_opt.step(&mut head, &named, &lrs)?;
    }
    Ok(Pretrained { encoder, head, losses })
}

/// Fraction of masked positions whose most likely token is the original one.
pub fn masked_token_accuracy<T: Scalar>(
    pretrained: &Pretrained<T>,
    config: &EncoderConfig,
    held_out: &[TokenSequence],
    mask_prob: f64,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "pretrain.eval");
    let (mut hits, mut total) = (0usize, 0usize);
    for seq in held_out {
        let positions = mask_positions(&mut r, seq, mask_prob);
        if positions.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let logits = masked_logits(&mut g, &pretrained.encoder, &pretrained.head, config, seq, &positions)?;
        let lt = g.value(logits);
        for (row, &p) in positions.iter().enumerate() {
            let best = lt
                .row(row)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            hits += usize::from(best == seq.ids()[p] as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no maskable positions in held-out data".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig::tiny(2, 8, 2, 20, 32).unwrap().with_dropout(0.0).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_ids(ids.to_vec()).unwrap()
    }

    #[test]
    fn rejects_heads_not_dividing_dim() {
        assert!(matches!(EncoderConfig::new(1, 10, 3, 8, 10, 16), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_contract() {
        let cfg = tiny();
        let store = new_encoder::<f64>(&cfg, 1);
        let out = encode_values(&store, &cfg, &seq(&[1, 7, 8, 9, 2])).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.rows() == 5 && t.cols() == 8));
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = tiny();
        let store = new_encoder::<f32>(&cfg, 3);
        let a = encode_values(&store, &cfg, &seq(&[1, 5, 6, 2])).unwrap();
        let b = encode_values(&store, &cfg, &seq(&[1, 5, 6, 2])).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn pad_extension_leaves_real_positions_unchanged() {
        let cfg = tiny();
        let store = new_encoder::<f64>(&cfg, 5);
        let base = seq(&[1, 11, 12, 13, 2]);
        let a = encode_values(&store, &cfg, &base).unwrap();
        for extra in [1, 4, 9] {
            let b = encode_values(&store, &cfg, &base.padded(extra)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for r in 0..5 {
                    for (u, v) in x.row(r).iter().zip(y.row(r)) {
                        assert!((u - v).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn too_long_sequence_is_a_length_error() {
        let cfg = tiny();
        let store = new_encoder::<f32>(&cfg, 0);
        let long = seq(&[5; 33]);
        assert!(matches!(encode_values(&store, &cfg, &long), Err(Error::Length { len: 33, max: 32 })));
    }

    #[test]
    fn padding_must_be_a_suffix() {
        assert!(TokenSequence::new(vec![1, 0, 5], vec![1, 0, 1], vec![0, 0, 0]).is_err());
        assert!(TokenSequence::new(vec![1, 5, 0], vec![1, 1, 0], vec![0, 0, 0]).is_ok());
    }

    #[test]
    fn count_matches_enumeration_and_is_linear_in_layers() {
        let cfg = EncoderConfig::new(1, 4, 2, 8, 10, 16).unwrap();
        let store = new_encoder::<f32>(&cfg, 0);
        assert_eq!(count_parameters(&cfg), store.numel());
        let doubled = cfg.with_layers(2).unwrap();
        assert_eq!(count_parameters(&doubled) - count_parameters(&cfg), cfg.layer_parameters());
        assert_eq!(new_encoder::<f32>(&doubled, 0).numel(), count_parameters(&doubled));
    }

    #[test]
    fn bert_base_count() {
        let n = count_parameters(&EncoderConfig::bert_base());
        assert_eq!(n, 108_891_648);
        assert!((108_000_000..=112_000_000).contains(&n));
    }

    #[test]
    fn names_follow_the_scheme() {
        let store = new_encoder::<f32>(&tiny(), 0);
        assert!(store.names().all(is_encoder_name));
        assert!(!is_encoder_name("layer.x.attn.wq.weight"));
        assert!(!is_encoder_name("layer.0.attn.wz.weight"));
        assert!(!is_encoder_name("lora.0.q.A"));
    }

    /// One position: the attention weight is exactly 1, so the block is
    /// `LN(dense(value(x)) + x)`.
    #[test]
    fn single_token_attention() {
        let cfg = tiny();
        let store = new_encoder::<f64>(&cfg, 9);
        let x = Tensor::from_f64(&[1, 8], &[0.3, -0.1, 0.8, 0.0, -0.5, 0.2, 0.1, 0.4]).unwrap();
        let mut g = Graph::new();
        let h = g.constant(x.clone());
        let kb = g.constant(Tensor::zeros(&[1]));
        let out = attention_block(&mut g, &store, "", &cfg, 0, h, kb, None).unwrap();

        let w = |n: &str| store.get(&format!("layer.0.attn.{n}")).unwrap().clone();
        let v = crate::tensor::matmul_nt(&x, &w("wv.weight")).unwrap();
        let v = add_vec(&v, &w("wv.bias"));
        let o = crate::tensor::matmul_nt(&v, &w("dense.weight")).unwrap();
        let o = add_vec(&add_vec(&o, &w("dense.bias")), &x);
        let ln = |n: &str| store.get(&format!("layer.0.ln1.{n}")).unwrap().clone();
        let want = crate::tensor::layer_norm(&o, &ln("gain"), &ln("bias"), 1e-12).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }

    fn add_vec(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::new(a.shape(), data).unwrap()
    }

    /// d = 2, one head, two tokens, computed by hand.
    #[test]
    fn two_token_hand_computation() {
        let cfg = EncoderConfig::new(1, 2, 1, 2, 4, 8).unwrap().with_dropout(0.0).unwrap();
        let mut store = ParamStore::<f64>::new();
        let put = |s: &mut ParamStore<f64>, n: &str, v: &[f64], shape: &[usize]| {
            s.insert(format!("layer.0.{n}"), Tensor::from_f64(shape, v).unwrap(), true).unwrap();
        };
        put(&mut store, "attn.wq.weight", &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        put(&mut store, "attn.wk.weight", &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        put(&mut store, "attn.wv.weight", &[2.0, 0.0, 0.0, 1.0], &[2, 2]);
        put(&mut store, "attn.dense.weight", &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        for n in ["wq", "wk", "wv", "dense"] {
            put(&mut store, &format!("attn.{n}.bias"), &[0.0, 0.0], &[2]);
        }
        put(&mut store, "ln1.gain", &[1.0, 1.0], &[2]);
        put(&mut store, "ln1.bias", &[0.0, 0.0], &[2]);
        // x1 = [1, 0], x2 = [0, 1]; logits scaled by 1/√2.
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let kb = g.constant(Tensor::zeros(&[2]));
        let out = attention_block(&mut g, &store, "", &cfg, 0, h, kb, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let (p_self, p_other) = (s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0));
        // row 1: ctx = p_self·[2,0] + p_other·[0,1]; plus residual [1,0]; LN of 2 values → ±1.
        let r1 = [2.0 * p_self + 1.0, p_other];
        let r2 = [2.0 * p_other, p_self + 1.0];
        let sign = |r: [f64; 2]| if r[0] > r[1] { [1.0, -1.0] } else { [-1.0, 1.0] };
        let got = g.value(out);
        for (row, r) in [r1, r2].into_iter().enumerate() {
            let d = (r[0] - r[1]).abs() / 2.0;
            let expect = sign(r).map(|v| v * d / (d * d + 1e-12).sqrt());
            assert!((got.get2(row, 0) - expect[0]).abs() < 1e-9);
            assert!((got.get2(row, 1) - expect[1]).abs() < 1e-9);
        }
    }

    fn toy_corpus(n: usize, seed: u64) -> Vec<TokenSequence> {
        // Two "languages": ids 5..10 follow each other cyclically, as do 10..15.
        let mut r = rng::stream(seed, "toy");
        (0..n)
            .map(|_| {
                let base = if r.random::<bool>() { 5 } else { 10 };
                let start = r.random_range(0..5u32);
                let mut ids = vec![special::CLS];
                ids.extend((0..8).map(|k| base + (start + k) % 5));
                ids.push(special::SEP);
                TokenSequence::from_ids(ids).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_step_pretraining_returns_initialization() {
        let cfg = tiny();
        let p = pretrain_masked::<f32>(&toy_corpus(4, 0), &cfg, &PretrainSchedule { steps: 0, seed: 4, ..Default::default() })
            .unwrap();
        assert!(p.encoder.bit_eq(&new_encoder(&cfg, 4)));
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let r = pretrain_masked::<f32>(&[], &tiny(), &PretrainSchedule::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn pretraining_beats_chance_and_is_deterministic() {
        let cfg = EncoderConfig::tiny(2, 16, 2, 16, 32).unwrap();
        let corpus = toy_corpus(64, 1);
        let schedule = PretrainSchedule {
            steps: 200,
            batch_size: 8,
            mask_prob: 0.15,
            lr: 3e-3,
            seed: 11,
        };
        let a = pretrain_masked::<f32>(&corpus, &cfg, &schedule).unwrap();
        let b = pretrain_masked::<f32>(&corpus, &cfg, &schedule).unwrap();
        assert!(a.encoder.bit_eq(&b.encoder));
        let acc = masked_token_accuracy(&a, &cfg, &toy_corpus(64, 2), 0.15, 3).unwrap();
        let chance = 1.0 / cfg.vocab_size() as f64;
        assert!(acc > chance, "accuracy {acc} vs chance {chance}");
    }
}

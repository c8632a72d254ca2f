//! Lightweight fine-tuning modules: prompt vectors, prefix generators,
//! low-rank adapters, freeze plans, the hybrid stage schedule and
//! trainable-parameter accounting.
//!
//! Adapter parameter names:
//! - `prompt.embeddings` `[prompt_len × d]`
//! - `prefix.source` `[prefix_len × source_dim]`, shared by every generator
//! - `{group}.mlp.{p}.{down,up}.{weight,bias}` for prepend point `p` in
//!   `0..=L`, where `group` is `prefix` (common) or `prefix.{query,document}`
//! - `lora.{l}.{target}.{A,B}`, or `lora.{l}.{target}.{query,document}.{A,B}`
//!   for tower-specific adapters

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{self, EncoderConfig, LoraHook};
use crate::tensor::{matmul, rng, Graph, ParamStore, Scalar, Tensor, Var};
use crate::towers::{SsPrefixVariant, Tower, TowerBinding};
use crate::{Error, Result};

pub const PROMPT: &str = "prompt.embeddings";
pub const PREFIX_SOURCE: &str = "prefix.source";
pub const LORA_INIT_STD: f64 = 0.02;
const MLP_INIT_STD: f64 = 0.02;
const SOURCE_INIT_STD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixSpec {
    pub prefix_len: usize,
    pub source_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for PrefixSpec {
    fn default() -> Self {
        Self {
            prefix_len: 10,
            source_dim: 768,
            mlp_hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Projection a low-rank adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LoraTarget {
    Query,
    Value,
    Dense,
}

impl LoraTarget {
    pub fn key(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Value => "v",
            Self::Dense => "dense",
        }
    }

    pub fn base_weight(self, layer: usize) -> String {
        let w = match self {
            Self::Query => "wq",
            Self::Value => "wv",
            Self::Dense => "dense",
        };
        format!("layer.{layer}.attn.{w}.weight")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridMode {
    Sequential,
    Concurrent,
}

/// A fine-tuning method.
#[derive(Debug, Clone, PartialEq)]
pub enum LftSpec {
    FullFt,
    Prompt { prompt_len: usize },
    Prefix(PrefixSpec),
    /// Adapters on the query and value projections.
    Lora(LoraSpec),
    /// Adapters on query, value and the post-attention dense projection.
    LoraPlus(LoraSpec),
    Hybrid {
        first: Box<LftSpec>,
        second: Box<LftSpec>,
        mode: HybridMode,
        m_epochs: usize,
        n_epochs: usize,
    },
}

impl LftSpec {
    pub fn hybrid(first: LftSpec, second: LftSpec, mode: HybridMode, m_epochs: usize, n_epochs: usize) -> Self {
        Self::Hybrid {
            first: Box::new(first),
            second: Box::new(second),
            mode,
            m_epochs,
            n_epochs,
        }
    }

    /// The non-hybrid members (one, or two for a hybrid).
    pub fn members(&self) -> Vec<&LftSpec> {
        match self {
            Self::Hybrid { first, second, .. } => vec![first, second],
            other => vec![other],
        }
    }

    pub fn prefix(&self) -> Option<PrefixSpec> {
        self.members().into_iter().find_map(|m| match m {
            Self::Prefix(p) => Some(*p),
            _ => None,
        })
    }

    pub fn lora(&self) -> Option<(LoraSpec, &'static [LoraTarget])> {
        self.members().into_iter().find_map(|m| match m {
            Self::Lora(l) => Some((*l, &[LoraTarget::Query, LoraTarget::Value][..])),
            Self::LoraPlus(l) => Some((*l, &[LoraTarget::Query, LoraTarget::Value, LoraTarget::Dense][..])),
            _ => None,
        })
    }

    pub fn prompt_len(&self) -> Option<usize> {
        self.members().into_iter().find_map(|m| match m {
            Self::Prompt { prompt_len } => Some(*prompt_len),
            _ => None,
        })
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Self::FullFt)
    }

    /// Leading slot positions this method occupies.
    pub fn slot_len(&self) -> usize {
        self.prefix()
            .map(|p| p.prefix_len)
            .or(self.prompt_len())
            .unwrap_or(0)
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        match self {
            Self::FullFt => Ok(()),
            Self::Prompt { prompt_len } => {
                if *prompt_len == 0 {
                    return Err(Error::Config("prompt_len must be at least 1".into()));
                }
                config.check_slots(*prompt_len)
            }
            Self::Prefix(p) => {
                if p.prefix_len == 0 || p.source_dim == 0 || p.mlp_hidden == 0 {
                    return Err(Error::Config("prefix_len, source_dim and mlp_hidden must be positive".into()));
                }
                config.check_slots(p.prefix_len)
            }
            Self::Lora(l) | Self::LoraPlus(l) => {
                if l.rank == 0 || l.rank >= config.dim() {
                    return Err(Error::Config(format!(
                        "LoRA rank {} must be in [1, {})",
                        l.rank,
                        config.dim()
                    )));
                }
                if !(0.0..1.0).contains(&l.dropout) {
                    return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", l.dropout)));
                }
                Ok(())
            }
            Self::Hybrid { first, second, .. } => {
                for m in [first, second] {
                    if matches!(**m, Self::Hybrid { .. } | Self::FullFt) {
                        return Err(Error::Config("hybrid members must be lightweight, non-hybrid methods".into()));
                    }
                    m.validate(config)?;
                }
                let slots = usize::from(first.slot_len() > 0) + usize::from(second.slot_len() > 0);
                let lora = usize::from(first.lora().is_some()) + usize::from(second.lora().is_some());
                if slots > 1 || lora > 1 {
                    return Err(Error::Config("hybrid members must touch different parts of the encoder".into()));
                }
                Ok(())
            }
        }
    }

    /// Whether `name` is a parameter owned by this (non-hybrid) method.
    pub fn owns(&self, name: &str) -> bool {
        match self {
            Self::FullFt => is_base_name(name),
            Self::Prompt { .. } => name.starts_with("prompt."),
            Self::Prefix(_) => name.starts_with("prefix."),
            Self::Lora(_) | Self::LoraPlus(_) => name.starts_with("lora."),
            Self::Hybrid { first, second, .. } => first.owns(name) || second.owns(name),
        }
    }
}

/// Encoder base parameters, including a heterogeneous document encoder under `doc.`.
pub fn is_base_name(name: &str) -> bool {
    let local = name.strip_prefix("doc.").unwrap_or(name);
    encoder::is_encoder_name(local)
}

pub fn is_ranker_name(name: &str) -> bool {
    name.starts_with("ranker.")
}

// ---------------------------------------------------------------- prefixes

/// MLP group names generating prefixes for `binding`.
pub fn prefix_groups(binding: &TowerBinding) -> Vec<&'static str> {
    match binding.ss_prefix() {
        Some(SsPrefixVariant::Average) | Some(SsPrefixVariant::Concat { .. }) => {
            vec!["prefix", "prefix.query", "prefix.document"]
        }
        Some(SsPrefixVariant::None) => vec!["prefix.query", "prefix.document"],
        None => vec!["prefix"],
    }
}

pub fn prefix_mlp_name(group: &str, point: usize, part: &str) -> String {
    format!("{group}.mlp.{point}.{part}")
}

fn init_prefix<T: Scalar>(
    p: &PrefixSpec,
    groups: &[&str],
    config: &EncoderConfig,
    seed: u64,
    store: &mut ParamStore<T>,
) -> Result<()> {
    store.insert(
        PREFIX_SOURCE,
        rng::normal_named(seed, PREFIX_SOURCE, &[p.prefix_len, p.source_dim], SOURCE_INIT_STD),
        true,
    )?;
    for group in groups {
        for point in 0..=config.layers() {
            let n = |part: &str| prefix_mlp_name(group, point, part);
            store.insert(n("down.weight"), rng::normal_named(seed, &n("down.weight"), &[p.mlp_hidden, p.source_dim], MLP_INIT_STD), true)?;
            store.insert(n("down.bias"), Tensor::zeros(&[p.mlp_hidden]), true)?;
            store.insert(n("up.weight"), rng::normal_named(seed, &n("up.weight"), &[config.dim(), p.mlp_hidden], MLP_INIT_STD), true)?;
            store.insert(n("up.bias"), Tensor::zeros(&[config.dim()]), true)?;
        }
    }
    Ok(())
}

/// Prefixes of one generator group: for point `p`, row `i` is
/// `up_p(ReLU(down_p(source[i])))`. Returns `L + 1` tensors of `[prefix_len × d]`.
pub fn materialize_prefixes<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    group: &str,
    layers: usize,
) -> Result<Vec<Var>> {
    let source = g.param(store, PREFIX_SOURCE)?;
    (0..=layers)
        .map(|point| {
            let n = |part: &str| prefix_mlp_name(group, point, part);
            let dw = g.param(store, &n("down.weight"))?;
            let db = g.param(store, &n("down.bias"))?;
            let uw = g.param(store, &n("up.weight"))?;
            let ub = g.param(store, &n("up.bias"))?;
            let h = g.linear(source, dw, Some(db))?;
            let h = g.relu(h)?;
            g.linear(h, uw, Some(ub))
        })
        .collect()
}

/// [`materialize_prefixes`] evaluated to plain tensors.
pub fn materialize_prefix_values<T: Scalar>(store: &ParamStore<T>, group: &str, layers: usize) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars = materialize_prefixes(&mut g, store, group, layers)?;
    Ok(vars.iter().map(|&v| g.value(v).clone()).collect())
}

/// Prepends trainable prompt vectors to an embedding matrix.
pub fn prompt_prepend<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    prompt: Option<Var>,
    max_seq_len: usize,
) -> Result<Var> {
    let Some(prompt) = prompt else { return Ok(embeddings) };
    let total = g.value(prompt).rows() + g.value(embeddings).rows();
    if total > max_seq_len {
        return Err(Error::Length {
            len: total,
            max: max_seq_len,
        });
    }
    g.concat_rows(&[prompt, embeddings])
}

// -------------------------------------------------------------------- LoRA

pub fn lora_name(layer: usize, target: LoraTarget, tower: Option<Tower>, part: &str) -> String {
    match tower {
        None => format!("lora.{layer}.{}.{part}", target.key()),
        Some(t) => format!("lora.{layer}.{}.{}.{part}", target.key(), t.key()),
    }
}

fn init_lora<T: Scalar>(
    spec: &LoraSpec,
    targets: &[LoraTarget],
    binding: &TowerBinding,
    config: &EncoderConfig,
    seed: u64,
    store: &mut ParamStore<T>,
) -> Result<()> {
    let d = config.dim();
    for layer in 0..config.layers() {
        for &target in targets {
            let towers: Vec<Option<Tower>> = if binding.lora_is_tower_specific(target) {
                vec![Some(Tower::Query), Some(Tower::Document)]
            } else {
                vec![None]
            };
            for tower in towers {
                let a = lora_name(layer, target, tower, "A");
                store.insert(&*a, rng::normal_named(seed, &a, &[spec.rank, d], LORA_INIT_STD), true)?;
                store.insert(lora_name(layer, target, tower, "B"), Tensor::zeros(&[d, spec.rank]), true)?;
            }
        }
    }
    Ok(())
}

/// `x·W0ᵀ + bias + scale · (dropout(x)·Aᵀ)·Bᵀ`; without a hook, the plain projection.
pub fn lora_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w0: Var, bias: Var, hook: Option<LoraHook>) -> Result<Var> {
    let base = g.linear(x, w0, Some(bias))?;
    let Some(h) = hook else { return Ok(base) };
    let xd = g.dropout(x, h.dropout)?;
    let t = g.matmul_nt(xd, h.a)?;
    let u = g.matmul_nt(t, h.b)?;
    let u = g.scale(u, T::from_f64(h.scale))?;
    g.add(base, u)
}

/// `W0 + scale · B·A`.
pub fn lora_merge<T: Scalar>(w0: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    let ba = matmul(b, a)?;
    if ba.shape() != w0.shape() {
        return Err(Error::Shape {
            op: "lora_merge",
            left: w0.shape().to_vec(),
            right: ba.shape().to_vec(),
        });
    }
    let s = T::from_f64(scale);
    let data = w0.data().iter().zip(ba.data()).map(|(&w, &d)| w + s * d).collect();
    Tensor::new(w0.shape(), data)
}

/// Folds every shared adapter of `spec` into its base weight and zeroes `B`.
///
/// Tower-specific adapters cannot be folded into one shared base.
pub fn merge_lora_into_base<T: Scalar>(
    store: &mut ParamStore<T>,
    spec: &LftSpec,
    binding: &TowerBinding,
    config: &EncoderConfig,
) -> Result<usize> {
    let Some((lora, targets)) = spec.lora() else {
        return Err(Error::Config("method has no LoRA adapters to merge".into()));
    };
    let mut merged = 0;
    for &target in targets {
        if binding.lora_is_tower_specific(target) {
            return Err(Error::Config(format!(
                "tower-specific `{}` adapters cannot be merged into the shared encoder",
                target.key()
            )));
        }
    }
    for layer in 0..config.layers() {
        for &target in targets {
            let a = store.get(&lora_name(layer, target, None, "A"))?.clone();
            let bn = lora_name(layer, target, None, "B");
            let b = store.get(&bn)?.clone();
            let wn = target.base_weight(layer);
            let w = lora_merge(store.get(&wn)?, &a, &b, lora.scale())?;
            *store.get_mut(&wn)? = w;
            *store.get_mut(&bn)? = Tensor::zeros(b.shape());
            merged += 1;
        }
    }
    Ok(merged)
}

/// Creates every adapter parameter `spec` needs under `binding`.
pub fn init_adapters<T: Scalar>(
    spec: &LftSpec,
    binding: &TowerBinding,
    config: &EncoderConfig,
    seed: u64,
    store: &mut ParamStore<T>,
) -> Result<()> {
    spec.validate(config)?;
    if let Some(len) = spec.prompt_len() {
        store.insert(PROMPT, rng::normal_named(seed, PROMPT, &[len, config.dim()], 0.02), true)?;
    }
    if let Some(p) = spec.prefix() {
        init_prefix(&p, &prefix_groups(binding), config, seed, store)?;
    }
    if let Some((l, targets)) = spec.lora() {
        init_lora(&l, targets, binding, config, seed, store)?;
    }
    Ok(())
}

// ------------------------------------------------------------ freeze plans

/// Names of the parameters an optimizer may update; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezePlan {
    pub trainable: BTreeSet<String>,
}

impl FreezePlan {
    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.set_trainable_where(|n| self.trainable.contains(n));
    }

    /// Elements of the planned parameters, excluding the ranker head.
    pub fn adapter_numel<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.numel_where(|n| self.contains(n) && !is_ranker_name(n))
    }
}

/// Ranker parameters plus those owned by `active` (all hybrid members when given a hybrid).
pub fn build_freeze_plan<T: Scalar>(active: &LftSpec, store: &ParamStore<T>) -> FreezePlan {
    FreezePlan {
        trainable: store
            .names()
            .filter(|n| is_ranker_name(n) || active.owns(n))
            .map(ToString::to_string)
            .collect(),
    }
}

/// Which hybrid member trains during an epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum HybridStage<'a> {
    /// Sequential stage 1: only `first` trains.
    First { active: &'a LftSpec },
    /// Sequential stage 2: `first` is frozen at its best checkpoint.
    /// `entering` is true on the boundary epoch, when that restore happens.
    Second {
        active: &'a LftSpec,
        frozen: &'a LftSpec,
        entering: bool,
    },
    /// Both members train every epoch.
    Concurrent { members: [&'a LftSpec; 2] },
}

impl HybridStage<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Self::First { .. } => "stage1",
            Self::Second { .. } => "stage2",
            Self::Concurrent { .. } => "concurrent",
        }
    }

    pub fn plan<T: Scalar>(&self, store: &ParamStore<T>) -> FreezePlan {
        match self {
            Self::First { active } | Self::Second { active, .. } => build_freeze_plan(active, store),
            Self::Concurrent { members } => FreezePlan {
                trainable: store
                    .names()
                    .filter(|n| is_ranker_name(n) || members.iter().any(|m| m.owns(n)))
                    .map(ToString::to_string)
                    .collect(),
            },
        }
    }
}

/// The schedule position of `epoch` within a hybrid of `m + n` epochs.
pub fn hybrid_stage(spec: &LftSpec, epoch: usize) -> Result<HybridStage<'_>> {
    let LftSpec::Hybrid {
        first,
        second,
        mode,
        m_epochs,
        n_epochs,
    } = spec
    else {
        return Err(Error::Schedule("not a hybrid method".into()));
    };
    if epoch >= m_epochs + n_epochs {
        return Err(Error::Schedule(format!(
            "epoch {epoch} beyond the {} + {} epoch schedule",
            m_epochs, n_epochs
        )));
    }
    Ok(match mode {
        HybridMode::Concurrent => HybridStage::Concurrent {
            members: [first, second],
        },
        HybridMode::Sequential if epoch < *m_epochs => HybridStage::First { active: first },
        HybridMode::Sequential => HybridStage::Second {
            active: second,
            frozen: first,
            entering: epoch == *m_epochs,
        },
    })
}

// --------------------------------------------------------------- counting

/// How adapter parameters are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountConvention {
    /// Everything the optimizer updates (prefix generators included).
    Optimizer,
    /// What a deployment keeps: materialized prefixes instead of their generators.
    Retained,
}

/// Trainable parameters of `spec` under `binding`, ranker head excluded.
pub fn count_trainable(
    spec: &LftSpec,
    binding: &TowerBinding,
    config: &EncoderConfig,
    convention: CountConvention,
) -> usize {
    let (d, layers) = (config.dim(), config.layers());
    match spec {
        LftSpec::FullFt => {
            let towers = if matches!(binding, TowerBinding::HeteroFullBi) { 2 } else { 1 };
            towers * encoder::count_parameters(config)
        }
        LftSpec::Prompt { prompt_len } => prompt_len * d,
        LftSpec::Prefix(p) => {
            let points = layers + 1;
            match convention {
                CountConvention::Retained => {
                    let slots = match binding.ss_prefix() {
                        None => p.prefix_len,
                        Some(SsPrefixVariant::Average) => 3 * p.prefix_len,
                        Some(SsPrefixVariant::None) => 2 * p.prefix_len,
                        Some(SsPrefixVariant::Concat { common_len }) => {
                            let k = common_len.min(p.prefix_len);
                            2 * k + (p.prefix_len - k)
                        }
                    };
                    slots * points * d
                }
                CountConvention::Optimizer => {
                    let mlp = p.source_dim * p.mlp_hidden + p.mlp_hidden + p.mlp_hidden * d + d;
                    p.prefix_len * p.source_dim + prefix_groups(binding).len() * points * mlp
                }
            }
        }
        LftSpec::Lora(l) | LftSpec::LoraPlus(l) => {
            let (_, targets) = spec.lora().expect("LoRA member");
            let per = l.rank * (d + d);
            targets
                .iter()
                .map(|&t| if binding.lora_is_tower_specific(t) { 2 * per } else { per })
                .sum::<usize>()
                * layers
        }
        LftSpec::Hybrid { first, second, .. } => {
            count_trainable(first, binding, config, convention) + count_trainable(second, binding, config, convention)
        }
    }
}

/// One significant figure below ten million, two from there up, with K/M suffixes
/// (7,680 → `8K`, 589,824 → `0.6M`, 984,576 → `1M`, 108,891,648 → `110M`).
pub fn format_count(n: usize) -> String {
    if n < 1000 {
        return n.to_string();
    }
    let x = n as f64;
    let digits = if x >= 1e7 { 2 } else { 1 };
    let magnitude = libm::floor(libm::log10(x)) as i32;
    let unit = libm::pow(10.0, (magnitude + 1 - digits) as f64);
    let rounded = libm::round(x / unit) * unit;
    let trim = |v: f64| {
        let s = format!("{v:.1}");
        s.strip_suffix(".0").map(String::from).unwrap_or(s)
    };
    if rounded >= 1e5 {
        format!("{}M", trim(rounded / 1e6))
    } else {
        format!("{}K", trim(rounded / 1e3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_formatting_matches_table_style() {
        assert_eq!(format_count(7_680), "8K");
        assert_eq!(format_count(99_840), "0.1M");
        assert_eq!(format_count(589_824), "0.6M");
        assert_eq!(format_count(884_736), "0.9M");
        assert_eq!(format_count(689_664), "0.7M");
        assert_eq!(format_count(984_576), "1M");
        assert_eq!(format_count(108_891_648), "110M");
        assert_eq!(format_count(12), "12");
    }

    #[test]
    fn lora_hand_example() {
        // rank 1, A = [1, 0], B = [1, 0]ᵀ, alpha 1, x = [3, 5] adds [3, 0].
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[3.0, 5.0]]));
        let w = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(Tensor::zeros(&[2]));
        let a = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let bm = g.constant(Tensor::from_rows(&[&[1.0], &[0.0]]));
        let hook = LoraHook { a, b: bm, scale: 1.0, dropout: 0.0 };
        let h = lora_forward(&mut g, x, w, b, Some(hook)).unwrap();
        assert_eq!(g.value(h).data(), &[3.0, 0.0]);
    }

    #[test]
    fn zero_b_is_exactly_the_base_projection() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng::normal_named(1, "x", &[3, 4], 1.0));
        let w = g.constant(rng::normal_named(1, "w", &[4, 4], 1.0));
        let b = g.constant(rng::normal_named(1, "b", &[4], 1.0));
        let a = g.constant(rng::normal_named(1, "a", &[2, 4], 1.0));
        let bm = g.constant(Tensor::zeros(&[4, 2]));
        let plain = lora_forward(&mut g, x, w, b, None).unwrap();
        let hooked = lora_forward(&mut g, x, w, b, Some(LoraHook { a, b: bm, scale: 2.0, dropout: 0.0 })).unwrap();
        assert!(g.value(plain).bit_eq(g.value(hooked)));
    }

    #[test]
    fn merge_with_zero_b_is_bitwise_identity_and_matches_adapter_path() {
        let w0: Tensor<f64> = rng::normal_named(2, "w", &[4, 4], 1.0);
        let a: Tensor<f64> = rng::normal_named(2, "a", &[2, 4], 1.0);
        assert!(lora_merge(&w0, &a, &Tensor::zeros(&[4, 2]), 2.0).unwrap().bit_eq(&w0));

        let b: Tensor<f64> = rng::normal_named(2, "b", &[4, 2], 1.0);
        let merged = lora_merge(&w0, &a, &b, 2.0).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng::normal_named(2, "x", &[5, 4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let (wv, av, bv) = (g.constant(w0), g.constant(a), g.constant(b));
        let mv = g.constant(merged);
        let adapter = lora_forward(&mut g, x, wv, bias, Some(LoraHook { a: av, b: bv, scale: 2.0, dropout: 0.0 })).unwrap();
        let plain = lora_forward(&mut g, x, mv, bias, None).unwrap();
        assert!(g.value(adapter).max_abs_diff(g.value(plain)) < 1e-10);
    }

    #[test]
    fn merge_shape_mismatch_is_an_error() {
        let w0 = Tensor::<f64>::zeros(&[4, 3]);
        let a = Tensor::<f64>::zeros(&[2, 4]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(lora_merge(&w0, &a, &b, 1.0), Err(Error::Shape { .. })));
    }

    fn prefix_store(spec: PrefixSpec, layers: usize, d: usize) -> ParamStore<f64> {
        let cfg = EncoderConfig::tiny(layers, d, 1, 10, 32).unwrap();
        let mut s = ParamStore::new();
        init_adapters(&LftSpec::Prefix(spec), &TowerBinding::SiameseBi, &cfg, 5, &mut s).unwrap();
        s
    }

    #[test]
    fn zero_mlp_weights_give_the_up_bias() {
        let spec = PrefixSpec { prefix_len: 3, source_dim: 4, mlp_hidden: 5 };
        let mut s = prefix_store(spec, 2, 6);
        let names: Vec<String> = s.names().filter(|n| n.ends_with("weight")).map(String::from).collect();
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            *s.get_mut(&n).unwrap() = Tensor::zeros(&shape);
        }
        for point in 0..=2 {
            let bias = rng::normal_named::<f64>(9, &format!("bias{point}"), &[6], 1.0);
            *s.get_mut(&prefix_mlp_name("prefix", point, "up.bias")).unwrap() = bias;
        }
        let ps = materialize_prefix_values(&s, "prefix", 2).unwrap();
        assert_eq!(ps.len(), 3);
        for (point, p) in ps.iter().enumerate() {
            let bias = s.get(&prefix_mlp_name("prefix", point, "up.bias")).unwrap();
            for i in 0..3 {
                assert_eq!(p.row(i), bias.data());
            }
        }
    }

    #[test]
    fn hand_sized_prefix() {
        // source [1, -2]; down = I, bias 0 → relu → [1, 0]; up = [[2, 3], [4, 5]], bias [1, 1] → [3, 5].
        let spec = PrefixSpec { prefix_len: 1, source_dim: 2, mlp_hidden: 2 };
        let mut s = prefix_store(spec, 1, 2);
        *s.get_mut(PREFIX_SOURCE).unwrap() = Tensor::from_rows(&[&[1.0, -2.0]]);
        for point in 0..=1 {
            let n = |p: &str| prefix_mlp_name("prefix", point, p);
            *s.get_mut(&n("down.weight")).unwrap() = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
            *s.get_mut(&n("up.weight")).unwrap() = Tensor::from_rows(&[&[2.0, 3.0], &[4.0, 5.0]]);
            *s.get_mut(&n("up.bias")).unwrap() = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        }
        let ps = materialize_prefix_values(&s, "prefix", 1).unwrap();
        assert_eq!(ps[0].data(), &[3.0, 5.0]);
        assert_eq!(ps[1].data(), &[3.0, 5.0]);
    }

    #[test]
    fn perturbing_one_source_row_changes_only_that_index() {
        let spec = PrefixSpec { prefix_len: 5, source_dim: 4, mlp_hidden: 6 };
        let mut s = prefix_store(spec, 2, 8);
        let before = materialize_prefix_values(&s, "prefix", 2).unwrap();
        s.get_mut(PREFIX_SOURCE).unwrap().data_mut()[3 * 4 + 1] += 0.7;
        let after = materialize_prefix_values(&s, "prefix", 2).unwrap();
        for (b, a) in before.iter().zip(&after) {
            for i in 0..5 {
                let same = b.row(i) == a.row(i);
                assert_eq!(same, i != 3, "row {i}");
            }
        }
    }

    #[test]
    fn apply_prefix_replaces_slots() {
        let mut g = Graph::<f64>::new();
        let hidden = g.constant(rng::normal_named(3, "garbage", &[6, 4], 100.0));
        let prefix = g.constant(rng::normal_named(3, "p", &[2, 4], 1.0));
        let out = encoder::apply_prefix(&mut g, hidden, prefix).unwrap();
        let (o, p, h) = (g.value(out), g.value(prefix), g.value(hidden));
        assert_eq!(&o.data()[..8], p.data());
        assert_eq!(&o.data()[8..], &h.data()[8..]);
        let short = g.constant(Tensor::zeros(&[1, 4]));
        let long = g.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(encoder::apply_prefix(&mut g, short, long), Err(Error::Contract(_))));
    }

    #[test]
    fn prompt_prepend_checks_length() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::zeros(&[5, 4]));
        assert_eq!(prompt_prepend(&mut g, e, None, 8).unwrap(), e);
        let p = g.constant(Tensor::zeros(&[3, 4]));
        let out = prompt_prepend(&mut g, e, Some(p), 8).unwrap();
        assert_eq!(g.value(out).rows(), 8);
        let p4 = g.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(prompt_prepend(&mut g, e, Some(p4), 8), Err(Error::Length { .. })));
    }

    #[test]
    fn hybrid_schedule() {
        let spec = LftSpec::hybrid(
            LftSpec::Prefix(PrefixSpec::default()),
            LftSpec::Lora(LoraSpec::default()),
            HybridMode::Sequential,
            30,
            10,
        );
        assert!(matches!(hybrid_stage(&spec, 5).unwrap(), HybridStage::First { active: LftSpec::Prefix(_) }));
        assert!(matches!(
            hybrid_stage(&spec, 30).unwrap(),
            HybridStage::Second { active: LftSpec::Lora(_), entering: true, .. }
        ));
        assert!(matches!(hybrid_stage(&spec, 31).unwrap(), HybridStage::Second { entering: false, .. }));
        assert!(matches!(hybrid_stage(&spec, 40), Err(Error::Schedule(_))));

        let conc = LftSpec::hybrid(
            LftSpec::Prefix(PrefixSpec::default()),
            LftSpec::Lora(LoraSpec::default()),
            HybridMode::Concurrent,
            2,
            2,
        );
        for e in 0..4 {
            assert!(matches!(hybrid_stage(&conc, e).unwrap(), HybridStage::Concurrent { .. }));
        }
    }

    #[test]
    fn hybrid_validation() {
        let cfg = EncoderConfig::tiny(2, 16, 2, 10, 32).unwrap();
        let nested = LftSpec::hybrid(
            LftSpec::hybrid(LftSpec::Lora(LoraSpec::default()), LftSpec::Prefix(PrefixSpec::default()), HybridMode::Sequential, 1, 1),
            LftSpec::Lora(LoraSpec::default()),
            HybridMode::Sequential,
            1,
            1,
        );
        assert!(nested.validate(&cfg).is_err());
        let bad_rank = LftSpec::Lora(LoraSpec { rank: 16, ..Default::default() });
        assert!(bad_rank.validate(&cfg).is_err());
        let ok_rank = LftSpec::Lora(LoraSpec { rank: 4, ..Default::default() });
        assert!(ok_rank.validate(&cfg).is_ok());
    }
}

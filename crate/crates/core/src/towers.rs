//! Tower bindings: which adapter state the query tower and the document
//! tower each route through.
//!
//! Semi-Siamese towers share the frozen encoder and (partly) the adapters:
//! prefixes are composed from a common generator and a tower-specific one,
//! and LoRA targets are either one shared module or a query/document pair.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::{self, AdapterHooks, EncoderConfig, Encoded, LayerLora, LoraHook, SlotHook, TokenSequence};
use crate::lft::{self, LftSpec, LoraTarget};
use crate::tensor::{Graph, ParamStore, Scalar, Var};
use crate::{Error, Result};

/// Default split point of the concatenation variant: positions before it
/// come from the tower-specific generator.
pub const DEFAULT_COMMON_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tower {
    Query,
    Document,
}

impl Tower {
    pub fn key(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Document => "document",
        }
    }
}

/// How semi-Siamese prefixes combine common and tower-specific generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsPrefixVariant {
    /// Elementwise sum of common and tower-specific prefixes.
    Average,
    /// Positions `0..common_len` from the tower-specific generator, the rest from the common one.
    Concat { common_len: usize },
    /// Tower-specific prefixes only (the source is still shared).
    None,
}

/// Which LoRA targets get a query/document pair instead of one shared module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsLoraVariant {
    SharedQHeteroV,
    SharedVHeteroQ,
    HeteroBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerBinding {
    /// One joint tower over `[CLS] q [SEP] d [SEP]`.
    Cross,
    /// Two towers sharing every parameter.
    SiameseBi,
    /// `None` for a module means that module is shared Siamese-style.
    SemiSiameseBi {
        prefix: Option<SsPrefixVariant>,
        lora: Option<SsLoraVariant>,
    },
    /// Two independently fine-tuned full encoders (document encoder under `doc.`).
    HeteroFullBi,
}

impl TowerBinding {
    /// The suggested semi-Siamese variants for `spec`: averaged prefixes and a
    /// shared query adapter with tower-specific value adapters. Hybrids apply
    /// semi-Siamese routing to their LoRA member only.
    pub fn semi_siamese_for(spec: &LftSpec) -> Self {
        let hybrid = matches!(spec, LftSpec::Hybrid { .. });
        let prefix = (spec.prefix().is_some() && !hybrid).then_some(SsPrefixVariant::Average);
        let lora = spec.lora().is_some().then_some(SsLoraVariant::SharedQHeteroV);
        Self::SemiSiameseBi { prefix, lora }
    }

    pub fn is_bi_encoder(&self) -> bool {
        !matches!(self, Self::Cross)
    }

    pub fn ss_prefix(&self) -> Option<SsPrefixVariant> {
        match self {
            Self::SemiSiameseBi { prefix, .. } => *prefix,
            _ => None,
        }
    }

    pub fn ss_lora(&self) -> Option<SsLoraVariant> {
        match self {
            Self::SemiSiameseBi { lora, .. } => *lora,
            _ => None,
        }
    }

    pub fn lora_is_tower_specific(&self, target: LoraTarget) -> bool {
        matches!(
            (self.ss_lora(), target),
            (Some(SsLoraVariant::SharedQHeteroV), LoraTarget::Value)
                | (Some(SsLoraVariant::SharedVHeteroQ), LoraTarget::Query)
                | (Some(SsLoraVariant::HeteroBoth), LoraTarget::Query | LoraTarget::Value)
        )
    }

    /// Checks that the binding and the fine-tuning method fit together.
    pub fn validate(&self, spec: &LftSpec) -> Result<()> {
        match self {
            Self::Cross | Self::SiameseBi => Ok(()),
            Self::HeteroFullBi if spec.is_full() => Ok(()),
            Self::HeteroFullBi => Err(Error::Config(
                "hetero_full binding requires full fine-tuning".into(),
            )),
            Self::SemiSiameseBi { prefix, lora } => {
                if prefix.is_none() && lora.is_none() {
                    return Err(Error::Config(
                        "semi_siamese binding needs an ss.prefix or ss.lora variant".into(),
                    ));
                }
                if prefix.is_some() && spec.prefix().is_none() {
                    return Err(Error::Config("ss.prefix set but the method has no prefix module".into()));
                }
                if lora.is_some() && spec.lora().is_none() {
                    return Err(Error::Config("ss.lora set but the method has no LoRA module".into()));
                }
                if let (Some(SsPrefixVariant::Concat { common_len }), Some(p)) = (prefix, spec.prefix()) {
                    if *common_len > p.prefix_len {
                        return Err(Error::Config(format!(
                            "common prefix length {common_len} exceeds prefix length {}",
                            p.prefix_len
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Prefixes seen by `tower` for a semi-Siamese prefix variant: `L + 1` tensors of `[prefix_len × d]`.
pub fn ss_prefix_compose<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tower: Tower,
    variant: SsPrefixVariant,
    layers: usize,
) -> Result<Vec<Var>> {
    let own_group = match tower {
        Tower::Query => "prefix.query",
        Tower::Document => "prefix.document",
    };
    let own = lft::materialize_prefixes(g, store, own_group, layers)?;
    match variant {
        SsPrefixVariant::None => Ok(own),
        SsPrefixVariant::Average => {
            let common = lft::materialize_prefixes(g, store, "prefix", layers)?;
            common.iter().zip(&own).map(|(&c, &o)| g.add(c, o)).collect()
        }
        SsPrefixVariant::Concat { common_len: k } => {
            let common = lft::materialize_prefixes(g, store, "prefix", layers)?;
            let len = g.value(own[0]).rows();
            if k > len {
                return Err(Error::Config(format!("common prefix length {k} exceeds prefix length {len}")));
            }
            common
                .iter()
                .zip(&own)
                .map(|(&c, &o)| match k {
                    0 => Ok(c),
                    k if k == len => Ok(o),
                    k => {
                        let head = g.slice_rows(o, 0, k)?;
                        let tail = g.slice_rows(c, k, len - k)?;
                        g.concat_rows(&[head, tail])
                    }
                })
                .collect()
        }
    }
}

/// Parameter names `(A, B)` that `tower` routes through for `target` at `layer`.
pub fn lora_param_names(binding: &TowerBinding, tower: Tower, layer: usize, target: LoraTarget) -> (alloc::string::String, alloc::string::String) {
    let t = binding.lora_is_tower_specific(target).then_some(tower);
    (lft::lora_name(layer, target, t, "A"), lft::lora_name(layer, target, t, "B"))
}

/// Per-layer LoRA hooks for `tower`; shared targets resolve to the same parameters for both towers.
pub fn ss_lora_bind<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    binding: &TowerBinding,
    spec: &LftSpec,
    tower: Tower,
    layers: usize,
) -> Result<Vec<LayerLora>> {
    let Some((lora, targets)) = spec.lora() else {
        if binding.ss_lora().is_some() {
            return Err(Error::Config("ss.lora set but the method has no LoRA module".into()));
        }
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut entry = LayerLora::default();
        for &target in targets {
            let (a, b) = lora_param_names(binding, tower, layer, target);
            let hook = LoraHook {
                a: g.param(store, &a)?,
                b: g.param(store, &b)?,
                scale: lora.scale(),
                dropout: lora.dropout,
            };
            match target {
                LoraTarget::Query => entry.q = Some(hook),
                LoraTarget::Value => entry.v = Some(hook),
                LoraTarget::Dense => entry.dense = Some(hook),
            }
        }
        out.push(entry);
    }
    Ok(out)
}

/// Adapter hooks for one tower, or for the joint tower when `tower` is `None`.
pub fn tower_hooks<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    binding: &TowerBinding,
    spec: &LftSpec,
    config: &EncoderConfig,
    tower: Option<Tower>,
) -> Result<AdapterHooks> {
    let layers = config.layers();
    let slots = if spec.prompt_len().is_some() {
        SlotHook::Prompt(g.param(store, lft::PROMPT)?)
    } else if spec.prefix().is_some() {
        match (binding.ss_prefix(), tower) {
            (Some(variant), Some(t)) => SlotHook::Prefix(ss_prefix_compose(g, store, t, variant, layers)?),
            _ => SlotHook::Prefix(lft::materialize_prefixes(g, store, "prefix", layers)?),
        }
    } else {
        SlotHook::None
    };
    let lora = ss_lora_bind(g, store, binding, spec, tower.unwrap_or(Tower::Query), layers)?;
    Ok(AdapterHooks { slots, lora })
}

/// Encodes `seq` in `tower` under `binding`.
#[allow(clippy::too_many_arguments)]
pub fn encode_tower<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    binding: &TowerBinding,
    spec: &LftSpec,
    config: &EncoderConfig,
    seq: &TokenSequence,
    tower: Tower,
) -> Result<Encoded> {
    if !binding.is_bi_encoder() {
        return Err(Error::Contract("a cross-encoder has no separate towers".into()));
    }
    let hooks = tower_hooks(g, store, binding, spec, config, Some(tower))?;
    let root = match (binding, tower) {
        (TowerBinding::HeteroFullBi, Tower::Document) => "doc.",
        _ => "",
    };
    encoder::encode(g, store, root, config, seq, &hooks)
}

/// Encodes a joint query/document sequence under a cross binding.
pub fn encode_joint<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    binding: &TowerBinding,
    spec: &LftSpec,
    config: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<Encoded> {
    if binding.is_bi_encoder() {
        return Err(Error::Contract("joint encoding needs a cross binding".into()));
    }
    let hooks = tower_hooks(g, store, binding, spec, config, None)?;
    encoder::encode(g, store, "", config, seq, &hooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lft::{LoraSpec, PrefixSpec};

    #[test]
    fn shared_q_hetero_v_routing() {
        let b = TowerBinding::SemiSiameseBi {
            prefix: None,
            lora: Some(SsLoraVariant::SharedQHeteroV),
        };
        let q_query = lora_param_names(&b, Tower::Query, 0, LoraTarget::Query);
        let q_doc = lora_param_names(&b, Tower::Document, 0, LoraTarget::Query);
        let v_query = lora_param_names(&b, Tower::Query, 0, LoraTarget::Value);
        let v_doc = lora_param_names(&b, Tower::Document, 0, LoraTarget::Value);
        assert_eq!(q_query, q_doc);
        assert_ne!(v_query, v_doc);
        assert_eq!(v_query.0, "lora.0.v.query.A");
    }

    #[test]
    fn binding_validation() {
        let lora = LftSpec::Lora(LoraSpec::default());
        let prefix = LftSpec::Prefix(PrefixSpec::default());
        assert!(TowerBinding::HeteroFullBi.validate(&lora).is_err());
        assert!(TowerBinding::HeteroFullBi.validate(&LftSpec::FullFt).is_ok());
        let ss_prefix_only = TowerBinding::SemiSiameseBi { prefix: Some(SsPrefixVariant::Average), lora: None };
        assert!(ss_prefix_only.validate(&lora).is_err());
        assert!(ss_prefix_only.validate(&prefix).is_ok());
        let nothing = TowerBinding::SemiSiameseBi { prefix: None, lora: None };
        assert!(nothing.validate(&prefix).is_err());
        let too_long = TowerBinding::SemiSiameseBi { prefix: Some(SsPrefixVariant::Concat { common_len: 11 }), lora: None };
        assert!(too_long.validate(&prefix).is_err());
    }

    #[test]
    fn suggested_variants() {
        let hybrid = LftSpec::hybrid(
            LftSpec::Prefix(PrefixSpec::default()),
            LftSpec::Lora(LoraSpec::default()),
            lft::HybridMode::Sequential,
            30,
            10,
        );
        assert_eq!(
            TowerBinding::semi_siamese_for(&hybrid),
            TowerBinding::SemiSiameseBi { prefix: None, lora: Some(SsLoraVariant::SharedQHeteroV) }
        );
        assert_eq!(
            TowerBinding::semi_siamese_for(&LftSpec::Prefix(PrefixSpec::default())),
            TowerBinding::SemiSiameseBi { prefix: Some(SsPrefixVariant::Average), lora: None }
        );
    }
}

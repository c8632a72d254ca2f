use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning rates by parameter group. A parameter belongs to the group
/// whose name prefix is the longest match for its name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LrGroups {
    groups: Vec<(String, f64)>,
}

impl LrGroups {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a group covering every name that starts with `prefix` (`""` matches all).
    pub fn with(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.groups.push((prefix.into(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> Option<f64> {
        self.groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|&(_, lr)| lr)
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Parameters without an entry in `grads` are treated as having a zero
    /// gradient. Frozen parameters are not touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lrs: &LrGroups,
    ) -> Result<()> {
        let names: Vec<String> = store.trainable_names().map(String::from).collect();
        let mut plan = Vec::with_capacity(names.len());
        for name in names {
            let lr = lrs
                .lr_for(&name)
                .ok_or_else(|| Error::Config(alloc::format!("no learning-rate group for `{name}`")))?;
            plan.push((name, lr));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let eps = T::from_f64(c.epsilon);
        let wd = T::from_f64(c.weight_decay);
        for (name, lr) in plan {
            let param = store.get_mut(&name)?;
            let shape = param.shape().to_vec();
            let zero = Tensor::zeros(&shape);
            let grad = grads.get(&name).unwrap_or(&zero);
            if grad.len() != param.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: shape,
                    right: grad.shape().to_vec(),
                });
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| zero.clone());
            let v = self.second.entry(name).or_insert_with(|| zero.clone());
            let step_size = T::from_f64(lr / bc1);
            let bc2_sqrt = T::from_f64(libm::sqrt(bc2));
            for (((p, &g0), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g0 + wd * *p;
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let update = step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
                *p = *p - update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("ranker.w", Tensor::scalar(1.5), trainable).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let mut s = scalar_store(true);
        let before = s.clone();
        let mut st = AdamState::new(AdamConfig::default());
        let lrs = LrGroups::new().with("ranker.", 0.1);
        for _ in 0..3 {
            st.step(&mut s, &BTreeMap::new(), &lrs).unwrap();
        }
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(true);
        let mut st = AdamState::new(AdamConfig::default());
        let mut g = BTreeMap::new();
        g.insert("ranker.w".into(), Tensor::scalar(1.0));
        st.step(&mut s, &g, &LrGroups::new().with("ranker.", 0.1)).unwrap();
        let got = s.get("ranker.w").unwrap().data()[0];
        // m̂ = 1, v̂ = 1: θ − 0.1 · 1 / (1 + 1e-8)
        assert!((got - (1.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_ignores_gradient() {
        let mut s = scalar_store(false);
        let before = s.clone();
        let mut g = BTreeMap::new();
        g.insert("ranker.w".into(), Tensor::scalar(5.0));
        let mut st = AdamState::new(AdamConfig::default());
        st.step(&mut s, &g, &LrGroups::new()).unwrap();
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn missing_group_is_a_configuration_error() {
        let mut s = scalar_store(true);
        let mut st = AdamState::new(AdamConfig::default());
        let err = st.step(&mut s, &BTreeMap::new(), &LrGroups::new().with("lora.", 1e-4));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn longest_prefix_wins() {
        let lrs = LrGroups::new().with("", 2e-5).with("lora.", 1e-4);
        assert_eq!(lrs.lr_for("lora.0.q.A"), Some(1e-4));
        assert_eq!(lrs.lr_for("embeddings.token"), Some(2e-5));
    }
}

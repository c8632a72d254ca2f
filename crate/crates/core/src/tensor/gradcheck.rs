use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;

use super::{rng, Graph, ParamStore, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Failure threshold on the maximum relative error.
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            coords_per_param: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst_param: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
    /// The subset of `coords_checked` whose derivative is too small for the difference quotient
    /// to resolve to `tolerance` relative error; they are held to
    /// `|a − n| ≤ noise` instead.
    pub coords_unresolved: usize,
    pub max_abs_err_unresolved: f64,
    pub loss: f64,
    /// Rounding-noise bound of the difference quotient, `8·ε·max(|f|, 1) / step`.
    pub noise: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences on
/// sampled coordinates of every trainable parameter.
///
/// `f` builds the scalar loss on a fresh inference tape; it must be
/// deterministic. Relative error is `|a − n| / max(|a|, |n|, 1e-12)`.
///
/// The quotient carries rounding noise of up to `noise = 8·ε·max(|f|, 1) / step`,
/// so a derivative below `noise / tolerance` cannot be resolved to
/// `tolerance` relative error however exact it is (the key-bias gradient of
/// softmax attention, for one, is exactly zero). Such coordinates are held
/// to the absolute bound `|a − n| ≤ noise` and reported separately.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new().verify();
    let loss = f(store, &mut g)?;
    let noise = 8.0 * f64::EPSILON * g.scalar(loss).abs().max(1.0) / opts.step;
    let resolvable = noise / opts.tolerance;
    let analytic = g.backward(loss)?.named(store);

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_values: (0.0, 0.0),
        coords_checked: 0,
        coords_unresolved: 0,
        max_abs_err_unresolved: 0.0,
        noise: 0.0,
        loss: 0.0,
        passed: true,
    };
    report.noise = noise;
    report.loss = g.scalar(loss);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new().verify();
        let v = f(s, &mut g)?;
        Ok(g.scalar(v))
    };
    for (name, grad) in &analytic {
        let n = grad.len();
        let mut r = rng::stream(opts.seed, name);
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut r, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            report.coords_checked += 1;
            if a.abs().max(numeric.abs()) < resolvable {
                report.coords_unresolved += 1;
                report.max_abs_err_unresolved = report.max_abs_err_unresolved.max((a - numeric).abs());
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel;
                report.worst_param = alloc::format!("{name}[{i}]");
                report.worst_values = (a, numeric);
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tolerance && report.max_abs_err_unresolved <= noise;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_tightly() {
        let mut store = ParamStore::new();
        store
            .insert("theta", Tensor::from_rows(&[&[0.3, -1.7, 2.2, 0.9]]), true)
            .unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let t = g.param(s, "theta")?;
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert!(report.passed);
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn constant_function_passes() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::from_rows(&[&[1.0, 2.0]]), true).unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let t = g.param(s, "theta")?;
                let z = g.scale(t, 0.0)?;
                g.sum(z)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn wrong_gradient_is_flagged_not_aborted() {
        // relu at its kink: analytic 0, central difference 0.5.
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(0.0), true).unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let t = g.param(s, "theta")?;
                let r = g.relu(t)?;
                g.sum(r)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_param, "theta[0]");
    }

    #[test]
    fn tiny_exact_gradient_is_held_to_noise_bound() {
        // d/dθ of 1e-9·θ is far below noise / tolerance, but exact.
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(0.7), true).unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let t = g.param(s, "theta")?;
                let y = g.scale(t, 1e-9)?;
                g.sum(y)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.coords_unresolved, 1);
        assert!(report.max_abs_err_unresolved <= report.noise);
        assert!(report.passed);
    }

    #[test]
    fn tiny_wrong_gradient_still_fails() {
        // 1e-7·relu(θ) at the kink: analytic 0, central difference 5e-8.
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(0.0), true).unwrap();
        let report = grad_check(
            &store,
            |s, g| {
                let t = g.param(s, "theta")?;
                let r = g.relu(t)?;
                let y = g.scale(r, 1e-7)?;
                g.sum(y)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.coords_unresolved, 1);
        assert!(report.max_abs_err_unresolved > report.noise);
        assert!(!report.passed);
    }
}

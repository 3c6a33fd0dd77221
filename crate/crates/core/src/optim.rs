//! Adam with a non-positivity projection, global-norm gradient clipping and
//! the central-difference gradient check used to validate every backward
//! pass in the crate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ParamSet, Shape, TensorMut, TensorRef, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter tensor in
/// [`ParamSet::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check_shapes(&self, tensors: &[TensorRef<'_>]) -> Result<()> {
        if tensors.len() != self.m.len() {
            return Err(Error::dim("adam_step tensor count", self.m.len(), tensors.len()));
        }
        for (t, m) in tensors.iter().zip(&self.m) {
            if t.data.len() != m.len() {
                return Err(Error::dim(
                    "adam_step tensor size",
                    m.len(),
                    format!("{} ({})", t.data.len(), t.name),
                ));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<P: ParamSet + ?Sized>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grads = grads.tensors();
    state.check_shapes(&grads)?;
    let mut targets = params.tensors_mut();
    if targets.len() != grads.len() {
        return Err(Error::dim("adam_step params vs grads", grads.len(), targets.len()));
    }
    for (t, g) in targets.iter().zip(&grads) {
        if t.data.len() != g.data.len() {
            return Err(Error::dim("adam_step params vs grads", g.data.len(), t.data.len()));
        }
    }

    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powf(state.t as f64);
    let bc2 = 1.0 - beta2.powf(state.t as f64);
    for (k, (p, g)) in targets.iter_mut().zip(&grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Names of tensors whose entries must stay non-positive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub names: Vec<String>,
}

impl ConstraintSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        ConstraintSet {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn check_known(&self, present: &[&str]) -> Result<()> {
        for name in &self.names {
            if !present.contains(&name.as_str()) {
                return Err(Error::Config(format!("constraint on unknown tensor `{name}`")));
            }
        }
        Ok(())
    }

    /// Largest entry across all constrained tensors, or `None` if the set is empty.
    pub fn max_entry<P: ParamSet + ?Sized>(&self, params: &P) -> Result<Option<f64>> {
        let tensors = params.tensors();
        let present: Vec<&str> = tensors.iter().map(|t| t.name).collect();
        self.check_known(&present)?;
        Ok(tensors
            .iter()
            .filter(|t| self.names.iter().any(|n| n == t.name))
            .flat_map(|t| t.data.iter().copied())
            .reduce(f64::max))
    }
}

/// Replaces every entry of every constrained tensor by `min(entry, 0)`.
pub fn project<P: ParamSet + ?Sized>(params: &mut P, constraints: &ConstraintSet) -> Result<()> {
    let mut tensors = params.tensors_mut();
    let present: Vec<&str> = tensors.iter().map(|t| t.name).collect();
    constraints.check_known(&present)?;
    for t in tensors.iter_mut() {
        if constraints.names.iter().any(|n| n == t.name) {
            for v in t.data.iter_mut() {
                *v = v.min(0.0);
            }
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamSet + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

impl ParamSet for Vector {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![TensorRef::vector("values", self)]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![TensorMut::vector("values", self)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates per tensor checked; larger tensors are sampled.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            tol: 1e-4,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

/// Denominator floor for relative errors. Central differences at ε=1e-5 on
/// an O(1) loss carry ~1e-11 of rounding noise, so gradients below this
/// size are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares `analytic` against central differences of `loss` around
/// `params`.
pub fn fd_check<P, F>(loss: F, params: &P, analytic: &P, cfg: FdConfig) -> Result<FdReport>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let shapes: Vec<(&'static str, Shape)> = params.tensors().iter().map(|t| (t.name, t.shape)).collect();
    let grads = analytic.tensors();
    if grads.len() != shapes.len() {
        return Err(Error::dim("fd_check gradient tensors", shapes.len(), grads.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: cfg.tol,
        tensors: Vec::with_capacity(shapes.len()),
    };

    for (k, (name, shape)) in shapes.iter().enumerate() {
        let n = shape.numel();
        if grads[k].data.len() != n {
            return Err(Error::dim("fd_check gradient size", n, grads[k].data.len()));
        }
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(limit) if n > limit => {
                let mut idx = sample(&mut rng, n, limit).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut tensor_max: f64 = 0.0;
        for &j in &indices {
            let orig = params.tensors()[k].data[j];
            work.tensors_mut()[k].data[j] = orig + cfg.eps;
            let plus = loss(&work);
            work.tensors_mut()[k].data[j] = orig - cfg.eps;
            let minus = loss(&work);
            work.tensors_mut()[k].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(grads[k].data[j], numeric);
            tensor_max = tensor_max.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.to_string(), j));
            }
        }
        report.checked += indices.len();
        report.tensors.push(TensorCheck {
            name: name.to_string(),
            checked: indices.len(),
            max_rel_error: tensor_max,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Vector::from(vec![0.3, -1.0, 2.5]);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &Vector::zeros(3), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Vector::from(vec![0.0]);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&p, cfg);
        adam_step(&mut p, &Vector::from(vec![1.0]), &mut st).unwrap();
        let expected = cfg.lr / (1.0 + cfg.eps);
        assert!((p[0] + expected).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_sign() {
        let mut p = Vector::from(vec![0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&p, cfg);
        let g = Vector::from(vec![-0.7, 3.0]);
        let mut last = p.clone();
        for _ in 0..5000 {
            last = p.clone();
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        let step0 = p[0] - last[0];
        let step1 = p[1] - last[1];
        assert!((step0 - cfg.lr).abs() < 1e-9, "{step0}");
        assert!((step1 + cfg.lr).abs() < 1e-9, "{step1}");
        assert!(st.v.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Vector::from(vec![0.0, 1.0]);
        let mut st = AdamState::new(&Vector::zeros(3), AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &Vector::zeros(2), &mut st),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let cs = ConstraintSet::new(["values"]);
        let mut p = Vector::from(vec![0.5, -0.3]);
        project(&mut p, &cs).unwrap();
        assert_eq!(p.as_slice(), &[0.0, -0.3]);

        let mut neg = Vector::from(vec![-1.0, -0.0, -2.0]);
        let before = neg.clone();
        project(&mut neg, &cs).unwrap();
        assert_eq!(neg, before);

        let mut pos = Vector::from(vec![1.0, 2.0, 3.0]);
        project(&mut pos, &cs).unwrap();
        assert!(pos.iter().all(|&v| v == 0.0));
        assert_eq!(cs.max_entry(&pos).unwrap(), Some(0.0));

        let bad = ConstraintSet::new(["W_t1"]);
        assert!(matches!(project(&mut pos, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_examples() {
        let mut g = Vector::from(vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        let mut small = Vector::from(vec![0.1, 0.2]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.as_slice(), &[0.1, 0.2]);
    }

    #[test]
    fn fd_check_quadratic_and_sensitivity() {
        let p = Vector::from(vec![0.5, -1.25, 2.0, 0.0, 3.5]);
        let loss = |q: &Vector| 0.5 * q.iter().map(|v| v * v).sum::<f64>();
        let cfg = FdConfig {
            tol: 1e-8,
            ..FdConfig::default()
        };
        let report = fd_check(loss, &p, &p, cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 5);

        let mut wrong = p.clone();
        wrong.scale(2.0);
        let report = fd_check(loss, &p, &wrong, FdConfig::default()).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn fd_check_sampling() {
        let p: Vector = (0..100).map(|i| i as f64 * 0.01).collect();
        let loss = |q: &Vector| 0.5 * q.iter().map(|v| v * v).sum::<f64>();
        let cfg = FdConfig {
            max_per_tensor: Some(10),
            ..FdConfig::default()
        };
        let report = fd_check(loss, &p, &p, cfg).unwrap();
        assert_eq!(report.checked, 10);
        assert!(report.passed());
    }

    proptest! {
        #[test]
        fn project_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 0..32)) {
            let cs = ConstraintSet::new(["values"]);
            let mut once = Vector::from(v);
            project(&mut once, &cs).unwrap();
            let mut twice = once.clone();
            project(&mut twice, &cs).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|&x| x <= 0.0));
        }

        #[test]
        fn clip_bounds_norm(v in prop::collection::vec(-100.0f64..100.0, 1..32), max in 0.01f64..50.0) {
            let mut g = Vector::from(v);
            clip_global_norm(&mut g, max);
            prop_assert!(g.l2_norm() <= max * (1.0 + 1e-12));
        }
    }
}

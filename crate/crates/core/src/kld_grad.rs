//! The linear sigma-head analysis model and its KLD gradient.
//!
//! The encoder's standard deviations are modelled as `sigma = theta1^T phi`
//! for a fixed feature vector `phi` (length `m`) and weights `theta1`
//! (`m x d`). Only the sigma-dependent terms of the KLD enter the objective
//! here: `sum_i 1/2 (sigma_i^2 - 1 - log sigma_i^2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Central-difference step used by the gradient oracle.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSigmaModel {
    /// `m x d`; column `i` is the weight vector feeding `sigma_i`.
    pub theta1: DMatrix<f64>,
    /// Feature vector `phi(x)`, length `m`.
    pub phi: DVector<f64>,
}

impl LinearSigmaModel {
    pub fn new(theta1: DMatrix<f64>, phi: DVector<f64>) -> Result<Self> {
        if theta1.nrows() == 0 || theta1.ncols() == 0 {
            return Err(invalid("theta1 must be at least 1x1"));
        }
        if theta1.nrows() != phi.len() {
            return Err(invalid(format!(
                "theta1 has {} rows but phi has length {}",
                theta1.nrows(),
                phi.len()
            )));
        }
        if theta1.iter().chain(phi.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("model entries must be finite"));
        }
        Ok(Self { theta1, phi })
    }

    /// Row-major constructor, `theta1_rows[k][i]`.
    pub fn from_rows(theta1_rows: &[Vec<f64>], phi: &[f64]) -> Result<Self> {
        let m = theta1_rows.len();
        let d = theta1_rows.first().map_or(0, Vec::len);
        if theta1_rows.iter().any(|r| r.len() != d) {
            return Err(invalid("theta1 rows have unequal lengths"));
        }
        let theta1 = DMatrix::from_fn(m, d, |k, i| theta1_rows[k][i]);
        Self::new(theta1, DVector::from_column_slice(phi))
    }

    pub fn feature_dim(&self) -> usize {
        self.theta1.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.theta1.ncols()
    }
}

/// `sigma = theta1^T phi`.
pub fn sigma_from_weights(model: &LinearSigmaModel) -> DVector<f64> {
    model.theta1.tr_mul(&model.phi)
}

/// The full closed-form KLD evaluated on raw standard deviations.
pub fn kld_of_sigma(sigma: &[f64], mu: &[f64]) -> Result<f64> {
    if sigma.len() != mu.len() {
        return Err(invalid("sigma and mu lengths differ"));
    }
    let mut total = 0.0;
    for (i, (&s, &m)) in sigma.iter().zip(mu).enumerate() {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("sigma[{i}] = {s} is not positive")));
        }
        total += 0.5 * (s * s - 1.0 - (s * s).ln()) + 0.5 * m * m;
    }
    Ok(total)
}

/// Sigma-dependent part of the KLD for the model's current weights.
pub fn sigma_kld(model: &LinearSigmaModel) -> Result<f64> {
    let sigma = sigma_from_weights(model);
    kld_of_sigma(sigma.as_slice(), &vec![0.0; sigma.len()])
}

fn check_positive(sigma: &DVector<f64>) -> Result<()> {
    match sigma.iter().position(|s| !(*s > 0.0)) {
        Some(i) => Err(Error::Domain(format!(
            "derived sigma[{i}] = {} is not positive",
            sigma[i]
        ))),
        None => Ok(()),
    }
}

/// `d(beta * KLD) / d theta1` in matrix form: `beta * phi g^T` with
/// `g_i = (sigma_i^2 - 1) / sigma_i`.
pub fn analytic_gradient(model: &LinearSigmaModel, beta: f64) -> Result<DMatrix<f64>> {
    let sigma = sigma_from_weights(model);
    check_positive(&sigma)?;
    let g = sigma.map(|s| (s * s - 1.0) / s);
    Ok(&model.phi * g.transpose() * beta)
}

/// Same gradient assembled entry by entry: `beta (s_i^2 - 1)/s_i phi_k`.
pub fn analytic_gradient_elementwise(model: &LinearSigmaModel, beta: f64) -> Result<DMatrix<f64>> {
    let (m, d) = model.theta1.shape();
    let mut sigma = vec![0.0; d];
    for (i, s) in sigma.iter_mut().enumerate() {
        for k in 0..m {
            *s += model.phi[k] * model.theta1[(k, i)];
        }
    }
    check_positive(&DVector::from_column_slice(&sigma))?;
    Ok(DMatrix::from_fn(m, d, |k, i| {
        beta * (sigma[i] * sigma[i] - 1.0) / sigma[i] * model.phi[k]
    }))
}

/// Central finite differences of `beta * KLD` with respect to each weight.
pub fn finite_difference_gradient(
    model: &LinearSigmaModel,
    beta: f64,
    h: f64,
) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let (m, d) = model.theta1.shape();
    let mut grad = DMatrix::zeros(m, d);
    let mut probe = model.clone();
    for k in 0..m {
        for i in 0..d {
            let original = model.theta1[(k, i)];
            probe.theta1[(k, i)] = original + h;
            let plus = sigma_kld(&probe).map_err(|e| perturbation_error(k, i, "+h", e))?;
            probe.theta1[(k, i)] = original - h;
            let minus = sigma_kld(&probe).map_err(|e| perturbation_error(k, i, "-h", e))?;
            probe.theta1[(k, i)] = original;
            grad[(k, i)] = (plus - minus) * beta / (2.0 * h);
        }
    }
    Ok(grad)
}

fn perturbation_error(k: usize, i: usize, side: &str, e: Error) -> Error {
    Error::Domain(format!("perturbing theta1[{k}][{i}] by {side}: {e}"))
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdStep {
    /// 1-based step index.
    pub step: usize,
    /// Sigma after the update.
    pub sigma: Vec<f64>,
    /// Sigma-part KLD after the update (unweighted).
    pub kld: f64,
    /// Max |gradient| entry used for this update.
    pub grad_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdTrace {
    pub initial_sigma: Vec<f64>,
    pub records: Vec<GdStep>,
    pub step_count: usize,
    pub learning_rate: f64,
    pub beta: f64,
}

impl GdTrace {
    /// Sigma before step `t` (1-based), i.e. the initial sigma for `t = 1`.
    pub fn sigma_before(&self, t: usize) -> &[f64] {
        if t <= 1 {
            &self.initial_sigma
        } else {
            &self.records[t - 2].sigma
        }
    }

    /// `(step, dim)` of the first decrease of a sigma that was still below 1.
    pub fn first_growth_violation(&self) -> Option<(usize, usize)> {
        for rec in &self.records {
            let prev = self.sigma_before(rec.step);
            for (i, (&before, &after)) in prev.iter().zip(&rec.sigma).enumerate() {
                if before < 1.0 && after < before {
                    return Some((rec.step, i));
                }
            }
        }
        None
    }
}

/// Plain gradient descent on the beta-weighted sigma KLD,
/// `theta <- theta - alpha * grad`.
pub fn simulate_gd(
    model: &LinearSigmaModel,
    beta: f64,
    alpha: f64,
    steps: usize,
) -> Result<GdTrace> {
    simulate_gd_with(model, beta, alpha, steps, analytic_gradient)
}

/// [`simulate_gd`] with a caller-supplied gradient routine.
pub fn simulate_gd_with<F>(
    model: &LinearSigmaModel,
    beta: f64,
    alpha: f64,
    steps: usize,
    gradient: F,
) -> Result<GdTrace>
where
    F: Fn(&LinearSigmaModel, f64) -> Result<DMatrix<f64>>,
{
    if steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    if !(beta > 0.0) || !(alpha > 0.0) {
        return Err(invalid("beta and alpha must be positive"));
    }
    let initial = sigma_from_weights(model);
    if let Some(i) = initial.iter().position(|s| !(*s > 0.0 && *s <= 1.0)) {
        return Err(invalid(format!(
            "initial sigma[{i}] = {} is outside (0, 1]",
            initial[i]
        )));
    }
    let mut current = model.clone();
    let mut records = Vec::with_capacity(steps);
    for step in 1..=steps {
        let grad = gradient(&current, beta).map_err(|e| Error::Diverged {
            step,
            reason: e.to_string(),
        })?;
        let grad_max = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        current.theta1 -= grad * alpha;
        let sigma = sigma_from_weights(&current);
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Diverged {
                step,
                reason: format!("sigma[{i}] = {} left (0, inf)", sigma[i]),
            });
        }
        let kld = kld_of_sigma(sigma.as_slice(), &vec![0.0; sigma.len()])?;
        records.push(GdStep {
            step,
            sigma: sigma.iter().copied().collect(),
            kld,
            grad_max,
        });
    }
    Ok(GdTrace {
        initial_sigma: initial.iter().copied().collect(),
        records,
        step_count: steps,
        learning_rate: alpha,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigma_examples() {
        let id = LinearSigmaModel::from_rows(
            &[vec![0.2, 0.3], vec![0.4, 0.5]],
            &[1.0, 0.0],
        )
        .unwrap();
        assert_eq!(sigma_from_weights(&id).as_slice(), &[0.2, 0.3]);
        let m = LinearSigmaModel::from_rows(&[vec![0.1], vec![0.2]], &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(sigma_from_weights(&m)[0], 0.5, epsilon = 1e-15);
        let zero = LinearSigmaModel::from_rows(&[vec![0.1, 0.7]], &[0.0]).unwrap();
        assert!(sigma_from_weights(&zero).iter().all(|s| *s == 0.0));
    }

    #[test]
    fn kld_of_sigma_examples() {
        assert_eq!(kld_of_sigma(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(kld_of_sigma(&[2.0], &[0.0]).unwrap(), 0.806853, epsilon = 1e-6);
        assert_abs_diff_eq!(kld_of_sigma(&[0.5], &[1.0]).unwrap(), 0.818147, epsilon = 1e-6);
        assert!(matches!(kld_of_sigma(&[0.0], &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(kld_of_sigma(&[-0.3], &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn analytic_gradient_examples() {
        let m = LinearSigmaModel::from_rows(&[vec![0.25]], &[2.0]).unwrap();
        let g1 = analytic_gradient(&m, 1.0).unwrap();
        assert_abs_diff_eq!(g1[(0, 0)], -3.0, epsilon = 1e-12);
        let g100 = analytic_gradient(&m, 100.0).unwrap();
        assert_abs_diff_eq!(g100[(0, 0)], -300.0, epsilon = 1e-10);

        let fixed = LinearSigmaModel::from_rows(&[vec![0.5, 1.0], vec![0.25, 0.0]], &[1.0, 2.0]).unwrap();
        assert!(analytic_gradient(&fixed, 7.0).unwrap().iter().all(|g| *g == 0.0));

        let neg = LinearSigmaModel::from_rows(&[vec![-0.25]], &[2.0]).unwrap();
        assert!(matches!(analytic_gradient(&neg, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn matrix_and_elementwise_forms_agree_exactly() {
        let m = LinearSigmaModel::from_rows(
            &[vec![0.1, 0.2, 0.05], vec![0.3, -0.1, 0.2], vec![0.05, 0.4, 0.1]],
            &[0.7, 0.9, 1.1],
        )
        .unwrap();
        let a = analytic_gradient(&m, 3.0).unwrap();
        let b = analytic_gradient_elementwise(&m, 3.0).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0));
        }
    }

    #[test]
    fn finite_differences_match_hand_value() {
        let m = LinearSigmaModel::from_rows(&[vec![0.25]], &[2.0]).unwrap();
        let fd = finite_difference_gradient(&m, 1.0, DEFAULT_FD_STEP).unwrap();
        assert_abs_diff_eq!(fd[(0, 0)], -3.0, epsilon = 1e-6);
        let fixed = LinearSigmaModel::from_rows(&[vec![0.5], vec![0.25]], &[1.0, 2.0]).unwrap();
        let fd = finite_difference_gradient(&fixed, 1.0, DEFAULT_FD_STEP).unwrap();
        assert!(fd.iter().all(|g| g.abs() <= 1e-6));
    }

    #[test]
    fn finite_differences_report_domain_crossing() {
        let m = LinearSigmaModel::from_rows(&[vec![1e-8]], &[1.0]).unwrap();
        let err = finite_difference_gradient(&m, 1.0, 1e-6).unwrap_err();
        assert!(err.to_string().contains("theta1[0][0]"), "{err}");
    }

    #[test]
    fn gd_hand_iteration() {
        let m = LinearSigmaModel::from_rows(&[vec![0.5]], &[1.0]).unwrap();
        let trace = simulate_gd(&m, 1.0, 0.1, 3).unwrap();
        assert_abs_diff_eq!(trace.records[0].grad_max, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trace.records[0].sigma[0], 0.65, epsilon = 1e-12);
        assert_eq!(trace.records.len(), 3);
        assert_eq!(trace.first_growth_violation(), None);
    }

    #[test]
    fn gd_fixed_point_and_errors() {
        let at_one = LinearSigmaModel::from_rows(&[vec![0.5, 0.5]], &[2.0]).unwrap();
        let trace = simulate_gd(&at_one, 1.0, 0.1, 5).unwrap();
        assert!(trace.records.iter().all(|r| r.sigma == vec![1.0, 1.0]));
        let above = LinearSigmaModel::from_rows(&[vec![0.75]], &[2.0]).unwrap();
        assert!(simulate_gd(&above, 1.0, 0.1, 5).is_err());
        // An oversized step throws sigma negative.
        let m = LinearSigmaModel::from_rows(&[vec![0.05]], &[1.0]).unwrap();
        let err = simulate_gd(&m, 100.0, 1.0, 3).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }) || err.to_string().contains("sigma"));
    }

    #[test]
    fn larger_beta_grows_sigma_faster() {
        let m = LinearSigmaModel::from_rows(&[vec![0.5]], &[1.0]).unwrap();
        let small = simulate_gd(&m, 1.0, 0.1, 1).unwrap();
        let large = simulate_gd(&m, 100.0, 0.1, 1).unwrap();
        assert!(large.records[0].sigma[0] > small.records[0].sigma[0]);
        // A gentler rate keeps both trajectories below 1 for several steps.
        let small = simulate_gd(&m, 1.0, 1e-4, 20).unwrap();
        let large = simulate_gd(&m, 100.0, 1e-4, 20).unwrap();
        for t in 1..=20 {
            let (s0, l0) = (small.sigma_before(t)[0], large.sigma_before(t)[0]);
            if l0 >= 1.0 || s0 >= 1.0 {
                break;
            }
            let (s1, l1) = (small.records[t - 1].sigma[0], large.records[t - 1].sigma[0]);
            assert!(l1 - l0 > s1 - s0, "step {t}");
        }
    }
}

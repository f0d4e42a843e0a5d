//! Self-contained numerical checks of the KLD closed forms, their Monte-Carlo
//! estimators, the mutual-information identity and the KLD gradient of the
//! linear-σ model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::{
    kld_forward_closed_form, kld_reverse_closed_form, kld_reverse_mc, mi_decomposition_check, DiagonalGaussian,
};
use crate::kld_grad::{
    analytic_gradient, finite_difference_gradient, max_relative_error, simulate_gd_with, GdTrace, LinearSigmaModel,
    DEFAULT_FD_STEP,
};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub gradient_trials: usize,
    pub kld_trials: usize,
    pub mc_samples: usize,
    pub gd_trials: usize,
    pub gd_steps: usize,
    /// Mutation test: negate the analytic gradient.
    pub inject_sign_flip: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            gradient_trials: 100,
            kld_trials: 50,
            mc_samples: 100_000,
            gd_trials: 50,
            gd_steps: 50,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub max_gradient_rel_error: f64,
    #[serde(skip)]
    pub traces: Vec<(String, GdTrace)>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        self.checks
            .iter()
            .map(|c| format!("{:<width$}  {}  {}\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail))
            .collect()
    }

    /// Long format: `trace,beta,alpha,step,dim,sigma,kld`; step 0 is the
    /// initial state.
    pub fn write_traces_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["trace", "beta", "alpha", "step", "dim", "sigma", "kld"])?;
        for (name, t) in &self.traces {
            let init_kld = crate::kld_grad::kld_of_sigma(&t.initial_sigma, &vec![0.0; t.initial_sigma.len()])?;
            let rows = std::iter::once((0, &t.initial_sigma, init_kld))
                .chain(t.records.iter().map(|r| (r.step, &r.sigma, r.kld)));
            for (step, sigma, kld) in rows {
                for (i, s) in sigma.iter().enumerate() {
                    w.write_record([
                        name.clone(),
                        t.beta.to_string(),
                        t.learning_rate.to_string(),
                        step.to_string(),
                        i.to_string(),
                        s.to_string(),
                        kld.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// A model with `m ≤ 8`, `d ≤ 4`, every `|Φ_k| ≥ 0.1` and every σᵢ drawn
/// from `(lo, hi)`.
pub fn random_sigma_model(r: &mut Rng, lo: f64, hi: f64) -> LinearSigmaModel {
    let m = r.random_range(1..=8);
    let d = r.random_range(1..=4);
    let phi = DVector::from_fn(m, |_, _| {
        let mag = r.random_range(0.1..1.5);
        if r.random_bool(0.5) { mag } else { -mag }
    });
    let mut theta = DMatrix::from_fn(m, d, |_, _| r.random_range(-1.0..1.0));
    for i in 0..d {
        let target = r.random_range(lo..hi);
        let mut s: f64 = phi.dot(&theta.column(i));
        if s.abs() < 1e-3 {
            theta[(0, i)] += 1.0 / phi[0];
            s = phi.dot(&theta.column(i));
        }
        theta.column_mut(i).scale_mut(target / s);
    }
    LinearSigmaModel::new(theta, phi).expect("finite construction")
}

fn random_gaussian(r: &mut Rng) -> DiagonalGaussian {
    let d = r.random_range(1..=8);
    let mu = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
    let lv = (0..d).map(|_| 2.0 * r.random_range(0.2f64..3.0).ln()).collect();
    DiagonalGaussian::new(mu, lv).expect("finite construction")
}

/// Ten 2-d unit-ish components with seeded means.
pub fn ten_component_mixture(seed: u64) -> Vec<DiagonalGaussian> {
    let mut r = rng::stream(seed, 10);
    (0..10)
        .map(|_| {
            let mu = vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let lv = vec![2.0 * r.random_range(0.5f64..1.5).ln(), 2.0 * r.random_range(0.5f64..1.5).ln()];
            DiagonalGaussian::new(mu, lv).expect("finite construction")
        })
        .collect()
}

pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let flip = opts.inject_sign_flip;
    let gradient = move |m: &LinearSigmaModel, beta: f64| -> Result<DMatrix<f64>> {
        let g = analytic_gradient(m, beta)?;
        Ok(if flip { -g } else { g })
    };
    let mut checks = Vec::new();
    let mut traces = Vec::new();

    // Analytic gradient against central finite differences.
    let mut r = rng::stream(opts.seed, 1);
    let mut max_err: f64 = 0.0;
    for _ in 0..opts.gradient_trials {
        let model = random_sigma_model(&mut r, 0.1, 0.9);
        let beta = r.random_range(1.0..100.0);
        let a = gradient(&model, beta)?;
        let f = finite_difference_gradient(&model, beta, DEFAULT_FD_STEP)?;
        max_err = max_err.max(max_relative_error(&a, &f, 1e-8));
    }
    checks.push(CheckResult {
        name: "kld gradient vs finite differences".into(),
        passed: max_err <= 1e-5,
        detail: format!("{} models, max relative error {max_err:.3e} (limit 1e-5)", opts.gradient_trials),
    });

    // Closed-form reverse KLD against its MC estimate.
    let mut r = rng::stream(opts.seed, 2);
    let mut within = 0;
    for t in 0..opts.kld_trials {
        let q = random_gaussian(&mut r);
        let est = kld_reverse_mc(&q, opts.mc_samples, opts.seed.wrapping_add(t as u64))?;
        within += est.within(kld_reverse_closed_form(&q), 3.0) as usize;
    }
    checks.push(CheckResult {
        name: "reverse kld closed form vs monte carlo".into(),
        passed: within == opts.kld_trials,
        detail: format!("{within}/{} within 3 standard errors at n={}", opts.kld_trials, opts.mc_samples),
    });

    let q = DiagonalGaussian::new(vec![0.0], vec![4f64.ln()])?;
    let (rev, fwd) = (kld_reverse_closed_form(&q), kld_forward_closed_form(&q));
    checks.push(CheckResult {
        name: "kld asymmetry".into(),
        passed: (rev - 0.806853).abs() < 1e-6 && (fwd - 0.318147).abs() < 1e-6 && (rev - fwd).abs() > 0.1,
        detail: format!("reverse {rev:.6}, forward {fwd:.6}"),
    });

    // σ-growth under plain GD, and β-monotonicity of the first step.
    let mut r = rng::stream(opts.seed, 3);
    let (mut growth_ok, mut dominance_ok) = (0, 0);
    for trial in 0..opts.gd_trials {
        let model = random_sigma_model(&mut r, 0.05, 0.95);
        let phi2 = model.phi.norm_squared();
        let c = r.random_range(0.01..0.5);
        let alpha = c / (100.0 * phi2);
        let lo = simulate_gd_with(&model, 1.0, alpha, opts.gd_steps, gradient);
        let hi = simulate_gd_with(&model, 100.0, alpha, opts.gd_steps, gradient);
        let (Ok(lo), Ok(hi)) = (lo, hi) else { continue };
        if lo.first_growth_violation().is_none() && hi.first_growth_violation().is_none() {
            growth_ok += 1;
        }
        let s0 = &lo.initial_sigma;
        let dominates = (0..s0.len()).all(|i| hi.records[0].sigma[i] - s0[i] > lo.records[0].sigma[i] - s0[i]);
        dominance_ok += dominates as usize;
        if trial == 0 {
            traces.push(("random-0-beta1".to_string(), lo));
            traces.push(("random-0-beta100".to_string(), hi));
        }
    }
    checks.push(CheckResult {
        name: "sigma non-decreasing below 1".into(),
        passed: growth_ok == opts.gd_trials,
        detail: format!("{growth_ok}/{} trials at beta 1 and 100", opts.gd_trials),
    });
    checks.push(CheckResult {
        name: "beta=100 first step dominates beta=1".into(),
        passed: dominance_ok == opts.gd_trials,
        detail: format!("{dominance_ok}/{} trials", opts.gd_trials),
    });

    // Worked single-weight example: σ = 0.5 → 0.65 at β = 1, α = 0.1.
    let example = LinearSigmaModel::from_rows(&[vec![0.5]], &[1.0])?;
    match simulate_gd_with(&example, 1.0, 0.1, 10, gradient) {
        Ok(documented) => {
            let first = documented.records[0].sigma[0];
            checks.push(CheckResult {
                name: "worked gd step".into(),
                passed: (first - 0.65).abs() < 1e-12,
                detail: format!("sigma after one step {first:.6} (expected 0.65)"),
            });
            traces.push(("worked-example-beta1".to_string(), documented));
        }
        Err(e) => checks.push(CheckResult {
            name: "worked gd step".into(),
            passed: false,
            detail: e.to_string(),
        }),
    }

    // Mutual-information decomposition.
    let two = vec![
        DiagonalGaussian::new(vec![-3.0], vec![0.0])?,
        DiagonalGaussian::new(vec![3.0], vec![0.0])?,
    ];
    for (name, posteriors) in [("two-component", two), ("ten-component", ten_component_mixture(opts.seed))] {
        let mi = mi_decomposition_check(&posteriors, opts.mc_samples, opts.seed)?;
        let mut ok = mi.residual.within(0.0, 3.0);
        let mut detail = format!(
            "residual {:.2e} ± {:.2e}, mi {:.4}, aggregate kld {:.4}",
            mi.residual.mean, mi.residual.std_error, mi.mi.mean, mi.aggregate_kld.mean
        );
        if name == "two-component" {
            ok &= (mi.mi.mean - 2f64.ln()).abs() < 0.01;
            detail.push_str(&format!(" (log 2 = {:.4})", 2f64.ln()));
        }
        checks.push(CheckResult {
            name: format!("mi decomposition, {name}"),
            passed: ok,
            detail,
        });
    }

    Ok(VerifyReport {
        checks,
        max_gradient_rel_error: max_err,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kld_grad::sigma_from_weights;

    #[test]
    fn random_models_respect_sigma_range() {
        let mut r = rng::stream(1, 1);
        for _ in 0..200 {
            let m = random_sigma_model(&mut r, 0.1, 0.9);
            assert!(m.feature_dim() <= 8 && m.latent_dim() <= 4);
            assert!(sigma_from_weights(&m).iter().all(|s| (0.1..0.9).contains(s)));
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let opts = VerifyOptions {
            gradient_trials: 5,
            kld_trials: 2,
            mc_samples: 2000,
            gd_trials: 3,
            inject_sign_flip: true,
            ..Default::default()
        };
        let report = run_verification(&opts).unwrap();
        assert!(!report.all_passed());
        let grad = &report.checks[0];
        assert!(!grad.passed, "{}", report.table());
    }
}

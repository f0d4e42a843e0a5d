//! Diagonal Gaussian posteriors and their divergences from the standard
//! normal prior `N(0, I)`.
//!
//! Variances are carried as log-variances. All divergences are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `N(mu, diag(exp(log_variance)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(invalid("gaussian dimension must be at least 1"));
        }
        if mu.len() != log_variance.len() {
            return Err(invalid(format!(
                "mu has length {} but log_variance has length {}",
                mu.len(),
                log_variance.len()
            )));
        }
        if let Some(i) = mu
            .iter()
            .chain(log_variance.iter())
            .position(|v| !v.is_finite())
        {
            return Err(invalid(format!("non-finite gaussian parameter at flat index {i}")));
        }
        Ok(Self { mu, log_variance })
    }

    /// The prior `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    /// Builds from standard deviations instead of log-variances.
    pub fn from_sigma(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0)) {
            return Err(invalid(format!("sigma[{i}] must be positive")));
        }
        let lv = sigma.iter().map(|s| 2.0 * s.ln()).collect();
        Self::new(mu, lv)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_variance(&self) -> &[f64] {
        &self.log_variance
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// `log q(z)`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        let mut acc = 0.0;
        for ((&zi, &mi), &lv) in z.iter().zip(&self.mu).zip(&self.log_variance) {
            let diff = zi - mi;
            acc += -0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
        }
        acc
    }
}

/// `log N(z; 0, I)`.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    z.iter().map(|zi| -0.5 * (LN_2PI + zi * zi)).sum()
}

/// A sampled latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("latent code entry {i} is not finite")));
        }
        Ok(Self(z))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A Monte-Carlo point estimate together with its sample standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, n }
    }

    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// `D_KL(q || N(0, I)) = -1/2 sum(1 + log s^2) + 1/2 sum s^2 + 1/2 sum mu^2`.
pub fn kld_reverse_closed_form(q: &DiagonalGaussian) -> f64 {
    q.mu
        .iter()
        .zip(&q.log_variance)
        .map(|(m, lv)| 0.5 * (-(1.0 + lv) + lv.exp() + m * m))
        .sum()
}

/// `D_KL(N(0, I) || q) = 1/2 sum(log s^2 - 1 + 1/s^2 + mu^2/s^2)`.
pub fn kld_forward_closed_form(q: &DiagonalGaussian) -> f64 {
    q.mu
        .iter()
        .zip(&q.log_variance)
        .map(|(m, lv)| {
            let inv_var = (-lv).exp();
            0.5 * (lv - 1.0 + inv_var + m * m * inv_var)
        })
        .sum()
}

/// Monte-Carlo estimate of `E_{z~q}[log q(z) - log p(z)]`.
pub fn kld_reverse_mc(q: &DiagonalGaussian, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let mut rng = rng::stream(seed, 0);
    let sigma = q.sigma();
    let mut z = vec![0.0; q.dim()];
    let samples: Vec<f64> = (0..n_samples)
        .map(|_| {
            let eps = rng::standard_normal_vec(&mut rng, q.dim());
            for i in 0..q.dim() {
                z[i] = q.mu[i] + sigma[i] * eps[i];
            }
            q.log_density(&z) - standard_normal_log_density(&z)
        })
        .collect();
    Ok(McEstimate::from_samples(&samples))
}

/// `z = mu + sigma * epsilon`, elementwise.
pub fn reparameterize(q: &DiagonalGaussian, epsilon: &[f64]) -> Result<LatentCode> {
    if epsilon.len() != q.dim() {
        return Err(invalid(format!(
            "epsilon has length {} but the posterior has dimension {}",
            epsilon.len(),
            q.dim()
        )));
    }
    let z = q
        .mu
        .iter()
        .zip(&q.log_variance)
        .zip(epsilon)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    LatentCode::new(z)
}

/// Both sides of `E_x[KL(q(z|x) || p)] = I(x; z) + KL(q(z) || p)`, where
/// `q(z)` is the uniform mixture of the given posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiDecomposition {
    /// Mean of the closed-form reverse divergences.
    pub lhs: f64,
    pub mi: McEstimate,
    pub aggregate_kld: McEstimate,
    /// `lhs - mi - aggregate_kld`, with the standard error of the joint
    /// per-sample estimator.
    pub residual: McEstimate,
}

/// Estimates the mutual-information decomposition of the expected KLD.
///
/// Samples are stratified over components: sample `j` is drawn from
/// posterior `j mod K`, which keeps the mixture weights exact.
pub fn mi_decomposition_check(
    posteriors: &[DiagonalGaussian],
    n_samples: usize,
    seed: u64,
) -> Result<MiDecomposition> {
    if posteriors.len() < 2 {
        return Err(invalid("at least two posteriors are required"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let d = posteriors[0].dim();
    if let Some(i) = posteriors.iter().position(|p| p.dim() != d) {
        return Err(invalid(format!(
            "posterior {i} has dimension {} but posterior 0 has {d}",
            posteriors[i].dim()
        )));
    }
    let k = posteriors.len();
    let log_k = (k as f64).ln();
    let lhs = posteriors.iter().map(kld_reverse_closed_form).sum::<f64>() / k as f64;

    let sigmas: Vec<Vec<f64>> = posteriors.iter().map(DiagonalGaussian::sigma).collect();
    let mut rng = rng::stream(seed, 0);
    let mut mi_samples = Vec::with_capacity(n_samples);
    let mut agg_samples = Vec::with_capacity(n_samples);
    let mut joint_samples = Vec::with_capacity(n_samples);
    let mut z = vec![0.0; d];
    let mut log_q = vec![0.0; k];
    for j in 0..n_samples {
        let c = j % k;
        let eps = rng::standard_normal_vec(&mut rng, d);
        for i in 0..d {
            z[i] = posteriors[c].mu[i] + sigmas[c][i] * eps[i];
        }
        for (slot, p) in log_q.iter_mut().zip(posteriors) {
            *slot = p.log_density(&z);
        }
        let log_mix = log_sum_exp(&log_q) - log_k;
        let log_prior = standard_normal_log_density(&z);
        mi_samples.push(log_q[c] - log_mix);
        agg_samples.push(log_mix - log_prior);
        joint_samples.push(lhs - (log_q[c] - log_prior));
    }
    Ok(MiDecomposition {
        lhs,
        mi: McEstimate::from_samples(&mi_samples),
        aggregate_kld: McEstimate::from_samples(&agg_samples),
        residual: McEstimate::from_samples(&joint_samples),
    })
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn g(mu: &[f64], lv: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn reverse_closed_form_examples() {
        assert_eq!(kld_reverse_closed_form(&g(&[0.0, 0.0], &[0.0, 0.0])), 0.0);
        assert_abs_diff_eq!(kld_reverse_closed_form(&g(&[1.0, 0.0], &[0.0, 0.0])), 0.5, epsilon = 1e-15);
        let v = kld_reverse_closed_form(&g(&[0.0], &[4f64.ln()]));
        assert_abs_diff_eq!(v, 0.5 * (4.0 - 1.0 - 4f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.806853, epsilon = 1e-6);
    }

    #[test]
    fn forward_closed_form_examples() {
        assert_eq!(kld_forward_closed_form(&g(&[0.0], &[0.0])), 0.0);
        assert_abs_diff_eq!(kld_forward_closed_form(&g(&[1.0], &[0.0])), 0.5, epsilon = 1e-15);
        let fwd = kld_forward_closed_form(&g(&[0.0], &[4f64.ln()]));
        assert_abs_diff_eq!(fwd, 0.318147, epsilon = 1e-6);
        let rev = kld_reverse_closed_form(&g(&[0.0], &[4f64.ln()]));
        assert!((fwd - rev).abs() > 0.1);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        assert!(DiagonalGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![], vec![]).is_err());
    }

    #[test]
    fn mc_matches_closed_form() {
        let prior = g(&[0.0, 0.0], &[0.0, 0.0]);
        let est = kld_reverse_mc(&prior, 1000, 3).unwrap();
        // log-ratio is identically zero at the prior
        assert_abs_diff_eq!(est.mean, 0.0, epsilon = 1e-12);

        let q = g(&[1.0, 0.0], &[0.0, 0.0]);
        let est = kld_reverse_mc(&q, 100_000, 11).unwrap();
        assert!(est.within(0.5, 3.0), "{est:?}");

        let single = kld_reverse_mc(&q, 1, 5).unwrap();
        assert!(single.mean.is_finite());
        assert_eq!(single.n, 1);
        assert!(kld_reverse_mc(&q, 0, 5).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let q = g(&[0.3, -1.2], &[0.5, -0.7]);
        assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap().0, vec![0.3, -1.2]);
        let unit = g(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(reparameterize(&unit, &[1.0, -1.0]).unwrap().0, vec![1.0, -1.0]);
        let z = reparameterize(&g(&[2.0], &[9f64.ln()]), &[1.0]).unwrap();
        assert_abs_diff_eq!(z.0[0], 5.0, epsilon = 1e-12);
        assert!(reparameterize(&q, &[1.0]).is_err());
    }

    /// Quadrature oracle for the 1-d mutual information of an equal mixture.
    fn mi_by_quadrature(components: &[(f64, f64)]) -> f64 {
        let pdf = |z: f64, m: f64, s: f64| {
            (-(z - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let k = components.len() as f64;
        let (lo, hi, n) = (-20.0, 20.0, 400_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for step in 0..=n {
            let z = lo + step as f64 * h;
            let mix: f64 = components.iter().map(|&(m, s)| pdf(z, m, s)).sum::<f64>() / k;
            let w = if step == 0 || step == n { 0.5 } else { 1.0 };
            for &(m, s) in components {
                let q = pdf(z, m, s);
                if q > 0.0 {
                    total += w * h * q * (q / mix).ln() / k;
                }
            }
        }
        total
    }

    #[test]
    fn mi_decomposition_two_separated_components() {
        let ps = [g(&[-3.0], &[0.0]), g(&[3.0], &[0.0])];
        let r = mi_decomposition_check(&ps, 100_000, 17).unwrap();
        assert_abs_diff_eq!(r.lhs, 4.5, epsilon = 1e-12);
        assert!(r.residual.within(0.0, 3.0), "{r:?}");
        let oracle = mi_by_quadrature(&[(-3.0, 1.0), (3.0, 1.0)]);
        assert!((oracle - 2f64.ln()).abs() < 0.01);
        assert!(r.mi.within(oracle, 3.0), "mi {:?} vs oracle {oracle}", r.mi);
        assert!(r.aggregate_kld.mean >= -3.0 * r.aggregate_kld.std_error);
    }

    #[test]
    fn mi_decomposition_identical_components() {
        let p = g(&[0.7, -0.2], &[-0.3, 0.4]);
        let r = mi_decomposition_check(&[p.clone(), p.clone()], 20_000, 2).unwrap();
        assert_abs_diff_eq!(r.mi.mean, 0.0, epsilon = 1e-12);
        assert!(r.aggregate_kld.within(r.lhs, 3.0));
    }

    #[test]
    fn mi_decomposition_rejects_bad_input() {
        let a = g(&[0.0], &[0.0]);
        let b = g(&[0.0, 1.0], &[0.0, 0.0]);
        assert!(mi_decomposition_check(&[a.clone()], 10, 0).is_err());
        assert!(mi_decomposition_check(&[a, b], 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn reverse_kld_is_nonnegative(
            params in prop::collection::vec((-3.0f64..3.0, -4.0f64..2.0), 1..8)
        ) {
            let (mu, lv): (Vec<_>, Vec<_>) = params.into_iter().unzip();
            let q = DiagonalGaussian::new(mu, lv).unwrap();
            prop_assert!(kld_reverse_closed_form(&q) >= 0.0);
            prop_assert!(kld_forward_closed_form(&q) >= 0.0);
        }

        #[test]
        fn reparameterize_is_linear_in_epsilon(
            params in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..6),
            a in -2.0f64..2.0,
        ) {
            let mu: Vec<f64> = params.iter().map(|p| p.0).collect();
            let lv: Vec<f64> = params.iter().map(|p| p.1).collect();
            let e1: Vec<f64> = params.iter().map(|p| p.2).collect();
            let e2: Vec<f64> = params.iter().map(|p| p.3).collect();
            let q = DiagonalGaussian::new(mu.clone(), lv).unwrap();
            let mixed: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
            let z1 = reparameterize(&q, &e1).unwrap();
            let z2 = reparameterize(&q, &e2).unwrap();
            let zm = reparameterize(&q, &mixed).unwrap();
            for i in 0..mu.len() {
                let expected = a * z1.0[i] + (1.0 - a) * z2.0[i];
                prop_assert!((zm.0[i] - expected).abs() < 1e-9);
            }
        }
    }
}

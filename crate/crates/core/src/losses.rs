//! Soft Dice reconstruction loss and the β-weighted ELBO objective.

use serde::{Deserialize, Serialize};

use crate::data::VoxelGrid;
use crate::error::{invalid, Result};
use crate::gaussian::{kld_reverse_closed_form, DiagonalGaussian};
use crate::nn::layers::sigmoid;

/// Additive smoothing ε_s in voxel-count units.
pub const DICE_SMOOTHING: f64 = 1.0;

/// `1 − (2·Σ p·t + ε_s) / (Σ p + Σ t + ε_s)`.
pub fn soft_dice_loss(pred: &VoxelGrid, target: &VoxelGrid) -> Result<f64> {
    pred.same_shape(target)?;
    Ok(soft_dice_with_grad(pred.values(), target.values(), false).0)
}

/// Loss and, when requested, `dL/dp` per voxel.
pub fn soft_dice_with_grad(pred: &[f32], target: &[f32], with_grad: bool) -> (f64, Vec<f32>) {
    debug_assert_eq!(pred.len(), target.len());
    let (mut inter, mut sum_p, mut sum_t) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p as f64 * t as f64;
        sum_p += p as f64;
        sum_t += t as f64;
    }
    let num = 2.0 * inter + DICE_SMOOTHING;
    let den = sum_p + sum_t + DICE_SMOOTHING;
    let loss = 1.0 - num / den;
    if !with_grad {
        return (loss, Vec::new());
    }
    let inv = 1.0 / (den * den);
    let grad = target
        .iter()
        .map(|&t| (-(2.0 * t as f64 * den - num) * inv) as f32)
        .collect();
    (loss, grad)
}

/// Dice loss on `sigmoid(logits)` with the gradient taken w.r.t. the logits.
pub fn soft_dice_from_logits(logits: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    let p: Vec<f32> = logits.iter().map(|&v| sigmoid(v)).collect();
    let (loss, mut grad) = soft_dice_with_grad(&p, target, true);
    for (g, &pi) in grad.iter_mut().zip(&p) {
        *g *= pi * (1.0 - pi);
    }
    (loss, grad)
}

/// Gradient of the reverse KLD against `N(0, I)` w.r.t. `(mu, log_variance)`.
pub fn kld_gradient(mu: &[f32], log_variance: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let dmu = mu.to_vec();
    let dlv = log_variance.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect();
    (dmu, dlv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub reconstruction_loss: f64,
    pub kld: f64,
    pub beta: f64,
    pub total: f64,
}

impl ElboTerms {
    pub fn new(reconstruction_loss: f64, kld: f64, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(invalid(format!("beta must be nonnegative, got {beta}")));
        }
        let total = reconstruction_loss + beta * kld;
        if ![reconstruction_loss, kld, total].iter().all(|v| v.is_finite()) {
            return Err(invalid("ELBO terms must be finite"));
        }
        Ok(Self {
            reconstruction_loss,
            kld,
            beta,
            total,
        })
    }

    /// `beta * kld`.
    pub fn kld_contribution(&self) -> f64 {
        self.beta * self.kld
    }
}

/// Negative β-ELBO as a loss: Dice reconstruction plus `beta` times the
/// closed-form reverse KLD of `posterior`.
pub fn beta_elbo(pred: &VoxelGrid, target: &VoxelGrid, posterior: &DiagonalGaussian, beta: f64) -> Result<ElboTerms> {
    let rec = soft_dice_loss(pred, target)?;
    let kld = kld_reverse_closed_form(posterior);
    ElboTerms::new(rec, kld, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(values: Vec<f32>) -> VoxelGrid {
        VoxelGrid::new([8, 8, 8], values).unwrap()
    }

    #[test]
    fn dice_examples() {
        let n = 512;
        let ones = grid(vec![1.0; n]);
        let half = grid(vec![0.5; n]);
        let l = soft_dice_loss(&half, &ones).unwrap();
        // (2·256 + 1) / (256 + 512 + 1)
        assert!((l - (1.0 - 513.0 / 769.0)).abs() < 1e-12);
        assert!((l - 1.0 / 3.0).abs() < 1e-3);
        assert_eq!(soft_dice_loss(&ones, &ones).unwrap(), 0.0);
        let mut a = vec![0.0; n];
        a[..256].fill(1.0);
        let mut b = vec![0.0; n];
        b[256..].fill(1.0);
        let disjoint = soft_dice_loss(&grid(a), &grid(b)).unwrap();
        assert!(disjoint > 0.99 && disjoint <= 1.0);
        assert!(soft_dice_loss(&ones, &VoxelGrid::zeros([8, 8, 16]).unwrap()).is_err());
    }

    #[test]
    fn elbo_examples() {
        let t = grid(vec![1.0; 512]);
        let p = grid(vec![0.5; 512]);
        let q = DiagonalGaussian::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let e0 = beta_elbo(&p, &t, &q, 0.0).unwrap();
        assert_eq!(e0.total, e0.reconstruction_loss);
        let prior = DiagonalGaussian::standard(2).unwrap();
        let ep = beta_elbo(&p, &t, &prior, 100.0).unwrap();
        assert_eq!(ep.total, ep.reconstruction_loss);
        let hi = beta_elbo(&p, &t, &q, 100.0).unwrap();
        let lo = beta_elbo(&p, &t, &q, 0.0001).unwrap();
        let ratio = hi.kld_contribution() / lo.kld_contribution();
        assert!((ratio - 1e6).abs() < 1e-3, "{ratio}");
        assert!(beta_elbo(&p, &t, &q, -1.0).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut r = crate::rng::stream(9, 0);
        use rand::Rng as _;
        for _ in 0..5 {
            let p: Vec<f64> = (0..64).map(|_| r.random_range(0.05..0.95)).collect();
            let t: Vec<f32> = (0..64).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let pf: Vec<f32> = p.iter().map(|&v| v as f32).collect();
            let (_, grad) = soft_dice_with_grad(&pf, &t, true);
            // f64 oracle of the loss definition
            let loss64 = |p: &[f64]| {
                let i: f64 = p.iter().zip(&t).map(|(a, b)| a * *b as f64).sum();
                let sp: f64 = p.iter().sum();
                let st: f64 = t.iter().map(|&v| v as f64).sum();
                1.0 - (2.0 * i + DICE_SMOOTHING) / (sp + st + DICE_SMOOTHING)
            };
            for j in 0..64 {
                let h = 1e-6;
                let mut pp = p.clone();
                pp[j] += h;
                let mut pm = p.clone();
                pm[j] -= h;
                let fd = (loss64(&pp) - loss64(&pm)) / (2.0 * h);
                let rel = (fd - grad[j] as f64).abs() / fd.abs().max(1e-12);
                assert!(rel <= 1e-4, "voxel {j}: fd {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn kld_gradient_matches_closed_form() {
        let mu = [0.3f32, -1.2];
        let lv = [0.4f32, -0.7];
        let (dmu, dlv) = kld_gradient(&mu, &lv);
        let f = |mu: [f64; 2], lv: [f64; 2]| {
            kld_reverse_closed_form(&DiagonalGaussian::new(mu.to_vec(), lv.to_vec()).unwrap())
        };
        let m = mu.map(|v| v as f64);
        let l = lv.map(|v| v as f64);
        for i in 0..2 {
            let h = 1e-6;
            let (mut a, mut b) = (m, m);
            a[i] += h;
            b[i] -= h;
            assert!(((f(a, l) - f(b, l)) / (2.0 * h) - dmu[i] as f64).abs() < 1e-5);
            let (mut a, mut b) = (l, l);
            a[i] += h;
            b[i] -= h;
            assert!(((f(m, a) - f(m, b)) / (2.0 * h) - dlv[i] as f64).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn dice_bounded_and_symmetric(bits in proptest::collection::vec(any::<bool>(), 1024)) {
            let a = grid(bits[..512].iter().map(|&b| b as u8 as f32).collect());
            let b = grid(bits[512..].iter().map(|&b| b as u8 as f32).collect());
            let ab = soft_dice_loss(&a, &b).unwrap();
            let ba = soft_dice_loss(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn elbo_monotone_in_beta(b1 in 0.0f64..100.0, b2 in 0.0f64..100.0, m in -3.0f64..3.0, lv in -2.0f64..2.0) {
            let t = grid(vec![1.0; 512]);
            let p = grid(vec![0.25; 512]);
            let q = DiagonalGaussian::new(vec![m], vec![lv]).unwrap();
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            prop_assert!(beta_elbo(&p, &t, &q, lo).unwrap().total <= beta_elbo(&p, &t, &q, hi).unwrap().total);
        }
    }
}

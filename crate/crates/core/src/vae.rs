//! Per-step Gaussian latent head.
//!
//! A hidden state `h` of even width `d` is read as a diagonal Gaussian:
//! the trailing half is the mean and the exponentiated leading half is the
//! variance. Samples are drawn by reparameterization and regularized by the
//! KL divergence to a standard-normal prior.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Variances are clamped to at least this value before any logarithm.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Posterior parameters living on a tape, one row per batch element.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub sigma2: Var,
}

/// Concrete posterior values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(Error::Dimension {
                op: "posterior",
                left: [1, mu.len()],
                right: [1, sigma2.len()],
            });
        }
        if let Some(&bad) = sigma2.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("variance must be positive, got {bad}")));
        }
        Ok(GaussianPosterior { mu, sigma2 })
    }

    /// Read a hidden vector: `mu = h[d/2..]`, `sigma2 = exp(h[..d/2])`.
    pub fn from_hidden(h: &[f64]) -> Result<Self> {
        if h.len() % 2 != 0 {
            return Err(Error::OddWidth(h.len()));
        }
        let half = h.len() / 2;
        Ok(GaussianPosterior {
            mu: h[half..].to_vec(),
            sigma2: h[..half].iter().map(|v| v.exp().max(VARIANCE_FLOOR)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `D_KL(q ‖ N(0, I))`.
    pub fn kl(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.sigma2)
            .map(|(&m, &s)| m * m + s - s.ln() - 1.0)
            .sum::<f64>()
    }

    pub fn sample_with(&self, eps: Vec<f64>) -> Result<LatentSample> {
        if eps.len() != self.dim() {
            return Err(Error::Dimension {
                op: "reparameterize",
                left: [1, self.dim()],
                right: [1, eps.len()],
            });
        }
        let z = self
            .mu
            .iter()
            .zip(&self.sigma2)
            .zip(&eps)
            .map(|((&m, &s), &e)| m + s.sqrt() * e)
            .collect();
        Ok(LatentSample { z, eps })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSample {
        let eps = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(eps).expect("eps length matches")
    }

    /// `ln q(z)` for this diagonal Gaussian.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.sigma2)
            .zip(z)
            .map(|((&m, &s), &x)| -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (x - m).powi(2) / s))
            .sum()
    }
}

/// Split a batch of hidden rows into posterior parameters on the tape.
pub fn split_posterior(tape: &mut Tape, h: Var) -> Result<Posterior> {
    let d = tape.shape(h)[1];
    if d % 2 != 0 {
        return Err(Error::OddWidth(d));
    }
    let half = d / 2;
    let log_var = tape.slice(h, 0, half)?;
    let mu = tape.slice(h, half, d)?;
    let sigma2 = tape.exp(log_var);
    let sigma2 = tape.clamp_min(sigma2, VARIANCE_FLOOR);
    Ok(Posterior { mu, sigma2 })
}

/// `z = mu + sqrt(sigma2) ⊙ eps`; `eps` is a constant, so gradients reach only `mu` and `sigma2`.
pub fn reparameterize(tape: &mut Tape, p: &Posterior, eps: Tensor) -> Result<Var> {
    let eps = tape.constant(eps);
    let sd = tape.sqrt(p.sigma2);
    let noise = tape.mul(sd, eps)?;
    tape.add(p.mu, noise)
}

/// Standard-normal noise shaped like a posterior parameter block.
pub fn draw_eps<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.as_slice_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Per-row KL divergence to the standard-normal prior, an `m × 1` column.
pub fn kl_standard_normal(tape: &mut Tape, p: &Posterior) -> Result<Var> {
    tape.kl_standard_normal(p.mu, p.sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_hidden_is_standard_normal() {
        let p = GaussianPosterior::from_hidden(&[0.0; 6]).unwrap();
        assert_eq!(p.mu, vec![0.0; 3]);
        assert_eq!(p.sigma2, vec![1.0; 3]);
        assert_eq!(p.kl(), 0.0);
    }

    #[test]
    fn split_by_hand() {
        let h = [4f64.ln(), 4f64.ln(), 3.0, 5.0];
        let p = GaussianPosterior::from_hidden(&h).unwrap();
        assert_eq!(p.mu, vec![3.0, 5.0]);
        assert!((p.sigma2[0] - 4.0).abs() < 1e-12 && (p.sigma2[1] - 4.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::row(h.to_vec()));
        let q = split_posterior(&mut tape, hv).unwrap();
        assert_eq!(tape.value(q.mu).to_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(GaussianPosterior::from_hidden(&[0.0; 3]), Err(Error::OddWidth(3))));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(2, 5));
        assert!(matches!(split_posterior(&mut tape, h), Err(Error::OddWidth(5))));
    }

    #[test]
    fn variance_floor_applies() {
        let p = GaussianPosterior::from_hidden(&[-1000.0, 0.0]).unwrap();
        assert_eq!(p.sigma2[0], VARIANCE_FLOOR);
        assert!(p.kl().is_finite());
    }

    #[test]
    fn reparameterize_cases() {
        let p = GaussianPosterior::new(vec![1.5, -2.0], vec![9.0, 0.25]).unwrap();
        assert_eq!(p.sample_with(vec![0.0, 0.0]).unwrap().z, p.mu);
        let unit = GaussianPosterior::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(unit.sample_with(vec![0.3, -1.1]).unwrap().z, vec![0.3, -1.1]);
        assert!(p.sample_with(vec![0.0]).is_err());
    }

    #[test]
    fn kl_known_values() {
        let p = GaussianPosterior::new(vec![1.0], vec![1.0]).unwrap();
        assert!((p.kl() - 0.5).abs() < 1e-15);
        let p = GaussianPosterior::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(p.kl().abs() < 1e-12);
    }

    #[test]
    fn sample_moments() {
        let p = GaussianPosterior::new(vec![1.0], vec![4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = p.sample(&mut rng).z[0];
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 4.0).abs() < 0.08, "var {var}");
    }

    #[test]
    fn tape_matches_value_kl() {
        let h = [0.3, -0.7, 1.2, -0.4, 0.9, 0.1];
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::row(h.to_vec()));
        let q = split_posterior(&mut tape, hv).unwrap();
        let kl = kl_standard_normal(&mut tape, &q).unwrap();
        let expected = GaussianPosterior::from_hidden(&h).unwrap().kl();
        assert!((tape.scalar_value(kl) - expected).abs() < 1e-14);
    }
}

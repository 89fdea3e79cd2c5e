use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PolicyError;

/// Fixed DDPM variance schedule. Index `k` runs from 1 to `K`; vectors are
/// stored zero-based (`betas[k - 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        Self { betas: s.betas }
    }
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = PolicyError;

    fn try_from(r: ScheduleRepr) -> Result<Self, Self::Error> {
        NoiseSchedule::from_betas(r.betas)
    }
}

impl NoiseSchedule {
    /// Betas must be nondecreasing and strictly inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, PolicyError> {
        let ok = !betas.is_empty()
            && betas.iter().all(|&b| b > 0.0 && b < 1.0)
            && betas.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(PolicyError::InvalidSchedule(format!("{} betas", betas.len())));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        // posterior variance: beta_k (1 - abar_{k-1}) / (1 - abar_k), zero at k = 1
        let sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas })
    }

    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self, PolicyError> {
        if k == 0 {
            return Err(PolicyError::InvalidSchedule("K = 0".into()));
        }
        let betas = (0..k)
            .map(|i| if k == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    /// Linear schedule whose endpoints `1e-4 → 0.02` are rescaled by `1000 / K`,
    /// so a short chain still ends close to pure noise.
    pub fn scaled_linear(k: usize) -> Result<Self, PolicyError> {
        let scale = 1000.0 / k.max(1) as f64;
        Self::linear(k, (1e-4 * scale).min(0.5), (0.02 * scale).min(0.999))
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 { 1.0 } else { self.alpha_bars[k - 1] }
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_k(&self, k: usize) -> Result<(), PolicyError> {
        if k == 0 || k > self.num_steps() {
            return Err(PolicyError::StepOutOfRange { k, max: self.num_steps() });
        }
        Ok(())
    }

    /// `sqrt(abar_k) x0 + sqrt(1 - abar_k) eps` for a given `eps`.
    pub fn noised(&self, x0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_k(k)?;
        let (a, b) = (self.alpha_bar(k).sqrt(), (1.0 - self.alpha_bar(k)).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Draws `eps ~ N(0, I)` and returns `(x_k, eps)`.
    pub fn forward_noise<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        self.check_k(k)?;
        let eps: Vec<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
        Ok((self.noised(x0, k, &eps)?, eps))
    }

    /// Reverse-process mean `(x_k - beta_k / sqrt(1 - abar_k) eps) / sqrt(alpha_k)`.
    pub fn posterior_mean(&self, xk: f64, eps: f64, k: usize) -> f64 {
        (xk - self.beta(k) / (1.0 - self.alpha_bar(k)).sqrt() * eps) / self.alpha(k).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        assert_eq!(s.num_steps(), 50);
        for k in 2..=50 {
            assert!(s.beta(k) >= s.beta(k - 1));
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.alpha_bar(50) < 1e-3);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let x0 = [0.3, -0.7, 1.0];
        let x = s.noised(&x0, 10, &[0.0; 3]).unwrap();
        for (a, b) in x.iter().zip(x0) {
            assert!((a - s.alpha_bar(10).sqrt() * b).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.forward_noise(&x0, 0, &mut rng).is_err());
        assert!(s.forward_noise(&x0, 51, &mut rng).is_err());
    }

    #[test]
    fn forward_noise_statistics() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let k = 12;
        let x0 = [0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..10_000).map(|_| s.forward_noise(&x0, k, &mut rng).unwrap().0[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((mean - s.alpha_bar(k).sqrt() * 0.8).abs() < 0.02, "mean {mean}");
        assert!((var - (1.0 - s.alpha_bar(k))).abs() < 0.02, "var {var}");
    }

    #[test]
    fn serde_keeps_betas_only() {
        let s = NoiseSchedule::linear(5, 0.01, 0.2).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NoiseSchedule>(&json).unwrap(), s);
    }
}

use crate::error::{Error, Result};

/// Per-timestep noise variances and their cumulative signal retention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("noise schedule needs at least one timestep".into()));
        }
        let beta = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("noise schedule needs at least one timestep".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie strictly inside (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 0..{}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_invariants() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.timesteps(), 100);
        assert!((s.alpha_bar()[0] - 0.9999).abs() < 1e-12);
        assert!((s.beta()[99] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a < 1.0));
        for t in 0..100 {
            let direct: f64 = s.beta()[..=t].iter().map(|b| 1.0 - b).product();
            assert!((direct - s.alpha_bar()[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.05]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
    }
}

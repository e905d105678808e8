use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Serializable recipe for a [`NoiseSchedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Per-step beta at t = 1 and t = T (linear-beta only).
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 200;

/// Largest per-step beta allowed by the cosine schedule.
const COSINE_MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

impl ScheduleSpec {
    /// Linear betas spanning `[1e-4, 0.02]` at T = 1000, rescaled by `1000 / T`
    /// so that shorter chains reach the same terminal noise level.
    pub fn linear(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        ScheduleSpec {
            kind: ScheduleKind::LinearBeta,
            steps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }

    pub fn cosine(steps: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            steps,
            beta_start: 0.0,
            beta_end: COSINE_MAX_BETA,
        }
    }

    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        match kind {
            ScheduleKind::LinearBeta => Self::linear(steps),
            ScheduleKind::Cosine => Self::cosine(steps),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(self.clone())
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS)
    }
}

/// Variance-preserving schedule: `alpha[t]` is the cumulative product of
/// `(1 - beta)` and `sigma[t]^2 = 1 - alpha[t]`, for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    fingerprint: u64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        ScheduleSpec::new(kind, steps).build()
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let t_max = spec.steps;
        if t_max < 10 {
            return Err(Error::config(format!("schedule needs T >= 10, got {t_max}")));
        }
        let mut betas = vec![0.0; t_max + 1];
        match spec.kind {
            ScheduleKind::LinearBeta => {
                for (t, b) in betas.iter_mut().enumerate().skip(1) {
                    let frac = (t - 1) as f64 / (t_max - 1) as f64;
                    *b = spec.beta_start + (spec.beta_end - spec.beta_start) * frac;
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                for (t, b) in betas.iter_mut().enumerate().skip(1) {
                    *b = (1.0 - f(t) / f(t - 1)).min(spec.beta_end);
                }
            }
        }
        if let Some((t, b)) = betas
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::config(format!(
                "beta[{t}] = {b} outside (0, 1); T = {t_max} too small for this schedule"
            )));
        }
        let mut alpha = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            alpha[t] = alpha[t - 1] * (1.0 - betas[t]);
        }
        let sigma: Vec<f64> = alpha.iter().map(|a| (1.0 - a).sqrt()).collect();
        let sched = NoiseSchedule {
            fingerprint: fingerprint(&alpha),
            spec,
            betas,
            alpha,
            sigma,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let t_max = self.steps();
        if self.alpha[t_max] >= 1e-3 {
            return Err(Error::config(format!(
                "alpha_T = {} not below 1e-3; increase T or the beta range",
                self.alpha[t_max]
            )));
        }
        for t in 2..=t_max {
            if self.snr(t) >= self.snr(t - 1) {
                return Err(Error::config(format!("SNR not strictly decreasing at t = {t}")));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// T, the last timestep.
    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `alpha_t^2 / sigma_t^2`; infinite at t = 0.
    pub fn snr(&self, t: usize) -> f64 {
        let s2 = self.sigma[t] * self.sigma[t];
        if s2 == 0.0 {
            f64::INFINITY
        } else {
            self.alpha[t] * self.alpha[t] / s2
        }
    }

    /// Variance of the one-step posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha[t - 1]) / (1.0 - self.alpha[t]) * self.betas[t]
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn check_t(&self, t: usize, context: &'static str) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
                context,
            });
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if expected != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    /// Rounds `frac * T` to a timestep.
    pub fn fraction(&self, frac: f64) -> usize {
        ((frac * self.steps() as f64).round() as usize).min(self.steps())
    }
}

/// 64-bit FNV-1a over the little-endian bytes of the alpha array.
pub fn fingerprint(alpha: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for a in alpha {
        for byte in a.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_hold_exhaustively() {
        for spec in [
            ScheduleSpec::linear(200),
            ScheduleSpec::linear(1000),
            ScheduleSpec::linear(50),
            ScheduleSpec::cosine(200),
            ScheduleSpec::cosine(10),
        ] {
            let s = spec.build().unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.sigma(0), 0.0);
            assert!(s.alpha(s.steps()) < 1e-3);
            for t in 1..=s.steps() {
                assert!(s.snr(t) < s.snr(t - 1), "{:?} t={t}", spec.kind);
                assert!((s.alpha(t) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_1000_terminal_alpha() {
        // Independent cumulative product with beta linear in [1e-4, 0.02].
        let mut prod = 1.0f64;
        for t in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0);
        }
        let s = ScheduleSpec::linear(1000).build().unwrap();
        assert!(prod < 1e-3);
        assert!((s.alpha(1000) - prod).abs() < 1e-15);
    }

    #[test]
    fn too_short_schedules_are_rejected() {
        assert!(ScheduleSpec::linear(9).build().is_err());
        assert!(ScheduleSpec::linear(10).build().is_err()); // beta_end = 2
    }

    #[test]
    fn fingerprint_distinguishes_schedules() {
        let a = ScheduleSpec::linear(200).build().unwrap();
        let b = ScheduleSpec::cosine(200).build().unwrap();
        let a2 = ScheduleSpec::linear(200).build().unwrap();
        assert_eq!(a.fingerprint(), a2.fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert!(a.check_fingerprint(b.fingerprint()).is_err());
    }

    #[test]
    fn posterior_variance_vanishes_at_first_step() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!(s.posterior_variance(2) > 0.0);
    }
}

use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numeric::{RandomSource, Tape, Tensor, Var};

/// Noise-prediction network `eps_theta(x_t, t)`.
pub trait NoisePredictor: Sync {
    /// Fingerprint of the schedule the model was trained on, if any.
    fn schedule_fingerprint(&self) -> Option<u64> {
        None
    }

    /// Differentiable forward; `ts` holds one timestep per batch row.
    fn predict_noise_on(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var>;

    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ts = vec![t; x.batch_len()];
        let out = self.predict_noise_on(&mut tape, xv, &ts)?;
        Ok(tape.value(out).clone())
    }
}

/// Time-conditioned classifier `f_phi(x_t, t)` producing logits.
pub trait TimeClassifier: Sync {
    fn num_classes(&self) -> usize;

    fn schedule_fingerprint(&self) -> Option<u64> {
        None
    }

    fn logits_on(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var>;
}

/// Refuses a model trained under a different schedule.
pub fn check_compatible(sched: &NoiseSchedule, trained_on: Option<u64>) -> Result<()> {
    match trained_on {
        Some(fp) => sched.check_fingerprint(fp),
        None => Ok(()),
    }
}

/// Classifier guidance towards `labels` (one per batch row) with scale `s`.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub classifier: &'a dyn TimeClassifier,
    pub scale: f64,
    pub labels: &'a [usize],
}

/// Default guidance scale.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(Error::config(format!("unknown sampler {other:?}"))),
        }
    }
}

/// `sqrt(alpha_t) * x0 + sigma_t * eps`.
pub fn forward_sample(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_t(t, "forward_sample")?;
    x0.expect_same_shape(eps, "forward_sample")?;
    let a = sched.alpha(t).sqrt();
    let s = sched.sigma(t);
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Differentiable [`forward_sample`] with `eps` held constant.
pub fn forward_sample_on(
    tape: &mut Tape,
    sched: &NoiseSchedule,
    x0: Var,
    t: usize,
    eps: &Tensor,
) -> Result<Var> {
    sched.check_t(t, "forward_sample")?;
    tape.value(x0).expect_same_shape(eps, "forward_sample")?;
    let e = tape.constant(eps.clone());
    tape.affine2(x0, sched.alpha(t).sqrt(), e, sched.sigma(t))
}

/// `grad_{x_t} log p_phi(y | x_t, t)` for every batch row.
pub fn classifier_score(guid: &Guidance<'_>, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let k = guid.classifier.num_classes();
    if let Some(&bad) = guid.labels.iter().find(|&&y| y >= k) {
        return Err(Error::IndexOutOfRange {
            op: "classifier_score",
            index: bad,
            extent: k,
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(x_t.clone());
    let ts = vec![t; x_t.batch_len()];
    let logits = guid.classifier.logits_on(&mut tape, x, &ts)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, guid.labels)?;
    let total = tape.sum(picked);
    let grads = tape.backward(total)?;
    Ok(grads.get_or_zeros(x, x_t))
}

fn check_step(sched: &NoiseSchedule, t: usize, op: &'static str) -> Result<()> {
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.steps(),
            context: op,
        });
    }
    sched.check_t(t, op)
}

/// Posterior mean from a given noise estimate:
/// `sqrt(a_{t-1}/a_t) * (x_t - ((s_t^2 - (a_t/a_{t-1}) s_{t-1}^2) / s_t) * eps)`.
pub fn posterior_mu_from_eps(
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    check_step(sched, t, "posterior_mu")?;
    let (a_t, a_p) = (sched.alpha(t), sched.alpha(t - 1));
    let (s_t, s_p) = (sched.sigma(t), sched.sigma(t - 1));
    let lead = (a_p / a_t).sqrt();
    let coef = (s_t * s_t - (a_t / a_p) * s_p * s_p) / s_t;
    x_t.zip_map(eps, |x, e| lead * (x - coef * e))
}

pub fn posterior_mu(
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    check_step(sched, t, "posterior_mu")?;
    check_compatible(sched, denoiser.schedule_fingerprint())?;
    let eps = denoiser.predict_noise(x_t, t)?;
    posterior_mu_from_eps(sched, x_t, t, &eps)
}

/// One ancestral step with explicit standard-normal noise `z`.
pub fn reverse_step_with_noise(
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    let mut mean = posterior_mu(sched, denoiser, x_t, t)?;
    if let Some(g) = guidance.filter(|g| g.scale != 0.0) {
        let score = classifier_score(g, x_t, t)?;
        mean.axpy(g.scale * sched.sigma(t), &score)?;
    }
    let sd = sched.posterior_variance(t).sqrt();
    mean.zip_map(z, |m, n| m + sd * n)
}

/// One ancestral step drawing its noise from `rng`.
pub fn reverse_step(
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    rng: &mut RandomSource,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    check_step(sched, t, "reverse_step")?;
    let z = rng.gaussian(x_t.shape());
    reverse_step_with_noise(sched, denoiser, x_t, t, &z, guidance)
}

fn check_ddim(sched: &NoiseSchedule, t: usize, t_prev: usize) -> Result<()> {
    sched.check_t(t, "ddim_step")?;
    if t_prev >= t {
        return Err(Error::config(format!(
            "ddim_step needs t_prev < t, got t_prev = {t_prev}, t = {t}"
        )));
    }
    Ok(())
}

/// Deterministic DDIM update from `t` to `t_prev`. Guidance replaces the
/// noise estimate by `eps - s * sigma_t * score`.
pub fn ddim_step(
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    check_ddim(sched, t, t_prev)?;
    check_compatible(sched, denoiser.schedule_fingerprint())?;
    let mut eps = denoiser.predict_noise(x_t, t)?;
    if let Some(g) = guidance.filter(|g| g.scale != 0.0) {
        let score = classifier_score(g, x_t, t)?;
        eps.axpy(-g.scale * sched.sigma(t), &score)?;
    }
    ddim_from_eps(sched, x_t, t, t_prev, &eps)
}

pub fn ddim_from_eps(
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    let (ra_t, s_t) = (sched.alpha(t).sqrt(), sched.sigma(t));
    let (ra_p, s_p) = (sched.alpha(t_prev).sqrt(), sched.sigma(t_prev));
    x_t.zip_map(eps, |x, e| ra_p * (x - s_t * e) / ra_t + s_p * e)
}

/// Differentiable unguided DDIM step.
pub fn ddim_step_on(
    tape: &mut Tape,
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    x_t: Var,
    t: usize,
    t_prev: usize,
) -> Result<Var> {
    check_ddim(sched, t, t_prev)?;
    let b = tape.value(x_t).batch_len();
    let eps = denoiser.predict_noise_on(tape, x_t, &vec![t; b])?;
    let (ra_t, s_t) = (sched.alpha(t).sqrt(), sched.sigma(t));
    let (ra_p, s_p) = (sched.alpha(t_prev).sqrt(), sched.sigma(t_prev));
    // ra_p/ra_t * x + (s_p - ra_p * s_t / ra_t) * eps
    tape.affine2(x_t, ra_p / ra_t, eps, s_p - ra_p * s_t / ra_t)
}

/// Timesteps visited by a strided chain: `t_start`, then down by `stride`,
/// always ending exactly at `t_end`.
pub fn chain_timesteps(t_start: usize, t_end: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ts = vec![t_start];
    let mut t = t_start;
    while t > t_end {
        t = t.saturating_sub(stride).max(t_end);
        ts.push(t);
    }
    ts
}

/// Iterates reverse steps from `t_start` down to `t_end`. DDPM always
/// steps by one and needs `rng`; DDIM uses `stride` and no randomness.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain(
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    start: &Tensor,
    t_start: usize,
    t_end: usize,
    sampler: Sampler,
    stride: usize,
    rng: Option<&mut RandomSource>,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    sched.check_t(t_start, "sample_chain")?;
    if t_end > t_start {
        return Err(Error::config(format!(
            "sample_chain needs t_end <= t_start, got {t_end} > {t_start}"
        )));
    }
    let mut x = start.clone();
    match sampler {
        Sampler::Ddpm => {
            if t_end == t_start {
                return Ok(x);
            }
            let rng = rng.ok_or_else(|| Error::config("ddpm sampling needs a random source"))?;
            for t in ((t_end + 1)..=t_start).rev() {
                x = reverse_step(sched, denoiser, &x, t, rng, guidance)?;
            }
        }
        Sampler::Ddim => {
            let ts = chain_timesteps(t_start, t_end, stride);
            for w in ts.windows(2) {
                x = ddim_step(sched, denoiser, &x, w[0], w[1], guidance)?;
            }
        }
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("sample_chain output".into()));
    }
    Ok(x)
}

/// Differentiable unguided DDIM chain.
pub fn ddim_chain_on(
    tape: &mut Tape,
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    x: Var,
    t_start: usize,
    t_end: usize,
    stride: usize,
) -> Result<Var> {
    let mut v = x;
    for w in chain_timesteps(t_start, t_end, stride).windows(2) {
        v = ddim_step_on(tape, sched, denoiser, v, w[0], w[1])?;
    }
    Ok(v)
}

#[cfg(test)]
pub(crate) mod stubs {
    use super::*;

    /// Returns a fixed tensor regardless of input.
    pub struct FixedNoise(pub Tensor);

    impl NoisePredictor for FixedNoise {
        fn predict_noise_on(&self, tape: &mut Tape, _x: Var, _ts: &[usize]) -> Result<Var> {
            Ok(tape.constant(self.0.clone()))
        }
    }

    /// `eps = c * x`, differentiable.
    pub struct LinearNoise(pub f64);

    impl NoisePredictor for LinearNoise {
        fn predict_noise_on(&self, tape: &mut Tape, x: Var, _ts: &[usize]) -> Result<Var> {
            Ok(tape.mul_scalar(x, self.0))
        }
    }

    /// Logits `W * flatten(x) + t * u`, a smooth toy time classifier.
    pub struct LinearTimeClassifier {
        pub w: Tensor,
        pub u: Tensor,
    }

    impl TimeClassifier for LinearTimeClassifier {
        fn num_classes(&self) -> usize {
            self.w.shape()[1]
        }

        fn logits_on(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var> {
            let f = tape.flatten(x)?;
            let w = tape.constant(self.w.clone());
            let z = tape.matmul(f, w)?;
            let k = self.num_classes();
            let shift = Tensor::from_fn(&[ts.len(), k], |i| {
                ts[i / k] as f64 * self.u.data()[i % k] * 0.01
            });
            let s = tape.constant(shift);
            tape.add(z, s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::diffusion::ScheduleSpec;
    use crate::numeric::{grad_check, GradCheck};

    fn sched() -> NoiseSchedule {
        ScheduleSpec::default().build().unwrap()
    }

    fn toy_classifier(seed: u64, n: usize, k: usize) -> LinearTimeClassifier {
        let mut r = RandomSource::new(seed, 0);
        LinearTimeClassifier {
            w: r.gaussian(&[n, k]).scale(0.3),
            u: r.gaussian(&[k]),
        }
    }

    #[test]
    fn forward_at_zero_is_identity() {
        let s = sched();
        let x = RandomSource::new(1, 0).gaussian(&[2, 1, 4, 4]);
        let e = RandomSource::new(2, 0).gaussian(&[2, 1, 4, 4]);
        assert_eq!(forward_sample(&s, &x, 0, &e).unwrap(), x);
        assert!(forward_sample(&s, &x, 201, &e).is_err());
    }

    #[test]
    fn forward_gradient_is_sqrt_alpha() {
        let s = sched();
        let x = RandomSource::new(1, 0).gaussian(&[1, 1, 3, 3]);
        let e = RandomSource::new(2, 0).gaussian(&[1, 1, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let xt = forward_sample_on(&mut tape, &s, xv, 50, &e).unwrap();
        let tot = tape.sum(xt);
        let g = tape.backward(tot).unwrap();
        let want = s.alpha(50).sqrt();
        assert!(g.get(xv).unwrap().data().iter().all(|v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn posterior_mu_with_zero_noise_scales_input() {
        let s = sched();
        let x = RandomSource::new(3, 0).gaussian(&[1, 1, 4, 4]);
        let zero = FixedNoise(Tensor::zeros(&[1, 1, 4, 4]));
        let mu = posterior_mu(&s, &zero, &x, 10).unwrap();
        let k = (s.alpha(9) / s.alpha(10)).sqrt();
        assert!(mu.max_abs_diff(&x.scale(k)).unwrap() < 1e-15);
        assert!(posterior_mu(&s, &zero, &x, 0).is_err());
    }

    #[test]
    fn posterior_mu_with_true_noise_matches_analytic_posterior() {
        // q(x_{t-1} | x_t, x_0) mean in the closed form of the DDPM posterior.
        let s = sched();
        let x0 = RandomSource::new(4, 0).gaussian(&[1, 1, 4, 4]);
        let eps = RandomSource::new(5, 0).gaussian(&[1, 1, 4, 4]);
        for t in [1, 2, 10, 100, 200] {
            let xt = forward_sample(&s, &x0, t, &eps).unwrap();
            let mu = posterior_mu(&s, &FixedNoise(eps.clone()), &xt, t).unwrap();
            let (ab_t, ab_p, b) = (s.alpha(t), s.alpha(t - 1), s.beta(t));
            let c0 = ab_p.sqrt() * b / (1.0 - ab_t);
            let ct = (1.0 - b).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
            let want = x0.zip_map(&xt, |a, b| c0 * a + ct * b).unwrap();
            assert!(mu.max_abs_diff(&want).unwrap() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn reverse_step_zero_noise_is_mean_and_zero_scale_is_unguided() {
        let s = sched();
        let x = RandomSource::new(6, 0).gaussian(&[2, 1, 4, 4]);
        let den = LinearNoise(0.3);
        let z = Tensor::zeros(x.shape());
        let step = reverse_step_with_noise(&s, &den, &x, 40, &z, None).unwrap();
        assert_eq!(step, posterior_mu(&s, &den, &x, 40).unwrap());

        let clf = toy_classifier(7, 16, 3);
        let g = Guidance {
            classifier: &clf,
            scale: 0.0,
            labels: &[0, 2],
        };
        let a = reverse_step(&s, &den, &x, 40, &mut RandomSource::new(9, 1), None).unwrap();
        let b = reverse_step(&s, &den, &x, 40, &mut RandomSource::new(9, 1), Some(&g)).unwrap();
        assert_eq!(a, b);
        let g1 = Guidance { scale: 1.0, ..g };
        let c = reverse_step(&s, &den, &x, 40, &mut RandomSource::new(9, 1), Some(&g1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ddim_with_true_noise_inverts_forward() {
        let s = sched();
        let x0 = RandomSource::new(10, 0).gaussian(&[1, 1, 4, 4]);
        let eps = RandomSource::new(11, 0).gaussian(&[1, 1, 4, 4]);
        for t in [1, 30, 100, 200] {
            let xt = forward_sample(&s, &x0, t, &eps).unwrap();
            let back = ddim_step(&s, &FixedNoise(eps.clone()), &xt, t, 0, None).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-5, "t={t}");
        }
        let xt = forward_sample(&s, &x0, 10, &eps).unwrap();
        assert!(ddim_step(&s, &LinearNoise(0.1), &xt, 10, 10, None).is_err());
    }

    #[test]
    fn ddim_guidance_zero_scale_is_unguided() {
        let s = sched();
        let x = RandomSource::new(12, 0).gaussian(&[2, 1, 4, 4]);
        let clf = toy_classifier(13, 16, 4);
        let g = Guidance {
            classifier: &clf,
            scale: 0.0,
            labels: &[1, 3],
        };
        let den = LinearNoise(0.2);
        let a = ddim_step(&s, &den, &x, 50, 40, None).unwrap();
        let b = ddim_step(&s, &den, &x, 50, 40, Some(&g)).unwrap();
        assert_eq!(a, b);
        let a2 = ddim_step(&s, &den, &x, 50, 40, None).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn score_matches_finite_differences() {
        let clf = toy_classifier(14, 16, 4);
        let x = RandomSource::new(15, 0).gaussian(&[1, 1, 4, 4]);
        let g = Guidance {
            classifier: &clf,
            scale: 1.0,
            labels: &[2],
        };
        let score = classifier_score(&g, &x, 30).unwrap();
        let err = grad_check(
            |tape, xv| {
                let z = clf.logits_on(tape, xv, &[30])?;
                let lp = tape.log_softmax(z)?;
                let p = tape.gather(lp, &[2])?;
                Ok(tape.sum(p))
            },
            &x,
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-4);
        assert!(score.norm_l2() > 0.0);
        let bad = Guidance { labels: &[4], ..g };
        assert!(classifier_score(&bad, &x, 30).is_err());
    }

    #[test]
    fn score_is_invariant_to_class_constant_logit_shift() {
        let base = toy_classifier(16, 16, 3);
        let clf = LinearTimeClassifier {
            w: base.w.clone(),
            u: Tensor::zeros(&[3]),
        };
        let x = RandomSource::new(17, 0).gaussian(&[1, 1, 4, 4]);
        let labels = [1];
        let g = Guidance {
            classifier: &clf,
            scale: 1.0,
            labels: &labels,
        };
        let shifted = LinearTimeClassifier {
            w: clf.w.clone(),
            u: Tensor::full(&[3], 5.0),
        };
        let g2 = Guidance {
            classifier: &shifted,
            ..g
        };
        let a = classifier_score(&g, &x, 20).unwrap();
        let b = classifier_score(&g2, &x, 20).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn chain_edges() {
        assert_eq!(chain_timesteps(30, 0, 3).len(), 11);
        assert_eq!(chain_timesteps(7, 0, 3), vec![7, 4, 1, 0]);
        assert_eq!(chain_timesteps(5, 5, 2), vec![5]);
        let s = sched();
        let x = RandomSource::new(18, 0).gaussian(&[1, 1, 4, 4]);
        let den = LinearNoise(0.1);
        let same = sample_chain(&s, &den, &x, 20, 20, Sampler::Ddim, 1, None, None).unwrap();
        assert_eq!(same, x);
        let a = sample_chain(&s, &den, &x, 20, 0, Sampler::Ddim, 4, None, None).unwrap();
        let b = sample_chain(&s, &den, &x, 20, 0, Sampler::Ddim, 4, None, None).unwrap();
        assert_eq!(a, b);
        assert!(sample_chain(&s, &den, &x, 20, 5, Sampler::Ddpm, 1, None, None).is_err());
        assert!(sample_chain(&s, &den, &x, 5, 20, Sampler::Ddim, 1, None, None).is_err());
    }

    #[test]
    fn differentiable_chain_matches_plain_chain() {
        let s = sched();
        let x = RandomSource::new(19, 0).gaussian(&[1, 1, 4, 4]);
        let den = LinearNoise(0.25);
        let plain = sample_chain(&s, &den, &x, 30, 0, Sampler::Ddim, 3, None, None).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = ddim_chain_on(&mut tape, &s, &den, xv, 30, 0, 3).unwrap();
        assert!(tape.value(out).max_abs_diff(&plain).unwrap() < 1e-12);
    }
}

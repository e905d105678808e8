//! Diffusion purification: noise a `[0, 1]` image to `t*` in the `[-1, 1]`
//! domain, run the reverse chain back to 0, map back and clamp.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    check_compatible, ddim_chain_on, forward_sample, forward_sample_on, sample_chain, NoisePredictor,
    NoiseSchedule, Sampler,
};
use crate::error::{Error, Result};
use crate::models::{from_diffusion_domain, to_diffusion_domain, Classifier, TimeClassifierParams};
use crate::numeric::{RandomSource, Tape, Tensor, Var};
use crate::par;

/// Default `t*` as a fraction of T.
pub const DEFAULT_T_STAR_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Image `i` of every call uses stream `i` of `seed`.
    Fixed,
    /// Each call draws a fresh key from the caller's random source.
    FreshPerCall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifyConfig {
    pub t_star: usize,
    pub sampler: Sampler,
    pub ddim_stride: usize,
    pub seed_policy: SeedPolicy,
    pub seed: u64,
}

impl PurifyConfig {
    /// `t* = 0.15 T`, DDIM with stride `max(1, t*/10)`, fixed seed.
    pub fn for_schedule(sched: &NoiseSchedule, seed: u64) -> Self {
        let t_star = sched.fraction(DEFAULT_T_STAR_FRACTION).max(1);
        PurifyConfig {
            t_star,
            sampler: Sampler::Ddim,
            ddim_stride: (t_star / 10).max(1),
            seed_policy: SeedPolicy::Fixed,
            seed,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        sched.check_t(self.t_star, "purify t_star")?;
        if self.ddim_stride == 0 {
            return Err(Error::config("ddim_stride must be positive"));
        }
        Ok(())
    }

    fn key(&self, rng: &mut RandomSource) -> u64 {
        match self.seed_policy {
            SeedPolicy::Fixed => self.seed,
            SeedPolicy::FreshPerCall => rng.below(usize::MAX) as u64,
        }
    }
}

fn purify_one(
    cfg: &PurifyConfig,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    img: &Tensor,
    rng: &mut RandomSource,
) -> Result<Tensor> {
    let x0 = to_diffusion_domain(img);
    let eps = rng.gaussian(x0.shape());
    let xt = forward_sample(sched, &x0, cfg.t_star, &eps)?;
    let out = sample_chain(
        sched,
        denoiser,
        &xt,
        cfg.t_star,
        0,
        cfg.sampler,
        cfg.ddim_stride,
        Some(rng),
        None,
    )?;
    Ok(from_diffusion_domain(&out))
}

/// Purifies a `[B, C, H, W]` batch, one random stream per image.
/// `t* = 0` is the identity.
pub fn purify(
    cfg: &PurifyConfig,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x: &Tensor,
    rng: &mut RandomSource,
) -> Result<Tensor> {
    cfg.validate(sched)?;
    check_compatible(sched, denoiser.schedule_fingerprint())?;
    if cfg.t_star == 0 {
        return Ok(x.clone());
    }
    let key = cfg.key(rng);
    let parts = par::try_map_range(x.batch_len(), |i| {
        let mut r = RandomSource::new(key, i as u64);
        purify_one(cfg, denoiser, sched, &x.batch_item(i)?, &mut r)
    })?;
    Tensor::concat_batch(&parts)
}

/// Labels of `classifier` on purified inputs.
pub fn protected_predict(
    classifier: &dyn Classifier,
    cfg: &PurifyConfig,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x: &Tensor,
    rng: &mut RandomSource,
) -> Result<Vec<usize>> {
    let clean = purify(cfg, denoiser, sched, x, rng)?;
    classifier.predict(&clean)
}

/// Differentiable DDIM purification of `x` (pixels) with noise `eps`.
/// The output is not clamped, so gradients pass everywhere.
pub fn purify_on(
    tape: &mut Tape,
    cfg: &PurifyConfig,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x: Var,
    eps: &Tensor,
) -> Result<Var> {
    cfg.validate(sched)?;
    if cfg.sampler != Sampler::Ddim {
        return Err(Error::config("differentiable purification needs the ddim sampler"));
    }
    let scaled = tape.mul_scalar(x, 2.0);
    let x0 = tape.add_scalar(scaled, -1.0);
    let xt = forward_sample_on(tape, sched, x0, cfg.t_star, eps)?;
    let out = ddim_chain_on(tape, sched, denoiser, xt, cfg.t_star, 0, cfg.ddim_stride)?;
    let shifted = tape.add_scalar(out, 1.0);
    Ok(tape.mul_scalar(shifted, 0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub t: usize,
    pub kl: f64,
}

/// Divergence between time-classifier features of noised clean and noised
/// adversarial images over a timestep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub points: Vec<KlPoint>,
    pub non_increasing: bool,
}

const VAR_FLOOR: f64 = 1e-6;

/// Per-dimension mean and variance of `[N, D]` rows.
fn diag_gaussian(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in f.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in f.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    (mean, var.into_iter().map(|v| v.max(VAR_FLOOR)).collect())
}

/// `KL(N(m1, v1) || N(m2, v2))` for diagonal Gaussians.
pub fn kl_diag_gaussian(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    m1.iter()
        .zip(v1)
        .zip(m2.iter().zip(v2))
        .map(|((a, va), (b, vb))| 0.5 * ((vb / va).ln() + (va + (a - b).powi(2)) / vb - 1.0))
        .sum()
}

/// Fits diagonal Gaussians to penultimate features of `x_t` for clean and
/// adversarial batches (same noise for both) at each `t` in `grid`.
pub fn kl_diagnostic(
    tc: &TimeClassifierParams,
    sched: &NoiseSchedule,
    clean: &Tensor,
    adv: &Tensor,
    grid: &[usize],
    seed: u64,
) -> Result<KlReport> {
    clean.expect_same_shape(adv, "kl_diagnostic")?;
    let (c0, a0) = (to_diffusion_domain(clean), to_diffusion_domain(adv));
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let eps = RandomSource::new(seed, t as u64).gaussian(c0.shape());
        let fc = tc.features(&forward_sample(sched, &c0, t, &eps)?, t)?;
        let fa = tc.features(&forward_sample(sched, &a0, t, &eps)?, t)?;
        let (mc, vc) = diag_gaussian(&fc);
        let (ma, va) = diag_gaussian(&fa);
        points.push(KlPoint {
            t,
            kl: kl_diag_gaussian(&mc, &vc, &ma, &va),
        });
    }
    let non_increasing = points.windows(2).all(|w| w[1].kl <= w[0].kl);
    Ok(KlReport {
        points,
        non_increasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleSpec;

    /// Predicts zero noise; DDIM then rescales towards the origin.
    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise_on(&self, tape: &mut Tape, x: Var, _ts: &[usize]) -> Result<Var> {
            Ok(tape.mul_scalar(x, 0.0))
        }
    }

    fn sched() -> NoiseSchedule {
        ScheduleSpec::default().build().unwrap()
    }

    fn images() -> Tensor {
        RandomSource::new(1, 0).gaussian(&[3, 1, 8, 8]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
    }

    #[test]
    fn defaults_follow_schedule_fractions() {
        let c = PurifyConfig::for_schedule(&sched(), 3407);
        assert_eq!((c.t_star, c.ddim_stride, c.sampler), (30, 3, Sampler::Ddim));
    }

    #[test]
    fn zero_t_star_is_identity_and_output_is_clamped() {
        let s = sched();
        let x = images();
        let mut cfg = PurifyConfig::for_schedule(&s, 1);
        cfg.t_star = 0;
        let mut rng = RandomSource::new(0, 0);
        assert_eq!(purify(&cfg, &Zero, &s, &x, &mut rng).unwrap(), x);
        cfg.t_star = 200;
        cfg.ddim_stride = 50;
        let out = purify(&cfg, &Zero, &s, &x, &mut rng).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        cfg.t_star = 201;
        assert!(purify(&cfg, &Zero, &s, &x, &mut rng).is_err());
    }

    #[test]
    fn fixed_policy_is_deterministic_and_fresh_policy_varies() {
        let s = sched();
        let x = images();
        let mut cfg = PurifyConfig::for_schedule(&s, 9);
        cfg.sampler = Sampler::Ddpm;
        let mut rng = RandomSource::new(0, 0);
        let a = purify(&cfg, &Zero, &s, &x, &mut rng).unwrap();
        let b = purify(&cfg, &Zero, &s, &x, &mut rng).unwrap();
        assert_eq!(a, b);
        cfg.seed_policy = SeedPolicy::FreshPerCall;
        let c = purify(&cfg, &Zero, &s, &x, &mut rng).unwrap();
        let d = purify(&cfg, &Zero, &s, &x, &mut rng).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn per_image_streams_do_not_depend_on_batch_neighbours() {
        let s = sched();
        let x = images();
        let cfg = PurifyConfig::for_schedule(&s, 4);
        let mut rng = RandomSource::new(0, 0);
        let all = purify(&cfg, &Zero, &s, &x, &mut rng).unwrap();
        let first = purify(&cfg, &Zero, &s, &x.batch_item(0).unwrap(), &mut rng).unwrap();
        assert_eq!(all.batch_item(0).unwrap(), first);
    }

    #[test]
    fn differentiable_path_matches_plain_path_before_clamping() {
        let s = sched();
        let x = images().batch_item(0).unwrap();
        let cfg = PurifyConfig::for_schedule(&s, 5);
        let eps = RandomSource::new(5, 0).gaussian(x.shape());
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = purify_on(&mut tape, &cfg, &Zero, &s, xv, &eps).unwrap();
        let plain = purify(&cfg, &Zero, &s, &x, &mut RandomSource::new(0, 0)).unwrap();
        let diff = tape.value(out).clamp(0.0, 1.0).max_abs_diff(&plain).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero_and_positive_otherwise() {
        let m = [0.0, 1.0];
        let v = [1.0, 2.0];
        assert_eq!(kl_diag_gaussian(&m, &v, &m, &v), 0.0);
        // KL(N(0,1) || N(1,1)) = 1/2.
        assert!((kl_diag_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}

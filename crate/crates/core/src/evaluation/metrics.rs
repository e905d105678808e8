//! Attack success rate and image-quality metrics on `[0, 1]` images.

use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numeric::{RandomSource, Tensor};
use crate::purification::{purify, PurifyConfig};

/// A purification front-end for a classifier.
#[derive(Clone, Copy)]
pub struct Purifier<'a> {
    pub cfg: &'a PurifyConfig,
    pub denoiser: &'a dyn NoisePredictor,
    pub sched: &'a NoiseSchedule,
}

impl Purifier<'_> {
    /// Purifies `x`. Under the fixed seed policy every call uses the same noise.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut rng = RandomSource::new(self.cfg.seed, u64::MAX);
        purify(self.cfg, self.denoiser, self.sched, x, &mut rng)
    }
}

/// Fraction of originally-correct images whose adversarial label is wrong.
pub fn asr_from_predictions(clean_pred: &[usize], adv_pred: &[usize], y: &[usize]) -> Result<f64> {
    if clean_pred.len() != y.len() || adv_pred.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "asr",
            lhs: vec![clean_pred.len(), adv_pred.len()],
            rhs: vec![y.len()],
        });
    }
    let mut correct = 0usize;
    let mut fooled = 0usize;
    for ((c, a), t) in clean_pred.iter().zip(adv_pred).zip(y) {
        if c == t {
            correct += 1;
            if a != t {
                fooled += 1;
            }
        }
    }
    if correct == 0 {
        return Err(Error::EmptyDenominator);
    }
    Ok(fooled as f64 / correct as f64)
}

/// ASR of `x_adv` against `victim`, optionally behind `purifier`. Clean
/// correctness is judged through the same pipeline.
pub fn attack_success_rate(
    victim: &dyn Classifier,
    purifier: Option<&Purifier<'_>>,
    clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
) -> Result<f64> {
    clean.expect_same_shape(x_adv, "attack_success_rate")?;
    let predict = |x: &Tensor| match purifier {
        Some(p) => victim.predict(&p.apply(x)?),
        None => victim.predict(x),
    };
    asr_from_predictions(&predict(clean)?, &predict(x_adv)?, y)
}

/// `10 log10(1 / MSE)` over all components; `+inf` when `a == b`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|j| k[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM over every `H x W` plane of a `[H, W]`, `[C, H, W]` or
/// `[B, C, H, W]` tensor, 11x11 Gaussian window, sigma 1.5, L = 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let s = a.shape();
    if s.len() < 2 || s.len() > 4 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "ssim expects [H, W], [C, H, W] or [B, C, H, W]".into(),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let k = gaussian_taps();
    let plane = h * w;
    let planes = a.len() / plane;
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * plane..(p + 1) * plane;
            ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w, &k)
        })
        .sum();
    Ok(total / planes as f64)
}

/// Per-image PSNR averaged over the batch; infinite if any pair is identical.
pub fn mean_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    per_image(a, b, psnr)
}

/// Per-image SSIM averaged over the batch.
pub fn mean_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    per_image(a, b, ssim)
}

fn per_image(a: &Tensor, b: &Tensor, f: fn(&Tensor, &Tensor) -> Result<f64>) -> Result<f64> {
    a.expect_same_shape(b, "batch metric")?;
    let n = a.batch_len();
    let mut total = 0.0;
    for i in 0..n {
        total += f(&a.batch_item(i)?, &b.batch_item(i)?)?;
    }
    Ok(total / n.max(1) as f64)
}

/// `||phi(a_i) - phi(b_i)|| / sqrt(D)` per image, `phi` the penultimate
/// activations of `classifier`.
pub fn feature_distances(classifier: &dyn Classifier, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    a.expect_same_shape(b, "feature_distance")?;
    let fa = classifier.features(a)?;
    let fb = classifier.features(b)?;
    let d = fa.item_len();
    Ok(fa
        .data()
        .chunks(d)
        .zip(fb.data().chunks(d))
        .map(|(x, y)| {
            let sq: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (sq / d as f64).sqrt()
        })
        .collect())
}

/// Batch mean of [`feature_distances`].
pub fn feature_distance(classifier: &dyn Classifier, a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = feature_distances(classifier, a, b)?;
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Iqa {
    pub psnr: f64,
    pub ssim: f64,
    pub featdist: f64,
}

impl Iqa {
    pub fn between(feature_net: &dyn Classifier, a: &Tensor, b: &Tensor) -> Result<Iqa> {
        let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        Ok(Iqa {
            psnr: mean_psnr(&a, &b)?,
            ssim: mean_ssim(&a, &b)?,
            featdist: feature_distance(feature_net, &a, &b)?,
        })
    }
}

/// Clean vs purified-adversarial, and the bracketed purified-clean vs
/// purified-adversarial comparison.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IqaPair {
    pub clean_vs_purified_adv: Iqa,
    pub purified_clean_vs_purified_adv: Iqa,
    /// Raw perturbation: clean vs unpurified adversarial.
    pub clean_vs_adv: Iqa,
}

pub fn iqa_pair_report(
    feature_net: &dyn Classifier,
    clean: &Tensor,
    x_adv: &Tensor,
    purified_adv: &Tensor,
    purified_clean: &Tensor,
) -> Result<IqaPair> {
    Ok(IqaPair {
        clean_vs_purified_adv: Iqa::between(feature_net, clean, purified_adv)?,
        purified_clean_vs_purified_adv: Iqa::between(feature_net, purified_clean, purified_adv)?,
        clean_vs_adv: Iqa::between(feature_net, clean, x_adv)?,
    })
}

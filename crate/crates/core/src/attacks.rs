//! PGD, ScorePGD, U-ScorePGD and purifier-in-the-loop PGD.
//!
//! All four share one sign-gradient engine. Each image keeps its own
//! perturbation `delta` (relative to the clean image, starting at zero) and
//! its own random stream, so batching never couples images.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{check_compatible, forward_sample_on, NoisePredictor, NoiseSchedule, TimeClassifier};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numeric::io::{load_tensor, save_tensor};
use crate::numeric::{RandomSource, Tape, Tensor, Var};
use crate::par;
use crate::purification::{purify_on, PurifyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn tag(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::config(format!("unknown norm {other:?}"))),
        }
    }
}

/// Toy-scale analog of a 16/255 budget.
pub const DEFAULT_GAMMA: f64 = 0.06;
/// Default `score_t` as a fraction of T.
pub const DEFAULT_SCORE_T_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Per-pixel budget; the l2 radius is `gamma * sqrt(N)`.
    pub gamma: f64,
    pub eta: f64,
    pub n: usize,
    pub score_t: usize,
    pub seed: u64,
    pub clamp_pixels: bool,
}

impl AttackConfig {
    /// `gamma = 0.06`, `eta = gamma / 8`, 10 iterations, `score_t = 0.1 T`.
    pub fn toy(sched: &NoiseSchedule, seed: u64) -> Self {
        AttackConfig {
            norm: Norm::Linf,
            gamma: DEFAULT_GAMMA,
            eta: DEFAULT_GAMMA / 8.0,
            n: 10,
            score_t: sched.fraction(DEFAULT_SCORE_T_FRACTION),
            seed,
            clamp_pixels: true,
        }
    }

    /// `eta = 0` is accepted as the degenerate no-op attack.
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.score_t > t_max {
            return Err(Error::TimestepOutOfRange {
                t: self.score_t,
                max: t_max,
                context: "attack score_t",
            });
        }
        Ok(())
    }

    /// Ball radius for an image with `dim` components.
    pub fn radius(&self, dim: usize) -> f64 {
        match self.norm {
            Norm::Linf => self.gamma,
            Norm::L2 => self.gamma * (dim as f64).sqrt(),
        }
    }
}

/// Projects `delta` onto the `norm` ball of radius `radius`: a per-component
/// clamp for linf, `delta * min(1, radius / ||delta||)` for l2.
pub fn project(delta: &Tensor, norm: Norm, radius: f64) -> Tensor {
    match norm {
        Norm::Linf => delta.clamp(-radius, radius),
        Norm::L2 => {
            let n = delta.norm_l2();
            if n <= radius {
                delta.clone()
            } else {
                delta.scale(radius / n)
            }
        }
    }
}

/// Distance between two images in the given norm.
pub fn distance(a: &Tensor, b: &Tensor, norm: Norm) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(match norm {
        Norm::Linf => d.max_abs(),
        Norm::L2 => d.norm_l2(),
    })
}

/// Per-batch row of the loss trace. Missing terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub l_s: Option<f64>,
    pub l_c: Option<f64>,
    pub l_t: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub delta: Tensor,
    /// Batch means of the losses evaluated at each iterate.
    pub trace: Vec<TraceRow>,
    pub wall_time: f64,
}

/// Which terms of `L_t = L_c - L_s` are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub task: bool,
    pub score: bool,
}

impl LossTerms {
    pub const TASK: LossTerms = LossTerms {
        task: true,
        score: false,
    };
    pub const SCORE: LossTerms = LossTerms {
        task: false,
        score: true,
    };
    pub const BOTH: LossTerms = LossTerms {
        task: true,
        score: true,
    };
}

/// Time classifier together with the schedule it runs under.
#[derive(Clone, Copy)]
pub struct ScoreModel<'a> {
    pub classifier: &'a dyn TimeClassifier,
    pub sched: &'a NoiseSchedule,
}

/// `sum_b log softmax(f_phi(sqrt(a_t) (2 x_b - 1) + s_t eps_b, t))[y_b]`,
/// differentiable in `x_adv` (pixels).
pub fn score_loss_on(
    tape: &mut Tape,
    sm: &ScoreModel<'_>,
    x_adv: Var,
    y: &[usize],
    t: usize,
    eps: &Tensor,
) -> Result<Var> {
    let scaled = tape.mul_scalar(x_adv, 2.0);
    let x0 = tape.add_scalar(scaled, -1.0);
    let xt = forward_sample_on(tape, sm.sched, x0, t, eps)?;
    let logits = sm.classifier.logits_on(tape, xt, &vec![t; y.len()])?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, y)?;
    Ok(tape.sum(picked))
}

/// `L_s` (batch mean) and its gradient w.r.t. `x_adv` for fixed noise.
pub fn score_loss_with_noise(
    sm: &ScoreModel<'_>,
    x_adv: &Tensor,
    y: &[usize],
    t: usize,
    eps: &Tensor,
) -> Result<(f64, Tensor)> {
    check_labels(y, sm.classifier.num_classes(), x_adv.batch_len())?;
    let mut tape = Tape::new();
    let x = tape.leaf(x_adv.clone());
    let total = score_loss_on(&mut tape, sm, x, y, t, eps)?;
    let mean = tape.mul_scalar(total, 1.0 / y.len() as f64);
    let value = tape.value(mean).item();
    let grads = tape.backward(mean)?;
    Ok((value, grads.get_or_zeros(x, x_adv)))
}

/// [`score_loss_with_noise`] with a fresh draw of `eps` from `rng`.
pub fn score_loss(
    sm: &ScoreModel<'_>,
    x_adv: &Tensor,
    y: &[usize],
    t: usize,
    rng: &mut RandomSource,
) -> Result<(f64, Tensor)> {
    let eps = rng.gaussian(x_adv.shape());
    score_loss_with_noise(sm, x_adv, y, t, &eps)
}

/// `sum_b -log softmax(f(x_b))[y_b]`.
pub fn cross_entropy_on(
    tape: &mut Tape,
    clf: &dyn Classifier,
    x: Var,
    y: &[usize],
) -> Result<Var> {
    let logits = clf.logits_on(tape, x)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, y)?;
    let s = tape.sum(picked);
    Ok(tape.neg(s))
}

fn check_labels(y: &[usize], k: usize, batch: usize) -> Result<()> {
    if y.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "attack labels",
            lhs: vec![y.len()],
            rhs: vec![batch],
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= k) {
        return Err(Error::IndexOutOfRange {
            op: "attack labels",
            index: bad,
            extent: k,
        });
    }
    Ok(())
}

/// Objective evaluated at one iterate of one image.
struct Step {
    l_s: Option<f64>,
    l_c: Option<f64>,
    grad: Tensor,
}

/// Per-image state across iterations.
struct Track {
    delta: Tensor,
    rng: RandomSource,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign-gradient ascent on `objective`, one image per unit of work.
fn run_engine<F>(x: &Tensor, cfg: &AttackConfig, t_max: usize, objective: F) -> Result<AttackOutcome>
where
    F: Fn(&Tensor, usize, &mut RandomSource) -> Result<Step> + Sync,
{
    cfg.validate(t_max)?;
    let start = Instant::now();
    let b = x.batch_len();
    let radius = cfg.radius(x.item_len());
    let clean: Vec<Tensor> = (0..b).map(|i| x.batch_item(i)).collect::<Result<_>>()?;
    let mut tracks: Vec<Track> = clean
        .iter()
        .enumerate()
        .map(|(i, xi)| Track {
            delta: Tensor::zeros(xi.shape()),
            rng: RandomSource::new(cfg.seed, i as u64),
        })
        .collect();
    let mut trace = Vec::with_capacity(cfg.n);
    for iter in 0..cfg.n {
        let t0 = Instant::now();
        let stepped = par::try_map_range(b, |i| {
            let mut rng = tracks[i].rng.clone();
            let x_adv = clean[i].add(&tracks[i].delta)?;
            let step = objective(&x_adv, i, &mut rng)?;
            let moved = tracks[i].delta.zip_map(&step.grad, |d, g| d + cfg.eta * sign(g))?;
            let mut delta = project(&moved, cfg.norm, radius);
            if cfg.clamp_pixels {
                let xa = clean[i].add(&delta)?.clamp(0.0, 1.0);
                delta = xa.sub(&clean[i])?;
            }
            let dist = match cfg.norm {
                Norm::Linf => delta.max_abs(),
                Norm::L2 => delta.norm_l2(),
            };
            if dist > radius + 1e-6 || !delta.all_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbation of image {i} left the budget ({dist} > {radius})"
                )));
            }
            Ok((Track { delta, rng }, step.l_s, step.l_c))
        })?;
        let mean = |vals: Vec<Option<f64>>| -> Option<f64> {
            let v: Option<Vec<f64>> = vals.into_iter().collect();
            v.map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
        };
        let l_s = mean(stepped.iter().map(|s| s.1).collect());
        let l_c = mean(stepped.iter().map(|s| s.2).collect());
        tracks = stepped.into_iter().map(|s| s.0).collect();
        let l_t = match (l_c, l_s) {
            (Some(c), Some(s)) => Some(c - s),
            _ => None,
        };
        trace.push(TraceRow {
            iter,
            l_s,
            l_c,
            l_t,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    let deltas: Vec<Tensor> = tracks.into_iter().map(|t| t.delta).collect();
    let delta = Tensor::concat_batch(&deltas)?;
    let x_adv = x.add(&delta)?;
    Ok(AttackOutcome {
        x_adv,
        delta,
        trace,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// U-ScorePGD with selectable loss terms; with both terms disabled this is
/// an error. `victim` is required for the task term and `score` for the
/// score term.
pub fn attack_with_terms(
    victim: Option<&dyn Classifier>,
    score: Option<&ScoreModel<'_>>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    terms: LossTerms,
) -> Result<AttackOutcome> {
    if !terms.task && !terms.score {
        return Err(Error::config("at least one loss term must be enabled"));
    }
    let victim = match (terms.task, victim) {
        (true, None) => return Err(Error::config("task loss needs a victim classifier")),
        (true, Some(v)) => {
            check_labels(y, v.num_classes(), x.batch_len())?;
            Some(v)
        }
        (false, _) => None,
    };
    let score = match (terms.score, score) {
        (true, None) => return Err(Error::config("score loss needs a time classifier")),
        (true, Some(s)) => {
            check_compatible(s.sched, s.classifier.schedule_fingerprint())?;
            check_labels(y, s.classifier.num_classes(), x.batch_len())?;
            Some(s)
        }
        (false, _) => None,
    };
    let t_max = score.map_or(usize::MAX, |s| s.sched.steps());
    run_engine(x, cfg, t_max, |x_adv, i, rng| {
        let yi = &y[i..=i];
        let mut tape = Tape::new();
        let xv = tape.leaf(x_adv.clone());
        let l_c = match victim {
            Some(v) => Some(cross_entropy_on(&mut tape, v, xv, yi)?),
            None => None,
        };
        let l_s = match score {
            Some(s) => {
                let eps = rng.gaussian(x_adv.shape());
                Some(score_loss_on(&mut tape, s, xv, yi, cfg.score_t, &eps)?)
            }
            None => None,
        };
        let objective = match (l_c, l_s) {
            (Some(c), Some(s)) => tape.sub(c, s)?,
            (Some(c), None) => c,
            (None, Some(s)) => tape.neg(s),
            (None, None) => unreachable!(),
        };
        let grads = tape.backward(objective)?;
        Ok(Step {
            l_s: l_s.map(|v| tape.value(v).item()),
            l_c: l_c.map(|v| tape.value(v).item()),
            grad: grads.get_or_zeros(xv, x_adv),
        })
    })
}

/// White-box PGD on the victim's cross-entropy.
pub fn pgd(victim: &dyn Classifier, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackOutcome> {
    attack_with_terms(Some(victim), None, x, y, cfg, LossTerms::TASK)
}

/// ScorePGD: minimizes `L_s` on freshly noised iterates. Never sees a victim.
pub fn score_pgd(
    tc: &dyn TimeClassifier,
    sched: &NoiseSchedule,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    let sm = ScoreModel {
        classifier: tc,
        sched,
    };
    attack_with_terms(None, Some(&sm), x, y, cfg, LossTerms::SCORE)
}

/// U-ScorePGD: ascends `L_t = L_c - L_s`.
pub fn u_score_pgd(
    victim: &dyn Classifier,
    tc: &dyn TimeClassifier,
    sched: &NoiseSchedule,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    let sm = ScoreModel {
        classifier: tc,
        sched,
    };
    attack_with_terms(Some(victim), Some(&sm), x, y, cfg, LossTerms::BOTH)
}

/// PGD through `purify -> classify`, back-propagating through the whole
/// DDIM chain with fresh forward noise at every iteration.
pub fn purifier_in_loop_pgd(
    victim: &dyn Classifier,
    purify_cfg: &PurifyConfig,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    check_labels(y, victim.num_classes(), x.batch_len())?;
    check_compatible(sched, denoiser.schedule_fingerprint())?;
    purify_cfg.validate(sched)?;
    run_engine(x, cfg, usize::MAX, |x_adv, i, rng| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x_adv.clone());
        let eps = rng.gaussian(x_adv.shape());
        let p = purify_on(&mut tape, purify_cfg, denoiser, sched, xv, &eps)?;
        let l_c = cross_entropy_on(&mut tape, victim, p, &y[i..=i])?;
        let grads = tape.backward(l_c)?;
        Ok(Step {
            l_s: None,
            l_c: Some(tape.value(l_c).item()),
            grad: grads.get_or_zeros(xv, x_adv),
        })
    })
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    attack: String,
    config: AttackConfig,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Writes `config.json`, `x_adv.stns`, `delta.stns` and `loss_trace.csv`.
pub fn save_outcome(dir: &Path, attack: &str, cfg: &AttackConfig, out: &AttackOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let saved = SavedConfig {
        attack: attack.to_string(),
        config: cfg.clone(),
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&saved)?)?;
    save_tensor(&dir.join("x_adv.stns"), &out.x_adv)?;
    save_tensor(&dir.join("delta.stns"), &out.delta)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("loss_trace.csv"))?);
    writeln!(f, "iter,L_s,L_c,L_t,wall_ms")?;
    for r in &out.trace {
        writeln!(
            f,
            "{},{},{},{},{:.3}",
            r.iter,
            fmt_opt(r.l_s),
            fmt_opt(r.l_c),
            fmt_opt(r.l_t),
            r.wall_ms
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Reads back `(attack tag, config, x_adv, delta)` from [`save_outcome`].
pub fn load_outcome(dir: &Path) -> Result<(String, AttackConfig, Tensor, Tensor)> {
    let cfg_path = dir.join("config.json");
    let text = std::fs::read_to_string(&cfg_path).map_err(|_| Error::MissingArtifact {
        name: "attack config".into(),
        path: cfg_path.clone(),
    })?;
    let saved: SavedConfig = serde_json::from_str(&text)?;
    let x_adv = load_tensor(&dir.join("x_adv.stns"))?;
    let delta = load_tensor(&dir.join("delta.stns"))?;
    Ok((saved.attack, saved.config, x_adv, delta))
}

#[cfg(test)]
mod tests;

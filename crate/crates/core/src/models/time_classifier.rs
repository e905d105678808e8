use serde::{Deserialize, Serialize};

use super::classifier::{cross_entropy_sum, down};
use super::params::{conv, dense, Bound, Init, ParamStore};
use super::train::{fit, TrainConfig, TrainReport};
use super::{check_input, check_timesteps, time_embedding_on, to_diffusion_domain};
use crate::data::LabeledBatch;
use crate::diffusion::{forward_sample, NoiseSchedule, ScheduleSpec, TimeClassifier};
use crate::error::{Error, Result};
use crate::numeric::{RandomSource, Tape, Tensor, Var};

/// Capacity knobs of the time-conditioned classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeClassifierHyper {
    pub width: usize,
    pub hidden: usize,
    pub emb_dim: usize,
}

impl Default for TimeClassifierHyper {
    fn default() -> Self {
        TimeClassifierHyper {
            width: 16,
            hidden: 64,
            emb_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeClassifierSpec {
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub hyper: TimeClassifierHyper,
    pub schedule: ScheduleSpec,
    pub fingerprint: u64,
}

/// `f_phi(x_t, t)` over diffusion-domain inputs (`[-1, 1]` before noising).
///
/// conv3x3(C->w) + proj(emb(t)), silu, conv3x3/2(w->2w) silu,
/// conv3x3/2(2w->2w) silu, fc(->hidden) silu, fc(->K).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeClassifierParams {
    pub spec: TimeClassifierSpec,
    pub params: ParamStore,
    pub train_config: Option<TrainConfig>,
}

impl TimeClassifierParams {
    pub fn init(
        num_classes: usize,
        input_shape: [usize; 3],
        hyper: TimeClassifierHyper,
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        let [c, h, w] = input_shape;
        if num_classes < 2 || hyper.width == 0 || hyper.hidden == 0 || hyper.emb_dim % 2 != 0 {
            return Err(Error::config(format!("unusable time-classifier hyperparameters {hyper:?}")));
        }
        let mut rng = RandomSource::new(seed, 1);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let wd = hyper.width;
        init.linear("temb.fc", hyper.emb_dim, hyper.emb_dim);
        init.linear("temb.proj", hyper.emb_dim, wd);
        init.conv("c1", wd, c, 3);
        init.conv("c2", 2 * wd, wd, 3);
        init.conv("c3", 2 * wd, 2 * wd, 3);
        init.linear("fc1", 2 * wd * down(down(h)) * down(down(w)), hyper.hidden);
        init.linear("fc2", hyper.hidden, num_classes);
        Ok(TimeClassifierParams {
            spec: TimeClassifierSpec {
                num_classes,
                input_shape,
                hyper,
                schedule: sched.spec().clone(),
                fingerprint: sched.fingerprint(),
            },
            params: init.store,
            train_config: None,
        })
    }

    /// Returns `(features, logits)`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound<'_>,
        x: Var,
        ts: &[usize],
    ) -> Result<(Var, Var)> {
        check_input(tape, x, self.spec.input_shape, "time_classifier_forward")?;
        check_timesteps(ts, self.spec.schedule.steps, tape.value(x).batch_len())?;
        let emb = time_embedding_on(tape, p, ts, self.spec.hyper.emb_dim)?;
        let h = conv(tape, p, "c1", x, 1, 1)?;
        let h = tape.add_channel(h, emb)?;
        let h = tape.silu(h);
        let h = conv(tape, p, "c2", h, 2, 1)?;
        let h = tape.silu(h);
        let h = conv(tape, p, "c3", h, 2, 1)?;
        let h = tape.silu(h);
        let h = tape.flatten(h)?;
        let h = dense(tape, p, "fc1", h)?;
        let feats = tape.silu(h);
        let logits = dense(tape, p, "fc2", feats)?;
        Ok((feats, logits))
    }

    /// Penultimate features at timestep `t` (diffusion-domain input).
    pub fn features(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let ts = vec![t; x.batch_len()];
        let (f, _) = self.forward(&mut tape, &p, xv, &ts)?;
        Ok(tape.value(f).clone())
    }

    /// Labels predicted at timestep `t` (no noise added here).
    pub fn predict(&self, x: &Tensor, t: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.logits_on(&mut tape, xv, &vec![t; x.batch_len()])?;
        tape.value(z).argmax_rows()
    }

    /// Trains on `x_t` with `t ~ Uniform{0..T}` and fresh noise per example.
    pub fn train(
        data: &LabeledBatch,
        sched: &NoiseSchedule,
        num_classes: usize,
        hyper: TimeClassifierHyper,
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let s = data.images.shape();
        let mut model =
            Self::init(num_classes, [s[1], s[2], s[3]], hyper, sched, cfg.seed)?;
        let mut store = std::mem::take(&mut model.params);
        let t_max = sched.steps();
        let report = fit(&mut store, data.len(), cfg, "time-classifier", |tape, p, idx, rng| {
            let x0 = to_diffusion_domain(&data.images.select_batch(idx)?);
            let ts: Vec<usize> = idx.iter().map(|_| rng.below(t_max + 1)).collect();
            let xt = noise_rows(sched, &x0, &ts, rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let x = tape.constant(xt);
            let (_, logits) = model.forward(tape, p, x, &ts)?;
            cross_entropy_sum(tape, logits, &labels)
        })?;
        model.params = store;
        model.train_config = Some(cfg.clone());
        Ok((model, report))
    }
}

/// Noises row `b` of `x0` to timestep `ts[b]`.
pub(crate) fn noise_rows(
    sched: &NoiseSchedule,
    x0: &Tensor,
    ts: &[usize],
    rng: &mut RandomSource,
) -> Result<Tensor> {
    let eps = rng.gaussian(x0.shape());
    noise_rows_with(sched, x0, ts, &eps)
}

pub(crate) fn noise_rows_with(
    sched: &NoiseSchedule,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let rows: Vec<Tensor> = ts
        .iter()
        .enumerate()
        .map(|(b, &t)| forward_sample(sched, &x0.batch_item(b)?, t, &eps.batch_item(b)?))
        .collect::<Result<_>>()?;
    Tensor::concat_batch(&rows)
}

impl TimeClassifier for TimeClassifierParams {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn schedule_fingerprint(&self) -> Option<u64> {
        Some(self.spec.fingerprint)
    }

    fn logits_on(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var> {
        let p = self.params.bind(tape, false);
        Ok(self.forward(tape, &p, x, ts)?.1)
    }
}

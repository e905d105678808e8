use serde::{Deserialize, Serialize};

use super::params::{conv, Bound, Init, ParamStore};
use super::time_classifier::noise_rows_with;
use super::train::{fit, TrainConfig, TrainReport};
use super::{check_input, check_timesteps, time_embedding_on, to_diffusion_domain};
use crate::data::LabeledBatch;
use crate::diffusion::{NoisePredictor, NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::numeric::{RandomSource, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserHyper {
    /// Channels of the first stage; deeper stages use twice this.
    pub base: usize,
    pub emb_dim: usize,
}

impl Default for DenoiserHyper {
    fn default() -> Self {
        DenoiserHyper {
            base: 16,
            emb_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub input_shape: [usize; 3],
    pub hyper: DenoiserHyper,
    pub schedule: ScheduleSpec,
    pub fingerprint: u64,
}

/// `eps_theta(x_t, t)`: a two-level U-net.
///
/// ```text
/// in:   conv(C->c) + proj(emb(t)), silu           h0  [c,  H,   W  ]
/// down: conv/2(c->2c) silu                        h1  [2c, H/2, W/2]
/// down: conv/2(2c->2c) silu, conv(2c->2c) silu    m   [2c, H/4, W/4]
/// up:   up2(m) ++ h1, conv(4c->2c) silu           u1  [2c, H/2, W/2]
/// up:   up2(u1) ++ h0, conv(3c->c) silu           u2  [c,  H,   W  ]
/// out:  conv(c->C)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub spec: DenoiserSpec,
    pub params: ParamStore,
    pub train_config: Option<TrainConfig>,
}

impl DenoiserParams {
    pub fn init(
        input_shape: [usize; 3],
        hyper: DenoiserHyper,
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        let [ch, h, w] = input_shape;
        if h % 4 != 0 || w % 4 != 0 || hyper.base == 0 || hyper.emb_dim % 2 != 0 {
            return Err(Error::config(format!(
                "denoiser needs H, W divisible by 4 and even emb_dim; got {input_shape:?}, {hyper:?}"
            )));
        }
        let mut rng = RandomSource::new(seed, 2);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let c = hyper.base;
        init.linear("temb.fc", hyper.emb_dim, hyper.emb_dim);
        init.linear("temb.proj", hyper.emb_dim, c);
        init.conv("in", c, ch, 3);
        init.conv("d1", 2 * c, c, 3);
        init.conv("d2", 2 * c, 2 * c, 3);
        init.conv("mid", 2 * c, 2 * c, 3);
        init.conv("u1", 2 * c, 4 * c, 3);
        init.conv("u2", c, 3 * c, 3);
        init.conv_scaled("out", ch, c, 3, 0.1);
        Ok(DenoiserParams {
            spec: DenoiserSpec {
                input_shape,
                hyper,
                schedule: sched.spec().clone(),
                fingerprint: sched.fingerprint(),
            },
            params: init.store,
            train_config: None,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &Bound<'_>, x: Var, ts: &[usize]) -> Result<Var> {
        check_input(tape, x, self.spec.input_shape, "denoiser_forward")?;
        check_timesteps(ts, self.spec.schedule.steps, tape.value(x).batch_len())?;
        let emb = time_embedding_on(tape, p, ts, self.spec.hyper.emb_dim)?;
        let h0 = conv(tape, p, "in", x, 1, 1)?;
        let h0 = tape.add_channel(h0, emb)?;
        let h0 = tape.silu(h0);
        let h1 = conv(tape, p, "d1", h0, 2, 1)?;
        let h1 = tape.silu(h1);
        let h2 = conv(tape, p, "d2", h1, 2, 1)?;
        let h2 = tape.silu(h2);
        let m = conv(tape, p, "mid", h2, 1, 1)?;
        let m = tape.silu(m);
        let u = tape.upsample2x(m)?;
        let u = tape.concat_channels(u, h1)?;
        let u1 = conv(tape, p, "u1", u, 1, 1)?;
        let u1 = tape.silu(u1);
        let u = tape.upsample2x(u1)?;
        let u = tape.concat_channels(u, h0)?;
        let u2 = conv(tape, p, "u2", u, 1, 1)?;
        let u2 = tape.silu(u2);
        conv(tape, p, "out", u2, 1, 1)
    }

    /// Minimizes `E ||eps_theta(x_t, t) - eps||^2 / N` with
    /// `t ~ Uniform{1..T}`.
    pub fn train(
        data: &LabeledBatch,
        sched: &NoiseSchedule,
        hyper: DenoiserHyper,
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let s = data.images.shape();
        let mut model = Self::init([s[1], s[2], s[3]], hyper, sched, cfg.seed)?;
        let mut store = std::mem::take(&mut model.params);
        let t_max = sched.steps();
        let per_pixel = 1.0 / data.images.item_len() as f64;
        let report = fit(&mut store, data.len(), cfg, "denoiser", |tape, p, idx, rng| {
            let x0 = to_diffusion_domain(&data.images.select_batch(idx)?);
            let ts: Vec<usize> = idx.iter().map(|_| 1 + rng.below(t_max)).collect();
            let eps = rng.gaussian(x0.shape());
            let xt = noise_rows_with(sched, &x0, &ts, &eps)?;
            let x = tape.constant(xt);
            let target = tape.constant(eps);
            let pred = model.forward(tape, p, x, &ts)?;
            let r = tape.sub(pred, target)?;
            let sq = tape.mul(r, r)?;
            let s = tape.sum(sq);
            Ok(tape.mul_scalar(s, per_pixel))
        })?;
        model.params = store;
        model.train_config = Some(cfg.clone());
        Ok((model, report))
    }
}

impl NoisePredictor for DenoiserParams {
    fn schedule_fingerprint(&self) -> Option<u64> {
        Some(self.spec.fingerprint)
    }

    fn predict_noise_on(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.forward(tape, &p, x, ts)
    }
}

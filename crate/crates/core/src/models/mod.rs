//! Victim classifiers, the time-conditioned classifier, the noise-prediction
//! U-net, their training loop and checkpoints.

pub mod checkpoint;
pub mod classifier;
pub mod denoiser;
pub mod params;
pub mod time_classifier;
pub mod train;

pub use checkpoint::{load_for_schedule, load_params, peek_header, save_params, Checkpoint, ModelSpec};
pub use classifier::{Architecture, ClassifierParams, ClassifierSpec, FEATURE_DIM};
pub use denoiser::{DenoiserHyper, DenoiserParams, DenoiserSpec};
pub use params::{timestep_embedding, Bound, ParamStore};
pub use time_classifier::{TimeClassifierHyper, TimeClassifierParams, TimeClassifierSpec};
pub use train::{Optimizer, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Image classifier over `[0, 1]` pixels.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    /// Penultimate-layer activations.
    fn features_on(&self, _tape: &mut Tape, _x: Var) -> Result<Var> {
        Err(Error::config("classifier exposes no feature layer"))
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.logits_on(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.features_on(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }
}

/// Fraction of rows whose predicted label equals `labels`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// `[0, 1]` pixels to the `[-1, 1]` diffusion domain.
pub fn to_diffusion_domain(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`to_diffusion_domain`], clamped to `[0, 1]`.
pub fn from_diffusion_domain(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub(crate) fn check_input(tape: &Tape, x: Var, shape: [usize; 3], op: &'static str) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1..] != shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn check_timesteps(ts: &[usize], t_max: usize, batch: usize) -> Result<()> {
    if ts.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "timesteps",
            lhs: vec![ts.len()],
            rhs: vec![batch],
        });
    }
    if let Some(&t) = ts.iter().find(|&&t| t > t_max) {
        return Err(Error::TimestepOutOfRange {
            t,
            max: t_max,
            context: "model forward",
        });
    }
    Ok(())
}

/// `proj(silu(fc(sinusoid(t))))`, one row per timestep.
pub(crate) fn time_embedding_on(
    tape: &mut Tape,
    p: &Bound<'_>,
    ts: &[usize],
    dim: usize,
) -> Result<Var> {
    let e = tape.constant(timestep_embedding(ts, dim));
    let h = params::dense(tape, p, "temb.fc", e)?;
    let h = tape.silu(h);
    params::dense(tape, p, "temb.proj", h)
}

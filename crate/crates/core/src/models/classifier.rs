use serde::{Deserialize, Serialize};

use super::params::{conv, dense, Bound, Init, ParamStore};
use super::train::{fit, TrainConfig, TrainReport};
use super::{check_input, Classifier};
use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::numeric::{RandomSource, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    ConvSmall,
    Mlp,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::ConvSmall => "conv-small",
            Architecture::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-small" => Ok(Architecture::ConvSmall),
            "mlp" => Ok(Architecture::Mlp),
            other => Err(Error::config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
}

/// Width of the penultimate (feature) layer of both architectures.
pub const FEATURE_DIM: usize = 64;

/// Spatial extent after a 3x3, stride-2, pad-1 convolution.
pub(crate) fn down(h: usize) -> usize {
    (h - 1) / 2 + 1
}

/// Victim classifier over `[0, 1]` images.
///
/// `conv-small`: conv3x3(C->8) relu, conv3x3/2(8->16) relu, conv3x3/2(16->32)
/// relu, fc(->64) relu, fc(->K). `mlp`: fc(CHW->128) relu, fc(->64) relu,
/// fc(->K).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub spec: ClassifierSpec,
    pub params: ParamStore,
    pub train_config: Option<TrainConfig>,
}

impl ClassifierParams {
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        let [c, h, w] = spec.input_shape;
        if spec.num_classes < 2 || h < 4 || w < 4 {
            return Err(Error::config(format!("unusable classifier spec {spec:?}")));
        }
        let mut rng = RandomSource::new(seed, 0);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        match spec.architecture {
            Architecture::ConvSmall => {
                init.conv("c1", 8, c, 3);
                init.conv("c2", 16, 8, 3);
                init.conv("c3", 32, 16, 3);
                init.linear("fc1", 32 * down(down(h)) * down(down(w)), FEATURE_DIM);
                init.linear("fc2", FEATURE_DIM, spec.num_classes);
            }
            Architecture::Mlp => {
                init.linear("fc1", c * h * w, 128);
                init.linear("fc2", 128, FEATURE_DIM);
                init.linear("fc3", FEATURE_DIM, spec.num_classes);
            }
        }
        Ok(ClassifierParams {
            spec,
            params: init.store,
            train_config: None,
        })
    }

    /// Returns `(features, logits)`.
    pub(crate) fn forward(&self, tape: &mut Tape, p: &Bound<'_>, x: Var) -> Result<(Var, Var)> {
        check_input(tape, x, self.spec.input_shape, "classifier_forward")?;
        let feats = match self.spec.architecture {
            Architecture::ConvSmall => {
                let h = conv(tape, p, "c1", x, 1, 1)?;
                let h = tape.relu(h);
                let h = conv(tape, p, "c2", h, 2, 1)?;
                let h = tape.relu(h);
                let h = conv(tape, p, "c3", h, 2, 1)?;
                let h = tape.relu(h);
                let h = tape.flatten(h)?;
                let h = dense(tape, p, "fc1", h)?;
                tape.relu(h)
            }
            Architecture::Mlp => {
                let h = tape.flatten(x)?;
                let h = dense(tape, p, "fc1", h)?;
                let h = tape.relu(h);
                let h = dense(tape, p, "fc2", h)?;
                tape.relu(h)
            }
        };
        let last = match self.spec.architecture {
            Architecture::ConvSmall => "fc2",
            Architecture::Mlp => "fc3",
        };
        let logits = dense(tape, p, last, feats)?;
        Ok((feats, logits))
    }

    pub fn train(
        data: &LabeledBatch,
        architecture: Architecture,
        num_classes: usize,
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let s = data.images.shape();
        let spec = ClassifierSpec {
            architecture,
            num_classes,
            input_shape: [s[1], s[2], s[3]],
        };
        let mut model = Self::init(spec, cfg.seed)?;
        let mut store = std::mem::take(&mut model.params);
        let report = fit(
            &mut store,
            data.len(),
            cfg,
            architecture.tag(),
            |tape, p, idx, _rng| {
                let x = tape.constant(data.images.select_batch(idx)?);
                let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let (_, logits) = model.forward(tape, p, x)?;
                cross_entropy_sum(tape, logits, &labels)
            },
        )?;
        model.params = store;
        model.train_config = Some(cfg.clone());
        Ok((model, report))
    }
}

/// `sum_b -log softmax(logits_b)[y_b]`.
pub(crate) fn cross_entropy_sum(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.neg(s))
}

impl Classifier for ClassifierParams {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        Ok(self.forward(tape, &p, x)?.1)
    }

    fn features_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        Ok(self.forward(tape, &p, x)?.0)
    }
}

//! Checkpoint file: u64-length-prefixed JSON header (model kind, spec with
//! architecture and schedule fingerprint, training config, tensor names and
//! shapes) followed by one f64 tensor block per named parameter.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierParams, ClassifierSpec};
use super::denoiser::{DenoiserParams, DenoiserSpec};
use super::params::ParamStore;
use super::time_classifier::{TimeClassifierParams, TimeClassifierSpec};
use super::train::TrainConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numeric::io::{read_json_header, read_tensor_as, write_json_header, write_tensor};
use crate::numeric::DType;

const FORMAT: &str = "scorelab-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Classifier(ClassifierSpec),
    TimeClassifier(TimeClassifierSpec),
    Denoiser(DenoiserSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Classifier(_) => "classifier",
            ModelSpec::TimeClassifier(_) => "time-classifier",
            ModelSpec::Denoiser(_) => "denoiser",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    format: String,
    version: u32,
    pub model: ModelSpec,
    pub train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

/// A model that can be written to and restored from a checkpoint.
pub trait Checkpoint: Sized {
    const KIND: &'static str;

    fn model_spec(&self) -> ModelSpec;
    fn store(&self) -> &ParamStore;
    fn train_config(&self) -> Option<&TrainConfig>;
    /// Rebuilds the model from a header of the right kind, checking layout.
    fn from_parts(spec: ModelSpec, store: ParamStore, cfg: Option<TrainConfig>) -> Result<Self>;
}

fn schedule_for(spec: &crate::diffusion::ScheduleSpec, fingerprint: u64) -> Result<NoiseSchedule> {
    let sched = spec.build()?;
    sched.check_fingerprint(fingerprint)?;
    Ok(sched)
}

fn wrong_kind(expected: &str, spec: &ModelSpec) -> Error {
    Error::ArchitectureMismatch {
        expected: expected.to_string(),
        found: spec.kind().to_string(),
    }
}

impl Checkpoint for ClassifierParams {
    const KIND: &'static str = "classifier";

    fn model_spec(&self) -> ModelSpec {
        ModelSpec::Classifier(self.spec.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    fn from_parts(spec: ModelSpec, store: ParamStore, cfg: Option<TrainConfig>) -> Result<Self> {
        let ModelSpec::Classifier(spec) = spec else {
            return Err(wrong_kind(Self::KIND, &spec));
        };
        let mut m = ClassifierParams::init(spec, 0)?;
        store.check_layout(&m.params)?;
        m.params = store;
        m.train_config = cfg;
        Ok(m)
    }
}

impl Checkpoint for TimeClassifierParams {
    const KIND: &'static str = "time-classifier";

    fn model_spec(&self) -> ModelSpec {
        ModelSpec::TimeClassifier(self.spec.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    fn from_parts(spec: ModelSpec, store: ParamStore, cfg: Option<TrainConfig>) -> Result<Self> {
        let ModelSpec::TimeClassifier(spec) = spec else {
            return Err(wrong_kind(Self::KIND, &spec));
        };
        let sched = schedule_for(&spec.schedule, spec.fingerprint)?;
        let mut m = TimeClassifierParams::init(
            spec.num_classes,
            spec.input_shape,
            spec.hyper.clone(),
            &sched,
            0,
        )?;
        store.check_layout(&m.params)?;
        m.params = store;
        m.train_config = cfg;
        Ok(m)
    }
}

impl Checkpoint for DenoiserParams {
    const KIND: &'static str = "denoiser";

    fn model_spec(&self) -> ModelSpec {
        ModelSpec::Denoiser(self.spec.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    fn from_parts(spec: ModelSpec, store: ParamStore, cfg: Option<TrainConfig>) -> Result<Self> {
        let ModelSpec::Denoiser(spec) = spec else {
            return Err(wrong_kind(Self::KIND, &spec));
        };
        let sched = schedule_for(&spec.schedule, spec.fingerprint)?;
        let mut m = DenoiserParams::init(spec.input_shape, spec.hyper.clone(), &sched, 0)?;
        store.check_layout(&m.params)?;
        m.params = store;
        m.train_config = cfg;
        Ok(m)
    }
}

pub fn save_params<M: Checkpoint>(model: &M, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        model: model.model_spec(),
        train_config: model.train_config().cloned(),
        tensors: model
            .store()
            .entries()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_json_header(&mut f, &header)?;
    for (_, t) in model.store().entries() {
        write_tensor(&mut f, t, DType::F64)?;
    }
    f.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            name: "checkpoint".into(),
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    Ok(std::io::BufReader::new(f))
}

fn read_header<R: std::io::Read>(r: &mut R) -> Result<CheckpointHeader> {
    let header: CheckpointHeader = read_json_header(r)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "not a version-{VERSION} checkpoint: {} v{}",
            header.format, header.version
        )));
    }
    Ok(header)
}

/// Reads only the header.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    read_header(&mut open(path)?)
}

pub fn load_params<M: Checkpoint>(path: &Path) -> Result<M> {
    let mut r = open(path)?;
    let header = read_header(&mut r)?;
    if header.model.kind() != M::KIND {
        return Err(wrong_kind(M::KIND, &header.model));
    }
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let t = read_tensor_as(&mut r, DType::F64)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, header says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        store.push(&entry.name, t);
    }
    M::from_parts(header.model, store, header.train_config)
}

/// Loads a diffusion-side model and checks it was trained on `sched`.
pub fn load_for_schedule<M: Checkpoint>(path: &Path, sched: &NoiseSchedule) -> Result<M> {
    let m: M = load_params(path)?;
    let fp = match m.model_spec() {
        ModelSpec::TimeClassifier(s) => Some(s.fingerprint),
        ModelSpec::Denoiser(s) => Some(s.fingerprint),
        ModelSpec::Classifier(_) => None,
    };
    if let Some(fp) = fp {
        sched.check_fingerprint(fp)?;
    }
    Ok(m)
}

use crate::error::{Error, Result};
use crate::numeric::{RandomSource, Tape, Tensor, Var};

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParamStore { entries }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.entries.push((name.to_string(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Places every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Checks that names and shapes match a freshly initialized layout.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        if self.entries.len() != reference.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                reference.entries.len(),
                self.entries.len()
            )));
        }
        for ((n, t), (rn, rt)) in self.entries.iter().zip(&reference.entries) {
            if n != rn || t.shape() != rt.shape() {
                return Err(Error::Format(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters of a [`ParamStore`] placed on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Builder that draws He-normal weights and zero biases.
pub(crate) struct Init<'r> {
    pub store: ParamStore,
    pub rng: &'r mut RandomSource,
}

impl Init<'_> {
    pub fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = self.rng.gaussian(&[out_c, in_c, k, k]).scale(std);
        self.store.push(&format!("{name}.w"), w);
        self.store.push(&format!("{name}.b"), Tensor::zeros(&[out_c]));
    }

    pub fn conv_scaled(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, gain: f64) {
        self.conv(name, out_c, in_c, k);
        let n = self.store.len();
        let w = &mut self.store.entries[n - 2].1;
        *w = w.scale(gain);
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) {
        let std = (2.0 / inp as f64).sqrt();
        let w = self.rng.gaussian(&[inp, out]).scale(std);
        self.store.push(&format!("{name}.w"), w);
        self.store.push(&format!("{name}.b"), Tensor::zeros(&[out]));
    }
}

/// `conv2d(x, w) + b` with the bias stored as `<name>.b`.
pub(crate) fn conv(
    tape: &mut Tape,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.add_channel(y, b)
}

pub(crate) fn dense(tape: &mut Tape, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    tape.linear(x, w, b)
}

/// Sinusoidal timestep embedding `[sin(t f_i), cos(t f_i)]` with
/// `f_i = 10000^(-i / (dim/2))`, one row per timestep.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Tensor::from_raw(vec![ts.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = timestep_embedding(&[0, 1, 100], 32);
        assert_eq!(e.shape(), &[3, 32]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(e.data()[16], 1.0); // cos(0)
        assert_ne!(e.batch_item(1).unwrap(), e.batch_item(2).unwrap());
    }

    #[test]
    fn layout_check_catches_shape_changes() {
        let mut rng = RandomSource::new(0, 0);
        let mut a = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        a.linear("fc", 4, 3);
        let a = a.store;
        let mut b = a.clone();
        assert!(b.check_layout(&a).is_ok());
        b.entries[0].1 = Tensor::zeros(&[3, 4]);
        assert!(b.check_layout(&a).is_err());
    }
}

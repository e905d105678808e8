use super::{RandomSource, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked; all of them when the input is smaller.
    pub max_coords: usize,
    /// Seed for the coordinate sample.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: 50,
            seed: 0,
        }
    }
}

/// Max relative error between the tape gradient of a scalar function and
/// central finite differences, `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: GradCheck) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |input: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if !val.is_scalar() {
            return Err(Error::NonScalarRoot(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("grad_check evaluation gave {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(xv, x);
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let coords: Vec<usize> = if x.len() <= cfg.max_coords {
        (0..x.len()).collect()
    } else {
        let mut perm = RandomSource::new(cfg.seed, 0).permutation(x.len());
        perm.truncate(cfg.max_coords);
        perm
    };

    let mut worst: f64 = 0.0;
    for i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= cfg.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * cfg.step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        RandomSource::new(seed, 0).gaussian(shape)
    }

    #[test]
    fn sum_is_exact() {
        let err = grad_check(|t, x| Ok(t.sum(x)), &random(&[7, 3], 1), GradCheck::default()).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn matmul_both_arguments() {
        let b = random(&[4, 3], 2);
        let err = grad_check(
            |t, a| {
                let bv = t.constant(b.clone());
                let p = t.matmul(a, bv)?;
                Ok(t.sum(p))
            },
            &random(&[5, 4], 3),
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let a = random(&[5, 4], 4);
        let err = grad_check(
            |t, bv| {
                let av = t.constant(a.clone());
                let p = t.matmul(av, bv)?;
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            &b,
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_input_and_weight() {
        let w = random(&[3, 2, 3, 3], 5);
        let probe = random(&[2, 3, 3, 3], 6);
        let loss = |t: &mut Tape, y: Var| -> Result<Var> {
            let p = t.constant(probe.clone());
            let m = t.mul(y, p)?;
            Ok(t.sum(m))
        };
        let err = grad_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let y = t.conv2d(x, wv, 2, 1)?;
                loss(t, y)
            },
            &random(&[2, 2, 6, 5], 7),
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let x = random(&[2, 2, 6, 5], 8);
        let err = grad_check(
            |t, wv| {
                let xv = t.constant(x.clone());
                let y = t.conv2d(xv, wv, 2, 1)?;
                loss(t, y)
            },
            &w,
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gather_of_log_softmax() {
        let err = grad_check(
            |t, z| {
                let lp = t.log_softmax(z)?;
                let g = t.gather(lp, &[2, 0, 4])?;
                Ok(t.sum(g))
            },
            &random(&[3, 5], 9),
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn composed_graph() {
        // 50 sampled coordinates of a graph exercising every op kind.
        let w = random(&[4, 3, 3, 3], 10);
        let dense = random(&[4 * 4 * 4 * 2, 5], 11);
        let bias = random(&[5], 12);
        let chan = random(&[2, 4], 13);
        let err = grad_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let h = t.conv2d(x, wv, 2, 1)?;
                let cb = t.constant(chan.clone());
                let h = t.add_channel(h, cb)?;
                let h = t.silu(h);
                let skip = t.mul_scalar(h, 0.5);
                let skip = t.add_scalar(skip, 0.1);
                let up = t.upsample2x(h)?;
                let down_w = t.constant(Tensor::full(&[4, 4, 2, 2], 0.25));
                let down = t.conv2d(up, down_w, 2, 0)?;
                let cat = t.concat_channels(down, skip)?;
                let sq = t.mul(cat, cat)?;
                let r = t.relu(cat);
                let h = t.sub(sq, r)?;
                let flat = t.flatten(h)?;
                let dw = t.constant(dense.clone());
                let db = t.constant(bias.clone());
                let logits = t.linear(flat, dw, db)?;
                let sm = t.softmax(logits)?;
                let lp = t.log_softmax(logits)?;
                let picked = t.gather(lp, &[1, 3])?;
                let a = t.mean(picked);
                let b = t.sum(sm);
                let ab = t.add(a, b)?;
                Ok(t.neg(ab))
            },
            &random(&[2, 3, 8, 8], 14),
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let r = grad_check(
            |t, x| {
                let big = t.mul_scalar(x, 1e308);
                let big = t.mul_scalar(big, 1e308);
                Ok(t.sum(big))
            },
            &Tensor::ones(&[2]),
            GradCheck::default(),
        );
        assert!(r.is_err());
    }
}

use proptest::prelude::*;

use super::*;
use crate::diffusion::process::stubs::{LinearNoise, LinearTimeClassifier};
use crate::diffusion::ScheduleSpec;
use crate::numeric::{grad_check, GradCheck};

struct LinearClf {
    w: Tensor,
}

impl Classifier for LinearClf {
    fn num_classes(&self) -> usize {
        self.w.shape()[1]
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = tape.flatten(x)?;
        let w = tape.constant(self.w.clone());
        tape.matmul(f, w)
    }
}

const SIDE: usize = 6;
const DIM: usize = SIDE * SIDE;

fn sched() -> NoiseSchedule {
    ScheduleSpec::default().build().unwrap()
}

fn victim() -> LinearClf {
    LinearClf {
        w: RandomSource::new(1, 0).gaussian(&[DIM, 3]),
    }
}

fn time_clf() -> LinearTimeClassifier {
    let mut r = RandomSource::new(2, 0);
    LinearTimeClassifier {
        w: r.gaussian(&[DIM, 3]),
        u: r.gaussian(&[3]),
    }
}

fn batch() -> (Tensor, Vec<usize>) {
    let x = RandomSource::new(3, 0)
        .gaussian(&[4, 1, SIDE, SIDE])
        .map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0));
    (x, vec![0, 1, 2, 1])
}

fn cfg(norm: Norm) -> AttackConfig {
    AttackConfig {
        norm,
        gamma: 0.06,
        eta: 0.02,
        n: 6,
        score_t: 20,
        seed: 11,
        clamp_pixels: true,
    }
}

#[test]
fn projection_examples() {
    let inside = Tensor::new(vec![3], vec![0.01, -0.02, 0.0]).unwrap();
    assert_eq!(project(&inside, Norm::Linf, 0.05), inside);
    assert_eq!(project(&inside, Norm::L2, 0.05), inside);
    let big = Tensor::new(vec![2], vec![0.1, -0.03]).unwrap();
    assert_eq!(project(&big, Norm::Linf, 0.05).data(), &[0.05, -0.03]);
    let d = RandomSource::new(4, 0).gaussian(&[DIM]);
    let d = d.scale(3.0 * 0.2 / d.norm_l2());
    let p = project(&d, Norm::L2, 0.2);
    assert!((p.norm_l2() - 0.2).abs() < 1e-6);
    let cos = p.mul(&d).unwrap().sum() / (p.norm_l2() * d.norm_l2());
    assert!((cos - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn projection_lands_in_ball(seed in any::<u64>(), gamma in 0.001f64..1.0, scale in 0.0f64..5.0) {
        let d = RandomSource::new(seed, 0).gaussian(&[2, 8]).scale(scale);
        let li = project(&d, Norm::Linf, gamma);
        prop_assert!(li.max_abs() <= gamma);
        for (a, b) in li.data().iter().zip(d.data()) {
            prop_assert_eq!(*a, b.clamp(-gamma, gamma));
        }
        let l2 = project(&d, Norm::L2, gamma);
        prop_assert!(l2.norm_l2() <= gamma * (1.0 + 1e-12));
        if d.norm_l2() > 0.0 {
            let cos = l2.mul(&d).unwrap().sum() / (l2.norm_l2() * d.norm_l2());
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_step_is_identity() {
    let (x, y) = batch();
    let c = AttackConfig {
        n: 1,
        eta: 0.0,
        ..cfg(Norm::Linf)
    };
    let out = pgd(&victim(), &x, &y, &c).unwrap();
    assert_eq!(out.x_adv, x);
    assert_eq!(out.delta, Tensor::zeros(x.shape()));
}

#[test]
fn budget_and_pixel_range_hold_for_every_attack() {
    let (x, y) = batch();
    let s = sched();
    let (v, tc) = (victim(), time_clf());
    let pc = PurifyConfig::for_schedule(&s, 1);
    for norm in [Norm::Linf, Norm::L2] {
        let c = AttackConfig {
            eta: if norm == Norm::L2 { 0.05 } else { 0.02 },
            ..cfg(norm)
        };
        let outs = [
            pgd(&v, &x, &y, &c).unwrap(),
            score_pgd(&tc, &s, &x, &y, &c).unwrap(),
            u_score_pgd(&v, &tc, &s, &x, &y, &c).unwrap(),
            purifier_in_loop_pgd(&v, &pc, &LinearNoise(0.1), &s, &x, &y, &c).unwrap(),
        ];
        for out in &outs {
            assert!(out.x_adv.data().iter().all(|p| (0.0..=1.0).contains(p)));
            for i in 0..x.batch_len() {
                let d = distance(&out.x_adv.batch_item(i).unwrap(), &x.batch_item(i).unwrap(), norm)
                    .unwrap();
                assert!(d <= c.radius(DIM) + 1e-6);
            }
            assert_eq!(out.trace.len(), c.n);
        }
        assert!(outs[0].delta.max_abs() > 0.0);
    }
}

#[test]
fn degenerate_terms_reproduce_parent_attacks_bitwise() {
    let (x, y) = batch();
    let s = sched();
    let (v, tc) = (victim(), time_clf());
    let sm = ScoreModel {
        classifier: &tc,
        sched: &s,
    };
    let c = cfg(Norm::Linf);
    let task_only = attack_with_terms(Some(&v), Some(&sm), &x, &y, &c, LossTerms::TASK).unwrap();
    let plain = pgd(&v, &x, &y, &c).unwrap();
    assert_eq!(task_only.x_adv, plain.x_adv);
    let score_only = attack_with_terms(Some(&v), Some(&sm), &x, &y, &c, LossTerms::SCORE).unwrap();
    let sp = score_pgd(&tc, &s, &x, &y, &c).unwrap();
    assert_eq!(score_only.x_adv, sp.x_adv);
    let both = u_score_pgd(&v, &tc, &s, &x, &y, &c).unwrap();
    assert_ne!(both.x_adv, plain.x_adv);
    let tr = &both.trace[0];
    assert_eq!(tr.l_t.unwrap(), tr.l_c.unwrap() - tr.l_s.unwrap());
}

#[test]
fn attacks_are_deterministic() {
    let (x, y) = batch();
    let s = sched();
    let tc = time_clf();
    let c = cfg(Norm::Linf);
    let a = score_pgd(&tc, &s, &x, &y, &c).unwrap();
    let b = score_pgd(&tc, &s, &x, &y, &c).unwrap();
    assert_eq!(a.x_adv, b.x_adv);
    let la: Vec<_> = a.trace.iter().map(|r| r.l_s).collect();
    let lb: Vec<_> = b.trace.iter().map(|r| r.l_s).collect();
    assert_eq!(la, lb);
}

#[test]
fn positive_loss_scaling_leaves_iterates_unchanged() {
    let (x, _) = batch();
    let w = RandomSource::new(5, 0).gaussian(&[1, 1, SIDE, SIDE]);
    let c = cfg(Norm::Linf);
    let run = |k: f64| {
        run_engine(&x, &c, usize::MAX, |xa, _, _| {
            let mut tape = Tape::new();
            let xv = tape.leaf(xa.clone());
            let wv = tape.constant(w.clone());
            let prod = tape.mul(xv, wv)?;
            let sq = tape.mul(prod, prod)?;
            let l = tape.sum(sq);
            let l = tape.mul_scalar(l, k);
            let g = tape.backward(l)?;
            Ok(Step {
                l_s: None,
                l_c: Some(tape.value(l).item()),
                grad: g.get_or_zeros(xv, xa),
            })
        })
        .unwrap()
        .x_adv
    };
    assert_eq!(run(1.0), run(37.5));
}

#[test]
fn score_loss_at_zero_is_plain_log_probability() {
    let (x, y) = batch();
    let s = sched();
    let tc = time_clf();
    let sm = ScoreModel {
        classifier: &tc,
        sched: &s,
    };
    let eps = RandomSource::new(6, 0).gaussian(x.shape());
    let (l, _) = score_loss_with_noise(&sm, &x, &y, 0, &eps).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(to_domain(&x));
    let z = tc.logits_on(&mut tape, xv, &[0; 4]).unwrap();
    let lp = tape.log_softmax(z).unwrap();
    let want = tape.value(lp).data();
    let manual: f64 = y.iter().enumerate().map(|(b, &k)| want[b * 3 + k]).sum::<f64>() / 4.0;
    assert!((l - manual).abs() < 1e-12);
}

fn to_domain(x: &Tensor) -> Tensor {
    crate::models::to_diffusion_domain(x)
}

#[test]
fn score_loss_gradient_passes_grad_check() {
    let (x, y) = batch();
    let s = sched();
    let tc = time_clf();
    let sm = ScoreModel {
        classifier: &tc,
        sched: &s,
    };
    let eps = RandomSource::new(7, 0).gaussian(x.shape());
    let err = grad_check(
        |tape, xv| score_loss_on(tape, &sm, xv, &y, 20, &eps),
        &x,
        GradCheck::default(),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn purifier_chain_gradient_passes_grad_check() {
    let (x, y) = batch();
    let s = sched();
    let v = victim();
    let pc = PurifyConfig {
        t_star: 10,
        ddim_stride: 5,
        ..PurifyConfig::for_schedule(&s, 0)
    };
    let eps = RandomSource::new(8, 0).gaussian(x.shape());
    let err = grad_check(
        |tape, xv| {
            let p = purify_on(tape, &pc, &LinearNoise(0.2), &s, xv, &eps)?;
            cross_entropy_on(tape, &v, p, &y)
        },
        &x,
        GradCheck::default(),
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let (x, y) = batch();
    let s = sched();
    let tc = time_clf();
    let bad_t = AttackConfig {
        score_t: 201,
        ..cfg(Norm::Linf)
    };
    assert!(score_pgd(&tc, &s, &x, &y, &bad_t).is_err());
    assert!(pgd(&victim(), &x, &[0, 1, 3, 0], &cfg(Norm::Linf)).is_err());
    assert!(pgd(&victim(), &x, &[0, 1], &cfg(Norm::Linf)).is_err());
    let zero_gamma = AttackConfig {
        gamma: 0.0,
        ..cfg(Norm::Linf)
    };
    assert!(pgd(&victim(), &x, &y, &zero_gamma).is_err());
}

#[test]
fn outcome_directory_round_trips() {
    let (x, y) = batch();
    let c = cfg(Norm::Linf);
    let out = pgd(&victim(), &x, &y, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_outcome(dir.path(), "pgd", &c, &out).unwrap();
    let (tag, c2, xa, d) = load_outcome(dir.path()).unwrap();
    assert_eq!((tag.as_str(), &c2, &xa, &d), ("pgd", &c, &out.x_adv, &out.delta));
    let csv = std::fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,L_s,L_c,L_t,wall_ms"));
    assert!(lines.next().unwrap().starts_with("0,,"));
    assert_eq!(csv.lines().count(), c.n + 1);
}

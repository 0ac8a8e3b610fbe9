use lorasc::adapter::LoraPair;
use lorasc::numkit::{sample_normal, Matrix, RngState};
use lorasc::optim::{
    adamw_step, compressed_schedule, lr_at, reinit_optimizer, AdamW, AdamWConfig, LrPolicy, Schedule, ScheduleKind,
};
use proptest::prelude::*;

fn scalar(v: f64) -> Matrix<f64> {
    Matrix::from_vec(1, 1, vec![v]).unwrap()
}

/// Textbook AdamW on a single scalar.
struct Oracle {
    m: f64,
    v: f64,
    t: i32,
}

impl Oracle {
    fn step(&mut self, p: f64, g: f64, lr: f64, c: &AdamWConfig) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mh = self.m / (1.0 - c.beta1.powi(self.t));
        let vh = self.v / (1.0 - c.beta2.powi(self.t));
        p - lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p)
    }
}

#[test]
fn matches_textbook_update_over_several_steps() {
    let cfg = AdamWConfig {
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::<f64>::new(&[(1, 1)], &[1.0], cfg).unwrap();
    let mut oracle = Oracle { m: 0.0, v: 0.0, t: 0 };
    let mut p = scalar(0.8);
    let mut q = 0.8;
    for (i, g) in [0.3, -1.2, 0.05, 2.0, -0.7].into_iter().enumerate() {
        let lr = 1e-2 / (i + 1) as f64;
        adamw_step(&mut opt, &mut [&mut p], &[scalar(g)], lr).unwrap();
        q = oracle.step(q, g, lr, &cfg);
        assert!((p.get(0, 0) - q).abs() < 1e-15, "step {i}: {} vs {q}", p.get(0, 0));
    }
    assert_eq!(opt.step_count(), 5);
}

#[test]
fn first_step_and_zero_gradient() {
    let mut opt = AdamW::<f64>::new(&[(1, 1)], &[1.0], AdamWConfig::default()).unwrap();
    let mut p = scalar(1.0);
    adamw_step(&mut opt, &mut [&mut p], &[scalar(1.0)], 1e-3).unwrap();
    assert!((1.0 - p.get(0, 0) - 1e-3).abs() < 1e-9);

    let mut opt = AdamW::<f64>::new(&[(2, 2)], &[1.0], AdamWConfig::default()).unwrap();
    let mut p = Matrix::full(2, 2, 0.5);
    adamw_step(&mut opt, &mut [&mut p], &[Matrix::zeros(2, 2)], 1e-3).unwrap();
    assert_eq!(p, Matrix::full(2, 2, 0.5));
    assert!(opt.first_moments()[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn converges_on_a_quadratic() {
    let mut opt = AdamW::<f64>::new(&[(1, 1)], &[1.0], AdamWConfig::default()).unwrap();
    let mut p = scalar(1.0);
    for _ in 0..200 {
        let g = scalar(2.0 * p.get(0, 0));
        adamw_step(&mut opt, &mut [&mut p], &[g], 0.1).unwrap();
    }
    assert!(p.get(0, 0).abs() < 1e-2, "{}", p.get(0, 0));
}

#[test]
fn rejects_bad_input() {
    let mut opt = AdamW::<f32>::new(&[(1, 2)], &[1.0], AdamWConfig::default()).unwrap();
    let mut p = Matrix::zeros(1, 2);
    let g = Matrix::from_vec(1, 2, vec![1.0, f32::NAN]);
    assert!(g.is_err() || adamw_step(&mut opt, &mut [&mut p], &[g.unwrap()], 1e-3).is_err());
    assert!(adamw_step(&mut opt, &mut [&mut p], &[Matrix::zeros(2, 1)], 1e-3).is_err());
    assert!(AdamW::<f32>::new(&[], &[], AdamWConfig::default()).is_err());
}

#[test]
fn schedules() {
    let lin = Schedule::new(ScheduleKind::Linear, 1e-3, 0.0, 5).unwrap();
    assert_eq!(lr_at(&lin, 0).unwrap(), 1e-3);
    assert!((lr_at(&lin, 2).unwrap() - 5e-4).abs() < 1e-18);
    assert_eq!(lr_at(&lin, 4).unwrap(), 0.0);
    assert!(lr_at(&lin, 5).is_err());

    let cos = Schedule::new(ScheduleKind::Cosine, 3e-3, 1e-4, 50).unwrap();
    assert!((cos.lr_at(0).unwrap() - 3e-3).abs() < 1e-12);
    assert!((cos.lr_at(49).unwrap() - 1e-4).abs() < 1e-12);
    assert!(Schedule::new(ScheduleKind::Linear, 1e-3, 0.0, 0).is_err());
}

#[test]
fn compression_keeps_endpoints() {
    // 5 epochs of 250 iterations squeezed into one 250-step expert
    let base = Schedule::new(ScheduleKind::Linear, 1e-3, 0.0, 1250).unwrap();
    let c = compressed_schedule(&base, 250).unwrap();
    assert_eq!(c.total_steps, 250);
    assert_eq!(c.lr_at(0).unwrap(), 1e-3);
    assert_eq!(c.lr_at(249).unwrap(), 0.0);
    assert_eq!(compressed_schedule(&base, 1250).unwrap(), base);
    let one = compressed_schedule(&base, 1).unwrap();
    assert_eq!(one.lr_at(0).unwrap(), 1e-3);
}

fn pairs(seed: u64) -> Vec<LoraPair<f64>> {
    let mut rng = RngState::new(seed);
    (0..2)
        .map(|j| {
            let a = sample_normal(3, 5, 1.0, &mut rng);
            let b = sample_normal(4, 3, 1.0, &mut rng);
            LoraPair::from_parts(format!("t{j}"), a, b, 1.0).unwrap()
        })
        .collect()
}

#[test]
fn lora_plus_ratio_holds_at_every_step() {
    let policy = LrPolicy {
        b_multiplier: LrPolicy::LORA_PLUS_RATIO,
        ..LrPolicy::default()
    };
    let ps = pairs(1);
    let opt = reinit_optimizer(&ps, &policy, AdamWConfig::default()).unwrap();
    assert_eq!(opt.lr_multipliers(), &[1.0, 16.0, 1.0, 16.0]);
    let s = Schedule::new(ScheduleKind::Cosine, 1e-3, 1e-5, 40).unwrap();
    for t in 0..40 {
        let lr = s.lr_at(t).unwrap();
        assert_eq!(opt.effective_lr(1, lr), 16.0 * opt.effective_lr(0, lr));
        assert_eq!(opt.effective_lr(3, lr), 16.0 * opt.effective_lr(2, lr));
    }
    // with identical unit gradients, B moves 16× as far on the first step
    let mut opt = reinit_optimizer(&[ps[0].clone()], &policy, AdamWConfig::default()).unwrap();
    let (mut a, mut b) = (ps[0].a().clone(), ps[0].b().clone());
    let (a0, b0) = (a.get(0, 0), b.get(0, 0));
    opt.step(&mut [&mut a, &mut b], &[Matrix::full(3, 5, 1.0), Matrix::full(4, 3, 1.0)], 1e-4).unwrap();
    let ratio = (b0 - b.get(0, 0)) / (a0 - a.get(0, 0));
    assert!((ratio - 16.0).abs() < 1e-6, "{ratio}");
}

#[test]
fn reinit_forgets_previous_expert() {
    let ps = pairs(2);
    let policy = LrPolicy::default();
    let mut used = reinit_optimizer(&ps, &policy, AdamWConfig::default()).unwrap();
    let mut params: Vec<Matrix<f64>> = ps.iter().flat_map(|p| [p.a().clone(), p.b().clone()]).collect();
    let grads: Vec<Matrix<f64>> = params.iter().map(|m| m.scale(0.3).unwrap()).collect();
    let mut refs: Vec<&mut Matrix<f64>> = params.iter_mut().collect();
    used.step(&mut refs, &grads, 1e-3).unwrap();

    let fresh = reinit_optimizer(&ps, &policy, AdamWConfig::default()).unwrap();
    let again = reinit_optimizer(&ps, &policy, AdamWConfig::default()).unwrap();
    assert_eq!(fresh, again);
    assert_eq!(fresh.step_count(), 0);
    assert!(fresh.first_moments().iter().chain(fresh.second_moments()).all(|m| m.data().iter().all(|&v| v == 0.0)));

    let run = |mut opt: AdamW<f64>| {
        let mut p: Vec<Matrix<f64>> = ps.iter().flat_map(|p| [p.a().clone(), p.b().clone()]).collect();
        let mut r: Vec<&mut Matrix<f64>> = p.iter_mut().collect();
        opt.step(&mut r, &grads, 1e-3).unwrap();
        p
    };
    assert_eq!(run(fresh), run(again));
}

proptest! {
    #[test]
    fn linear_endpoints_for_any_expert_length(n in 2usize..500, start in 1e-5f64..1e-1, end in 0.0f64..1e-5) {
        let base = Schedule::new(ScheduleKind::Linear, start, end, 5 * n).unwrap();
        let c = compressed_schedule(&base, n).unwrap();
        prop_assert_eq!(c.lr_at(0).unwrap(), start);
        prop_assert_eq!(c.lr_at(n - 1).unwrap(), end);
        for t in 1..n {
            prop_assert!(c.lr_at(t).unwrap() <= c.lr_at(t - 1).unwrap());
        }
    }
}

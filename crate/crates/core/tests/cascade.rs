use lorasc::adapter::delta;
use lorasc::cascade::{
    apply_noise, merge_slow, run, run_cola, run_vanilla_lora, sample_noise, train_fast_expert, BatchStream,
    CascadeConfig, Ladder, Plan, RunData, RunState, Runner, Stage,
};
use lorasc::data::{gen_teacher_student, split, SplitSpec};
use lorasc::eval::{evaluate, rank_reports};
use lorasc::model::{Backbone, ModelConfig};
use lorasc::numkit::{Matrix, RngState};
use lorasc::optim::{reinit_optimizer, Schedule, ScheduleKind};
use lorasc::Error;
use proptest::prelude::*;

fn setup(seed: u64) -> (Backbone<f32>, RunData) {
    let model = ModelConfig { seed, ..ModelConfig::default() };
    let pool = gen_teacher_student(seed, 240, model.input_dim, model.output_dim, 4, 0.3).unwrap();
    let spec = SplitSpec { n_train: 160, n_val: 40, n_test: 40, seed };
    (Backbone::build(&model).unwrap(), RunData::from_splits(&split(&pool, &spec).unwrap()))
}

fn cfg(ladder: Ladder) -> CascadeConfig {
    CascadeConfig {
        ladder,
        epochs: 4,
        lr: 5e-3,
        lambda: 0.5,
        ..CascadeConfig::default()
    }
}

fn stages(trace: &[lorasc::cascade::StageEvent]) -> Vec<Stage> {
    let mut s: Vec<Stage> = trace.iter().map(|e| e.stage).collect();
    s.sort_by_key(|x| *x as u8);
    s.dedup();
    s
}

#[test]
fn plan_partitions_the_step_stream() {
    let c = CascadeConfig { epochs: 5, batch_size: 4, steps_per_expert: Some(300), ..CascadeConfig::default() };
    let p = Plan::new(&c, 1000).unwrap();
    assert_eq!((p.steps_per_epoch, p.total_steps, p.experts), (250, 1250, 5));
    assert_eq!((1..=p.experts).map(|t| p.expert_len(t)).sum::<usize>(), 1250);
    assert_eq!(p.expert_len(5), 50);
    let v = Plan::new(&CascadeConfig { ladder: Ladder::Vanilla, ..c }, 1000).unwrap();
    assert_eq!(v.experts, 1);
}

#[test]
fn batch_stream_visits_every_example_once_per_epoch() {
    let mut s = BatchStream::new(3, 10, 4);
    for epoch in 0..2 {
        let mut seen: Vec<usize> = (0..3).flat_map(|k| s.indices(epoch * 3 + k).to_vec()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
    let first = s.indices(0).to_vec();
    assert_ne!(first, s.indices(3).to_vec());
}

#[test]
fn telescoping_identity_for_every_level() {
    let (bb, data) = setup(1);
    for ladder in Ladder::ALL {
        let c = cfg(ladder);
        let mut r = Runner::new(&c, &bb, &data).unwrap();
        for e in 1..=c.epochs {
            r.run_epochs(e).unwrap();
            let worst = r.state().telescoping_residual().unwrap().values().copied().fold(0.0, f64::max);
            assert!(worst <= 1e-4, "{ladder:?} epoch {e}: {worst}");
        }
        assert!(r.state().ledger.audit.iter().all(|&a| a <= 1e-4));
    }
}

#[test]
fn cascade_trace_is_a_strict_subset_of_full() {
    let (bb, data) = setup(2);
    let full = run(&cfg(Ladder::Full), &bb, &data).unwrap();
    let casc = run(&cfg(Ladder::Cascade), &bb, &data).unwrap();
    let (f, c) = (stages(&full.state.trace), stages(&casc.state.trace));
    assert!(c.iter().all(|s| f.contains(s)));
    assert!(c.len() < f.len());
    assert!(!c.contains(&Stage::ApplyNoise) && !c.contains(&Stage::EmaUpdate));
    // per expert the full order is fixed
    let order: Vec<Stage> = full.state.trace.iter().filter(|e| e.expert == 2).map(|e| e.stage).collect();
    assert_eq!(
        order,
        [Stage::ReinitFast, Stage::ApplyNoise, Stage::ReinitOptimizer, Stage::TrainFast, Stage::EmaUpdate, Stage::Merge]
    );
}

#[test]
fn noise_is_kept_or_discarded_per_config() {
    let (bb, data) = setup(3);
    let kept = run(&cfg(Ladder::Full), &bb, &data).unwrap();
    assert!(kept.state.ledger.noise_sum.values().any(|m| m.max_abs() > 0.0));
    assert_eq!(kept.state.ledger.sigmas.len(), 4);
    assert!(kept.state.ledger.sigmas[0].iter().all(|&s| s == 0.0));
    assert!(kept.state.ledger.sigmas[1].iter().all(|&s| s > 0.0));

    let discard = run(&CascadeConfig { discard_noise: true, ..cfg(Ladder::Full) }, &bb, &data).unwrap();
    let st = &discard.state;
    assert!(st.ledger.noise_sum.values().all(|m| m.max_abs() == 0.0));
    for (name, sum) in &st.ledger.slow_sum {
        let moved = st.backbone.get(name).unwrap().to_f64().sub(&st.w0.get(name).unwrap().to_f64()).unwrap();
        assert!(moved.max_abs_diff(sum).unwrap() <= 1e-5, "{name}");
    }
}

#[test]
fn zero_lambda_never_moves_the_backbone_through_noise() {
    let (bb, data) = setup(4);
    let r = run(&CascadeConfig { lambda: 0.0, ..cfg(Ladder::Full) }, &bb, &data).unwrap();
    assert!(r.state.ledger.noise_sum.values().all(|m| m.max_abs() == 0.0));
}

#[test]
fn noise_sampler_bounds() {
    let n: Matrix<f32> = sample_noise(300, 300, 1.0, 2.0, &mut RngState::new(5)).unwrap();
    assert!(n.data().iter().all(|&v| (v as f64).abs() < 1.0));
    let z: Matrix<f32> = sample_noise(3, 3, 0.7, 0.0, &mut RngState::new(5)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(sample_noise::<f32>(1, 1, -0.1, 1.0, &mut RngState::new(5)).is_err());
}

#[test]
fn training_moves_only_fast_pairs_and_lowers_loss() {
    let (bb, data) = setup(6);
    let c = cfg(Ladder::Full);
    let mut st = RunState::new(&c, &bb).unwrap();
    apply_noise(&mut st, 0.5, false, &RngState::new(0)).unwrap();
    let mut stream = BatchStream::new(c.seed, data.train.len(), c.batch_size);
    let sched = Schedule::new(ScheduleKind::Linear, c.lr, 0.0, 200).unwrap();

    st.optimizer = Some(reinit_optimizer(&st.experts.fast, &c.lr_policy, c.adamw).unwrap());
    let before = st.clone();
    train_fast_expert(&mut st, &c, &data.train, &mut stream, &sched, 0).unwrap();
    assert_eq!(st.experts, before.experts);

    train_fast_expert(&mut st, &c, &data.train, &mut stream, &sched, 200).unwrap();
    assert_eq!(st.backbone, before.backbone);
    assert_eq!(st.experts.slow, before.experts.slow);
    assert_ne!(st.experts.fast, before.experts.fast);
    let losses: Vec<f64> = st.metrics.iter().map(|m| m.loss).collect();
    let head = losses[..40].iter().sum::<f64>() / 40.0;
    let tail = losses[160..].iter().sum::<f64>() / 40.0;
    assert!(tail < head, "{head} → {tail}");

    st.optimizer = None;
    let e = train_fast_expert(&mut st, &c, &data.train, &mut stream, &sched, 1).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
}

#[test]
fn zero_alpha_merges_the_fast_delta() {
    let (bb, data) = setup(7);
    let c = CascadeConfig { alpha: 0.0, lambda: 0.0, ..cfg(Ladder::Full) };
    let mut st = RunState::new(&c, &bb).unwrap();
    let mut stream = BatchStream::new(c.seed, data.train.len(), c.batch_size);
    let sched = Schedule::new(ScheduleKind::Linear, c.lr, 0.0, 40).unwrap();
    st.optimizer = Some(reinit_optimizer(&st.experts.fast, &c.lr_policy, c.adamw).unwrap());
    train_fast_expert(&mut st, &c, &data.train, &mut stream, &sched, 40).unwrap();
    let fast: Vec<Matrix<f32>> = st.experts.fast.iter().map(delta).collect();
    let w = st.backbone.clone();
    merge_slow(&mut st, &c).unwrap();
    for (p, d) in st.experts.fast.iter().zip(&fast) {
        let want = w.get(p.target()).unwrap().add(d).unwrap();
        assert!(st.backbone.get(p.target()).unwrap().bit_eq(&want));
    }
}

#[test]
fn zero_lr_leaves_the_model_alone() {
    let (bb, data) = setup(8);
    for ladder in Ladder::ALL {
        let r = run(&CascadeConfig { lr: 0.0, ..cfg(ladder) }, &bb, &data).unwrap();
        assert_eq!(r.backbone(), &bb, "{ladder:?}");
    }
}

#[test]
fn baselines_reduce_exactly() {
    let (bb, data) = setup(9);
    let red = CascadeConfig { alpha: 0.0, lambda: 0.0, ..cfg(Ladder::Full) };
    let one = run(&CascadeConfig { steps_per_expert: Some(4 * 40), ..red.clone() }, &bb, &data).unwrap();
    assert_eq!(one.backbone(), run_vanilla_lora(&red, &bb, &data).unwrap().backbone());
    assert_eq!(run(&red, &bb, &data).unwrap().backbone(), run_cola(&red, &bb, &data).unwrap().backbone());
}

#[test]
fn rank_grows_by_one_per_expert() {
    let (bb, data) = setup(10);
    let c = CascadeConfig { rank: 1, epochs: 3, ..cfg(Ladder::Full) };
    let r = run(&c, &bb, &data).unwrap();
    for rep in rank_reports(&r.state, 1e-6).unwrap() {
        assert_eq!(rep.effective_rank, 3, "{}", rep.target);
        let coarse = rank_reports(&r.state, 0.5).unwrap();
        assert!(coarse.iter().all(|c| c.effective_rank <= 3));
    }
}

#[test]
fn merged_and_adapter_evaluation_agree() {
    let (bb, data) = setup(11);
    let c = cfg(Ladder::Full);
    let mut r = Runner::new(&c, &bb, &data).unwrap();
    r.run_until(20).unwrap();
    let st = r.state();
    let unmerged = evaluate(&st.backbone, &st.experts.fast, &data.evals[0].1).unwrap().loss;
    let mut merged = st.backbone.clone();
    for p in &st.experts.fast {
        lorasc::adapter::merge_into(&mut merged, p).unwrap();
    }
    let m = evaluate(&merged, &[], &data.evals[0].1).unwrap().loss;
    assert!((unmerged - m).abs() <= 1e-5, "{unmerged} vs {m}");
    let before = st.backbone.clone();
    evaluate(&st.backbone, &st.experts.fast, &data.evals[0].1).unwrap();
    assert_eq!(before, st.backbone);
}

#[test]
fn replay_is_deterministic_and_resumable_mid_expert() {
    let (bb, data) = setup(12);
    let c = CascadeConfig { steps_per_expert: Some(30), ..cfg(Ladder::Full) };
    let a = run(&c, &bb, &data).unwrap();
    let b = run(&c, &bb, &data).unwrap();
    assert_eq!(a.state, b.state);

    let mut r = Runner::new(&c, &bb, &data).unwrap();
    r.run_until(47).unwrap();
    let paused = r.state().clone();
    assert!(paused.optimizer.is_some());
    let resumed = Runner::resume(&c, paused, &data).unwrap().finish().unwrap();
    assert_eq!(resumed.state, a.state);
}

#[test]
fn divergence_reports_the_step() {
    let (bb, data) = setup(13);
    let c = CascadeConfig { lr: 1e40, ..cfg(Ladder::Full) };
    let e = run(&c, &bb, &data).unwrap_err();
    assert!(matches!(e.root(), Error::Training { .. } | Error::Numeric(_)), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn metrics_rows() {
    let (bb, data) = setup(14);
    let full = run(&cfg(Ladder::Full), &bb, &data).unwrap();
    let train = full.metrics().iter().filter(|m| m.split == "train").count();
    assert_eq!(train, full.plan.total_steps);
    let evals: Vec<_> = full.metrics().iter().filter(|m| m.split == "val").collect();
    assert_eq!(evals.iter().map(|m| m.epoch).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert!(full.metrics().iter().filter(|m| m.split == "train" && m.expert > 1).all(|m| m.noise_sigma.len() == 2));

    let vanilla = run_vanilla_lora(&cfg(Ladder::Full), &bb, &data).unwrap();
    assert!(vanilla.metrics().iter().all(|m| m.noise_sigma.is_empty() && m.slow_norm == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_expert_frequency_keeps_the_identity(spe in 1usize..160, seed in 0u64..4) {
        let (bb, data) = setup(20 + seed);
        let c = CascadeConfig { steps_per_expert: Some(spe), epochs: 2, seed, ..cfg(Ladder::Full) };
        let r = run(&c, &bb, &data).unwrap();
        prop_assert_eq!(r.state.experts.epoch, 80usize.div_ceil(spe.min(80)));
        prop_assert!(r.state.ledger.audit.iter().all(|&a| a <= 1e-4));
    }
}

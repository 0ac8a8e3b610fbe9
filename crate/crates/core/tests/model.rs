use lorasc::adapter::{init_pairs, merge_into};
use lorasc::data::{sample_from_teacher, transfer_teachers, ModelInput};
use lorasc::eval::evaluate;
use lorasc::model::{forward, predict, pretrain_backbone, AdapterBinding, Backbone, ModelConfig, ModelMode, PretrainConfig};
use lorasc::numkit::{sample_normal, sample_uniform, Matrix, RngState, Tape};

fn transformer() -> ModelConfig {
    ModelConfig {
        mode: ModelMode::Transformer,
        depth: 2,
        width: 32,
        heads: 4,
        input_dim: 10,
        output_dim: 10,
        seed: 3,
    }
}

fn adapter_out(bb: &Backbone<f32>, pairs: &[lorasc::adapter::LoraPair<f32>], x: &ModelInput<f32>) -> Matrix<f32> {
    let mut tape = Tape::new();
    let bound = bb.bind(&mut tape, false);
    let binding: AdapterBinding<f32> = pairs.iter().map(|p| (p.target().to_string(), p.bind(&mut tape))).collect();
    let out = forward(&mut tape, bb.config(), &bound, &binding, x).unwrap();
    tape.value(out).clone()
}

#[test]
fn target_counts_and_determinism() {
    assert_eq!(transformer().default_targets().len(), 4);
    let mlp = ModelConfig { depth: 3, ..ModelConfig::default() };
    assert_eq!(mlp.default_targets().len(), 3);
    let a = Backbone::<f64>::build(&transformer()).unwrap();
    let b = Backbone::<f64>::build(&transformer()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_b_adapters_are_neutral_bit_exactly() {
    for cfg in [transformer(), ModelConfig::default()] {
        let bb = Backbone::<f32>::build(&cfg).unwrap();
        let pairs = init_pairs(&bb, &bb.default_targets(), 4, 1.0, &RngState::new(1)).unwrap();
        let x = match cfg.mode {
            ModelMode::Mlp => ModelInput::Features(sample_normal(6, cfg.input_dim, 1.0, &mut RngState::new(2))),
            ModelMode::Transformer => ModelInput::Tokens(vec![vec![1, 2, 3], vec![9, 0, 4]]),
        };
        assert!(adapter_out(&bb, &pairs, &x).bit_eq(&predict(&bb, &x).unwrap()));
    }
}

#[test]
fn merged_forward_matches_adapter_forward() {
    let cfg = transformer();
    let bb = Backbone::<f32>::build(&cfg).unwrap();
    let mut rng = RngState::new(5);
    let mut pairs = init_pairs(&bb, &bb.default_targets(), 4, 2.0, &RngState::new(6)).unwrap();
    for p in pairs.iter_mut() {
        let (d, _) = p.target_shape();
        let b = sample_uniform(d, 4, -0.2, 0.2, &mut rng).unwrap();
        *p = lorasc::adapter::LoraPair::from_parts(p.target(), p.a().clone(), b, 2.0).unwrap();
    }
    let x = ModelInput::Tokens(vec![vec![1, 2, 3, 4], vec![0, 0, 9, 9]]);
    let mut merged = bb.clone();
    for p in &pairs {
        merge_into(&mut merged, p).unwrap();
    }
    let diff = adapter_out(&bb, &pairs, &x).max_abs_diff(&predict(&merged, &x).unwrap()).unwrap();
    assert!(diff <= 1e-5, "{diff}");
}

#[test]
fn single_row_equals_batched_row() {
    let cfg = ModelConfig::default();
    let bb = Backbone::<f64>::build(&cfg).unwrap();
    let x: Matrix<f64> = sample_normal(4, cfg.input_dim, 1.0, &mut RngState::new(8));
    let all = predict(&bb, &ModelInput::Features(x.clone())).unwrap();
    let one = predict(&bb, &ModelInput::Features(x.select_rows(&[3]))).unwrap();
    assert_eq!(one.row(0), all.row(3));
}

#[test]
fn pretraining() {
    let cfg = ModelConfig::default();
    let teachers = transfer_teachers(0, cfg.input_dim, cfg.output_dim, 4, 2, 0.5).unwrap();
    let broad = sample_from_teacher(&teachers.broad, &mut RngState::new(1), 2000, 0.0, "broad").unwrap();
    let narrow = sample_from_teacher(&teachers.narrow, &mut RngState::new(2), 500, 0.0, "narrow").unwrap();
    let init = Backbone::<f32>::build(&cfg).unwrap();

    let (same, _) = pretrain_backbone(&init, &broad, &PretrainConfig { steps: 0, ..PretrainConfig::default() }).unwrap();
    assert_eq!(same, init);

    let (pre, report) = pretrain_backbone(&init, &broad, &PretrainConfig::default()).unwrap();
    assert_eq!(report.losses.len(), 2000);
    assert!(report.final_loss < report.initial_loss, "{report:?}");

    let zero_shot = evaluate(&pre, &[], &narrow).unwrap().loss;
    let random = evaluate(&init, &[], &narrow).unwrap().loss;
    assert!(zero_shot < random, "{zero_shot} vs {random}");
}

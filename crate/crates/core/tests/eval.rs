use lorasc::cascade::{run_vanilla_lora, CascadeConfig, Ladder, RunData};
use lorasc::data::{gen_teacher_student, split, BatchTarget, SplitSpec};
use lorasc::eval::{
    ablation_ladder, effective_rank, emit_report, final_eval_rows, load_report, mean_std, records_to_csv,
    score_outputs, MetricsRecord, ReportFormat, CSV_COLUMNS,
};
use lorasc::model::{Backbone, ModelConfig};
use lorasc::numkit::{sample_normal, Matrix, RngState};
use lorasc::Error;

fn m(rows: &[&[f64]]) -> Matrix<f64> {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn cross_entropy_by_hand() {
    let logits = m(&[&[2.0, 1.0, 0.1], &[0.5, 0.5, 3.0]]);
    let labels = vec![0, 1];
    let ce = |row: &[f64], l: usize| -> f64 {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[l].exp() / z).ln()
    };
    let want = (ce(&[2.0, 1.0, 0.1], 0) + ce(&[0.5, 0.5, 3.0], 1)) / 2.0;
    let s = score_outputs(&logits, &BatchTarget::Labels(labels)).unwrap();
    assert!((s.loss - want).abs() < 1e-10, "{} vs {want}", s.loss);
    assert_eq!(s.accuracy, Some(0.5));

    let flat = Matrix::<f64>::zeros(4, 7);
    let s = score_outputs(&flat, &BatchTarget::Labels(vec![0, 3, 6, 2])).unwrap();
    assert!((s.loss - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn regression_loss() {
    let y = m(&[&[1.0, -2.0], &[0.5, 0.0]]);
    let exact = score_outputs(&y, &BatchTarget::Values(y.clone())).unwrap();
    assert_eq!(exact.loss, 0.0);
    assert_eq!(exact.accuracy, None);
    let off = score_outputs(&m(&[&[2.0, -2.0], &[0.5, 3.0]]), &BatchTarget::Values(y)).unwrap();
    assert!((off.loss - (1.0 + 9.0) / 4.0).abs() < 1e-15);
    assert!(score_outputs(&Matrix::<f64>::zeros(0, 2), &BatchTarget::Values(Matrix::zeros(0, 2))).is_err());
}

#[test]
fn row_order_does_not_matter() {
    let mut rng = RngState::new(4);
    let out: Matrix<f32> = sample_normal(500, 6, 3.0, &mut rng);
    let y: Matrix<f32> = sample_normal(500, 6, 1.0, &mut rng);
    let perm: Vec<usize> = (0..500).map(|i| (i * 137) % 500).collect();
    let a = score_outputs(&out, &BatchTarget::Values(y.clone())).unwrap().loss;
    let b = score_outputs(&out.select_rows(&perm), &BatchTarget::Values(y.select_rows(&perm))).unwrap().loss;
    assert!((a - b).abs() <= 1e-7 * a.abs(), "{a} vs {b}");
}

#[test]
fn effective_rank_cases() {
    assert_eq!(effective_rank(&Matrix::<f64>::zeros(5, 5), 1e-6).unwrap(), 0);
    let eye = Matrix::<f64>::from_fn(4, 4, |i, j| f64::from(u8::from(i == j)));
    assert_eq!(effective_rank(&eye, 1e-6).unwrap(), 4);

    let u = Matrix::<f64>::from_fn(8, 1, |i, _| (i + 1) as f64);
    let v = Matrix::<f64>::from_fn(1, 8, |_, j| (j as f64 - 3.5).powi(2));
    let p = Matrix::<f64>::from_fn(8, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let q = Matrix::<f64>::from_fn(1, 8, |_, j| j as f64);
    let two = u.matmul(&v).unwrap().add(&p.matmul(&q).unwrap()).unwrap();
    assert_eq!(effective_rank(&two, 1e-6).unwrap(), 2);

    let graded = Matrix::<f64>::from_fn(6, 6, |i, j| if i == j { 10f64.powi(-(i as i32)) } else { 0.0 });
    let ranks: Vec<usize> = [1e-7, 1e-5, 1e-3, 1e-1, 0.5].iter().map(|&t| effective_rank(&graded, t).unwrap()).collect();
    assert!(ranks.windows(2).all(|w| w[1] <= w[0]), "{ranks:?}");
    assert_eq!((ranks[0], ranks[4]), (6, 1));
    assert!(effective_rank(&graded, 1.5).is_err());
}

fn record(i: usize, split: &str, sigma: Vec<f64>) -> MetricsRecord {
    MetricsRecord {
        run_id: "r".into(),
        epoch: i / 3,
        expert: i / 2,
        step: i,
        split: split.into(),
        loss: 0.1 * i as f64 + 1.0 / 3.0,
        accuracy: (split == "val").then_some(0.25),
        lr: 1e-3 / (i + 1) as f64,
        noise_sigma: sigma,
        slow_norm: i as f64 * 0.7,
        fast_norm: 1.0 / 7.0,
    }
}

#[test]
fn report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<MetricsRecord> = (0..6)
        .map(|i| record(i, if i % 2 == 0 { "train" } else { "val" }, if i > 2 { vec![0.01, 2e-5] } else { vec![] }))
        .collect();
    for format in [ReportFormat::Csv, ReportFormat::Jsonl] {
        let path = dir.path().join(format!("m.{}", format.extension()));
        emit_report(&records, format, &path).unwrap();
        assert_eq!(load_report(&path, format).unwrap(), records);
        let again = dir.path().join(format!("again.{}", format.extension()));
        emit_report(&records, format, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
    let csv = String::from_utf8(records_to_csv(&records).unwrap()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert!(matches!(
        emit_report(&[], ReportFormat::Csv, &dir.path().join("empty.csv")).unwrap_err(),
        Error::Argument(_)
    ));
}

fn setup(seed: u64) -> (Backbone<f32>, RunData) {
    let model = ModelConfig { seed, ..ModelConfig::default() };
    let pool = gen_teacher_student(seed, 200, model.input_dim, model.output_dim, 3, 0.3).unwrap();
    let spec = SplitSpec { n_train: 120, n_val: 40, n_test: 40, seed };
    (Backbone::build(&model).unwrap(), RunData::from_splits(&split(&pool, &spec).unwrap()))
}

#[test]
fn ladder_rows_and_summary() {
    let base = CascadeConfig { epochs: 2, lr: 5e-3, ..CascadeConfig::default() };
    let seeds = [3, 4];
    let report = ablation_ladder(&base, &seeds, |s| Ok(setup(s))).unwrap();

    for &seed in &seeds {
        for level in Ladder::ALL {
            let n = report.rows.iter().filter(|r| r.seed == seed && r.level == level).count();
            assert_eq!(n, 2, "{level:?} seed {seed}");
        }
    }

    // the vanilla row is exactly a standalone vanilla run
    let (bb, data) = setup(3);
    let cfg = CascadeConfig { ladder: Ladder::Vanilla, seed: 3, run_id: "vanilla-seed3".into(), ..base.clone() };
    let alone = run_vanilla_lora(&cfg, &bb, &data).unwrap();
    let want: Vec<f64> = final_eval_rows(alone.metrics()).iter().map(|m| m.loss).collect();
    let got: Vec<f64> =
        report.rows.iter().filter(|r| r.seed == 3 && r.level == Ladder::Vanilla).map(|r| r.loss).collect();
    assert_eq!(got, want);

    for s in &report.summary {
        let losses: Vec<f64> =
            report.rows.iter().filter(|r| r.level == s.level && r.split == s.split).map(|r| r.loss).collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let std = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (losses.len() - 1) as f64).sqrt();
        assert_eq!(s.seeds, 2);
        assert!((s.loss_mean - mean).abs() < 1e-15 && (s.loss_std - std).abs() < 1e-15);
        assert_eq!(s.row, s.level.row_label());
    }
    assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    assert!(ablation_ladder::<f32>(&base, &[], |s| Ok(setup(s))).is_err());
}

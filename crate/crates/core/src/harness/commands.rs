//! Command implementations behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use crate::cascade::{run_cola, Baseline, Ladder, RunData, RunReport, Runner};
use crate::data::{
    corrupt, gen_sequence_task, load_table, sample_from_teacher, split, transfer_teachers, CorruptionSpec, Dataset,
    SplitSpec, TableSchema,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_ladder, emit_ladder_report, emit_report, evaluate, rank_reports, write_atomic, LadderReport,
    MetricsRecord, RankReport,
};
use crate::model::{pretrain_backbone, Backbone, PretrainConfig, PretrainReport};
use crate::numkit::{DType, RngState, Scalar};

use super::checkpoint::{checkpoint_dtype, load_checkpoint, read_header, save_checkpoint, Header};
use super::config::{parse_config_str, RunConfig, TaskSource};

/// Fine-tuning data (pool split plus corrupted test copies) and the pretrained backbone for one seed.
pub fn prepare<T: Scalar>(cfg: &RunConfig, seed: u64) -> Result<(Backbone<T>, RunData, PretrainReport)> {
    let split_spec = SplitSpec { seed, ..cfg.split };
    let model = crate::model::ModelConfig { seed, ..cfg.model.clone() };
    let (pretrain_data, pool): (Option<Dataset>, Dataset) = match cfg.data.source {
        TaskSource::Teacher => {
            let d = &cfg.data;
            let teachers = transfer_teachers(seed, model.input_dim, model.output_dim, d.teacher_rank, d.shift_rank, d.shift_scale)?;
            let root = RngState::new(seed);
            let broad = sample_from_teacher(
                &teachers.broad,
                &mut root.derive("pretrain-examples", 0),
                d.pretrain_examples,
                0.0,
                "broad teacher",
            )?;
            let pool = sample_from_teacher(
                &teachers.narrow,
                &mut root.derive("finetune-examples", 0),
                split_spec.total(),
                d.label_noise,
                "narrow teacher",
            )?;
            (Some(broad), pool)
        }
        TaskSource::Sequence => {
            let d = &cfg.data;
            let vocab = model.input_dim;
            let broad = gen_sequence_task(seed ^ 0x5eed, d.pretrain_examples, d.seq_len, vocab, "first_token")?;
            let pool = gen_sequence_task(seed, split_spec.total(), d.seq_len, vocab, &d.sequence_kind)?;
            (Some(broad), pool)
        }
        TaskSource::Table => {
            let path = cfg.data.path.as_ref().ok_or_else(|| Error::config("data.path", "missing"))?;
            let schema = if cfg.data.classification {
                TableSchema::classification(model.input_dim, model.output_dim)
            } else {
                TableSchema::regression(model.input_dim, model.output_dim)
            };
            (None, load_table(path, cfg.data.format, &schema)?)
        }
    };
    let splits = split(&pool, &split_spec)?;
    let mut data = RunData::from_splits(&splits);
    for c in &cfg.corruptions {
        let spec = CorruptionSpec::parse(c, seed)?;
        data.evals.push((spec.split_name(), corrupt(&splits.test, &spec)?));
    }
    let init = Backbone::<T>::build(&model)?;
    let pre_cfg = PretrainConfig { seed, ..cfg.pretrain.clone() };
    let source = pretrain_data.as_ref().unwrap_or(&data.train);
    let (backbone, report) = pretrain_backbone(&init, source, &pre_cfg).map_err(|e| e.context("pretraining"))?;
    Ok((backbone, data, report))
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Pause after this many data epochs and write `epoch-<k>.ckpt`.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub finished: bool,
    pub final_val_loss: Option<f64>,
}

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed-{seed}"))
}

fn write_metrics(cfg: &RunConfig, dir: &Path, records: &[MetricsRecord]) -> Result<PathBuf> {
    let path = dir.join(format!("metrics.{}", cfg.report_format.extension()));
    if !records.is_empty() {
        emit_report(records, cfg.report_format, &path)?;
    }
    Ok(path)
}

fn train_seed<T: Scalar>(cfg: &RunConfig, seed: u64, opts: &TrainOptions, resume: Option<&Path>) -> Result<SeedOutcome> {
    let dir = seed_dir(cfg, seed);
    let _lock = RunLock::acquire(&dir)?;
    let snapshot = cfg.to_kv_string();
    write_atomic(&dir.join("config.txt"), snapshot.as_bytes())?;
    let result = (|| -> Result<SeedOutcome> {
        let (backbone, data, _) = prepare::<T>(cfg, seed)?;
        let cascade = cfg.cascade_for(seed);
        let report: RunReport<T>;
        let mut finished = true;
        let mut checkpoint = dir.join("final.ckpt");
        if cascade.baseline == Baseline::Cola {
            if resume.is_some() || opts.stop_after_epoch.is_some() {
                return Err(Error::config("cascade.baseline", "the cola baseline does not support stop/resume"));
            }
            report = run_cola(&cascade, &backbone, &data)?;
        } else {
            let mut runner = match resume {
                Some(p) => {
                    let ck = load_checkpoint::<T>(p)?;
                    if ck.state.w0 != backbone {
                        return Err(Error::Contract(format!(
                            "{} was not produced from this configuration's backbone",
                            p.display()
                        )));
                    }
                    Runner::resume(&cascade, ck.state, &data)?
                }
                None => Runner::new(&cascade, &backbone, &data)?,
            };
            match opts.stop_after_epoch {
                Some(k) if k < cascade.epochs => {
                    runner.run_epochs(k)?;
                    finished = false;
                    checkpoint = dir.join(format!("epoch-{k}.ckpt"));
                }
                _ => runner.run_epochs(cascade.epochs)?,
            }
            report = runner.into_report();
        }
        save_checkpoint(&report.state, &snapshot, seed, &checkpoint)?;
        let metrics = write_metrics(cfg, &dir, report.metrics())?;
        Ok(SeedOutcome {
            seed,
            dir: dir.clone(),
            metrics,
            checkpoint,
            finished,
            final_val_loss: report.final_loss("val"),
        })
    })();
    let failed = dir.join("FAILED");
    match &result {
        Ok(_) => {
            let _ = fs::remove_file(&failed);
        }
        Err(e) => {
            let _ = fs::write(&failed, format!("{e}\n"));
        }
    }
    result
}

fn dispatch_train<T: Scalar>(cfg: &RunConfig, opts: &TrainOptions) -> Result<Vec<SeedOutcome>> {
    match &opts.resume {
        Some(p) => {
            let seed = read_header(p)?.seed;
            Ok(vec![train_seed::<T>(cfg, seed, opts, Some(p))?])
        }
        None => cfg.seeds.iter().map(|&s| train_seed::<T>(cfg, s, opts, None)).collect(),
    }
}

/// Trains every configured seed into `<out>/seed-<seed>/`.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<Vec<SeedOutcome>> {
    match cfg.precision {
        DType::F32 => dispatch_train::<f32>(cfg, opts),
        DType::F64 => dispatch_train::<f64>(cfg, opts),
    }
}

/// Configuration recorded in a checkpoint, with `overrides` applied on top.
pub fn config_from_checkpoint(header: &Header, overrides: &[(String, String)]) -> Result<RunConfig> {
    parse_config_str(&header.config, overrides, None).map_err(|e| e.context("checkpoint configuration"))
}

#[derive(Debug, Clone)]
pub struct AblateOutcome {
    pub report: LadderReport,
    pub report_path: PathBuf,
    pub run_dirs: Vec<PathBuf>,
}

fn ablate_typed<T: Scalar>(cfg: &RunConfig) -> Result<AblateOutcome> {
    let root = cfg.out_dir.join("ablate");
    let _lock = RunLock::acquire(&root)?;
    let base = cfg.cascade_for(0);
    let report = ablation_ladder::<T>(&base, &cfg.seeds, |seed| {
        let (bb, data, _) = prepare::<T>(cfg, seed)?;
        Ok((bb, data))
    })?;
    let mut run_dirs = Vec::new();
    for run in &report.runs {
        let dir = root.join(format!("{}-seed{}", run.level.name(), run.seed));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_metrics(cfg, &dir, &run.metrics)?;
        run_dirs.push(dir);
    }
    let report_path = root.join(format!("ladder.{}", cfg.report_format.extension()));
    emit_ladder_report(&report, cfg.report_format, &report_path)?;
    write_atomic(&root.join("config.txt"), cfg.to_kv_string().as_bytes())?;
    Ok(AblateOutcome {
        report,
        report_path,
        run_dirs,
    })
}

/// Runs all four levels for every seed; one directory per run plus one consolidated report.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateOutcome> {
    match cfg.precision {
        DType::F32 => ablate_typed::<f32>(cfg),
        DType::F64 => ablate_typed::<f64>(cfg),
    }
}

fn evaluate_typed<T: Scalar>(checkpoint: &Path, out: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let cfg = config_from_checkpoint(&ck.header, &[])?;
    let (_, data, _) = prepare::<T>(&cfg, ck.header.seed)?;
    let st = &ck.state;
    let adapters = if st.optimizer.is_some() { st.experts.fast.clone() } else { Vec::new() };
    let mut records = Vec::new();
    for (split, ds) in &data.evals {
        let s = evaluate(&st.backbone, &adapters, ds).map_err(|e| e.context(format!("evaluating `{split}`")))?;
        records.push(MetricsRecord {
            run_id: cfg.cascade_for(ck.header.seed).run_id,
            epoch: st.global_step / data.train.len().div_ceil(cfg.cascade.batch_size),
            expert: st.experts.epoch,
            step: st.global_step,
            split: split.clone(),
            loss: s.loss,
            accuracy: s.accuracy,
            lr: st.last_lr,
            noise_sigma: Vec::new(),
            slow_norm: 0.0,
            fast_norm: 0.0,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        emit_report(&records, cfg.report_format, &dir.join(format!("eval.{}", cfg.report_format.extension())))?;
    }
    Ok(records)
}

/// Evaluates a checkpoint's current model on every eval split of its configuration.
pub fn cmd_evaluate(checkpoint: &Path, out: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    match checkpoint_dtype(&read_header(checkpoint)?)? {
        DType::F32 => evaluate_typed::<f32>(checkpoint, out),
        DType::F64 => evaluate_typed::<f64>(checkpoint, out),
    }
}

fn rank_typed<T: Scalar>(checkpoint: &Path, tau: f64) -> Result<Vec<RankReport>> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    if !ck.header.has_ledger {
        return Err(Error::Contract(format!(
            "{} has no merge ledger, so the cumulative delta cannot be separated from noise",
            checkpoint.display()
        )));
    }
    rank_reports(&ck.state, tau)
}

/// Effective rank of each target's cumulative merged delta, from the checkpoint's ledger.
pub fn cmd_rank(checkpoint: &Path, tau: f64) -> Result<Vec<RankReport>> {
    match checkpoint_dtype(&read_header(checkpoint)?)? {
        DType::F32 => rank_typed::<f32>(checkpoint, tau),
        DType::F64 => rank_typed::<f64>(checkpoint, tau),
    }
}

/// Header summary without the tensor payload or per-step metrics.
pub fn cmd_inspect(checkpoint: &Path) -> Result<serde_json::Value> {
    let h = read_header(checkpoint)?;
    let tensors: Vec<_> = h
        .tensors
        .iter()
        .map(|t| serde_json::json!({ "name": t.name, "dtype": t.dtype, "shape": t.shape }))
        .collect();
    Ok(serde_json::json!({
        "version": h.version,
        "config_digest": h.config_digest,
        "dtype": h.dtype,
        "seed": h.seed,
        "experts_merged": h.epoch,
        "global_step": h.global_step,
        "in_expert": h.optimizer.is_some(),
        "targets": h.targets,
        "audit_max": h.audit.iter().copied().fold(0.0, f64::max),
        "metrics_rows": h.metrics.len(),
        "tensors": tensors,
        "ladder": cfg_value(&h.config, "cascade.ladder"),
    }))
}

fn cfg_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

/// Parses a ladder name, as accepted by `--ladder`.
pub fn parse_ladder(s: &str) -> Result<Ladder> {
    s.parse()
}

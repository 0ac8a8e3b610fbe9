//! Flat `section.key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `LORASC_SEED` environment variable, command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cascade::{Baseline, CascadeConfig, Ladder};
use crate::data::{CorruptionSpec, SplitSpec, TableFormat};
use crate::error::{Error, Result};
use crate::eval::{ReportFormat, DEFAULT_TAU};
use crate::model::{ModelConfig, ModelMode, PretrainConfig};
use crate::numkit::DType;
use crate::optim::ScheduleKind;

pub const SEED_ENV: &str = "LORASC_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSource {
    /// Linear teacher-student transfer: pretrain on a broad teacher, fine-tune on a shifted one.
    Teacher,
    /// Token-sequence classification (transformer mode).
    Sequence,
    /// Rows loaded from a CSV or JSONL file.
    Table,
}

impl TaskSource {
    fn name(self) -> &'static str {
        match self {
            TaskSource::Teacher => "teacher",
            TaskSource::Sequence => "sequence",
            TaskSource::Table => "table",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: TaskSource,
    pub teacher_rank: usize,
    pub shift_rank: usize,
    pub shift_scale: f64,
    pub label_noise: f64,
    pub pretrain_examples: usize,
    pub seq_len: usize,
    pub sequence_kind: String,
    pub path: Option<PathBuf>,
    pub format: TableFormat,
    /// Table files only: `true` reads a `label` column instead of `y0..`.
    pub classification: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: TaskSource::Teacher,
            teacher_rank: 4,
            shift_rank: 2,
            shift_scale: 0.5,
            label_noise: 0.5,
            pretrain_examples: 2000,
            seq_len: 8,
            sequence_kind: "majority".into(),
            path: None,
            format: TableFormat::Csv,
            classification: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub precision: DType,
    pub report_format: ReportFormat,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub data: DataSpec,
    pub split: SplitSpec,
    pub cascade: CascadeConfig,
    pub corruptions: Vec<String>,
    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "lorasc".into(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            precision: DType::F32,
            report_format: ReportFormat::Csv,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataSpec::default(),
            split: SplitSpec::default(),
            cascade: CascadeConfig::default(),
            corruptions: Vec::new(),
            tau: DEFAULT_TAU,
        }
    }
}

fn bad_type(key: &str, value: &str, expected: &str) -> Error {
    Error::config(key, format!("expected {expected}, got `{value}`"))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad_type(key, v, "a non-negative integer"))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad_type(key, v, "a non-negative integer"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(bad_type(key, v, "a finite number")),
    }
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad_type(key, v, "a boolean")),
    }
}

fn p_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn is_none(v: &str) -> bool {
    matches!(v, "none" | "auto" | "default" | "")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let c = &mut self.cascade;
        match key {
            "run.id" => self.run_id = v.to_string(),
            "run.seed" => self.seeds = vec![p_u64(key, v)?],
            "run.seeds" => {
                self.seeds = p_list(v).iter().map(|s| p_u64(key, s)).collect::<Result<_>>()?;
            }
            "run.out" => self.out_dir = PathBuf::from(v),
            "run.precision" => {
                self.precision = DType::parse(v).ok_or_else(|| bad_type(key, v, "`f32` or `f64`"))?;
            }
            "run.report_format" => self.report_format = v.parse().map_err(|_| bad_type(key, v, "`csv` or `jsonl`"))?,

            "model.mode" => self.model.mode = v.parse::<ModelMode>()?,
            "model.depth" => self.model.depth = p_usize(key, v)?,
            "model.width" => self.model.width = p_usize(key, v)?,
            "model.heads" => self.model.heads = p_usize(key, v)?,
            "model.input_dim" => self.model.input_dim = p_usize(key, v)?,
            "model.output_dim" => self.model.output_dim = p_usize(key, v)?,

            "pretrain.steps" => self.pretrain.steps = p_usize(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = p_usize(key, v)?,
            "pretrain.lr" => self.pretrain.lr = p_f64(key, v)?,

            "data.task" => {
                self.data.source = match v {
                    "teacher" => TaskSource::Teacher,
                    "sequence" => TaskSource::Sequence,
                    "table" => TaskSource::Table,
                    _ => return Err(bad_type(key, v, "`teacher`, `sequence` or `table`")),
                }
            }
            "data.teacher_rank" => self.data.teacher_rank = p_usize(key, v)?,
            "data.shift_rank" => self.data.shift_rank = p_usize(key, v)?,
            "data.shift_scale" => self.data.shift_scale = p_f64(key, v)?,
            "data.label_noise" => self.data.label_noise = p_f64(key, v)?,
            "data.pretrain_examples" => self.data.pretrain_examples = p_usize(key, v)?,
            "data.seq_len" => self.data.seq_len = p_usize(key, v)?,
            "data.sequence_kind" => self.data.sequence_kind = v.to_string(),
            "data.path" => self.data.path = (!is_none(v)).then(|| PathBuf::from(v)),
            "data.format" => self.data.format = v.parse().map_err(|_| bad_type(key, v, "`csv` or `jsonl`"))?,
            "data.classification" => self.data.classification = p_bool(key, v)?,
            "data.batch_size" => c.batch_size = p_usize(key, v)?,

            "split.train" => self.split.n_train = p_usize(key, v)?,
            "split.val" => self.split.n_val = p_usize(key, v)?,
            "split.test" => self.split.n_test = p_usize(key, v)?,

            "cascade.alpha" => c.alpha = p_f64(key, v)?,
            "cascade.lambda" => c.lambda = p_f64(key, v)?,
            "cascade.epochs" => c.epochs = p_usize(key, v)?,
            "cascade.steps_per_expert" => {
                c.steps_per_expert = if is_none(v) { None } else { Some(p_usize(key, v)?) }
            }
            "cascade.ladder" => c.ladder = v.parse::<Ladder>()?,
            "cascade.baseline" => c.baseline = v.parse::<Baseline>()?,
            "cascade.discard_noise" => c.discard_noise = p_bool(key, v)?,

            "adapter.rank" => c.rank = p_usize(key, v)?,
            "adapter.lora_alpha" => c.lora_alpha = if is_none(v) { None } else { Some(p_f64(key, v)?) },
            "adapter.targets" => c.targets = if is_none(v) { None } else { Some(p_list(v)) },

            "optim.lr" => c.lr = p_f64(key, v)?,
            "optim.lr_end" => c.lr_end = p_f64(key, v)?,
            "optim.schedule" => c.schedule = v.parse::<ScheduleKind>()?,
            "optim.lr_plus_ratio" => c.lr_policy.b_multiplier = p_f64(key, v)?,
            "optim.cascade_lr_multiplier" => c.lr_policy.cascade_multiplier = p_f64(key, v)?,
            "optim.beta1" => c.adamw.beta1 = p_f64(key, v)?,
            "optim.beta2" => c.adamw.beta2 = p_f64(key, v)?,
            "optim.eps" => c.adamw.eps = p_f64(key, v)?,
            "optim.weight_decay" => c.adamw.weight_decay = p_f64(key, v)?,

            "eval.corruptions" => self.corruptions = p_list(v),
            "eval.tau" => self.tau = p_f64(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config("run.id", "must be a non-empty name without path separators"));
        }
        self.model.validate()?;
        self.cascade.validate()?;
        if self.split.n_train == 0 {
            return Err(Error::config("split.train", "must be ≥ 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("eval.tau", "must lie in (0, 1)"));
        }
        if self.pretrain.steps > 0 && (self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0)) {
            return Err(Error::config("pretrain", "batch_size and lr must be positive"));
        }
        for c in &self.corruptions {
            CorruptionSpec::parse(c, 0).map_err(|e| Error::config("eval.corruptions", e.to_string()))?;
        }
        match self.data.source {
            TaskSource::Teacher => {
                if self.model.mode != ModelMode::Mlp {
                    return Err(Error::config("data.task", "the teacher task needs model.mode = mlp"));
                }
                let max = self.model.input_dim.min(self.model.output_dim);
                if self.data.teacher_rank == 0 || self.data.teacher_rank > max {
                    return Err(Error::config("data.teacher_rank", format!("must lie in [1, {max}]")));
                }
                if self.data.shift_rank == 0 || self.data.shift_rank > max {
                    return Err(Error::config("data.shift_rank", format!("must lie in [1, {max}]")));
                }
                if self.data.label_noise < 0.0 {
                    return Err(Error::config("data.label_noise", "must be ≥ 0"));
                }
            }
            TaskSource::Sequence => {
                if self.model.mode != ModelMode::Transformer {
                    return Err(Error::config("data.task", "the sequence task needs model.mode = transformer"));
                }
                if self.model.input_dim != self.model.output_dim {
                    return Err(Error::config(
                        "model.output_dim",
                        "sequence labels are tokens, so output_dim must equal the vocabulary size",
                    ));
                }
                self.data.sequence_kind.parse::<crate::data::SequenceKind>()?;
            }
            TaskSource::Table => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "a table task needs a file path"));
                }
            }
        }
        Ok(())
    }

    /// Cascade settings for one seed.
    pub fn cascade_for(&self, seed: u64) -> CascadeConfig {
        CascadeConfig {
            seed,
            run_id: format!("{}-seed{seed}", self.run_id),
            ..self.cascade.clone()
        }
    }

    /// Every key with its resolved value, in a fixed order; parses back to the same config.
    pub fn to_kv_string(&self) -> String {
        let c = &self.cascade;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let join = |v: &[String]| v.join(",");
        let entries: Vec<(&str, String)> = vec![
            ("run.id", self.run_id.clone()),
            ("run.seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            ("run.out", self.out_dir.display().to_string()),
            ("run.precision", self.precision.name().into()),
            ("run.report_format", self.report_format.extension().into()),
            ("model.mode", format!("{:?}", self.model.mode).to_lowercase()),
            ("model.depth", self.model.depth.to_string()),
            ("model.width", self.model.width.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.input_dim", self.model.input_dim.to_string()),
            ("model.output_dim", self.model.output_dim.to_string()),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("data.task", self.data.source.name().into()),
            ("data.teacher_rank", self.data.teacher_rank.to_string()),
            ("data.shift_rank", self.data.shift_rank.to_string()),
            ("data.shift_scale", self.data.shift_scale.to_string()),
            ("data.label_noise", self.data.label_noise.to_string()),
            ("data.pretrain_examples", self.data.pretrain_examples.to_string()),
            ("data.seq_len", self.data.seq_len.to_string()),
            ("data.sequence_kind", self.data.sequence_kind.clone()),
            ("data.path", opt(self.data.path.as_ref().map(|p| p.display().to_string()))),
            (
                "data.format",
                match self.data.format {
                    TableFormat::Csv => "csv".into(),
                    TableFormat::Jsonl => "jsonl".into(),
                },
            ),
            ("data.classification", self.data.classification.to_string()),
            ("data.batch_size", c.batch_size.to_string()),
            ("split.train", self.split.n_train.to_string()),
            ("split.val", self.split.n_val.to_string()),
            ("split.test", self.split.n_test.to_string()),
            ("cascade.alpha", c.alpha.to_string()),
            ("cascade.lambda", c.lambda.to_string()),
            ("cascade.epochs", c.epochs.to_string()),
            ("cascade.steps_per_expert", opt(c.steps_per_expert.map(|s| s.to_string()))),
            ("cascade.ladder", c.ladder.name().into()),
            (
                "cascade.baseline",
                match c.baseline {
                    Baseline::None => "none".into(),
                    Baseline::Cola => "cola".into(),
                },
            ),
            ("cascade.discard_noise", c.discard_noise.to_string()),
            ("adapter.rank", c.rank.to_string()),
            ("adapter.lora_alpha", opt(c.lora_alpha.map(|a| a.to_string()))),
            ("adapter.targets", opt(c.targets.as_ref().map(|t| join(t)))),
            ("optim.lr", c.lr.to_string()),
            ("optim.lr_end", c.lr_end.to_string()),
            ("optim.schedule", format!("{:?}", c.schedule).to_lowercase()),
            ("optim.lr_plus_ratio", c.lr_policy.b_multiplier.to_string()),
            ("optim.cascade_lr_multiplier", c.lr_policy.cascade_multiplier.to_string()),
            ("optim.beta1", c.adamw.beta1.to_string()),
            ("optim.beta2", c.adamw.beta2.to_string()),
            ("optim.eps", c.adamw.eps.to_string()),
            ("optim.weight_decay", c.adamw.weight_decay.to_string()),
            ("eval.corruptions", join(&self.corruptions)),
            ("eval.tau", self.tau.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the resolved snapshot, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_kv_string().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_config_str(text: &str, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in parse_kv(text)? {
        cfg.set(&k, &v)?;
    }
    if let Some(seed) = env_seed {
        cfg.set("run.seed", seed).map_err(|_| Error::config(SEED_ENV, format!("expected an integer, got `{seed}`")))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any), applies `LORASC_SEED`, then `overrides`, and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let env = std::env::var(SEED_ENV).ok();
    parse_config_str(&text, overrides, env.as_deref())
        .map_err(|e| match path {
            Some(p) if matches!(e, Error::Config { .. }) => e.context(format!("config {}", p.display())),
            _ => e,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn defaults_from_minimal_file() {
        let cfg = parse_config_str("# nothing but a comment\n", &[], None).unwrap();
        assert_eq!(cfg.cascade.alpha, 0.5);
        assert_eq!(cfg.cascade.lambda, 0.1);
        assert_eq!(cfg.cascade.rank, 8);
        assert_eq!(cfg.cascade.batch_size, 4);
    }

    #[test]
    fn cli_overrides_file_and_env_overrides_file_seed() {
        let text = "cascade.alpha = 0.6\nrun.seed = 3\n";
        let cfg = parse_config_str(text, &[ov("cascade.alpha", "0.8")], Some("11")).unwrap();
        assert_eq!(cfg.cascade.alpha, 0.8);
        assert_eq!(cfg.seeds, vec![11]);
        let cfg = parse_config_str(text, &[ov("run.seed", "5")], Some("11")).unwrap();
        assert_eq!(cfg.seeds, vec![5]);
    }

    #[test]
    fn rejects_out_of_range_unknown_and_mistyped() {
        let e = parse_config_str("cascade.alpha = 1.5", &[], None).unwrap_err();
        assert!(e.to_string().contains("cascade.alpha"), "{e}");
        let e = parse_config_str("cascade.alhpa = 0.5", &[], None).unwrap_err();
        assert!(e.to_string().contains("cascade.alhpa"), "{e}");
        let e = parse_config_str("adapter.rank = eight", &[], None).unwrap_err();
        assert!(e.to_string().contains("integer"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(parse_config_str("no equals sign", &[], None).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let text = "cascade.steps_per_expert = 10\nadapter.targets = layers.0.fc1.weight\noptim.lr = 0.00025\n\
                    eval.corruptions = gaussian_input:0.5,feature_mask:0.25\nadapter.lora_alpha = 16\n";
        let cfg = parse_config_str(text, &[], None).unwrap();
        let again = parse_config_str(&cfg.to_kv_string(), &[], None).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest(), again.digest());
        assert_eq!(cfg.digest().len(), 64);
    }
}

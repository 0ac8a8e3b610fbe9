//! Synthetic transfer tasks, table ingestion, splits and input corruptions.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sample_normal, Matrix, RngState, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
    Sequence,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
            TaskKind::Sequence => "sequence",
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Regression)
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            "sequence" => Ok(TaskKind::Sequence),
            other => Err(Error::config("task_kind", format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Features(Matrix<f64>),
    Tokens(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix<f64>),
    Labels(Vec<usize>),
}

/// Inputs as the model consumes them, in run precision.
#[derive(Debug, Clone)]
pub enum ModelInput<T> {
    Features(Matrix<T>),
    Tokens(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub enum BatchTarget<T> {
    Values(Matrix<T>),
    Labels(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: ModelInput<T>,
    pub target: BatchTarget<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        match &self.input {
            ModelInput::Features(m) => m.rows(),
            ModelInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub targets: Targets,
    pub kind: TaskKind,
    /// Class count for classification tasks, 0 for regression.
    pub n_classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Inputs,
        targets: Targets,
        kind: TaskKind,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n_in = match &inputs {
            Inputs::Features(m) => m.rows(),
            Inputs::Tokens(t) => t.len(),
        };
        let n_out = match &targets {
            Targets::Values(m) => m.rows(),
            Targets::Labels(l) => l.len(),
        };
        if n_in != n_out {
            return Err(Error::ShapeMsg(format!("{n_in} inputs but {n_out} targets")));
        }
        match (&targets, kind) {
            (Targets::Values(_), TaskKind::Regression) => {}
            (Targets::Labels(labels), TaskKind::Classification | TaskKind::Sequence) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                    return Err(Error::Argument(format!("label {bad} outside [0, {n_classes})")));
                }
            }
            _ => {
                return Err(Error::config(
                    "task_kind",
                    format!("targets do not match task kind {}", kind.name()),
                ))
            }
        }
        if matches!(inputs, Inputs::Tokens(_)) != (kind == TaskKind::Sequence) {
            return Err(Error::config("task_kind", "token inputs go with sequence tasks only"));
        }
        Ok(Self {
            inputs,
            targets,
            kind,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        match &self.inputs {
            Inputs::Features(m) => m.rows(),
            Inputs::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature count, or vocabulary-independent sequence length for token data.
    pub fn input_dim(&self) -> usize {
        match &self.inputs {
            Inputs::Features(m) => m.cols(),
            Inputs::Tokens(t) => t.first().map_or(0, Vec::len),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Values(m) => m.cols(),
            Targets::Labels(_) => self.n_classes,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let inputs = match &self.inputs {
            Inputs::Features(m) => Inputs::Features(m.select_rows(indices)),
            Inputs::Tokens(t) => Inputs::Tokens(indices.iter().map(|&i| t[i].clone()).collect()),
        };
        let targets = match &self.targets {
            Targets::Values(m) => Targets::Values(m.select_rows(indices)),
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        };
        Dataset {
            inputs,
            targets,
            kind: self.kind,
            n_classes: self.n_classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let input = match &self.inputs {
            Inputs::Features(m) => ModelInput::Features(m.select_rows(indices).cast()),
            Inputs::Tokens(t) => ModelInput::Tokens(indices.iter().map(|&i| t[i].clone()).collect()),
        };
        let target = match &self.targets {
            Targets::Values(m) => BatchTarget::Values(m.select_rows(indices).cast()),
            Targets::Labels(l) => BatchTarget::Labels(indices.iter().map(|&i| l[i]).collect()),
        };
        Batch { input, target }
    }

    pub fn full_batch<T: Scalar>(&self) -> Batch<T> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

// ---------------------------------------------------------------------------
// splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_val: 500,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Pool indices behind each split, in split order.
    pub indices: [Vec<usize>; 3],
}

/// Partitions a pool of exactly `spec.total()` examples into disjoint splits.
pub fn split(pool: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    if pool.len() != spec.total() {
        return Err(Error::Argument(format!(
            "pool has {} examples, split needs {}",
            pool.len(),
            spec.total()
        )));
    }
    let perm = RngState::new(spec.seed).derive("split", 0).permutation(pool.len());
    let train = perm[..spec.n_train].to_vec();
    let val = perm[spec.n_train..spec.n_train + spec.n_val].to_vec();
    let test = perm[spec.n_train + spec.n_val..].to_vec();
    Ok(Splits {
        train: pool.subset(&train),
        val: pool.subset(&val),
        test: pool.subset(&test),
        indices: [train, val, test],
    })
}

// ---------------------------------------------------------------------------
// teacher-student regression

/// An `out × in` teacher of exact rank `rank`, drawn as a product of Gaussian factors.
pub fn random_teacher(
    rng: &mut RngState,
    input_dim: usize,
    output_dim: usize,
    rank: usize,
) -> Result<Matrix<f64>> {
    if rank == 0 || rank > input_dim.min(output_dim) {
        return Err(Error::Argument(format!(
            "teacher rank {rank} outside [1, {}]",
            input_dim.min(output_dim)
        )));
    }
    let u: Matrix<f64> = sample_normal(output_dim, rank, 1.0, rng);
    let v: Matrix<f64> = sample_normal(rank, input_dim, 1.0, rng);
    // unit output variance for x ~ N(0, I)
    u.matmul(&v)?.scale(1.0 / ((rank * input_dim) as f64).sqrt())
}

/// Draws `n` examples `y = T x + ε` with `x ~ N(0, I)` and `ε ~ N(0, label_noise²)`.
pub fn sample_from_teacher(
    teacher: &Matrix<f64>,
    rng: &mut RngState,
    n: usize,
    label_noise: f64,
    provenance: &str,
) -> Result<Dataset> {
    if label_noise < 0.0 {
        return Err(Error::Argument(format!("label noise {label_noise} < 0")));
    }
    let (out_dim, in_dim) = teacher.shape();
    let x: Matrix<f64> = sample_normal(n, in_dim, 1.0, rng);
    let mut y = x.matmul(&teacher.transpose())?;
    if label_noise > 0.0 {
        let eps: Matrix<f64> = sample_normal(n, out_dim, label_noise, rng);
        y.add_assign(&eps)?;
    }
    Dataset::new(
        Inputs::Features(x),
        Targets::Values(y),
        TaskKind::Regression,
        0,
        provenance,
    )
}

pub fn gen_teacher_student(
    seed: u64,
    n: usize,
    input_dim: usize,
    output_dim: usize,
    teacher_rank: usize,
    label_noise: f64,
) -> Result<Dataset> {
    let root = RngState::new(seed);
    let teacher = random_teacher(&mut root.derive("teacher", 0), input_dim, output_dim, teacher_rank)?;
    sample_from_teacher(
        &teacher,
        &mut root.derive("examples", 0),
        n,
        label_noise,
        &format!("teacher_student(seed={seed},rank={teacher_rank})"),
    )
}

/// A broad pretraining teacher and a narrow fine-tuning teacher that differs
/// from it by a rank-`shift_rank` perturbation of relative size `shift_scale`.
#[derive(Debug, Clone)]
pub struct TransferTeachers {
    pub broad: Matrix<f64>,
    pub narrow: Matrix<f64>,
}

pub fn transfer_teachers(
    seed: u64,
    input_dim: usize,
    output_dim: usize,
    teacher_rank: usize,
    shift_rank: usize,
    shift_scale: f64,
) -> Result<TransferTeachers> {
    let root = RngState::new(seed);
    let broad = random_teacher(&mut root.derive("teacher", 0), input_dim, output_dim, teacher_rank)?;
    let shift = random_teacher(&mut root.derive("shift", 0), input_dim, output_dim, shift_rank)?;
    let narrow = broad.add(&shift.scale(shift_scale)?)?;
    Ok(TransferTeachers { broad, narrow })
}

// ---------------------------------------------------------------------------
// sequence classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    /// Label is the unique most frequent token.
    Majority,
    /// Label is the first token of the sequence.
    FirstToken,
}

impl FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(SequenceKind::Majority),
            "first_token" => Ok(SequenceKind::FirstToken),
            other => Err(Error::config("sequence.kind", format!("unknown sequence task `{other}`"))),
        }
    }
}

/// Most frequent token, or `None` when the maximum count is shared.
pub fn unique_mode(seq: &[usize], vocab: usize) -> Option<usize> {
    let mut counts = vec![0usize; vocab];
    for &t in seq {
        counts[t] += 1;
    }
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (first, _) = winners.next()?;
    winners.next().is_none().then_some(first)
}

pub fn gen_sequence_task(seed: u64, n: usize, seq_len: usize, vocab: usize, kind: &str) -> Result<Dataset> {
    let kind: SequenceKind = kind.parse()?;
    if vocab < 2 {
        return Err(Error::Argument(format!("vocab {vocab} < 2")));
    }
    if seq_len == 0 {
        return Err(Error::Argument("seq_len must be ≥ 1".into()));
    }
    let mut rng = RngState::new(seed).derive("sequence", 0);
    let mut seqs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        // draw the label first so classes stay balanced
        let label = rng.below(vocab);
        let mut seq: Vec<usize> = (0..seq_len).map(|_| rng.below(vocab)).collect();
        match kind {
            SequenceKind::FirstToken => seq[0] = label,
            SequenceKind::Majority => {
                while unique_mode(&seq, vocab) != Some(label) {
                    let others: Vec<usize> = (0..seq_len).filter(|&i| seq[i] != label).collect();
                    let pos = others[rng.below(others.len())];
                    seq[pos] = label;
                }
            }
        }
        seqs.push(seq);
        labels.push(label);
    }
    Dataset::new(
        Inputs::Tokens(seqs),
        Targets::Labels(labels),
        TaskKind::Sequence,
        vocab,
        format!("sequence(seed={seed},kind={kind:?})"),
    )
}

// ---------------------------------------------------------------------------
// tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Jsonl,
    Csv,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(TableFormat::Jsonl),
            "csv" => Ok(TableFormat::Csv),
            other => Err(Error::config("format", format!("unknown table format `{other}`"))),
        }
    }
}

/// Column layout of an ingested table. Classification tables carry one label column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub features: Vec<String>,
    pub targets: Vec<String>,
    pub kind: TaskKind,
    pub n_classes: usize,
}

impl TableSchema {
    pub fn regression(n_features: usize, n_targets: usize) -> Self {
        Self {
            features: (0..n_features).map(|i| format!("x{i}")).collect(),
            targets: (0..n_targets).map(|i| format!("y{i}")).collect(),
            kind: TaskKind::Regression,
            n_classes: 0,
        }
    }

    pub fn classification(n_features: usize, n_classes: usize) -> Self {
        Self {
            features: (0..n_features).map(|i| format!("x{i}")).collect(),
            targets: vec!["label".into()],
            kind: TaskKind::Classification,
            n_classes,
        }
    }
}

enum RowTarget {
    Values(Vec<f64>),
    Label(usize),
}

struct TableBuilder<'a> {
    schema: &'a TableSchema,
    x: Vec<f64>,
    y: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
}

impl<'a> TableBuilder<'a> {
    fn new(schema: &'a TableSchema) -> Self {
        Self {
            schema,
            x: Vec::new(),
            y: Vec::new(),
            labels: Vec::new(),
            n: 0,
        }
    }

    fn push(&mut self, line: usize, x: Vec<f64>, target: RowTarget) -> Result<()> {
        let bad = |msg: String| Error::Ingestion { line, msg };
        if x.len() != self.schema.features.len() {
            return Err(bad(format!("expected {} features, got {}", self.schema.features.len(), x.len())));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite feature {v}")));
        }
        match (target, self.schema.kind) {
            (RowTarget::Values(y), TaskKind::Regression) => {
                if y.len() != self.schema.targets.len() {
                    return Err(bad(format!("expected {} targets, got {}", self.schema.targets.len(), y.len())));
                }
                if let Some(v) = y.iter().find(|v| !v.is_finite()) {
                    return Err(bad(format!("non-finite target {v}")));
                }
                self.y.extend(y);
            }
            (RowTarget::Label(l), TaskKind::Classification) => {
                if l >= self.schema.n_classes {
                    return Err(bad(format!("label {l} outside [0, {})", self.schema.n_classes)));
                }
                self.labels.push(l);
            }
            _ => return Err(bad("target does not match the schema's task kind".into())),
        }
        self.x.extend(x);
        self.n += 1;
        Ok(())
    }

    fn finish(self, provenance: String) -> Result<Dataset> {
        let x = Matrix::from_vec(self.n, self.schema.features.len(), self.x)?;
        let targets = match self.schema.kind {
            TaskKind::Regression => Targets::Values(Matrix::from_vec(self.n, self.schema.targets.len(), self.y)?),
            _ => Targets::Labels(self.labels),
        };
        Dataset::new(Inputs::Features(x), targets, self.schema.kind, self.schema.n_classes, provenance)
    }
}

fn parse_number(line: usize, field: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Ingestion {
        line,
        msg: format!("`{field}` is not a number"),
    })
}

fn parse_label(line: usize, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::Ingestion {
            line,
            msg: format!("label {v} is not a non-negative integer"),
        });
    }
    Ok(v as usize)
}

pub fn load_table(path: &Path, format: TableFormat, schema: &TableSchema) -> Result<Dataset> {
    if schema.kind == TaskKind::Sequence {
        return Err(Error::Schema("tables hold feature vectors, not token sequences".into()));
    }
    let provenance = format!("table:{}", path.display());
    match format {
        TableFormat::Jsonl => load_jsonl(path, schema, provenance),
        TableFormat::Csv => load_csv(path, schema, provenance),
    }
}

fn load_jsonl(path: &Path, schema: &TableSchema, provenance: String) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut builder = TableBuilder::new(schema);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            line: lineno,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Ingestion {
            line: lineno,
            msg: "row is not a JSON object".into(),
        })?;
        let x = obj.get("x").ok_or_else(|| Error::Schema(format!("line {lineno}: missing column `x`")))?;
        let y = obj.get("y").ok_or_else(|| Error::Schema(format!("line {lineno}: missing column `y`")))?;
        let x = json_numbers(lineno, x)?;
        let target = match (schema.kind, y) {
            (TaskKind::Regression, serde_json::Value::Array(_)) => RowTarget::Values(json_numbers(lineno, y)?),
            (TaskKind::Regression, serde_json::Value::Number(n)) => {
                RowTarget::Values(vec![n.as_f64().unwrap_or(f64::NAN)])
            }
            (_, serde_json::Value::Number(n)) => {
                RowTarget::Label(parse_label(lineno, n.as_f64().unwrap_or(f64::NAN))?)
            }
            _ => {
                return Err(Error::Ingestion {
                    line: lineno,
                    msg: "`y` must be an array or an integer".into(),
                })
            }
        };
        builder.push(lineno, x, target)?;
    }
    builder.finish(provenance)
}

fn json_numbers(line: usize, v: &serde_json::Value) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| Error::Ingestion {
        line,
        msg: "expected an array of numbers".into(),
    })?;
    arr.iter()
        .map(|e| match e {
            serde_json::Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN)),
            // NaN/inf are not JSON numbers; accept them as strings so they are reported as non-finite
            serde_json::Value::String(s) => parse_number(line, s),
            _ => Err(Error::Ingestion {
                line,
                msg: format!("`{e}` is not a number"),
            }),
        })
        .collect()
}

fn load_csv(path: &Path, schema: &TableSchema, provenance: String) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut builder = TableBuilder::new(schema);
    if text.trim().is_empty() {
        return builder.finish(provenance);
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion { line: 1, msg: e.to_string() })?
        .clone();
    let locate = |name: &String| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let fcols = schema.features.iter().map(locate).collect::<Result<Vec<_>>>()?;
    let tcols = schema.targets.iter().map(locate).collect::<Result<Vec<_>>>()?;
    for (i, record) in reader.records().enumerate() {
        let lineno = i + 2;
        let record = record.map_err(|e| Error::Ingestion { line: lineno, msg: e.to_string() })?;
        let field = |c: usize| -> Result<f64> {
            let s = record.get(c).ok_or_else(|| Error::Ingestion {
                line: lineno,
                msg: format!("row has only {} fields", record.len()),
            })?;
            parse_number(lineno, s)
        };
        let x = fcols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
        let target = match schema.kind {
            TaskKind::Regression => RowTarget::Values(tcols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?),
            _ => RowTarget::Label(parse_label(lineno, field(tcols[0])?)?),
        };
        builder.push(lineno, x, target)?;
    }
    builder.finish(provenance)
}

/// Writes a feature dataset in the layout [`load_table`] reads back.
pub fn save_table(dataset: &Dataset, path: &Path, format: TableFormat, schema: &TableSchema) -> Result<()> {
    let Inputs::Features(x) = &dataset.inputs else {
        return Err(Error::Schema("only feature datasets can be saved as tables".into()));
    };
    let mut out = String::new();
    match format {
        TableFormat::Jsonl => {
            for i in 0..dataset.len() {
                let y = match &dataset.targets {
                    Targets::Values(m) => serde_json::json!(m.row(i)),
                    Targets::Labels(l) => serde_json::json!(l[i]),
                };
                let row = serde_json::json!({ "x": x.row(i), "y": y });
                out.push_str(&row.to_string());
                out.push('\n');
            }
        }
        TableFormat::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            let header: Vec<&str> = schema.features.iter().chain(&schema.targets).map(String::as_str).collect();
            w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
            for i in 0..dataset.len() {
                let mut fields: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
                match &dataset.targets {
                    Targets::Values(m) => fields.extend(m.row(i).iter().map(|v| v.to_string())),
                    Targets::Labels(l) => fields.push(l[i].to_string()),
                }
                w.write_record(&fields).map_err(|e| Error::io(path, e.into()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
            out = String::from_utf8(bytes).expect("csv output is utf-8");
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// corruption

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Additive `N(0, severity²)` input noise.
    GaussianInput,
    /// Each input entry is zeroed with probability `severity`.
    FeatureMask,
    /// Every input is translated by `severity` along a fixed random unit-RMS direction.
    CovariateShift,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianInput => "gaussian_input",
            CorruptionKind::FeatureMask => "feature_mask",
            CorruptionKind::CovariateShift => "covariate_shift",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_input" => Ok(CorruptionKind::GaussianInput),
            "feature_mask" => Ok(CorruptionKind::FeatureMask),
            "covariate_shift" => Ok(CorruptionKind::CovariateShift),
            other => Err(Error::config("corruption.kind", format!("unknown corruption `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    /// Split label used in metrics, e.g. `corrupted:gaussian_input:0.5`.
    pub fn split_name(&self) -> String {
        format!("corrupted:{}:{}", self.kind.name(), self.severity)
    }

    /// Parses `kind:severity`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::config("corruptions", format!("expected kind:severity, got `{s}`")))?;
        let severity = sev
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::config("corruptions", format!("severity `{sev}` is not a number")))?;
        Ok(Self {
            kind: kind.trim().parse()?,
            severity,
            seed,
        })
    }
}

/// Returns a corrupted copy; the input dataset is never modified.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    if !(spec.severity >= 0.0 && spec.severity.is_finite()) {
        return Err(Error::config("corruption.severity", format!("{} is not ≥ 0", spec.severity)));
    }
    let Inputs::Features(x) = &dataset.inputs else {
        return Err(Error::config(
            "corruption.kind",
            format!("{} needs feature inputs, dataset is {}", spec.kind.name(), dataset.kind.name()),
        ));
    };
    if spec.severity == 0.0 {
        return Ok(dataset.clone());
    }
    let mut rng = RngState::new(spec.seed).derive(spec.kind.name(), 0);
    let corrupted = match spec.kind {
        CorruptionKind::GaussianInput => {
            let noise: Matrix<f64> = sample_normal(x.rows(), x.cols(), spec.severity, &mut rng);
            x.add(&noise)?
        }
        CorruptionKind::FeatureMask => {
            if spec.severity > 1.0 {
                return Err(Error::config("corruption.severity", "mask probability must be ≤ 1"));
            }
            Matrix::from_fn(x.rows(), x.cols(), |i, j| if rng.next_f64() < spec.severity { 0.0 } else { x.get(i, j) })
        }
        CorruptionKind::CovariateShift => {
            let dir: Matrix<f64> = sample_normal(1, x.cols(), 1.0, &mut rng);
            let rms = (dir.data().iter().map(|v| v * v).sum::<f64>() / x.cols() as f64).sqrt();
            let shift: Vec<f64> = dir.data().iter().map(|v| spec.severity * v / rms).collect();
            Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + shift[j])
        }
    };
    let mut out = dataset.clone();
    out.inputs = Inputs::Features(corrupted);
    out.provenance = format!("{}+{}", dataset.provenance, spec.split_name());
    Ok(out)
}

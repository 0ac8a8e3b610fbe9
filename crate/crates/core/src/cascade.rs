//! The cascade engine: per-expert fast training against a noisy backbone,
//! slow-fast averaging, merging, and the baselines it reduces to.
//!
//! One run walks `E` experts over a fixed stream of `S` optimizer steps. For
//! expert `t` it (optionally) redraws the fast pairs, perturbs the adapted
//! targets with uniform noise scaled by the slow delta's spread, restarts the
//! optimizer on a compressed copy of the schedule, trains, folds the fast
//! pairs into the slow ones and merges the slow delta. Everything added to the
//! backbone is also summed in a [`Ledger`] so the result can be audited.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{bind_pairs, ema_update, init_pairs, reinit_fast, ExpertState, LoraPair};
use crate::data::{Batch, BatchTarget, Dataset, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, score_outputs, MetricsRecord};
use crate::model::{forward, loss, Backbone, TargetSet};
use crate::numkit::{sample_uniform, Matrix, RngState, Scalar, Tape};
use crate::optim::{compressed_schedule, reinit_optimizer, AdamW, AdamWConfig, LrPolicy, Schedule, ScheduleKind};

/// How much of the full pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ladder {
    /// One pair over the whole schedule, merged once.
    Vanilla,
    /// Fresh expert per period, merged directly.
    Cascade,
    /// Cascade with slow-fast averaging.
    Slow,
    /// Slow cascade with noise before each expert.
    Full,
}

impl Ladder {
    pub const ALL: [Ladder; 4] = [Ladder::Vanilla, Ladder::Cascade, Ladder::Slow, Ladder::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ladder::Vanilla => "vanilla",
            Ladder::Cascade => "cascade",
            Ladder::Slow => "slow",
            Ladder::Full => "full",
        }
    }

    /// Row label in the ablation table.
    pub fn row_label(self) -> &'static str {
        match self {
            Ladder::Vanilla => "LoRA",
            Ladder::Cascade => "+ Cascade",
            Ladder::Slow => "++ Slow LoRA",
            Ladder::Full => "+++ Noise Tuning",
        }
    }
}

impl FromStr for Ladder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Ladder::Vanilla),
            "cascade" => Ok(Ladder::Cascade),
            "slow" => Ok(Ladder::Slow),
            "full" => Ok(Ladder::Full),
            other => Err(Error::config("cascade.ladder", format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    None,
    /// Restart a fresh pair per expert and merge it directly.
    Cola,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "cola" => Ok(Baseline::Cola),
            other => Err(Error::config("cascade.baseline", format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Slow-pair retention in `[0, 1]`.
    pub alpha: f64,
    /// Noise intensity, ≥ 0.
    pub lambda: f64,
    /// Passes over the training split.
    pub epochs: usize,
    /// `None` trains one expert per epoch.
    pub steps_per_expert: Option<usize>,
    pub ladder: Ladder,
    pub baseline: Baseline,
    /// Remove each expert's noise from the backbone before merging.
    pub discard_noise: bool,
    pub rank: usize,
    /// Adapter scaling is `lora_alpha / rank`; `None` means scaling 1.
    pub lora_alpha: Option<f64>,
    /// `None` adapts the model's default targets.
    pub targets: Option<Vec<String>>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub schedule: ScheduleKind,
    pub lr_policy: LrPolicy,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub run_id: String,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.1,
            epochs: 5,
            steps_per_expert: None,
            ladder: Ladder::Full,
            baseline: Baseline::None,
            discard_noise: false,
            rank: 8,
            lora_alpha: None,
            targets: None,
            batch_size: 4,
            lr: 1e-3,
            lr_end: 0.0,
            schedule: ScheduleKind::Linear,
            lr_policy: LrPolicy::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
            run_id: "run".into(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("cascade.alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("cascade.lambda", format!("{} is not a finite value ≥ 0", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::config("cascade.epochs", "must be ≥ 1"));
        }
        if self.steps_per_expert == Some(0) {
            return Err(Error::config("cascade.steps_per_expert", "must be ≥ 1"));
        }
        if self.rank == 0 {
            return Err(Error::config("adapter.rank", "must be ≥ 1"));
        }
        if let Some(a) = self.lora_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("adapter.lora_alpha", "must be > 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be ≥ 1"));
        }
        for (field, v) in [("optim.lr", self.lr), ("optim.lr_end", self.lr_end)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} is not a finite value ≥ 0")));
            }
        }
        self.lr_policy.validate()
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha.map_or(1.0, |a| a / self.rank as f64)
    }

    /// Retention actually used by the configured level.
    pub fn effective_alpha(&self) -> f64 {
        match self.ladder {
            Ladder::Vanilla | Ladder::Cascade => 0.0,
            Ladder::Slow | Ladder::Full => self.alpha,
        }
    }

    /// Noise intensity actually used by the configured level.
    pub fn effective_lambda(&self) -> f64 {
        match self.ladder {
            Ladder::Full => self.lambda,
            _ => 0.0,
        }
    }

    pub fn target_set<T: Scalar>(&self, backbone: &Backbone<T>) -> TargetSet {
        match &self.targets {
            Some(names) => TargetSet { names: names.clone() },
            None => backbone.default_targets(),
        }
    }

    /// The full-run schedule; cascading levels apply the lr multiplier.
    pub fn base_schedule(&self, total_steps: usize) -> Result<Schedule> {
        let s = Schedule::new(self.schedule, self.lr, self.lr_end, total_steps)?;
        Ok(if self.ladder == Ladder::Vanilla && self.baseline == Baseline::None {
            s
        } else {
            s.scaled(self.lr_policy.cascade_multiplier)
        })
    }
}

/// How the global step stream is cut into epochs and experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub steps_per_expert: usize,
    pub experts: usize,
}

impl Plan {
    pub fn new(config: &CascadeConfig, n_train: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::Argument("training split is empty".into()));
        }
        let steps_per_epoch = n_train.div_ceil(config.batch_size);
        let total_steps = steps_per_epoch * config.epochs;
        let steps_per_expert = if config.ladder == Ladder::Vanilla && config.baseline == Baseline::None {
            total_steps
        } else {
            config.steps_per_expert.unwrap_or(steps_per_epoch).min(total_steps)
        };
        Ok(Self {
            steps_per_epoch,
            total_steps,
            steps_per_expert,
            experts: total_steps.div_ceil(steps_per_expert),
        })
    }

    /// Steps given to expert `t` (1-based); the last one takes the remainder.
    pub fn expert_len(&self, t: usize) -> usize {
        let start = (t - 1) * self.steps_per_expert;
        self.steps_per_expert.min(self.total_steps - start)
    }
}

/// Shuffled minibatches addressed by global step; each epoch has its own permutation.
#[derive(Debug, Clone)]
pub struct BatchStream {
    root: RngState,
    n: usize,
    batch_size: usize,
    steps_per_epoch: usize,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Self {
        Self {
            root: RngState::new(seed).derive("data", 0),
            n,
            batch_size,
            steps_per_epoch: n.div_ceil(batch_size.max(1)),
            cached: None,
        }
    }

    pub fn indices(&mut self, global_step: usize) -> &[usize] {
        let epoch = global_step / self.steps_per_epoch;
        if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let perm = self.root.derive("shuffle", epoch as u64).permutation(self.n);
            self.cached = Some((epoch, perm));
        }
        let pos = global_step % self.steps_per_epoch;
        let perm = &self.cached.as_ref().expect("cached").1;
        let start = pos * self.batch_size;
        &perm[start..(start + self.batch_size).min(self.n)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReinitFast,
    ApplyNoise,
    ReinitOptimizer,
    TrainFast,
    EmaUpdate,
    Merge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub expert: usize,
    pub stage: Stage,
}

/// Running sums, in f64, of everything added to the adapted targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ledger {
    /// Σ kept noise per target.
    pub noise_sum: BTreeMap<String, Matrix<f64>>,
    /// Σ merged slow deltas per target.
    pub slow_sum: BTreeMap<String, Matrix<f64>>,
    /// Noise drawn for the expert in progress, folded into `noise_sum` at merge.
    pub pending_noise: BTreeMap<String, Matrix<f64>>,
    /// Per expert, the slow-delta std used for each target's noise.
    pub sigmas: Vec<Vec<f64>>,
    /// Per expert, the largest telescoping residual over targets after its merge.
    pub audit: Vec<f64>,
}

impl Ledger {
    fn new<T: Scalar>(targets: &[LoraPair<T>]) -> Self {
        let zeros = |p: &LoraPair<T>| {
            let (d, k) = p.target_shape();
            (p.target().to_string(), Matrix::zeros(d, k))
        };
        Self {
            noise_sum: targets.iter().map(zeros).collect(),
            slow_sum: targets.iter().map(zeros).collect(),
            ..Default::default()
        }
    }
}

fn accumulate<T: Scalar>(sum: &mut Matrix<f64>, delta: &Matrix<T>) {
    for (s, &d) in sum.data_mut().iter_mut().zip(delta.data()) {
        *s += d.to_f64_lossless();
    }
}

/// Everything needed to continue a run from a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState<T> {
    pub w0: Backbone<T>,
    /// Current weights, including any kept noise.
    pub backbone: Backbone<T>,
    /// Target matrices as they were before this expert's noise (discard mode only).
    pub clean: BTreeMap<String, Matrix<T>>,
    pub experts: ExpertState<T>,
    /// `Some` while an expert is in progress.
    pub optimizer: Option<AdamW<T>>,
    pub expert_step: usize,
    pub global_step: usize,
    pub last_lr: f64,
    pub ledger: Ledger,
    pub metrics: Vec<MetricsRecord>,
    pub trace: Vec<StageEvent>,
}

impl<T: Scalar> RunState<T> {
    /// Slow pairs drawn from the `slow-init` stream; fast pairs start as their clones.
    pub fn new(config: &CascadeConfig, backbone: &Backbone<T>) -> Result<Self> {
        config.validate()?;
        let targets = config.target_set(backbone);
        if targets.is_empty() {
            return Err(Error::config("adapter.targets", "no targets to adapt"));
        }
        let root = RngState::new(config.seed);
        let experts = ExpertState::init(
            backbone,
            &targets,
            config.rank,
            config.scaling(),
            &root.derive("slow-init", 0),
        )?;
        Ok(Self {
            w0: backbone.clone(),
            backbone: backbone.clone(),
            clean: BTreeMap::new(),
            ledger: Ledger::new(&experts.slow),
            experts,
            optimizer: None,
            expert_step: 0,
            global_step: 0,
            last_lr: config.lr,
            metrics: Vec::new(),
            trace: Vec::new(),
        })
    }

    /// 1-based index of the expert in progress (or about to start).
    pub fn current_expert(&self) -> usize {
        self.experts.epoch + 1
    }

    fn push(&mut self, stage: Stage) {
        let expert = self.current_expert();
        self.trace.push(StageEvent { expert, stage });
    }

    pub fn slow_deltas(&self) -> Vec<Matrix<T>> {
        self.experts.slow.iter().map(LoraPair::delta).collect()
    }

    /// Per target, `‖W − (W₀ + ΣÑ + Σδ_slow)‖∞` computed in f64.
    pub fn telescoping_residual(&self) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (name, slow) in &self.ledger.slow_sum {
            let w = self.backbone.get(name)?;
            let w0 = self.w0.get(name)?;
            let noise = &self.ledger.noise_sum[name];
            let worst = (0..w.len())
                .map(|i| {
                    let rhs = w0.data()[i].to_f64_lossless() + noise.data()[i] + slow.data()[i];
                    (w.data()[i].to_f64_lossless() - rhs).abs()
                })
                .fold(0.0, f64::max);
            out.insert(name.clone(), worst);
        }
        Ok(out)
    }

    fn audit(&mut self) -> Result<()> {
        let worst = self.telescoping_residual()?.values().copied().fold(0.0, f64::max);
        self.ledger.audit.push(worst);
        Ok(())
    }
}

fn norm_of(pairs: &[LoraPair<impl Scalar>]) -> f64 {
    pairs.iter().map(|p| p.delta().frobenius_norm().powi(2)).sum::<f64>().sqrt()
}

/// Noise elements `σ·U(−λ/2, λ/2)`, each strictly inside `(−λσ/2, λσ/2)`.
pub fn sample_noise<T: Scalar>(
    rows: usize,
    cols: usize,
    lambda: f64,
    sigma: f64,
    rng: &mut RngState,
) -> Result<Matrix<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("lambda {lambda} must be finite and ≥ 0")));
    }
    let half = lambda * sigma / 2.0;
    if half == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let u: Matrix<f64> = sample_uniform(rows, cols, -lambda / 2.0, lambda / 2.0, rng)?;
    let data = u
        .data()
        .iter()
        .map(|&v| {
            let mut t = T::from_f64_lossy(v * sigma);
            // rounding may land on the boundary; pull it inside
            while t.to_f64_lossless().abs() >= half {
                let inner = t.abs().step_down();
                t = if t < T::zero() { -inner } else { inner };
            }
            t
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Perturbs every adapted target by `U(−λ/2, λ/2)·std(s·B_slow·A_slow)` of its own slow pair.
pub fn apply_noise<T: Scalar>(state: &mut RunState<T>, lambda: f64, discard: bool, rng: &RngState) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("lambda {lambda} must be finite and ≥ 0")));
    }
    state.push(Stage::ApplyNoise);
    state.clean.clear();
    state.ledger.pending_noise.clear();
    let mut sigmas = Vec::with_capacity(state.experts.slow.len());
    for (j, pair) in state.experts.slow.iter().enumerate() {
        let sigma = pair.delta().std_all()?.to_f64_lossless();
        sigmas.push(sigma);
        let (d, k) = pair.target_shape();
        let noise: Matrix<T> = sample_noise(d, k, lambda, sigma, &mut rng.derive("target", j as u64))?;
        if discard {
            state.clean.insert(pair.target().to_string(), state.backbone.get(pair.target())?.clone());
        }
        if lambda * sigma != 0.0 {
            state.backbone.add_to(pair.target(), &noise)?;
        }
        let mut rec = Matrix::zeros(d, k);
        accumulate(&mut rec, &noise);
        state.ledger.pending_noise.insert(pair.target().to_string(), rec);
    }
    state.ledger.sigmas.push(sigmas);
    Ok(())
}

fn batch_loss_step<T: Scalar>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    pairs: &mut [LoraPair<T>],
    opt: &mut AdamW<T>,
    batch: &Batch<T>,
    kind: crate::data::TaskKind,
    lr: f64,
) -> Result<(f64, Option<f64>)> {
    tape.reset();
    let bound = backbone.bind(tape, false);
    let binding = bind_pairs(pairs, tape);
    let out = forward(tape, backbone.config(), &bound, &binding, &batch.input)?;
    let l = loss(tape, out, &batch.target, kind)?;
    let lv = tape.value(l).get(0, 0).to_f64_lossless();
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("loss became {lv}")));
    }
    let accuracy = match &batch.target {
        BatchTarget::Labels(_) => score_outputs(tape.value(out), &batch.target)?.accuracy,
        BatchTarget::Values(_) => None,
    };
    let mut grads = tape.backward(l)?;
    let g: Vec<Matrix<T>> = pairs
        .iter()
        .flat_map(|p| {
            let v = binding[p.target()];
            [grads.take(v.a), grads.take(v.b)]
        })
        .collect();
    let mut params: Vec<&mut Matrix<T>> = pairs
        .iter_mut()
        .flat_map(|p| {
            let (a, b) = p.factors_mut();
            [a, b]
        })
        .collect();
    opt.step(&mut params, &g, lr)?;
    Ok((lv, accuracy))
}

/// Trains the fast pairs for `steps` steps against the current backbone.
///
/// Picks up at `state.expert_step` in `schedule` and `state.global_step` in the
/// batch stream; emits one train record per step.
pub fn train_fast_expert<T: Scalar>(
    state: &mut RunState<T>,
    config: &CascadeConfig,
    data: &Dataset,
    stream: &mut BatchStream,
    schedule: &Schedule,
    steps: usize,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let mut opt = state
        .optimizer
        .take()
        .ok_or_else(|| Error::Contract("fast training needs a freshly initialized optimizer".into()))?;
    if state.expert_step == 0 {
        state.push(Stage::TrainFast);
    }
    let spe = stream.steps_per_epoch;
    let sigma = if config.ladder == Ladder::Full {
        state.ledger.sigmas.get(state.experts.epoch).cloned().unwrap_or_default()
    } else {
        Vec::new()
    };
    let slow_norm = if config.ladder == Ladder::Vanilla { 0.0 } else { norm_of(&state.experts.slow) };
    let mut tape = Tape::new();
    for _ in 0..steps {
        let lr = schedule.lr_at(state.expert_step)?;
        let g = state.global_step;
        let batch = data.batch::<T>(stream.indices(g));
        let (lv, acc) = batch_loss_step(
            &mut tape,
            &state.backbone,
            &mut state.experts.fast,
            &mut opt,
            &batch,
            data.kind,
            lr,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Training { step: g, msg },
            other => other.context(format!("step {g}")),
        })?;
        state.metrics.push(MetricsRecord {
            run_id: config.run_id.clone(),
            epoch: g / spe + 1,
            expert: state.current_expert(),
            step: g,
            split: "train".into(),
            loss: lv,
            accuracy: acc,
            lr,
            noise_sigma: sigma.clone(),
            slow_norm,
            fast_norm: norm_of(&state.experts.fast),
        });
        state.last_lr = lr;
        state.expert_step += 1;
        state.global_step += 1;
    }
    state.optimizer = Some(opt);
    Ok(())
}

/// Folds fast into slow per the level, merges the resulting delta and audits.
pub fn merge_slow<T: Scalar>(state: &mut RunState<T>, config: &CascadeConfig) -> Result<()> {
    match config.ladder {
        Ladder::Vanilla => {}
        Ladder::Cascade => state.experts.slow = state.experts.fast.clone(),
        Ladder::Slow | Ladder::Full => {
            state.push(Stage::EmaUpdate);
            let alpha = config.effective_alpha();
            state.experts.slow = state
                .experts
                .slow
                .iter()
                .zip(&state.experts.fast)
                .map(|(s, f)| ema_update(s, f, alpha))
                .collect::<Result<_>>()?;
        }
    }
    state.push(Stage::Merge);
    for (name, clean) in std::mem::take(&mut state.clean) {
        *state.backbone.get_mut(&name)? = clean;
    }
    let pending = std::mem::take(&mut state.ledger.pending_noise);
    if !config.discard_noise {
        for (name, noise) in pending {
            let sum = state.ledger.noise_sum.get_mut(&name).ok_or_else(|| Error::Lookup(name.clone()))?;
            *sum = sum.add(&noise)?;
        }
    }
    let merged = if config.ladder == Ladder::Vanilla { &state.experts.fast } else { &state.experts.slow };
    let deltas: Vec<(String, Matrix<T>)> = merged.iter().map(|p| (p.target().to_string(), p.delta())).collect();
    for (name, delta) in deltas {
        state.backbone.add_to(&name, &delta)?;
        let sum = state.ledger.slow_sum.get_mut(&name).ok_or_else(|| Error::Lookup(name.clone()))?;
        accumulate(sum, &delta);
    }
    state.experts.epoch += 1;
    state.optimizer = None;
    state.expert_step = 0;
    state.audit()
}

/// Training split plus named evaluation splits.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub evals: Vec<(String, Dataset)>,
}

impl RunData {
    pub fn from_splits(splits: &Splits) -> Self {
        Self {
            train: splits.train.clone(),
            evals: vec![("val".into(), splits.val.clone()), ("test".into(), splits.test.clone())],
        }
    }
}

fn record_evals<T: Scalar>(
    state: &mut RunState<T>,
    config: &CascadeConfig,
    data: &RunData,
    plan: &Plan,
    adapters: &[LoraPair<T>],
) -> Result<()> {
    let slow_norm = if config.ladder == Ladder::Vanilla { 0.0 } else { norm_of(&state.experts.slow) };
    let fast_norm = norm_of(&state.experts.fast);
    let sigma = if config.ladder == Ladder::Full {
        state.ledger.sigmas.last().cloned().unwrap_or_default()
    } else {
        Vec::new()
    };
    for (split, ds) in &data.evals {
        let r = evaluate(&state.backbone, adapters, ds).map_err(|e| e.context(format!("evaluating `{split}`")))?;
        state.metrics.push(MetricsRecord {
            run_id: config.run_id.clone(),
            epoch: state.global_step / plan.steps_per_epoch,
            expert: state.experts.epoch,
            step: state.global_step,
            split: split.clone(),
            loss: r.loss,
            accuracy: r.accuracy,
            lr: state.last_lr,
            noise_sigma: sigma.clone(),
            slow_norm,
            fast_norm,
        });
    }
    Ok(())
}

/// Final state of a run plus the plan it followed.
#[derive(Debug, Clone)]
pub struct RunReport<T> {
    pub config: CascadeConfig,
    pub plan: Plan,
    pub state: RunState<T>,
}

impl<T: Scalar> RunReport<T> {
    pub fn backbone(&self) -> &Backbone<T> {
        &self.state.backbone
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.state.metrics
    }

    /// Last recorded loss on `split`.
    pub fn final_loss(&self, split: &str) -> Option<f64> {
        self.state.metrics.iter().rev().find(|m| m.split == split).map(|m| m.loss)
    }
}

/// Step-resumable driver for one run.
pub struct Runner<'a, T> {
    config: CascadeConfig,
    data: &'a RunData,
    plan: Plan,
    stream: BatchStream,
    root: RngState,
    state: RunState<T>,
}

impl<'a, T: Scalar> Runner<'a, T> {
    pub fn new(config: &CascadeConfig, backbone: &Backbone<T>, data: &'a RunData) -> Result<Self> {
        let state = RunState::new(config, backbone)?;
        Self::resume(config, state, data)
    }

    pub fn resume(config: &CascadeConfig, state: RunState<T>, data: &'a RunData) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(config, data.train.len())?;
        if state.global_step > plan.total_steps || state.experts.epoch > plan.experts {
            return Err(Error::Contract(format!(
                "state at step {} does not fit a plan of {} steps",
                state.global_step, plan.total_steps
            )));
        }
        Ok(Self {
            stream: BatchStream::new(config.seed, data.train.len(), config.batch_size),
            root: RngState::new(config.seed),
            config: config.clone(),
            data,
            plan,
            state,
        })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn state(&self) -> &RunState<T> {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.global_step >= self.plan.total_steps
    }

    fn begin_expert(&mut self, t: usize) -> Result<()> {
        if t > 1 && self.config.ladder != Ladder::Vanilla {
            self.state.push(Stage::ReinitFast);
            reinit_fast(&mut self.state.experts, &mut self.root.derive("fast-init", t as u64))?;
        }
        if self.config.ladder == Ladder::Full {
            let lambda = self.config.effective_lambda();
            apply_noise(&mut self.state, lambda, self.config.discard_noise, &self.root.derive("noise", t as u64))?;
        }
        self.state.push(Stage::ReinitOptimizer);
        self.state.optimizer = Some(reinit_optimizer(
            &self.state.experts.fast,
            &self.config.lr_policy,
            self.config.adamw,
        )?);
        Ok(())
    }

    fn schedule_for(&self, t: usize) -> Result<Schedule> {
        compressed_schedule(&self.config.base_schedule(self.plan.total_steps)?, self.plan.expert_len(t))
    }

    /// Advances to `stop` global steps (clamped to the plan), pausing only on step boundaries.
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        let stop = stop.min(self.plan.total_steps);
        while self.state.global_step < stop {
            let t = self.state.current_expert();
            let wrap = |e: Error| e.context(format!("expert {t}"));
            if self.state.optimizer.is_none() {
                self.begin_expert(t).map_err(wrap)?;
            }
            let len = self.plan.expert_len(t);
            let spe = self.plan.steps_per_epoch;
            let g = self.state.global_step;
            let n = (len - self.state.expert_step).min(stop - g).min(spe - g % spe);
            let schedule = self.schedule_for(t).map_err(wrap)?;
            train_fast_expert(&mut self.state, &self.config, &self.data.train, &mut self.stream, &schedule, n)
                .map_err(wrap)?;
            if self.state.expert_step == len {
                merge_slow(&mut self.state, &self.config).map_err(wrap)?;
            }
            if self.state.global_step % spe == 0 {
                let adapters = if self.state.optimizer.is_some() { self.state.experts.fast.clone() } else { Vec::new() };
                record_evals(&mut self.state, &self.config, self.data, &self.plan, &adapters).map_err(wrap)?;
            }
        }
        Ok(())
    }

    pub fn run_epochs(&mut self, epochs: usize) -> Result<()> {
        self.run_until(epochs.saturating_mul(self.plan.steps_per_epoch))
    }

    pub fn finish(mut self) -> Result<RunReport<T>> {
        self.run_until(self.plan.total_steps)?;
        Ok(self.into_report())
    }

    pub fn into_report(self) -> RunReport<T> {
        RunReport {
            config: self.config,
            plan: self.plan,
            state: self.state,
        }
    }
}

/// Runs the configured level (or the COLA baseline) to completion.
pub fn run<T: Scalar>(config: &CascadeConfig, backbone: &Backbone<T>, data: &RunData) -> Result<RunReport<T>> {
    match config.baseline {
        Baseline::Cola => run_cola(config, backbone, data),
        Baseline::None => Runner::new(config, backbone, data)?.finish(),
    }
}

/// One pair over the whole schedule, evaluated in adapter form each epoch and merged once at the end.
pub fn run_vanilla_lora<T: Scalar>(
    config: &CascadeConfig,
    backbone: &Backbone<T>,
    data: &RunData,
) -> Result<RunReport<T>> {
    let config = CascadeConfig {
        ladder: Ladder::Vanilla,
        baseline: Baseline::None,
        ..config.clone()
    };
    let plan = Plan::new(&config, data.train.len())?;
    let mut state = RunState::new(&config, backbone)?;
    let mut stream = BatchStream::new(config.seed, data.train.len(), config.batch_size);
    let schedule = Schedule::new(config.schedule, config.lr, config.lr_end, plan.total_steps)?;
    state.push(Stage::ReinitOptimizer);
    state.optimizer = Some(reinit_optimizer(&state.experts.fast, &config.lr_policy, config.adamw)?);
    for epoch in 1..=config.epochs {
        train_fast_expert(&mut state, &config, &data.train, &mut stream, &schedule, plan.steps_per_epoch)?;
        let adapters = if epoch == config.epochs {
            merge_slow(&mut state, &config)?;
            Vec::new()
        } else {
            state.experts.fast.clone()
        };
        record_evals(&mut state, &config, data, &plan, &adapters)?;
    }
    Ok(RunReport { config, plan, state })
}

/// A fresh pair per expert with an optimizer restart, merged directly, no averaging and no noise.
pub fn run_cola<T: Scalar>(config: &CascadeConfig, backbone: &Backbone<T>, data: &RunData) -> Result<RunReport<T>> {
    let config = CascadeConfig {
        baseline: Baseline::Cola,
        ..config.clone()
    };
    let plan = Plan::new(&config, data.train.len())?;
    let mut state = RunState::new(&config, backbone)?;
    let root = RngState::new(config.seed);
    let mut stream = BatchStream::new(config.seed, data.train.len(), config.batch_size);
    let base = config.base_schedule(plan.total_steps)?;
    let targets = config.target_set(backbone);
    for t in 1..=plan.experts {
        let mut pairs = if t == 1 {
            init_pairs(&state.backbone, &targets, config.rank, config.scaling(), &root.derive("slow-init", 0))?
        } else {
            state.push(Stage::ReinitFast);
            let mut rng = root.derive("fast-init", t as u64);
            state
                .experts
                .fast
                .iter()
                .map(|p| {
                    let (d, k) = p.target_shape();
                    crate::adapter::init_pair(p.target(), d, k, config.rank, config.scaling(), &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        };
        std::mem::swap(&mut state.experts.fast, &mut pairs);
        state.push(Stage::ReinitOptimizer);
        state.optimizer = Some(reinit_optimizer(&state.experts.fast, &config.lr_policy, config.adamw)?);
        let len = plan.expert_len(t);
        let schedule = compressed_schedule(&base, len)?;
        // split at epoch boundaries so evaluation sees the same points as the engine
        while state.expert_step < len {
            let g = state.global_step;
            let spe = plan.steps_per_epoch;
            let n = (len - state.expert_step).min(spe - g % spe);
            train_fast_expert(&mut state, &config, &data.train, &mut stream, &schedule, n)
                .map_err(|e| e.context(format!("expert {t}")))?;
            if state.expert_step == len {
                let cascade = CascadeConfig {
                    ladder: Ladder::Cascade,
                    ..config.clone()
                };
                merge_slow(&mut state, &cascade)?;
            }
            if state.global_step % spe == 0 {
                let adapters = if state.optimizer.is_some() { state.experts.fast.clone() } else { Vec::new() };
                record_evals(&mut state, &config, data, &plan, &adapters)?;
            }
            if state.optimizer.is_none() {
                break;
            }
        }
    }
    Ok(RunReport { config, plan, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_teacher_student, split, SplitSpec};
    use crate::model::ModelConfig;

    fn tiny() -> (Backbone<f32>, RunData) {
        let mc = ModelConfig {
            width: 8,
            depth: 1,
            input_dim: 4,
            output_dim: 2,
            ..ModelConfig::default()
        };
        let bb = Backbone::build(&mc).unwrap();
        let pool = gen_teacher_student(3, 60, 4, 2, 2, 0.1).unwrap();
        let spec = SplitSpec {
            n_train: 24,
            n_val: 12,
            n_test: 24,
            seed: 1,
        };
        (bb, RunData::from_splits(&split(&pool, &spec).unwrap()))
    }

    fn cfg(ladder: Ladder) -> CascadeConfig {
        CascadeConfig {
            ladder,
            rank: 2,
            epochs: 3,
            lr: 1e-2,
            alpha: 0.5,
            lambda: 1.0,
            ..CascadeConfig::default()
        }
    }

    #[test]
    fn plan_partitions_steps() {
        let c = CascadeConfig {
            steps_per_expert: Some(4),
            epochs: 2,
            ..cfg(Ladder::Full)
        };
        let p = Plan::new(&c, 21).unwrap();
        assert_eq!(p.steps_per_epoch, 6);
        assert_eq!(p.total_steps, 12);
        assert_eq!(p.experts, 3);
        assert_eq!((1..=3).map(|t| p.expert_len(t)).sum::<usize>(), 12);
        let v = Plan::new(&cfg(Ladder::Vanilla), 21).unwrap();
        assert_eq!(v.experts, 1);
    }

    #[test]
    fn batch_stream_covers_each_epoch() {
        let mut s = BatchStream::new(4, 10, 4);
        let mut seen: Vec<usize> = (0..3).flat_map(|g| s.indices(g).to_vec()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn first_expert_noise_is_zero_and_trace_is_ordered() {
        let (bb, data) = tiny();
        let r = run(&cfg(Ladder::Full), &bb, &data).unwrap();
        assert!(r.state.ledger.sigmas[0].iter().all(|&s| s == 0.0));
        assert!(r.state.ledger.sigmas[1].iter().all(|&s| s > 0.0));
        let first: Vec<Stage> = r.state.trace.iter().filter(|e| e.expert == 1).map(|e| e.stage).collect();
        assert_eq!(
            first,
            [Stage::ApplyNoise, Stage::ReinitOptimizer, Stage::TrainFast, Stage::EmaUpdate, Stage::Merge]
        );
        assert!(r.state.ledger.audit.iter().all(|&a| a < 1e-4));
        assert_eq!(r.state.ledger.audit.len(), 3);
    }

    #[test]
    fn train_updates_only_fast_pairs() {
        let (bb, data) = tiny();
        let c = cfg(Ladder::Full);
        let mut state = RunState::new(&c, &bb).unwrap();
        state.optimizer = Some(reinit_optimizer(&state.experts.fast, &c.lr_policy, c.adamw).unwrap());
        let slow = state.experts.slow.clone();
        let mut stream = BatchStream::new(0, data.train.len(), 4);
        let sched = Schedule::new(ScheduleKind::Constant, 1e-2, 1e-2, 6).unwrap();
        train_fast_expert(&mut state, &c, &data.train, &mut stream, &sched, 0).unwrap();
        assert_eq!(state.experts.fast, slow);
        train_fast_expert(&mut state, &c, &data.train, &mut stream, &sched, 6).unwrap();
        assert_eq!(state.backbone, bb);
        assert_eq!(state.experts.slow, slow);
        assert_ne!(state.experts.fast, slow);
    }

    #[test]
    fn missing_optimizer_is_a_contract_error() {
        let (bb, data) = tiny();
        let c = cfg(Ladder::Full);
        let mut state = RunState::new(&c, &bb).unwrap();
        let mut stream = BatchStream::new(0, data.train.len(), 4);
        let sched = Schedule::new(ScheduleKind::Constant, 1e-2, 1e-2, 2).unwrap();
        assert!(matches!(
            train_fast_expert(&mut state, &c, &data.train, &mut stream, &sched, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let (bb, _) = tiny();
        let mut state = RunState::new(&cfg(Ladder::Full), &bb).unwrap();
        assert!(apply_noise(&mut state, -1.0, false, &RngState::new(0)).is_err());
    }

    #[test]
    fn discard_noise_leaves_only_slow_deltas() {
        let (bb, data) = tiny();
        let c = CascadeConfig {
            discard_noise: true,
            ..cfg(Ladder::Full)
        };
        let r = run(&c, &bb, &data).unwrap();
        assert!(r.state.ledger.noise_sum.values().all(|m| m.max_abs() == 0.0));
        assert!(r.state.telescoping_residual().unwrap().values().all(|&v| v < 1e-5));
    }
}

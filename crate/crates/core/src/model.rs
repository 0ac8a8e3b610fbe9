//! The frozen backbone: a residual MLP or a minimal pre-norm transformer
//! encoder, with named projection matrices that accept low-rank adapters.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{BatchTarget, Dataset, ModelInput, TaskKind};
use crate::error::{Error, Result};
use crate::numkit::{lit, sample_normal, Matrix, RngState, Scalar, Tape, Var};
use crate::optim::{AdamW, AdamWConfig};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Mlp,
    Transformer,
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelMode::Mlp),
            "transformer" => Ok(ModelMode::Transformer),
            other => Err(Error::config("model.mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub depth: usize,
    /// Hidden width (`d_model` in transformer mode).
    pub width: usize,
    /// Attention heads; ignored in MLP mode.
    pub heads: usize,
    /// Feature count (MLP) or vocabulary size (transformer).
    pub input_dim: usize,
    /// Regression outputs or class count.
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Mlp,
            depth: 2,
            width: 32,
            heads: 4,
            input_dim: 16,
            output_dim: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.depth", self.depth),
            ("model.width", self.width),
            ("model.input_dim", self.input_dim),
            ("model.output_dim", self.output_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        if self.mode == ModelMode::Transformer {
            if self.heads == 0 {
                return Err(Error::config("model.heads", "must be ≥ 1"));
            }
            if self.width % self.heads != 0 {
                return Err(Error::config(
                    "model.heads",
                    format!("width {} is not divisible by {} heads", self.width, self.heads),
                ));
            }
        }
        Ok(())
    }

    /// Every parameter name with its `(rows, cols)` shape, in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let w = self.width;
        let mut out = Vec::new();
        match self.mode {
            ModelMode::Mlp => {
                out.push(("embed.weight".to_string(), (w, self.input_dim)));
                out.push(("embed.bias".to_string(), (1, w)));
                for i in 0..self.depth {
                    out.push((format!("layers.{i}.fc1.weight"), (w, w)));
                    out.push((format!("layers.{i}.fc1.bias"), (1, w)));
                    out.push((format!("layers.{i}.fc2.weight"), (w, w)));
                    out.push((format!("layers.{i}.fc2.bias"), (1, w)));
                }
            }
            ModelMode::Transformer => {
                out.push(("embed.weight".to_string(), (self.input_dim, w)));
                for i in 0..self.depth {
                    for p in ["q", "k", "v", "o"] {
                        out.push((format!("layers.{i}.attn.{p}.weight"), (w, w)));
                    }
                    out.push((format!("layers.{i}.mlp.fc1.weight"), (2 * w, w)));
                    out.push((format!("layers.{i}.mlp.fc1.bias"), (1, 2 * w)));
                    out.push((format!("layers.{i}.mlp.fc2.weight"), (w, 2 * w)));
                    out.push((format!("layers.{i}.mlp.fc2.bias"), (1, w)));
                }
            }
        }
        out.push(("head.weight".to_string(), (self.output_dim, w)));
        out.push(("head.bias".to_string(), (1, self.output_dim)));
        out
    }

    /// q and v projections of every attention layer; `fc1` of every MLP layer.
    pub fn default_targets(&self) -> TargetSet {
        let names = (0..self.depth)
            .flat_map(|i| match self.mode {
                ModelMode::Mlp => vec![format!("layers.{i}.fc1.weight")],
                ModelMode::Transformer => {
                    vec![format!("layers.{i}.attn.q.weight"), format!("layers.{i}.attn.v.weight")]
                }
            })
            .collect();
        TargetSet { names }
    }
}

/// Ordered names of the backbone matrices that receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub names: Vec<String>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn validate<T: Scalar>(&self, backbone: &Backbone<T>) -> Result<()> {
        for name in &self.names {
            backbone.get(name)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::config("targets", format!("duplicate target `{dup}`")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: ModelConfig,
    params: BTreeMap<String, Matrix<T>>,
}

/// Tape handles for every backbone parameter.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    vars: BTreeMap<String, Var>,
}

impl BoundBackbone {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// A bound adapter on one target: the linear layer adds `scaling · x Aᵀ Bᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars<T> {
    pub a: Var,
    pub b: Var,
    pub scaling: T,
}

pub type AdapterBinding<T> = BTreeMap<String, AdapterVars<T>>;

impl<T: Scalar> Backbone<T> {
    /// Fan-in scaled Gaussian weights, zero biases, unit-variance embeddings.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = RngState::new(config.seed);
        let mut params = BTreeMap::new();
        for (idx, (name, (rows, cols))) in config.parameter_shapes().into_iter().enumerate() {
            let m = if name.ends_with(".bias") {
                Matrix::zeros(rows, cols)
            } else {
                let std = if name == "embed.weight" && config.mode == ModelMode::Transformer {
                    1.0
                } else {
                    1.0 / (cols as f64).sqrt()
                };
                sample_normal(rows, cols, std, &mut root.derive("backbone", idx as u64))
            };
            params.insert(name, m);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Matrix<T>>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.parameter_shapes() {
            let m = params.get(&name).ok_or_else(|| Error::Lookup(name.clone()))?;
            if m.shape() != shape {
                return Err(Error::ShapeMsg(format!("{name}: expected {shape:?}, got {:?}", m.shape())));
            }
        }
        if params.len() != config.parameter_shapes().len() {
            return Err(Error::ShapeMsg("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.params.get(name).ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Mutable access for explicit merges; shapes are fixed for the life of the backbone.
    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix<T>> {
        &self.params
    }

    pub fn default_targets(&self) -> TargetSet {
        self.config.default_targets()
    }

    /// Adds `delta` to the named matrix in place.
    pub fn add_to(&mut self, name: &str, delta: &Matrix<T>) -> Result<()> {
        let target = self.get_mut(name)?;
        if target.shape() != delta.shape() {
            return Err(Error::Shape {
                op: "merge",
                left: target.shape(),
                right: delta.shape(),
            });
        }
        target.add_assign(delta).map_err(|e| e.context(format!("merging into `{name}`")))
    }

    /// Records every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundBackbone {
        let vars = self
            .params
            .iter()
            .map(|(name, m)| {
                let v = if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundBackbone { vars }
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundBackbone,
    adapters: &AdapterBinding<T>,
    x: Var,
    weight: &str,
    bias: Option<&str>,
) -> Result<Var> {
    let w = bound.var(weight)?;
    let mut y = tape.matmul_bt(x, w).map_err(|e| e.context(weight.to_string()))?;
    if let Some(ad) = adapters.get(weight) {
        let (d, k) = tape.shape(w);
        let (ra, ka) = tape.shape(ad.a);
        let (db, rb) = tape.shape(ad.b);
        if ka != k || db != d || ra != rb {
            return Err(Error::ShapeMsg(format!(
                "adapter on `{weight}` ({d}x{k}) has A {ra}x{ka}, B {db}x{rb}"
            )));
        }
        let xa = tape.matmul_bt(x, ad.a)?;
        let xab = tape.matmul_bt(xa, ad.b)?;
        let scaled = if ad.scaling == T::one() { xab } else { tape.scale(xab, ad.scaling) };
        y = tape.add(y, scaled)?;
    }
    match bias {
        Some(b) => tape.add_row(y, bound.var(b)?),
        None => Ok(y),
    }
}

/// Records a forward pass and returns the `n × output_dim` output node.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &BoundBackbone,
    adapters: &AdapterBinding<T>,
    input: &ModelInput<T>,
) -> Result<Var> {
    for name in adapters.keys() {
        bound.var(name)?;
    }
    match (config.mode, input) {
        (ModelMode::Mlp, ModelInput::Features(x)) => {
            if x.cols() != config.input_dim {
                return Err(Error::Shape {
                    op: "forward",
                    left: x.shape(),
                    right: (x.rows(), config.input_dim),
                });
            }
            let xv = tape.constant(x.clone());
            let mut h = linear(tape, bound, adapters, xv, "embed.weight", Some("embed.bias"))?;
            for i in 0..config.depth {
                let u = linear(
                    tape,
                    bound,
                    adapters,
                    h,
                    &format!("layers.{i}.fc1.weight"),
                    Some(&format!("layers.{i}.fc1.bias")),
                )?;
                let u = tape.tanh(u);
                let u = linear(
                    tape,
                    bound,
                    adapters,
                    u,
                    &format!("layers.{i}.fc2.weight"),
                    Some(&format!("layers.{i}.fc2.bias")),
                )?;
                h = tape.add(h, u)?;
            }
            linear(tape, bound, adapters, h, "head.weight", Some("head.bias"))
        }
        (ModelMode::Transformer, ModelInput::Tokens(seqs)) => transformer_forward(tape, config, bound, adapters, seqs),
        (mode, _) => Err(Error::config("model.mode", format!("{mode:?} backbone cannot read this input kind"))),
    }
}

fn transformer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &BoundBackbone,
    adapters: &AdapterBinding<T>,
    seqs: &[Vec<usize>],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let len = seqs[0].len();
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(Error::ShapeMsg("sequences in a batch must share a non-zero length".into()));
    }
    let d = config.width;
    let dh = d / config.heads;
    let inv_sqrt = lit::<T>(1.0 / (dh as f64).sqrt());
    let eps = lit::<T>(LN_EPS);
    let embed = bound.var("embed.weight")?;

    let mut pooled = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let mut h = tape.gather_rows(embed, seq)?;
        for i in 0..config.depth {
            let a = tape.layer_norm(h, eps);
            let p = |n: &str| format!("layers.{i}.attn.{n}.weight");
            let q = linear(tape, bound, adapters, a, &p("q"), None)?;
            let k = linear(tape, bound, adapters, a, &p("k"), None)?;
            let v = linear(tape, bound, adapters, a, &p("v"), None)?;
            let mut heads = Vec::with_capacity(config.heads);
            for hd in 0..config.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let attn = tape.softmax(scores);
                heads.push(tape.matmul(attn, vh)?);
            }
            let o = tape.concat_cols(&heads)?;
            let o = linear(tape, bound, adapters, o, &p("o"), None)?;
            h = tape.add(h, o)?;

            let m = tape.layer_norm(h, eps);
            let f = |n: &str| format!("layers.{i}.mlp.{n}");
            let m = linear(tape, bound, adapters, m, &f("fc1.weight"), Some(&f("fc1.bias")))?;
            let m = tape.tanh(m);
            let m = linear(tape, bound, adapters, m, &f("fc2.weight"), Some(&f("fc2.bias")))?;
            h = tape.add(h, m)?;
        }
        let h = tape.layer_norm(h, eps);
        pooled.push(tape.mean_rows(h));
    }
    let pooled = tape.concat_rows(&pooled)?;
    linear(tape, bound, adapters, pooled, "head.weight", Some("head.bias"))
}

/// Mean squared error for regression, mean cross-entropy otherwise.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, outputs: Var, targets: &BatchTarget<T>, kind: TaskKind) -> Result<Var> {
    match (kind, targets) {
        (TaskKind::Regression, BatchTarget::Values(y)) => tape.mse(outputs, y),
        (TaskKind::Classification | TaskKind::Sequence, BatchTarget::Labels(l)) => tape.cross_entropy(outputs, l),
        _ => Err(Error::config("task_kind", format!("{} loss needs matching targets", kind.name()))),
    }
}

/// Adapter-free forward pass on a fresh tape, returning the output values.
pub fn predict<T: Scalar>(backbone: &Backbone<T>, input: &ModelInput<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, false);
    let out = forward(&mut tape, backbone.config(), &bound, &AdapterBinding::new(), input)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Training-set loss before the first step and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Full-parameter training on a broad task; the result becomes the frozen `W₀`.
pub fn pretrain_backbone<T: Scalar>(
    backbone: &Backbone<T>,
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(Backbone<T>, PretrainReport)> {
    if data.output_dim() != backbone.config().output_dim {
        return Err(Error::config(
            "pretrain",
            format!(
                "data has {} outputs, model head has {}",
                data.output_dim(),
                backbone.config().output_dim
            ),
        ));
    }
    let expects_tokens = backbone.config().mode == ModelMode::Transformer;
    if expects_tokens != (data.kind == TaskKind::Sequence) {
        return Err(Error::config("pretrain", "task kind does not match the model mode"));
    }
    let full = data.full_batch::<T>();
    let full_loss = |bb: &Backbone<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape, false);
        let out = forward(&mut tape, bb.config(), &bound, &AdapterBinding::new(), &full.input)?;
        let l = loss(&mut tape, out, &full.target, data.kind)?;
        Ok(tape.value(l).get(0, 0).to_f64_lossless())
    };
    let initial_loss = full_loss(backbone)?;
    let mut bb = backbone.clone();
    if cfg.steps == 0 || data.is_empty() {
        return Ok((
            bb,
            PretrainReport {
                initial_loss,
                final_loss: initial_loss,
                losses: Vec::new(),
            },
        ));
    }

    let names: Vec<String> = bb.params.keys().cloned().collect();
    let shapes: Vec<_> = names.iter().map(|n| bb.params[n].shape()).collect();
    let mut opt = AdamW::new(&shapes, &vec![1.0; shapes.len()], AdamWConfig::default())?;
    let rng = RngState::new(cfg.seed).derive("pretrain", 0);
    let mut order = Vec::new();
    let mut cursor = usize::MAX;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut tape = Tape::new();
    let bs = cfg.batch_size.clamp(1, data.len());
    for step in 0..cfg.steps {
        if cursor == usize::MAX || cursor + bs > order.len() {
            order = rng.derive("epoch", epoch).permutation(data.len());
            epoch += 1;
            cursor = 0;
        }
        let batch = data.batch::<T>(&order[cursor..cursor + bs]);
        cursor += bs;

        tape.reset();
        let bound = bb.bind(&mut tape, true);
        let out = forward(&mut tape, bb.config(), &bound, &AdapterBinding::new(), &batch.input)?;
        let l = loss(&mut tape, out, &batch.target, data.kind)?;
        let lv = tape.value(l).get(0, 0).to_f64_lossless();
        if !lv.is_finite() {
            let last = losses.last().copied().unwrap_or(initial_loss);
            return Err(Error::Training {
                step,
                msg: format!("pretraining loss became {lv}; last finite loss {last}"),
            });
        }
        losses.push(lv);
        let mut grads = tape.backward(l)?;
        let grads: Vec<Matrix<T>> = names.iter().map(|n| grads.take(bound.var(n).expect("bound"))).collect();
        let mut params: Vec<&mut Matrix<T>> = bb.params.values_mut().collect();
        opt.step(&mut params, &grads, cfg.lr)
            .map_err(|e| e.context(format!("pretraining step {step}")))?;
    }
    let final_loss = full_loss(&bb)?;
    Ok((
        bb,
        PretrainReport {
            initial_loss,
            final_loss,
            losses,
        },
    ))
}

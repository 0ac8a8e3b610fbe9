//! AdamW, learning-rate schedules, and per-expert optimizer restarts.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::LoraPair;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for a fixed list of parameters, each with its own learning-rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    config: AdamWConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    lr_multipliers: Vec<f64>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[(usize, usize)], lr_multipliers: &[f64], config: AdamWConfig) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Contract("optimizer needs at least one parameter".into()));
        }
        if shapes.len() != lr_multipliers.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} learning-rate multipliers",
                shapes.len(),
                lr_multipliers.len()
            )));
        }
        Ok(Self {
            config,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            lr_multipliers: lr_multipliers.to_vec(),
            step: 0,
        })
    }

    /// Rebuilds a state from checkpointed moments.
    pub fn from_parts(
        config: AdamWConfig,
        m: Vec<Matrix<T>>,
        v: Vec<Matrix<T>>,
        lr_multipliers: Vec<f64>,
        step: u64,
    ) -> Result<Self> {
        if m.len() != v.len() || m.len() != lr_multipliers.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Contract("inconsistent optimizer moments".into()));
        }
        Ok(Self {
            config,
            m,
            v,
            lr_multipliers,
            step,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.v
    }

    pub fn lr_multipliers(&self) -> &[f64] {
        &self.lr_multipliers
    }

    /// Learning rate actually applied to parameter `i` when the schedule says `lr`.
    pub fn effective_lr(&self, i: usize, lr: f64) -> f64 {
        lr * self.lr_multipliers[i]
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr_i = self.effective_lr(i, lr);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gd = gv.to_f64_lossless();
                let mn = beta1 * mv.to_f64_lossless() + (1.0 - beta1) * gd;
                let vn = beta2 * vv.to_f64_lossless() + (1.0 - beta2) * gd * gd;
                *mv = T::from_f64_lossy(mn);
                *vv = T::from_f64_lossy(vn);
                let m_hat = mv.to_f64_lossless() / bc1;
                let v_hat = vv.to_f64_lossless() / bc2;
                let pd = pv.to_f64_lossless();
                let upd = m_hat / (v_hat.sqrt() + eps) + weight_decay * pd;
                *pv = T::from_f64_lossy(pd - lr_i * upd);
            }
            p.check_finite("adamw_step")?;
        }
        Ok(())
    }
}

/// One AdamW update; see [`AdamW::step`].
pub fn adamw_step<T: Scalar>(
    state: &mut AdamW<T>,
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Constant,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(Error::config("schedule.kind", format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, lr_start: f64, lr_end: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Argument("schedule needs at least one step".into()));
        }
        if !(lr_start >= 0.0 && lr_end >= 0.0 && lr_start.is_finite() && lr_end.is_finite()) {
            return Err(Error::Argument(format!("learning rates must be finite and ≥ 0: {lr_start}, {lr_end}")));
        }
        Ok(Self {
            kind,
            lr_start,
            lr_end,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Argument(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        // a one-step schedule cannot move
        if self.total_steps == 1 {
            return Ok(self.lr_start);
        }
        let frac = step as f64 / (self.total_steps - 1) as f64;
        Ok(match self.kind {
            ScheduleKind::Constant => self.lr_start,
            ScheduleKind::Linear => self.lr_start * (1.0 - frac) + self.lr_end * frac,
            ScheduleKind::Cosine => {
                self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        })
    }

    /// Scales both endpoints.
    pub fn scaled(&self, factor: f64) -> Schedule {
        Schedule {
            lr_start: self.lr_start * factor,
            lr_end: self.lr_end * factor,
            ..*self
        }
    }
}

pub fn lr_at(schedule: &Schedule, step: usize) -> Result<f64> {
    schedule.lr_at(step)
}

/// The same schedule shape and endpoints squeezed into one expert's step budget.
pub fn compressed_schedule(base: &Schedule, steps_per_expert: usize) -> Result<Schedule> {
    if steps_per_expert == 0 {
        return Err(Error::Argument("steps_per_expert must be ≥ 1".into()));
    }
    Ok(Schedule {
        total_steps: steps_per_expert,
        ..*base
    })
}

/// How the base learning rate is split between adapter factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    /// Multiplier on B-matrix learning rates (LoRA+ uses 16).
    pub b_multiplier: f64,
    /// Multiplier on the whole schedule when cascading is active.
    pub cascade_multiplier: f64,
}

impl Default for LrPolicy {
    fn default() -> Self {
        Self {
            b_multiplier: 1.0,
            cascade_multiplier: 1.0,
        }
    }
}

impl LrPolicy {
    pub const LORA_PLUS_RATIO: f64 = 16.0;

    pub fn validate(&self) -> Result<()> {
        if !(self.b_multiplier >= 1.0 && self.b_multiplier.is_finite()) {
            return Err(Error::config("optim.lr_plus_ratio", format!("{} is not ≥ 1", self.b_multiplier)));
        }
        if !(self.cascade_multiplier > 0.0 && self.cascade_multiplier.is_finite()) {
            return Err(Error::config("optim.cascade_lr_multiplier", "must be > 0"));
        }
        Ok(())
    }
}

/// Fresh AdamW over the given pairs, ordered `[A₀, B₀, A₁, B₁, …]`, with B factors tagged by the policy.
pub fn reinit_optimizer<T: Scalar>(pairs: &[LoraPair<T>], policy: &LrPolicy, config: AdamWConfig) -> Result<AdamW<T>> {
    if pairs.is_empty() {
        return Err(Error::Contract("no adapter parameters to optimize".into()));
    }
    policy.validate()?;
    let mut shapes = Vec::with_capacity(2 * pairs.len());
    let mut mults = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        shapes.push(p.a().shape());
        mults.push(1.0);
        shapes.push(p.b().shape());
        mults.push(policy.b_multiplier);
    }
    AdamW::new(&shapes, &mults, config)
}

//! LoRA pairs: initialization, deltas, merges and the per-factor slow-fast EMA.

use crate::error::{Error, Result};
use crate::model::{AdapterBinding, AdapterVars, Backbone, TargetSet};
use crate::numkit::{sample_uniform, Matrix, RngState, Scalar, Tape};

/// One adapter `ΔW = s·B·A` on a `d × k` target, with `B: d×r` and `A: r×k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    target: String,
    a: Matrix<T>,
    b: Matrix<T>,
    scaling: T,
}

fn check_rank(d: usize, k: usize, r: usize) -> Result<()> {
    if r == 0 || r > d.min(k) {
        return Err(Error::Argument(format!("rank {r} outside [1, min({d}, {k})]")));
    }
    Ok(())
}

impl<T: Scalar> LoraPair<T> {
    pub fn from_parts(target: impl Into<String>, a: Matrix<T>, b: Matrix<T>, scaling: T) -> Result<Self> {
        let target = target.into();
        if a.rows() != b.cols() {
            return Err(Error::ShapeMsg(format!(
                "adapter `{target}`: B is {:?} but A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        check_rank(b.rows(), a.cols(), a.rows())?;
        if !scaling.is_finite() {
            return Err(Error::Argument(format!("adapter `{target}`: non-finite scaling")));
        }
        Ok(Self { target, a, b, scaling })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.a, &mut self.b)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scaling(&self) -> T {
        self.scaling
    }

    /// `(d, k)` of the adapted matrix.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn param_count(&self) -> usize {
        let (d, k) = self.target_shape();
        self.rank() * (d + k)
    }

    pub fn delta(&self) -> Matrix<T> {
        let ba = self.b.matmul_unchecked(&self.a);
        if self.scaling == T::one() {
            ba
        } else {
            ba.map(|v| v * self.scaling)
        }
    }

    /// Records both factors as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> AdapterVars<T> {
        AdapterVars {
            a: tape.param(self.a.clone()),
            b: tape.param(self.b.clone()),
            scaling: self.scaling,
        }
    }

    pub fn cast<U: Scalar>(&self) -> LoraPair<U> {
        LoraPair {
            target: self.target.clone(),
            a: self.a.cast(),
            b: self.b.cast(),
            scaling: U::from_f64_lossy(self.scaling.to_f64_lossless()),
        }
    }
}

/// `A ~ U(−1/√k, 1/√k)`, `B = 0`, so the pair starts with a zero delta.
pub fn init_pair<T: Scalar>(
    target: &str,
    d: usize,
    k: usize,
    r: usize,
    scaling: f64,
    rng: &mut RngState,
) -> Result<LoraPair<T>> {
    check_rank(d, k, r)?;
    let bound = 1.0 / (k as f64).sqrt();
    let a = sample_uniform(r, k, -bound, bound, rng)?;
    LoraPair::from_parts(target, a, Matrix::zeros(d, r), T::from_f64_lossy(scaling))
}

pub fn delta<T: Scalar>(pair: &LoraPair<T>) -> Matrix<T> {
    pair.delta()
}

/// `W_target += s·B·A`.
pub fn merge_into<T: Scalar>(backbone: &mut Backbone<T>, pair: &LoraPair<T>) -> Result<()> {
    let target = backbone.get(pair.target())?;
    if target.shape() != pair.target_shape() {
        return Err(Error::Shape {
            op: "merge_into",
            left: target.shape(),
            right: pair.target_shape(),
        });
    }
    backbone.add_to(pair.target(), &pair.delta())
}

fn ema<T: Scalar>(slow: &Matrix<T>, fast: &Matrix<T>, alpha: T) -> Matrix<T> {
    let keep = T::one() - alpha;
    slow.zip_map(fast, |s, f| alpha * s + keep * f)
}

/// `A' = αA_slow + (1−α)A_fast`, `B' = αB_slow + (1−α)B_fast`.
///
/// Averages the factors, not the product, so the new delta is generally not
/// the average of the old deltas.
pub fn ema_update<T: Scalar>(slow: &LoraPair<T>, fast: &LoraPair<T>, alpha: f64) -> Result<LoraPair<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    if slow.a.shape() != fast.a.shape() || slow.b.shape() != fast.b.shape() {
        return Err(Error::Shape {
            op: "ema_update",
            left: slow.target_shape(),
            right: fast.target_shape(),
        });
    }
    if slow.target != fast.target || slow.scaling != fast.scaling {
        return Err(Error::Contract(format!(
            "ema_update pairs `{}` and `{}` disagree on target or scaling",
            slow.target, fast.target
        )));
    }
    // endpoints as copies so they hold bit-for-bit
    if alpha == 0.0 {
        return Ok(fast.clone());
    }
    if alpha == 1.0 {
        return Ok(slow.clone());
    }
    let al = T::from_f64_lossy(alpha);
    Ok(LoraPair {
        target: slow.target.clone(),
        a: ema(&slow.a, &fast.a, al),
        b: ema(&slow.b, &fast.b, al),
        scaling: slow.scaling,
    })
}

/// Slow and fast pairs for every target, in target order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertState<T> {
    pub slow: Vec<LoraPair<T>>,
    pub fast: Vec<LoraPair<T>>,
    /// Number of experts merged so far.
    pub epoch: usize,
}

impl<T: Scalar> ExpertState<T> {
    /// Fresh slow pairs on every target; fast pairs start as clones.
    pub fn init(
        backbone: &Backbone<T>,
        targets: &TargetSet,
        rank: usize,
        scaling: f64,
        rng: &RngState,
    ) -> Result<Self> {
        let slow = init_pairs(backbone, targets, rank, scaling, rng)?;
        Ok(Self {
            fast: slow.clone(),
            slow,
            epoch: 0,
        })
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.slow.iter().map(|p| p.target())
    }

    pub fn fast_binding(&self, tape: &mut Tape<T>) -> AdapterBinding<T> {
        bind_pairs(&self.fast, tape)
    }
}

/// One pair per target, each drawn from its own stream `rng.derive("pair", j)`.
pub fn init_pairs<T: Scalar>(
    backbone: &Backbone<T>,
    targets: &TargetSet,
    rank: usize,
    scaling: f64,
    rng: &RngState,
) -> Result<Vec<LoraPair<T>>> {
    targets.validate(backbone)?;
    targets
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (d, k) = backbone.get(name)?.shape();
            init_pair(name, d, k, rank, scaling, &mut rng.derive("pair", j as u64))
                .map_err(|e| e.context(format!("adapter on `{name}`")))
        })
        .collect()
}

pub fn bind_pairs<T: Scalar>(pairs: &[LoraPair<T>], tape: &mut Tape<T>) -> AdapterBinding<T> {
    pairs.iter().map(|p| (p.target().to_string(), p.bind(tape))).collect()
}

/// Redraws every fast pair from `rng`; slow pairs are left alone.
pub fn reinit_fast<T: Scalar>(expert: &mut ExpertState<T>, rng: &mut RngState) -> Result<()> {
    for pair in expert.fast.iter_mut() {
        let (d, k) = pair.target_shape();
        let scaling = pair.scaling.to_f64_lossless();
        *pair = init_pair(&pair.target, d, k, pair.rank(), scaling, rng)?;
    }
    Ok(())
}

//! Fuzzy set embeddings and their set algebra.
//!
//! A [`FuzzyVec`] holds one membership degree per partition cell of the
//! universe. Intersection, union and complement act element-wise and always
//! return another valid `FuzzyVec`, so the representation is closed under all
//! three operations. The volume of a set is a weighted sum of its memberships,
//! with the per-cell weights supplied by [`VolumeWeights`].

use std::fmt;

use thiserror::Error;

/// Smallest child volume accepted as a containment denominator.
pub const DEGENERATE_MEASURE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("fuzzy vector must have at least one entry")]
    Empty,

    #[error("membership {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("degenerate child set: measure {measure} is not above {eps}")]
    DegenerateChild { measure: f64, eps: f64 },
}

pub type Result<T> = std::result::Result<T, AlgebraError>;

/// A membership vector in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyVec(Vec<f64>);

impl FuzzyVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AlgebraError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(AlgebraError::OutOfRange { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "fuzzy vector dimension must be positive");
        Self(vec![0.0; d])
    }

    pub fn ones(d: usize) -> Self {
        assert!(d >= 1, "fuzzy vector dimension must be positive");
        Self(vec![1.0; d])
    }

    /// Builds a vector from values already known to lie in `[0, 1]`.
    ///
    /// Only used where the range is guaranteed by construction (closed
    /// operations, squashing nonlinearities); checked in debug builds.
    pub(crate) fn from_unit_values(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)), "{values:?}");
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Element-wise `self <= other`.
    pub fn is_subset_of(&self, other: &FuzzyVec) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn euclidean_distance(&self, other: &FuzzyVec) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

impl AsRef<[f64]> for FuzzyVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Fuzzy logic system used for intersection and union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogicSystem {
    /// t-norm `a*b`, t-conorm `a+b-a*b`.
    #[default]
    Product,
    /// t-norm `min`, t-conorm `max`.
    Goedel,
}

impl LogicSystem {
    pub fn t_norm(self, a: f64, b: f64) -> f64 {
        match self {
            LogicSystem::Product => a * b,
            LogicSystem::Goedel => a.min(b),
        }
    }

    pub fn t_conorm(self, a: f64, b: f64) -> f64 {
        match self {
            // a + b - ab can overshoot 1 by an ulp.
            LogicSystem::Product => (a + b - a * b).clamp(0.0, 1.0),
            LogicSystem::Goedel => a.max(b),
        }
    }
}

impl fmt::Display for LogicSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogicSystem::Product => "product",
            LogicSystem::Goedel => "goedel",
        })
    }
}

impl std::str::FromStr for LogicSystem {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "product" => Ok(LogicSystem::Product),
            "goedel" | "godel" | "gödel" => Ok(LogicSystem::Goedel),
            other => Err(format!("unknown logic system '{other}'")),
        }
    }
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(AlgebraError::DimensionMismatch { left, right });
    }
    Ok(())
}

pub fn intersect(a: &FuzzyVec, b: &FuzzyVec, logic: LogicSystem) -> Result<FuzzyVec> {
    check_dims(a.dim(), b.dim())?;
    Ok(FuzzyVec::from_unit_values(a.0.iter().zip(&b.0).map(|(&x, &y)| logic.t_norm(x, y)).collect()))
}

pub fn union(a: &FuzzyVec, b: &FuzzyVec, logic: LogicSystem) -> Result<FuzzyVec> {
    check_dims(a.dim(), b.dim())?;
    Ok(FuzzyVec::from_unit_values(a.0.iter().zip(&b.0).map(|(&x, &y)| logic.t_conorm(x, y)).collect()))
}

pub fn complement(a: &FuzzyVec) -> FuzzyVec {
    FuzzyVec::from_unit_values(a.0.iter().map(|v| 1.0 - v).collect())
}

/// How raw volume parameters are turned into nonnegative cell measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightNorm {
    /// Raw values clamped below at zero.
    None,
    #[default]
    Sigmoid,
    /// Cell measures form a probability distribution.
    Softmax,
    Clamp01,
}

impl fmt::Display for WeightNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightNorm::None => "none",
            WeightNorm::Sigmoid => "sigmoid",
            WeightNorm::Softmax => "softmax",
            WeightNorm::Clamp01 => "clamp01",
        })
    }
}

impl std::str::FromStr for WeightNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(WeightNorm::None),
            "sigmoid" => Ok(WeightNorm::Sigmoid),
            "softmax" => Ok(WeightNorm::Softmax),
            "clamp01" | "clamp" => Ok(WeightNorm::Clamp01),
            other => Err(format!("unknown weight normalization '{other}'")),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw volume parameters to effective cell measures.
pub fn normalize_weights(raw: &[f64], mode: WeightNorm) -> Vec<f64> {
    match mode {
        WeightNorm::None => raw.iter().map(|&r| r.max(0.0)).collect(),
        WeightNorm::Sigmoid => raw.iter().map(|&r| sigmoid(r)).collect(),
        WeightNorm::Clamp01 => raw.iter().map(|&r| r.clamp(0.0, 1.0)).collect(),
        WeightNorm::Softmax => {
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = raw.iter().map(|&r| (r - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    }
}

/// Pulls a gradient w.r.t. the effective weights back to the raw parameters.
///
/// `None` passes gradient for `raw >= 0` so weights sitting exactly at zero
/// can still grow; `Clamp01` likewise passes it on `[0, 1)`.
pub fn normalize_weights_backward(raw: &[f64], mode: WeightNorm, upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(raw.len(), upstream.len());
    match mode {
        WeightNorm::None => raw.iter().zip(upstream).map(|(&r, &g)| if r >= 0.0 { g } else { 0.0 }).collect(),
        WeightNorm::Sigmoid => raw
            .iter()
            .zip(upstream)
            .map(|(&r, &g)| {
                let s = sigmoid(r);
                g * s * (1.0 - s)
            })
            .collect(),
        WeightNorm::Clamp01 => {
            raw.iter().zip(upstream).map(|(&r, &g)| if (0.0..1.0).contains(&r) { g } else { 0.0 }).collect()
        }
        WeightNorm::Softmax => {
            let p = normalize_weights(raw, mode);
            let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
            p.iter().zip(upstream).map(|(&pi, &g)| pi * (g - dot)).collect()
        }
    }
}

/// Trainable per-cell volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeWeights {
    pub raw: Vec<f64>,
    pub mode: WeightNorm,
}

impl VolumeWeights {
    pub fn new(raw: Vec<f64>, mode: WeightNorm) -> Self {
        Self { raw, mode }
    }

    /// All-zero raw parameters: uniform start under Sigmoid and Softmax.
    pub fn zeros(d: usize, mode: WeightNorm) -> Self {
        Self::new(vec![0.0; d], mode)
    }

    /// Effective weights equal to `values` under [`WeightNorm::None`].
    pub fn fixed(values: Vec<f64>) -> Self {
        Self::new(values, WeightNorm::None)
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    pub fn effective(&self) -> Vec<f64> {
        normalize_weights(&self.raw, self.mode)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Simple fuzzy measure `sum_i a_i * xi_i`.
pub fn measure(a: &FuzzyVec, w: &VolumeWeights) -> Result<f64> {
    check_dims(a.dim(), w.dim())?;
    Ok(dot(a.as_slice(), &w.effective()))
}

/// Volume of `A ∩ {y}` under the product t-norm.
pub fn membership_score(y: &FuzzyVec, a: &FuzzyVec, w: &VolumeWeights) -> Result<f64> {
    check_dims(y.dim(), a.dim())?;
    check_dims(y.dim(), w.dim())?;
    let xi = w.effective();
    Ok(y.0.iter().zip(&a.0).zip(&xi).map(|((p, q), x)| p * q * x).sum())
}

/// Ratio of the volume of `parent ∩ child` to the volume of `child`.
pub fn containment_probability(parent: &FuzzyVec, child: &FuzzyVec, w: &VolumeWeights) -> Result<f64> {
    check_dims(parent.dim(), child.dim())?;
    check_dims(child.dim(), w.dim())?;
    let xi = w.effective();
    let child_volume = dot(child.as_slice(), &xi);
    if child_volume <= DEGENERATE_MEASURE_EPS {
        return Err(AlgebraError::DegenerateChild { measure: child_volume, eps: DEGENERATE_MEASURE_EPS });
    }
    let joint: f64 = parent.0.iter().zip(&child.0).zip(&xi).map(|((p, c), x)| p * c * x).sum();
    Ok((joint / child_volume).clamp(0.0, 1.0))
}

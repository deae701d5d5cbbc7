//! A trained FUSE model: fuzzy mapper plus global volume weights, and the
//! differentiable score functions used for training and inference.

use thiserror::Error;

use crate::algebra::{self, AlgebraError, FuzzyVec, LogicSystem, VolumeWeights, DEGENERATE_MEASURE_EPS};
use crate::mapper::{self, MapperError, MapperParams};

/// Norm floor for the Euclidean rescaling inside scores.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Mapper(#[from] MapperError),

    #[error(transparent)]
    Algebra(#[from] AlgebraError),

    #[error("volume weights have dimension {weights}, mapper outputs {mapper}")]
    DimensionMismatch { weights: usize, mapper: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreOptions {
    pub logic: LogicSystem,
    /// Rescale each embedding to unit Euclidean norm before weighting.
    pub euclid_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseModel {
    pub mapper: MapperParams,
    pub weights: VolumeWeights,
    pub options: ScoreOptions,
}

impl FuseModel {
    pub fn new(mapper: MapperParams, weights: VolumeWeights, options: ScoreOptions) -> Result<Self> {
        mapper.validate()?;
        if weights.dim() != mapper.output_dim() {
            return Err(ModelError::DimensionMismatch { weights: weights.dim(), mapper: mapper.output_dim() });
        }
        Ok(Self { mapper, weights, options })
    }

    pub fn d(&self) -> usize {
        self.weights.dim()
    }

    pub fn embed(&self, x: &[f64]) -> Result<FuzzyVec> {
        Ok(mapper::map_entity(x, &self.mapper)?)
    }

    /// Membership score `ψ(y, A)`.
    pub fn psi(&self, y: &FuzzyVec, a: &FuzzyVec) -> f64 {
        psi_grad(y.as_slice(), a.as_slice(), &self.weights.effective(), self.options).value
    }

    /// Containment probability `P(parent | child)`.
    pub fn containment(&self, parent: &FuzzyVec, child: &FuzzyVec) -> Result<f64> {
        let xi = self.weights.effective();
        containment_grad(parent.as_slice(), child.as_slice(), &xi, self.options).map(|g| g.value).ok_or_else(|| {
            let t = ScoreTransform::new(child.as_slice(), self.options.euclid_norm);
            ModelError::Algebra(AlgebraError::DegenerateChild {
                measure: dot(&t.values, &xi),
                eps: DEGENERATE_MEASURE_EPS,
            })
        })
    }

    pub fn n_params(&self) -> usize {
        self.mapper.n_params() + self.weights.dim()
    }

    /// Mapper parameters followed by raw volume weights.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.mapper.flatten_into(&mut out);
        out.extend_from_slice(&self.weights.raw);
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let used = self.mapper.assign_from(flat);
        self.weights.raw.copy_from_slice(&flat[used..]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Either the identity or `u / ‖u‖`, applied inside scores only.
struct ScoreTransform {
    values: Vec<f64>,
    norm: Option<f64>,
}

impl ScoreTransform {
    fn new(u: &[f64], euclid: bool) -> Self {
        if !euclid {
            return Self { values: u.to_vec(), norm: None };
        }
        let norm = dot(u, u).sqrt().max(NORM_FLOOR);
        Self { values: u.iter().map(|v| v / norm).collect(), norm: Some(norm) }
    }

    fn backward(&self, g: Vec<f64>) -> Vec<f64> {
        match self.norm {
            None => g,
            Some(norm) => {
                let proj = dot(&self.values, &g);
                g.iter().zip(&self.values).map(|(gi, ui)| (gi - ui * proj) / norm).collect()
            }
        }
    }
}

/// The vector actually combined inside scores.
pub fn score_view(u: &[f64], euclid: bool) -> Vec<f64> {
    ScoreTransform::new(u, euclid).values
}

/// `(t-norm(a, b), ∂/∂a, ∂/∂b)`; Goedel ties send the gradient to `a`.
fn t_norm_grad(logic: LogicSystem, a: f64, b: f64) -> (f64, f64, f64) {
    match logic {
        LogicSystem::Product => (a * b, b, a),
        LogicSystem::Goedel => {
            if a <= b {
                (a, 1.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
    }
}

/// A pairwise score with gradients w.r.t. both embeddings and the effective weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub value: f64,
    pub d_first: Vec<f64>,
    pub d_second: Vec<f64>,
    pub d_weights: Vec<f64>,
}

/// `ψ(y, a) = Σ T(y_i, a_i) ξ_i`.
pub fn psi_grad(y: &[f64], a: &[f64], xi: &[f64], opts: ScoreOptions) -> PairGrad {
    let ty = ScoreTransform::new(y, opts.euclid_norm);
    let ta = ScoreTransform::new(a, opts.euclid_norm);
    let d = xi.len();
    let (mut dy, mut da, mut dxi) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut value = 0.0;
    for i in 0..d {
        let (t, gy, ga) = t_norm_grad(opts.logic, ty.values[i], ta.values[i]);
        value += t * xi[i];
        dxi[i] = t;
        dy[i] = gy * xi[i];
        da[i] = ga * xi[i];
    }
    PairGrad { value, d_first: ty.backward(dy), d_second: ta.backward(da), d_weights: dxi }
}

/// `P(parent | child) = Σ T(p_i, c_i) ξ_i / Σ c_i ξ_i`; `None` for a degenerate child.
pub fn containment_grad(parent: &[f64], child: &[f64], xi: &[f64], opts: ScoreOptions) -> Option<PairGrad> {
    let tp = ScoreTransform::new(parent, opts.euclid_norm);
    let tc = ScoreTransform::new(child, opts.euclid_norm);
    let d = xi.len();
    let denom = dot(&tc.values, xi);
    if denom <= DEGENERATE_MEASURE_EPS {
        return None;
    }
    let mut joint = 0.0;
    let mut parts = Vec::with_capacity(d);
    for i in 0..d {
        let g = t_norm_grad(opts.logic, tp.values[i], tc.values[i]);
        joint += g.0 * xi[i];
        parts.push(g);
    }
    let value = joint / denom;
    let inv = 1.0 / denom;
    let ratio_grad = joint * inv * inv;
    let (mut dp, mut dc, mut dxi) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for i in 0..d {
        let (t, gp, gc) = parts[i];
        dp[i] = gp * xi[i] * inv;
        dc[i] = gc * xi[i] * inv - ratio_grad * xi[i];
        dxi[i] = t * inv - ratio_grad * tc.values[i];
    }
    Some(PairGrad { value, d_first: tp.backward(dp), d_second: tc.backward(dc), d_weights: dxi })
}

/// Plain-algebra route to the same scores, for cross-checking.
pub fn reference_scores(parent: &FuzzyVec, child: &FuzzyVec, w: &VolumeWeights) -> (f64, Option<f64>) {
    let psi = algebra::membership_score(child, parent, w).expect("dimensions checked by caller");
    (psi, algebra::containment_probability(parent, child, w).ok())
}

//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::algebra::FuzzyVec;
use crate::mapper::{self, MapperError, MapperParams, OutputNorm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("non-finite loss {value} at coordinate {coordinate:?}")]
    NonFiniteLoss { value: f64, coordinate: Option<usize> },

    #[error("analytic gradient has {got} entries, expected {expected}")]
    GradientLength { expected: usize, got: usize },

    #[error(transparent)]
    Mapper(#[from] MapperError),

    #[error("objective evaluation failed: {0}")]
    Objective(String),
}

pub type Result<T> = std::result::Result<T, GradCheckError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Floor on `max(|analytic|, |numeric|)` in the relative error.
    pub denom_floor: f64,
    /// Check a random subset of this many coordinates when there are more;
    /// values below [`MIN_SUBSAMPLE`] are raised to it.
    pub max_coordinates: Option<usize>,
    pub seed: u64,
}

pub const MIN_SUBSAMPLE: usize = 200;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, denom_floor: 1e-8, max_coordinates: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
}

/// Value of an objective plus a signature of its piecewise regime.
///
/// Perturbations that change the signature cross a kink and are skipped.
/// Smooth objectives return an empty signature.
pub struct Evaluation {
    pub value: f64,
    pub regime: Vec<i8>,
}

impl From<f64> for Evaluation {
    fn from(value: f64) -> Self {
        Self { value, regime: Vec::new() }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn check_gradient<F>(params: &[f64], analytic: &[f64], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    if analytic.len() != params.len() {
        return Err(GradCheckError::GradientLength { expected: params.len(), got: analytic.len() });
    }
    let base = f(params)?;
    if !base.value.is_finite() {
        return Err(GradCheckError::NonFiniteLoss { value: base.value, coordinate: None });
    }
    let n = params.len();
    let coords: Vec<usize> = match opts.max_coordinates {
        Some(m) if n > m.max(MIN_SUBSAMPLE) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, n, m.max(MIN_SUBSAMPLE)).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let mut theta = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: None, checked: 0, skipped: 0 };
    for i in coords {
        let orig = theta[i];
        theta[i] = orig + opts.step;
        let plus = f(&theta)?;
        theta[i] = orig - opts.step;
        let minus = f(&theta)?;
        theta[i] = orig;
        for v in [plus.value, minus.value] {
            if !v.is_finite() {
                return Err(GradCheckError::NonFiniteLoss { value: v, coordinate: Some(i) });
            }
        }
        if plus.regime != base.regime || minus.regime != base.regime {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric, opts.denom_floor);
        report.checked += 1;
        if report.worst_coordinate.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}

/// A scalar loss of the mapper outputs for a batch, with its gradient
/// w.r.t. each output.
pub type OutputLoss<'a> = dyn Fn(&[FuzzyVec]) -> (f64, Vec<Vec<f64>>) + 'a;

fn clamp_regime(logits: &[f64]) -> impl Iterator<Item = i8> + '_ {
    logits.iter().map(|&z| {
        if z <= 0.0 {
            -1
        } else if z >= 1.0 {
            1
        } else {
            0
        }
    })
}

/// Checks the mapper's backward pass through an arbitrary output loss.
pub fn grad_check(
    params: &MapperParams,
    batch: &[Vec<f64>],
    loss: &OutputLoss<'_>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let traces = batch.iter().map(|x| mapper::forward(x, params)).collect::<std::result::Result<Vec<_>, _>>()?;
    let outputs: Vec<FuzzyVec> = traces.iter().map(|t| t.output()).collect();
    let (value, upstream) = loss(&outputs);
    if !value.is_finite() {
        return Err(GradCheckError::NonFiniteLoss { value, coordinate: None });
    }
    let mut total = mapper::GradientBundle::zeros_like(params);
    for (trace, up) in traces.iter().zip(&upstream) {
        total.accumulate(&mapper::backward(trace, params, up)?);
    }
    let mut analytic = Vec::with_capacity(params.n_params());
    total.flatten_into(&mut analytic);
    let mut flat = Vec::with_capacity(params.n_params());
    params.flatten_into(&mut flat);

    let mut scratch = params.clone();
    let clamped = params.output_norm == OutputNorm::Clamp01;
    check_gradient(
        &flat,
        &analytic,
        |theta| {
            scratch.assign_from(theta);
            let mut outputs = Vec::with_capacity(batch.len());
            let mut regime = Vec::new();
            for x in batch {
                let t = mapper::forward(x, &scratch)?;
                if clamped {
                    regime.extend(clamp_regime(t.logits()));
                }
                outputs.push(t.output());
            }
            Ok(Evaluation { value: loss(&outputs).0, regime })
        },
        opts,
    )
}

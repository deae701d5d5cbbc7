//! Simple fuzzy sets on a compact interval and their measure approximation.
//!
//! A membership function is summarised on a partition by its supremum on each
//! cell. The resulting simple fuzzy measure is the upper Darboux sum of the
//! membership function, so it bounds the true fuzzy measure from above and
//! shrinks towards it as the partition is refined. This module builds those
//! objects and measures the gap against a quadrature oracle.
//!
//! Cells are half-open `[b_i, b_{i+1})`, the last one closed, so adjacent
//! cells are disjoint. For continuous membership functions this makes no
//! difference to the supremum.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApproxError {
    #[error("universe [{lo}, {hi}] must be a finite interval with hi > lo")]
    InvalidUniverse { lo: f64, hi: f64 },

    #[error("partition needs at least one cell")]
    EmptyPartition,

    #[error("partition boundaries must be strictly increasing from lo to hi")]
    InvalidBoundaries,

    #[error("refinement factor must be at least 2, got {0}")]
    InvalidFactor(usize),

    #[error("invalid membership function: {0}")]
    InvalidFunction(String),

    #[error("membership value {value} at x = {x} is outside [0, 1]")]
    OutOfRange { x: f64, value: f64 },

    #[error("insufficient resolution: samples spaced {spacing} apart but smallest cell is {cell}")]
    InsufficientResolution { spacing: f64, cell: f64 },

    #[error("quadrature resolution must be at least {min}, got {got}")]
    ResolutionTooLow { min: usize, got: usize },

    #[error("malformed function spec '{0}'")]
    MalformedSpec(String),
}

pub type Result<T> = std::result::Result<T, ApproxError>;

/// Default number of quadrature points for [`reference_fuzzy_measure`].
pub const DEFAULT_QUADRATURE_RESOLUTION: usize = 1_000_000;
pub const MIN_QUADRATURE_RESOLUTION: usize = 1_000;
/// Default grid density for grid-based supremum search.
pub const DEFAULT_GRID_POINTS_PER_CELL: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Universe {
    lo: f64,
    hi: f64,
}

impl Universe {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(ApproxError::InvalidUniverse { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// A membership function `m: [lo, hi] -> [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum MembershipFunction {
    /// `slope * x + intercept`.
    Linear { slope: f64, intercept: f64 },
    /// `height * exp(-(x - center)^2 / scale)`.
    Gaussian { center: f64, scale: f64, height: f64 },
    /// Value `values[j]` on `[breaks[j], breaks[j+1])`; the last piece is closed.
    PiecewiseConstant { breaks: Vec<f64>, values: Vec<f64> },
    /// Piecewise-linear interpolation through `(xs[j], ys[j])`.
    Tabulated { xs: Vec<f64>, ys: Vec<f64> },
}

impl MembershipFunction {
    pub fn identity() -> Self {
        MembershipFunction::Linear { slope: 1.0, intercept: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        MembershipFunction::Linear { slope: 0.0, intercept: c }
    }

    pub fn gaussian(center: f64, scale: f64) -> Self {
        MembershipFunction::Gaussian { center, scale, height: 1.0 }
    }

    /// Whether the kind has a finite Lipschitz constant by construction.
    pub fn is_lipschitz(&self) -> bool {
        matches!(
            self,
            MembershipFunction::Linear { .. }
                | MembershipFunction::Gaussian { .. }
                | MembershipFunction::Tabulated { .. }
        )
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MembershipFunction::Linear { slope, intercept } => slope * x + intercept,
            MembershipFunction::Gaussian { center, scale, height } => {
                height * (-(x - center) * (x - center) / scale).exp()
            }
            MembershipFunction::PiecewiseConstant { breaks, values } => {
                // index of the last break <= x, clamped into range
                let j = breaks.partition_point(|&b| b <= x);
                values[j.saturating_sub(1).min(values.len() - 1)]
            }
            MembershipFunction::Tabulated { xs, ys } => {
                let j = xs.partition_point(|&b| b <= x);
                if j == 0 {
                    return ys[0];
                }
                if j >= xs.len() {
                    return ys[ys.len() - 1];
                }
                let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    /// Checks parameters and that the range stays inside `[0, 1]` on `u`.
    pub fn validate(&self, u: &Universe) -> Result<()> {
        let check = |x: f64, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(ApproxError::OutOfRange { x, value })
            }
        };
        match self {
            MembershipFunction::Linear { slope, intercept } => {
                if !(slope.is_finite() && intercept.is_finite()) {
                    return Err(ApproxError::InvalidFunction("non-finite linear coefficients".into()));
                }
                check(u.lo, self.eval(u.lo))?;
                check(u.hi, self.eval(u.hi))
            }
            MembershipFunction::Gaussian { center, scale, height } => {
                if !(center.is_finite() && scale.is_finite() && *scale > 0.0) {
                    return Err(ApproxError::InvalidFunction("gaussian needs finite center and positive scale".into()));
                }
                check(*center, *height)
            }
            MembershipFunction::PiecewiseConstant { breaks, values } => {
                if breaks.len() != values.len() + 1 || values.is_empty() {
                    return Err(ApproxError::InvalidFunction(
                        "piecewise constant needs one more break than values".into(),
                    ));
                }
                if !strictly_increasing(breaks) || breaks[0] > u.lo || breaks[breaks.len() - 1] < u.hi {
                    return Err(ApproxError::InvalidFunction(
                        "breaks must be increasing and cover the universe".into(),
                    ));
                }
                for (j, &v) in values.iter().enumerate() {
                    check(breaks[j], v)?;
                }
                Ok(())
            }
            MembershipFunction::Tabulated { xs, ys } => {
                if xs.len() != ys.len() || xs.len() < 2 {
                    return Err(ApproxError::InvalidFunction(
                        "tabulated function needs matching xs/ys with at least two samples".into(),
                    ));
                }
                if !strictly_increasing(xs) || xs[0] > u.lo || xs[xs.len() - 1] < u.hi {
                    return Err(ApproxError::InvalidFunction(
                        "sample positions must be increasing and cover the universe".into(),
                    ));
                }
                for (&x, &y) in xs.iter().zip(ys) {
                    check(x, y)?;
                }
                Ok(())
            }
        }
    }

    /// Parses `identity`, `constant:C`, `linear:SLOPE,INTERCEPT`,
    /// `gaussian:CENTER,SCALE[,HEIGHT]`, `piecewise:B0,B1,...;V0,V1,...`
    /// or `tabulated:X0,X1,...;Y0,Y1,...`.
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let malformed = || ApproxError::MalformedSpec(spec.to_string());
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split(',').map(|t| t.trim().parse::<f64>().map_err(|_| malformed())).collect()
        };
        let (kind, args) = match spec.split_once(':') {
            Some((k, a)) => (k.trim(), a.trim()),
            None => (spec.trim(), ""),
        };
        match (kind.to_ascii_lowercase().as_str(), args) {
            ("identity", "") => Ok(Self::identity()),
            ("constant", a) => match nums(a)?.as_slice() {
                [c] => Ok(Self::constant(*c)),
                _ => Err(malformed()),
            },
            ("linear", a) => match nums(a)?.as_slice() {
                [slope, intercept] => Ok(MembershipFunction::Linear { slope: *slope, intercept: *intercept }),
                _ => Err(malformed()),
            },
            ("gaussian", a) => match nums(a)?.as_slice() {
                [c, s] => Ok(Self::gaussian(*c, *s)),
                [c, s, h] => Ok(MembershipFunction::Gaussian { center: *c, scale: *s, height: *h }),
                _ => Err(malformed()),
            },
            (k @ ("piecewise" | "tabulated"), a) => {
                let (left, right) = a.split_once(';').ok_or_else(malformed)?;
                let (left, right) = (nums(left)?, nums(right)?);
                Ok(if k == "piecewise" {
                    MembershipFunction::PiecewiseConstant { breaks: left, values: right }
                } else {
                    MembershipFunction::Tabulated { xs: left, ys: right }
                })
            }
            _ => Err(malformed()),
        }
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

/// A finite partition of a universe into consecutive cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    boundaries: Vec<f64>,
    cell_lengths: Vec<f64>,
}

impl Partition {
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(ApproxError::EmptyPartition);
        }
        if !strictly_increasing(&boundaries) {
            return Err(ApproxError::InvalidBoundaries);
        }
        let cell_lengths = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { boundaries, cell_lengths })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn cell_lengths(&self) -> &[f64] {
        &self.cell_lengths
    }

    pub fn n_cells(&self) -> usize {
        self.cell_lengths.len()
    }

    pub fn cell(&self, i: usize) -> (f64, f64) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    pub fn min_cell_length(&self) -> f64 {
        self.cell_lengths.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn universe(&self) -> Universe {
        Universe { lo: self.boundaries[0], hi: self.boundaries[self.boundaries.len() - 1] }
    }

    /// Index of the cell containing `x`.
    pub fn locate(&self, x: f64) -> usize {
        let j = self.boundaries.partition_point(|&b| b <= x);
        j.saturating_sub(1).min(self.n_cells() - 1)
    }
}

pub fn build_uniform_partition(u: &Universe, n: usize) -> Result<Partition> {
    if n == 0 {
        return Err(ApproxError::EmptyPartition);
    }
    let width = u.length();
    let mut boundaries: Vec<f64> = (0..=n).map(|i| u.lo + width * (i as f64) / (n as f64)).collect();
    boundaries[0] = u.lo;
    boundaries[n] = u.hi;
    Partition::from_boundaries(boundaries)
}

/// Splits every cell into `factor` equal sub-cells.
pub fn refine(p: &Partition, factor: usize) -> Result<Partition> {
    if factor < 2 {
        return Err(ApproxError::InvalidFactor(factor));
    }
    let mut boundaries = Vec::with_capacity(p.n_cells() * factor + 1);
    for i in 0..p.n_cells() {
        let (a, b) = p.cell(i);
        boundaries.push(a);
        for k in 1..factor {
            boundaries.push(a + (b - a) * (k as f64) / (factor as f64));
        }
    }
    boundaries.push(p.boundaries[p.boundaries.len() - 1]);
    Partition::from_boundaries(boundaries)
}

/// How per-cell suprema are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupremumMethod {
    /// Closed-form per function kind.
    #[default]
    Analytic,
    /// Dense grid followed by golden-section refinement around the best point.
    Grid { points_per_cell: usize },
}

/// A partition with the supremum of the membership function on every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleFuzzySet {
    pub partition: Partition,
    pub sup_values: Vec<f64>,
}

impl SimpleFuzzySet {
    /// Value of the simple membership function at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.sup_values[self.partition.locate(x)]
    }
}

pub fn project(m: &MembershipFunction, p: &Partition) -> Result<SimpleFuzzySet> {
    project_with(m, p, SupremumMethod::Analytic)
}

pub fn project_with(m: &MembershipFunction, p: &Partition, method: SupremumMethod) -> Result<SimpleFuzzySet> {
    m.validate(&p.universe())?;
    if let MembershipFunction::Tabulated { xs, .. } = m {
        let spacing = xs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        let cell = p.min_cell_length();
        if spacing > cell {
            return Err(ApproxError::InsufficientResolution { spacing, cell });
        }
    }
    let sup_values = (0..p.n_cells())
        .map(|i| {
            let (a, b) = p.cell(i);
            let s = match method {
                SupremumMethod::Analytic => analytic_sup(m, a, b),
                SupremumMethod::Grid { points_per_cell } => grid_sup(m, a, b, points_per_cell.max(2)),
            };
            s.clamp(0.0, 1.0)
        })
        .collect();
    Ok(SimpleFuzzySet { partition: p.clone(), sup_values })
}

fn analytic_sup(m: &MembershipFunction, a: f64, b: f64) -> f64 {
    match m {
        MembershipFunction::Linear { .. } => m.eval(a).max(m.eval(b)),
        MembershipFunction::Gaussian { center, height, .. } => {
            if (a..=b).contains(center) {
                *height
            } else {
                m.eval(a).max(m.eval(b))
            }
        }
        MembershipFunction::PiecewiseConstant { breaks, values } => values
            .iter()
            .enumerate()
            .filter(|(j, _)| breaks[*j] < b && breaks[j + 1] > a)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max),
        MembershipFunction::Tabulated { xs, .. } => {
            // piecewise linear: maximum sits at a knot or a cell endpoint
            xs.iter()
                .copied()
                .filter(|&x| x > a && x < b)
                .chain([a, b])
                .map(|x| m.eval(x))
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

fn grid_sup(m: &MembershipFunction, a: f64, b: f64, points: usize) -> f64 {
    let step = (b - a) / ((points - 1) as f64);
    let (best_k, best) = (0..points)
        .map(|k| (k, m.eval(a + step * k as f64)))
        .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    // golden-section search on the bracket around the best grid point
    let mut lo = a + step * best_k.saturating_sub(1) as f64;
    let mut hi = (a + step * (best_k + 1) as f64).min(b);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut best = best;
    for _ in 0..60 {
        let x1 = hi - ratio * (hi - lo);
        let x2 = lo + ratio * (hi - lo);
        let (f1, f2) = (m.eval(x1), m.eval(x2));
        best = best.max(f1).max(f2);
        if f1 >= f2 {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    best
}

/// Simple fuzzy measure under Lebesgue length: the upper Darboux sum.
pub fn simple_fuzzy_measure(s: &SimpleFuzzySet) -> f64 {
    compensated_sum(s.sup_values.iter().zip(s.partition.cell_lengths()).map(|(v, len)| v * len))
}

/// Neumaier summation; a million plain additions drift by ~1e-11.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

/// Composite midpoint rule for `∫ m dx` over `u`.
///
/// Error is `O(resolution^-2)` for smooth `m`.
pub fn reference_fuzzy_measure(m: &MembershipFunction, u: &Universe, resolution: usize) -> Result<f64> {
    if resolution < MIN_QUADRATURE_RESOLUTION {
        return Err(ApproxError::ResolutionTooLow { min: MIN_QUADRATURE_RESOLUTION, got: resolution });
    }
    m.validate(u)?;
    let h = u.length() / resolution as f64;
    Ok(h * compensated_sum((0..resolution).map(|k| m.eval(u.lo + h * (k as f64 + 0.5)))))
}

/// Composite trapezoid rule, used to cross-check the midpoint oracle.
pub fn trapezoid_fuzzy_measure(m: &MembershipFunction, u: &Universe, resolution: usize) -> Result<f64> {
    if resolution < MIN_QUADRATURE_RESOLUTION {
        return Err(ApproxError::ResolutionTooLow { min: MIN_QUADRATURE_RESOLUTION, got: resolution });
    }
    m.validate(u)?;
    let h = u.length() / resolution as f64;
    let inner = compensated_sum((1..resolution).map(|k| m.eval(u.lo + h * k as f64)));
    Ok(h * (inner + 0.5 * (m.eval(u.lo) + m.eval(u.hi))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub p_mu: f64,
    pub p_ref: f64,
    pub gap: f64,
    /// `gap(n) / gap(previous n)`; absent on the first row or after a zero gap.
    pub ratio_to_prev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub function: MembershipFunction,
    pub universe: Universe,
    pub rows: Vec<ConvergenceRow>,
}

/// Gap below which the over-estimation check fails.
pub const GAP_SLACK: f64 = -1e-9;
/// Accepted band for `gap(2n) / gap(n)` once `n >= RATE_MIN_N`.
pub const RATE_BAND: (f64, f64) = (0.4, 0.6);
/// Gaps at or below this are rounding noise and get no ratio.
pub const RATIO_GAP_FLOOR: f64 = 1e-12;
pub const RATE_MIN_N: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum ConvergenceViolation {
    NegativeGap { n: usize, gap: f64 },
    RateOutOfBand { n: usize, ratio: f64 },
}

impl ConvergenceReport {
    pub fn gaps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gap).collect()
    }

    /// Over-estimation and, for Lipschitz kinds, the halving rate.
    pub fn violations(&self) -> Vec<ConvergenceViolation> {
        let mut out = Vec::new();
        for r in &self.rows {
            if r.gap <= GAP_SLACK {
                out.push(ConvergenceViolation::NegativeGap { n: r.n, gap: r.gap });
            }
        }
        if self.function.is_lipschitz() {
            for w in self.rows.windows(2) {
                let (prev, cur) = (&w[0], &w[1]);
                if prev.n >= RATE_MIN_N && cur.n == 2 * prev.n {
                    if let Some(ratio) = cur.ratio_to_prev {
                        if !(RATE_BAND.0..=RATE_BAND.1).contains(&ratio) {
                            out.push(ConvergenceViolation::RateOutOfBand { n: cur.n, ratio });
                        }
                    }
                }
            }
        }
        out
    }

    /// TSV with header `n p_mu p_ref gap ratio_to_prev`; missing ratios print as `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("n\tp_mu\tp_ref\tgap\tratio_to_prev\n");
        for r in &self.rows {
            let ratio = r.ratio_to_prev.map_or_else(|| "NA".to_string(), |x| x.to_string());
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.n, r.p_mu, r.p_ref, r.gap, ratio);
        }
        out
    }
}

pub fn convergence_study(
    m: &MembershipFunction,
    u: &Universe,
    ns: &[usize],
    resolution: usize,
) -> Result<ConvergenceReport> {
    if ns.is_empty() || ns.contains(&0) || !ns.windows(2).all(|w| w[0] < w[1]) {
        return Err(ApproxError::InvalidFunction("partition counts must be positive and strictly increasing".into()));
    }
    let p_ref = reference_fuzzy_measure(m, u, resolution)?;
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(ns.len());
    for &n in ns {
        let p_mu = simple_fuzzy_measure(&project(m, &build_uniform_partition(u, n)?)?);
        let gap = p_mu - p_ref;
        let ratio_to_prev = rows.last().and_then(|prev| (prev.gap.abs() > RATIO_GAP_FLOOR).then(|| gap / prev.gap));
        rows.push(ConvergenceRow { n, p_mu, p_ref, gap, ratio_to_prev });
    }
    Ok(ConvergenceReport { function: m.clone(), universe: *u, rows })
}

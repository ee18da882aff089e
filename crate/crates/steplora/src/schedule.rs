//! Noise schedules, the forward diffusion kernel, and timestep-interval
//! arithmetic.
//!
//! Timesteps are 1-based integers in `[1, T]`. A partition of `[1, T]` into
//! `n` intervals assigns timestep `t` to interval `ceil(t * n / T)`; interval
//! `i` covers `[floor((i-1) * T / n) + 1, floor(i * T / n)]`. Both sides are
//! exact integer arithmetic and mutually consistent for every `t`, including
//! when `n` does not divide `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Cumulative signal-retention coefficients over `T` discrete timesteps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    timesteps: usize,
    kind: ScheduleKind,
    /// alpha_bar[t-1] for t in 1..=T, strictly decreasing.
    alpha_bar: Vec<f64>,
    /// beta[t-1] = 1 - alpha_bar[t] / alpha_bar[t-1].
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidArg(format!(
                "schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArg(format!(
                "linear schedule needs 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let t_max = (timesteps - 1) as f64;
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / t_max)
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let s = Self {
            timesteps,
            kind: ScheduleKind::Linear,
            alpha_bar,
            betas,
        };
        s.validate()?;
        Ok(s)
    }

    /// Squared-cosine profile, beta clamped at 0.999 near the noisy end.
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidArg(format!(
                "schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        let s = 0.008;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(timesteps);
        let mut prev = 1.0;
        for t in 1..=timesteps {
            let ab = f(t as f64 / timesteps as f64) / f0;
            let beta = (1.0 - ab / prev).min(0.999);
            betas.push(beta);
            prev = ab;
        }
        // rebuild alpha_bar from the clamped betas so the pair stays consistent
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sched = Self {
            timesteps,
            kind: ScheduleKind::Cosine,
            alpha_bar,
            betas,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn make(timesteps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(timesteps, beta_min, beta_max),
            ScheduleKind::Cosine => Self::cosine(timesteps),
        }
    }

    fn validate(&self) -> Result<()> {
        for w in self.alpha_bar.windows(2) {
            if w[1].is_nan() || w[0].is_nan() || w[1] >= w[0] {
                return Err(Error::InvalidArg(
                    "alpha_bar must be strictly decreasing".into(),
                ));
            }
        }
        if self.alpha_bar.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::InvalidArg("alpha_bar must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                lo: 1,
                hi: self.timesteps as i64,
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// alpha_bar at t-1, with the t = 1 convention alpha_bar(0) = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(if t == 1 { 1.0 } else { self.alpha_bar[t - 2] })
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }
}

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps, elementwise.
pub fn forward_diffuse(
    x0: &Matrix,
    t: usize,
    eps: &Matrix,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    let ab = sched.alpha_bar(t)?;
    diffuse_with_alpha_bar(x0, ab, eps)
}

/// Batched kernel: column `s` of `x0`/`eps` is diffused to timestep `ts[s]`.
pub fn forward_diffuse_batch(
    x0: &Matrix,
    ts: &[usize],
    eps: &Matrix,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    if ts.len() != x0.cols() {
        return Err(Error::InvalidArg(format!(
            "timestep list length {} does not match batch {}",
            ts.len(),
            x0.cols()
        )));
    }
    if x0.rows() != eps.rows() || x0.cols() != eps.cols() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            lhs_rows: x0.rows(),
            lhs_cols: x0.cols(),
            rhs_rows: eps.rows(),
            rhs_cols: eps.cols(),
        });
    }
    let mut out = Matrix::zeros(x0.rows(), x0.cols());
    for (s, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (sig, noi) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..x0.rows() {
            out.set(i, s, sig * x0.get(i, s) + noi * eps.get(i, s));
        }
    }
    Ok(out)
}

fn diffuse_with_alpha_bar(x0: &Matrix, alpha_bar: f64, eps: &Matrix) -> Result<Matrix> {
    if x0.rows() != eps.rows() || x0.cols() != eps.cols() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            lhs_rows: x0.rows(),
            lhs_cols: x0.cols(),
            rhs_rows: eps.rows(),
            rhs_cols: eps.cols(),
        });
    }
    x0.scale(alpha_bar.sqrt()).add(&eps.scale((1.0 - alpha_bar).sqrt()))
}

/// A uniform division of `[1, T]` into `n` contiguous intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalPartition {
    timesteps: usize,
    intervals: usize,
}

impl IntervalPartition {
    pub fn new(timesteps: usize, intervals: usize) -> Result<Self> {
        if timesteps < 1 {
            return Err(Error::InvalidArg("timestep count must be >= 1".into()));
        }
        if intervals < 1 || intervals > timesteps {
            return Err(Error::OutOfRange {
                what: "interval count",
                value: intervals as i64,
                lo: 1,
                hi: timesteps as i64,
            });
        }
        Ok(Self {
            timesteps,
            intervals,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Interval id of timestep `t`: `ceil(t * n / T)`, in `[1, n]`.
    pub fn index_of(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.timesteps {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                lo: 1,
                hi: self.timesteps as i64,
            });
        }
        Ok((t * self.intervals).div_ceil(self.timesteps))
    }

    /// Inclusive timestep bounds of interval `i`.
    pub fn bounds(&self, i: usize) -> Result<(usize, usize)> {
        if i < 1 || i > self.intervals {
            return Err(Error::OutOfRange {
                what: "interval id",
                value: i as i64,
                lo: 1,
                hi: self.intervals as i64,
            });
        }
        let lo = (i - 1) * self.timesteps / self.intervals + 1;
        let hi = i * self.timesteps / self.intervals;
        Ok((lo, hi))
    }
}

/// Interval counts for several simultaneous partitions, strictly decreasing.
/// The first (largest) scale is the finest partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSet {
    scales: Vec<usize>,
}

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArg("scale set must not be empty".into()));
        }
        for w in scales.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::InvalidArg(format!(
                    "scales must be strictly decreasing, got {scales:?}"
                )));
            }
        }
        if scales[scales.len() - 1] < 1 {
            return Err(Error::InvalidArg("scales must be >= 1".into()));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The finest partition: the scale whose intervals are smallest.
    pub fn core_scale(&self) -> usize {
        self.scales[0]
    }

    /// Coarser partitions, in declaration order.
    pub fn context_scales(&self) -> &[usize] {
        &self.scales[1..]
    }

    pub fn contains(&self, n: usize) -> bool {
        self.scales.contains(&n)
    }

    /// Interval id of `t` under every scale, in declaration order.
    pub fn indices_of(&self, t: usize, timesteps: usize) -> Result<Vec<usize>> {
        self.scales
            .iter()
            .map(|&n| IntervalPartition::new(timesteps, n)?.index_of(t))
            .collect()
    }
}

impl TryFrom<Vec<usize>> for ScaleSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        ScaleSet::new(v)
    }
}

impl From<ScaleSet> for Vec<usize> {
    fn from(s: ScaleSet) -> Vec<usize> {
        s.scales
    }
}

/// Exhaustive consistency check of one partition: every `t` lands in exactly
/// one interval, intervals tile `[1, T]` contiguously, sizes differ by at
/// most one, and `index_of` agrees with membership from `bounds`.
///
/// This is the independent oracle the index rule is tested against.
pub fn verify_partition_exhaustively(timesteps: usize, intervals: usize) -> Result<()> {
    let p = IntervalPartition::new(timesteps, intervals)?;
    let mut next_expected_lo = 1usize;
    let (min_size, max_size) = (timesteps / intervals, timesteps.div_ceil(intervals));
    for i in 1..=intervals {
        let (lo, hi) = p.bounds(i)?;
        if lo != next_expected_lo {
            return Err(Error::InvariantViolation(format!(
                "interval {i} of (T={timesteps}, n={intervals}) starts at {lo}, expected {next_expected_lo}"
            )));
        }
        let size = hi + 1 - lo;
        if size < min_size || size > max_size {
            return Err(Error::InvariantViolation(format!(
                "interval {i} of (T={timesteps}, n={intervals}) has size {size}, expected {min_size} or {max_size}"
            )));
        }
        for t in lo..=hi {
            if p.index_of(t)? != i {
                return Err(Error::InvariantViolation(format!(
                    "t={t} in bounds of interval {i} but index_of says {}",
                    p.index_of(t)?
                )));
            }
        }
        next_expected_lo = hi + 1;
    }
    if next_expected_lo != timesteps + 1 {
        return Err(Error::InvariantViolation(format!(
            "partition (T={timesteps}, n={intervals}) ends at {} instead of {timesteps}",
            next_expected_lo - 1
        )));
    }
    Ok(())
}

//! Point and interval metrics for RUL predictions, and kernel density
//! summaries of uncertainty values.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cmapss::UnitFeatures;
use crate::ensemble::{last_step_view, step_view, EnsembleModel, EnsemblePredictor, StepSummary};
use crate::math;
use crate::{Error, Result};

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::InvalidArgument(format!(
            "need matching nonempty inputs, got {a} and {b}"
        )));
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(predictions.len(), targets.len())?;
    let sse: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(math::sqrt(sse / predictions.len() as f64))
}

/// Sum of `exp(−d/a1) − 1` over `d < 0` and `exp(d/a2) − 1` over `d ≥ 0`,
/// with `d = prediction − target`.
pub fn nasa_score(predictions: &[f64], targets: &[f64], a1: f64, a2: f64) -> Result<f64> {
    check_pair(predictions.len(), targets.len())?;
    if !(a1 > 0.0 && a2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "score constants must be positive, got {a1} and {a2}"
        )));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let d = p - y;
            if d < 0.0 {
                libm::expm1(-d / a1)
            } else {
                libm::expm1(d / a2)
            }
        })
        .sum())
}

/// Which constant goes with which sign of the error in [`nasa_score`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreConvention {
    /// `a1 = 10` for early predictions, `a2 = 13` for late ones.
    #[default]
    Paper,
    /// The benchmark's usual form: `13` for early, `10` for late, so late
    /// predictions cost more.
    Classic,
}

impl ScoreConvention {
    /// `(a1, a2)`.
    pub fn constants(self) -> (f64, f64) {
        match self {
            ScoreConvention::Paper => (10.0, 13.0),
            ScoreConvention::Classic => (13.0, 10.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreConvention::Paper => "paper",
            ScoreConvention::Classic => "classic",
        }
    }

    pub fn score(self, predictions: &[f64], targets: &[f64]) -> Result<f64> {
        let (a1, a2) = self.constants();
        nasa_score(predictions, targets, a1, a2)
    }
}

/// Standard normal quantile function.
///
/// Acklam's rational approximation (relative error below 1.2e-9) followed by
/// one Halley step against `erfc`, which brings it to near machine precision.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {p} is outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail(math::sqrt(-2.0 * math::ln(p)))
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(math::sqrt(-2.0 * libm::log1p(-p)))
    };

    // Halley refinement; the residual is taken on the smaller tail to avoid
    // cancellation near 1.
    let (e, sign) = if x <= 0.0 {
        (0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p, 1.0)
    } else {
        (0.5 * libm::erfc(x / core::f64::consts::SQRT_2) - (1.0 - p), -1.0)
    };
    let u = sign * e * math::sqrt(2.0 * core::f64::consts::PI) * math::exp(0.5 * x * x);
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Closed prediction interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

/// Central Gaussian interval `μ ± z·σ` with `z = Φ⁻¹((1 + alpha) / 2)`.
pub fn interval_bounds(mu: f64, var: f64, alpha: f64) -> Result<Interval> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::InvalidArgument(format!("variance {var} is not positive")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {alpha} is outside (0, 1)")));
    }
    let half = normal_quantile(0.5 * (1.0 + alpha))? * math::sqrt(var);
    Ok(Interval {
        lower: mu - half,
        upper: mu + half,
    })
}

/// Fraction of targets inside their interval, ends included.
pub fn picp(bounds: &[Interval], targets: &[f64]) -> Result<f64> {
    check_pair(bounds.len(), targets.len())?;
    let hits = bounds.iter().zip(targets).filter(|(b, y)| b.contains(**y)).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Mean interval width divided by the range of the targets.
pub fn nmpiw(bounds: &[Interval], targets: &[f64]) -> Result<f64> {
    check_pair(bounds.len(), targets.len())?;
    let (lo, hi) = targets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Degenerate(
            "targets are constant, so the width normalizer is zero".to_string(),
        ));
    }
    let mean_width = bounds.iter().map(Interval::width).sum::<f64>() / bounds.len() as f64;
    Ok(mean_width / range)
}

/// Kernel density estimate sampled on an evenly spaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }
}

pub const DEFAULT_KDE_GRID: usize = 512;

/// Gaussian-kernel density estimate with Silverman's bandwidth
/// `1.06·σ̂·N^(−1/5)` (σ̂ the sample standard deviation), evaluated on
/// `grid_size` points spanning `[min − 4h, max + 4h]`.
pub fn kde(values: &[f64], grid_size: usize) -> Result<DensityCurve> {
    if values.len() < 2 {
        return Err(Error::Degenerate(format!(
            "density estimation needs at least 2 values, got {}",
            values.len()
        )));
    }
    if grid_size < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 points".to_string()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density sample".to_string()));
    }
    let n = values.len() as f64;
    let (_, pop_var) = math::mean_and_population_variance(values.iter().copied());
    let sd = math::sqrt(pop_var * n / (n - 1.0));
    if !(sd > 0.0) || values.iter().all(|&v| v == values[0]) {
        return Err(Error::Degenerate("all values are equal".to_string()));
    }
    let h = 1.06 * sd * libm::pow(n, -0.2);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (start, end) = (lo - 4.0 * h, hi + 4.0 * h);
    let step = (end - start) / (grid_size - 1) as f64;
    let norm = 1.0 / (n * h * math::sqrt(2.0 * core::f64::consts::PI));
    let grid: Vec<f64> = (0..grid_size).map(|i| start + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| {
                    let z = (x - v) / h;
                    math::exp(-0.5 * z * z)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Confidence level of the prediction intervals.
    pub alpha: f64,
    pub score_convention: ScoreConvention,
    /// Score only the last recorded cycle of each unit. When false every
    /// cycle is scored against the unit's reconstructed true RUL.
    pub last_step_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            score_convention: ScoreConvention::Paper,
            last_step_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub alpha: f64,
    pub rmse: f64,
    pub score: f64,
    pub score_convention: ScoreConvention,
    pub picp: f64,
    /// Absent when all scored targets are equal, e.g. a single unit.
    pub nmpiw: Option<f64>,
    pub last_step_only: bool,
}

impl MetricReport {
    /// Computes every metric for the given predictions.
    pub fn compute(
        mu: &[f64],
        var: &[f64],
        targets: &[f64],
        config: &EvalConfig,
    ) -> Result<(Self, Vec<Interval>)> {
        check_pair(mu.len(), targets.len())?;
        check_pair(var.len(), targets.len())?;
        let bounds = mu
            .iter()
            .zip(var)
            .map(|(&m, &v)| interval_bounds(m, v, config.alpha))
            .collect::<Result<Vec<_>>>()?;
        let report = Self {
            n: targets.len(),
            alpha: config.alpha,
            rmse: rmse(mu, targets)?,
            score: config.score_convention.score(mu, targets)?,
            score_convention: config.score_convention,
            picp: picp(&bounds, targets)?,
            nmpiw: match nmpiw(&bounds, targets) {
                Ok(v) => Some(v),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            },
            last_step_only: config.last_step_only,
        };
        Ok((report, bounds))
    }
}

/// One scored prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitPrediction {
    pub unit_id: u32,
    /// 1-based cycle the prediction refers to.
    pub cycle: u32,
    pub true_rul: f64,
    pub summary: StepSummary,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestEvaluation {
    pub report: MetricReport,
    pub predictions: Vec<UnitPrediction>,
}

/// Runs the ensemble on each unit's full history and scores μ* and the
/// `alpha` intervals against the true RUL. The interval width normalizer is
/// the range of the scored true RULs.
pub fn evaluate_on_test(
    model: &EnsembleModel,
    test_units: &[UnitFeatures],
    config: &EvalConfig,
) -> Result<TestEvaluation> {
    if test_units.is_empty() {
        return Err(Error::InvalidArgument("no test units".to_string()));
    }
    let mut predictor = EnsemblePredictor::new(model);
    let mut scored: Vec<(u32, u32, f64, StepSummary)> = Vec::new();
    for unit in test_units {
        let truth = unit.true_rul_trace().ok_or_else(|| {
            Error::InvalidArgument(format!("test unit {} has no true RUL", unit.unit_id))
        })?;
        let pred = predictor.predict(&unit.values)?;
        if config.last_step_only {
            scored.push((unit.unit_id, unit.len() as u32, truth[truth.len() - 1], last_step_view(&pred)?));
        } else {
            for (t, &y) in truth.iter().enumerate() {
                scored.push((unit.unit_id, t as u32 + 1, y, step_view(&pred, t)?));
            }
        }
    }
    let mu: Vec<f64> = scored.iter().map(|s| s.3.mu_star).collect();
    let var: Vec<f64> = scored.iter().map(|s| s.3.var_star).collect();
    let targets: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let (report, bounds) = MetricReport::compute(&mu, &var, &targets, config)?;
    let predictions = scored
        .into_iter()
        .zip(bounds)
        .map(|((unit_id, cycle, true_rul, summary), interval)| UnitPrediction {
            unit_id,
            cycle,
            true_rul,
            summary,
            interval,
        })
        .collect();
    Ok(TestEvaluation { report, predictions })
}

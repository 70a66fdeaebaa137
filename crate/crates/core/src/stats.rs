//! Per-epoch statistics, trend correlation and accuracy densities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of grid points a density curve is evaluated on.
pub const DENSITY_GRID_POINTS: usize = 513;
/// Lower bound for automatic bandwidths, so near-identical samples still
/// give a finite, resolvable curve on the grid.
pub const MIN_BANDWIDTH: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("non-finite value in input")]
    NonFinite,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson product-moment correlation, computed on centered data.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    assert_eq!(xs.len(), ys.len(), "pearson needs paired samples");
    let n = xs.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between epoch index and per-epoch mean accuracy.
pub fn trend_correlation(series: &[(f64, f64)]) -> Result<f64, StatsError> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = series.iter().copied().unzip();
    pearson(&xs, &ys)
}

/// Quantile with linear interpolation between order statistics
/// (the default in R and NumPy).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Silverman's rule of thumb, `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
/// Falls back to `1.06 * sd * n^(-1/5)` when the IQR is zero, and never
/// returns less than [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints(n));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = sample_sd(&sorted);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let scale = (n as f64).powf(-0.2);
    let mut bw = 0.9 * sd.min(iqr / 1.34) * scale;
    if bw <= 0.0 {
        bw = 1.06 * sd * scale;
    }
    Ok(bw.max(MIN_BANDWIDTH))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoid-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    pub fn mode(&self) -> f64 {
        let (i, _) = self.density.iter().enumerate().fold((0, f64::MIN), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        self.grid[i]
    }

    /// Two whitespace-separated columns: grid point, density.
    pub fn to_columns(&self) -> String {
        let mut out = String::new();
        for (x, d) in self.grid.iter().zip(&self.density) {
            writeln!(out, "{x:.6} {d:.9}").unwrap();
        }
        out
    }
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum()
}

pub fn unit_grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}

/// Gaussian kernel density of accuracies on a uniform grid over [0, 1].
///
/// Kernel mass falling outside [0, 1] is not reflected back; instead the
/// curve is rescaled so its trapezoid integral over the grid is 1.
pub fn accuracy_density(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityCurve, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewPoints(samples.len()));
    }
    let bw = match bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(StatsError::Bandwidth(b)),
        None => silverman_bandwidth(samples)?,
    };
    let grid = unit_grid(DENSITY_GRID_POINTS);
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| samples.iter().map(|&s| (-0.5 * ((x - s) / bw).powi(2)).exp()).sum::<f64>() * norm)
        .collect();
    let mass = trapezoid(&grid, &density);
    if !mass.is_finite() || mass <= 0.0 {
        return Err(StatsError::NonFinite);
    }
    for d in &mut density {
        *d /= mass;
    }
    Ok(DensityCurve { grid, density, bandwidth: bw })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch_index: u32,
    pub n_generated: usize,
    pub n_valid: usize,
    pub n_admitted: usize,
    /// Over valid candidates; `None` when there are none.
    pub mean_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    /// Accuracies of valid candidates, in slot order.
    pub accuracies: Vec<f64>,
}

impl EpochStats {
    pub fn from_accuracies(epoch_index: u32, n_generated: usize, accuracies: Vec<f64>, threshold: f64) -> Self {
        let n_admitted = accuracies.iter().filter(|&&a| a > threshold).count();
        let (mean_accuracy, max_accuracy) = if accuracies.is_empty() {
            (None, None)
        } else {
            (Some(mean(&accuracies)), Some(accuracies.iter().copied().fold(f64::MIN, f64::max)))
        };
        EpochStats { epoch_index, n_generated, n_valid: accuracies.len(), n_admitted, mean_accuracy, max_accuracy, accuracies }
    }
}

pub const STATS_HEADER: &str = "epoch,n_generated,n_valid,n_admitted,mean_accuracy,max_accuracy";

/// Comma-separated stats table, one row per epoch. Missing means and maxima
/// are empty cells.
pub fn stats_csv(stats: &[EpochStats]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = format!("{STATS_HEADER}\n");
    for s in stats {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.epoch_index,
            s.n_generated,
            s.n_valid,
            s.n_admitted,
            cell(s.mean_accuracy),
            cell(s.max_accuracy)
        )
        .unwrap();
    }
    out
}

/// Indices of the first and last third of `n` epochs (at least one each).
pub fn early_late_split(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let third = (n / 3).max(1).min(n);
    (0..third, n - third..n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub epochs: usize,
    pub total_generated: usize,
    pub total_valid: usize,
    pub total_admitted: usize,
    /// Over (epoch index, epoch mean), epochs without valid candidates skipped.
    pub r_epoch_means: Option<f64>,
    /// Over (epoch index, accuracy) for every valid candidate.
    pub r_all_candidates: Option<f64>,
    pub early_density: Option<DensityCurve>,
    pub late_density: Option<DensityCurve>,
}

pub fn loop_report(stats: &[EpochStats]) -> LoopReport {
    let means: Vec<(f64, f64)> =
        stats.iter().filter_map(|s| s.mean_accuracy.map(|m| (s.epoch_index as f64, m))).collect();
    let all: Vec<(f64, f64)> =
        stats.iter().flat_map(|s| s.accuracies.iter().map(move |&a| (s.epoch_index as f64, a))).collect();
    let (early, late) = early_late_split(stats.len());
    let pooled = |r: std::ops::Range<usize>| -> Vec<f64> { stats[r].iter().flat_map(|s| s.accuracies.clone()).collect() };
    LoopReport {
        epochs: stats.len(),
        total_generated: stats.iter().map(|s| s.n_generated).sum(),
        total_valid: stats.iter().map(|s| s.n_valid).sum(),
        total_admitted: stats.iter().map(|s| s.n_admitted).sum(),
        r_epoch_means: trend_correlation(&means).ok(),
        r_all_candidates: trend_correlation(&all).ok(),
        early_density: if stats.is_empty() { None } else { accuracy_density(&pooled(early), None).ok() },
        late_density: if stats.is_empty() { None } else { accuracy_density(&pooled(late), None).ok() },
    }
}

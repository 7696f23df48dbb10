//! Point and interval accuracy metrics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("{preds} predictions but {truths} truths")]
    Length { preds: usize, truths: usize },
    #[error("truth {value} at index {index} is not positive")]
    NonPositiveTruth { index: usize, value: f64 },
    #[error("interval {index} is crossed: [{lower}, {upper}]")]
    Crossed { index: usize, lower: f64, upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalMetrics {
    /// Percent of truths inside their closed interval.
    pub picp: f64,
    pub iw: f64,
}

fn check(n: usize, m: usize) -> Result<(), MetricsError> {
    if n != m {
        return Err(MetricsError::Length { preds: n, truths: m });
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn point_metrics(preds: &[f64], truths: &[f64]) -> Result<PointMetrics, MetricsError> {
    check(preds.len(), truths.len())?;
    if let Some((index, &value)) = truths.iter().enumerate().find(|(_, &y)| !(y > 0.0)) {
        return Err(MetricsError::NonPositiveTruth { index, value });
    }
    let n = preds.len() as f64;
    let (mut se, mut ae, mut ape) = (0.0, 0.0, 0.0);
    for (&p, &y) in preds.iter().zip(truths) {
        let d = p - y;
        se += d * d;
        ae += d.abs();
        ape += d.abs() / y;
    }
    Ok(PointMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape: 100.0 * ape / n,
    })
}

pub fn interval_metrics(intervals: &[(f64, f64)], truths: &[f64]) -> Result<IntervalMetrics, MetricsError> {
    check(intervals.len(), truths.len())?;
    if let Some((index, &(lower, upper))) = intervals.iter().enumerate().find(|(_, (l, u))| !(u >= l)) {
        return Err(MetricsError::Crossed { index, lower, upper });
    }
    let n = intervals.len() as f64;
    let covered = intervals
        .iter()
        .zip(truths)
        .filter(|(&(l, u), &y)| l <= y && y <= u)
        .count();
    Ok(IntervalMetrics {
        picp: 100.0 * covered as f64 / n,
        iw: intervals.iter().map(|(l, u)| u - l).sum::<f64>() / n,
    })
}

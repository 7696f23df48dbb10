//! Distribution-free scaling of predicted intervals.
//!
//! Intervals `[y_hat - lambda * sigma_l, y_hat + lambda * sigma_u]` grow with
//! `lambda`, so the miscoverage rate falls monotonically. The calibrator
//! picks the smallest grid `lambda` whose Hoeffding upper bound on that rate
//! stays below `alpha`; with probability at least `1 - delta` over the draw
//! of the calibration set, the true miscoverage is then at most `alpha`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uqmoe::IntervalEstimate;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("empty calibration set")]
    Empty,
    #[error("{estimates} estimates but {truths} truths")]
    Length { estimates: usize, truths: usize },
    #[error("{name} must lie in (0, 1), got {value}")]
    Level { name: &'static str, value: f64 },
    #[error("empirical loss must lie in [0, 1], got {0}")]
    Loss(f64),
    #[error("grid must start at 0 and increase strictly")]
    Grid,
    #[error("alpha {alpha} is unattainable with {m} calibration points; the minimum achievable alpha is {min_alpha}")]
    Infeasible { alpha: f64, m: usize, min_alpha: f64 },
    #[error("no lambda up to {cap} meets alpha {alpha}; {uncovered} points stay uncovered")]
    CapReached { cap: f64, alpha: f64, uncovered: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;

pub const LAMBDA_CAP: f64 = 1e6;

/// `[calibration]` section of the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub alpha: f64,
    pub delta: f64,
    pub grid_max: f64,
    pub grid_step: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { alpha: 0.1, delta: 0.1, grid_max: 4.0, grid_step: 0.01 }
    }
}

impl CalibConfig {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.grid_step > 0.0) || !(self.grid_max > 0.0) {
            return Err(CalibError::Grid);
        }
        let n = ((self.grid_max / self.grid_step).round() as usize).max(1);
        Ok((0..=n).map(|i| i as f64 * self.grid_max / n as f64).collect())
    }
}

/// `0, 0.01, ..., 4`.
pub fn default_grid() -> Vec<f64> {
    CalibConfig::default().grid().expect("default grid is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub lambda: f64,
    pub emp_loss: f64,
    pub ucb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lambda_hat: f64,
    pub alpha: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(skip)]
    pub risk_curve: Vec<RiskPoint>,
}

impl CalibrationResult {
    pub fn write_risk_curve<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lambda,emp_loss,ucb")?;
        for p in &self.risk_curve {
            writeln!(w, "{},{},{}", p.lambda, p.emp_loss, p.ucb)?;
        }
        Ok(())
    }
}

fn check_pairs(est: &[IntervalEstimate], truths: &[f64]) -> Result<()> {
    if est.len() != truths.len() {
        return Err(CalibError::Length { estimates: est.len(), truths: truths.len() });
    }
    if est.is_empty() {
        return Err(CalibError::Empty);
    }
    Ok(())
}

fn check_level(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(CalibError::Level { name, value })
    }
}

/// Whether `y` lies in the closed scaled interval.
pub fn covers(e: &IntervalEstimate, y: f64, lambda: f64) -> bool {
    e.y_hat - lambda * e.sigma_l <= y && y <= e.y_hat + lambda * e.sigma_u
}

fn uncovered(est: &[IntervalEstimate], truths: &[f64], lambda: f64) -> usize {
    est.iter().zip(truths).filter(|(e, &y)| !covers(e, y, lambda)).count()
}

/// Fraction of truths outside their scaled intervals.
pub fn coverage_loss(est: &[IntervalEstimate], truths: &[f64], lambda: f64) -> Result<f64> {
    check_pairs(est, truths)?;
    Ok(uncovered(est, truths, lambda) as f64 / est.len() as f64)
}

pub fn hoeffding_slack(m: usize, delta: f64) -> f64 {
    ((1.0 / delta).ln() / (2.0 * m as f64)).sqrt()
}

pub fn hoeffding_ucb(emp_loss: f64, m: usize, delta: f64) -> Result<f64> {
    if m == 0 {
        return Err(CalibError::Empty);
    }
    check_level("delta", delta)?;
    if !(0.0..=1.0).contains(&emp_loss) {
        return Err(CalibError::Loss(emp_loss));
    }
    Ok(emp_loss + hoeffding_slack(m, delta))
}

/// Smallest grid `lambda` such that the bound is at most `alpha` there and
/// at every larger grid point. The grid doubles its range while the largest
/// point still leaves truths uncovered, up to [`LAMBDA_CAP`].
pub fn fit_lambda(
    est: &[IntervalEstimate],
    truths: &[f64],
    alpha: f64,
    delta: f64,
    grid: &[f64],
) -> Result<CalibrationResult> {
    check_pairs(est, truths)?;
    check_level("alpha", alpha)?;
    check_level("delta", delta)?;
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CalibError::Grid);
    }
    let m = est.len();
    let slack = hoeffding_slack(m, delta);
    if alpha <= slack {
        return Err(CalibError::Infeasible { alpha, m, min_alpha: slack });
    }

    let mut grid = grid.to_vec();
    let per_round = grid.len() - 1;
    loop {
        let top = *grid.last().unwrap();
        if uncovered(est, truths, top) == 0 || top >= LAMBDA_CAP {
            break;
        }
        let next_top = if top > 0.0 { (2.0 * top).min(LAMBDA_CAP) } else { 1.0 };
        let steps = per_round.max(1);
        grid.extend((1..=steps).map(|i| top + (next_top - top) * i as f64 / steps as f64));
    }

    let curve: Vec<RiskPoint> = grid
        .par_iter()
        .map(|&lambda| {
            let emp_loss = uncovered(est, truths, lambda) as f64 / m as f64;
            RiskPoint { lambda, emp_loss, ucb: emp_loss + slack }
        })
        .collect();
    let mut pick = None;
    for (i, p) in curve.iter().enumerate().rev() {
        if p.ucb <= alpha {
            pick = Some(i);
        } else {
            break;
        }
    }
    let Some(i) = pick else {
        let top = *grid.last().unwrap();
        return Err(CalibError::CapReached { cap: top, alpha, uncovered: uncovered(est, truths, top) });
    };
    Ok(CalibrationResult {
        lambda_hat: curve[i].lambda,
        alpha,
        delta,
        m,
        risk_curve: curve,
    })
}

/// `(y_hat - lambda_hat * sigma_l, y_hat + lambda_hat * sigma_u)`.
pub fn apply_calibration(e: &IntervalEstimate, result: &CalibrationResult) -> (f64, f64) {
    apply_lambda(e, result.lambda_hat)
}

pub fn apply_lambda(e: &IntervalEstimate, lambda: f64) -> (f64, f64) {
    (e.y_hat - lambda * e.sigma_l, e.y_hat + lambda * e.sigma_u)
}

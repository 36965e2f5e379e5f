//! Timing and work-count probes for the cost model.

use std::time::Instant;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Field, GridShape, GridState, PhysicalParams, Stepper};
use crate::scan::{parallel_scan_with_stats, ScanElement, ScanStats};
use crate::spectral::certified_bound_local;

/// Median wall time in seconds of `steps` driven sequential steps on a
/// grid with uniform, stable parameters.
pub fn time_sequential(shape: &GridShape<f64>, steps: usize, repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::Precondition("repeats must be at least 1".into()));
    }
    let c = 0.5 * certified_bound_local(0.5, 0.5, shape.dt, shape.dx);
    let params = PhysicalParams::uniform(shape, c, 0.5, 0.5);
    let stepper = Stepper::new(*shape, &params, BoundaryCondition::ZeroPad)?;
    let drive = Field::from_fn(shape.height, shape.width, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut state = GridState::zeros(shape);
        let t0 = Instant::now();
        for _ in 0..steps {
            stepper.advance(&mut state, Some(&drive))?;
        }
        std::hint::black_box(&state);
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(times[repeats / 2])
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Precondition("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Precondition("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Work counters of one scan over `steps` elements of dimension `dim`.
pub fn scan_work(steps: usize, dim: usize) -> Result<ScanStats> {
    let el = ScanElement::new(vec![Complex::new(0.9, 0.1); dim], vec![Complex::new(1.0, 0.0); dim])?;
    let elements = vec![el; steps];
    parallel_scan_with_stats::<f64>(&elements).map(|(_, s)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn combine_count_within_twice_the_length() {
        for t in [1, 2, 3, 100, 257, 1024] {
            assert!(scan_work(t, 3).unwrap().combines <= 2 * t);
        }
    }
}

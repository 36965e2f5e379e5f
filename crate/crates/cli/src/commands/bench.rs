use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use biooss::experiments::bench::{loglog_slope, scan_work, time_sequential};
use biooss::grid::GridShape;

use crate::config::CommandConfig;
use crate::error::CliResult;
use crate::output::Run;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub run_id: String,
    /// Grid side for the time-vs-T sweep.
    pub side: usize,
    pub dx: f64,
    pub dt: f64,
    pub steps: Vec<usize>,
    /// Grid sides for the time-vs-HW sweep, at `size_steps` steps.
    pub sides: Vec<usize>,
    pub size_steps: usize,
    pub repeats: usize,
    /// Lengths for the scan combine count.
    pub scan_steps: Vec<usize>,
    pub scan_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            run_id: "bench".into(),
            side: 32,
            dx: 1.0,
            dt: 0.01,
            steps: vec![256, 512, 1024, 2048],
            sides: vec![8, 16, 32, 64],
            size_steps: 256,
            repeats: 5,
            scan_steps: vec![64, 256, 1024, 2048],
            scan_dim: 3,
        }
    }
}

impl CommandConfig for BenchConfig {
    fn check(&self) -> Result<(), String> {
        if self.repeats == 0 {
            return Err("repeats must be at least 1".into());
        }
        Ok(())
    }
}

pub fn run(cfg: &BenchConfig, run: &mut Run) -> CliResult<serde_json::Value> {
    let shape = GridShape::new(cfg.side, cfg.side, cfg.dx, cfg.dt)?;
    let empty = time_sequential(&shape, 0, cfg.repeats)?;
    let mut w = run.create(&format!("{}_time_vs_steps.csv", cfg.run_id))?;
    writeln!(w, "steps,seconds")?;
    let mut ts = Vec::new();
    for &t in &cfg.steps {
        let s = time_sequential(&shape, t, cfg.repeats)?;
        writeln!(w, "{t},{s:e}")?;
        ts.push(s);
    }
    w.flush()?;
    let mut w = run.create(&format!("{}_time_vs_cells.csv", cfg.run_id))?;
    writeln!(w, "cells,seconds")?;
    let mut cs = Vec::new();
    for &side in &cfg.sides {
        let s = time_sequential(&GridShape::new(side, side, cfg.dx, cfg.dt)?, cfg.size_steps, cfg.repeats)?;
        writeln!(w, "{},{s:e}", side * side)?;
        cs.push(s);
    }
    w.flush()?;
    let mut w = run.create(&format!("{}_scan_work.csv", cfg.run_id))?;
    writeln!(w, "steps,combines,levels,bound_2t")?;
    let mut scan_ok = true;
    for &t in &cfg.scan_steps {
        let st = scan_work(t, cfg.scan_dim)?;
        scan_ok &= st.combines <= 2 * t;
        writeln!(w, "{t},{},{},{}", st.combines, st.levels, 2 * t)?;
    }
    w.flush()?;
    let slope = |xs: &[usize], ys: &[f64]| {
        let xs: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        loglog_slope(&xs, ys).ok()
    };
    let cells: Vec<usize> = cfg.sides.iter().map(|s| s * s).collect();
    Ok(json!({
        "slope_vs_steps": slope(&cfg.steps, &ts),
        "slope_vs_cells": slope(&cells, &cs),
        "empty_run_seconds": empty,
        "scan_combines_within_2t": scan_ok,
    }))
}

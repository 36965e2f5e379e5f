use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use biooss::experiments::banded_noise_values;
use biooss::experiments::BandedNoiseSpec;
use biooss::grid::{simulate, write_snapshot, Field, FieldName, GridShape, GridState};
use biooss::model::Engine;
use biooss::scan::{run_recurrence_scan, DiagonalizedSystem};

use super::common::*;
use crate::config::CommandConfig;
use crate::error::{CliError, CliResult};
use crate::output::Run;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    None,
    /// Unit pulse on the first step.
    #[default]
    Impulse,
    Sine,
    BandedNoise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPattern {
    /// One cell, `at` (grid centre when unset).
    #[default]
    Point,
    Uniform,
    Checkerboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveSection {
    pub signal: SignalKind,
    pub pattern: SpatialPattern,
    pub at: Option<(usize, usize)>,
    pub amplitude: f64,
    /// Sine frequency.
    pub frequency: f64,
    /// Noise band.
    pub band: (f64, f64),
}

impl Default for DriveSection {
    fn default() -> Self {
        DriveSection {
            signal: SignalKind::Impulse,
            pattern: SpatialPattern::Point,
            at: None,
            amplitude: 1.0,
            frequency: 5.0,
            band: (0.0, 10.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub run_id: String,
    pub grid: GridSection,
    pub params: ParamsSection,
    pub band_plan: Option<BandPlanSection>,
    pub steps: usize,
    pub record_every: usize,
    /// Any of `p`, `ox`, `oy`.
    pub fields: Vec<String>,
    pub engine: Engine,
    pub seed: u64,
    pub drive: DriveSection,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            run_id: "sim".into(),
            grid: GridSection::default(),
            params: ParamsSection::default(),
            band_plan: None,
            steps: 100,
            record_every: 10,
            fields: vec!["p".into()],
            engine: Engine::Sequential,
            seed: 0,
            drive: DriveSection::default(),
        }
    }
}

impl CommandConfig for SimulateConfig {
    fn seed_override(seed: u64) -> Option<(&'static str, toml::Value)> {
        Some(("seed", toml::Value::Integer(seed as i64)))
    }

    fn engine_key() -> Option<&'static str> {
        Some("engine")
    }

    fn check(&self) -> Result<(), String> {
        if self.steps == 0 {
            return Err("steps must be at least 1".into());
        }
        if self.record_every == 0 {
            return Err("record_every must be at least 1".into());
        }
        for f in &self.fields {
            FieldName::parse(f).map_err(|e| e.to_string())?;
        }
        if let Some((i, j)) = self.drive.at {
            if i >= self.grid.height || j >= self.grid.width {
                return Err(format!("drive.at ({i}, {j}) is outside the grid"));
            }
        }
        Ok(())
    }
}

fn signal(cfg: &SimulateConfig) -> CliResult<Vec<f64>> {
    let d = &cfg.drive;
    let n = cfg.steps;
    let dt = cfg.grid.dt;
    Ok(match d.signal {
        SignalKind::None => vec![0.0; n],
        SignalKind::Impulse => (0..n).map(|t| if t == 0 { d.amplitude } else { 0.0 }).collect(),
        SignalKind::Sine => {
            (0..n).map(|t| d.amplitude * (std::f64::consts::TAU * d.frequency * t as f64 * dt).sin()).collect()
        }
        SignalKind::BandedNoise => banded_noise_values(&BandedNoiseSpec {
            band: d.band,
            steps: n,
            dt,
            seed: cfg.seed,
            amplitude: d.amplitude,
        })?,
    })
}

fn pattern(cfg: &SimulateConfig, shape: &GridShape<f64>) -> Field<f64> {
    let (h, w) = (shape.height, shape.width);
    let at = cfg.drive.at.unwrap_or((h / 2, w / 2));
    Field::from_fn(h, w, |i, j| match cfg.drive.pattern {
        SpatialPattern::Point => f64::from(u8::from((i, j) == at)),
        SpatialPattern::Uniform => 1.0,
        SpatialPattern::Checkerboard => {
            if (i + j) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    })
}

pub fn run(cfg: &SimulateConfig, run: &mut Run, strict: bool) -> CliResult<serde_json::Value> {
    let shape = cfg.grid.shape()?;
    let (params, inits) = build_params(&shape, &cfg.params, cfg.band_plan.as_ref())?;
    let report = stability(&params, &shape);
    if !report.is_stable() {
        let name = format!("{}_stability_report.json", cfg.run_id);
        run.write_json(&name, &report_json(&report))?;
        let msg = format!(
            "{} cell(s) violate the stability condition (worst |lambda| = {}); report in {}",
            report.violations.len(),
            report.worst_eig_magnitude,
            run.path(&name).display()
        );
        if strict {
            return Err(CliError::Stability(msg));
        }
        eprintln!("warning: {msg}");
    }
    let sig = signal(cfg)?;
    let pat = pattern(cfg, &shape);
    let drives: Vec<Field<f64>> = sig.iter().map(|&s| pat.map(|w| w * s)).collect();
    let x0 = GridState::zeros(&shape);

    let frames: Vec<(usize, GridState<f64>)> = match cfg.engine {
        Engine::Sequential => simulate(&x0, &params, &drives, &shape, cfg.grid.bc, cfg.record_every)?
            .into_iter()
            .map(|f| (f.step, f.state))
            .collect(),
        Engine::Scan => {
            if !params.is_uniform() {
                return Err(CliError::Config("the scan engine needs uniform parameters".into()));
            }
            let sys = DiagonalizedSystem::from_params(&params, &shape, cfg.grid.bc)?;
            let states = run_recurrence_scan(&sys, &drives, &x0, false)?.states;
            states
                .into_iter()
                .enumerate()
                .filter(|(t, _)| (t + 1) % cfg.record_every == 0 || t + 1 == cfg.steps)
                .map(|(t, s)| (t + 1, s))
                .collect()
        }
    };

    let mut norms = run.create(&format!("{}_norms.csv", cfg.run_id))?;
    writeln!(norms, "step,norm")?;
    for (step, s) in &frames {
        writeln!(norms, "{step},{:e}", s.norm())?;
    }
    norms.flush()?;
    for (step, s) in &frames {
        for f in &cfg.fields {
            let name = FieldName::parse(f)?;
            let field = match name {
                FieldName::P => &s.p,
                FieldName::Ox => &s.ox,
                FieldName::Oy => &s.oy,
            };
            let mut w = run.create(&format!("{}_{f}_t{step:06}.csv", cfg.run_id))?;
            write_snapshot(&mut w, name, field, *step)?;
            w.flush()?;
        }
    }
    let last = frames.last().map(|(_, s)| s.norm()).unwrap_or(0.0);
    Ok(json!({
        "frames": frames.len(),
        "final_norm": last,
        "stable": report.is_stable(),
        "worst_eig_magnitude": report.worst_eig_magnitude,
        "band_inits": inits_json(&inits),
    }))
}

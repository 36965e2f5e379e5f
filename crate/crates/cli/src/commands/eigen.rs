use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use biooss::experiments::heatmap;
use biooss::spectral::{eigen_report, frequency_map, write_eigen_csv, FourierMode, FrequencyModel, ReferenceMode, SymbolModel};

use super::common::*;
use crate::config::CommandConfig;
use crate::error::{CliError, CliResult};
use crate::output::Run;

/// A named mode or an explicit `[xi_x, xi_y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeChoice {
    Named(String),
    Custom([f64; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenConfig {
    pub run_id: String,
    pub grid: GridSection,
    pub params: ParamsSection,
    pub band_plan: Option<BandPlanSection>,
    /// `dc`, `reference`, `fundamental`, `nyquist_diagonal`, `rms`, or `[xi_x, xi_y]`.
    pub modes: Vec<ModeChoice>,
    /// Mode used for the frequency heatmap; defaults to the band plan's.
    pub reference: Option<ReferenceMode>,
    pub symbol_model: SymbolModel,
    pub frequency_model: FrequencyModel,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            run_id: "eigen".into(),
            grid: GridSection::default(),
            params: ParamsSection::default(),
            band_plan: None,
            modes: vec![ModeChoice::Named("dc".into()), ModeChoice::Named("reference".into())],
            reference: None,
            symbol_model: SymbolModel::Stencil,
            frequency_model: FrequencyModel::Stepper,
        }
    }
}

impl EigenConfig {
    fn reference(&self) -> ReferenceMode {
        self.reference
            .or(self.band_plan.as_ref().map(|b| b.reference))
            .unwrap_or(ReferenceMode::NyquistDiagonal)
    }
}

impl CommandConfig for EigenConfig {
    fn check(&self) -> Result<(), String> {
        for m in &self.modes {
            if let ModeChoice::Named(n) = m {
                if !["dc", "reference", "fundamental", "nyquist_diagonal", "rms"].contains(&n.as_str()) {
                    return Err(format!("unknown mode {n:?}"));
                }
            }
        }
        Ok(())
    }
}

pub fn run(cfg: &EigenConfig, run: &mut Run, strict: bool) -> CliResult<serde_json::Value> {
    let shape = cfg.grid.shape()?;
    let (params, inits) = build_params(&shape, &cfg.params, cfg.band_plan.as_ref())?;
    let modes: Vec<FourierMode<f64>> = cfg
        .modes
        .iter()
        .map(|m| match m {
            ModeChoice::Custom([x, y]) => FourierMode::new(*x, *y),
            ModeChoice::Named(n) => match n.as_str() {
                "dc" => FourierMode::new(0.0, 0.0),
                "reference" => cfg.reference().resolve(&shape),
                "fundamental" => ReferenceMode::Fundamental.resolve(&shape),
                "rms" => ReferenceMode::Rms.resolve(&shape),
                _ => ReferenceMode::NyquistDiagonal.resolve(&shape),
            },
        })
        .collect();
    let rows = eigen_report(&params, &shape, &modes, cfg.symbol_model, cfg.frequency_model);
    let mut w = run.create(&format!("{}_eigen.csv", cfg.run_id))?;
    write_eigen_csv(&mut w, &rows)?;
    w.flush()?;

    let reference = cfg.reference().resolve(&shape);
    let fmap = frequency_map(&params, &shape, &reference, cfg.frequency_model);
    let mut w = run.create(&format!("{}_frequency.csv", cfg.run_id))?;
    writeln!(w, "i,j,f")?;
    for i in 0..shape.height {
        for j in 0..shape.width {
            writeln!(w, "{i},{j},{}", fmap.get(i, j))?;
        }
    }
    w.flush()?;
    let mut w = run.create(&format!("{}_frequency.pgm", cfg.run_id))?;
    heatmap::write_pgm(&mut w, &fmap, None)?;
    w.flush()?;
    let w = run.create(&format!("{}_frequency.png", cfg.run_id))?;
    heatmap::write_png(w, &fmap, None)?;

    let report = stability(&params, &shape);
    let report_value = report_json(&report);
    run.write_json(&format!("{}_stability_report.json", cfg.run_id), &report_value)?;
    if strict && !report.is_stable() {
        return Err(CliError::Stability(format!(
            "{} cell(s) violate the stability condition (worst |lambda| = {})",
            report.violations.len(),
            report.worst_eig_magnitude
        )));
    }
    let mut plateaus: Vec<f64> = fmap.as_slice().to_vec();
    plateaus.sort_by(|a, b| a.total_cmp(b));
    plateaus.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
    let max_mag = rows.iter().map(|r| r.lambda2.norm()).fold(0.0, f64::max);
    Ok(json!({
        "rows": rows.len(),
        "max_row_magnitude": max_mag,
        "stable": report.is_stable(),
        "worst_eig_magnitude": report.worst_eig_magnitude,
        "frequency_plateaus": if plateaus.len() <= 16 { json!(plateaus) } else { json!(plateaus.len()) },
        "band_inits": inits_json(&inits),
    }))
}

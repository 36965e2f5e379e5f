use serde::{Deserialize, Serialize};
use serde_json::json;

use biooss::experiments::{assess_sweep, band_sweep, quadrant_experiment, write_quadrant_outputs, QuadrantConfig};

use crate::config::CommandConfig;
use crate::error::CliResult;
use crate::output::Run;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrantFile {
    pub run_id: String,
    /// Required in-band share of each quadrant's interior.
    pub threshold: f64,
    /// Extra input bands to run, each judged for saturation.
    pub sweep: Vec<(f64, f64)>,
    pub quadrant: QuadrantConfig,
}

impl Default for QuadrantFile {
    fn default() -> Self {
        QuadrantFile { run_id: "quadrant".into(), threshold: 0.9, sweep: Vec::new(), quadrant: QuadrantConfig::default() }
    }
}

impl CommandConfig for QuadrantFile {
    fn seed_override(seed: u64) -> Option<(&'static str, toml::Value)> {
        Some(("quadrant.seed", toml::Value::Integer(seed as i64)))
    }

    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }
}

fn band_tag(b: (f64, f64)) -> String {
    format!("{}-{}", b.0, b.1)
}

pub fn run(cfg: &QuadrantFile, run: &mut Run) -> CliResult<serde_json::Value> {
    let main = quadrant_experiment(&cfg.quadrant)?;
    for p in write_quadrant_outputs(&run.dir, &cfg.run_id, &main)? {
        run.record(&p);
    }
    let row = assess_sweep(&main, cfg.threshold);
    let mut sweep = Vec::new();
    for (r, s) in band_sweep(&cfg.quadrant, &cfg.sweep, cfg.threshold)? {
        let id = format!("{}_input{}", cfg.run_id, band_tag(r.config.input_band));
        for p in write_quadrant_outputs(&run.dir, &id, &r)? {
            run.record(&p);
        }
        sweep.push(s);
    }
    let passes = main.passes(cfg.threshold);
    let increasing = main.means_increasing();
    Ok(json!({
        "passes_threshold": passes,
        "means_increasing": increasing,
        "bin_width": main.bin_width,
        "quadrants": main.quadrants,
        "main_assessment": row,
        "sweep": sweep,
        "sweep_ok": sweep.iter().all(|s| s.ok()),
    }))
}

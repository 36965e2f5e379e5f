use serde::{Deserialize, Serialize};

use biooss::grid::{BoundaryCondition, GridShape, PhysicalParams};
use biooss::model::{BandPlan, QUADRANT_BANDS};
use biooss::spectral::{check_stability, BandInit, FrequencyModel, ReferenceMode, StabilityReport, SymbolModel};
use serde_json::{json, Value};

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub height: usize,
    pub width: usize,
    pub dx: f64,
    pub dt: f64,
    pub bc: BoundaryCondition,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { height: 16, width: 16, dx: 1.0, dt: 0.01, bc: BoundaryCondition::ZeroPad }
    }
}

impl GridSection {
    pub fn shape(&self) -> CliResult<GridShape<f64>> {
        Ok(GridShape::new(self.height, self.width, self.dx, self.dt)?)
    }
}

/// Uniform `(c, kp, ko)`; cells covered by a band plan are overwritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsSection {
    pub c: f64,
    pub kp: f64,
    pub ko: f64,
}

impl Default for ParamsSection {
    fn default() -> Self {
        ParamsSection { c: 20.0, kp: 0.5, ko: 0.5 }
    }
}

/// Four-quadrant band plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandPlanSection {
    pub bands: [(f64, f64); 4],
    pub damping: (f64, f64),
    pub reference: ReferenceMode,
    pub frequency_model: FrequencyModel,
}

impl Default for BandPlanSection {
    fn default() -> Self {
        BandPlanSection {
            bands: QUADRANT_BANDS,
            damping: (1.0, 1.0),
            reference: ReferenceMode::NyquistDiagonal,
            frequency_model: FrequencyModel::Stepper,
        }
    }
}

impl BandPlanSection {
    pub fn plan(&self, shape: &GridShape<f64>) -> BandPlan {
        let mut plan = BandPlan::quadrants(shape, self.bands, self.damping);
        plan.reference = self.reference;
        plan.frequency_model = self.frequency_model;
        plan
    }
}

pub fn build_params(
    shape: &GridShape<f64>,
    params: &ParamsSection,
    band_plan: Option<&BandPlanSection>,
) -> CliResult<(PhysicalParams<f64>, Vec<BandInit<f64>>)> {
    let mut p = PhysicalParams::uniform(shape, params.c, params.kp, params.ko);
    let inits = match band_plan {
        Some(bp) => bp.plan(shape).apply(&mut p, shape)?,
        None => Vec::new(),
    };
    p.validate(shape)?;
    Ok((p, inits))
}

pub fn inits_json(inits: &[BandInit<f64>]) -> Value {
    Value::Array(
        inits.iter().map(|b| json!({ "c": b.c, "frequency": b.frequency, "clamped": b.clamped })).collect(),
    )
}

/// At most this many violations are listed in a report dump.
const REPORT_LIMIT: usize = 100;

pub fn report_json(r: &StabilityReport<f64>) -> Value {
    let min_bound = r.max_c_allowed.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    json!({
        "stable": r.is_stable(),
        "worst_eig_magnitude": r.worst_eig_magnitude,
        "violation_count": r.violations.len(),
        "min_max_c_allowed": min_bound,
        "violations": r.violations.iter().take(REPORT_LIMIT).map(|v| json!({
            "i": v.i, "j": v.j, "c": v.c, "c_max": v.c_max, "magnitude": v.magnitude,
        })).collect::<Vec<_>>(),
    })
}

pub fn stability(params: &PhysicalParams<f64>, shape: &GridShape<f64>) -> StabilityReport<f64> {
    check_stability(params, shape, SymbolModel::Stencil)
}

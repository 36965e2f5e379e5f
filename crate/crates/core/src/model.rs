//! Multi-layer network built on the wave grid.
//!
//! Per layer and time step: drive `B u`, one grid step, gated mix of the
//! layer state with the previous layer's state at the same step, readout
//! `y = C h + D u`, GELU, then a GLU with a residual connection. The last
//! layer's GELU output is pooled over time and mapped by `W_out, b_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Field, GridShape, GridState, PhysicalParams, Stepper};
use crate::rng::stream;
use crate::scan::{run_recurrence_scan, DiagonalizedSystem};
use crate::spectral::{
    certified_bound_local, check_stability, init_for_band, BandInit, FrequencyModel, ReferenceMode, SymbolModel,
};

/// Largest grid a layer may use; the gating matrices are `(3HW)^2`.
pub const MODEL_CELL_LIMIT: usize = 1024;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn check_vec(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "{what}: {}x{} matrix applied to a vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(())
    }

    /// `A x`. Panics on length mismatch; see [`Matrix::try_matvec`].
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|row| dot(row, x)).collect()
    }

    pub fn try_matvec(&self, x: &[f64], what: &str) -> Result<Vec<f64>> {
        self.check_vec(x, what)?;
        Ok(self.matvec(x))
    }

    /// `A^T y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    /// `A += a b^T`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact GELU, `x Phi(x)` with `Phi(x) = (1 + erf(x / sqrt 2)) / 2`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Phi(x) + x phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `sigmoid(W1 x) * (W2 x)` elementwise.
pub fn glu(x: &[f64], w1: &Matrix, w2: &Matrix) -> Result<Vec<f64>> {
    let a = w1.try_matvec(x, "glu W1")?;
    let b = w2.try_matvec(x, "glu W2")?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!("glu: W1 has {} rows, W2 has {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(&b).map(|(&s, &v)| sigmoid(s) * v).collect())
}

/// `g * tanh(Wz x) + (1 - g) * x_prev` with `g = sigmoid(Wg x)`.
pub fn gated_update(x: &[f64], x_prev: &[f64], wz: &Matrix, wg: &Matrix) -> Result<Vec<f64>> {
    let z = wz.try_matvec(x, "gate Wz")?;
    let s = wg.try_matvec(x, "gate Wg")?;
    if z.len() != x_prev.len() || s.len() != x_prev.len() {
        return Err(Error::Shape(format!(
            "gate: outputs of length {} and {} against a previous state of length {}",
            z.len(),
            s.len(),
            x_prev.len()
        )));
    }
    Ok(z
        .iter()
        .zip(&s)
        .zip(x_prev)
        .map(|((&z, &s), &xp)| {
            let g = sigmoid(s);
            g * z.tanh() + (1.0 - g) * xp
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Sequential,
    Scan,
}

/// `Linear` replaces gate, GELU and GLU by identities: `h = x`, `a = y`,
/// `u_next = y + u`. The whole network is then linear in its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Full,
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    LastStep,
    #[default]
    MeanOverTime,
    /// No pooling: one output vector per step.
    PerStep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeSemantics {
    /// Steps are `dt` time units apart.
    Physical { dt: f64 },
    /// Steps are plain indices.
    #[default]
    Index,
}

/// `T x m` input or output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub values: Vec<Vec<f64>>,
    pub dt_semantics: TimeSemantics,
}

impl Sequence {
    pub fn new(values: Vec<Vec<f64>>, dt_semantics: TimeSemantics) -> Result<Self> {
        let s = Sequence { values, dt_semantics };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.values.first().ok_or_else(|| Error::Shape("sequence must have at least one step".into()))?.len();
        for (t, row) in self.values.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Shape(format!("step {t} has {} channels, expected {m}", row.len())));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step: Some(t), field: "input".into() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }
}

/// Affine input projection applied before the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// `HW x m`.
    pub b: Matrix,
    /// `3HW x 3HW`.
    pub wz: Matrix,
    pub wg: Matrix,
    /// `m x 3HW`.
    pub c: Matrix,
    /// `m x m`.
    pub d: Matrix,
    pub glu_w1: Matrix,
    pub glu_w2: Matrix,
    pub params: PhysicalParams<f64>,
    pub shape: GridShape<f64>,
    pub bc: BoundaryCondition,
    /// Skip the stability check.
    pub allow_unstable: bool,
}

impl LayerSpec {
    pub fn width(&self) -> usize {
        self.d.rows
    }

    pub fn state_len(&self) -> usize {
        3 * self.shape.cells()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let n = self.shape.cells();
        if n > MODEL_CELL_LIMIT {
            return Err(Error::TooLarge { cells: n, limit: MODEL_CELL_LIMIT });
        }
        self.params.validate(&self.shape)?;
        let m = self.d.rows;
        let s = 3 * n;
        for (name, mat, r, c) in [
            ("B", &self.b, n, m),
            ("Wz", &self.wz, s, s),
            ("Wg", &self.wg, s, s),
            ("C", &self.c, m, s),
            ("D", &self.d, m, m),
            ("glu_W1", &self.glu_w1, m, m),
            ("glu_W2", &self.glu_w2, m, m),
        ] {
            if mat.rows != r || mat.cols != c || mat.data.len() != r * c {
                return Err(Error::Shape(format!("{name} is {}x{}, expected {r}x{c}", mat.rows, mat.cols)));
            }
            if !mat.is_finite() {
                return Err(Error::NonFinite { step: None, field: name.into() });
            }
        }
        if !self.allow_unstable {
            let report = check_stability(&self.params, &self.shape, SymbolModel::Stencil);
            if !report.is_stable() {
                return Err(Error::Unstable {
                    count: report.violations.len(),
                    worst: report.worst_eig_magnitude,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub encoder: Option<Encoder>,
    pub layers: Vec<LayerSpec>,
    /// `K x m`.
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    pub pooling: Pooling,
    pub head: HeadMode,
}

impl ModelSpec {
    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.width())
    }

    pub fn input_channels(&self) -> usize {
        self.encoder.as_ref().map_or(self.width(), |e| e.w.cols)
    }

    pub fn outputs(&self) -> usize {
        self.w_out.rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        let m = self.width();
        let s = self.layers[0].state_len();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| match e {
                Error::Shape(msg) => Error::Shape(format!("layer {l}: {msg}")),
                e => e,
            })?;
            if layer.width() != m {
                return Err(Error::Shape(format!("layer {l} has width {}, layer 0 has {m}", layer.width())));
            }
            if layer.state_len() != s {
                return Err(Error::Shape(format!("layer {l} state length {} differs from {s}", layer.state_len())));
            }
        }
        if let Some(enc) = &self.encoder {
            if enc.w.rows != m || enc.b.len() != m {
                return Err(Error::Shape(format!("encoder maps to {} channels, layers expect {m}", enc.w.rows)));
            }
        }
        if self.w_out.cols != m || self.b_out.len() != self.w_out.rows {
            return Err(Error::Shape(format!(
                "output map is {}x{} with bias {}, expected ?x{m}",
                self.w_out.rows,
                self.w_out.cols,
                self.b_out.len()
            )));
        }
        Ok(())
    }
}

/// Everything a layer computed, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    pub inputs: Vec<Vec<f64>>,
    /// Grid state `[p, ox, oy]` after each step.
    pub states: Vec<Vec<f64>>,
    /// `sigmoid(Wg x)`; empty for the linear head.
    pub gate: Vec<Vec<f64>>,
    /// `tanh(Wz x)`; empty for the linear head.
    pub cand: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    /// Readout before GELU.
    pub y: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    /// `sigmoid(W1 a)` and `W2 a`; empty for the linear head.
    pub glu_s: Vec<Vec<f64>>,
    pub glu_v: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

fn with_layer(l: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { step, field } => Error::NonFinite { step, field: format!("layer {l}: {field}") },
        e => e,
    }
}

/// Grid states of one layer driven by `B u_t`, from a zero start.
pub fn layer_states(layer: &LayerSpec, inputs: &[Vec<f64>], engine: Engine) -> Result<Vec<Vec<f64>>> {
    let shape = layer.shape;
    let drives: Vec<Field<f64>> = inputs
        .iter()
        .map(|u| Field::from_vec(shape.height, shape.width, layer.b.try_matvec(u, "B")?))
        .collect::<Result<_>>()?;
    match engine {
        Engine::Sequential => {
            let stepper = Stepper::new(shape, &layer.params, layer.bc)?;
            let mut state = GridState::zeros(&shape);
            let mut out = Vec::with_capacity(drives.len());
            for (t, d) in drives.iter().enumerate() {
                stepper.advance(&mut state, Some(d)).map_err(|e| match e {
                    Error::NonFinite { field, .. } => Error::NonFinite { step: Some(t + 1), field },
                    e => e,
                })?;
                let v = state.to_vec();
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { step: Some(t + 1), field: "state".into() });
                }
                out.push(v);
            }
            Ok(out)
        }
        Engine::Scan => {
            if !layer.params.is_uniform() {
                return Err(Error::Unsupported("the scan engine needs spatially uniform parameters".into()));
            }
            let sys = DiagonalizedSystem::from_params(&layer.params, &shape, layer.bc)?;
            let run = run_recurrence_scan(&sys, &drives, &GridState::zeros(&shape), false)?;
            let mut out = Vec::with_capacity(run.states.len());
            for (t, s) in run.states.iter().enumerate() {
                let v = s.to_vec();
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { step: Some(t + 1), field: "state".into() });
                }
                out.push(v);
            }
            Ok(out)
        }
    }
}

/// One layer with its head. `prev` holds the previous layer's states
/// (`None` for the first layer, which mixes against zero).
pub fn layer_trace(
    layer: &LayerSpec,
    inputs: &[Vec<f64>],
    prev: Option<&[Vec<f64>]>,
    engine: Engine,
    head: HeadMode,
) -> Result<LayerTrace> {
    let states = layer_states(layer, inputs, engine)?;
    let n = states.len();
    let zero = vec![0.0; layer.state_len()];
    let mut tr = LayerTrace { inputs: inputs.to_vec(), ..Default::default() };
    for t in 0..n {
        let x = &states[t];
        let u = &inputs[t];
        let h = match head {
            HeadMode::Full => {
                let xp = prev.map_or(&zero, |p| &p[t]);
                let g: Vec<f64> = layer.wg.matvec(x).into_iter().map(sigmoid).collect();
                let th: Vec<f64> = layer.wz.matvec(x).into_iter().map(f64::tanh).collect();
                let h = g.iter().zip(&th).zip(xp).map(|((&g, &z), &p)| g * z + (1.0 - g) * p).collect();
                tr.gate.push(g);
                tr.cand.push(th);
                h
            }
            HeadMode::Linear => x.clone(),
        };
        let cu = layer.c.matvec(&h);
        let du = layer.d.matvec(u);
        let y: Vec<f64> = cu.iter().zip(&du).map(|(a, b)| a + b).collect();
        let (a, next) = match head {
            HeadMode::Full => {
                let a: Vec<f64> = y.iter().map(|&v| gelu(v)).collect();
                let s: Vec<f64> = layer.glu_w1.matvec(&a).into_iter().map(sigmoid).collect();
                let v = layer.glu_w2.matvec(&a);
                let next = s.iter().zip(&v).zip(u).map(|((s, v), u)| s * v + u).collect();
                tr.glu_s.push(s);
                tr.glu_v.push(v);
                (a, next)
            }
            HeadMode::Linear => {
                let next = y.iter().zip(u).map(|(y, u)| y + u).collect();
                (y.clone(), next)
            }
        };
        if !a.iter().all(|v: &f64| v.is_finite()) {
            return Err(Error::NonFinite { step: Some(t + 1), field: "readout".into() });
        }
        tr.h.push(h);
        tr.y.push(y);
        tr.a.push(a);
        tr.outputs.push(next);
    }
    tr.states = states;
    Ok(tr)
}

/// A single layer in isolation (previous-layer state taken as zero),
/// returning the next layer's input sequence.
pub fn layer_forward(layer: &LayerSpec, u_seq: &Sequence, engine: Engine) -> Result<Sequence> {
    layer_forward_with_head(layer, u_seq, engine, HeadMode::Full)
}

pub fn layer_forward_with_head(layer: &LayerSpec, u_seq: &Sequence, engine: Engine, head: HeadMode) -> Result<Sequence> {
    u_seq.validate()?;
    layer.validate()?;
    if u_seq.channels() != layer.width() {
        return Err(Error::Shape(format!("input has {} channels, layer expects {}", u_seq.channels(), layer.width())));
    }
    let tr = layer_trace(layer, &u_seq.values, None, engine, head).map_err(|e| with_layer(0, e))?;
    Ok(Sequence { values: tr.outputs, dt_semantics: u_seq.dt_semantics })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelOutput {
    Vector(Vec<f64>),
    Sequence(Sequence),
}

impl ModelOutput {
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            ModelOutput::Vector(v) => Some(v),
            ModelOutput::Sequence(_) => None,
        }
    }
}

/// Forward pass with all intermediates.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub raw_inputs: Vec<Vec<f64>>,
    /// Encoded inputs to layer 0.
    pub encoded: Vec<Vec<f64>>,
    pub layers: Vec<LayerTrace>,
    /// Pooled features (one row) or per-step features.
    pub features: Vec<Vec<f64>>,
    /// One row per feature row.
    pub outputs: Vec<Vec<f64>>,
}

pub fn pool(a: &[Vec<f64>], pooling: Pooling) -> Vec<Vec<f64>> {
    match pooling {
        Pooling::LastStep => vec![a.last().cloned().unwrap_or_default()],
        Pooling::MeanOverTime => {
            let m = a.first().map_or(0, |r| r.len());
            let mut acc = vec![0.0; m];
            for row in a {
                for (s, v) in acc.iter_mut().zip(row) {
                    *s += v;
                }
            }
            let n = a.len().max(1) as f64;
            vec![acc.into_iter().map(|s| s / n).collect()]
        }
        Pooling::PerStep => a.to_vec(),
    }
}

/// Forward pass over a validated model, keeping every intermediate.
pub fn forward_cache(model: &ModelSpec, u_seq: &Sequence, engine: Engine) -> Result<ForwardCache> {
    u_seq.validate()?;
    if u_seq.channels() != model.input_channels() {
        return Err(Error::Shape(format!(
            "input has {} channels, model expects {}",
            u_seq.channels(),
            model.input_channels()
        )));
    }
    let encoded: Vec<Vec<f64>> = match &model.encoder {
        Some(enc) => u_seq
            .values
            .iter()
            .map(|r| enc.w.matvec(r).into_iter().zip(&enc.b).map(|(v, b)| v + b).collect())
            .collect(),
        None => u_seq.values.clone(),
    };
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let inputs = layers.last().map_or(&encoded, |p| &p.outputs);
        let prev = layers.last().map(|p| p.states.as_slice());
        let tr = layer_trace(layer, inputs, prev, engine, model.head).map_err(|e| with_layer(l, e))?;
        layers.push(tr);
    }
    let features = pool(&layers.last().expect("at least one layer").a, model.pooling);
    let outputs = features
        .iter()
        .map(|f| model.w_out.matvec(f).into_iter().zip(&model.b_out).map(|(v, b)| v + b).collect())
        .collect();
    Ok(ForwardCache { raw_inputs: u_seq.values.clone(), encoded, layers, features, outputs })
}

/// Logits (pooled) or an output sequence (`PerStep`).
pub fn model_forward(model: &ModelSpec, u_seq: &Sequence) -> Result<ModelOutput> {
    model_forward_with(model, u_seq, Engine::Sequential)
}

pub fn model_forward_with(model: &ModelSpec, u_seq: &Sequence, engine: Engine) -> Result<ModelOutput> {
    model.validate()?;
    let cache = forward_cache(model, u_seq, engine)?;
    let mut outputs = cache.outputs;
    Ok(match model.pooling {
        Pooling::PerStep => ModelOutput::Sequence(Sequence { values: outputs, dt_semantics: u_seq.dt_semantics }),
        _ => ModelOutput::Vector(outputs.swap_remove(0)),
    })
}

/// Fixed-dynamics features for a ridge readout: the time-mean of the last
/// layer's readout, followed by the time-mean of `p^2` per cell of every
/// layer.
pub fn reservoir_features(model: &ModelSpec, u_seq: &Sequence) -> Result<Vec<f64>> {
    let cache = forward_cache(model, u_seq, Engine::Sequential)?;
    let last = cache.layers.last().expect("at least one layer");
    let mut f = pool(&last.a, Pooling::MeanOverTime).swap_remove(0);
    for (tr, layer) in cache.layers.iter().zip(&model.layers) {
        let n = layer.shape.cells();
        let mut acc = vec![0.0; n];
        for s in &tr.states {
            for (a, p) in acc.iter_mut().zip(&s[..n]) {
                *a += p * p;
            }
        }
        let t = tr.states.len() as f64;
        f.extend(acc.into_iter().map(|a| a / t));
    }
    Ok(f)
}

/// Rectangular region `[r0, r1) x [c0, c1)` tuned to one band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRegion {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub band: (f64, f64),
}

/// Per-region frequency targets; cells in a region share the plan's damping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    pub regions: Vec<BandRegion>,
    pub damping: (f64, f64),
    pub reference: ReferenceMode,
    pub frequency_model: FrequencyModel,
}

/// Default quadrant bands: bottom-left, bottom-right, top-left, top-right.
pub const QUADRANT_BANDS: [(f64, f64); 4] = [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0)];

impl BandPlan {
    /// Four quadrants. `bands` is ordered bottom-left, bottom-right,
    /// top-left, top-right; row 0 is the top edge.
    pub fn quadrants(shape: &GridShape<f64>, bands: [(f64, f64); 4], damping: (f64, f64)) -> Self {
        let (h, w) = (shape.height, shape.width);
        let (hm, wm) = (h / 2, w / 2);
        let regions = vec![
            BandRegion { rows: (hm, h), cols: (0, wm), band: bands[0] },
            BandRegion { rows: (hm, h), cols: (wm, w), band: bands[1] },
            BandRegion { rows: (0, hm), cols: (0, wm), band: bands[2] },
            BandRegion { rows: (0, hm), cols: (wm, w), band: bands[3] },
        ];
        BandPlan { regions, damping, reference: ReferenceMode::default(), frequency_model: FrequencyModel::default() }
    }

    /// Region index of each cell, if any.
    pub fn region_of(&self, i: usize, j: usize) -> Option<usize> {
        self.regions
            .iter()
            .position(|r| (r.rows.0..r.rows.1).contains(&i) && (r.cols.0..r.cols.1).contains(&j))
    }

    /// Overwrite the parameters of every planned cell. Returns one
    /// [`BandInit`] per region.
    pub fn apply(&self, params: &mut PhysicalParams<f64>, shape: &GridShape<f64>) -> Result<Vec<BandInit<f64>>> {
        let inits = self
            .regions
            .iter()
            .map(|r| {
                if r.rows.1 > shape.height || r.cols.1 > shape.width || r.rows.0 >= r.rows.1 || r.cols.0 >= r.cols.1 {
                    return Err(Error::Shape(format!("band region {:?} x {:?} is empty or off the grid", r.rows, r.cols)));
                }
                init_for_band(r.band, self.damping, shape, self.reference, self.frequency_model)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..shape.height {
            for j in 0..shape.width {
                if let Some(r) = self.region_of(i, j) {
                    params.c.set(i, j, inits[r].c);
                    params.kp.set(i, j, self.damping.0);
                    params.ko.set(i, j, self.damping.1);
                }
            }
        }
        Ok(inits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_channels: usize,
    /// Channel width `m` inside the stack.
    pub width: usize,
    pub outputs: usize,
    pub layers: usize,
    /// Add an input projection; required when `input_channels != width`.
    pub encoder: bool,
    pub head: HeadMode,
    pub pooling: Pooling,
    /// One `(c, kp, ko)` triple per layer instead of per cell.
    pub uniform_params: bool,
}

impl ModelDims {
    pub fn new(input_channels: usize, width: usize, outputs: usize, layers: usize) -> Self {
        ModelDims {
            input_channels,
            width,
            outputs,
            layers,
            encoder: input_channels != width,
            head: HeadMode::Full,
            pooling: Pooling::MeanOverTime,
            uniform_params: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.outputs == 0 || self.layers == 0 || self.input_channels == 0 {
            return Err(Error::InvalidParameter("model dimensions must be positive".into()));
        }
        if !self.encoder && self.input_channels != self.width {
            return Err(Error::InvalidParameter(format!(
                "without an encoder the input width {} must equal the layer width {}",
                self.input_channels, self.width
            )));
        }
        Ok(())
    }
}

fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let r = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-r..=r))
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

/// Draw `(c, kp, ko)` for one cell: damping log-uniform in `[1e-3, 1]`,
/// `c` uniform in `(0, 0.9 * certified bound]`.
fn draw_cell<R: Rng>(rng: &mut R, shape: &GridShape<f64>) -> (f64, f64, f64) {
    let kp = log_uniform(rng, 1e-3, 1.0);
    let ko = log_uniform(rng, 1e-3, 1.0);
    let u: f64 = 1.0 - rng.gen::<f64>();
    let c = 0.9 * u * certified_bound_local(kp, ko, shape.dt, shape.dx);
    (c, kp, ko)
}

/// Random model. Every weight is uniform in `+-1/sqrt(fan_in)`. Each
/// matrix draws from its own named stream, so the layout of one leaf does
/// not depend on the others.
pub fn init_model(
    seed: u64,
    dims: &ModelDims,
    grid: &GridShape<f64>,
    bc: BoundaryCondition,
    band_plan: Option<&BandPlan>,
) -> Result<ModelSpec> {
    dims.validate()?;
    grid.validate()?;
    let n = grid.cells();
    if n > MODEL_CELL_LIMIT {
        return Err(Error::TooLarge { cells: n, limit: MODEL_CELL_LIMIT });
    }
    let m = dims.width;
    let s = 3 * n;
    let encoder = dims.encoder.then(|| {
        let mut r = stream(seed, "init/encoder");
        Encoder {
            w: uniform_matrix(&mut r, m, dims.input_channels, dims.input_channels),
            b: uniform_matrix(&mut r, 1, m, dims.input_channels).data,
        }
    });
    let mut layers = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let r = |name: &str| stream(seed, &format!("init/layer{l}/{name}"));
        let mut pr = r("params");
        let mut params = PhysicalParams::uniform(grid, 0.0, 1.0, 1.0);
        let shared = dims.uniform_params.then(|| draw_cell(&mut pr, grid));
        for i in 0..grid.height {
            for j in 0..grid.width {
                let (c, kp, ko) = shared.unwrap_or_else(|| draw_cell(&mut pr, grid));
                params.c.set(i, j, c);
                params.kp.set(i, j, kp);
                params.ko.set(i, j, ko);
            }
        }
        if let Some(plan) = band_plan {
            plan.apply(&mut params, grid)?;
        }
        layers.push(LayerSpec {
            b: uniform_matrix(&mut r("B"), n, m, m),
            wz: uniform_matrix(&mut r("Wz"), s, s, s),
            wg: uniform_matrix(&mut r("Wg"), s, s, s),
            c: uniform_matrix(&mut r("C"), m, s, s),
            d: uniform_matrix(&mut r("D"), m, m, m),
            glu_w1: uniform_matrix(&mut r("glu_W1"), m, m, m),
            glu_w2: uniform_matrix(&mut r("glu_W2"), m, m, m),
            params,
            shape: *grid,
            bc,
            allow_unstable: false,
        });
    }
    let mut r = stream(seed, "init/output");
    let model = ModelSpec {
        encoder,
        layers,
        w_out: uniform_matrix(&mut r, dims.outputs, m, m),
        b_out: uniform_matrix(&mut r, 1, dims.outputs, m).data,
        pooling: dims.pooling,
        head: dims.head,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_values() {
        // Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-15);
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_arguments() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn matvec_t_is_the_transpose() {
        let a = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 + 1.0);
        let y = [1.0, -1.0, 2.0];
        let x = [0.5, 3.0];
        assert!((dot(&a.matvec(&x), &y) - dot(&x, &a.matvec_t(&y))).abs() < 1e-14);
    }

    #[test]
    fn band_plan_quadrant_lookup() {
        let g = GridShape::new(4, 6, 1.0, 0.01).unwrap();
        let plan = BandPlan::quadrants(&g, QUADRANT_BANDS, (1.0, 1.0));
        assert_eq!(plan.region_of(3, 0), Some(0));
        assert_eq!(plan.region_of(3, 5), Some(1));
        assert_eq!(plan.region_of(0, 0), Some(2));
        assert_eq!(plan.region_of(1, 3), Some(3));
    }
}

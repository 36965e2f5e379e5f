//! Readout fitting, reverse-mode gradients and a small optimizer loop.
//!
//! Gradients run backward through the time-domain stepper: the damping
//! correction, the divergence and the gradient stencils each get their exact
//! adjoint, using `grad^T = -div` for both boundary conditions.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence, gradient, Field, GridShape};
use crate::model::{
    forward_cache, gelu_derivative, Engine, ForwardCache, HeadMode, LayerSpec, LayerTrace, Matrix, ModelSpec, Pooling,
    Sequence,
};
use crate::rng::stream;
use crate::spectral::{certified_bound_local, check_stability, SymbolModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Regress,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Target for a pooled output.
    Values(Vec<f64>),
    /// One target row per step, for `Pooling::PerStep`.
    Sequence(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Sequence>,
    pub targets: Vec<Target>,
    pub task: Task,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self, outputs: usize) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", self.inputs.len(), self.targets.len())));
        }
        for (n, (x, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
            x.validate()?;
            match (self.task, y) {
                (Task::Classify, Target::Class(k)) if *k < outputs => {}
                (Task::Classify, Target::Class(k)) => {
                    return Err(Error::Shape(format!("item {n}: label {k} out of range for {outputs} classes")))
                }
                (Task::Regress, Target::Values(v)) if v.len() == outputs => {}
                (Task::Regress, Target::Sequence(s)) if s.len() == x.len() && s.iter().all(|r| r.len() == outputs) => {}
                _ => return Err(Error::Shape(format!("item {n}: target does not fit a {:?} task", self.task))),
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            task: self.task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    EncoderW,
    EncoderB,
    B,
    Wz,
    Wg,
    C,
    D,
    GluW1,
    GluW2,
    WaveSpeed,
    DampP,
    DampO,
    WOut,
    BOut,
}

impl LeafKind {
    pub const LAYER: [LeafKind; 10] = [
        LeafKind::B,
        LeafKind::Wz,
        LeafKind::Wg,
        LeafKind::C,
        LeafKind::D,
        LeafKind::GluW1,
        LeafKind::GluW2,
        LeafKind::WaveSpeed,
        LeafKind::DampP,
        LeafKind::DampO,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LeafKind::EncoderW => "encoder_w",
            LeafKind::EncoderB => "encoder_b",
            LeafKind::B => "B",
            LeafKind::Wz => "Wz",
            LeafKind::Wg => "Wg",
            LeafKind::C => "C",
            LeafKind::D => "D",
            LeafKind::GluW1 => "glu_W1",
            LeafKind::GluW2 => "glu_W2",
            LeafKind::WaveSpeed => "c",
            LeafKind::DampP => "kp",
            LeafKind::DampO => "ko",
            LeafKind::WOut => "W_out",
            LeafKind::BOut => "b_out",
        }
    }

    pub fn is_physical(&self) -> bool {
        matches!(self, LeafKind::WaveSpeed | LeafKind::DampP | LeafKind::DampO)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafId {
    pub layer: Option<usize>,
    pub kind: LeafKind,
}

impl fmt::Display for LeafId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer{l}.{}", self.kind.name()),
            None => f.write_str(self.kind.name()),
        }
    }
}

/// Every trainable array of `model`, in a fixed order.
pub fn leaf_ids(model: &ModelSpec) -> Vec<LeafId> {
    let mut ids = Vec::new();
    if model.encoder.is_some() {
        ids.push(LeafId { layer: None, kind: LeafKind::EncoderW });
        ids.push(LeafId { layer: None, kind: LeafKind::EncoderB });
    }
    for l in 0..model.layers.len() {
        ids.extend(LeafKind::LAYER.iter().map(|&kind| LeafId { layer: Some(l), kind }));
    }
    ids.push(LeafId { layer: None, kind: LeafKind::WOut });
    ids.push(LeafId { layer: None, kind: LeafKind::BOut });
    ids
}

fn missing(id: LeafId) -> Error {
    Error::InvalidParameter(format!("model has no leaf {id}"))
}

pub fn leaf_values(model: &ModelSpec, id: LeafId) -> Result<&[f64]> {
    let layer = |l: Option<usize>| l.and_then(|l| model.layers.get(l)).ok_or_else(|| missing(id));
    Ok(match id.kind {
        LeafKind::EncoderW => &model.encoder.as_ref().ok_or_else(|| missing(id))?.w.data,
        LeafKind::EncoderB => &model.encoder.as_ref().ok_or_else(|| missing(id))?.b,
        LeafKind::B => &layer(id.layer)?.b.data,
        LeafKind::Wz => &layer(id.layer)?.wz.data,
        LeafKind::Wg => &layer(id.layer)?.wg.data,
        LeafKind::C => &layer(id.layer)?.c.data,
        LeafKind::D => &layer(id.layer)?.d.data,
        LeafKind::GluW1 => &layer(id.layer)?.glu_w1.data,
        LeafKind::GluW2 => &layer(id.layer)?.glu_w2.data,
        LeafKind::WaveSpeed => layer(id.layer)?.params.c.as_slice(),
        LeafKind::DampP => layer(id.layer)?.params.kp.as_slice(),
        LeafKind::DampO => layer(id.layer)?.params.ko.as_slice(),
        LeafKind::WOut => &model.w_out.data,
        LeafKind::BOut => &model.b_out,
    })
}

pub fn leaf_values_mut(model: &mut ModelSpec, id: LeafId) -> Result<&mut [f64]> {
    if let Some(l) = id.layer {
        let layer = model.layers.get_mut(l).ok_or_else(|| missing(id))?;
        return Ok(match id.kind {
            LeafKind::B => &mut layer.b.data,
            LeafKind::Wz => &mut layer.wz.data,
            LeafKind::Wg => &mut layer.wg.data,
            LeafKind::C => &mut layer.c.data,
            LeafKind::D => &mut layer.d.data,
            LeafKind::GluW1 => &mut layer.glu_w1.data,
            LeafKind::GluW2 => &mut layer.glu_w2.data,
            LeafKind::WaveSpeed => layer.params.c.as_mut_slice(),
            LeafKind::DampP => layer.params.kp.as_mut_slice(),
            LeafKind::DampO => layer.params.ko.as_mut_slice(),
            _ => return Err(missing(id)),
        });
    }
    Ok(match id.kind {
        LeafKind::EncoderW => &mut model.encoder.as_mut().ok_or_else(|| missing(id))?.w.data,
        LeafKind::EncoderB => &mut model.encoder.as_mut().ok_or_else(|| missing(id))?.b,
        LeafKind::WOut => &mut model.w_out.data,
        LeafKind::BOut => &mut model.b_out,
        _ => return Err(missing(id)),
    })
}

/// One gradient array per leaf, in [`leaf_ids`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub leaves: Vec<(LeafId, Vec<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelSpec) -> Self {
        GradientSet {
            leaves: leaf_ids(model)
                .into_iter()
                .map(|id| (id, vec![0.0; leaf_values(model, id).map_or(0, |v| v.len())]))
                .collect(),
        }
    }

    pub fn get(&self, id: LeafId) -> Option<&[f64]> {
        self.leaves.iter().find(|(l, _)| *l == id).map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, id: LeafId) -> Option<&mut Vec<f64>> {
        self.leaves.iter_mut().find(|(l, _)| *l == id).map(|(_, v)| v)
    }

    /// `self += other`, leaf by leaf.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for ((a, x), (b, y)) in self.leaves.iter_mut().zip(&other.leaves) {
            debug_assert_eq!(a, b);
            for (p, q) in x.iter_mut().zip(y) {
                *p += q;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.leaves.iter().flat_map(|(_, v)| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        for (id, v) in &self.leaves {
            if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { step: None, field: format!("gradient of {id}[{k}]") });
            }
        }
        Ok(())
    }
}

/// Minimizer of `|F W + 1 b^T - Y|^2 + reg |W|^2` with an unpenalized
/// intercept. `w` is stored `K x F` so that predictions are `w f + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeReadout {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl RidgeReadout {
    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        self.w.matvec(features).into_iter().zip(&self.b).map(|(v, b)| v + b).collect()
    }
}

/// Normal equations on centred data, solved by Cholesky.
pub fn ridge_readout_fit(features: &[Vec<f64>], targets: &[Vec<f64>], reg: f64) -> Result<RidgeReadout> {
    let n = features.len();
    if n == 0 || targets.len() != n {
        return Err(Error::Shape(format!("ridge needs N >= 1 matching rows, got {n} and {}", targets.len())));
    }
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::Precondition(format!("ridge regularization must be positive, got {reg}")));
    }
    let f = features[0].len();
    let k = targets[0].len();
    if features.iter().any(|r| r.len() != f) || targets.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("ragged feature or target rows".into()));
    }
    let fm = DMatrix::from_fn(n, f, |i, j| features[i][j]);
    let ym = DMatrix::from_fn(n, k, |i, j| targets[i][j]);
    let fmean = DVector::from_fn(f, |j, _| fm.column(j).mean());
    let ymean = DVector::from_fn(k, |j, _| ym.column(j).mean());
    let fc = DMatrix::from_fn(n, f, |i, j| fm[(i, j)] - fmean[j]);
    let yc = DMatrix::from_fn(n, k, |i, j| ym[(i, j)] - ymean[j]);
    let mut gram = fc.transpose() * &fc;
    for j in 0..f {
        gram[(j, j)] += reg;
    }
    let rhs = fc.transpose() * &yc;
    let chol = gram.cholesky().ok_or_else(|| Error::Numeric("ridge normal equations are not positive definite".into()))?;
    let w = chol.solve(&rhs); // F x K
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ridge solution is not finite".into()));
    }
    let b = &ymean - w.transpose() * &fmean;
    Ok(RidgeReadout {
        w: Matrix::from_fn(k, f, |r, c| w[(c, r)]),
        b: b.iter().copied().collect(),
    })
}

/// One-hot rows for class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| (0..classes).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Loss of one item and the cotangent of every output row.
fn output_loss(outputs: &[Vec<f64>], target: &Target, task: Task) -> Result<(f64, Vec<Vec<f64>>, Option<bool>)> {
    match (task, target) {
        (Task::Classify, Target::Class(c)) if outputs.len() == 1 => {
            let o = &outputs[0];
            let mx = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = o.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            let grad = o
                .iter()
                .enumerate()
                .map(|(k, v)| (v - lse).exp() - if k == *c { 1.0 } else { 0.0 })
                .collect();
            Ok((lse - o[*c], vec![grad], Some(argmax(o) == *c)))
        }
        (Task::Regress, Target::Values(y)) if outputs.len() == 1 => {
            let kk = y.len() as f64;
            let o = &outputs[0];
            let loss = o.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / kk;
            let grad = o.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / kk).collect();
            Ok((loss, vec![grad], None))
        }
        (Task::Regress, Target::Sequence(ys)) if outputs.len() == ys.len() => {
            let scale = 1.0 / (ys.len() as f64 * ys[0].len() as f64);
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(ys.len());
            for (o, y) in outputs.iter().zip(ys) {
                loss += o.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * scale;
                grads.push(o.iter().zip(y).map(|(a, b)| 2.0 * (a - b) * scale).collect());
            }
            Ok((loss, grads, None))
        }
        _ => Err(Error::Shape(format!("target does not match a {task:?} task with {} output row(s)", outputs.len()))),
    }
}

struct LayerGrads {
    b: Matrix,
    wz: Matrix,
    wg: Matrix,
    c: Matrix,
    d: Matrix,
    w1: Matrix,
    w2: Matrix,
    speed: Vec<f64>,
    kp: Vec<f64>,
    ko: Vec<f64>,
}

impl LayerGrads {
    fn zeros(layer: &LayerSpec) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        let n = layer.shape.cells();
        LayerGrads {
            b: z(&layer.b),
            wz: z(&layer.wz),
            wg: z(&layer.wg),
            c: z(&layer.c),
            d: z(&layer.d),
            w1: z(&layer.glu_w1),
            w2: z(&layer.glu_w2),
            speed: vec![0.0; n],
            kp: vec![0.0; n],
            ko: vec![0.0; n],
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn field(shape: &GridShape<f64>, v: &[f64]) -> Result<Field<f64>> {
    Field::from_vec(shape.height, shape.width, v.to_vec())
}

/// Reverse pass through one layer. Returns the cotangents of the layer's
/// inputs and of the previous layer's states (full head only).
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &LayerSpec,
    tr: &LayerTrace,
    prev: Option<&[Vec<f64>]>,
    head: HeadMode,
    d_out: Option<&[Vec<f64>]>,
    d_a: Option<&[Vec<f64>]>,
    d_x_extra: Option<&[Vec<f64>]>,
    g: &mut LayerGrads,
) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    let shape = &layer.shape;
    let n = shape.cells();
    let s = 3 * n;
    let m = layer.width();
    let steps = tr.states.len();
    let dt = shape.dt;
    let mut d_in = vec![vec![0.0; m]; steps];
    let mut d_prev = (head == HeadMode::Full && prev.is_some()).then(|| vec![vec![0.0; s]; steps]);
    let mut d_x = vec![vec![0.0; s]; steps];

    // Head, step by step.
    for t in 0..steps {
        let u = &tr.inputs[t];
        let a = &tr.a[t];
        let du = &mut d_in[t];
        let mut da = d_a.map_or_else(|| vec![0.0; m], |v| v[t].clone());
        if let Some(dout) = d_out {
            let go = &dout[t];
            add_into(du, go);
            match head {
                HeadMode::Full => {
                    let (sg, v) = (&tr.glu_s[t], &tr.glu_v[t]);
                    let dv1: Vec<f64> = (0..m).map(|k| go[k] * v[k] * sg[k] * (1.0 - sg[k])).collect();
                    let dv2: Vec<f64> = (0..m).map(|k| go[k] * sg[k]).collect();
                    add_into(&mut da, &layer.glu_w1.matvec_t(&dv1));
                    add_into(&mut da, &layer.glu_w2.matvec_t(&dv2));
                    g.w1.add_outer(&dv1, a);
                    g.w2.add_outer(&dv2, a);
                }
                HeadMode::Linear => add_into(&mut da, go),
            }
        }
        let dy: Vec<f64> = match head {
            HeadMode::Full => da.iter().zip(&tr.y[t]).map(|(d, &y)| d * gelu_derivative(y)).collect(),
            HeadMode::Linear => da,
        };
        g.c.add_outer(&dy, &tr.h[t]);
        let dh = layer.c.matvec_t(&dy);
        g.d.add_outer(&dy, u);
        add_into(du, &layer.d.matvec_t(&dy));
        let dx = &mut d_x[t];
        if let Some(extra) = d_x_extra {
            add_into(dx, &extra[t]);
        }
        match head {
            HeadMode::Full => {
                let x = &tr.states[t];
                let (gate, th) = (&tr.gate[t], &tr.cand[t]);
                let mut dz = vec![0.0; s];
                let mut dsg = vec![0.0; s];
                for k in 0..s {
                    let xp = prev.map_or(0.0, |p| p[t][k]);
                    dz[k] = dh[k] * gate[k] * (1.0 - th[k] * th[k]);
                    dsg[k] = dh[k] * (th[k] - xp) * gate[k] * (1.0 - gate[k]);
                    if let Some(dp) = d_prev.as_mut() {
                        dp[t][k] = dh[k] * (1.0 - gate[k]);
                    }
                }
                g.wz.add_outer(&dz, x);
                g.wg.add_outer(&dsg, x);
                add_into(dx, &layer.wz.matvec_t(&dz));
                add_into(dx, &layer.wg.matvec_t(&dsg));
            }
            HeadMode::Linear => add_into(dx, &dh),
        }
    }

    // Recurrence, backward in time.
    let c = layer.params.c.as_slice();
    let alpha = layer.params.alpha(dt).into_vec();
    let beta = layer.params.beta(dt).into_vec();
    let zero = vec![0.0; s];
    let mut lam = vec![0.0; s];
    for t in (0..steps).rev() {
        add_into(&mut lam, &d_x[t]);
        let xp = if t > 0 { &tr.states[t - 1] } else { &zero };
        let drive = layer.b.matvec(&tr.inputs[t]);
        let (gx, gy) = gradient(&field(shape, &xp[..n])?, shape, layer.bc)?;
        let ox_s: Vec<f64> = (0..n).map(|k| xp[n + k] - dt * gx.as_slice()[k]).collect();
        let oy_s: Vec<f64> = (0..n).map(|k| xp[2 * n + k] - dt * gy.as_slice()[k]).collect();
        let div = divergence(&field(shape, &ox_s)?, &field(shape, &oy_s)?, shape, layer.bc)?.into_vec();
        let mut ps_bar = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut dd = vec![0.0; n];
        for k in 0..n {
            let p_star = xp[k] - c[k] * c[k] * dt * div[k] + dt * drive[k];
            ps_bar[k] = alpha[k] * lam[k];
            g.kp[k] += -dt * alpha[k] * alpha[k] * lam[k] * p_star;
            g.ko[k] += -dt * beta[k] * beta[k] * (lam[n + k] * ox_s[k] + lam[2 * n + k] * oy_s[k]);
            g.speed[k] += -2.0 * c[k] * dt * ps_bar[k] * div[k];
            dd[k] = dt * ps_bar[k];
            w[k] = c[k] * c[k] * dt * ps_bar[k];
        }
        let (wx, wy) = gradient(&field(shape, &w)?, shape, layer.bc)?;
        let obx: Vec<f64> = (0..n).map(|k| beta[k] * lam[n + k] + wx.as_slice()[k]).collect();
        let oby: Vec<f64> = (0..n).map(|k| beta[k] * lam[2 * n + k] + wy.as_slice()[k]).collect();
        let dob = divergence(&field(shape, &obx)?, &field(shape, &oby)?, shape, layer.bc)?;
        for k in 0..n {
            lam[k] = ps_bar[k] + dt * dob.as_slice()[k];
            lam[n + k] = obx[k];
            lam[2 * n + k] = oby[k];
        }
        g.b.add_outer(&dd, &tr.inputs[t]);
        add_into(&mut d_in[t], &layer.b.matvec_t(&dd));
    }
    Ok((d_in, d_prev))
}

/// Loss, gradients and correctness of a single item.
fn item_gradients(model: &ModelSpec, input: &Sequence, target: &Target, task: Task) -> Result<(f64, GradientSet, Option<bool>)> {
    let cache = forward_cache(model, input, Engine::Sequential)?;
    let (loss, d_outputs, correct) = output_loss(&cache.outputs, target, task)?;
    let grads = backward(model, &cache, &d_outputs)?;
    Ok((loss, grads, correct))
}

fn backward(model: &ModelSpec, cache: &ForwardCache, d_outputs: &[Vec<f64>]) -> Result<GradientSet> {
    let m = model.width();
    let last = cache.layers.last().expect("at least one layer");
    let steps = last.a.len();
    let mut g_wout = Matrix::zeros(model.w_out.rows, model.w_out.cols);
    let mut g_bout = vec![0.0; model.b_out.len()];
    let mut d_feat = Vec::with_capacity(d_outputs.len());
    for (go, f) in d_outputs.iter().zip(&cache.features) {
        g_wout.add_outer(go, f);
        add_into(&mut g_bout, go);
        d_feat.push(model.w_out.matvec_t(go));
    }
    let mut d_a = vec![vec![0.0; m]; steps];
    match model.pooling {
        Pooling::MeanOverTime => {
            let inv = 1.0 / steps as f64;
            for row in d_a.iter_mut() {
                for (r, v) in row.iter_mut().zip(&d_feat[0]) {
                    *r = v * inv;
                }
            }
        }
        Pooling::LastStep => d_a[steps - 1] = d_feat[0].clone(),
        Pooling::PerStep => d_a = d_feat,
    }

    let nl = model.layers.len();
    let mut layer_grads: Vec<Option<LayerGrads>> = (0..nl).map(|_| None).collect();
    let mut d_out: Option<Vec<Vec<f64>>> = None;
    let mut d_extra: Option<Vec<Vec<f64>>> = None;
    for l in (0..nl).rev() {
        let layer = &model.layers[l];
        let mut lg = LayerGrads::zeros(layer);
        let prev = (l > 0).then(|| cache.layers[l - 1].states.as_slice());
        let (d_in, d_prev) = layer_backward(
            layer,
            &cache.layers[l],
            prev,
            model.head,
            d_out.as_deref(),
            (l == nl - 1).then_some(d_a.as_slice()),
            d_extra.as_deref(),
            &mut lg,
        )?;
        layer_grads[l] = Some(lg);
        d_out = Some(d_in);
        d_extra = d_prev;
    }

    let mut gs = GradientSet { leaves: Vec::new() };
    if let Some(enc) = &model.encoder {
        let d_u0 = d_out.as_ref().expect("layer 0 ran");
        let mut gw = Matrix::zeros(enc.w.rows, enc.w.cols);
        let mut gb = vec![0.0; enc.b.len()];
        for (du, r) in d_u0.iter().zip(&cache.raw_inputs) {
            gw.add_outer(du, r);
            add_into(&mut gb, du);
        }
        gs.leaves.push((LeafId { layer: None, kind: LeafKind::EncoderW }, gw.data));
        gs.leaves.push((LeafId { layer: None, kind: LeafKind::EncoderB }, gb));
    }
    for (l, lg) in layer_grads.into_iter().enumerate() {
        let lg = lg.expect("every layer ran");
        let id = |kind| LeafId { layer: Some(l), kind };
        gs.leaves.extend([
            (id(LeafKind::B), lg.b.data),
            (id(LeafKind::Wz), lg.wz.data),
            (id(LeafKind::Wg), lg.wg.data),
            (id(LeafKind::C), lg.c.data),
            (id(LeafKind::D), lg.d.data),
            (id(LeafKind::GluW1), lg.w1.data),
            (id(LeafKind::GluW2), lg.w2.data),
            (id(LeafKind::WaveSpeed), lg.speed),
            (id(LeafKind::DampP), lg.kp),
            (id(LeafKind::DampO), lg.ko),
        ]);
    }
    gs.leaves.push((LeafId { layer: None, kind: LeafKind::WOut }, g_wout.data));
    gs.leaves.push((LeafId { layer: None, kind: LeafKind::BOut }, g_bout));
    gs.check_finite()?;
    Ok(gs)
}

/// Loss and gradient of a batch, with the number of correct predictions
/// for classification.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub loss: f64,
    pub grads: GradientSet,
    pub correct: usize,
}

fn check_model(model: &ModelSpec, batch: &Batch) -> Result<()> {
    model.validate()?;
    batch.validate(model.outputs())?;
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    match (batch.task, model.pooling) {
        (Task::Classify, Pooling::PerStep) => Err(Error::Shape("classification needs a pooled output".into())),
        _ => Ok(()),
    }
}

/// Sum over items. Items run in parallel and are reduced in index order.
pub fn evaluate_batch(model: &ModelSpec, batch: &Batch) -> Result<BatchEval> {
    check_model(model, batch)?;
    let items: Vec<Result<(f64, GradientSet, Option<bool>)>> = batch
        .inputs
        .par_iter()
        .zip(batch.targets.par_iter())
        .map(|(x, y)| item_gradients(model, x, y, batch.task))
        .collect();
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    let mut correct = 0;
    for (n, r) in items.into_iter().enumerate() {
        let (l, g, c) = r.map_err(|e| match e {
            Error::NonFinite { step, field } => Error::NonFinite { step, field: format!("item {n}: {field}") },
            e => e,
        })?;
        loss += l;
        total.accumulate(&g);
        correct += usize::from(c == Some(true));
    }
    Ok(BatchEval { loss, grads: total, correct })
}

/// Cross-entropy (classification) or mean squared error (regression),
/// summed over the batch; per-step losses are averaged over time.
pub fn loss_and_gradients(model: &ModelSpec, batch: &Batch) -> Result<(f64, GradientSet)> {
    let e = evaluate_batch(model, batch)?;
    Ok((e.loss, e.grads))
}

/// Loss only. Skips the stability check so that finite differences may
/// straddle the boundary.
pub fn batch_loss(model: &ModelSpec, batch: &Batch) -> Result<f64> {
    batch.validate(model.outputs())?;
    let losses: Vec<Result<f64>> = batch
        .inputs
        .par_iter()
        .zip(batch.targets.par_iter())
        .map(|(x, y)| {
            let cache = forward_cache(model, x, Engine::Sequential)?;
            Ok(output_loss(&cache.outputs, y, batch.task)?.0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total)
}

/// Classification accuracy of `model` on `batch`.
pub fn accuracy(model: &ModelSpec, batch: &Batch) -> Result<f64> {
    if batch.task != Task::Classify {
        return Err(Error::Precondition("accuracy needs a classification batch".into()));
    }
    Ok(evaluate_batch(model, batch)?.correct as f64 / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub leaf: LeafId,
    pub coordinates: usize,
    /// `max |fd - analytic|` over the sampled coordinates divided by the
    /// largest sampled magnitude of either; zero when both vanish.
    pub max_rel_error: f64,
    /// Largest coordinate-wise `|fd - analytic| / max(|fd|, |analytic|)`,
    /// ignoring coordinates where both are below `1e-8` of the leaf scale.
    pub max_coordinate_error: f64,
}

/// Central differences on `samples` random coordinates per leaf (all
/// coordinates when the leaf is smaller).
pub fn finite_difference_check(
    model: &ModelSpec,
    batch: &Batch,
    eps: f64,
    leaves: &[LeafId],
    samples: usize,
    seed: u64,
) -> Result<Vec<LeafCheck>> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Precondition(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let (_, grads) = loss_and_gradients(model, batch)?;
    let mut out = Vec::with_capacity(leaves.len());
    for &id in leaves {
        let analytic = grads.get(id).ok_or_else(|| missing(id))?.to_vec();
        let len = analytic.len();
        let mut rng = stream(seed, &format!("fd/{id}"));
        let coords: Vec<usize> = if len <= samples { (0..len).collect() } else { sample(&mut rng, len, samples).into_vec() };
        let mut pairs = Vec::with_capacity(coords.len());
        for &k in &coords {
            let mut m = model.clone();
            let base = leaf_values(model, id)?[k];
            leaf_values_mut(&mut m, id)?[k] = base + eps;
            let lp = batch_loss(&m, batch)?;
            leaf_values_mut(&mut m, id)?[k] = base - eps;
            let lm = batch_loss(&m, batch)?;
            pairs.push(((lp - lm) / (2.0 * eps), analytic[k]));
        }
        let scale = pairs.iter().fold(0.0f64, |s, &(f, a)| s.max(f.abs()).max(a.abs()));
        let worst = pairs.iter().fold(0.0f64, |s, &(f, a)| s.max((f - a).abs()));
        let coord = pairs
            .iter()
            .filter(|(f, a)| f.abs().max(a.abs()) > 1e-8 * scale)
            .fold(0.0f64, |s, &(f, a)| s.max((f - a).abs() / f.abs().max(a.abs())));
        out.push(LeafCheck {
            leaf: id,
            coordinates: coords.len(),
            max_rel_error: if scale > 0.0 { worst / scale } else { 0.0 },
            max_coordinate_error: coord,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Lower bound applied to `kp` and `ko` after every update.
pub const MIN_DAMPING: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Project parameters back into the stable set after each update.
    pub projection: bool,
    /// Minibatch size; `None` uses the whole batch every step.
    pub batch_size: Option<usize>,
    /// Leaf kinds to update; `None` trains all of them.
    pub trainable: Option<Vec<LeafKind>>,
    /// Stop once the step's classification accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            steps: 100,
            seed: 0,
            optimizer: Optimizer::default(),
            projection: true,
            batch_size: None,
            trainable: None,
            target_accuracy: None,
            divergence_factor: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::InvalidParameter("divergence_factor must exceed 1".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::InvalidParameter("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// One row of the loss trace. Loss and gradient norm are measured before
/// the step's update; the eigenvalue magnitude after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub max_eig_magnitude: f64,
    /// Fraction correct on the step's batch (classification only).
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    TargetReached { step: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelSpec,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

/// Training that stopped with an error; the trace up to that point is kept.
#[derive(Clone, Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub trace: Vec<TraceRow>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} recorded steps)", self.error, self.trace.len())
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, trace: Vec::new() }
    }
}

/// Clamp damping to at least [`MIN_DAMPING`] and the wave speed into
/// `[0, certified bound]`, cell by cell.
pub fn project_stable(model: &mut ModelSpec) {
    for layer in &mut model.layers {
        let (dt, dx) = (layer.shape.dt, layer.shape.dx);
        let n = layer.shape.cells();
        for k in 0..n {
            let kp = layer.params.kp.as_slice()[k].max(MIN_DAMPING);
            let ko = layer.params.ko.as_slice()[k].max(MIN_DAMPING);
            layer.params.kp.as_mut_slice()[k] = kp;
            layer.params.ko.as_mut_slice()[k] = ko;
            let cap = certified_bound_local(kp, ko, dt, dx);
            let c = &mut layer.params.c.as_mut_slice()[k];
            *c = c.clamp(0.0, cap);
        }
    }
}

/// Largest eigenvalue magnitude over every layer, cell and periodic mode.
pub fn max_eig_magnitude(model: &ModelSpec) -> f64 {
    model
        .layers
        .iter()
        .map(|l| check_stability(&l.params, &l.shape, SymbolModel::Stencil).worst_eig_magnitude)
        .fold(0.0, f64::max)
}

pub fn train_loop(model: &ModelSpec, data: &Batch, config: &TrainConfig) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    check_model(model, data)?;
    let mut model = model.clone();
    let ids: Vec<LeafId> = leaf_ids(&model)
        .into_iter()
        .filter(|id| config.trainable.as_ref().map_or(true, |t| t.contains(&id.kind)))
        .collect();
    let mut m1: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; leaf_values(&model, id).unwrap().len()]).collect();
    let mut m2 = m1.clone();
    let mut rng = stream(config.seed, "train/minibatch");
    let mut trace: Vec<TraceRow> = Vec::with_capacity(config.steps);
    let mut initial: Option<f64> = None;
    let fail = |error: Error, trace: &[TraceRow]| TrainFailure { error, trace: trace.to_vec() };

    for step in 0..config.steps {
        let eval = match config.batch_size {
            Some(bs) if bs < data.len() => {
                let mut idx = sample(&mut rng, data.len(), bs).into_vec();
                idx.sort_unstable();
                let sub = data.subset(&idx);
                evaluate_batch(&model, &sub).map(|e| (e, sub.len()))
            }
            _ => evaluate_batch(&model, data).map(|e| (e, data.len())),
        };
        let (eval, n_items) = eval.map_err(|e| fail(e, &trace))?;
        let loss = eval.loss;
        let threshold = config.divergence_factor * initial.unwrap_or(loss).abs().max(f64::MIN_POSITIVE);
        if !loss.is_finite() || (initial.is_some() && loss > threshold) {
            return Err(fail(Error::Diverged { step, loss, threshold }, &trace));
        }
        initial.get_or_insert(loss);
        let grad_norm = ids
            .iter()
            .map(|&id| eval.grads.get(id).unwrap().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if config.lr > 0.0 {
            let t = (step + 1) as i32;
            for (n, &id) in ids.iter().enumerate() {
                let g = eval.grads.get(id).unwrap();
                let w = leaf_values_mut(&mut model, id).map_err(|e| fail(e, &trace))?;
                match config.optimizer {
                    Optimizer::Sgd => {
                        for (x, gi) in w.iter_mut().zip(g) {
                            *x -= config.lr * gi;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        for (k, (x, gi)) in w.iter_mut().zip(g).enumerate() {
                            m1[n][k] = beta1 * m1[n][k] + (1.0 - beta1) * gi;
                            m2[n][k] = beta2 * m2[n][k] + (1.0 - beta2) * gi * gi;
                            *x -= config.lr * (m1[n][k] / c1) / ((m2[n][k] / c2).sqrt() + eps);
                        }
                    }
                }
            }
            if config.projection {
                project_stable(&mut model);
            }
        }
        let acc = (data.task == Task::Classify).then(|| eval.correct as f64 / n_items as f64);
        trace.push(TraceRow { step, loss, grad_norm, max_eig_magnitude: max_eig_magnitude(&model), accuracy: acc });
        if let (Some(target), Some(a)) = (config.target_accuracy, acc) {
            if a >= target {
                return Ok(TrainOutcome { model, trace, stop: StopReason::TargetReached { step } });
            }
        }
    }
    Ok(TrainOutcome { model, trace, stop: StopReason::Completed })
}

/// `step,loss,grad_norm,max_eig_magnitude`.
pub fn write_loss_trace<W: std::io::Write>(out: &mut W, rows: &[TraceRow]) -> Result<()> {
    writeln!(out, "step,loss,grad_norm,max_eig_magnitude")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e},{:e}", r.step, r.loss, r.grad_norm, r.max_eig_magnitude)?;
    }
    Ok(())
}

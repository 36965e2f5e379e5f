//! Signals, spectral measurement and the synthetic studies: the quadrant
//! frequency-selectivity run, its input-band sweep, a tone discrimination
//! task and patch-mapped input drives.

pub mod bench;
pub mod heatmap;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Field, GridShape, GridState, PhysicalParams, Stepper};
use crate::model::{reservoir_features, BandPlan, Matrix, ModelSpec, Sequence, TimeSemantics, QUADRANT_BANDS};
use crate::rng::stream;
use crate::spectral::{BandInit, FrequencyModel, ReferenceMode};
use crate::train::{argmax, one_hot, ridge_readout_fit, Batch, RidgeReadout, Target, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandedNoiseSpec {
    pub band: (f64, f64),
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Root-mean-square of the output.
    pub amplitude: f64,
}

impl BandedNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.band;
        let nyq = 0.5 / self.dt;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Precondition(format!("dt must be positive, got {}", self.dt)));
        }
        if !(lo >= 0.0 && lo < hi && hi <= nyq) {
            return Err(Error::Precondition(format!("band must satisfy 0 <= f_lo < f_hi <= {nyq}, got [{lo}, {hi}]")));
        }
        if self.steps < 2 {
            return Err(Error::Precondition("banded noise needs at least 2 steps".into()));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Precondition(format!("amplitude must be non-negative, got {}", self.amplitude)));
        }
        Ok(())
    }
}

/// Frequency of bin `k` of a length-`n` transform, folded to `[0, 1/(2dt)]`.
pub fn bin_frequency(k: usize, n: usize, dt: f64) -> f64 {
    let k = k.min(n - k);
    k as f64 / (n as f64 * dt)
}

/// Gaussian white noise with every transform bin outside the band zeroed,
/// rescaled to the requested RMS.
pub fn banded_noise_values(spec: &BandedNoiseSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.steps;
    let mut rng = stream(spec.seed, "banded_noise");
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let (lo, hi) = spec.band;
    let mut kept = 0;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = bin_frequency(k, n, spec.dt);
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        } else {
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::Precondition(format!("band [{lo}, {hi}] contains no frequency bin at T = {n}")));
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { spec.amplitude / rms } else { 0.0 };
    Ok(x.into_iter().map(|v| v * scale).collect())
}

/// Single-channel banded noise sequence.
pub fn banded_white_noise(spec: &BandedNoiseSpec) -> Result<Sequence> {
    let v = banded_noise_values(spec)?;
    Ok(Sequence { values: v.into_iter().map(|x| vec![x]).collect(), dt_semantics: TimeSemantics::Physical { dt: spec.dt } })
}

/// Minimum trace length accepted by [`dominant_frequency`].
pub const MIN_TRACE: usize = 16;

/// Power spectra of equal-length traces: mean removed, half-cosine taper.
pub struct SpectrumAnalyzer {
    n: usize,
    dt: f64,
    taper: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectrumAnalyzer {
    pub fn new(n: usize, dt: f64) -> Result<Self> {
        if n < MIN_TRACE {
            return Err(Error::Precondition(format!("trace needs at least {MIN_TRACE} samples, got {n}")));
        }
        if !(dt > 0.0) {
            return Err(Error::Precondition(format!("dt must be positive, got {dt}")));
        }
        let taper = (0..n).map(|t| (std::f64::consts::PI * (t as f64 + 0.5) / n as f64).sin()).collect();
        Ok(SpectrumAnalyzer { n, dt, taper, fft: FftPlanner::new().plan_fft_forward(n) })
    }

    /// Bin frequencies `k / (T dt)`, `k = 0..=T/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..=self.n / 2).map(|k| k as f64 / (self.n as f64 * self.dt)).collect()
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / (self.n as f64 * self.dt)
    }

    pub fn power(&self, trace: &[f64]) -> Vec<f64> {
        assert_eq!(trace.len(), self.n);
        let mean = trace.iter().sum::<f64>() / self.n as f64;
        let mut buf: Vec<Complex<f64>> =
            trace.iter().zip(&self.taper).map(|(&x, &w)| Complex::new((x - mean) * w, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[..=self.n / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Frequency of the strongest bin, lowest on ties. A trace with no
    /// variation has all its power at DC and reports 0.
    pub fn dominant(&self, trace: &[f64]) -> f64 {
        let p = self.power(trace);
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        best as f64 * self.bin_width()
    }
}

pub fn dominant_frequency(trace: &[f64], dt: f64) -> Result<f64> {
    if !trace.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { step: None, field: "trace".into() });
    }
    Ok(SpectrumAnalyzer::new(trace.len(), dt)?.dominant(trace))
}

/// Spatial pattern multiplying the common drive signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrivePattern {
    Uniform,
    /// `(-1)^(i + j)`, projecting onto the highest spatial mode.
    #[default]
    Checkerboard,
}

impl DrivePattern {
    pub fn field(&self, shape: &GridShape<f64>) -> Field<f64> {
        Field::from_fn(shape.height, shape.width, |i, j| match self {
            DrivePattern::Uniform => 1.0,
            DrivePattern::Checkerboard => {
                if (i + j) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrantConfig {
    pub height: usize,
    pub width: usize,
    pub dx: f64,
    pub dt: f64,
    pub steps: usize,
    /// Bottom-left, bottom-right, top-left, top-right.
    pub bands: [(f64, f64); 4],
    pub input_band: (f64, f64),
    /// `(kp, ko)` shared by every cell.
    pub damping: (f64, f64),
    pub amplitude: f64,
    pub seed: u64,
    pub bc: BoundaryCondition,
    pub reference: ReferenceMode,
    pub frequency_model: FrequencyModel,
    pub drive: DrivePattern,
    /// Length of the recorded tail traces.
    pub trace_len: usize,
    /// Cells closer than this to a quadrant edge are excluded from scoring.
    pub interior_margin: usize,
}

impl Default for QuadrantConfig {
    fn default() -> Self {
        QuadrantConfig {
            height: 64,
            width: 64,
            dx: 1.0,
            dt: 0.01,
            steps: 2000,
            bands: QUADRANT_BANDS,
            input_band: (0.0, 50.0),
            damping: (1.0, 1.0),
            amplitude: 1.0,
            seed: 0,
            bc: BoundaryCondition::ZeroPad,
            reference: ReferenceMode::NyquistDiagonal,
            frequency_model: FrequencyModel::Stepper,
            drive: DrivePattern::Checkerboard,
            trace_len: 200,
            interior_margin: 3,
        }
    }
}

impl QuadrantConfig {
    pub fn shape(&self) -> Result<GridShape<f64>> {
        GridShape::new(self.height, self.width, self.dx, self.dt)
    }

    pub fn plan(&self) -> Result<BandPlan> {
        let mut plan = BandPlan::quadrants(&self.shape()?, self.bands, self.damping);
        plan.reference = self.reference;
        plan.frequency_model = self.frequency_model;
        Ok(plan)
    }
}

/// The four panels: dominant-frequency map, probe spectra, tail traces and
/// the final pressure field.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSummary {
    pub dominant_frequency: Field<f64>,
    pub frequencies: Vec<f64>,
    pub power_spectra: Vec<Vec<f64>>,
    pub probe_points: Vec<(usize, usize)>,
    /// Last steps of `p` at each probe.
    pub tail_traces: Vec<Vec<f64>>,
    /// Step index of the first tail sample.
    pub tail_start: usize,
    pub final_p_field: Field<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadrantStats {
    pub band: (f64, f64),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub interior_cells: usize,
    /// Fraction of interior cells whose dominant frequency lies in `band`.
    pub in_band_fraction: f64,
    pub mean_dominant: f64,
    /// Wave speed chosen for the quadrant and whether it hit the cap.
    pub c: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct QuadrantRun {
    pub config: QuadrantConfig,
    pub summary: SpectralSummary,
    pub params: PhysicalParams<f64>,
    pub inits: Vec<BandInit<f64>>,
    pub quadrants: Vec<QuadrantStats>,
    pub bin_width: f64,
}

impl QuadrantRun {
    /// Every quadrant has at least `threshold` of its interior in band.
    pub fn passes(&self, threshold: f64) -> bool {
        self.quadrants.iter().all(|q| q.in_band_fraction >= threshold)
    }

    /// Quadrant means increase in band order.
    pub fn means_increasing(&self) -> bool {
        self.quadrants.windows(2).all(|w| w[0].mean_dominant < w[1].mean_dominant)
    }
}

/// Simulate a grid driven by `signal * pattern` and return `p` per cell as
/// cell-major traces, plus the final state.
pub fn record_pressure(
    params: &PhysicalParams<f64>,
    shape: &GridShape<f64>,
    bc: BoundaryCondition,
    pattern: &Field<f64>,
    signal: &[f64],
) -> Result<(Vec<f64>, GridState<f64>)> {
    let stepper = Stepper::new(*shape, params, bc)?;
    let n = shape.cells();
    let steps = signal.len();
    let mut traces = vec![0.0; n * steps];
    let mut state = GridState::zeros(shape);
    let mut drive = Field::zeros(shape.height, shape.width);
    for (t, &s) in signal.iter().enumerate() {
        for (d, &w) in drive.as_mut_slice().iter_mut().zip(pattern.as_slice()) {
            *d = s * w;
        }
        stepper.advance(&mut state, Some(&drive)).map_err(|e| match e {
            Error::NonFinite { field, .. } => Error::NonFinite { step: Some(t + 1), field },
            e => e,
        })?;
        for (k, &p) in state.p.as_slice().iter().enumerate() {
            traces[k * steps + t] = p;
        }
        if !state.p.is_finite() {
            return Err(Error::NonFinite { step: Some(t + 1), field: "p".into() });
        }
    }
    Ok((traces, state))
}

/// Dominant frequency of every cell, computed in parallel.
pub fn dominant_map(traces: &[f64], shape: &GridShape<f64>, steps: usize) -> Result<Field<f64>> {
    let an = SpectrumAnalyzer::new(steps, shape.dt)?;
    let v: Vec<f64> = traces.par_chunks(steps).map(|tr| an.dominant(tr)).collect();
    Field::from_vec(shape.height, shape.width, v)
}

pub fn quadrant_experiment(config: &QuadrantConfig) -> Result<QuadrantRun> {
    let shape = config.shape()?;
    if config.height < 4 || config.width < 4 {
        return Err(Error::Precondition("the quadrant experiment needs at least a 4x4 grid".into()));
    }
    let plan = config.plan()?;
    let mut params = PhysicalParams::uniform(&shape, 0.0, config.damping.0, config.damping.1);
    let inits = plan.apply(&mut params, &shape)?;
    let noise = BandedNoiseSpec {
        band: config.input_band,
        steps: config.steps,
        dt: config.dt,
        seed: config.seed,
        amplitude: config.amplitude,
    };
    let signal = banded_noise_values(&noise)?;
    let (traces, final_state) = record_pressure(&params, &shape, config.bc, &config.drive.field(&shape), &signal)?;
    let steps = config.steps;
    let dominant = dominant_map(&traces, &shape, steps)?;
    let an = SpectrumAnalyzer::new(steps, config.dt)?;

    let probes: Vec<(usize, usize)> =
        plan.regions.iter().map(|r| ((r.rows.0 + r.rows.1) / 2, (r.cols.0 + r.cols.1) / 2)).collect();
    let tail = config.trace_len.min(steps);
    let tail_start = steps - tail;
    let cell_trace = |(i, j): (usize, usize)| &traces[shape.idx(i, j) * steps..(shape.idx(i, j) + 1) * steps];
    let power_spectra = probes.iter().map(|&p| an.power(cell_trace(p))).collect();
    let tail_traces = probes.iter().map(|&p| cell_trace(p)[tail_start..].to_vec()).collect();

    let mg = config.interior_margin;
    let quadrants = plan
        .regions
        .iter()
        .zip(&inits)
        .map(|(r, init)| {
            let mut cells = 0usize;
            let mut hits = 0usize;
            let mut sum = 0.0;
            for i in r.rows.0 + mg..r.rows.1.saturating_sub(mg) {
                for j in r.cols.0 + mg..r.cols.1.saturating_sub(mg) {
                    let f = dominant.get(i, j);
                    cells += 1;
                    sum += f;
                    hits += usize::from(f >= r.band.0 && f <= r.band.1);
                }
            }
            let n = cells.max(1) as f64;
            QuadrantStats {
                band: r.band,
                rows: r.rows,
                cols: r.cols,
                interior_cells: cells,
                in_band_fraction: hits as f64 / n,
                mean_dominant: sum / n,
                c: init.c,
                clamped: init.clamped,
            }
        })
        .collect();

    Ok(QuadrantRun {
        config: config.clone(),
        summary: SpectralSummary {
            dominant_frequency: dominant,
            frequencies: an.frequencies(),
            power_spectra,
            probe_points: probes,
            tail_traces,
            tail_start,
            final_p_field: final_state.p,
        },
        params,
        inits,
        quadrants,
        bin_width: an.bin_width(),
    })
}

/// How a quadrant is expected to respond to a given input band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    /// The quadrant's band is inside the input band: it should resonate in it.
    Natural,
    /// The quadrant's band lies above the input: it should sit near the
    /// input band's upper edge.
    Saturated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepQuadrant {
    pub band: (f64, f64),
    pub response: Response,
    pub mean_dominant: f64,
    pub in_band_fraction: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub input_band: (f64, f64),
    pub quadrants: Vec<SweepQuadrant>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.quadrants.iter().all(|q| q.ok)
    }
}

/// Share of the input edge a saturated quadrant's mean must reach.
pub const SATURATION_FLOOR: f64 = 0.6;

/// Judge one run against the band-limited behaviour: natural quadrants keep
/// `threshold` of their interior in band; saturated quadrants have a mean
/// dominant frequency in `[0.6 f_top, f_top + one bin]`.
pub fn assess_sweep(run: &QuadrantRun, threshold: f64) -> SweepRow {
    let top = run.config.input_band.1;
    let quadrants = run
        .quadrants
        .iter()
        .map(|q| {
            let response = if q.band.0 >= top { Response::Saturated } else { Response::Natural };
            let ok = match response {
                Response::Natural => q.in_band_fraction >= threshold,
                Response::Saturated => {
                    q.mean_dominant >= SATURATION_FLOOR * top && q.mean_dominant <= top + run.bin_width
                }
            };
            SweepQuadrant { band: q.band, response, mean_dominant: q.mean_dominant, in_band_fraction: q.in_band_fraction, ok }
        })
        .collect();
    SweepRow { input_band: run.config.input_band, quadrants }
}

/// The quadrant run repeated for each input band, in parallel.
pub fn band_sweep(config: &QuadrantConfig, input_bands: &[(f64, f64)], threshold: f64) -> Result<Vec<(QuadrantRun, SweepRow)>> {
    input_bands
        .par_iter()
        .map(|&b| {
            let run = quadrant_experiment(&QuadrantConfig { input_band: b, ..config.clone() })?;
            let row = assess_sweep(&run, threshold);
            Ok((run, row))
        })
        .collect()
}

fn create(dir: &Path, run_id: &str, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(format!("{run_id}_{name}"));
    let f = File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok((path, BufWriter::new(f)))
}

/// Writes the run's CSV files and heatmaps into `dir`, each prefixed by
/// `run_id`. Returns the written paths.
pub fn write_quadrant_outputs(dir: &Path, run_id: &str, run: &QuadrantRun) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let s = &run.summary;
    let mut written = Vec::new();
    let (h, w) = s.dominant_frequency.dims();

    let (p, mut f) = create(dir, run_id, "dominant_freq.csv")?;
    writeln!(f, "i,j,f")?;
    for i in 0..h {
        for j in 0..w {
            writeln!(f, "{i},{j},{}", s.dominant_frequency.get(i, j))?;
        }
    }
    f.flush()?;
    written.push(p);

    let probe_cols: Vec<String> = s.probe_points.iter().map(|(i, j)| format!("r{i}c{j}")).collect();
    let (p, mut f) = create(dir, run_id, "spectra.csv")?;
    writeln!(f, "frequency,{}", probe_cols.join(","))?;
    for (k, fr) in s.frequencies.iter().enumerate() {
        let row: Vec<String> = s.power_spectra.iter().map(|sp| format!("{:e}", sp[k])).collect();
        writeln!(f, "{fr},{}", row.join(","))?;
    }
    f.flush()?;
    written.push(p);

    let (p, mut f) = create(dir, run_id, &format!("trace_last{}.csv", run.config.trace_len))?;
    writeln!(f, "step,{}", probe_cols.join(","))?;
    let tail = s.tail_traces.first().map_or(0, |t| t.len());
    for t in 0..tail {
        let row: Vec<String> = s.tail_traces.iter().map(|tr| format!("{:e}", tr[t])).collect();
        writeln!(f, "{},{}", s.tail_start + t + 1, row.join(","))?;
    }
    f.flush()?;
    written.push(p);

    let (p, mut f) = create(dir, run_id, "p_final.csv")?;
    writeln!(f, "i,j,p")?;
    for i in 0..h {
        for j in 0..w {
            writeln!(f, "{i},{j},{:e}", s.final_p_field.get(i, j))?;
        }
    }
    f.flush()?;
    written.push(p);

    let f_top = run.config.bands.iter().map(|b| b.1).fold(run.config.input_band.1, f64::max);
    for (name, field, range) in
        [("dominant_freq", &s.dominant_frequency, Some((0.0, f_top))), ("p_final", &s.final_p_field, None)]
    {
        let (p, mut f) = create(dir, run_id, &format!("{name}.pgm"))?;
        heatmap::write_pgm(&mut f, field, range)?;
        f.flush()?;
        written.push(p);
        let (p, f) = create(dir, run_id, &format!("{name}.png"))?;
        heatmap::write_png(f, field, range)?;
        written.push(p);
    }
    Ok(written)
}

/// Noisy tones with random phase, one class per frequency. Items are
/// interleaved by class.
pub fn make_frequency_discrimination_task(
    classes: &[f64],
    noise_sigma: f64,
    n_per_class: usize,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<Batch> {
    if classes.is_empty() || n_per_class == 0 || steps == 0 {
        return Err(Error::Precondition("need at least one class, item and step".into()));
    }
    if !(dt > 0.0) || !(noise_sigma >= 0.0) {
        return Err(Error::Precondition("dt must be positive and noise_sigma non-negative".into()));
    }
    let nyq = 0.5 / dt;
    if let Some(f) = classes.iter().find(|&&f| !(f >= 0.0 && f < nyq)) {
        return Err(Error::Precondition(format!("tone {f} is not below the Nyquist frequency {nyq}")));
    }
    let mut rng = stream(seed, "frequency_task");
    let mut inputs = Vec::with_capacity(classes.len() * n_per_class);
    let mut targets = Vec::with_capacity(inputs.capacity());
    for _ in 0..n_per_class {
        for (k, &f) in classes.iter().enumerate() {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let values = (0..steps)
                .map(|t| {
                    let e: f64 = rng.sample(StandardNormal);
                    vec![(std::f64::consts::TAU * f * t as f64 * dt + phase).sin() + noise_sigma * e]
                })
                .collect();
            inputs.push(Sequence { values, dt_semantics: TimeSemantics::Physical { dt } });
            targets.push(Target::Class(k));
        }
    }
    Ok(Batch { inputs, targets, task: Task::Classify })
}

/// Seeded shuffle split into train, validation and test index sets.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if !(ratios.0 > 0.0 && ratios.1 >= 0.0 && ratios.2 >= 0.0 && total > 0.0) {
        return Err(Error::Precondition(format!("invalid split ratios {ratios:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "split"));
    let n_train = ((ratios.0 / total) * n as f64).round() as usize;
    let n_val = (((ratios.1 / total) * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok((idx, val, test))
}

/// The 70:15:15 protocol.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Clone, Debug)]
pub struct RidgeClassifier {
    pub readout: RidgeReadout,
    pub classes: usize,
}

impl RidgeClassifier {
    pub fn predict(&self, model: &ModelSpec, x: &Sequence) -> Result<usize> {
        Ok(argmax(&self.readout.predict(&reservoir_features(model, x)?)))
    }

    pub fn accuracy(&self, model: &ModelSpec, batch: &Batch) -> Result<f64> {
        let preds: Vec<Result<usize>> = batch.inputs.par_iter().map(|x| self.predict(model, x)).collect();
        let mut hits = 0;
        for (p, t) in preds.into_iter().zip(&batch.targets) {
            if let Target::Class(c) = t {
                hits += usize::from(p? == *c);
            }
        }
        Ok(hits as f64 / batch.len().max(1) as f64)
    }
}

fn class_labels(batch: &Batch) -> Result<Vec<usize>> {
    batch
        .targets
        .iter()
        .map(|t| match t {
            Target::Class(c) => Ok(*c),
            _ => Err(Error::Precondition("ridge classification needs class labels".into())),
        })
        .collect()
}

/// Fit a one-hot ridge readout on reservoir features of frozen dynamics.
pub fn fit_ridge_classifier(model: &ModelSpec, train: &Batch, classes: usize, reg: f64) -> Result<RidgeClassifier> {
    let labels = class_labels(train)?;
    let feats: Vec<Result<Vec<f64>>> = train.inputs.par_iter().map(|x| reservoir_features(model, x)).collect();
    let feats: Vec<Vec<f64>> = feats.into_iter().collect::<Result<_>>()?;
    let readout = ridge_readout_fit(&feats, &one_hot(&labels, classes), reg)?;
    Ok(RidgeClassifier { readout, classes })
}

/// `HW x m` 0/1 mask: column `j` marks the cells driven by channel `j`.
/// Channels get disjoint near-square blocks tiled from the top-left; when
/// the blocks do not fit, consecutive runs of `patch_size` cells in
/// row-major order are used instead.
pub fn patch_input_map(m: usize, shape: &GridShape<f64>, patch_size: usize) -> Result<Matrix> {
    shape.validate()?;
    let n = shape.cells();
    if m == 0 || patch_size == 0 {
        return Err(Error::Precondition("patch map needs m >= 1 and patch_size >= 1".into()));
    }
    if m * patch_size > n {
        return Err(Error::Capacity(format!("{m} patches of {patch_size} cells exceed the {n}-cell grid")));
    }
    let mut mask = Matrix::zeros(n, m);
    for (ch, cells) in patch_cells(m, shape, patch_size).into_iter().enumerate() {
        for k in cells {
            mask.set(k, ch, 1.0);
        }
    }
    Ok(mask)
}

/// Cell indices of every patch.
pub fn patch_cells(m: usize, shape: &GridShape<f64>, patch_size: usize) -> Vec<Vec<usize>> {
    let (h, w) = (shape.height, shape.width);
    let bw = (patch_size as f64).sqrt().ceil() as usize;
    let bh = patch_size.div_ceil(bw);
    let per_row = w / bw;
    let rows = h / bh;
    if per_row * rows >= m {
        (0..m)
            .map(|ch| {
                let (bi, bj) = (ch / per_row, ch % per_row);
                (0..bh)
                    .flat_map(|di| (0..bw).map(move |dj| (bi * bh + di) * w + bj * bw + dj))
                    .take(patch_size)
                    .collect()
            })
            .collect()
    } else {
        (0..m).map(|ch| (ch * patch_size..(ch + 1) * patch_size).collect()).collect()
    }
}

/// First step at which `p^2` in each cell exceeds `threshold`.
pub fn energy_arrival_times(traces: &[f64], steps: usize, threshold: f64) -> Vec<Option<usize>> {
    traces.chunks(steps).map(|tr| tr.iter().position(|p| p * p > threshold).map(|t| t + 1)).collect()
}

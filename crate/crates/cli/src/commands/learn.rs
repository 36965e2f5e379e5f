use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use biooss::checkpoint::save_checkpoint;
use biooss::experiments::{fit_ridge_classifier, split_indices, SPLIT_RATIOS};
use biooss::model::{init_model, reservoir_features, HeadMode, ModelDims, ModelSpec, Pooling};
use biooss::train::{
    accuracy, batch_loss, ridge_readout_fit, train_loop, write_loss_trace, Batch, LeafKind, Optimizer, RidgeReadout,
    StopReason, Target, Task, TrainConfig,
};

use super::common::*;
use super::dataset::{load_dataset, TaskSection};
use crate::config::CommandConfig;
use crate::error::{CliError, CliResult};
use crate::output::Run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fixed dynamics, closed-form readout on reservoir features.
    Ridge,
    /// End-to-end gradient training.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub height: usize,
    pub width: usize,
    pub dx: f64,
    pub dt: f64,
    pub bc: biooss::grid::BoundaryCondition,
    pub layers: usize,
    /// Channel width inside the stack.
    pub channels: usize,
    /// Input projection; defaults to on when the data's channel count differs.
    pub encoder: Option<bool>,
    pub head: HeadMode,
    pub pooling: Pooling,
    pub uniform_params: bool,
    pub band_plan: Option<BandPlanSection>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            height: 8,
            width: 8,
            dx: 1.0,
            dt: 0.01,
            bc: biooss::grid::BoundaryCondition::ZeroPad,
            layers: 1,
            channels: 1,
            encoder: None,
            head: HeadMode::Full,
            pooling: Pooling::MeanOverTime,
            uniform_params: false,
            band_plan: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeSection {
    pub reg: f64,
}

impl Default for RidgeSection {
    fn default() -> Self {
        RidgeSection { reg: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub projection: bool,
    pub batch_size: Option<usize>,
    pub target_accuracy: Option<f64>,
    pub trainable: Option<Vec<LeafKind>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 0.05,
            steps: 500,
            optimizer: Optimizer::default(),
            projection: true,
            batch_size: None,
            target_accuracy: None,
            trainable: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub run_id: String,
    /// `ridge` or `full`; `classify` defaults to ridge, `train` to full.
    pub mode: Option<Mode>,
    /// Dataset directory; the synthetic task is generated when unset.
    pub dataset: Option<PathBuf>,
    pub task: TaskSection,
    /// Seed of the synthetic task.
    pub data_seed: u64,
    /// One run per seed; each seed picks the split and the initialization.
    pub seeds: Vec<u64>,
    /// Train, validation and test shares.
    pub split: (f64, f64, f64),
    pub model: ModelSection,
    pub ridge: RidgeSection,
    pub train: TrainSection,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            run_id: "learn".into(),
            mode: None,
            dataset: None,
            task: TaskSection::default(),
            data_seed: 0,
            seeds: vec![0],
            split: SPLIT_RATIOS,
            model: ModelSection::default(),
            ridge: RidgeSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl CommandConfig for LearnConfig {
    fn seed_override(seed: u64) -> Option<(&'static str, toml::Value)> {
        Some(("seeds", toml::Value::Array(vec![toml::Value::Integer(seed as i64)])))
    }

    fn check(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("seeds must list at least one seed".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
struct Metrics {
    train: Option<f64>,
    val: Option<f64>,
    test: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct SeedResult {
    seed: u64,
    sizes: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<Metrics>,
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<String>,
}

/// Accuracy for classification, mean squared error for regression.
fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classify => "accuracy",
        Task::Regress => "mse",
    }
}

fn model_metric(model: &ModelSpec, b: &Batch) -> CliResult<Option<f64>> {
    if b.is_empty() {
        return Ok(None);
    }
    Ok(Some(match b.task {
        Task::Classify => accuracy(model, b)?,
        Task::Regress => batch_loss(model, b)? / b.len() as f64,
    }))
}

fn features(model: &ModelSpec, b: &Batch) -> CliResult<Vec<Vec<f64>>> {
    let f: Vec<biooss::Result<Vec<f64>>> = b.inputs.par_iter().map(|x| reservoir_features(model, x)).collect();
    Ok(f.into_iter().collect::<biooss::Result<_>>()?)
}

fn ridge_mse(model: &ModelSpec, r: &RidgeReadout, b: &Batch) -> CliResult<Option<f64>> {
    if b.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (f, t) in features(model, b)?.iter().zip(&b.targets) {
        let Target::Values(y) = t else { unreachable!("checked by caller") };
        let p = r.predict(f);
        total += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    }
    Ok(Some(total / b.len() as f64))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    // Sample standard deviation; zero for a single seed.
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

pub fn run(cfg: &LearnConfig, run: &mut Run) -> CliResult<Value> {
    let mode = cfg.mode.expect("mode resolved by the caller");
    let (data, classes) = match &cfg.dataset {
        Some(dir) => {
            let d = load_dataset(dir)?;
            let k = d.classes();
            (d.batch, k)
        }
        None => (cfg.task.generate(cfg.data_seed)?, cfg.task.classes.len()),
    };
    if data.is_empty() {
        return Err(CliError::Dataset(vec!["dataset has no sequences".into()]));
    }
    if data.targets.iter().any(|t| matches!(t, Target::Sequence(_))) {
        return Err(CliError::Config("per-step targets are not supported by this command".into()));
    }
    let outputs = match data.task {
        Task::Classify => classes,
        Task::Regress => match &data.targets[0] {
            Target::Values(v) => v.len(),
            _ => unreachable!(),
        },
    };
    let m = &cfg.model;
    let shape = biooss::grid::GridShape::new(m.height, m.width, m.dx, m.dt)?;
    let in_ch = data.inputs[0].channels();
    let mut dims = ModelDims::new(in_ch, m.channels, outputs, m.layers);
    dims.encoder = m.encoder.unwrap_or(in_ch != m.channels);
    dims.head = m.head;
    dims.pooling = m.pooling;
    dims.uniform_params = m.uniform_params;
    let plan = m.band_plan.as_ref().map(|b| b.plan(&shape));

    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let (tr, va, te) = split_indices(data.len(), cfg.split, seed)?;
        let (btr, bva, bte) = (data.subset(&tr), data.subset(&va), data.subset(&te));
        let model = init_model(seed, &dims, &shape, m.bc, plan.as_ref())?;
        let prefix = format!("{}_seed{seed}", cfg.run_id);
        let result = match mode {
            Mode::Ridge => {
                let metrics = match data.task {
                    Task::Classify => {
                        let clf = fit_ridge_classifier(&model, &btr, classes, cfg.ridge.reg)?;
                        let acc = |b: &Batch| -> CliResult<Option<f64>> {
                            if b.is_empty() { Ok(None) } else { Ok(Some(clf.accuracy(&model, b)?)) }
                        };
                        run.write_json(&format!("{prefix}_readout.json"), &readout_json(&clf.readout))?;
                        Metrics { train: acc(&btr)?, val: acc(&bva)?, test: acc(&bte)? }
                    }
                    Task::Regress => {
                        let y: Vec<Vec<f64>> = btr
                            .targets
                            .iter()
                            .map(|t| match t {
                                Target::Values(v) => v.clone(),
                                _ => unreachable!(),
                            })
                            .collect();
                        let r = ridge_readout_fit(&features(&model, &btr)?, &y, cfg.ridge.reg)?;
                        run.write_json(&format!("{prefix}_readout.json"), &readout_json(&r))?;
                        Metrics { train: ridge_mse(&model, &r, &btr)?, val: ridge_mse(&model, &r, &bva)?, test: ridge_mse(&model, &r, &bte)? }
                    }
                };
                let p = run.path(&format!("{prefix}_reservoir.json"));
                save_checkpoint(&p, &model)?;
                run.record(&p);
                SeedResult { seed, sizes: [tr.len(), va.len(), te.len()], init: None, metrics, steps_run: None, stop: None }
            }
            Mode::Full => {
                let init = Metrics { train: model_metric(&model, &btr)?, val: model_metric(&model, &bva)?, test: model_metric(&model, &bte)? };
                let t = &cfg.train;
                let tc = TrainConfig {
                    lr: t.lr,
                    steps: t.steps,
                    seed,
                    optimizer: t.optimizer,
                    projection: t.projection,
                    batch_size: t.batch_size,
                    trainable: t.trainable.clone(),
                    target_accuracy: t.target_accuracy,
                    ..TrainConfig::default()
                };
                let name = format!("{prefix}_loss.csv");
                let out = match train_loop(&model, &btr, &tc) {
                    Ok(o) => o,
                    Err(f) => {
                        let mut w = run.create(&name)?;
                        write_loss_trace(&mut w, &f.trace)?;
                        return Err(f.error.into());
                    }
                };
                let mut w = run.create(&name)?;
                write_loss_trace(&mut w, &out.trace)?;
                std::io::Write::flush(&mut w)?;
                let p = run.path(&format!("{prefix}_checkpoint.json"));
                save_checkpoint(&p, &out.model)?;
                run.record(&p);
                let metrics = Metrics {
                    train: model_metric(&out.model, &btr)?,
                    val: model_metric(&out.model, &bva)?,
                    test: model_metric(&out.model, &bte)?,
                };
                let stop = match out.stop {
                    StopReason::Completed => "completed".to_string(),
                    StopReason::TargetReached { step } => format!("target_reached_at_{step}"),
                };
                SeedResult {
                    seed,
                    sizes: [tr.len(), va.len(), te.len()],
                    init: Some(init),
                    metrics,
                    steps_run: Some(out.trace.len()),
                    stop: Some(stop),
                }
            }
        };
        results.push(result);
    }

    let mut agg = serde_json::Map::new();
    for (name, get) in [
        ("train", (|m: &Metrics| m.train) as fn(&Metrics) -> Option<f64>),
        ("val", |m: &Metrics| m.val),
        ("test", |m: &Metrics| m.test),
    ] {
        let v: Vec<f64> = results.iter().filter_map(|r| get(&r.metrics)).collect();
        if !v.is_empty() {
            let (mean, std) = mean_std(&v);
            agg.insert(name.into(), json!({ "mean": mean, "std": std }));
        }
    }
    let metrics = json!({
        "mode": mode,
        "task": data.task,
        "metric": metric_name(data.task),
        "sequences": data.len(),
        "per_seed": results,
        "summary": agg,
    });
    run.write_json(&format!("{}_metrics.json", cfg.run_id), &metrics)?;
    Ok(metrics)
}

fn readout_json(r: &RidgeReadout) -> Value {
    json!({ "format": "biooss-readout-v1", "rows": r.w.rows, "cols": r.w.cols, "w": r.w.data, "b": r.b })
}

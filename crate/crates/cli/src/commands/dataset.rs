//! On-disk datasets: one CSV per sequence (header row, then one row per
//! step, one column per channel), `labels.csv` mapping file to target, and
//! `meta.json` with the channel count, time semantics and task.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use biooss::experiments::make_frequency_discrimination_task;
use biooss::model::{Sequence, TimeSemantics};
use biooss::train::{Batch, Target, Task};

use crate::config::CommandConfig;
use crate::error::{CliError, CliResult};
use crate::output::Run;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub channels: usize,
    pub dt_semantics: TimeSemantics,
    pub task: Task,
    /// Number of classes; labels must lie in `0..classes`.
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: Meta,
    pub batch: Batch,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.meta.classes.unwrap_or_else(|| {
            self.batch.targets.iter().filter_map(|t| if let Target::Class(c) = t { Some(c + 1) } else { None }).max().unwrap_or(0)
        })
    }
}

fn read_sequence(path: &Path, name: &str, meta: &Meta, issues: &mut Vec<String>) -> Option<Sequence> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            issues.push(format!("{name}: cannot read: {e}"));
            return None;
        }
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.split(',').count() == meta.channels => {}
        Some((_, h)) => {
            issues.push(format!("{name}:1: header has {} columns, meta says {}", h.split(',').count(), meta.channels));
            return None;
        }
        None => {
            issues.push(format!("{name}: empty file"));
            return None;
        }
    }
    let mut values = Vec::new();
    let before = issues.len();
    for (ln, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != meta.channels {
            issues.push(format!("{name}:{}: {} columns, expected {}", ln + 1, cells.len(), meta.channels));
            continue;
        }
        let row: Vec<f64> = cells
            .iter()
            .filter_map(|c| match c.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    issues.push(format!("{name}:{}: bad value {:?}", ln + 1, c.trim()));
                    None
                }
            })
            .collect();
        values.push(row);
    }
    if values.is_empty() && issues.len() == before {
        issues.push(format!("{name}: no time steps"));
    }
    (issues.len() == before && !values.is_empty()).then(|| Sequence { values, dt_semantics: meta.dt_semantics })
}

/// Load and validate a dataset directory. Every problem found is reported.
pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let fail = |v: Vec<String>| CliError::Dataset(v);
    let meta_path = dir.join("meta.json");
    let meta: Meta = match std::fs::read_to_string(&meta_path) {
        Ok(t) => serde_json::from_str(&t).map_err(|e| fail(vec![format!("meta.json: {e}")]))?,
        Err(e) => return Err(fail(vec![format!("{}: {e}", meta_path.display())])),
    };
    let mut issues = Vec::new();
    if meta.channels == 0 {
        issues.push("meta.json: channels must be at least 1".into());
    }
    if meta.task == Task::Classify && meta.classes == Some(0) {
        issues.push("meta.json: classes must be at least 1".into());
    }
    let labels = std::fs::read_to_string(dir.join("labels.csv"))
        .map_err(|e| fail(vec![format!("labels.csv: {e}")]))?;
    let mut rows = labels.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<String> = match rows.next() {
        Some((_, h)) => h.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(fail(vec!["labels.csv: empty".into()])),
    };
    if header.first().map(String::as_str) != Some("file") || header.len() < 2 {
        issues.push(format!("labels.csv:1: header must be `file,label[,...]`, got {:?}", header.join(",")));
        return Err(fail(issues));
    }
    if meta.task == Task::Classify && header.len() != 2 {
        issues.push("labels.csv:1: classification takes exactly one label column".into());
    }
    let mut files = Vec::new();
    let mut targets = Vec::new();
    let mut seen = BTreeSet::new();
    for (ln, line) in rows {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            issues.push(format!("labels.csv:{}: {} columns, expected {}", ln + 1, cells.len(), header.len()));
            continue;
        }
        let file = cells[0].to_string();
        if !seen.insert(file.clone()) {
            issues.push(format!("labels.csv:{}: duplicate entry {file:?}", ln + 1));
            continue;
        }
        let target = match meta.task {
            Task::Classify => match cells[1].parse::<usize>() {
                Ok(c) if meta.classes.is_none_or(|k| c < k) => Some(Target::Class(c)),
                Ok(c) => {
                    issues.push(format!("labels.csv:{}: label {c} outside 0..{}", ln + 1, meta.classes.unwrap()));
                    None
                }
                Err(_) => {
                    issues.push(format!("labels.csv:{}: label {:?} is not a class index", ln + 1, cells[1]));
                    None
                }
            },
            Task::Regress => {
                let v: Result<Vec<f64>, _> = cells[1..].iter().map(|c| c.parse::<f64>()).collect();
                match v {
                    Ok(v) if v.iter().all(|x| x.is_finite()) => Some(Target::Values(v)),
                    _ => {
                        issues.push(format!("labels.csv:{}: targets must be finite numbers", ln + 1));
                        None
                    }
                }
            }
        };
        files.push(file);
        targets.push(target);
    }
    if files.is_empty() {
        issues.push("labels.csv: no entries".into());
    }
    let mut on_disk = BTreeSet::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            let n = e.file_name().to_string_lossy().into_owned();
            if n.ends_with(".csv") && n != "labels.csv" {
                on_disk.insert(n);
            }
        }
    }
    for f in on_disk.difference(&seen) {
        issues.push(format!("{f}: not listed in labels.csv"));
    }
    let mut inputs = Vec::new();
    for f in &files {
        if !on_disk.contains(f) {
            issues.push(format!("{f}: listed in labels.csv but missing"));
            continue;
        }
        if let Some(s) = read_sequence(&dir.join(f), f, &meta, &mut issues) {
            inputs.push(s);
        }
    }
    if !issues.is_empty() {
        return Err(fail(issues));
    }
    let targets = targets.into_iter().map(|t| t.expect("validated")).collect();
    Ok(Dataset { batch: Batch { inputs, targets, task: meta.task }, meta })
}

/// Write `batch` in the on-disk layout.
pub fn write_dataset(run: &mut Run, batch: &Batch, dt_semantics: TimeSemantics, classes: Option<usize>) -> CliResult<()> {
    let channels = batch.inputs.first().map_or(0, |s| s.channels());
    let width = batch.len().to_string().len().max(5);
    let mut labels = run.create("labels.csv")?;
    let k = match batch.targets.first() {
        Some(Target::Values(v)) => v.len(),
        _ => 1,
    };
    let cols: Vec<String> = if batch.task == Task::Classify || k == 1 {
        vec!["label".into()]
    } else {
        (0..k).map(|i| format!("y{i}")).collect()
    };
    writeln!(labels, "file,{}", cols.join(","))?;
    for (n, (x, y)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        let name = format!("seq_{n:0width$}.csv");
        let mut w = run.create(&name)?;
        let header: Vec<String> = (0..channels).map(|c| format!("c{c}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in &x.values {
            let r: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", r.join(","))?;
        }
        w.flush()?;
        let label = match y {
            Target::Class(c) => c.to_string(),
            Target::Values(v) => v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(","),
            Target::Sequence(_) => return Err(CliError::Config("sequence targets cannot be written as labels".into())),
        };
        writeln!(labels, "{name},{label}")?;
    }
    labels.flush()?;
    let meta = Meta { channels, dt_semantics, task: batch.task, classes };
    run.write_json("meta.json", &meta)?;
    Ok(())
}

/// The synthetic tone-discrimination task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub classes: Vec<f64>,
    pub noise_sigma: f64,
    pub n_per_class: usize,
    pub steps: usize,
    pub dt: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection { classes: vec![5.0, 15.0], noise_sigma: 0.5, n_per_class: 50, steps: 200, dt: 0.01 }
    }
}

impl TaskSection {
    pub fn generate(&self, seed: u64) -> CliResult<Batch> {
        Ok(make_frequency_discrimination_task(&self.classes, self.noise_sigma, self.n_per_class, self.steps, self.dt, seed)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MakeDatasetConfig {
    pub seed: u64,
    pub task: TaskSection,
}

impl CommandConfig for MakeDatasetConfig {
    fn seed_override(seed: u64) -> Option<(&'static str, toml::Value)> {
        Some(("seed", toml::Value::Integer(seed as i64)))
    }
}

pub fn run_make(cfg: &MakeDatasetConfig, run: &mut Run) -> CliResult<serde_json::Value> {
    let batch = cfg.task.generate(cfg.seed)?;
    write_dataset(run, &batch, TimeSemantics::Physical { dt: cfg.task.dt }, Some(cfg.task.classes.len()))?;
    Ok(json!({ "sequences": batch.len(), "classes": cfg.task.classes.len() }))
}

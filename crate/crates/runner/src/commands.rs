//! Single-step commands: generate data, train one model, probe one model.
//! Each writes its bulky outputs (datasets, checkpoints) straight into the
//! run directory and returns the metric tables like an experiment does.

use std::path::{Path, PathBuf};

use pnpslab_core::datagen::{self, inject_marker_bias, sample_dataset, Dataset, FeatureHandle, Split, TaskId};
use pnpslab_core::neuralnet::ModelState;
use pnpslab_core::repranalysis::{extract_representations, mdl_online_code, train_linear_probe};
use pnpslab_core::training::{train, TrainMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{RunError, RunResult};
use crate::record::{Artifact, ExperimentOutput};

/// Optional marker injection applied to every generated split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkerInjection {
    pub prevalence: f64,
    pub strength: f64,
    pub target_label: usize,
}

fn ensure_dir(dir: &Path) -> RunResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))
}

fn build_split(
    cfg: &ExperimentConfig,
    task: TaskId,
    strength: f64,
    seed: u64,
    split: Split,
    n: usize,
    marker: Option<MarkerInjection>,
) -> RunResult<Dataset> {
    let spec = match marker {
        Some(_) => cfg.task.spec_with_marker(task, strength, seed),
        None => cfg.task.spec(task, strength, seed),
    };
    let d = sample_dataset(&spec, n, split)?;
    match marker {
        Some(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(50 + split as u64);
            Ok(inject_marker_bias(&d, m.prevalence, m.strength, m.target_label, &mut rng)?)
        }
        None => Ok(d),
    }
}

/// Writes train/dev/test JSONL files (with header sidecars) under `dir/data`.
pub fn generate(
    cfg: &ExperimentConfig,
    task: TaskId,
    strength: f64,
    marker: Option<MarkerInjection>,
    dir: &Path,
) -> RunResult<ExperimentOutput> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let data_dir = dir.join("data");
    ensure_dir(&data_dir)?;
    let mut out = ExperimentOutput::default();
    let mut summary = String::from("split,n,label_0,label_1,label_2,feature_rate\n");
    for (split, n) in [(Split::Train, cfg.data.n_train), (Split::Dev, cfg.data.n_dev), (Split::Test, cfg.data.n_eval)] {
        let d = build_split(cfg, task, strength, seed, split, n, marker)?;
        let path = data_dir.join(format!("{task}_{split}.jsonl"));
        datagen::serialize(&d, &path)?;
        out.files.push(rel(dir, &path));
        out.files.push(rel(dir, &datagen::header_path(&path)));
        let mut counts = [0usize; 3];
        for e in &d.examples {
            counts[e.label] += 1;
        }
        let feature = FeatureHandle::reserved(&d.spec);
        let rate = d.examples.iter().filter(|e| feature.detect(e) == 1).count() as f64 / d.len() as f64;
        summary.push_str(&format!("{split},{},{},{},{},{rate:.6}\n", d.len(), counts[0], counts[1], counts[2]));
        out.summary.insert(format!("{split}.n"), d.len() as f64);
    }
    out.artifacts.push(Artifact::metrics("data_summary.csv", summary));
    Ok(out)
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

/// Trains one model. Data comes from `train_path`/`dev_path` when given,
/// otherwise it is generated from the config.
pub struct TrainRequest {
    pub task: TaskId,
    pub strength: f64,
    pub method: TrainMethod,
    pub feature: String,
    pub marker: Option<MarkerInjection>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn train_one(cfg: &ExperimentConfig, req: &TrainRequest, dir: &Path) -> RunResult<ExperimentOutput> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let load_or_build = |path: &Option<PathBuf>, split: Split, n: usize| -> RunResult<Dataset> {
        match path {
            Some(p) => Ok(datagen::deserialize(p)?.with_split(split)),
            None => build_split(cfg, req.task, req.strength, seed, split, n, req.marker),
        }
    };
    let train_set = load_or_build(&req.train_path, Split::Train, cfg.data.n_train)?;
    let dev = load_or_build(&req.dev_path, Split::Dev, cfg.data.n_dev)?;
    let spec = train_set.spec.clone();
    let feature = FeatureHandle::by_name(&spec, &req.feature)?;
    let model = ModelState::<f64>::init(cfg.model.config(&spec, seed))?;
    let tc = cfg.train_config(spec.task_id, req.method, seed);
    let outcome = train(model, &train_set, Some(&dev), Some(&feature), &tc)?;

    ensure_dir(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    outcome.model.save(&ckpt)?;
    let mut buf = Vec::new();
    outcome.history.write_csv(&mut buf)?;
    let mut out = ExperimentOutput::default();
    out.files.push(CHECKPOINT_FILE.to_string());
    out.artifacts.push(Artifact::metrics("history.csv", String::from_utf8(buf).expect("utf-8")));
    if let Some(a) = outcome.history.final_accuracy(Split::Dev) {
        out.summary.insert("dev_accuracy".into(), a);
    }
    out.summary.insert("train_size".into(), outcome.train_size as f64);
    Ok(out)
}

/// Probe accuracy and online codelength of `feature` in a saved model.
pub fn probe_one(
    cfg: &ExperimentConfig,
    model_path: &Path,
    data_path: &Path,
    feature: &str,
) -> RunResult<ExperimentOutput> {
    cfg.validate()?;
    let model = ModelState::<f64>::load(model_path)?;
    let data = datagen::deserialize(data_path)?;
    let handle = FeatureHandle::by_name(&data.spec, feature)?;
    let reps = extract_representations(&model, &data, &handle)?;
    let probe_cfg = cfg.probe_config(cfg.seeds[0]);
    let report = train_linear_probe(&reps.reps, &reps.probe_labels, &probe_cfg)?;
    let mdl = mdl_online_code(&reps.reps, &reps.probe_labels, 2, &cfg.mdl_schedule, &probe_cfg)?;
    let mut buf = Vec::new();
    mdl.write_csv(&mut buf)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(Artifact::metrics("mdl.csv", String::from_utf8(buf).expect("utf-8")));
    out.summary.insert("probe_accuracy".into(), report.accuracy);
    out.summary.insert("compression".into(), mdl.compression);
    out.summary.insert("online_bits".into(), mdl.online_bits);
    out.summary.insert("uniform_bits".into(), mdl.uniform_bits);
    Ok(out)
}

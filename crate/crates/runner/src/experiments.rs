//! Experiment drivers. Each returns its metric tables, chart specs and
//! headline numbers without touching the filesystem; independent cells run
//! in parallel and are collected in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pnpslab_core::datagen::{inject_marker_bias, sample_dataset, Dataset, FeatureHandle, Split, TaskId, TaskSpec};
use pnpslab_core::neuralnet::ModelState;
use pnpslab_core::oracle::{pn_marginal_exact, write_pnps_csv, Mode, PnpsRow};
use pnpslab_core::repranalysis::{
    balanced_indices, extract_representations, inlp, mdl_online_code, train_linear_probe, write_inlp_csv,
    InlpRow, MdlReport, RepMatrix,
};
use pnpslab_core::training::{cross_group_experiment, train, CrossGroupConfig, TrainMethod, TrainOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::RunResult;
use crate::plot::{Channel, ChartSpec};
use crate::record::{Artifact, ExperimentOutput};

pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> RunResult<ExperimentOutput> {
    cfg.validate()?;
    match kind {
        ExperimentKind::PnpsReport => run_pnps_report(cfg),
        ExperimentKind::BiasSweep => run_bias_sweep(cfg),
        ExperimentKind::InlpSweep => run_inlp_sweep(cfg),
        ExperimentKind::CrossGroup => run_cross_group(cfg),
        ExperimentKind::MethodTable => run_method_table(cfg),
    }
}

/// Median that sorts infinities to the ends and NaN last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn fmt6(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "NA".into()
    }
}

fn strength_tag(b: f64) -> String {
    format!("{b}")
}

const STREAM_INJECT_TRAIN: u64 = 30;
const STREAM_INJECT_DEV: u64 = 31;
const STREAM_INJECT_PROBE: u64 = 32;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains one model with the experiment's settings.
fn fit(
    cfg: &ExperimentConfig,
    spec: &TaskSpec,
    train_set: &Dataset,
    dev: &Dataset,
    feature: &FeatureHandle,
    method: TrainMethod,
    seed: u64,
) -> RunResult<TrainOutcome<f64>> {
    let model = ModelState::<f64>::init(cfg.model.config(spec, seed))?;
    let tc = cfg.train_config(spec.task_id, method, seed);
    Ok(train(model, train_set, Some(dev), Some(feature), &tc)?)
}

/// Online codelength and held-out probe accuracy of `feature` in the model's
/// representations, on probe data balanced by feature value.
#[derive(Clone, Debug)]
struct Extractability {
    mdl: MdlReport,
    probe_acc: f64,
}

fn extractability(
    cfg: &ExperimentConfig,
    model: &ModelState<f64>,
    probe_data: &Dataset,
    feature: &FeatureHandle,
    seed: u64,
) -> RunResult<Extractability> {
    let reps = extract_representations(model, probe_data, feature)?;
    let mut rng = rng_for(seed, 40);
    let all: Vec<usize> = (0..reps.len()).collect();
    let rows = balanced_indices(&reps.probe_labels, &all, &mut rng);
    let x = reps.reps.select_rows(&rows);
    let y: Vec<usize> = rows.iter().map(|&i| reps.probe_labels[i]).collect();
    let probe_cfg = cfg.probe_config(seed);
    let mdl = mdl_online_code(&x, &y, 2, &cfg.mdl_schedule, &probe_cfg)?;
    let probe_acc = train_linear_probe(&x, &y, &probe_cfg)?.accuracy;
    Ok(Extractability { mdl, probe_acc })
}

fn history_csv(outcome: &TrainOutcome<f64>) -> RunResult<String> {
    let mut buf = Vec::new();
    outcome.history.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("utf-8 csv"))
}

fn mdl_csv(report: &MdlReport) -> RunResult<String> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("utf-8 csv"))
}

/// Exact and Monte-Carlo PN/PS for every task, feature and target label.
pub fn run_pnps_report(cfg: &ExperimentConfig) -> RunResult<ExperimentOutput> {
    let seed = cfg.seeds[0];
    let p = &cfg.pnps;
    let jobs: Vec<(TaskId, bool, usize)> = TaskId::ALL
        .iter()
        .flat_map(|&t| {
            let feats: &[bool] = if p.include_marker { &[false, true] } else { &[false] };
            feats
                .iter()
                .flat_map(move |&m| (0..t.n_classes()).map(move |y| (t, m, y)))
        })
        .collect();
    let rows: Vec<Vec<PnpsRow>> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(task, marker, target))| -> RunResult<Vec<PnpsRow>> {
            let spec = if p.include_marker {
                cfg.task.spec_with_marker(task, p.strength, seed)
            } else {
                cfg.task.spec(task, p.strength, seed)
            };
            let feature = if marker {
                FeatureHandle::marker(&spec)?
            } else {
                FeatureHandle::reserved(&spec)
            };
            let mut rng = rng_for(seed, 100 + j as u64);
            let exact = PnpsRow::compute(&spec, &feature, target, Mode::Exact, &mut rng)?;
            let mc = PnpsRow::compute(&spec, &feature, target, Mode::MonteCarlo { n_samples: p.mc_samples }, &mut rng)?;
            Ok(vec![exact, mc])
        })
        .collect::<RunResult<_>>()?;
    let rows: Vec<PnpsRow> = rows.into_iter().flatten().collect();

    let mut buf = Vec::new();
    write_pnps_csv(&mut buf, &rows, p.threshold)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(Artifact::metrics("pnps.csv", String::from_utf8(buf).expect("utf-8")));
    out.artifacts.push(Artifact::plot(
        "pnps_plot.json",
        ChartSpec::new("PN vs PS by feature", "pnps.csv", "point", Channel::quantitative("pn"), Channel::quantitative("ps"))
            .color(Channel::nominal("feature"))
            .column(Channel::nominal("task"))
            .render(),
    ));
    for r in &rows {
        let key = format!("{}.{}.y{}.{}", r.task, r.feature, r.target_label, r.method);
        out.summary.insert(format!("{key}.pn"), r.pn.as_ref().map_or(f64::NAN, |e| e.value));
        out.summary.insert(format!("{key}.ps"), r.ps.as_ref().map_or(f64::NAN, |e| e.value));
    }
    Ok(out)
}

/// Train on the feature-present side only and test on both sides.
pub fn run_cross_group(cfg: &ExperimentConfig) -> RunResult<ExperimentOutput> {
    let cg = &cfg.cross_group;
    let jobs: Vec<(TaskId, u64)> = cg
        .tasks
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(task, seed)| {
            let spec = cfg.task.spec(task, cg.strength, seed);
            let feature = FeatureHandle::reserved(&spec);
            let c = CrossGroupConfig {
                n_train: cg.n_pool,
                n_test: cg.n_test,
                model: cfg.model.config(&spec, seed),
                train: cfg.train_config(task, TrainMethod::Erm, seed),
            };
            Ok(cross_group_experiment::<f64>(&spec, &feature, &c)?)
        })
        .collect::<RunResult<Vec<_>>>()?;

    let mut csv = String::from("task,seed,panel,feature_value,n,accuracy,train_size\n");
    let mut by_task: BTreeMap<TaskId, Vec<(f64, f64)>> = BTreeMap::new();
    for (&(task, seed), r) in jobs.iter().zip(&reports) {
        for p in &r.panels {
            writeln!(csv, "{task},{seed},{},{},{},{},{}", p.panel, p.feature_value, p.n, fmt6(p.accuracy), r.train_size)
                .expect("string write");
        }
        by_task
            .entry(task)
            .or_default()
            .push((r.in_group().accuracy, r.out_group().accuracy));
    }
    let mut out = ExperimentOutput::default();
    out.artifacts.push(Artifact::metrics("cross_group.csv", csv));
    out.artifacts.push(Artifact::plot(
        "cross_group_plot.json",
        ChartSpec::new("Accuracy on the trained and held-out group", "cross_group.csv", "bar", Channel::nominal("panel"), Channel::quantitative("accuracy"))
            .column(Channel::nominal("task"))
            .aggregate("median")
            .render(),
    ));
    for (task, v) in by_task {
        let ins: Vec<f64> = v.iter().map(|p| p.0).collect();
        let outs: Vec<f64> = v.iter().map(|p| p.1).collect();
        let gaps: Vec<f64> = v.iter().map(|p| (p.0 - p.1).abs()).collect();
        out.summary.insert(format!("{task}.in_group_median"), median(&ins));
        out.summary.insert(format!("{task}.out_group_median"), median(&outs));
        out.summary.insert(format!("{task}.gap_median"), median(&gaps));
    }
    Ok(out)
}

/// First row whose probe accuracy is at or below `level`.
pub fn first_at_or_below(history: &[InlpRow], level: f64) -> Option<&InlpRow> {
    history.iter().find(|r| r.probe_acc <= level)
}

struct InlpCell {
    task: TaskId,
    seed: u64,
    pn: f64,
    history: Vec<InlpRow>,
    status: String,
    dev_acc: f64,
}

/// Removes the reserved-token information from trained representations
/// and tracks task accuracy along the way.
pub fn run_inlp_sweep(cfg: &ExperimentConfig) -> RunResult<ExperimentOutput> {
    let s = &cfg.inlp;
    let jobs: Vec<(TaskId, u64)> = s
        .tasks
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&seed| (t, seed)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(task, seed)| -> RunResult<InlpCell> {
            let spec = cfg.task.spec(task, s.train_strength, seed);
            let feature = FeatureHandle::reserved(&spec);
            let train_set = sample_dataset(&spec, cfg.n_train(task), Split::Train)?;
            let dev = sample_dataset(&spec, cfg.data.n_dev, Split::Dev)?;
            let outcome = fit(cfg, &spec, &train_set, &dev, &feature, TrainMethod::Erm, seed)?;
            let pool = sample_dataset(&spec, cfg.data.n_probe + cfg.data.n_eval, Split::Test)?;
            let train_idx: Vec<usize> = (0..cfg.data.n_probe).collect();
            let eval_idx: Vec<usize> = (cfg.data.n_probe..pool.len()).collect();
            let rt: RepMatrix<f64> = extract_representations(&outcome.model, &pool.subset(&train_idx), &feature)?;
            let re = extract_representations(&outcome.model, &pool.subset(&eval_idx), &feature)?;
            let result = inlp(&rt, &re, &cfg.inlp_config(seed))?;
            let pn = (0..spec.n_classes())
                .filter_map(|y| pn_marginal_exact::<f64>(&spec, &feature, y).ok())
                .map(|e| e.value)
                .fold(0.0, f64::max);
            Ok(InlpCell {
                task,
                seed,
                pn,
                history: result.history,
                status: result.status.to_string(),
                dev_acc: outcome.history.final_accuracy(Split::Dev).unwrap_or(f64::NAN),
            })
        })
        .collect::<RunResult<Vec<_>>>()?;

    let mut out = ExperimentOutput::default();
    let mut all = String::from("task,seed,iteration,rank,probe_acc,task_acc_overall,task_acc_minority\n");
    let mut status = String::from("task,seed,pn,status,iterations,dev_acc\n");
    let mut by_task: BTreeMap<TaskId, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in &cells {
        let mut buf = Vec::new();
        write_inlp_csv(&mut buf, &c.history)?;
        out.artifacts.push(Artifact::metrics(
            format!("inlp/{}_seed{}.csv", c.task, c.seed),
            String::from_utf8(buf).expect("utf-8"),
        ));
        for r in &c.history {
            writeln!(
                all,
                "{},{},{},{},{},{},{}",
                c.task,
                c.seed,
                r.iteration,
                r.rank,
                fmt6(r.probe_acc),
                fmt6(r.task_acc_overall),
                fmt6(r.task_acc_minority.unwrap_or(f64::NAN))
            )
            .expect("string write");
        }
        writeln!(status, "{},{},{},{},{},{}", c.task, c.seed, fmt6(c.pn), c.status, c.history.len() - 1, fmt6(c.dev_acc))
            .expect("string write");

        let start = &c.history[0];
        // Never reaching the level counts as the worst outcome for the seed.
        let change = first_at_or_below(&c.history, s.low_pn_probe_level)
            .map_or(f64::INFINITY, |r| (r.task_acc_overall - start.task_acc_overall).abs());
        let drop = match (first_at_or_below(&c.history, s.high_pn_probe_level), start.task_acc_minority) {
            (Some(r), Some(m0)) => r.task_acc_minority.map_or(f64::NEG_INFINITY, |m| m0 - m),
            _ => f64::NEG_INFINITY,
        };
        let e = by_task.entry(c.task).or_insert((c.pn, Vec::new(), Vec::new()));
        e.1.push(change);
        e.2.push(drop);
    }
    out.artifacts.push(Artifact::metrics("inlp_all.csv", all));
    out.artifacts.push(Artifact::metrics("inlp_status.csv", status));
    out.artifacts.push(Artifact::plot(
        "inlp_plot.json",
        ChartSpec::new("Task accuracy during null-space projection", "inlp_all.csv", "line", Channel::quantitative("iteration"), Channel::quantitative("task_acc_minority"))
            .color(Channel::nominal("seed"))
            .column(Channel::nominal("task"))
            .render(),
    ));
    for (task, (pn, changes, drops)) in by_task {
        out.summary.insert(format!("{task}.pn"), pn);
        out.summary.insert(format!("{task}.overall_change_median"), median(&changes));
        out.summary.insert(format!("{task}.minority_drop_median"), median(&drops));
    }
    Ok(out)
}

/// Reserved-token extractability after training at each bias strength.
pub fn run_bias_sweep(cfg: &ExperimentConfig) -> RunResult<ExperimentOutput> {
    let s = &cfg.sweep;
    let mut jobs = Vec::new();
    for &task in &s.tasks {
        for &b in &s.strengths {
            for &seed in &cfg.seeds {
                jobs.push((task, b, seed));
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(task, b, seed)| -> RunResult<(Extractability, f64)> {
            let spec = cfg.task.spec(task, b, seed);
            let feature = FeatureHandle::reserved(&spec);
            let train_set = sample_dataset(&spec, cfg.n_train(task), Split::Train)?;
            let dev = sample_dataset(&spec, cfg.data.n_dev, Split::Dev)?;
            let outcome = fit(cfg, &spec, &train_set, &dev, &feature, TrainMethod::Erm, seed)?;
            let probe_spec = cfg.task.spec(task, s.probe_strength, seed);
            let probe_data = sample_dataset(&probe_spec, cfg.data.n_probe, Split::Test)?;
            let ex = extractability(cfg, &outcome.model, &probe_data, &feature, seed)?;
            let dev_acc = outcome.history.final_accuracy(Split::Dev).unwrap_or(f64::NAN);
            Ok((ex, dev_acc))
        })
        .collect::<RunResult<Vec<_>>>()?;

    let mut out = ExperimentOutput::default();
    let mut csv = String::from("task,strength,seed,compression,online_bits,uniform_bits,probe_acc,dev_acc\n");
    let mut by_cell: BTreeMap<(TaskId, String), Vec<f64>> = BTreeMap::new();
    for (&(task, b, seed), (ex, dev_acc)) in jobs.iter().zip(&cells) {
        writeln!(
            csv,
            "{task},{b},{seed},{},{},{},{},{}",
            fmt6(ex.mdl.compression),
            fmt6(ex.mdl.online_bits),
            fmt6(ex.mdl.uniform_bits),
            fmt6(ex.probe_acc),
            fmt6(*dev_acc)
        )
        .expect("string write");
        out.artifacts.push(Artifact::metrics(
            format!("mdl/{task}_b{}_seed{seed}.csv", strength_tag(b)),
            mdl_csv(&ex.mdl)?,
        ));
        by_cell.entry((task, strength_tag(b))).or_default().push(ex.mdl.compression);
    }
    out.artifacts.push(Artifact::metrics("sweep.csv", csv));
    out.artifacts.push(Artifact::plot(
        "sweep_plot.json",
        ChartSpec::new("Compression of the reserved token vs bias strength", "sweep.csv", "line", Channel::quantitative("strength"), Channel::quantitative("compression"))
            .color(Channel::nominal("task"))
            .aggregate("median")
            .render(),
    ));
    for ((task, b), v) in &by_cell {
        out.summary.insert(format!("{task}.b{b}.compression_median"), median(v));
    }
    let lo = s.strengths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.strengths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &task in &s.tasks {
        let at = |b: f64| median(&by_cell[&(task, strength_tag(b))]);
        out.summary.insert(format!("{task}.ratio_weakest_to_strongest"), at(lo) / at(hi));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Cell {
    LowPn,
    HighPn,
}

impl Cell {
    fn as_str(self) -> &'static str {
        match self {
            Cell::LowPn => "low_pn",
            Cell::HighPn => "high_pn",
        }
    }
}

/// Train, dev and probe data plus the probed feature for one table cell.
fn cell_data(cfg: &ExperimentConfig, cell: Cell, seed: u64) -> RunResult<(TaskSpec, FeatureHandle, Dataset, Dataset, Dataset)> {
    match cell {
        Cell::LowPn => {
            let c = &cfg.method_table.low_pn;
            let spec = cfg.task.spec_with_marker(c.task, c.strength, seed);
            let feature = FeatureHandle::marker(&spec)?;
            let inject = |d: Dataset, stream: u64| {
                inject_marker_bias(&d, c.prevalence, c.marker_strength, c.target_label, &mut rng_for(seed, stream))
            };
            let n_train = c.n_train.unwrap_or(cfg.n_train(c.task));
            let train_set = inject(sample_dataset(&spec, n_train, Split::Train)?, STREAM_INJECT_TRAIN)?;
            let dev = inject(sample_dataset(&spec, cfg.data.n_dev, Split::Dev)?, STREAM_INJECT_DEV)?;
            // Marked probe examples keep the base label rate, so the marker
            // carries no label information there.
            let probe = sample_dataset(&spec, cfg.data.n_probe, Split::Test)?;
            let base_rate = probe.examples.iter().filter(|e| e.label == c.target_label).count() as f64 / probe.len() as f64;
            let probe = inject_marker_bias(&probe, c.probe_prevalence, base_rate, c.target_label, &mut rng_for(seed, STREAM_INJECT_PROBE))?;
            Ok((spec, feature, train_set, dev, probe))
        }
        Cell::HighPn => {
            let c = &cfg.method_table.high_pn;
            let spec = cfg.task.spec(c.task, c.strength, seed);
            let feature = FeatureHandle::reserved(&spec);
            let train_set = sample_dataset(&spec, c.n_train.unwrap_or(cfg.n_train(c.task)), Split::Train)?;
            let dev = sample_dataset(&spec, cfg.data.n_dev, Split::Dev)?;
            let probe = sample_dataset(&cfg.task.spec(c.task, c.probe_strength, seed), cfg.data.n_probe, Split::Test)?;
            Ok((spec, feature, train_set, dev, probe))
        }
    }
}

/// Extractability of a low-PN and a high-PN feature under every training
/// method.
pub fn run_method_table(cfg: &ExperimentConfig) -> RunResult<ExperimentOutput> {
    let mt = &cfg.method_table;
    let mut jobs = Vec::new();
    for cell in [Cell::LowPn, Cell::HighPn] {
        for &method in &mt.methods {
            for &seed in &cfg.seeds {
                jobs.push((cell, method, seed));
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(cell, method, seed)| -> RunResult<(Extractability, f64, f64, String)> {
            let (spec, feature, train_set, dev, probe) = cell_data(cfg, cell, seed)?;
            let outcome = fit(cfg, &spec, &train_set, &dev, &feature, method, seed)?;
            let ex = extractability(cfg, &outcome.model, &probe, &feature, seed)?;
            let final_epoch = outcome.history.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
            let dev_rows: Vec<_> = outcome
                .history
                .rows
                .iter()
                .filter(|r| r.split == Split::Dev && r.epoch == final_epoch && r.group != "all")
                .collect();
            let worst = dev_rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
            let dev_acc = outcome.history.final_accuracy(Split::Dev).unwrap_or(f64::NAN);
            Ok((ex, dev_acc, worst, history_csv(&outcome)?))
        })
        .collect::<RunResult<Vec<_>>>()?;

    let mut out = ExperimentOutput::default();
    let mut csv = String::from("cell,task,feature,method,seed,compression,probe_acc,dev_acc,dev_worst_group_acc\n");
    let mut by: BTreeMap<(Cell, TrainMethod), Vec<f64>> = BTreeMap::new();
    for (&(cell, method, seed), (ex, dev_acc, worst, hist)) in jobs.iter().zip(&cells) {
        let (task, feature) = match cell {
            Cell::LowPn => (mt.low_pn.task, "marker"),
            Cell::HighPn => (mt.high_pn.task, "reserved"),
        };
        writeln!(
            csv,
            "{},{task},{feature},{method},{seed},{},{},{},{}",
            cell.as_str(),
            fmt6(ex.mdl.compression),
            fmt6(ex.probe_acc),
            fmt6(*dev_acc),
            fmt6(*worst)
        )
        .expect("string write");
        out.artifacts.push(Artifact::metrics(format!("history/{}_{method}_seed{seed}.csv", cell.as_str()), hist.clone()));
        out.artifacts.push(Artifact::metrics(format!("mdl/{}_{method}_seed{seed}.csv", cell.as_str()), mdl_csv(&ex.mdl)?));
        by.entry((cell, method)).or_default().push(ex.mdl.compression);
    }
    out.artifacts.push(Artifact::metrics("method_table.csv", csv));
    out.artifacts.push(Artifact::plot(
        "method_table_plot.json",
        ChartSpec::new("Compression by training method", "method_table.csv", "bar", Channel::nominal("method"), Channel::quantitative("compression"))
            .column(Channel::nominal("cell"))
            .aggregate("median")
            .render(),
    ));
    for ((cell, method), v) in &by {
        let m = median(v);
        out.summary.insert(format!("{}.{method}.compression_median", cell.as_str()), m);
        if let Some(erm) = by.get(&(*cell, TrainMethod::Erm)) {
            out.summary.insert(format!("{}.{method}.ratio_to_erm", cell.as_str()), m / median(erm));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_parity_and_infinity() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::INFINITY, 1.0, 2.0]), 2.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn pnps_report_is_deterministic() {
        let mut cfg = ExperimentConfig::for_experiment(ExperimentKind::PnpsReport);
        cfg.pnps.mc_samples = 200;
        let a = run(ExperimentKind::PnpsReport, &cfg).unwrap();
        let b = run(ExperimentKind::PnpsReport, &cfg).unwrap();
        assert_eq!(a.artifact("pnps.csv"), b.artifact("pnps.csv"));
        assert_eq!(a.metric("A.reserved.y1.exact.pn"), Some(0.0));
        assert_eq!(a.metric("B.reserved.y1.exact.ps"), Some(1.0));
    }
}

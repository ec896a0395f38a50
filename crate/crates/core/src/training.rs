//! Training loop with five objectives (plain cross-entropy, group-balanced
//! subsampling, product-of-experts, debiased focal loss, Group-DRO) and
//! per-group evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    balance_labels, group_split, sample_dataset, subsample_balanced, Dataset, Example,
    FeatureHandle, Group, Split, TaskSpec, TokenId,
};
use crate::error::{Error, Result};
use crate::linalg::{argmax, log_sum_exp, Matrix};
use crate::neuralnet::{Adam, Batch, BiasOnlyModel, ModelConfig, ModelState, Parameters};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Erm,
    Subsample,
    Poe,
    Dfl,
    GroupDro,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 5] = [
        TrainMethod::Erm,
        TrainMethod::Subsample,
        TrainMethod::Poe,
        TrainMethod::Dfl,
        TrainMethod::GroupDro,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMethod::Erm => "erm",
            TrainMethod::Subsample => "subsample",
            TrainMethod::Poe => "poe",
            TrainMethod::Dfl => "dfl",
            TrainMethod::GroupDro => "group_dro",
        }
    }

    /// Whether the method needs feature annotations on the training data.
    pub fn needs_feature(self) -> bool {
        self != TrainMethod::Erm
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training method `{s}`")))
    }
}

fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_gamma() -> f64 {
    2.0
}
fn default_eta() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_method() -> TrainMethod {
    TrainMethod::Erm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_method")]
    pub method: TrainMethod,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_gamma")]
    pub dfl_gamma: f64,
    #[serde(default = "default_eta")]
    pub dro_eta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Record training-split metrics in the history after every epoch.
    #[serde(default = "default_true")]
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            dfl_gamma: default_gamma(),
            dro_eta: default_eta(),
            seed: 0,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn with_method(mut self, method: TrainMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if !(self.dfl_gamma >= 0.0 && self.dfl_gamma.is_finite()) {
            return Err(Error::Config("dfl_gamma must be >= 0".into()));
        }
        if !(self.dro_eta > 0.0 && self.dro_eta.is_finite()) {
            return Err(Error::Config("dro_eta must be > 0".into()));
        }
        Ok(())
    }
}

/// Accuracy, count and mean loss of one (feature, label) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub n: usize,
    pub correct: usize,
    pub loss_sum: f64,
}

impl GroupStats {
    fn empty() -> Self {
        Self {
            n: 0,
            correct: 0,
            loss_sum: 0.0,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupTable {
    /// Only groups with at least one example appear.
    pub groups: BTreeMap<Group, GroupStats>,
    pub overall: GroupStats,
    /// Per-label accuracy, `None` where the label has no examples.
    pub per_class: Vec<Option<f64>>,
    pub minority: Option<Group>,
}

impl GroupTable {
    pub fn overall_accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn accuracy(&self, g: Group) -> Option<f64> {
        self.groups.get(&g).map(GroupStats::accuracy)
    }

    pub fn minority_accuracy(&self) -> Option<f64> {
        self.minority.and_then(|g| self.accuracy(g))
    }

    /// Re-tags the minority group using reference (training) counts.
    pub fn with_minority_from(mut self, reference: &BTreeMap<Group, usize>) -> Self {
        self.minority = minority_group(reference);
        self
    }
}

/// Smallest non-empty group; ties go to the lowest group.
pub fn minority_group(counts: &BTreeMap<Group, usize>) -> Option<Group> {
    counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .min_by_key(|(g, &c)| (c, **g))
        .map(|(g, _)| *g)
}

/// Predictions and per-example losses of the main model alone.
fn score<T: Scalar>(model: &ModelState<T>, examples: &[Example]) -> Result<Vec<(usize, f64)>> {
    let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let (logits, _) = model.forward_many(&seqs)?;
    Ok(examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let l = logits.row(i);
            (argmax(l), (log_sum_exp(l) - l[e.label]).as_f64())
        })
        .collect())
}

/// Per-group accuracy and loss of `model` on `dataset`. The minority group is
/// the smallest group of `dataset` itself; use
/// [`GroupTable::with_minority_from`] to tag it from training counts instead.
pub fn evaluate_groups<T: Scalar>(
    model: &ModelState<T>,
    dataset: &Dataset,
    feature: &FeatureHandle,
) -> Result<GroupTable> {
    let groups = dataset.groups(feature)?;
    let scores = score(model, &dataset.examples)?;
    Ok(tabulate(dataset, Some(&groups), &scores, model.config.n_classes))
}

fn tabulate(
    dataset: &Dataset,
    groups: Option<&[Group]>,
    scores: &[(usize, f64)],
    n_classes: usize,
) -> GroupTable {
    let mut table: BTreeMap<Group, GroupStats> = BTreeMap::new();
    let mut overall = GroupStats::empty();
    let mut class_n = vec![0usize; n_classes];
    let mut class_ok = vec![0usize; n_classes];
    for (i, (e, &(pred, loss))) in dataset.examples.iter().zip(scores).enumerate() {
        let ok = usize::from(pred == e.label);
        for s in std::iter::once(&mut overall).chain(
            groups
                .map(|g| table.entry(g[i]).or_insert_with(GroupStats::empty))
                .into_iter(),
        ) {
            s.n += 1;
            s.correct += ok;
            s.loss_sum += loss;
        }
        class_n[e.label] += 1;
        class_ok[e.label] += ok;
    }
    let counts: BTreeMap<Group, usize> = table.iter().map(|(g, s)| (*g, s.n)).collect();
    GroupTable {
        minority: minority_group(&counts),
        groups: table,
        overall,
        per_class: class_n
            .iter()
            .zip(&class_ok)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    /// `all` or a group key such as `f1_y0`.
    pub group: String,
    pub n: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub method: TrainMethod,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "epoch,split,group,n,loss,accuracy,method,seed";

impl History {
    fn record(&mut self, epoch: usize, split: Split, t: &GroupTable, method: TrainMethod, seed: u64) {
        let mut push = |group: String, s: &GroupStats| {
            self.rows.push(HistoryRow {
                epoch,
                split,
                group,
                n: s.n,
                loss: s.mean_loss(),
                accuracy: s.accuracy(),
                method,
                seed,
            })
        };
        push("all".into(), &t.overall);
        for (g, s) in &t.groups {
            push(g.key(), s);
        }
    }

    /// Overall accuracy on `split` after the last epoch.
    pub fn final_accuracy(&self, split: Split) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.group == "all")
            .map(|r| r.accuracy)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HISTORY_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{},{}",
                r.epoch, r.split, r.group, r.n, r.loss, r.accuracy, r.method, r.seed
            )?;
        }
        Ok(())
    }
}

/// Bias-only model fitted by maximum likelihood on (feature value, label)
/// counts with add-one smoothing, so every log-probability stays finite.
pub fn fit_bias_model<T: Scalar>(
    dataset: &Dataset,
    feature: &FeatureHandle,
) -> Result<BiasOnlyModel<T>> {
    let k = dataset.spec.n_classes();
    let mut counts = [vec![0usize; k], vec![0usize; k]];
    for g in dataset.groups(feature)? {
        counts[usize::from(g.feature.min(1))][g.label] += 1;
    }
    let mut table = Matrix::zeros(2, k);
    for (f, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (y, &c) in row.iter().enumerate() {
            table[(f, y)] = T::of(((c + 1) as f64 / (total + k) as f64).ln());
        }
    }
    Ok(BiasOnlyModel { table })
}

/// Multiplicative-weights state over groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDro {
    pub groups: Vec<Group>,
    pub q: Vec<f64>,
    pub eta: f64,
}

impl GroupDro {
    pub fn new(groups: Vec<Group>, eta: f64) -> Self {
        let n = groups.len();
        Self {
            groups,
            q: vec![1.0 / n as f64; n],
            eta,
        }
    }

    /// `q_g ← q_g · exp(η · L̄_g)` for every group present in the batch, then
    /// renormalize. Absent groups keep their unnormalized weight.
    pub fn update(&mut self, mean_losses: &[Option<f64>]) {
        // Shift exponents by their max so large losses cannot overflow.
        let shift = mean_losses
            .iter()
            .flatten()
            .fold(0.0f64, |m, &l| m.max(self.eta * l));
        for (q, l) in self.q.iter_mut().zip(mean_losses) {
            let e = l.map_or(0.0, |l| self.eta * l);
            *q *= (e - shift).exp();
        }
        let s: f64 = self.q.iter().sum();
        self.q.iter_mut().for_each(|q| *q /= s);
    }

    /// Per-example weights `q_g / n_g` after updating with this batch, where
    /// `n_g` counts the batch members of group g.
    pub fn step_weights(&mut self, group_of: &[usize], losses: &[f64]) -> Vec<f64> {
        let mut sum = vec![0.0; self.groups.len()];
        let mut cnt = vec![0usize; self.groups.len()];
        for (&g, &l) in group_of.iter().zip(losses) {
            sum[g] += l;
            cnt[g] += 1;
        }
        let means: Vec<Option<f64>> = sum
            .iter()
            .zip(&cnt)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        self.update(&means);
        group_of
            .iter()
            .map(|&g| self.q[g] / cnt[g] as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelState<T>,
    pub history: History,
    /// Training set actually used (differs from the input for `subsample`).
    pub train_size: usize,
    pub bias_model: Option<BiasOnlyModel<T>>,
    pub dro: Option<GroupDro>,
}

fn per_example_groups(
    dataset: &Dataset,
    feature: Option<&FeatureHandle>,
    method: TrainMethod,
) -> Result<Option<Vec<Group>>> {
    match feature {
        Some(f) => Ok(Some(dataset.groups(f)?)),
        None if method.needs_feature() => Err(Error::Config(format!(
            "method `{method}` needs a feature annotation"
        ))),
        None => Ok(None),
    }
}

/// Trains `model` on `train` with the configured objective. `feature` is
/// required for every method except `erm` and enables per-group history rows.
pub fn train<T: Scalar>(
    model: ModelState<T>,
    train: &Dataset,
    dev: Option<&Dataset>,
    feature: Option<&FeatureHandle>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.split != Split::Train {
        return Err(Error::Precondition(format!(
            "training data must be the train split, got `{}`",
            train.split
        )));
    }
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if train.spec.vocab_size as usize > model.config.vocab_size
        || train.spec.n_classes() != model.config.n_classes
    {
        return Err(Error::Config(
            "model vocabulary or class count does not match the dataset".into(),
        ));
    }
    per_example_groups(train, feature, config.method)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(10);
    let data = match config.method {
        TrainMethod::Subsample => {
            let f = feature.expect("checked above");
            subsample_balanced(train, f, &mut rng)?
        }
        _ => train.clone(),
    };
    let groups = per_example_groups(&data, feature, config.method)?;

    let bias_model = match config.method {
        TrainMethod::Poe | TrainMethod::Dfl => {
            Some(fit_bias_model::<T>(&data, feature.expect("checked above"))?)
        }
        _ => None,
    };
    // Per-example constants derived from the frozen bias model.
    let offsets: Option<Vec<Vec<T>>> = match (config.method, &bias_model, &groups) {
        (TrainMethod::Poe, Some(b), Some(g)) => {
            Some(g.iter().map(|g| b.log_probs(g.feature)).collect())
        }
        _ => None,
    };
    let focal: Option<Vec<T>> = match (config.method, &bias_model, &groups) {
        (TrainMethod::Dfl, Some(b), Some(g)) => Some(
            g.iter()
                .map(|g| {
                    let p = b.probs(g.feature)[g.label];
                    T::of((1.0 - p.as_f64()).powf(config.dfl_gamma))
                })
                .collect(),
        ),
        _ => None,
    };
    let mut dro = match (config.method, &groups) {
        (TrainMethod::GroupDro, Some(g)) => {
            let distinct: Vec<Group> = g
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            Some(GroupDro::new(distinct, config.dro_eta))
        }
        _ => None,
    };
    let dro_group_of: Option<Vec<usize>> = match (&dro, &groups) {
        (Some(d), Some(g)) => Some(
            g.iter()
                .map(|x| d.groups.binary_search(x).expect("group present"))
                .collect(),
        ),
        _ => None,
    };

    let mut model = model;
    let mut opt = Adam::<T>::new(
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    let mut grads = Parameters::zeros(&model.config);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<&[TokenId]> =
                chunk.iter().map(|&i| data.examples[i].tokens.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.examples[i].label).collect();
            let mut batch = Batch::new(inputs, labels);
            if let Some(o) = &offsets {
                batch = batch.with_offsets(chunk.iter().map(|&i| o[i].clone()).collect());
            }
            if let Some(w) = &focal {
                batch = batch.with_weights(chunk.iter().map(|&i| w[i]).collect());
            }
            match (&mut dro, &dro_group_of) {
                (Some(d), Some(gof)) => {
                    let members: Vec<usize> = chunk.iter().map(|&i| gof[i]).collect();
                    let (_, w) = model.loss_and_grad_reweighted(&batch, &mut grads, |l| {
                        let l: Vec<f64> = l.iter().map(|v| v.as_f64()).collect();
                        Ok(d.step_weights(&members, &l).into_iter().map(T::of).collect())
                    })?;
                    // Gradient of Σ_g q_g L̄_g rather than of its normalized mean.
                    let wsum: T = w.iter().copied().sum();
                    grads.scale(wsum);
                }
                _ => {
                    model.loss_and_grad_into(&batch, &mut grads)?;
                }
            }
            if let Some(bad) = grads.first_non_finite() {
                return Err(Error::Numeric {
                    parameter: bad.to_string(),
                    detail: format!("non-finite gradient in epoch {epoch}"),
                });
            }
            opt.step_model(&mut model.params, &grads);
        }
        if let Some(bad) = model.params.first_non_finite() {
            return Err(Error::Numeric {
                parameter: bad.to_string(),
                detail: format!("non-finite parameter after epoch {epoch}"),
            });
        }
        let mut log = |ds: &Dataset, split: Split| -> Result<()> {
            let g = match feature {
                Some(f) => Some(ds.groups(f)?),
                None => None,
            };
            let scores = score(&model, &ds.examples)?;
            let t = tabulate(ds, g.as_deref(), &scores, model.config.n_classes);
            history.record(epoch, split, &t, config.method, config.seed);
            Ok(())
        };
        if config.eval_train {
            log(&data, Split::Train)?;
        }
        if let Some(d) = dev {
            log(d, Split::Dev)?;
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        train_size: data.len(),
        bias_model,
        dro,
    })
}

/// Settings for the train-on-one-group experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossGroupConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelResult {
    /// `in-distribution` (trained group) or `out-of-distribution`.
    pub panel: &'static str,
    pub feature_value: u8,
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossGroupReport {
    pub task: String,
    pub feature: String,
    pub strength: f64,
    pub seed: u64,
    /// Sizes of the F=0 / F=1 sides of the generated training pool.
    pub group_sizes: BTreeMap<u8, usize>,
    pub train_size: usize,
    pub panels: Vec<PanelResult>,
}

impl CrossGroupReport {
    pub fn in_group(&self) -> &PanelResult {
        &self.panels[0]
    }

    pub fn out_group(&self) -> &PanelResult {
        &self.panels[1]
    }

    pub fn gap(&self) -> f64 {
        (self.in_group().accuracy - self.out_group().accuracy).abs()
    }
}

fn present_labels(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(y, _)| y)
        .collect()
}

/// Trains only on the F=1 side of the data (labels balanced within it) and
/// evaluates on label-balanced test data from both sides.
pub fn cross_group_experiment<T: Scalar>(
    spec: &TaskSpec,
    feature: &FeatureHandle,
    config: &CrossGroupConfig,
) -> Result<CrossGroupReport> {
    spec.validate()?;
    let pool = sample_dataset(spec, config.n_train, Split::Train)?;
    let split = group_split(&pool, feature)?;
    if split.single_group {
        return Err(Error::Precondition(format!(
            "feature `{}` has an empty side under this task spec",
            feature.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(20);
    let labels = present_labels(&split.label_marginals[&1]);
    if labels.len() < 2 {
        return Err(Error::SingleLabelGroup(format!(
            "group {}=1 only contains label(s) {labels:?}",
            feature.name()
        )));
    }
    let train_set = balance_labels(split.get(1), &labels, &mut rng)?;

    let test = sample_dataset(spec, config.n_test, Split::Test)?;
    let test_split = group_split(&test, feature)?;

    let model = ModelState::<T>::init(config.model.clone())?;
    let outcome = train(model, &train_set, None, Some(feature), &config.train)?;

    let mut panels = Vec::new();
    for (panel, f) in [("in-distribution", 1u8), ("out-of-distribution", 0u8)] {
        let side = test_split.get(f);
        let labels = present_labels(&test_split.label_marginals[&f]);
        let eval = if labels.len() >= 2 {
            balance_labels(side, &labels, &mut rng)?
        } else {
            side.clone()
        };
        if eval.is_empty() {
            return Err(Error::Precondition(format!("test group {f} is empty")));
        }
        let t = evaluate_groups(&outcome.model, &eval, feature)?;
        panels.push(PanelResult {
            panel,
            feature_value: f,
            n: eval.len(),
            accuracy: t.overall_accuracy(),
            per_class: t.per_class,
        });
    }
    Ok(CrossGroupReport {
        task: spec.task_id.to_string(),
        feature: feature.name().to_string(),
        strength: spec.bias_strength,
        seed: config.train.seed,
        group_sizes: split.groups.iter().map(|(f, d)| (*f, d.len())).collect(),
        train_size: train_set.len(),
        panels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TaskId;
    use crate::neuralnet::Encoder;

    fn small_model(spec: &TaskSpec, seed: u64) -> ModelState<f64> {
        let mut c = ModelConfig::new(spec.vocab_size as usize, spec.n_classes());
        c.embed_dim = 8;
        c.hidden_dim = 8;
        c.mlp_hidden = 8;
        c.seed = seed;
        ModelState::init(c).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.dro_eta = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.dfl_gamma = -1.0;
        assert!(c.validate().is_err());
        let bad: std::result::Result<TrainConfig, _> =
            serde_json::from_str(r#"{"method":"erm","bogus":1}"#);
        assert!(bad.is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"method":"group_dro"}"#).unwrap();
        assert_eq!(c.method, TrainMethod::GroupDro);
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn group_aware_method_needs_feature() {
        let spec = TaskSpec::new(TaskId::A).with_vocab(50);
        let d = sample_dataset(&spec, 64, Split::Train).unwrap();
        for m in [TrainMethod::Subsample, TrainMethod::Poe, TrainMethod::Dfl, TrainMethod::GroupDro] {
            let cfg = TrainConfig::default().with_method(m);
            let r = train(small_model(&spec, 0), &d, None, None, &cfg);
            assert!(matches!(r, Err(Error::Config(_))), "{m}");
        }
    }

    #[test]
    fn dro_weights_stay_uniform_under_equal_losses() {
        let groups = vec![Group::new(0, 0), Group::new(0, 1), Group::new(1, 0), Group::new(1, 1)];
        let mut d = GroupDro::new(groups, 0.5);
        for _ in 0..100 {
            d.update(&[Some(0.7); 4]);
        }
        for q in &d.q {
            assert!((q - 0.25).abs() <= 1e-12);
        }
        d.update(&[Some(5.0), Some(0.1), None, Some(0.1)]);
        assert!(d.q[0] > d.q[1]);
        assert!((d.q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bias_model_matches_smoothed_frequencies() {
        let spec = TaskSpec::new(TaskId::A).with_vocab(50).with_strength(0.8);
        let d = sample_dataset(&spec, 500, Split::Train).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let b = fit_bias_model::<f64>(&d, &f).unwrap();
        let counts = d.group_counts(&f).unwrap();
        let c = |fv: u8, y: usize| *counts.get(&Group::new(fv, y)).unwrap_or(&0) as f64;
        let expect = (c(1, 1) + 1.0) / (c(1, 0) + c(1, 1) + 2.0);
        assert!((b.probs(1)[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn subsample_uses_uniform_groups() {
        let spec = TaskSpec::new(TaskId::A).with_vocab(50).with_strength(0.9);
        let d = sample_dataset(&spec, 400, Split::Train).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let mut cfg = TrainConfig::default().with_method(TrainMethod::Subsample);
        cfg.epochs = 1;
        let out = train(small_model(&spec, 0), &d, None, Some(&f), &cfg).unwrap();
        let min = d.group_counts(&f).unwrap().values().copied().min().unwrap();
        assert_eq!(out.train_size, 4 * min);
        let all: Vec<_> = out.history.rows.iter().filter(|r| r.group != "all").collect();
        assert!(all.iter().all(|r| r.n == min));
    }

    #[test]
    fn dfl_with_zero_gamma_equals_erm() {
        let spec = TaskSpec::new(TaskId::A).with_vocab(50).with_strength(0.8);
        let d = sample_dataset(&spec, 200, Split::Train).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let mut erm = TrainConfig::default();
        erm.epochs = 2;
        let mut dfl = erm.clone().with_method(TrainMethod::Dfl);
        dfl.dfl_gamma = 0.0;
        let a = train(small_model(&spec, 3), &d, None, Some(&f), &erm).unwrap();
        let b = train(small_model(&spec, 3), &d, None, Some(&f), &dfl).unwrap();
        for (x, y) in a.history.rows.iter().zip(&b.history.rows) {
            assert!((x.loss - y.loss).abs() <= 1e-12);
        }
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn poe_leaves_bias_model_frozen() {
        let spec = TaskSpec::new(TaskId::A).with_vocab(50).with_strength(0.8);
        let d = sample_dataset(&spec, 200, Split::Train).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default().with_method(TrainMethod::Poe)
        };
        let out = train(small_model(&spec, 1), &d, None, Some(&f), &cfg).unwrap();
        assert_eq!(out.bias_model, Some(fit_bias_model(&d, &f).unwrap()));
    }

    #[test]
    fn evaluation_bookkeeping() {
        let spec = TaskSpec::new(TaskId::C).with_vocab(50);
        let d = sample_dataset(&spec, 300, Split::Dev).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let m = small_model(&spec, 0);
        let t = evaluate_groups(&m, &d, &f).unwrap();
        assert_eq!(t.groups.values().map(|s| s.n).sum::<usize>(), d.len());
        let weighted: f64 = t
            .groups
            .values()
            .map(|s| s.accuracy() * s.n as f64)
            .sum::<f64>()
            / d.len() as f64;
        assert!((weighted - t.overall_accuracy()).abs() < 1e-12);
        // task C never produces (F=0, y=1)
        assert!(t.accuracy(Group::new(0, 1)).is_none());
    }

    #[test]
    fn cross_group_single_label_group_is_infeasible() {
        let spec = TaskSpec::new(TaskId::B).with_vocab(50).with_strength(1.0);
        let f = FeatureHandle::reserved(&spec);
        let mut model = ModelConfig::new(50, 2);
        model.encoder = Encoder::MeanPool;
        let cfg = CrossGroupConfig {
            n_train: 200,
            n_test: 100,
            model,
            train: TrainConfig::default(),
        };
        assert!(matches!(
            cross_group_experiment::<f64>(&spec, &f, &cfg),
            Err(Error::SingleLabelGroup(_))
        ));
    }

    #[test]
    fn history_csv_header_and_determinism() {
        let spec = TaskSpec::new(TaskId::A).with_vocab(50);
        let d = sample_dataset(&spec, 100, Split::Train).unwrap();
        let dev = sample_dataset(&spec, 50, Split::Dev).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default().with_method(TrainMethod::GroupDro)
        };
        let run = || {
            let o = train(small_model(&spec, 2), &d, Some(&dev), Some(&f), &cfg).unwrap();
            let mut buf = Vec::new();
            o.history.write_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = run();
        assert!(a.starts_with(HISTORY_HEADER));
        assert!(a.contains(",dev,f1_y1,"));
        assert_eq!(a, run());
    }
}

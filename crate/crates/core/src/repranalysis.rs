//! Linear probing, prequential (online) codelength, and iterative null-space
//! projection on frozen representations.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FeatureHandle, Group, TokenId};
use crate::error::{Error, Result};
use crate::linalg::{argmax, axpy, dot, gemm, log_sum_exp, softmax_in_place, Matrix, Op};
use crate::neuralnet::{Adam, ModelState};
use crate::scalar::Scalar;
use crate::training::minority_group;

/// Representations of a dataset with the feature value (probe label) and task
/// label of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct RepMatrix<T> {
    pub reps: Matrix<T>,
    pub probe_labels: Vec<usize>,
    pub task_labels: Vec<usize>,
    pub model_id: String,
    pub dataset_id: String,
}

impl<T: Scalar> RepMatrix<T> {
    pub fn new(reps: Matrix<T>, probe_labels: Vec<usize>, task_labels: Vec<usize>) -> Result<Self> {
        if reps.rows() != probe_labels.len() || reps.rows() != task_labels.len() {
            return Err(Error::Argument(format!(
                "{} representation rows but {} probe and {} task labels",
                reps.rows(),
                probe_labels.len(),
                task_labels.len()
            )));
        }
        Ok(Self {
            reps,
            probe_labels,
            task_labels,
            model_id: String::new(),
            dataset_id: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.reps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.reps.cols()
    }

    pub fn group(&self, i: usize) -> Group {
        Group::new(self.probe_labels[i] as u8, self.task_labels[i])
    }

    pub fn group_counts(&self) -> BTreeMap<Group, usize> {
        let mut c = BTreeMap::new();
        for i in 0..self.len() {
            *c.entry(self.group(i)).or_insert(0) += 1;
        }
        c
    }

    /// Same labels, new representation matrix.
    pub fn with_reps(&self, reps: Matrix<T>) -> Self {
        Self {
            reps,
            ..self.clone()
        }
    }
}

fn fingerprint<H: Hash>(h: &H) -> String {
    let mut s = DefaultHasher::new();
    h.hash(&mut s);
    format!("{:016x}", s.finish())
}

/// Representation read-out for every example of `dataset`; the probe label
/// is the value of `feature`.
pub fn extract_representations<T: Scalar>(
    model: &ModelState<T>,
    dataset: &Dataset,
    feature: &FeatureHandle,
) -> Result<RepMatrix<T>> {
    if dataset.spec.vocab_size as usize > model.config.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary {} exceeds model vocabulary {}",
            dataset.spec.vocab_size, model.config.vocab_size
        )));
    }
    let seqs: Vec<&[TokenId]> = dataset.examples.iter().map(|e| e.tokens.as_slice()).collect();
    let (_, reps) = model.forward_many(&seqs)?;
    let probe_labels = dataset
        .groups(feature)?
        .into_iter()
        .map(|g| usize::from(g.feature))
        .collect();
    let mut out = RepMatrix::new(reps, probe_labels, dataset.labels())?;
    let bits: Vec<u64> = model
        .params
        .blocks()
        .iter()
        .flat_map(|(_, m)| m.as_slice().iter().map(|v| v.as_f64().to_bits()))
        .collect();
    out.model_id = format!("model-{}", fingerprint(&bits));
    out.dataset_id = format!(
        "{}-{}-b{}-seed{}-n{}",
        dataset.spec.task_id,
        dataset.split,
        dataset.spec.bias_strength,
        dataset.spec.seed,
        dataset.len()
    );
    Ok(out)
}

fn default_probe_epochs() -> usize {
    50
}
fn default_probe_batch() -> usize {
    64
}
fn default_probe_lr() -> f64 {
    1e-3
}
fn default_l2() -> f64 {
    1e-4
}
fn default_holdout() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Fraction of each balanced class held out for accuracy.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            batch_size: default_probe_batch(),
            learning_rate: default_probe_lr(),
            l2: default_l2(),
            holdout_fraction: default_holdout(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::Config("probe learning_rate must be > 0 and l2 >= 0".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Multinomial logistic regression `softmax(x W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe<T> {
    /// `h × K`.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn zeros(dim: usize, n_classes: usize) -> Self {
        Self {
            weights: Matrix::zeros(dim, n_classes),
            bias: vec![T::zero(); n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    /// Logits of the selected rows of `x`, `rows.len() × K`.
    pub fn logits(&self, x: &Matrix<T>, rows: &[usize]) -> Vec<T> {
        let k = self.n_classes();
        let h = x.cols();
        let mut xb = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            xb.extend_from_slice(x.row(r));
        }
        let mut out = Vec::with_capacity(rows.len() * k);
        for _ in rows {
            out.extend_from_slice(&self.bias);
        }
        let one = T::one();
        gemm(rows.len(), h, k, one, &xb, Op::N, self.weights.as_slice(), Op::N, one, &mut out);
        out
    }

    pub fn predict(&self, x: &Matrix<T>, rows: &[usize]) -> Vec<usize> {
        self.logits(x, rows)
            .chunks_exact(self.n_classes())
            .map(argmax)
            .collect()
    }

    /// Fraction of `rows` whose prediction equals `labels[row]`.
    pub fn accuracy(&self, x: &Matrix<T>, rows: &[usize], labels: &[usize]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let pred = self.predict(x, rows);
        let ok = rows.iter().zip(&pred).filter(|(&r, &p)| labels[r] == p).count();
        ok as f64 / rows.len() as f64
    }

    /// `Σ −log₂ p(y | x)` over `rows`.
    pub fn codelength_bits(&self, x: &Matrix<T>, rows: &[usize], labels: &[usize]) -> f64 {
        let k = self.n_classes();
        let logits = self.logits(x, rows);
        rows.iter()
            .zip(logits.chunks_exact(k))
            .map(|(&r, z)| (log_sum_exp(z) - z[labels[r]]).as_f64())
            .sum::<f64>()
            / std::f64::consts::LN_2
    }

    /// Centered class weight vectors (`K` of them, spanning `K − 1` dims).
    pub fn directions(&self) -> Vec<Vec<T>> {
        let (h, k) = (self.weights.rows(), self.n_classes());
        let kt = T::of(k as f64);
        let mut cols: Vec<Vec<T>> = (0..k)
            .map(|c| (0..h).map(|i| self.weights[(i, c)]).collect())
            .collect();
        for i in 0..h {
            let mean = cols.iter().map(|c| c[i]).sum::<T>() / kt;
            for c in cols.iter_mut() {
                c[i] -= mean;
            }
        }
        cols
    }
}

/// Fits a probe on `rows` of `x` by minibatch Adam with L2 on the weights.
/// Labels must lie in `0..n_classes`.
pub fn fit_probe<T: Scalar>(
    x: &Matrix<T>,
    rows: &[usize],
    labels: &[usize],
    n_classes: usize,
    config: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> LinearProbe<T> {
    let h = x.cols();
    let k = n_classes;
    let mut probe = LinearProbe::zeros(h, k);
    if rows.is_empty() {
        return probe;
    }
    let mut opt = Adam::with_defaults(config.learning_rate);
    let l2 = T::of(config.l2);
    let mut order = rows.to_vec();
    let mut gw = vec![T::zero(); h * k];
    let mut gb = vec![T::zero(); k];
    let mut xb = Vec::with_capacity(config.batch_size * h);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let bsz = chunk.len();
            let mut z = probe.logits(x, chunk);
            let inv = T::one() / T::of(bsz as f64);
            for (n, zr) in z.chunks_exact_mut(k).enumerate() {
                softmax_in_place(zr);
                zr[labels[chunk[n]]] -= T::one();
                zr.iter_mut().for_each(|v| *v *= inv);
            }
            xb.clear();
            for &r in chunk {
                xb.extend_from_slice(x.row(r));
            }
            gw.copy_from_slice(probe.weights.as_slice());
            gemm(h, bsz, k, T::one(), &xb, Op::T, &z, Op::N, l2, &mut gw);
            gb.fill(T::zero());
            for zr in z.chunks_exact(k) {
                axpy(T::one(), zr, &mut gb);
            }
            opt.step(&mut [
                (probe.weights.as_mut_slice(), gw.as_slice()),
                (probe.bias.as_mut_slice(), gb.as_slice()),
            ]);
        }
    }
    probe
}

/// Downsamples every class to the size of the smallest; result is sorted.
pub fn balanced_indices(labels: &[usize], rows: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        by.entry(labels[r]).or_default().push(r);
    }
    let min = by.values().map(Vec::len).min().unwrap_or(0);
    let mut keep = Vec::with_capacity(min * by.len());
    for v in by.values_mut() {
        v.shuffle(rng);
        keep.extend_from_slice(&v[..min]);
    }
    keep.sort_unstable();
    keep
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport<T> {
    pub probe: LinearProbe<T>,
    /// Original label of each probe class index.
    pub classes: Vec<usize>,
    /// Held-out accuracy on a class-balanced split.
    pub accuracy: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
}

fn contiguous(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mapped = labels
        .iter()
        .map(|y| classes.binary_search(y).expect("present"))
        .collect();
    (classes, mapped)
}

/// Balanced probe: downsample to the rarest class, hold out a balanced
/// fraction of each class, train on the rest.
pub fn train_linear_probe<T: Scalar>(
    reps: &Matrix<T>,
    labels: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeReport<T>> {
    config.validate()?;
    if reps.rows() != labels.len() {
        return Err(Error::Argument("representation and label counts differ".into()));
    }
    let (classes, y) = contiguous(labels);
    if classes.len() < 2 {
        return Err(Error::DegenerateProbe(format!(
            "probe labels take a single value {classes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in balanced_indices(&y, &all, &mut rng) {
        by.entry(y[r]).or_default().push(r);
    }
    let per_class = by.values().next().map_or(0, Vec::len);
    let n_eval = ((per_class as f64) * config.holdout_fraction).round() as usize;
    if n_eval == 0 || n_eval >= per_class {
        return Err(Error::DegenerateProbe(format!(
            "{per_class} examples in the rarest class is too few to hold out a split"
        )));
    }
    let mut train_rows = Vec::new();
    let mut eval_rows = Vec::new();
    for v in by.values_mut() {
        v.shuffle(&mut rng);
        eval_rows.extend_from_slice(&v[..n_eval]);
        train_rows.extend_from_slice(&v[n_eval..]);
    }
    train_rows.sort_unstable();
    eval_rows.sort_unstable();
    let probe = fit_probe(reps, &train_rows, &y, classes.len(), config, &mut rng);
    let accuracy = probe.accuracy(reps, &eval_rows, &y);
    Ok(ProbeReport {
        probe,
        classes,
        accuracy,
        train_per_class: per_class - n_eval,
        eval_per_class: n_eval,
    })
}

/// Geometric block schedule for the online code.
pub const DEFAULT_SCHEDULE: [f64; 11] = [
    0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.0625, 0.125, 0.25, 0.5, 1.0,
];

#[derive(Clone, Debug, PartialEq)]
pub struct MdlRow {
    pub block_end: usize,
    pub block_codelength_bits: f64,
    pub cumulative_bits: f64,
    /// Uniform codelength of the first `block_end` labels over
    /// `cumulative_bits`; the last row holds the overall compression.
    pub compression: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdlReport {
    pub n: usize,
    pub n_classes: usize,
    pub online_bits: f64,
    pub uniform_bits: f64,
    pub compression: f64,
    pub schedule: Vec<f64>,
    pub rows: Vec<MdlRow>,
    /// Accuracy of the last probe on the last block.
    pub final_block_accuracy: f64,
}

pub const MDL_HEADER: &str = "block_end,block_codelength_bits,cumulative_bits,compression";

impl MdlReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MDL_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6}",
                r.block_end, r.block_codelength_bits, r.cumulative_bits, r.compression
            )?;
        }
        Ok(())
    }
}

/// Block end indices for `n` examples; errors on empty blocks or a malformed
/// schedule.
pub fn block_ends(n: usize, schedule: &[f64]) -> Result<Vec<usize>> {
    if schedule.is_empty() {
        return Err(Error::Schedule("empty schedule".into()));
    }
    if schedule.last() != Some(&1.0) {
        return Err(Error::Schedule("schedule must end at 1.0".into()));
    }
    if schedule.windows(2).any(|w| !(w[0] < w[1])) || !(schedule[0] > 0.0) {
        return Err(Error::Schedule("schedule must be strictly increasing and positive".into()));
    }
    if schedule[0] * (n as f64) < 1.0 - 1e-9 {
        return Err(Error::Schedule(format!(
            "first fraction {} is below 1/n for n = {n}",
            schedule[0]
        )));
    }
    let mut ends = Vec::with_capacity(schedule.len());
    let mut prev = 0;
    for &f in schedule {
        let end = ((f * n as f64).round() as usize).min(n);
        if end <= prev {
            return Err(Error::Schedule(format!(
                "fraction {f} gives an empty block for n = {n}"
            )));
        }
        ends.push(end);
        prev = end;
    }
    Ok(ends)
}

/// Prequential codelength of `labels` given `reps`. Rows are visited in a
/// seeded random order; the first block costs `log₂ K` per label and each
/// later block is coded by a fresh probe trained on everything before it.
pub fn mdl_online_code<T: Scalar>(
    reps: &Matrix<T>,
    labels: &[usize],
    n_classes: usize,
    schedule: &[f64],
    config: &ProbeConfig,
) -> Result<MdlReport> {
    config.validate()?;
    let n = labels.len();
    if reps.rows() != n {
        return Err(Error::Argument("representation and label counts differ".into()));
    }
    if n_classes < 2 {
        return Err(Error::DegenerateProbe("online code needs K >= 2".into()));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Argument(format!("label {y} >= K = {n_classes}")));
    }
    let ends = block_ends(n, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let log_k = (n_classes as f64).log2();

    let mut rows = Vec::with_capacity(ends.len());
    let mut cumulative = 0.0;
    let mut start = 0;
    let mut final_acc = f64::NAN;
    for &end in &ends {
        let block = &order[start..end];
        let bits = if start == 0 {
            block.len() as f64 * log_k
        } else {
            let probe = fit_probe(reps, &order[..start], labels, n_classes, config, &mut rng);
            final_acc = probe.accuracy(reps, block, labels);
            probe.codelength_bits(reps, block, labels)
        };
        cumulative += bits;
        rows.push(MdlRow {
            block_end: end,
            block_codelength_bits: bits,
            cumulative_bits: cumulative,
            compression: end as f64 * log_k / cumulative,
        });
        start = end;
    }
    let uniform = n as f64 * log_k;
    Ok(MdlReport {
        n,
        n_classes,
        online_bits: cumulative,
        uniform_bits: uniform,
        compression: uniform / cumulative,
        schedule: schedule.to_vec(),
        rows,
        final_block_accuracy: final_acc,
    })
}

/// Orthogonal projector onto the complement of the collected directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    /// `h × h`, symmetric and idempotent.
    pub matrix: Matrix<T>,
    /// Orthonormal basis of the removed subspace.
    pub basis: Vec<Vec<T>>,
    /// Raw probe directions in collection order.
    pub directions: Vec<Vec<T>>,
    pub iterations: usize,
}

impl<T: Scalar> Projection<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Matrix::identity(dim),
            basis: Vec::new(),
            directions: Vec::new(),
            iterations: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.basis.len()
    }

    /// Orthonormalizes `dirs` against the current basis (two Gram-Schmidt
    /// passes) and removes the new span. Directions whose residual norm falls
    /// below `1e-10` times their original norm are skipped. Returns the number
    /// of basis vectors added.
    pub fn remove(&mut self, dirs: &[Vec<T>]) -> usize {
        let tol = T::of(1e-10);
        let mut added = 0;
        for d in dirs {
            let n0 = dot(d, d).sqrt();
            if n0 == T::zero() {
                continue;
            }
            let mut v = d.clone();
            for _ in 0..2 {
                for u in &self.basis {
                    let c = dot(u, &v);
                    axpy(-c, u, &mut v);
                }
            }
            let nv = dot(&v, &v).sqrt();
            if nv <= tol * n0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            self.basis.push(v);
            self.directions.push(d.clone());
            added += 1;
        }
        let h = self.dim();
        let mut p = Matrix::identity(h);
        for u in &self.basis {
            for i in 0..h {
                let ui = u[i];
                axpy(-ui, u, p.row_mut(i));
            }
        }
        self.matrix = p;
        added
    }

    /// `X P` for row-vector representations.
    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let (n, h) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); n * h];
        gemm(n, h, h, T::one(), x.as_slice(), Op::N, self.matrix.as_slice(), Op::N, T::zero(), &mut out);
        Matrix::from_vec(n, h, out)
    }
}

fn default_max_iters() -> usize {
    30
}
fn default_majority_tol() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlpConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub stop_at_majority: bool,
    /// Stop once probe accuracy is within this margin of the majority rate.
    #[serde(default = "default_majority_tol")]
    pub majority_tolerance: f64,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            stop_at_majority: false,
            majority_tolerance: default_majority_tol(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InlpStatus {
    Completed,
    ReachedMajority,
    RankExhausted,
}

impl fmt::Display for InlpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InlpStatus::Completed => "completed",
            InlpStatus::ReachedMajority => "reached-majority",
            InlpStatus::RankExhausted => "rank-exhausted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InlpRow {
    /// Number of projection steps applied (0 = raw representations).
    pub iteration: usize,
    pub rank: usize,
    /// Balanced probe accuracy for the feature on projected eval reps.
    pub probe_acc: f64,
    pub task_acc_overall: f64,
    pub task_acc_minority: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InlpResult<T> {
    pub projection: Projection<T>,
    pub history: Vec<InlpRow>,
    pub status: InlpStatus,
    /// Minority group used for the minority task accuracy.
    pub minority: Option<Group>,
}

pub const INLP_HEADER: &str = "iteration,rank,probe_acc,task_acc_overall,task_acc_minority";

pub fn write_inlp_csv<W: Write>(mut w: W, rows: &[InlpRow]) -> Result<()> {
    writeln!(w, "{INLP_HEADER}")?;
    for r in rows {
        let minority = r
            .task_acc_minority
            .map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        writeln!(
            w,
            "{},{},{:.6},{:.6},{}",
            r.iteration, r.rank, r.probe_acc, r.task_acc_overall, minority
        )?;
    }
    Ok(())
}

/// Iterative null-space projection of the probe-label information.
///
/// Row `k` of the history describes representations after `k` projection
/// steps: the balanced feature probe trained on them (which also supplies the
/// directions for step `k + 1`) and a freshly trained linear task head. The
/// minority group is the smallest (feature, label) cell of `train`.
pub fn inlp<T: Scalar>(
    train: &RepMatrix<T>,
    eval: &RepMatrix<T>,
    config: &InlpConfig,
) -> Result<InlpResult<T>> {
    config.probe.validate()?;
    if config.max_iters == 0 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    if train.dim() != eval.dim() {
        return Err(Error::Config("train and eval representation widths differ".into()));
    }
    let (probe_classes, ptrain) = contiguous(&train.probe_labels);
    if probe_classes.len() < 2 {
        return Err(Error::DegenerateProbe("probe labels take a single value".into()));
    }
    let peval: Vec<usize> = eval
        .probe_labels
        .iter()
        .map(|y| probe_classes.binary_search(y).map_err(|_| ()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument("eval probe label unseen in training".into()))?;
    let n_task = train
        .task_labels
        .iter()
        .chain(&eval.task_labels)
        .max()
        .map_or(0, |m| m + 1);
    let minority = minority_group(&train.group_counts());

    let mut rng = ChaCha8Rng::seed_from_u64(config.probe.seed);
    let all_train: Vec<usize> = (0..train.len()).collect();
    let all_eval: Vec<usize> = (0..eval.len()).collect();
    let probe_train = balanced_indices(&ptrain, &all_train, &mut rng);
    let probe_eval = balanced_indices(&peval, &all_eval, &mut rng);
    let minority_rows: Vec<usize> = all_eval
        .iter()
        .copied()
        .filter(|&i| Some(eval.group(i)) == minority)
        .collect();
    let majority = 1.0 / probe_classes.len() as f64;

    let mut projection = Projection::identity(train.dim());
    let mut history = Vec::new();
    let mut status = InlpStatus::Completed;
    for iteration in 0..=config.max_iters {
        let xt = projection.apply(&train.reps);
        let xe = projection.apply(&eval.reps);
        let probe = fit_probe(&xt, &probe_train, &ptrain, probe_classes.len(), &config.probe, &mut rng);
        let probe_acc = probe.accuracy(&xe, &probe_eval, &peval);
        let head = fit_probe(&xt, &all_train, &train.task_labels, n_task, &config.probe, &mut rng);
        let task_acc_overall = head.accuracy(&xe, &all_eval, &eval.task_labels);
        let task_acc_minority = (!minority_rows.is_empty())
            .then(|| head.accuracy(&xe, &minority_rows, &eval.task_labels));
        history.push(InlpRow {
            iteration,
            rank: projection.rank(),
            probe_acc,
            task_acc_overall,
            task_acc_minority,
        });
        if config.stop_at_majority && probe_acc <= majority + config.majority_tolerance {
            status = InlpStatus::ReachedMajority;
            break;
        }
        if iteration == config.max_iters {
            break;
        }
        let dirs = probe.directions();
        let wanted = probe_classes.len() - 1;
        // K centered columns span K − 1 dimensions; keep that many.
        let added = projection.remove(&dirs[..dirs.len().min(wanted.max(1))]);
        projection.iterations += 1;
        if added == 0 || projection.rank() == 0 {
            status = InlpStatus::RankExhausted;
            let xe = projection.apply(&eval.reps);
            let xt = projection.apply(&train.reps);
            let head = fit_probe(&xt, &all_train, &train.task_labels, n_task, &config.probe, &mut rng);
            if added > 0 {
                history.push(InlpRow {
                    iteration: iteration + 1,
                    rank: projection.rank(),
                    probe_acc: majority,
                    task_acc_overall: head.accuracy(&xe, &all_eval, &eval.task_labels),
                    task_acc_minority: (!minority_rows.is_empty())
                        .then(|| head.accuracy(&xe, &minority_rows, &eval.task_labels)),
                });
            }
            break;
        }
    }
    Ok(InlpResult {
        projection,
        history,
        status,
        minority,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, h: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, h, (0..n * h).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn block_schedule_validation() {
        assert_eq!(block_ends(1000, &DEFAULT_SCHEDULE).unwrap()[0], 1);
        assert!(matches!(block_ends(100, &DEFAULT_SCHEDULE), Err(Error::Schedule(_))));
        assert!(block_ends(10, &[0.5, 0.4, 1.0]).is_err());
        assert!(block_ends(10, &[0.5, 0.9]).is_err());
        assert_eq!(block_ends(10, &[1.0]).unwrap(), vec![10]);
    }

    #[test]
    fn single_block_is_uniform() {
        let x = gaussian(50, 3, 1);
        let y: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let r = mdl_online_code(&x, &y, 3, &[1.0], &ProbeConfig::default()).unwrap();
        assert_eq!(r.compression, 1.0);
        assert_eq!(r.uniform_bits, 50.0 * 3f64.log2());
    }

    #[test]
    fn probe_learns_separable_labels() {
        // separable with margin 0.1 along coordinate 3
        let raw = gaussian(2500, 8, 2);
        let keep: Vec<usize> = (0..2500).filter(|&i| raw[(i, 3)].abs() > 0.1).collect();
        let x = raw.select_rows(&keep);
        let y: Vec<usize> = (0..x.rows()).map(|i| usize::from(x[(i, 3)] > 0.0)).collect();
        let r = train_linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
        assert_eq!(r.classes, vec![0, 1]);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = gaussian(20, 2, 3);
        assert!(matches!(
            train_linear_probe(&x, &[1; 20], &ProbeConfig::default()),
            Err(Error::DegenerateProbe(_))
        ));
    }

    #[test]
    fn projection_removes_directions() {
        let mut p = Projection::<f64>::identity(5);
        assert_eq!(p.remove(&[vec![1.0, 1.0, 0.0, 0.0, 0.0], vec![2.0, 2.0, 0.0, 0.0, 0.0]]), 1);
        assert_eq!(p.rank(), 4);
        let pp = p.matrix.matmul(&p.matrix);
        assert!(pp.sub(&p.matrix).max_abs() < 1e-12);
        let x = gaussian(10, 5, 4);
        let xp = p.apply(&x);
        for i in 0..10 {
            assert!((xp[(i, 0)] + xp[(i, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn inlp_history_and_csv() {
        let x = gaussian(600, 6, 5);
        let probe: Vec<usize> = (0..600).map(|i| usize::from(x[(i, 0)] + x[(i, 1)] > 0.0)).collect();
        let task: Vec<usize> = (0..600).map(|i| usize::from(x[(i, 4)] > 0.0)).collect();
        let all = RepMatrix::new(x, probe, task).unwrap();
        let train = all.with_reps(all.reps.clone());
        let cfg = InlpConfig {
            max_iters: 3,
            ..InlpConfig::default()
        };
        let r = inlp(&train, &all, &cfg).unwrap();
        assert_eq!(r.history.len(), 4);
        assert_eq!(r.history[0].rank, 6);
        assert_eq!(r.history[3].rank, 3);
        assert!(r.history[0].probe_acc > 0.9);
        assert!(r.history[1].probe_acc < 0.8);
        let mut buf = Vec::new();
        write_inlp_csv(&mut buf, &r.history).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(INLP_HEADER));
    }
}

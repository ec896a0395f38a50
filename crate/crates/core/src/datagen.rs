//! Synthetic sequence-classification tasks with a controllable spurious feature.
//!
//! Every example is generated from a latent pair `(I, F)`: `I` says whether the
//! first two tokens are identical and `F` whether the reserved token occurs
//! somewhere in the remaining positions. Labels are a deterministic function of
//! the latent pair, so counterfactual labels are known exactly.
//!
//! Token positions are 0-based in this API: positions `0` and `1` carry the
//! identity signal and positions `2..seq_len` are feature positions.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Name of the reserved-token feature.
pub const RESERVED: &str = "reserved";
/// Name of the injected end-of-sequence marker feature.
pub const MARKER: &str = "marker";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    /// `y = I`; the reserved token has no causal effect.
    A,
    /// `y = I xor F`.
    B,
    /// Three classes: `y = 0` without the feature, otherwise `1 + I`.
    C,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::A, TaskId::B, TaskId::C];

    pub fn n_classes(self) -> usize {
        match self {
            TaskId::A | TaskId::B => 2,
            TaskId::C => 3,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskId::A => "A",
            TaskId::B => "B",
            TaskId::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(TaskId::A),
            "B" | "b" => Ok(TaskId::B),
            "C" | "c" => Ok(TaskId::C),
            other => Err(Error::Config(format!("unknown task id `{other}`"))),
        }
    }
}

/// Label as a function of the latent cause.
pub fn label_fn(task: TaskId, identical: bool, feature: bool) -> usize {
    match task {
        TaskId::A => usize::from(identical),
        TaskId::B => usize::from(identical ^ feature),
        TaskId::C => match (feature, identical) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => 2,
        },
    }
}

/// Same as [`label_fn`] but parses the task id, for callers holding strings.
pub fn label_fn_named(task: &str, identical: bool, feature: bool) -> Result<usize> {
    Ok(label_fn(task.parse()?, identical, feature))
}

fn default_vocab() -> u32 {
    1000
}
fn default_seq_len() -> usize {
    10
}
fn default_reserved() -> TokenId {
    2
}
fn default_q() -> f64 {
    0.3
}
fn default_strength() -> f64 {
    0.5
}

/// A generative process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: TaskId,
    #[serde(default = "default_vocab")]
    pub vocab_size: u32,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_reserved")]
    pub reserved_token: TokenId,
    /// `q`: probability of identical leading tokens in task C.
    #[serde(default = "default_q")]
    pub identical_prob: f64,
    /// `b` in `[0.5, 1]`; 0.5 is the unbiased setting.
    #[serde(default = "default_strength")]
    pub bias_strength: f64,
    #[serde(default)]
    pub seed: u64,
    /// Token kept out of the sampling pool so it can be injected later.
    #[serde(default)]
    pub marker_token: Option<TokenId>,
}

impl TaskSpec {
    pub fn new(task_id: TaskId) -> Self {
        Self {
            task_id,
            vocab_size: default_vocab(),
            seq_len: default_seq_len(),
            reserved_token: default_reserved(),
            identical_prob: default_q(),
            bias_strength: default_strength(),
            seed: 0,
            marker_token: None,
        }
    }

    pub fn with_strength(mut self, b: f64) -> Self {
        self.bias_strength = b;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_vocab(mut self, vocab_size: u32) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_marker(mut self, token: TokenId) -> Self {
        self.marker_token = Some(token);
        self
    }

    pub fn n_classes(&self) -> usize {
        self.task_id.n_classes()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.seq_len < 3 {
            return bad(format!("seq_len must be >= 3, got {}", self.seq_len));
        }
        if self.reserved_token >= self.vocab_size {
            return bad(format!(
                "reserved_token {} outside vocabulary of size {}",
                self.reserved_token, self.vocab_size
            ));
        }
        if !(0.5..=1.0).contains(&self.bias_strength) {
            return bad(format!(
                "bias_strength must lie in [0.5, 1], got {}",
                self.bias_strength
            ));
        }
        if !(0.0..=1.0).contains(&self.identical_prob) {
            return bad(format!(
                "identical_prob must lie in [0, 1], got {}",
                self.identical_prob
            ));
        }
        if let Some(m) = self.marker_token {
            if m >= self.vocab_size || m == self.reserved_token {
                return bad(format!("invalid marker_token {m}"));
            }
        }
        Ok(())
    }

    /// Tokens drawn for non-feature content: the vocabulary minus the
    /// reserved and marker tokens.
    pub fn sampling_pool(&self) -> Vec<TokenId> {
        (0..self.vocab_size)
            .filter(|&t| t != self.reserved_token && Some(t) != self.marker_token)
            .collect()
    }

    /// Names of the features annotated on every example of this spec.
    pub fn feature_names(&self) -> Vec<&'static str> {
        let mut v = vec![RESERVED];
        if self.marker_token.is_some() {
            v.push(MARKER);
        }
        v
    }

    /// Recomputes the latent pair from tokens.
    pub fn latent_of(&self, tokens: &[TokenId]) -> Latent {
        Latent {
            identical: tokens[0] == tokens[1],
            feature: tokens[2..].contains(&self.reserved_token),
        }
    }

    pub fn label_of(&self, latent: Latent) -> usize {
        label_fn(self.task_id, latent.identical, latent.feature)
    }

    /// Draws one example from the generative process.
    pub fn sample_example<R: Rng + ?Sized>(&self, pool: &[TokenId], rng: &mut R) -> Example {
        let b = self.bias_strength;
        let q = self.identical_prob;
        let (identical, feature) = match self.task_id {
            TaskId::A => {
                let identical = rng.gen_bool(0.5);
                let feature = rng.gen_bool(if identical { b } else { 1.0 - b });
                (identical, feature)
            }
            TaskId::B => {
                let feature = rng.gen_bool(0.5);
                (rng.gen_bool(1.0 - b), feature)
            }
            TaskId::C => {
                let feature = rng.gen_bool(0.5);
                let p_identical = if feature {
                    (q + (1.0 - q) * (2.0 * b - 1.0)).clamp(0.0, 1.0)
                } else {
                    q
                };
                (rng.gen_bool(p_identical), feature)
            }
        };

        let mut tokens: Vec<TokenId> = (0..self.seq_len)
            .map(|_| *pool.choose(rng).expect("non-empty pool"))
            .collect();
        if identical {
            tokens[1] = tokens[0];
        } else {
            while tokens[1] == tokens[0] {
                tokens[1] = *pool.choose(rng).expect("non-empty pool");
            }
        }
        if feature {
            let pos = rng.gen_range(2..self.seq_len);
            tokens[pos] = self.reserved_token;
        }
        Example::from_tokens(self, tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Latent {
    pub identical: bool,
    pub feature: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub label: usize,
    pub feats: BTreeMap<String, u8>,
    pub latent: Latent,
}

impl Example {
    /// Builds an example whose label, latent pair and feature annotations are
    /// all derived from the tokens.
    pub fn from_tokens(spec: &TaskSpec, tokens: Vec<TokenId>) -> Self {
        let latent = spec.latent_of(&tokens);
        let mut ex = Example {
            label: spec.label_of(latent),
            tokens,
            feats: BTreeMap::new(),
            latent,
        };
        ex.refresh_feats(spec);
        ex
    }

    fn refresh_feats(&mut self, spec: &TaskSpec) {
        self.feats.clear();
        self.feats.insert(
            RESERVED.to_string(),
            u8::from(self.tokens[2..].contains(&spec.reserved_token)),
        );
        if let Some(m) = spec.marker_token {
            self.feats.insert(
                MARKER.to_string(),
                u8::from(*self.tokens.last().expect("non-empty") == m),
            );
        }
    }

    pub fn feat(&self, name: &str) -> Option<u8> {
        self.feats.get(name).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split tag `{other}`"))),
        }
    }
}

/// A (feature value, label) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub feature: u8,
    pub label: usize,
}

impl Group {
    pub fn new(feature: u8, label: usize) -> Self {
        Self { feature, label }
    }

    /// Compact identifier used in CSV output, e.g. `f1_y0`.
    pub fn key(&self) -> String {
        format!("f{}_y{}", self.feature, self.label)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(F={}, y={})", self.feature, self.label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Subset in the given index order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            split: self.split,
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }

    /// Group membership of every example; errors if an example lacks the
    /// feature annotation.
    pub fn groups(&self, feature: &FeatureHandle) -> Result<Vec<Group>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.feat(feature.name())
                    .map(|f| Group::new(f, e.label))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "example {i} has no `{}` annotation",
                            feature.name()
                        ))
                    })
            })
            .collect()
    }

    /// Map from (feature value, label) to example indices. Only non-empty
    /// groups appear; together they partition the dataset.
    pub fn group_index(&self, feature: &FeatureHandle) -> Result<BTreeMap<Group, Vec<usize>>> {
        let mut index: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
        for (i, g) in self.groups(feature)?.into_iter().enumerate() {
            index.entry(g).or_default().push(i);
        }
        Ok(index)
    }

    pub fn group_counts(&self, feature: &FeatureHandle) -> Result<BTreeMap<Group, usize>> {
        Ok(self
            .group_index(feature)?
            .into_iter()
            .map(|(g, v)| (g, v.len()))
            .collect())
    }

    /// Empirical mutual information between the feature and the label, in bits.
    pub fn mutual_information(&self, feature: &FeatureHandle) -> Result<f64> {
        let counts = self.group_counts(feature)?;
        Ok(mutual_information_bits(&counts))
    }
}

/// Mutual information (bits) of the empirical joint given by group counts.
pub fn mutual_information_bits(counts: &BTreeMap<Group, usize>) -> f64 {
    let n: usize = counts.values().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let mut pf: BTreeMap<u8, f64> = BTreeMap::new();
    let mut py: BTreeMap<usize, f64> = BTreeMap::new();
    for (g, &c) in counts {
        *pf.entry(g.feature).or_default() += c as f64 / n;
        *py.entry(g.label).or_default() += c as f64 / n;
    }
    counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(g, &c)| {
            let pj = c as f64 / n;
            pj * (pj / (pf[&g.feature] * py[&g.label])).log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Deterministic generation: the stream depends only on `(spec, split)`.
pub fn sample_dataset(spec: &TaskSpec, n: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Precondition("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let pool = spec.sampling_pool();
    let examples = (0..n).map(|_| spec.sample_example(&pool, &mut rng)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        split,
        examples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FeatureKind {
    /// Reserved token anywhere in the feature positions; enters the label.
    Reserved,
    /// Marker token at the last position; never enters the label.
    Marker,
}

/// A named binary feature with a detector and two do-operators.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHandle {
    name: String,
    token: TokenId,
    kind: FeatureKind,
    spec: TaskSpec,
    pool: Vec<TokenId>,
}

impl FeatureHandle {
    pub fn reserved(spec: &TaskSpec) -> Self {
        Self {
            name: RESERVED.to_string(),
            token: spec.reserved_token,
            kind: FeatureKind::Reserved,
            spec: spec.clone(),
            pool: spec.sampling_pool(),
        }
    }

    pub fn marker(spec: &TaskSpec) -> Result<Self> {
        let token = spec
            .marker_token
            .ok_or_else(|| Error::Config("task spec has no marker_token".into()))?;
        Ok(Self {
            name: MARKER.to_string(),
            token,
            kind: FeatureKind::Marker,
            spec: spec.clone(),
            pool: spec.sampling_pool(),
        })
    }

    pub fn by_name(spec: &TaskSpec, name: &str) -> Result<Self> {
        match name {
            RESERVED => Ok(Self::reserved(spec)),
            MARKER => Self::marker(spec),
            other => Err(Error::Config(format!("unknown feature `{other}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn token(&self) -> TokenId {
        self.token
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Whether the feature enters the label function.
    pub fn is_causal(&self) -> bool {
        self.kind == FeatureKind::Reserved
    }

    /// Feature positions the detector inspects.
    pub fn positions(&self) -> std::ops::Range<usize> {
        match self.kind {
            FeatureKind::Reserved => 2..self.spec.seq_len,
            FeatureKind::Marker => self.spec.seq_len - 1..self.spec.seq_len,
        }
    }

    pub fn detect(&self, ex: &Example) -> u8 {
        u8::from(ex.tokens[self.positions()].contains(&self.token))
    }

    /// Intervention forcing the feature on. Only feature positions change.
    pub fn do_present<R: Rng + ?Sized>(&self, ex: &Example, rng: &mut R) -> Example {
        if self.detect(ex) == 1 {
            return ex.clone();
        }
        let mut tokens = ex.tokens.clone();
        let last = tokens.len() - 1;
        match self.kind {
            FeatureKind::Reserved => {
                let marker_at_end = Some(tokens[last]) == self.spec.marker_token;
                let end = if marker_at_end { last } else { last + 1 };
                let pos = rng.gen_range(2..end.max(3));
                tokens[pos] = self.token;
            }
            FeatureKind::Marker => {
                if tokens[last] == self.spec.reserved_token
                    && !tokens[2..last].contains(&self.spec.reserved_token)
                {
                    let pos = rng.gen_range(2..last.max(3));
                    tokens[pos] = self.spec.reserved_token;
                }
                tokens[last] = self.token;
            }
        }
        Example::from_tokens(&self.spec, tokens)
    }

    /// Intervention forcing the feature off: every occurrence in the feature
    /// positions is replaced by a uniformly drawn non-feature token.
    pub fn do_absent<R: Rng + ?Sized>(&self, ex: &Example, rng: &mut R) -> Example {
        let mut tokens = ex.tokens.clone();
        for pos in self.positions() {
            if tokens[pos] == self.token {
                tokens[pos] = *self.pool.choose(rng).expect("non-empty pool");
            }
        }
        Example::from_tokens(&self.spec, tokens)
    }

    /// (feature, label) cells that the label function can produce. Bias
    /// strength does not shrink this set; only structural impossibilities do.
    pub fn realizable_groups(&self) -> Vec<Group> {
        let k = self.spec.n_classes();
        let mut out = Vec::new();
        for f in 0..=1u8 {
            for y in 0..k {
                let ok = match self.kind {
                    FeatureKind::Marker => true,
                    FeatureKind::Reserved => [false, true]
                        .iter()
                        .any(|&i| label_fn(self.spec.task_id, i, f == 1) == y),
                };
                if ok {
                    out.push(Group::new(f, y));
                }
            }
        }
        out
    }
}

/// Adds the marker token at the last position of a `prevalence` fraction of
/// examples, choosing them so that a `strength` fraction of marked examples
/// carry `target_label`.
pub fn inject_marker_bias<R: Rng + ?Sized>(
    dataset: &Dataset,
    prevalence: f64,
    strength: f64,
    target_label: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let marker = FeatureHandle::marker(&dataset.spec)?;
    if !(0.0..=1.0).contains(&prevalence) || !(0.0..=1.0).contains(&strength) {
        return Err(Error::Argument(
            "prevalence and strength must lie in [0, 1]".into(),
        ));
    }
    if target_label >= dataset.spec.n_classes() {
        return Err(Error::Argument(format!(
            "target label {target_label} out of range"
        )));
    }
    if let Some(i) = dataset.examples.iter().position(|e| marker.detect(e) == 1) {
        return Err(Error::Precondition(format!(
            "example {i} already carries the marker"
        )));
    }
    let n = dataset.len();
    let n_marked = (prevalence * n as f64).round() as usize;
    let n_target = (strength * n_marked as f64).round() as usize;
    let n_other = n_marked - n_target;

    let (mut target_idx, mut other_idx): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| dataset.examples[i].label == target_label);
    if n_target > target_idx.len() || n_other > other_idx.len() {
        let (which, needed, available) = if n_target > target_idx.len() {
            (format!("label {target_label}"), n_target, target_idx.len())
        } else {
            (format!("a label other than {target_label}"), n_other, other_idx.len())
        };
        let max_by_target = if strength > 0.0 {
            target_idx.len() as f64 / (strength * n as f64)
        } else {
            f64::INFINITY
        };
        let max_by_other = if strength < 1.0 {
            other_idx.len() as f64 / ((1.0 - strength) * n as f64)
        } else {
            f64::INFINITY
        };
        return Err(Error::Infeasible {
            which,
            needed,
            available,
            max_prevalence: max_by_target.min(max_by_other).min(1.0),
        });
    }
    target_idx.shuffle(rng);
    other_idx.shuffle(rng);

    let mut out = dataset.clone();
    let chosen = target_idx[..n_target].iter().chain(&other_idx[..n_other]);
    for &i in chosen {
        let ex = &out.examples[i];
        let marked = marker.do_present(ex, rng);
        debug_assert_eq!(marked.label, ex.label);
        out.examples[i] = marked;
    }
    Ok(out)
}

/// Uniformly subsamples every realizable (feature, label) group to the size of
/// the smallest one. Kept examples stay in their original order.
pub fn subsample_balanced<R: Rng + ?Sized>(
    dataset: &Dataset,
    feature: &FeatureHandle,
    rng: &mut R,
) -> Result<Dataset> {
    let index = dataset.group_index(feature)?;
    let universe = feature.realizable_groups();
    let mut min = usize::MAX;
    for g in &universe {
        let c = index.get(g).map_or(0, Vec::len);
        if c == 0 {
            return Err(Error::EmptyGroup(*g));
        }
        min = min.min(c);
    }
    let mut keep = Vec::with_capacity(min * universe.len());
    for g in &universe {
        let mut idx = index[g].clone();
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..min]);
    }
    keep.sort_unstable();
    Ok(dataset.subset(&keep))
}

/// Subsamples so that each of `labels` has the same count. Errors when fewer
/// than two labels are requested or any of them is missing.
pub fn balance_labels<R: Rng + ?Sized>(
    dataset: &Dataset,
    labels: &[usize],
    rng: &mut R,
) -> Result<Dataset> {
    if labels.len() < 2 {
        return Err(Error::SingleLabelGroup(format!(
            "need at least two labels, got {labels:?}"
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = labels.iter().map(|&y| (y, vec![])).collect();
    for (i, e) in dataset.examples.iter().enumerate() {
        if let Some(v) = by_label.get_mut(&e.label) {
            v.push(i);
        }
    }
    let min = by_label.values().map(Vec::len).min().unwrap_or(0);
    if min == 0 {
        let missing: Vec<usize> = by_label
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(&y, _)| y)
            .collect();
        return Err(Error::SingleLabelGroup(format!(
            "labels {missing:?} have no examples"
        )));
    }
    let mut keep = Vec::with_capacity(min * by_label.len());
    for idx in by_label.values_mut() {
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..min]);
    }
    keep.sort_unstable();
    Ok(dataset.subset(&keep))
}

/// Partition of a dataset by feature value.
#[derive(Clone, Debug)]
pub struct GroupSplit {
    pub groups: BTreeMap<u8, Dataset>,
    /// Per group, label counts indexed by label.
    pub label_marginals: BTreeMap<u8, Vec<usize>>,
    /// Set when one side of the split is empty.
    pub single_group: bool,
}

impl GroupSplit {
    pub fn get(&self, feature_value: u8) -> &Dataset {
        &self.groups[&feature_value]
    }
}

pub fn group_split(dataset: &Dataset, feature: &FeatureHandle) -> Result<GroupSplit> {
    let k = dataset.spec.n_classes();
    let mut idx: BTreeMap<u8, Vec<usize>> = [(0u8, vec![]), (1u8, vec![])].into();
    for (i, e) in dataset.examples.iter().enumerate() {
        let f = e.feat(feature.name()).ok_or_else(|| {
            Error::Config(format!("example {i} has no `{}` annotation", feature.name()))
        })?;
        idx.get_mut(&f)
            .ok_or_else(|| Error::Input(format!("feature value {f} is not binary")))?
            .push(i);
    }
    let mut groups = BTreeMap::new();
    let mut label_marginals = BTreeMap::new();
    for (f, members) in &idx {
        let d = dataset.subset(members);
        let mut m = vec![0usize; k];
        for e in &d.examples {
            m[e.label] += 1;
        }
        label_marginals.insert(*f, m);
        groups.insert(*f, d);
    }
    let single_group = idx.values().any(Vec::is_empty);
    if single_group {
        log::warn!("group split of `{}` has an empty side", feature.name());
    }
    Ok(GroupSplit {
        groups,
        label_marginals,
        single_group,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<i64>,
    label: i64,
    feats: BTreeMap<String, i64>,
    split: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    spec: TaskSpec,
    split: Split,
    n_examples: usize,
    features: Vec<String>,
}

const FORMAT_TAG: &str = "pnpslab-dataset/1";

/// Path of the header file that accompanies a dataset file.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

/// Writes one JSON record per line plus a `<path>.header.json` sidecar.
pub fn serialize(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        spec: dataset.spec.clone(),
        split: dataset.split,
        n_examples: dataset.len(),
        features: dataset
            .spec
            .feature_names()
            .into_iter()
            .map(String::from)
            .collect(),
    };
    let mut hw = BufWriter::new(File::create(header_path(path))?);
    serde_json::to_writer_pretty(&mut hw, &header)?;
    hw.write_all(b"\n")?;
    hw.flush()?;

    let mut w = BufWriter::new(File::create(path)?);
    for e in &dataset.examples {
        let rec = Record {
            tokens: e.tokens.iter().map(|&t| i64::from(t)).collect(),
            label: e.label as i64,
            feats: e.feats.iter().map(|(k, &v)| (k.clone(), i64::from(v))).collect(),
            split: dataset.split.to_string(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn deserialize(path: &Path) -> Result<Dataset> {
    let header: Header = serde_json::from_reader(BufReader::new(File::open(header_path(path))?))
        .map_err(|e| Error::Parse {
            line: 0,
            message: format!("header: {e}"),
        })?;
    if header.format != FORMAT_TAG {
        return Err(Error::Parse {
            line: 0,
            message: format!("unsupported format `{}`", header.format),
        });
    }
    let spec = header.spec;
    spec.validate()?;
    let expected_feats = spec.feature_names();

    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::with_capacity(header.n_examples);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        if rec.split != header.split.as_str() {
            return Err(perr(format!(
                "split `{}` does not match header split `{}`",
                rec.split, header.split
            )));
        }
        if rec.tokens.len() != spec.seq_len {
            return Err(perr(format!(
                "expected {} tokens, found {}",
                spec.seq_len,
                rec.tokens.len()
            )));
        }
        let mut tokens = Vec::with_capacity(rec.tokens.len());
        for &t in &rec.tokens {
            if t < 0 || t >= i64::from(spec.vocab_size) {
                return Err(perr(format!(
                    "token id {t} outside vocabulary of size {}",
                    spec.vocab_size
                )));
            }
            tokens.push(t as TokenId);
        }
        let ex = Example::from_tokens(&spec, tokens);
        if rec.label < 0 || rec.label as usize != ex.label {
            return Err(perr(format!(
                "label {} inconsistent with tokens (expected {})",
                rec.label, ex.label
            )));
        }
        for name in &expected_feats {
            let v = rec
                .feats
                .get(*name)
                .ok_or_else(|| perr(format!("missing feats key `{name}`")))?;
            if *v != i64::from(ex.feats[*name]) {
                return Err(perr(format!(
                    "feats[`{name}`] = {v} disagrees with detector ({})",
                    ex.feats[*name]
                )));
            }
        }
        if let Some(extra) = rec.feats.keys().find(|k| !expected_feats.contains(&k.as_str())) {
            return Err(perr(format!("unknown feature `{extra}`")));
        }
        examples.push(ex);
    }
    if examples.len() != header.n_examples {
        return Err(Error::Parse {
            line: examples.len() + 1,
            message: format!(
                "header announces {} examples, file has {}",
                header.n_examples,
                examples.len()
            ),
        });
    }
    Ok(Dataset {
        spec,
        split: header.split,
        examples,
    })
}

//! Counterfactual labels and probabilities of necessity and sufficiency.
//!
//! Two independent routes are provided. The exact route enumerates the latent
//! `(I, F)` distribution in closed form and is generic over [`Probability`], so
//! it can run on exact rationals. The Monte-Carlo route samples token
//! sequences, applies the feature's do-operators at the token level and
//! relabels the result from the tokens.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{label_fn, Example, FeatureHandle, TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::scalar::Probability;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ForcePresent,
    ForceAbsent,
    /// Replace the token at a 0-based position with a uniformly drawn
    /// different token.
    ReplaceToken(usize),
}

#[derive(Clone, Debug)]
pub struct Intervention {
    pub feature: FeatureHandle,
    pub direction: Direction,
}

impl Intervention {
    pub fn new(feature: FeatureHandle, direction: Direction) -> Self {
        Self { feature, direction }
    }

    /// Draws one intervened example at the token level.
    pub fn apply<R: Rng + ?Sized>(&self, example: &Example, rng: &mut R) -> Result<Example> {
        let spec = self.feature.spec();
        match self.direction {
            Direction::ForcePresent => Ok(self.feature.do_present(example, rng)),
            Direction::ForceAbsent => Ok(self.feature.do_absent(example, rng)),
            Direction::ReplaceToken(pos) => {
                check_position(spec, pos)?;
                let current = example.tokens[pos];
                let mut tokens = example.tokens.clone();
                tokens[pos] = if pos < 2 {
                    let pool = spec.sampling_pool();
                    loop {
                        let t = pool[rng.gen_range(0..pool.len())];
                        if t != current {
                            break t;
                        }
                    }
                } else {
                    loop {
                        let t = rng.gen_range(0..spec.vocab_size);
                        if t != current {
                            break t;
                        }
                    }
                };
                Ok(Example::from_tokens(spec, tokens))
            }
        }
    }
}

fn check_position(spec: &TaskSpec, pos: usize) -> Result<()> {
    if pos >= spec.seq_len {
        Err(Error::Argument(format!(
            "replacement position {pos} out of range for length {}",
            spec.seq_len
        )))
    } else {
        Ok(())
    }
}

fn two<P: Probability>() -> P {
    P::one() + P::one()
}

fn from_count<P: Probability>(n: u64) -> P {
    (0..n).fold(P::zero(), |acc, _| acc + P::one())
}

fn point_mass<P: Probability>(k: usize, label: usize) -> Vec<P> {
    (0..k)
        .map(|y| if y == label { P::one() } else { P::zero() })
        .collect()
}

/// Exact label distribution after an intervention.
///
/// Replacement draws are uniform over admissible tokens: the sampling pool
/// minus the current token at positions 0 and 1, and the whole vocabulary
/// minus the current token at feature positions.
pub fn counterfactual_label<P: Probability>(
    example: &Example,
    intervention: &Intervention,
) -> Result<Vec<P>> {
    let feature = &intervention.feature;
    let spec = feature.spec();
    let k = spec.n_classes();
    let task = spec.task_id;
    let latent = spec.latent_of(&example.tokens);

    if !feature.is_causal() {
        // Only the reserved token enters the label; other interventions can
        // still change the label through positions 0 and 1.
        if let Direction::ReplaceToken(pos) = intervention.direction {
            check_position(spec, pos)?;
            if pos >= 2 {
                return replace_feature_position(example, spec, pos);
            }
            return replace_leading_position(example, spec, pos);
        }
        return Ok(point_mass(k, label_fn(task, latent.identical, latent.feature)));
    }

    match intervention.direction {
        Direction::ForceAbsent => Ok(point_mass(k, label_fn(task, latent.identical, false))),
        Direction::ForcePresent => Ok(point_mass(k, label_fn(task, latent.identical, true))),
        Direction::ReplaceToken(pos) => {
            check_position(spec, pos)?;
            if pos < 2 {
                replace_leading_position(example, spec, pos)
            } else {
                replace_feature_position(example, spec, pos)
            }
        }
    }
}

fn mixture<P: Probability>(k: usize, outcomes: &[(P, usize)]) -> Vec<P> {
    let mut dist = vec![P::zero(); k];
    for (p, y) in outcomes {
        dist[*y] = dist[*y].clone() + p.clone();
    }
    dist
}

fn replace_leading_position<P: Probability>(
    example: &Example,
    spec: &TaskSpec,
    pos: usize,
) -> Result<Vec<P>> {
    let latent = spec.latent_of(&example.tokens);
    let k = spec.n_classes();
    let task = spec.task_id;
    let f = latent.feature;
    if latent.identical {
        // any different token breaks the identity
        return Ok(point_mass(k, label_fn(task, false, f)));
    }
    let admissible = spec.sampling_pool().len() as u64 - 1;
    let other = example.tokens[1 - pos];
    let p_match: P = if spec.sampling_pool().contains(&other) {
        P::one() / from_count(admissible)
    } else {
        P::zero()
    };
    Ok(mixture(
        k,
        &[
            (p_match.clone(), label_fn(task, true, f)),
            (P::one() - p_match, label_fn(task, false, f)),
        ],
    ))
}

fn replace_feature_position<P: Probability>(
    example: &Example,
    spec: &TaskSpec,
    pos: usize,
) -> Result<Vec<P>> {
    let latent = spec.latent_of(&example.tokens);
    let k = spec.n_classes();
    let task = spec.task_id;
    let i = latent.identical;
    let reserved = spec.reserved_token;
    if example.tokens[pos] == reserved {
        let others = example.tokens[2..]
            .iter()
            .enumerate()
            .any(|(j, &t)| j + 2 != pos && t == reserved);
        return Ok(point_mass(k, label_fn(task, i, others)));
    }
    if latent.feature {
        return Ok(point_mass(k, label_fn(task, i, true)));
    }
    let p_insert: P = P::one() / from_count(u64::from(spec.vocab_size) - 1);
    Ok(mixture(
        k,
        &[
            (p_insert.clone(), label_fn(task, i, true)),
            (P::one() - p_insert, label_fn(task, i, false)),
        ],
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    MonteCarlo,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::MonteCarlo => "monte_carlo",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnPsEstimate<P = f64> {
    pub value: P,
    pub stderr: P,
    pub n_samples: usize,
    pub method: Method,
}

impl<P: Probability> PnPsEstimate<P> {
    fn exact(value: P) -> Self {
        Self {
            value,
            stderr: P::zero(),
            n_samples: 0,
            method: Method::Exact,
        }
    }

    pub fn to_f64(&self) -> PnPsEstimate<f64> {
        PnPsEstimate {
            value: self.value.to_prob(),
            stderr: self.stderr.to_prob(),
            n_samples: self.n_samples,
            method: self.method,
        }
    }
}

/// Context-level PN: probability that removing the present feature changes
/// the label of this example.
pub fn pn_context<P: Probability>(
    example: &Example,
    feature: &FeatureHandle,
) -> Result<PnPsEstimate<P>> {
    if feature.detect(example) != 1 {
        return Err(Error::Precondition(format!(
            "PN conditions on `{}` being present",
            feature.name()
        )));
    }
    let dist: Vec<P> = counterfactual_label(
        example,
        &Intervention::new(feature.clone(), Direction::ForceAbsent),
    )?;
    Ok(PnPsEstimate::exact(P::one() - dist[example.label].clone()))
}

/// Context-level PS: probability that adding the absent feature produces
/// `target` on an example whose label differs from it.
pub fn ps_context<P: Probability>(
    example: &Example,
    feature: &FeatureHandle,
    target: usize,
) -> Result<PnPsEstimate<P>> {
    if feature.detect(example) != 0 {
        return Err(Error::Precondition(format!(
            "PS conditions on `{}` being absent",
            feature.name()
        )));
    }
    if example.label == target {
        return Err(Error::Precondition(format!(
            "PS conditions on the label differing from the target {target}"
        )));
    }
    let dist: Vec<P> = counterfactual_label(
        example,
        &Intervention::new(feature.clone(), Direction::ForcePresent),
    )?;
    Ok(PnPsEstimate::exact(dist[target].clone()))
}

/// Joint probability of the latent pair, indexed `[identical][feature]`.
pub fn latent_joint<P: Probability>(spec: &TaskSpec) -> [[P; 2]; 2] {
    let half = P::one() / two::<P>();
    let b = P::from_prob(spec.bias_strength);
    let q = P::from_prob(spec.identical_prob);
    let one = P::one();
    // p(I | F) and p(F) for tasks conditioning on F, p(F | I) for task A.
    match spec.task_id {
        TaskId::A => {
            let pf_given_i = |i: bool| if i { b.clone() } else { one.clone() - b.clone() };
            let cell = |i: bool, f: bool| {
                let pf = pf_given_i(i);
                let pf = if f { pf } else { one.clone() - pf };
                half.clone() * pf
            };
            [
                [cell(false, false), cell(false, true)],
                [cell(true, false), cell(true, true)],
            ]
        }
        TaskId::B => {
            let pi1 = one.clone() - b.clone();
            let pi0 = b;
            [
                [half.clone() * pi0.clone(), half.clone() * pi0],
                [half.clone() * pi1.clone(), half * pi1],
            ]
        }
        TaskId::C => {
            let shift = two::<P>() * b - one.clone();
            let mut pi_f1 = q.clone() + (one.clone() - q.clone()) * shift;
            if pi_f1 > one {
                pi_f1 = one.clone();
            }
            let pi_f0 = q;
            [
                [
                    half.clone() * (one.clone() - pi_f0.clone()),
                    half.clone() * (one.clone() - pi_f1.clone()),
                ],
                [half.clone() * pi_f0, half * pi_f1],
            ]
        }
    }
}

/// Marginal PN in closed form: average context PN over contexts with the
/// feature present and label `target`.
pub fn pn_marginal_exact<P: Probability>(
    spec: &TaskSpec,
    feature: &FeatureHandle,
    target: usize,
) -> Result<PnPsEstimate<P>> {
    check_target(spec, target)?;
    if !feature.is_causal() {
        return Ok(PnPsEstimate::exact(P::zero()));
    }
    let joint = latent_joint::<P>(spec);
    let (mut mass, mut flipped) = (P::zero(), P::zero());
    for i in [false, true] {
        let p = joint[usize::from(i)][1].clone();
        if label_fn(spec.task_id, i, true) != target || p == P::zero() {
            continue;
        }
        mass = mass + p.clone();
        if label_fn(spec.task_id, i, false) != target {
            flipped = flipped + p;
        }
    }
    if mass == P::zero() {
        return Err(Error::Undefined(format!(
            "task {}: feature present with label {target} has probability 0",
            spec.task_id
        )));
    }
    Ok(PnPsEstimate::exact(flipped / mass))
}

/// Marginal PS in closed form: average context PS over contexts with the
/// feature absent and label different from `target`.
pub fn ps_marginal_exact<P: Probability>(
    spec: &TaskSpec,
    feature: &FeatureHandle,
    target: usize,
) -> Result<PnPsEstimate<P>> {
    check_target(spec, target)?;
    if !feature.is_causal() {
        return Ok(PnPsEstimate::exact(P::zero()));
    }
    let joint = latent_joint::<P>(spec);
    let (mut mass, mut produced) = (P::zero(), P::zero());
    for i in [false, true] {
        let p = joint[usize::from(i)][0].clone();
        if label_fn(spec.task_id, i, false) == target || p == P::zero() {
            continue;
        }
        mass = mass + p.clone();
        if label_fn(spec.task_id, i, true) == target {
            produced = produced + p;
        }
    }
    if mass == P::zero() {
        return Err(Error::Undefined(format!(
            "task {}: feature absent with label != {target} has probability 0",
            spec.task_id
        )));
    }
    Ok(PnPsEstimate::exact(produced / mass))
}

fn check_target(spec: &TaskSpec, target: usize) -> Result<()> {
    if target >= spec.n_classes() {
        Err(Error::Argument(format!(
            "target label {target} out of range for task {}",
            spec.task_id
        )))
    } else {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Exact,
    MonteCarlo { n_samples: usize },
}

#[derive(Clone, Copy)]
enum Quantity {
    Necessity,
    Sufficiency,
}

fn mc_estimate<R: Rng + ?Sized>(
    spec: &TaskSpec,
    feature: &FeatureHandle,
    target: usize,
    n_samples: usize,
    what: Quantity,
    rng: &mut R,
) -> Result<PnPsEstimate<f64>> {
    check_target(spec, target)?;
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be >= 1".into()));
    }
    let pool = spec.sampling_pool();
    let max_attempts = n_samples.saturating_mul(1000).max(100_000);
    let (mut accepted, mut hits, mut attempts) = (0usize, 0usize, 0usize);
    while accepted < n_samples && attempts < max_attempts {
        attempts += 1;
        let ex = spec.sample_example(&pool, rng);
        let present = feature.detect(&ex) == 1;
        let qualifies = match what {
            Quantity::Necessity => present && ex.label == target,
            Quantity::Sufficiency => !present && ex.label != target,
        };
        if !qualifies {
            continue;
        }
        accepted += 1;
        let hit = match what {
            Quantity::Necessity => feature.do_absent(&ex, rng).label != target,
            Quantity::Sufficiency => feature.do_present(&ex, rng).label == target,
        };
        hits += usize::from(hit);
    }
    if accepted < n_samples {
        return Err(Error::Undefined(format!(
            "conditioning event too rare: {accepted} of {n_samples} contexts after {attempts} draws"
        )));
    }
    let p = hits as f64 / accepted as f64;
    Ok(PnPsEstimate {
        value: p,
        stderr: (p * (1.0 - p) / accepted as f64).sqrt(),
        n_samples: accepted,
        method: Method::MonteCarlo,
    })
}

pub fn pn_marginal<R: Rng + ?Sized>(
    spec: &TaskSpec,
    feature: &FeatureHandle,
    target: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<PnPsEstimate<f64>> {
    match mode {
        Mode::Exact => Ok(pn_marginal_exact::<f64>(spec, feature, target)?),
        Mode::MonteCarlo { n_samples } => {
            mc_estimate(spec, feature, target, n_samples, Quantity::Necessity, rng)
        }
    }
}

pub fn ps_marginal<R: Rng + ?Sized>(
    spec: &TaskSpec,
    feature: &FeatureHandle,
    target: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<PnPsEstimate<f64>> {
    match mode {
        Mode::Exact => Ok(ps_marginal_exact::<f64>(spec, feature, target)?),
        Mode::MonteCarlo { n_samples } => {
            mc_estimate(spec, feature, target, n_samples, Quantity::Sufficiency, rng)
        }
    }
}

/// `1 - PS`; a feature is spurious for `target` when this is positive.
pub fn spuriousness(spec: &TaskSpec, feature: &FeatureHandle, target: usize) -> Result<f64> {
    Ok(1.0 - ps_marginal_exact::<f64>(spec, feature, target)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Irrelevant,
    NecessaryNotSufficient,
    SufficientNotNecessary,
    NecessaryAndSufficient,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Irrelevant => "irrelevant",
            Category::NecessaryNotSufficient => "necessary-not-sufficient",
            Category::SufficientNotNecessary => "sufficient-not-necessary",
            Category::NecessaryAndSufficient => "necessary-and-sufficient",
        })
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Quadrant of the PN/PS plane; "high" means `>= threshold`.
pub fn categorize(pn: f64, ps: f64, threshold: f64) -> Category {
    match (pn >= threshold, ps >= threshold) {
        (false, false) => Category::Irrelevant,
        (true, false) => Category::NecessaryNotSufficient,
        (false, true) => Category::SufficientNotNecessary,
        (true, true) => Category::NecessaryAndSufficient,
    }
}

/// One line of the PN/PS report.
#[derive(Clone, Debug, PartialEq)]
pub struct PnpsRow {
    pub task: TaskId,
    pub feature: String,
    pub target_label: usize,
    pub pn: Option<PnPsEstimate<f64>>,
    pub ps: Option<PnPsEstimate<f64>>,
    pub method: Method,
}

impl PnpsRow {
    pub fn spuriousness(&self) -> Option<f64> {
        self.ps.as_ref().map(|ps| 1.0 - ps.value)
    }

    pub fn category(&self, threshold: f64) -> Option<Category> {
        match (&self.pn, &self.ps) {
            (Some(pn), Some(ps)) => Some(categorize(pn.value, ps.value, threshold)),
            _ => None,
        }
    }

    /// Exact or Monte-Carlo row for one (task, feature, target). Undefined
    /// conditioning events leave the corresponding estimate empty.
    pub fn compute<R: Rng + ?Sized>(
        spec: &TaskSpec,
        feature: &FeatureHandle,
        target: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Self> {
        let keep_defined = |r: Result<PnPsEstimate<f64>>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let pn = keep_defined(pn_marginal(spec, feature, target, mode, rng))?;
        let ps = keep_defined(ps_marginal(spec, feature, target, mode, rng))?;
        Ok(Self {
            task: spec.task_id,
            feature: feature.name().to_string(),
            target_label: target,
            pn,
            ps,
            method: match mode {
                Mode::Exact => Method::Exact,
                Mode::MonteCarlo { .. } => Method::MonteCarlo,
            },
        })
    }
}

pub const PNPS_HEADER: &str =
    "task,feature,target_label,pn,pn_stderr,ps,ps_stderr,spuriousness,category,method,n_samples";

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub fn write_pnps_csv<W: Write>(mut w: W, rows: &[PnpsRow], threshold: f64) -> Result<()> {
    writeln!(w, "{PNPS_HEADER}")?;
    for r in rows {
        let n = r
            .pn
            .as_ref()
            .map(|e| e.n_samples)
            .max(r.ps.as_ref().map(|e| e.n_samples))
            .unwrap_or(0);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.task,
            r.feature,
            r.target_label,
            fmt_opt(r.pn.as_ref().map(|e| e.value)),
            fmt_opt(r.pn.as_ref().map(|e| e.stderr)),
            fmt_opt(r.ps.as_ref().map(|e| e.value)),
            fmt_opt(r.ps.as_ref().map(|e| e.stderr)),
            fmt_opt(r.spuriousness()),
            r.category(threshold)
                .map_or_else(|| "undefined".to_string(), |c| c.to_string()),
            r.method,
            n
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_dataset, Split};
    use crate::scalar::Rational;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(spec: &TaskSpec, identical: bool, feature: bool) -> Example {
        let mut tokens: Vec<u32> = (10..10 + spec.seq_len as u32).collect();
        if identical {
            tokens[1] = tokens[0];
        }
        if feature {
            tokens[4] = spec.reserved_token;
        }
        Example::from_tokens(spec, tokens)
    }

    #[test]
    fn counterfactual_point_masses() {
        let b = TaskSpec::new(TaskId::B);
        let e = example(&b, true, true);
        assert_eq!(e.label, 0);
        let iv = Intervention::new(FeatureHandle::reserved(&b), Direction::ForceAbsent);
        assert_eq!(counterfactual_label::<f64>(&e, &iv).unwrap(), vec![0.0, 1.0]);

        let a = TaskSpec::new(TaskId::A);
        for (i, f) in [(false, false), (true, true), (false, true)] {
            let e = example(&a, i, f);
            let iv = Intervention::new(FeatureHandle::reserved(&a), Direction::ForceAbsent);
            let d = counterfactual_label::<f64>(&e, &iv).unwrap();
            assert_eq!(d[e.label], 1.0);
        }

        let c = TaskSpec::new(TaskId::C);
        let e = example(&c, false, true);
        assert_eq!(e.label, 1);
        let iv = Intervention::new(FeatureHandle::reserved(&c), Direction::ForceAbsent);
        assert_eq!(counterfactual_label::<f64>(&e, &iv).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn replace_token_distributions() {
        let spec = TaskSpec::new(TaskId::B).with_vocab(30);
        let f = FeatureHandle::reserved(&spec);
        // removing the only reserved occurrence flips F
        let e = example(&spec, false, true);
        let iv = Intervention::new(f.clone(), Direction::ReplaceToken(4));
        assert_eq!(counterfactual_label::<Rational>(&e, &iv).unwrap()[e.label], Rational::from_integer(0));
        // inserting at a feature position happens with probability 1/(V-1)
        let e = example(&spec, false, false);
        let iv = Intervention::new(f.clone(), Direction::ReplaceToken(5));
        let d = counterfactual_label::<Rational>(&e, &iv).unwrap();
        assert_eq!(d[1], Rational::new(1, 29));
        // leading position on a non-identical pair: match with prob 1/(|pool|-1)
        let iv = Intervention::new(f.clone(), Direction::ReplaceToken(0));
        let d = counterfactual_label::<Rational>(&e, &iv).unwrap();
        assert_eq!(d[1], Rational::new(1, 28));
        let iv = Intervention::new(f, Direction::ReplaceToken(10));
        assert!(matches!(
            counterfactual_label::<f64>(&e, &iv),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn replace_token_monte_carlo_agrees() {
        let spec = TaskSpec::new(TaskId::C).with_vocab(6);
        let f = FeatureHandle::reserved(&spec);
        let e = Example::from_tokens(&spec, vec![0, 1, 3, 4, 5, 3, 4, 5, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for pos in [0usize, 1, 5] {
            let iv = Intervention::new(f.clone(), Direction::ReplaceToken(pos));
            let exact = counterfactual_label::<f64>(&e, &iv).unwrap();
            let n = 20_000;
            let mut counts = vec![0usize; 3];
            for _ in 0..n {
                counts[iv.apply(&e, &mut rng).unwrap().label] += 1;
            }
            for y in 0..3 {
                let p = exact[y];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((counts[y] as f64 / n as f64 - p).abs() <= 4.0 * se + 1e-12);
            }
        }
    }

    #[test]
    fn context_estimates() {
        let a = TaskSpec::new(TaskId::A);
        let b = TaskSpec::new(TaskId::B);
        let c = TaskSpec::new(TaskId::C);
        for i in [false, true] {
            let fa = FeatureHandle::reserved(&a);
            assert_eq!(pn_context::<f64>(&example(&a, i, true), &fa).unwrap().value, 0.0);
            let fb = FeatureHandle::reserved(&b);
            assert_eq!(pn_context::<f64>(&example(&b, i, true), &fb).unwrap().value, 1.0);
            let e = example(&a, i, false);
            let other = 1 - e.label;
            assert_eq!(ps_context::<f64>(&e, &fa, other).unwrap().value, 0.0);
        }
        let fc = FeatureHandle::reserved(&c);
        let e = example(&c, true, true);
        assert_eq!(e.label, 2);
        assert_eq!(pn_context::<f64>(&e, &fc).unwrap().value, 1.0);
        assert_eq!(ps_context::<f64>(&example(&c, true, false), &fc, 2).unwrap().value, 1.0);
        assert_eq!(ps_context::<f64>(&example(&c, false, false), &fc, 2).unwrap().value, 0.0);

        assert!(matches!(
            pn_context::<f64>(&example(&c, true, false), &fc),
            Err(Error::Precondition(_))
        ));
        let err = ps_context::<f64>(&example(&c, true, false), &fc, 0).unwrap_err();
        assert!(err.to_string().contains("label"));
        let err = ps_context::<f64>(&example(&c, true, true), &fc, 2).unwrap_err();
        assert!(err.to_string().contains("absent"));
    }

    #[test]
    fn context_estimates_ignore_background_order() {
        let spec = TaskSpec::new(TaskId::C).with_seed(3);
        let f = FeatureHandle::reserved(&spec);
        let d = sample_dataset(&spec, 200, Split::Train).unwrap();
        for e in d.examples.iter().filter(|e| e.latent.feature) {
            let mut tokens = e.tokens.clone();
            tokens[2..].reverse();
            let p = Example::from_tokens(&spec, tokens);
            assert_eq!(
                pn_context::<f64>(e, &f).unwrap(),
                pn_context::<f64>(&p, &f).unwrap()
            );
        }
    }

    #[test]
    fn latent_joint_sums_to_one_exactly() {
        for task in TaskId::ALL {
            for b in [0.5, 0.7, 0.9, 1.0] {
                let spec = TaskSpec::new(task).with_strength(b);
                let j = latent_joint::<Rational>(&spec);
                let total = j[0][0] + j[0][1] + j[1][0] + j[1][1];
                assert_eq!(total, Rational::from_integer(1), "{task} b={b}");
            }
        }
    }

    #[test]
    fn marginal_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = TaskSpec::new(TaskId::A);
        let fa = FeatureHandle::reserved(&a);
        assert_eq!(pn_marginal(&a, &fa, 1, Mode::Exact, &mut rng).unwrap().value, 0.0);
        assert_eq!(spuriousness(&a, &fa, 1).unwrap(), 1.0);

        let b = TaskSpec::new(TaskId::B);
        let fb = FeatureHandle::reserved(&b);
        assert_eq!(pn_marginal(&b, &fb, 1, Mode::Exact, &mut rng).unwrap().value, 1.0);
        assert_eq!(spuriousness(&b, &fb, 1).unwrap(), 0.0);

        let c = TaskSpec::new(TaskId::C);
        let fc = FeatureHandle::reserved(&c);
        let ps = ps_marginal_exact::<Rational>(&c, &fc, 2).unwrap();
        assert_eq!(ps.value, Rational::new(3, 10));
        assert_eq!(ps.stderr, Rational::from_integer(0));
        assert!((spuriousness(&c, &fc, 2).unwrap() - 0.7).abs() < 1e-15);
        // PN for y = 0 conditions on an impossible event
        assert!(matches!(
            pn_marginal_exact::<f64>(&c, &fc, 0),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn categorize_quadrants() {
        assert_eq!(categorize(0.0, 0.0, 0.5), Category::Irrelevant);
        assert_eq!(categorize(1.0, 0.3, 0.5), Category::NecessaryNotSufficient);
        assert_eq!(categorize(0.2, 0.9, 0.5), Category::SufficientNotNecessary);
        assert_eq!(categorize(1.0, 1.0, 0.5), Category::NecessaryAndSufficient);
        assert_eq!(Category::NecessaryNotSufficient.to_string(), "necessary-not-sufficient");
    }

    #[test]
    fn csv_row_format() {
        let spec = TaskSpec::new(TaskId::C);
        let f = FeatureHandle::reserved(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row = PnpsRow::compute(&spec, &f, 2, Mode::Exact, &mut rng).unwrap();
        let undefined = PnpsRow::compute(&spec, &f, 0, Mode::Exact, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_pnps_csv(&mut buf, &[row, undefined], DEFAULT_THRESHOLD).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PNPS_HEADER);
        assert_eq!(
            lines[1],
            "C,reserved,2,1.000000,0.000000,0.300000,0.000000,0.700000,necessary-not-sufficient,exact,0"
        );
        assert!(lines[2].starts_with("C,reserved,0,NA,NA,"));
        assert!(lines[2].contains("undefined"));
    }
}

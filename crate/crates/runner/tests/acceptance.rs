//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::Utc;
use pnpslab::experiments::run;
use pnpslab::record::persist;
use pnpslab::{ExperimentConfig, ExperimentKind, ExperimentOutput};
use pnpslab_core::datagen::{sample_dataset, subsample_balanced, FeatureHandle, Split, TaskId, TaskSpec};
use pnpslab_core::linalg::{dot, Matrix};
use pnpslab_core::neuralnet::{finite_diff_check, Batch, ModelConfig, ModelState};
use pnpslab_core::oracle::{pn_marginal, pn_marginal_exact, ps_marginal, ps_marginal_exact, Mode};
use pnpslab_core::repranalysis::{inlp, mdl_online_code, InlpConfig, ProbeConfig, RepMatrix, DEFAULT_SCHEDULE};
use pnpslab_core::scalar::Rational;
use pnpslab_core::training::TrainMethod;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of one criterion: pass flag and a one-line account of the numbers.
struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn runs_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn canned(name: &str) -> ExperimentConfig {
    let path = configs_dir().join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_and_persist(kind: ExperimentKind, cfg: &ExperimentConfig) -> ExperimentOutput {
    let started = Utc::now();
    let out = run(kind, cfg).unwrap_or_else(|e| panic!("{kind}: {e}"));
    persist(&runs_dir().join(kind.as_str()), kind.as_str(), cfg, &out, started).expect("persist run");
    out
}

fn metric(out: &ExperimentOutput, key: &str) -> f64 {
    out.metric(key).unwrap_or_else(|| panic!("missing summary metric {key}"))
}

fn oracle_exactness() -> Verdict {
    let one = Rational::from_integer(1);
    let zero = Rational::from_integer(0);
    let mut notes = Vec::new();
    let mut ok = true;
    // (task, target, exact PN, exact PS)
    let cases = [
        (TaskId::A, 1, zero, zero),
        (TaskId::B, 1, one, one),
        (TaskId::C, 2, one, Rational::new(3, 10)),
    ];
    for (task, target, pn_want, ps_want) in cases {
        let spec = TaskSpec::new(task).with_strength(0.9);
        let f = FeatureHandle::reserved(&spec);
        let pn = pn_marginal_exact::<Rational>(&spec, &f, target).expect("exact pn").value;
        let ps = ps_marginal_exact::<Rational>(&spec, &f, target).expect("exact ps").value;
        if pn != pn_want || ps != ps_want {
            ok = false;
            notes.push(format!("{task}: exact PN {pn} PS {ps}"));
        }
        let (pn_f, ps_f) = (rational_f64(pn_want), rational_f64(ps_want));
        let n = 10_000;
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pn_mc = pn_marginal(&spec, &f, target, Mode::MonteCarlo { n_samples: n }, &mut rng).expect("mc pn");
            let ps_mc = ps_marginal(&spec, &f, target, Mode::MonteCarlo { n_samples: n }, &mut rng).expect("mc ps");
            for (est, exact) in [(pn_mc.value, pn_f), (ps_mc.value, ps_f)] {
                let se = (exact * (1.0 - exact) / n as f64).sqrt();
                let dev = (est - exact).abs();
                let z = if se > 0.0 { dev / se } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
                worst = worst.max(z);
            }
        }
        if worst > 4.0 {
            ok = false;
        }
        notes.push(format!("{task} max |z| {worst:.2}"));
    }
    Verdict::new(ok, format!("A 0/0, B 1/1, C 1/(3/10) exact; {}", notes.join(", ")))
}

fn rational_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn gradient_correctness() -> Verdict {
    let spec = TaskSpec::new(TaskId::C).with_vocab(20).with_seed(1);
    let data = sample_dataset(&spec, 6, Split::Train).expect("data");
    let mut worst = 0.0f64;
    let mut failing = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = ModelConfig::new(20, 3);
        cfg.embed_dim = 4;
        cfg.hidden_dim = 4;
        cfg.mlp_hidden = 4;
        cfg.init_scale = 0.5;
        cfg.seed = seed;
        let model = ModelState::<f64>::init(cfg).expect("model");
        let inputs: Vec<&[u32]> = data.examples.iter().map(|e| e.tokens.as_slice()).collect();
        let batch = Batch::new(inputs, data.labels()).with_weights(vec![1.0, 0.5, 2.0, 1.0, 0.25, 1.5]);
        let report = finite_diff_check(&model, &batch, 1e-4, 1e-4).expect("fd check");
        for b in &report.blocks {
            worst = worst.max(b.max_rel_error);
        }
        failing.extend(report.failing_blocks().into_iter().map(|b| format!("seed {seed}: {b}")));
    }
    Verdict::new(
        failing.is_empty() && worst <= 1e-4,
        format!("max relative error {worst:.2e} over 8 blocks x 5 seeds; failing {failing:?}"),
    )
}

fn balancing_identity() -> Verdict {
    let spec = TaskSpec::new(TaskId::A).with_strength(0.9).with_seed(7);
    let data = sample_dataset(&spec, 10_000, Split::Train).expect("data");
    let f = FeatureHandle::reserved(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let balanced = subsample_balanced(&data, &f, &mut rng).expect("balance");
    let counts = balanced.group_counts(&f).expect("counts");
    let uniform = counts.len() == 4 && counts.values().all(|&c| c == counts.values().next().copied().unwrap_or(0));
    let mi = balanced.mutual_information(&f).expect("mi");
    Verdict::new(
        uniform && mi == 0.0,
        format!("group counts {:?}, MI(F;y) = {mi:e} bits", counts.values().collect::<Vec<_>>()),
    )
}

fn inlp_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, h, k) = (600, 16, 3);
    let make = |rng: &mut ChaCha8Rng| {
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut data = Vec::with_capacity(n * h);
        for &y in &labels {
            for j in 0..h {
                let shift = if j % k == y { 1.5 } else { 0.0 };
                data.push(rng.gen_range(-1.0..1.0) + shift);
            }
        }
        RepMatrix::new(Matrix::from_vec(n, h, data), labels.clone(), labels).expect("reps")
    };
    let train = make(&mut rng);
    let eval = make(&mut rng);
    let cfg = InlpConfig {
        max_iters: 6,
        probe: ProbeConfig {
            epochs: 10,
            ..ProbeConfig::default()
        },
        ..InlpConfig::default()
    };
    let result = inlp(&train, &eval, &cfg).expect("inlp");
    let p = &result.projection.matrix;
    let idem = p.matmul(p).sub(p).max_abs();
    let annihilation = result
        .projection
        .directions
        .iter()
        .map(|d| {
            let pd: Vec<f64> = (0..h).map(|i| dot(p.row(i), d)).collect();
            dot(&pd, &pd).sqrt() / dot(d, d).sqrt()
        })
        .fold(0.0f64, f64::max);
    let steps: Vec<usize> = result.history.windows(2).map(|w| w[0].rank - w[1].rank).collect();
    let decrements_ok = !steps.is_empty() && steps.iter().all(|&s| s == k - 1);
    Verdict::new(
        idem <= 1e-8 && annihilation <= 1e-8 && decrements_ok,
        format!(
            "max|P^2-P| {idem:.1e}, max|Pd|/|d| {annihilation:.1e}, rank steps {steps:?} (c = {})",
            k - 1
        ),
    )
}

fn mdl_sanity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, h) = (10_000, 8);
    let x = Matrix::from_vec(n, h, (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let cfg = ProbeConfig::default();
    let random: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let r = mdl_online_code(&x, &random, 2, &DEFAULT_SCHEDULE, &cfg).expect("random mdl");
    // Classes at x0 = +-1 with uniform noise of half-width 0.5: margin 1.
    let separable: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let mut xs = x.clone();
    for (i, &y) in separable.iter().enumerate() {
        xs.row_mut(i)[0] = if y == 1 { 1.0 } else { -1.0 } + 0.5 * x.row(i)[1];
    }
    let s = mdl_online_code(&xs, &separable, 2, &DEFAULT_SCHEDULE, &cfg).expect("separable mdl");
    let exact_uniform = r.uniform_bits == 10_000.0 && s.uniform_bits == 10_000.0;
    Verdict::new(
        exact_uniform && (0.95..=1.1).contains(&r.compression) && s.compression >= 5.0,
        format!(
            "uniform {} bits, random-label C {:.3}, separable C {:.2}",
            r.uniform_bits, r.compression, s.compression
        ),
    )
}

fn cross_group() -> Verdict {
    let out = run_and_persist(ExperimentKind::CrossGroup, &canned("cross_group.json"));
    let gap_a = metric(&out, "A.gap_median");
    let out_b = metric(&out, "B.out_group_median");
    let in_b = metric(&out, "B.in_group_median");
    Verdict::new(
        gap_a <= 0.05 && out_b <= 0.20 && in_b >= 0.95,
        format!("A gap {:.1} pts; B in-group {in_b:.3}, out-of-group {out_b:.3}", gap_a * 100.0),
    )
}

fn inlp_sweep() -> Verdict {
    let out = run_and_persist(ExperimentKind::InlpSweep, &canned("inlp.json"));
    let change = metric(&out, "A.overall_change_median");
    let drop = metric(&out, "C.minority_drop_median");
    Verdict::new(
        change <= 0.02 && drop >= 0.20,
        format!(
            "task A accuracy change at probe<=0.52: {:.1} pts; task C minority drop at probe<=0.6: {:.1} pts",
            change * 100.0,
            drop * 100.0
        ),
    )
}

fn bias_sweep() -> Verdict {
    let out = run_and_persist(ExperimentKind::BiasSweep, &canned("sweep.json"));
    let high = metric(&out, "C.ratio_weakest_to_strongest");
    let low = metric(&out, "A.ratio_weakest_to_strongest");
    Verdict::new(
        high >= 0.8 && low <= 0.5,
        format!(
            "C(0.5)/C(0.99): high-PN {high:.3} (need >= 0.8; {:.2} vs {:.2}), low-PN {low:.3} (need <= 0.5)",
            metric(&out, "C.b0.5.compression_median"),
            metric(&out, "C.b0.99.compression_median")
        ),
    )
}

fn method_table() -> Verdict {
    let cfg = canned("method_table.json");
    let out = run_and_persist(ExperimentKind::MethodTable, &cfg);
    let rows = out
        .artifact("method_table.csv")
        .map_or(0, |a| a.contents.lines().count() - 1);
    let complete = rows == 2 * cfg.method_table.methods.len() * cfg.seeds.len() && cfg.method_table.methods.len() == 5;
    let low = metric(&out, "low_pn.subsample.ratio_to_erm");
    let mut high = Vec::new();
    for m in TrainMethod::ALL {
        high.push((m, metric(&out, &format!("high_pn.{m}.ratio_to_erm"))));
    }
    let high_ok = high.iter().all(|&(_, r)| r >= 0.9);
    let listing: Vec<String> = high.iter().map(|(m, r)| format!("{m} {r:.2}")).collect();
    Verdict::new(
        complete && low <= 0.6 && high_ok,
        format!(
            "grid rows {rows}; low-PN subsample/erm {low:.3} (need <= 0.6); high-PN ratio to erm: {} (need all >= 0.9)",
            listing.join(", ")
        ),
    )
}

/// Small versions of every experiment, each run twice on thread pools of
/// different sizes.
fn determinism() -> Verdict {
    let mut base = ExperimentConfig::default();
    base.seeds = vec![0, 1];
    base.train.epochs = 1;
    base.train.eval_train = true;
    base.model.embed_dim = 8;
    base.model.hidden_dim = 8;
    base.model.mlp_hidden = 8;
    base.data.n_train = 400;
    base.data.n_dev = 100;
    base.data.n_probe = 2400;
    base.data.n_eval = 100;
    base.probe.epochs = 3;
    base.pnps.mc_samples = 500;
    base.cross_group.n_pool = 2000;
    base.cross_group.n_test = 400;
    base.inlp.max_iters = 3;
    base.sweep.strengths = vec![0.5, 0.9];
    base.method_table.low_pn.n_train = Some(800);
    let kinds = [
        ExperimentKind::PnpsReport,
        ExperimentKind::CrossGroup,
        ExperimentKind::InlpSweep,
        ExperimentKind::BiasSweep,
        ExperimentKind::MethodTable,
    ];
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for kind in kinds {
        let mut cfg = base.clone();
        cfg.experiment = Some(kind);
        let once = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
            pool.install(|| run(kind, &cfg)).unwrap_or_else(|e| panic!("{kind}: {e}"))
        };
        let (a, b) = (once(1), once(3));
        for art in a.artifacts.iter().filter(|x| x.kind == pnpslab::record::ArtifactKind::Metrics) {
            compared += 1;
            if b.artifact(&art.path).map(|o| o.contents.as_bytes()) != Some(art.contents.as_bytes()) {
                mismatches.push(format!("{kind}/{}", art.path));
            }
        }
        if a.artifacts.len() != b.artifacts.len() {
            mismatches.push(format!("{kind}: artifact sets differ"));
        }
    }
    Verdict::new(
        mismatches.is_empty() && compared > 0,
        format!("{compared} metric CSVs compared across 5 experiments; mismatches {mismatches:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Verdict); 10] = [
        (1, "oracle exactness", Duration::from_secs(10), oracle_exactness),
        (2, "gradient correctness", Duration::from_secs(30), gradient_correctness),
        (3, "balancing identity", Duration::from_secs(1), balancing_identity),
        (4, "INLP algebra", Duration::from_secs(30), inlp_algebra),
        (5, "MDL sanity", Duration::from_secs(120), mdl_sanity),
        (6, "train on one group, test on the other", Duration::from_secs(600), cross_group),
        (7, "null-space projection vs task accuracy", Duration::from_secs(900), inlp_sweep),
        (8, "extractability across bias strengths", Duration::from_secs(1200), bias_sweep),
        (9, "extractability by training method", Duration::from_secs(1800), method_table),
        (10, "determinism", Duration::from_secs(600), determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("PNPSLAB_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failures = 0;
    for (id, name, budget, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let passed = verdict.passed && in_budget;
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s, budget {}s{}]",
            if passed { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}

//! Property tests for the invariants of every core module.

use nalgebra::DMatrix;
use pnpslab_core::datagen::{
    deserialize, label_fn, sample_dataset, serialize, subsample_balanced, FeatureHandle, Split, TaskId, TaskSpec,
};
use pnpslab_core::linalg::{log_sum_exp, softmax_in_place, Matrix};
use pnpslab_core::neuralnet::{Adam, ModelConfig, ModelState, Parameters};
use pnpslab_core::oracle::{pn_marginal_exact, ps_marginal_exact};
use pnpslab_core::repranalysis::{mdl_online_code, ProbeConfig, Projection};
use pnpslab_core::scalar::Rational;
use pnpslab_core::training::GroupDro;
use pnpslab_core::datagen::Group;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn task() -> impl Strategy<Value = TaskId> {
    prop_oneof![Just(TaskId::A), Just(TaskId::B), Just(TaskId::C)]
}

/// Strengths on a 1/100 grid so exact rational arithmetic stays small.
fn strength() -> impl Strategy<Value = f64> {
    (50u32..=100).prop_map(|k| f64::from(k) / 100.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_examples_respect_the_label_function(t in task(), b in strength(), seed in 0u64..1000) {
        let spec = TaskSpec::new(t).with_strength(b).with_seed(seed).with_vocab(50);
        let d = sample_dataset(&spec, 64, Split::Train).unwrap();
        for e in &d.examples {
            prop_assert_eq!(e.tokens.len(), spec.seq_len);
            prop_assert!(e.tokens.iter().all(|&x| x < spec.vocab_size));
            prop_assert!(!e.tokens[..2].contains(&spec.reserved_token));
            prop_assert_eq!(e.latent.identical, e.tokens[0] == e.tokens[1]);
            prop_assert_eq!(e.latent.feature, e.tokens[2..].contains(&spec.reserved_token));
            prop_assert_eq!(e.label, label_fn(t, e.latent.identical, e.latent.feature));
        }
        prop_assert_eq!(&sample_dataset(&spec, 64, Split::Train).unwrap(), &d);
    }

    #[test]
    fn balancing_gives_uniform_groups(t in task(), b in 50u32..=90, seed in 0u64..1000) {
        let spec = TaskSpec::new(t).with_strength(f64::from(b) / 100.0).with_seed(seed);
        let d = sample_dataset(&spec, 2000, Split::Train).unwrap();
        let f = FeatureHandle::reserved(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bal = subsample_balanced(&d, &f, &mut rng).unwrap();
        let counts = bal.group_counts(&f).unwrap();
        let first = *counts.values().next().unwrap();
        prop_assert!(counts.values().all(|&c| c == first));
        prop_assert_eq!(counts.len(), f.realizable_groups().len());
        if t == TaskId::A {
            prop_assert_eq!(bal.mutual_information(&f).unwrap(), 0.0);
        }
    }

    #[test]
    fn exact_pn_ps_are_probabilities(t in task(), b in strength()) {
        let spec = TaskSpec::new(t).with_strength(b);
        let f = FeatureHandle::reserved(&spec);
        let zero = Rational::from_integer(0);
        let one = Rational::from_integer(1);
        for y in 0..t.n_classes() {
            for v in [pn_marginal_exact::<Rational>(&spec, &f, y), ps_marginal_exact::<Rational>(&spec, &f, y)]
                .into_iter()
                .flatten()
            {
                prop_assert!(v.value >= zero && v.value <= one);
            }
        }
        if t == TaskId::C {
            prop_assert_eq!(ps_marginal_exact::<Rational>(&spec, &f, 2).unwrap().value, Rational::new(3, 10));
            prop_assert_eq!(pn_marginal_exact::<Rational>(&spec, &f, 2).unwrap().value, one);
        }
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-700.0f64..700.0, 1..8)) {
        let mut p = x.clone();
        softmax_in_place(&mut p);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(&x);
        prop_assert!(lse >= m && lse <= m + (x.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn dro_weights_stay_normalized(losses in prop::collection::vec(0.0f64..50.0, 1..40), eta in 0.001f64..2.0, seed in 0u64..100) {
        let groups = vec![Group::new(0, 0), Group::new(0, 1), Group::new(1, 0), Group::new(1, 1)];
        let mut dro = GroupDro::new(groups, eta);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group_of: Vec<usize> = losses.iter().map(|_| rng.gen_range(0..4)).collect();
        let w = dro.step_weights(&group_of, &losses);
        prop_assert!((dro.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(dro.q.iter().all(|&q| q > 0.0));
        // Per-group weights sum back to q_g for the groups in the batch.
        for g in 0..4 {
            let total: f64 = w.iter().zip(&group_of).filter(|(_, &h)| h == g).map(|(w, _)| *w).sum();
            if group_of.contains(&g) {
                prop_assert!((total - dro.q[g]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projection_matches_qr_oracle(seed in 0u64..1000, h in 3usize..12, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = k.min(h - 1);
        let dirs: Vec<Vec<f64>> = (0..k).map(|_| (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut p = Projection::<f64>::identity(h);
        let mut added = 0;
        for chunk in dirs.chunks(2) {
            added += p.remove(chunk);
        }
        let a = DMatrix::from_fn(h, k, |i, j| dirs[j][i]);
        let q = a.clone().qr().q();
        let oracle = DMatrix::<f64>::identity(h, h) - &q * q.transpose();
        let rank = a.rank(1e-10);
        prop_assert_eq!(added, rank);
        prop_assert_eq!(p.rank(), h - rank);
        let svd_rank = DMatrix::from_fn(h, h, |i, j| p.matrix.row(i)[j]).rank(1e-8);
        prop_assert_eq!(svd_rank, h - rank);
        for i in 0..h {
            for j in 0..h {
                prop_assert!((p.matrix.row(i)[j] - oracle[(i, j)]).abs() < 1e-10);
                prop_assert!((p.matrix.row(i)[j] - p.matrix.row(j)[i]).abs() < 1e-12);
            }
        }
        // Re-adding collected directions changes nothing.
        prop_assert_eq!(p.remove(&dirs), 0);
    }

    #[test]
    fn compression_ignores_class_names(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h) = (300, 4);
        let x = Matrix::from_vec(n, h, (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y: Vec<usize> = (0..n).map(|i| usize::from(x.row(i)[0] + 0.3 * rng.gen_range(-1.0..1.0) > 0.0)).collect();
        let flipped: Vec<usize> = y.iter().map(|&v| 1 - v).collect();
        let cfg = ProbeConfig { epochs: 5, seed, ..ProbeConfig::default() };
        let schedule = [0.1, 0.3, 1.0];
        let a = mdl_online_code(&x, &y, 2, &schedule, &cfg).unwrap();
        let b = mdl_online_code(&x, &flipped, 2, &schedule, &cfg).unwrap();
        prop_assert!((a.compression - b.compression).abs() <= 1e-9 * a.compression);
        let single = mdl_online_code(&x, &y, 2, &[1.0], &cfg).unwrap();
        prop_assert_eq!(single.compression, 1.0);
        prop_assert_eq!(a.uniform_bits, n as f64);
    }

    #[test]
    fn adam_ignores_zero_gradients(seed in 0u64..1000) {
        let mut cfg = ModelConfig::new(12, 2);
        cfg.embed_dim = 3;
        cfg.hidden_dim = 3;
        cfg.mlp_hidden = 3;
        cfg.seed = seed;
        let mut m = ModelState::<f64>::init(cfg.clone()).unwrap();
        let before = m.params.clone();
        let mut adam = Adam::with_defaults(1e-2);
        adam.step_model(&mut m.params, &Parameters::zeros(&cfg));
        prop_assert_eq!(m.params, before);
    }

    #[test]
    fn dataset_and_checkpoint_round_trip(t in task(), seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::new(t).with_seed(seed).with_vocab(40).with_marker(39);
        let d = sample_dataset(&spec, 20, Split::Dev).unwrap();
        let path = dir.path().join("d.jsonl");
        serialize(&d, &path).unwrap();
        prop_assert_eq!(deserialize(&path).unwrap(), d);

        let mut cfg = ModelConfig::new(40, t.n_classes());
        cfg.embed_dim = 3;
        cfg.hidden_dim = 2;
        cfg.mlp_hidden = 3;
        cfg.seed = seed;
        let m = ModelState::<f64>::init(cfg).unwrap();
        let ckpt = dir.path().join("m.ckpt");
        m.save(&ckpt).unwrap();
        prop_assert_eq!(ModelState::<f64>::load(&ckpt).unwrap().params, m.params);
    }
}

mod common;

use icd::data::{batches, Dataset};
use icd::losses::{gram_matrix, icd_loss, scale_weights, sdd_loss, DistillConfig, GramMode};
use icd::scale::{pool_cells, ScaleSpec};
use icd::train::RunConfig;
use icd::{Graph, Tensor};
use proptest::prelude::*;

fn map(b: usize, k: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0..4.0f64, b * k * w * w).prop_map(move |d| Tensor::new(vec![b, k, w, w], d).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..4, 2usize..5).prop_flat_map(|(b, k)| (map(b, k, 4), map(b, k, 4)))
}

fn losses(t: &Tensor, s: &Tensor, cfg: &DistillConfig) -> (f64, f64) {
    let mut g = Graph::new();
    let tv = g.constant(t.clone());
    let sv = g.param(s.clone());
    let spec = ScaleSpec::new(cfg.scales.clone(), 4).unwrap();
    let tc = pool_cells(&mut g, tv, &spec).unwrap();
    let sc = pool_cells(&mut g, sv, &spec).unwrap();
    let sdd = sdd_loss(&mut g, &tc, &sc, cfg).unwrap();
    let icd = icd_loss(&mut g, &tc, &sc, cfg).unwrap();
    (g.value(sdd).item(), g.value(icd).item())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distillation_losses_are_nonnegative((t, s) in pair(), class in any::<bool>()) {
        let mode = if class { GramMode::ClassCorrelation } else { GramMode::SampleSimilarity };
        let cfg = DistillConfig { gram_mode: mode, ..DistillConfig::default() };
        let (sdd, icd) = losses(&t, &s, &cfg);
        prop_assert!(sdd >= -1e-12 && icd >= -1e-12);
        prop_assert!((sdd - common::sdd(&t, &s, &[1, 2, 4], 4.0)).abs() <= 1e-10);
    }

    #[test]
    fn identical_maps_give_zero_loss(t in (1usize..4, 2usize..5).prop_flat_map(|(b, k)| map(b, k, 4))) {
        let (sdd, icd) = losses(&t, &t, &DistillConfig::default());
        prop_assert!(sdd.abs() <= 1e-12 && icd.abs() <= 1e-12);
    }

    #[test]
    fn adding_a_constant_to_every_class_leaves_sdd_unchanged((t, s) in pair(), c in -5.0..5.0f64) {
        let cfg = DistillConfig::default();
        let shifted = s.map(|v| v + c);
        prop_assert!((losses(&t, &s, &cfg).0 - losses(&t, &shifted, &cfg).0).abs() <= 1e-9);
    }

    #[test]
    fn gram_is_positive_semidefinite(b in 2usize..6, k in 2usize..6, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[b, k], 1.0, &mut rng);
        for mode in [GramMode::ClassCorrelation, GramMode::SampleSimilarity] {
            let g = gram_matrix(&x, mode, 1e-12).unwrap();
            let n = g.shape()[0];
            let rows: Vec<Vec<f64>> = g.data().chunks(n).map(|r| r.to_vec()).collect();
            let want = common::gram(&common::rows(&x), mode == GramMode::ClassCorrelation, 1e-12);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((rows[i][j] - want[i][j]).abs() <= 1e-12);
                }
            }
            let min = common::symmetric_eigenvalues(&rows).into_iter().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-8);
        }
    }

    #[test]
    fn scale_weights_increase_with_scale(mut set in prop::collection::btree_set(1usize..64, 1..6)) {
        let scales: Vec<usize> = std::mem::take(&mut set).into_iter().rev().collect();
        let w = scale_weights(&scales).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        for i in 1..scales.len() {
            prop_assert!(w[i] < w[i - 1]);
        }
    }

    #[test]
    fn each_epoch_visits_every_sample_once(n in 1usize..80, bs in 1usize..20, seed in any::<u64>(), epoch in 0usize..5) {
        let ds = Dataset::new(vec![0.0; n * 3 * 4 * 4], (0..n).map(|i| i % 3).collect(), 3, 4).unwrap();
        let mut seen: Vec<usize> = batches(&ds, bs, seed, epoch, false)
            .unwrap()
            .iter()
            .flat_map(|b| b.indices.clone())
            .collect();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn config_text_round_trips(lr in 0.001..1.0f64, gamma in 0.0..8.0f64, epochs in 1usize..300, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.train.lr = lr;
        cfg.train.distill.gamma = gamma;
        cfg.train.epochs = epochs;
        cfg.train.lr_decay_epochs.retain(|&e| e < epochs);
        cfg.train.seed = seed;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

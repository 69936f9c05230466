use super::*;
use crate::scale::pool_cells;
use crate::tensor::{grad_check, GraphFn, ScalarFn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Scalar-loop references. Maps are [B, K, w, w] in row-major order.

fn at(map: &Tensor, b: usize, k: usize, y: usize, x: usize) -> f64 {
    map.at(&[b, k, y, x])
}

fn softmax_ref(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn kl_ref(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn tempered_ref(t: &[f64], s: &[f64], tau: f64) -> f64 {
    let ts: Vec<f64> = t.iter().map(|x| x / tau).collect();
    let ss: Vec<f64> = s.iter().map(|x| x / tau).collect();
    kl_ref(&softmax_ref(&ts), &softmax_ref(&ss)) * tau * tau
}

fn cell_mean_ref(map: &Tensor, b: usize, m: usize, n: usize) -> Vec<f64> {
    let s = map.shape();
    let (k, w) = (s[1], s[2]);
    let side = w / m;
    let (r0, c0) = ((n / m) * side, (n % m) * side);
    (0..k)
        .map(|kk| {
            let mut acc = 0.0;
            for y in r0..r0 + side {
                for x in c0..c0 + side {
                    acc += at(map, b, kk, y, x);
                }
            }
            acc / (side * side) as f64
        })
        .collect()
}

fn sdd_ref(t: &Tensor, s: &Tensor, scales: &[usize], tau: f64) -> f64 {
    let b = t.shape()[0];
    let mut total = 0.0;
    for &m in scales {
        for n in 0..m * m {
            for bi in 0..b {
                total += tempered_ref(&cell_mean_ref(t, bi, m, n), &cell_mean_ref(s, bi, m, n), tau);
            }
        }
    }
    total / b as f64
}

fn gram_ref(rows: &[Vec<f64>], mode: GramMode) -> Vec<Vec<f64>> {
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let (b, k) = (normed.len(), normed[0].len());
    match mode {
        GramMode::ClassCorrelation => (0..k)
            .map(|i| (0..k).map(|j| (0..b).map(|r| normed[r][i] * normed[r][j]).sum()).collect())
            .collect(),
        GramMode::SampleSimilarity => (0..b)
            .map(|i| (0..b).map(|j| (0..k).map(|c| normed[i][c] * normed[j][c]).sum()).collect())
            .collect(),
    }
}

fn icd_ref(t: &Tensor, s: &Tensor, scales: &[usize], mode: GramMode) -> f64 {
    let b = t.shape()[0];
    let denom = (scales.len() * (scales.len() + 1) / 2) as f64;
    let mut total = 0.0;
    for (i, &m) in scales.iter().enumerate() {
        let w = (i + 1) as f64 / denom;
        for n in 0..m * m {
            let tr: Vec<Vec<f64>> = (0..b).map(|bi| cell_mean_ref(t, bi, m, n)).collect();
            let sr: Vec<Vec<f64>> = (0..b).map(|bi| cell_mean_ref(s, bi, m, n)).collect();
            let (gt, gs) = (gram_ref(&tr, mode), gram_ref(&sr, mode));
            let d: f64 = gt
                .iter()
                .zip(&gs)
                .map(|(a, c)| kl_ref(&softmax_ref(a), &softmax_ref(c)))
                .sum::<f64>()
                / gt.len() as f64;
            total += w * d;
        }
    }
    total
}

fn random_maps(seed: u64, b: usize, k: usize, w: usize, std: f64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[b, k, w, w], std, &mut rng),
        Tensor::randn(&[b, k, w, w], std, &mut rng),
    )
}

fn eval_losses(t: &Tensor, s: &Tensor, cfg: &DistillConfig) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let tv = g.constant(t.clone());
    let sv = g.param(s.clone());
    let spec = ScaleSpec::new(cfg.scales.clone(), t.shape()[2]).unwrap();
    let tc = pool_cells(&mut g, tv, &spec).unwrap();
    let sc = pool_cells(&mut g, sv, &spec).unwrap();
    let kd = kd_loss(&mut g, tv, sv, cfg).unwrap();
    let sdd = sdd_loss(&mut g, &tc, &sc, cfg).unwrap();
    let icd = icd_loss(&mut g, &tc, &sc, cfg).unwrap();
    (g.value(kd).item(), g.value(sdd).item(), g.value(icd).item())
}

#[test]
fn losses_match_loop_references() {
    let (t, s) = random_maps(1, 3, 5, 4, 1.5);
    let cfg = DistillConfig::default();
    let (kd, sdd, icd) = eval_losses(&t, &s, &cfg);
    assert!((kd - sdd_ref(&t, &s, &[1], 4.0)).abs() < 1e-10);
    assert!((sdd - sdd_ref(&t, &s, &[1, 2, 4], 4.0)).abs() < 1e-10);
    assert!((icd - icd_ref(&t, &s, &[1, 2, 4], GramMode::ClassCorrelation)).abs() < 1e-10);

    let cfg = DistillConfig {
        gram_mode: GramMode::SampleSimilarity,
        scales: vec![2, 4],
        ..DistillConfig::default()
    };
    let (_, _, icd) = eval_losses(&t, &s, &cfg);
    assert!((icd - icd_ref(&t, &s, &[2, 4], GramMode::SampleSimilarity)).abs() < 1e-10);
}

#[test]
fn single_global_scale_is_plain_kd() {
    for tau in [1.0, 2.0, 4.0, 8.0] {
        let (t, s) = random_maps(tau as u64, 4, 6, 4, 2.0);
        let cfg = DistillConfig {
            scales: vec![1],
            temperature: tau,
            ..DistillConfig::default()
        };
        let (kd, sdd, _) = eval_losses(&t, &s, &cfg);
        assert!((kd - sdd).abs() <= 1e-12 * kd.abs().max(1.0), "tau {tau}: {kd} vs {sdd}");
    }
}

#[test]
fn finest_scale_is_per_position_kl() {
    let (t, s) = random_maps(7, 2, 3, 4, 1.0);
    let cfg = DistillConfig {
        scales: vec![4],
        ..DistillConfig::default()
    };
    let (_, sdd, _) = eval_losses(&t, &s, &cfg);
    let mut want = 0.0;
    for b in 0..2 {
        for y in 0..4 {
            for x in 0..4 {
                let tr: Vec<f64> = (0..3).map(|k| at(&t, b, k, y, x)).collect();
                let sr: Vec<f64> = (0..3).map(|k| at(&s, b, k, y, x)).collect();
                want += tempered_ref(&tr, &sr, 4.0);
            }
        }
    }
    assert!((sdd - want / 2.0).abs() < 1e-12);
}

#[test]
fn identical_maps_give_zero_loss() {
    let (t, _) = random_maps(3, 3, 4, 4, 1.0);
    let (kd, sdd, icd) = eval_losses(&t, &t, &DistillConfig::default());
    assert!(kd.abs() < 1e-14 && sdd.abs() < 1e-14 && icd.abs() < 1e-14);
}

#[test]
fn rank_weights() {
    assert_eq!(scale_weights(&[1, 2, 4]).unwrap(), vec![1.0 / 6.0, 1.0 / 3.0, 0.5]);
    assert_eq!(scale_weights(&[4]).unwrap(), vec![1.0]);
    assert_eq!(scale_weights(&[4, 1]).unwrap(), vec![2.0 / 3.0, 1.0 / 3.0]);
    assert!(scale_weights(&[]).is_err());
}

#[test]
fn warmup_ramp() {
    assert_eq!(warmup_factor(0, 30), 0.0);
    assert_eq!(warmup_factor(15, 30), 0.5);
    assert_eq!(warmup_factor(30, 30), 1.0);
    assert_eq!(warmup_factor(100, 30), 1.0);
    assert_eq!(warmup_factor(0, 0), 1.0);
}

#[test]
fn total_loss_combines_and_reports_divergence() {
    let cfg = DistillConfig::default();
    assert_eq!(total_loss(1.0, 0.5, 0.25, &cfg, 30).unwrap(), 1.0 + 0.5 + 2.0 * 0.25);
    assert_eq!(total_loss(1.0, 0.5, 0.25, &cfg, 0).unwrap(), 1.0);
    match total_loss(1.0, f64::NAN, 0.0, &cfg, 3) {
        Err(Error::Divergence { term, .. }) => assert_eq!(term, "sdd"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn sample_gram_has_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let g = gram_matrix(&x, GramMode::SampleSimilarity, 1e-12).unwrap();
    for i in 0..5 {
        assert!((g.at(&[i, i]) - 1.0).abs() < 1e-12);
    }
    let c = gram_matrix(&x, GramMode::ClassCorrelation, 1e-12).unwrap();
    let trace: f64 = (0..4).map(|i| c.at(&[i, i])).sum();
    assert!((trace - 5.0).abs() < 1e-12);
}

#[test]
fn gram_rejects_single_class() {
    assert!(gram_matrix(&Tensor::zeros(&[3, 1]), GramMode::ClassCorrelation, 1e-12).is_err());
}

#[test]
fn mismatched_scale_sets_error() {
    let (t, s) = random_maps(2, 2, 3, 4, 1.0);
    let mut g = Graph::new();
    let tv = g.constant(t);
    let sv = g.constant(s);
    let tc = pool_cells(&mut g, tv, &ScaleSpec::new(vec![1, 2], 4).unwrap()).unwrap();
    let sc = pool_cells(&mut g, sv, &ScaleSpec::new(vec![1, 4], 4).unwrap()).unwrap();
    let cfg = DistillConfig::default();
    assert!(sdd_loss(&mut g, &tc, &sc, &cfg).is_err());
    assert!(icd_loss(&mut g, &tc, &sc, &cfg).is_err());
}

#[test]
fn teacher_receives_no_gradient() {
    let (t, s) = random_maps(5, 2, 3, 4, 1.0);
    let mut g = Graph::new();
    let tv = g.param(t);
    let sv = g.param(s);
    let obj = distill_objective(&mut g, tv, sv, &[0, 2], &DistillConfig::default(), Method::Icd, 1.0).unwrap();
    g.backward(obj.total).unwrap();
    assert!(g.grad(tv).is_none_or(|gr| gr.data().iter().all(|&x| x == 0.0)));
    assert!(g.grad(sv).is_some());
}

#[test]
fn objective_recombines_components() {
    let (t, s) = random_maps(6, 3, 4, 4, 1.0);
    let cfg = DistillConfig::default();
    for method in [Method::CeOnly, Method::Kd, Method::Sdd, Method::Icd] {
        let mut g = Graph::new();
        let tv = g.constant(t.clone());
        let sv = g.param(s.clone());
        let obj = distill_objective(&mut g, tv, sv, &[0, 1, 3], &cfg, method, 0.4).unwrap();
        let v = obj.values(&g);
        assert!((v.total - v.recombine(method, &cfg, 0.4)).abs() < 1e-12, "{method}");
    }
}

#[test]
fn loss_gradients_check() {
    let (t, s) = random_maps(11, 2, 3, 4, 1.0);
    let cfg = DistillConfig::default();
    let kd = GraphFn::new("kd_loss", |g: &mut Graph, x| {
        let tv = g.constant(t.clone());
        kd_loss(g, tv, x, &cfg)
    });
    let sdd = GraphFn::new("sdd_loss", |g: &mut Graph, x| {
        let tv = g.constant(t.clone());
        let spec = ScaleSpec::new(cfg.scales.clone(), 4)?;
        let tc = pool_cells(g, tv, &spec)?;
        let sc = pool_cells(g, x, &spec)?;
        sdd_loss(g, &tc, &sc, &cfg)
    });
    let icd = GraphFn::new("icd_loss", |g: &mut Graph, x| {
        let tv = g.constant(t.clone());
        let spec = ScaleSpec::new(cfg.scales.clone(), 4)?;
        let tc = pool_cells(g, tv, &spec)?;
        let sc = pool_cells(g, x, &spec)?;
        icd_loss(g, &tc, &sc, &cfg)
    });
    for f in [&kd as &dyn ScalarFn, &sdd, &icd] {
        let r = grad_check(f, &s, 1e-4);
        assert!(r.passed, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_nonnegative_and_match_references(
        seed in 0u64..10_000,
        b in 1usize..4,
        k in 2usize..6,
        std in 0.1f64..4.0,
        tau in 0.5f64..8.0,
    ) {
        let (t, s) = random_maps(seed, b, k, 4, std);
        let cfg = DistillConfig { temperature: tau, ..DistillConfig::default() };
        let (kd, sdd, icd) = eval_losses(&t, &s, &cfg);
        prop_assert!(kd >= -1e-12 && sdd >= -1e-12 && icd >= -1e-12);
        let tol = |x: f64| 1e-9 * x.abs().max(1.0);
        prop_assert!((sdd - sdd_ref(&t, &s, &[1, 2, 4], tau)).abs() < tol(sdd));
        prop_assert!((icd - icd_ref(&t, &s, &[1, 2, 4], GramMode::ClassCorrelation)).abs() < tol(icd));
    }

    #[test]
    fn gram_is_symmetric_and_bounded(seed in 0u64..10_000, b in 1usize..6, k in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[b, k], 2.0, &mut rng);
        for mode in [GramMode::ClassCorrelation, GramMode::SampleSimilarity] {
            let g = gram_matrix(&x, mode, 1e-12).unwrap();
            let d = g.shape()[0];
            for i in 0..d {
                for j in 0..d {
                    prop_assert!((g.at(&[i, j]) - g.at(&[j, i])).abs() < 1e-12);
                }
            }
            if mode == GramMode::SampleSimilarity {
                prop_assert!(g.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
            }
        }
    }
}

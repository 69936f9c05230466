//! SGD training of teachers (labels only) and students (any [`Method`]),
//! plus the scale and gamma ablation sweeps.

mod config;
mod metrics;

pub use config::{RunConfig, TrainConfig};
pub use metrics::{Check, EpochMetrics, RunMetrics, CSV_HEADER};

use crate::data::{batches, eval_batches, Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::losses::{distill_objective, warmup_factor, LossValues, Method};
use crate::nn::{argmax_rows, global_logits, Checkpoint, ConvNet, ConvNetSpec};
use crate::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

const TEACHER_INIT_STREAM: u64 = 1;
const STUDENT_INIT_STREAM: u64 = 2;

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `v <- momentum * v + (grad + weight_decay * p)`, then `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::config(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                term: "gradient".into(),
                value: *bad,
                context: format!("of parameter {i}"),
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Step-decayed learning rate at `epoch` of the scaled schedule.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.scaled_milestones().iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_decay_factor.powi(decays as i32)
}

/// Global logits `[B, K]` without gradients.
pub fn predict(net: &ConvNet, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let x = g.constant(images.clone());
    let map = net.forward_logit_map(&mut g, &params, x)?;
    let logits = global_logits(&mut g, map)?;
    Ok(g.value(logits).clone())
}

/// Top-1 accuracy over `ds`.
pub fn evaluate(net: &ConvNet, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for b in eval_batches(ds, batch_size)? {
        let pred = argmax_rows(&predict(net, &b.images)?);
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Frozen teacher logit maps, precomputed per sample when batches are not
/// augmented (the teacher then sees exactly the same pixels every epoch).
struct TeacherMaps<'a> {
    net: &'a ConvNet,
    cache: Option<Vec<f64>>,
    per_sample: usize,
}

impl<'a> TeacherMaps<'a> {
    fn new(net: &'a ConvNet, train: &Dataset, batch_size: usize, augment: bool) -> Result<Self> {
        let w = net.spec.spatial_size;
        let per_sample = net.spec.num_classes * w * w;
        let cache = if augment {
            None
        } else {
            let mut all = Vec::with_capacity(train.len() * per_sample);
            for b in eval_batches(train, batch_size)? {
                all.extend_from_slice(net.logit_map(&b.images)?.values().data());
            }
            Some(all)
        };
        Ok(TeacherMaps { net, cache, per_sample })
    }

    fn for_batch(&self, batch: &Batch) -> Result<Tensor> {
        match &self.cache {
            None => Ok(self.net.logit_map(&batch.images)?.into_values()),
            Some(all) => {
                let n = self.per_sample;
                let mut data = Vec::with_capacity(batch.indices.len() * n);
                for &i in &batch.indices {
                    data.extend_from_slice(&all[i * n..(i + 1) * n]);
                }
                let w = self.net.spec.spatial_size;
                Tensor::new(vec![batch.indices.len(), self.net.spec.num_classes, w, w], data)
            }
        }
    }
}

fn check_finite(v: &LossValues, context: &str) -> Result<()> {
    for (term, x) in [("ce", v.ce), ("kd", v.kd), ("sdd", v.sdd), ("icd", v.icd), ("total", v.total)] {
        if !x.is_finite() {
            return Err(Error::Divergence {
                term: term.into(),
                value: x,
                context: context.into(),
            });
        }
    }
    Ok(())
}

struct Fit {
    net: ConvNet,
    epochs: Vec<EpochMetrics>,
    max_recombination_error: f64,
}

fn fit(mut net: ConvNet, cfg: &RunConfig, splits: &Splits, teacher: Option<&ConvNet>, method: Method, role: &str) -> Result<Fit> {
    let t = &cfg.train;
    let warm_epochs = t.distill.warmup_epochs;
    let teacher_maps = match (teacher, method) {
        (Some(tn), m) if m != Method::CeOnly => Some(TeacherMaps::new(tn, &splits.train, t.batch_size, t.augment)?),
        _ => None,
    };
    let mut state = SgdState::new(&net.params);
    let mut epochs = Vec::new();
    let mut max_err = 0.0f64;
    for epoch in 0..t.scaled_epochs() {
        let start = Instant::now();
        let lr = lr_at(epoch, t);
        let warmup = warmup_factor(epoch, warm_epochs);
        let mut sums = LossValues::default();
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bi, batch) in batches(&splits.train, t.batch_size, t.seed, epoch, t.augment)?.into_iter().enumerate() {
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let teacher_map = teacher_maps.as_ref().map(|tm| tm.for_batch(&batch)).transpose()?;
            let x = g.constant(batch.images);
            let smap = net.forward_logit_map(&mut g, &params, x)?;
            let tmap = match teacher_map {
                Some(m) => g.constant(m),
                None => smap,
            };
            let obj = distill_objective(&mut g, tmap, smap, &batch.labels, &t.distill, method, warmup)?;
            let v = obj.values(&g);
            let context = format!("in {role} training at epoch {epoch}, batch {bi}");
            check_finite(&v, &context)?;
            max_err = max_err.max((v.total - v.recombine(method, &t.distill, warmup)).abs());

            g.backward(obj.total)?;
            let grads: Vec<Tensor> = params
                .iter()
                .zip(&net.params)
                .map(|(p, value)| g.grad(*p).cloned().unwrap_or_else(|| Tensor::zeros(value.shape())))
                .collect();
            let pred = argmax_rows(g.value(obj.logits));
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            let n = batch.labels.len();
            seen += n;
            let w = n as f64;
            sums.ce += w * v.ce;
            sums.kd += w * v.kd;
            sums.sdd += w * v.sdd;
            sums.icd += w * v.icd;
            sums.total += w * v.total;
            drop(g);
            sgd_step(&mut net.params, &grads, &mut state, lr, t.momentum, t.weight_decay).map_err(|e| match e {
                Error::Divergence { term, value, .. } => Error::Divergence { term, value, context },
                other => other,
            })?;
        }
        let n = seen as f64;
        let losses = LossValues {
            total: sums.total / n,
            ce: sums.ce / n,
            kd: sums.kd / n,
            sdd: sums.sdd / n,
            icd: sums.icd / n,
        };
        let test_acc = evaluate(&net, &splits.test, t.batch_size)?;
        let m = EpochMetrics {
            epoch,
            lr,
            warmup,
            losses,
            train_acc: correct as f64 / n,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{role} epoch {epoch}: total {:.4} ce {:.4} train {:.3} test {:.3} ({:.1}s)",
            losses.total,
            losses.ce,
            m.train_acc,
            test_acc,
            m.seconds
        );
        epochs.push(m);
    }
    Ok(Fit {
        net,
        epochs,
        max_recombination_error: max_err,
    })
}

fn accuracy_check(epochs: &[EpochMetrics]) -> Check {
    let ok = epochs
        .iter()
        .all(|e| (0.0..=1.0).contains(&e.train_acc) && (0.0..=1.0).contains(&e.test_acc));
    Check::new("accuracy_range", ok, "train/test accuracies within [0, 1]")
}

fn recombination_check(err: f64) -> Check {
    Check::new(
        "loss_recombination",
        err <= 1e-10,
        format!("max |total - recombined components| = {err:e}"),
    )
}

/// Trains the teacher with cross entropy only.
pub fn train_teacher(cfg: &RunConfig, splits: &Splits) -> Result<(Checkpoint, RunMetrics)> {
    cfg.validate()?;
    let t = &cfg.train;
    let spec = ConvNetSpec::teacher(cfg.data.num_classes, cfg.data.image_size, cfg.map_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(TEACHER_INIT_STREAM);
    let net = ConvNet::init(spec, &mut rng);
    let fit = fit(net, cfg, splits, None, Method::CeOnly, "teacher")?;
    let first = fit.epochs.first().map_or(f64::NAN, |e| e.losses.total);
    let last = fit.epochs.last().map_or(f64::NAN, |e| e.losses.total);
    let checks = vec![
        accuracy_check(&fit.epochs),
        recombination_check(fit.max_recombination_error),
        Check::new(
            "loss_decreased",
            fit.epochs.len() < 2 || last < first,
            format!("epoch-0 loss {first}, final loss {last}"),
        ),
    ];
    let metrics = RunMetrics {
        role: "teacher".into(),
        method: Method::CeOnly,
        seed: t.seed,
        epochs: fit.epochs,
        checks,
    };
    let mut ck = Checkpoint::new("teacher", fit.net, metrics.epochs.len(), t.seed);
    ck.extra.insert("test_accuracy".into(), metrics.final_test_acc().to_string());
    Ok((ck, metrics))
}

/// Trains a fresh student against a frozen teacher with `method`.
pub fn train_student(
    cfg: &RunConfig,
    splits: &Splits,
    teacher: &Checkpoint,
    method: Method,
) -> Result<(Checkpoint, RunMetrics)> {
    cfg.validate()?;
    let t = &cfg.train;
    let ts = &teacher.net.spec;
    if ts.num_classes != cfg.data.num_classes || ts.spatial_size != cfg.map_width || ts.input_size != cfg.data.image_size {
        return Err(Error::config(format!(
            "teacher (K={}, w={}, input {}) does not match the run (K={}, w={}, input {})",
            ts.num_classes, ts.spatial_size, ts.input_size, cfg.data.num_classes, cfg.map_width, cfg.data.image_size
        )));
    }
    let spec = ConvNetSpec::student(cfg.data.num_classes, cfg.data.image_size, cfg.map_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(STUDENT_INIT_STREAM);
    let net = ConvNet::init(spec, &mut rng);
    let before: Vec<Vec<u64>> = teacher
        .net
        .params
        .iter()
        .map(|p| p.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    let fit = fit(net, cfg, splits, Some(&teacher.net), method, "student")?;
    let unchanged = teacher
        .net
        .params
        .iter()
        .zip(&before)
        .all(|(p, b)| p.data().iter().map(|x| x.to_bits()).eq(b.iter().copied()));
    let checks = vec![
        accuracy_check(&fit.epochs),
        recombination_check(fit.max_recombination_error),
        Check::new("teacher_frozen", unchanged, "teacher parameters bit-identical after training"),
    ];
    let metrics = RunMetrics {
        role: "student".into(),
        method,
        seed: t.seed,
        epochs: fit.epochs,
        checks,
    };
    let mut ck = Checkpoint::new("student", fit.net, metrics.epochs.len(), t.seed);
    ck.extra.insert("method".into(), method.to_string());
    ck.extra.insert("test_accuracy".into(), metrics.final_test_acc().to_string());
    Ok((ck, metrics))
}

/// The scale sets of the scale ablation, coarse to fine.
pub const SCALE_SETS: [&[usize]; 7] = [&[1], &[2], &[4], &[1, 2], &[1, 4], &[2, 4], &[1, 2, 4]];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: Method,
    pub scales: Vec<usize>,
    pub gamma: f64,
    pub test_acc: f64,
    pub train_acc: f64,
    pub final_losses: LossValues,
    pub checks_passed: bool,
}

pub const ABLATION_HEADER: &str = "method,scales,gamma,test_acc,train_acc,ce,kd,sdd,icd,total,checks_passed";

fn ablation_row(cfg: &RunConfig, splits: &Splits, teacher: &Checkpoint, method: Method) -> Result<AblationRow> {
    let (_, m) = train_student(cfg, splits, teacher, method)?;
    let last = m.epochs.last().expect("at least one epoch");
    Ok(AblationRow {
        method,
        scales: if method == Method::Kd { vec![] } else { cfg.train.distill.scales.clone() },
        gamma: cfg.train.distill.gamma,
        test_acc: last.test_acc,
        train_acc: last.train_acc,
        final_losses: last.losses,
        checks_passed: m.checks_passed(),
    })
}

/// A plain-KD baseline row followed by one iCD row per entry of [`SCALE_SETS`].
pub fn ablate_scales(cfg: &RunConfig, splits: &Splits, teacher: &Checkpoint) -> Result<Vec<AblationRow>> {
    let mut rows = vec![ablation_row(cfg, splits, teacher, Method::Kd)?];
    for set in SCALE_SETS {
        if set.iter().any(|&m| !cfg.map_width.is_multiple_of(m)) {
            return Err(Error::config(format!("scale set {set:?} does not fit map width {}", cfg.map_width)));
        }
        let mut c = cfg.clone();
        c.train.distill.scales = set.to_vec();
        rows.push(ablation_row(&c, splits, teacher, Method::Icd)?);
    }
    Ok(rows)
}

/// One iCD row per gamma.
pub fn ablate_gamma(cfg: &RunConfig, splits: &Splits, teacher: &Checkpoint, gammas: &[f64]) -> Result<Vec<AblationRow>> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut c = cfg.clone();
            c.train.distill.gamma = gamma;
            ablation_row(&c, splits, teacher, Method::Icd)
        })
        .collect()
}

/// Ablation rows as CSV under [`ABLATION_HEADER`]; `scales` is
/// space-separated and `-` for the KD baseline.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let scales = if r.scales.is_empty() {
            "-".to_string()
        } else {
            r.scales.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" ")
        };
        let l = &r.final_losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method, scales, r.gamma, r.test_acc, r.train_acc, l.ce, l.kd, l.sdd, l.icd, l.total, r.checks_passed
        ));
    }
    out
}

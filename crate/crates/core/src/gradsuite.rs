//! Finite-difference checks for every graph op and for the full student
//! objective.
//!
//! Each op output is reduced to a scalar through a fixed random weighting
//! `sum(op(x) * r)` so that every output entry contributes to the gradient.

use crate::error::Result;
use crate::losses::{distill_objective, gram, icd_cell_loss, kd_loss, sdd_loss, DistillConfig, GramMode, Method};
use crate::nn::{global_logits, project_logit_map, ConvNet, ConvNetSpec};
use crate::scale::{pool_cells, ScaleSpec};
use crate::tensor::{grad_check, GradCheckReport, Graph, GraphFn, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(g.shape(y), 0.5, 1.5, &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Random values with magnitude at least `floor`, away from relu's kink.
fn away_from_zero(shape: &[usize], floor: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    t.data_mut().iter_mut().for_each(|x| *x = x.signum() * (x.abs() + floor));
    t
}

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn check(name: &str, input: Tensor, build: Build, out: &mut Vec<GradCheckReport>) {
    let f = GraphFn::new(name, move |g: &mut Graph, x: Var| build(g, x));
    out.push(grad_check(&f, &input, TOLERANCE));
}

fn unary(name: &str, input: Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static, out: &mut Vec<GradCheckReport>) {
    let seed = out.len() as u64 + 100;
    check(
        name,
        input,
        Box::new(move |g, x| {
            let y = op(g, x)?;
            weighted(g, y, seed)
        }),
        out,
    );
}

/// Runs every check; the last entries cover the full objective, one per
/// student parameter tensor.
pub fn run(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let m23 = |rng: &mut ChaCha8Rng| Tensor::randn(&[2, 3], 1.0, rng);

    let other = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let o = other.clone();
    unary("add", m23(&mut rng), move |g, x| {
        let c = g.constant(o.clone());
        g.add(x, c)
    }, &mut out);
    let o = other.clone();
    unary("sub", m23(&mut rng), move |g, x| {
        let c = g.constant(o.clone());
        g.sub(c, x)
    }, &mut out);
    let o = other.clone();
    unary("mul", m23(&mut rng), move |g, x| {
        let c = g.constant(o.clone());
        let y = g.mul(x, c)?;
        g.mul(y, x)
    }, &mut out);
    unary("scale", m23(&mut rng), |g, x| Ok(g.scale(x, -2.5)), &mut out);
    unary("relu", away_from_zero(&[2, 3], 0.1, &mut rng), |g, x| Ok(g.relu(x)), &mut out);
    unary("log", Tensor::uniform(&[2, 3], 0.5, 2.0, &mut rng), |g, x| g.log(x), &mut out);
    unary("exp", m23(&mut rng), |g, x| Ok(g.exp(x)), &mut out);
    unary("sum_axis", Tensor::randn(&[2, 3, 2], 1.0, &mut rng), |g, x| g.sum_axis(x, 1), &mut out);
    unary("mean_axis", Tensor::randn(&[2, 3, 2], 1.0, &mut rng), |g, x| g.mean_axis(x, 2), &mut out);
    unary("sum", m23(&mut rng), |g, x| {
        let s = g.sum(x);
        g.mul(s, s)
    }, &mut out);
    unary("mean", m23(&mut rng), |g, x| {
        let s = g.mean(x);
        g.mul(s, s)
    }, &mut out);
    unary("permute", Tensor::randn(&[2, 3, 4], 1.0, &mut rng), |g, x| g.permute(x, &[2, 0, 1]), &mut out);
    unary("transpose", m23(&mut rng), |g, x| g.transpose(x), &mut out);
    unary("reshape", m23(&mut rng), |g, x| g.reshape(x, &[3, 2]), &mut out);
    unary("slice", Tensor::randn(&[2, 5], 1.0, &mut rng), |g, x| g.slice(x, 1, 1, 3), &mut out);
    unary("concat", m23(&mut rng), |g, x| {
        let y = g.scale(x, 3.0);
        g.concat(&[x, y], 0)
    }, &mut out);
    let o = Tensor::randn(&[3, 4], 1.0, &mut rng);
    unary("matmul", m23(&mut rng), move |g, x| {
        let c = g.constant(o.clone());
        let y = g.matmul(x, c)?;
        let xt = g.transpose(x)?;
        let z = g.matmul(xt, y)?;
        Ok(z)
    }, &mut out);
    unary("softmax", Tensor::randn(&[2, 4], 1.0, &mut rng), |g, x| g.softmax(x, 1), &mut out);
    unary("log_softmax", Tensor::randn(&[2, 4], 1.0, &mut rng), |g, x| g.log_softmax(x, 1), &mut out);
    unary("l2_normalize", Tensor::randn(&[3, 4], 1.0, &mut rng), |g, x| g.l2_normalize(x, 1, 1e-12), &mut out);
    let o = Tensor::randn(&[3, 4], 1.0, &mut rng);
    unary("kl_div", Tensor::randn(&[3, 4], 1.0, &mut rng), move |g, x| {
        let t = g.constant(o.clone());
        let lt = g.log_softmax(t, 1)?;
        let ls = g.log_softmax(x, 1)?;
        g.kl_div(lt, ls, 1)
    }, &mut out);

    let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
    let b = Tensor::randn(&[4], 0.5, &mut rng);
    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
    for stride in [1, 2] {
        let (wc, bc) = (w.clone(), b.clone());
        unary(&format!("conv2d_input_s{stride}"), x.clone(), move |g, x| {
            let (w, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
            g.conv2d(x, w, b, stride, 1)
        }, &mut out);
        let (xc, bc) = (x.clone(), b.clone());
        unary(&format!("conv2d_weight_s{stride}"), w.clone(), move |g, w| {
            let (x, b) = (g.constant(xc.clone()), g.constant(bc.clone()));
            g.conv2d(x, w, b, stride, 1)
        }, &mut out);
        let (xc, wc) = (x.clone(), w.clone());
        unary(&format!("conv2d_bias_s{stride}"), b.clone(), move |g, b| {
            let (x, w) = (g.constant(xc.clone()), g.constant(wc.clone()));
            g.conv2d(x, w, b, stride, 1)
        }, &mut out);
    }
    for m in [1, 2, 4] {
        unary(&format!("cell_pool_m{m}"), Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng), move |g, x| g.cell_pool(x, m), &mut out);
    }
    unary("cross_entropy", Tensor::randn(&[3, 4], 1.0, &mut rng), |g, x| {
        let l = g.cross_entropy(x, &[0, 3, 1])?;
        g.mul(l, l)
    }, &mut out);
    unary("global_logits", Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng), global_logits, &mut out);
    let o = Tensor::randn(&[5, 3], 1.0, &mut rng);
    unary("project_logit_map", Tensor::randn(&[2, 5, 2, 2], 1.0, &mut rng), move |g, f| {
        let w = g.constant(o.clone());
        project_logit_map(g, f, w)
    }, &mut out);

    let cfg = DistillConfig::default();
    let teacher = Tensor::randn(&[2, 3, 4, 4], 1.5, &mut rng);
    let student = Tensor::randn(&[2, 3, 4, 4], 1.5, &mut rng);
    let (tc, c) = (teacher.clone(), cfg.clone());
    unary("kd_loss", student.clone(), move |g, s| {
        let t = g.constant(tc.clone());
        kd_loss(g, t, s, &c)
    }, &mut out);
    let (tc, c) = (teacher.clone(), cfg.clone());
    unary("sdd_loss", student.clone(), move |g, s| {
        let t = g.constant(tc.clone());
        let spec = ScaleSpec::new(c.scales.clone(), 4)?;
        let (tp, sp) = (pool_cells(g, t, &spec)?, pool_cells(g, s, &spec)?);
        sdd_loss(g, &tp, &sp, &c)
    }, &mut out);
    for mode in [GramMode::ClassCorrelation, GramMode::SampleSimilarity] {
        unary(&format!("gram_{mode}"), Tensor::randn(&[3, 4], 1.0, &mut rng), move |g, x| gram(g, x, mode, 1e-12), &mut out);
    }
    let o = Tensor::randn(&[4, 4], 1.0, &mut rng);
    unary("icd_cell_loss", Tensor::randn(&[4, 4], 1.0, &mut rng), move |g, x| {
        let t = g.constant(o.clone());
        icd_cell_loss(g, t, x)
    }, &mut out);
    for mode in [GramMode::ClassCorrelation, GramMode::SampleSimilarity] {
        let tc = teacher.clone();
        let c = DistillConfig { gram_mode: mode, ..cfg.clone() };
        unary(&format!("icd_loss_{mode}"), student.clone(), move |g, s| {
            let t = g.constant(tc.clone());
            let spec = ScaleSpec::new(c.scales.clone(), 4)?;
            let (tp, sp) = (pool_cells(g, t, &spec)?, pool_cells(g, s, &spec)?);
            crate::losses::icd_loss(g, &tp, &sp, &c)
        }, &mut out);
    }

    objective_checks(&mut rng, &mut out)?;
    Ok(out)
}

/// Full objective (batch 2, K = 3, w = 4, M = {1, 2, 4}) with respect to
/// each parameter tensor of a small student.
fn objective_checks(rng: &mut ChaCha8Rng, out: &mut Vec<GradCheckReport>) -> Result<()> {
    let spec = ConvNetSpec::new(vec![(4, 2), (6, 1)], 3, 8, 4)?;
    let net = ConvNet::init(spec, rng);
    let images = Tensor::randn(&[2, 3, 8, 8], 1.0, rng);
    let teacher = Tensor::randn(&[2, 3, 4, 4], 2.0, rng);
    let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
    let cfg = DistillConfig::default();
    for (i, name) in net.spec.param_names().into_iter().enumerate() {
        let (net, images, teacher, labels, cfg) = (net.clone(), images.clone(), teacher.clone(), labels.clone(), cfg.clone());
        check(
            &format!("objective_{name}"),
            net.params[i].clone(),
            Box::new(move |g, p| {
                let mut params = net.bind(g, false);
                params[i] = p;
                let x = g.constant(images.clone());
                let smap = net.forward_logit_map(g, &params, x)?;
                let tmap = g.constant(teacher.clone());
                Ok(distill_objective(g, tmap, smap, &labels, &cfg, Method::Icd, 1.0)?.total)
            }),
            out,
        );
    }
    Ok(())
}

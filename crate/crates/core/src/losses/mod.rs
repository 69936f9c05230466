//! Distillation losses over teacher/student logit maps.
//!
//! * [`kd_loss`]: tempered KL between globally averaged logits.
//! * [`sdd_loss`]: the same KL per cell of every scale, summed over cells
//!   and scales.
//! * [`icd_loss`]: per cell, L2-normalize the `[batch, K]` cell logits,
//!   build teacher and student Gram matrices, and take the KL between their
//!   row-wise softmaxes; cells are summed and scales weighted by
//!   [`scale_weights`].
//!
//! Every function detaches its teacher inputs, so gradients only ever reach
//! the student.

mod config;
pub mod dump;

pub use config::{DistillConfig, GramMode, Method};

use crate::error::{Error, Result};
use crate::nn::global_logits;
use crate::scale::{pool_cells, CellLogits, ScaleSpec};
use crate::tensor::{self, Graph, Tensor, Var};

/// Mean over rows of `KL(softmax(t/τ) || softmax(s/τ))` along `axis`,
/// optionally scaled by `τ²`.
fn tempered_kl(g: &mut Graph, teacher: Var, student: Var, axis: usize, cfg: &DistillConfig) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(Error::shape("tempered_kl", g.shape(teacher), g.shape(student)));
    }
    let inv = 1.0 / cfg.temperature;
    let t = g.detach(teacher);
    let t = g.scale(t, inv);
    let lt = g.log_softmax(t, axis)?;
    let s = g.scale(student, inv);
    let ls = g.log_softmax(s, axis)?;
    let kl = g.kl_div(lt, ls, axis)?;
    Ok(g.scale(kl, cfg.kl_factor()))
}

/// Vanilla KD on the spatially averaged logits of two `[B, K, w, w]` maps.
pub fn kd_loss(g: &mut Graph, teacher_map: Var, student_map: Var, cfg: &DistillConfig) -> Result<Var> {
    if g.shape(teacher_map) != g.shape(student_map) {
        return Err(Error::shape("kd_loss", g.shape(teacher_map), g.shape(student_map)));
    }
    let pt = global_logits(g, teacher_map)?;
    let ps = global_logits(g, student_map)?;
    tempered_kl(g, pt, ps, 1, cfg)
}

fn check_matching(g: &Graph, op: &'static str, t: &CellLogits, s: &CellLogits) -> Result<()> {
    if t.scales() != s.scales() {
        return Err(Error::config(format!(
            "{op}: teacher scales {:?} != student scales {:?}",
            t.scales(),
            s.scales()
        )));
    }
    for ((m, tv), (_, sv)) in t.per_scale.iter().zip(&s.per_scale) {
        if g.shape(*tv) != g.shape(*sv) {
            return Err(Error::shape(op, g.shape(*tv), g.shape(*sv)));
        }
        if g.shape(*tv).get(1) != Some(&(m * m)) {
            return Err(Error::dim(op, format!("scale {m} must have {} cells, got {:?}", m * m, g.shape(*tv))));
        }
    }
    Ok(())
}

/// Scale-decoupled KD: tempered KL per cell, summed over cells and scales,
/// averaged over the batch.
pub fn sdd_loss(g: &mut Graph, teacher: &CellLogits, student: &CellLogits, cfg: &DistillConfig) -> Result<Var> {
    check_matching(g, "sdd_loss", teacher, student)?;
    let mut total: Option<Var> = None;
    for ((m, tv), (_, sv)) in teacher.per_scale.iter().zip(&student.per_scale) {
        // mean over B*N rows times N == sum over cells, mean over batch
        let kl = tempered_kl(g, *tv, *sv, 2, cfg)?;
        let term = g.scale(kl, (m * m) as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("sdd_loss: empty scale set"))
}

/// Gram matrix of the row-normalized cell logits `x[B, K]`.
pub fn gram(g: &mut Graph, cells: Var, mode: GramMode, eps: f64) -> Result<Var> {
    let s = g.shape(cells);
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::dim("gram", format!("expected [batch, K>=2], got {s:?}")));
    }
    let xn = g.l2_normalize(cells, 1, eps)?;
    let xt = g.transpose(xn)?;
    match mode {
        GramMode::ClassCorrelation => g.matmul(xt, xn),
        GramMode::SampleSimilarity => g.matmul(xn, xt),
    }
}

/// Plain-tensor convenience wrapper around [`gram`].
pub fn gram_matrix(cells: &Tensor, mode: GramMode, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(cells.clone());
    let out = gram(&mut g, x, mode, eps)?;
    Ok(g.value(out).clone())
}

/// KL between the row-wise softmaxes (temperature 1) of two Gram matrices,
/// averaged over rows.
pub fn icd_cell_loss(g: &mut Graph, gram_teacher: Var, gram_student: Var) -> Result<Var> {
    let (st, ss) = (g.shape(gram_teacher), g.shape(gram_student));
    if st != ss || st.len() != 2 {
        return Err(Error::shape("icd_cell_loss", st, ss));
    }
    let t = g.detach(gram_teacher);
    let lt = g.log_softmax(t, 1)?;
    let ls = g.log_softmax(gram_student, 1)?;
    g.kl_div(lt, ls, 1)
}

/// Rank weights `i / (1 + 2 + ... + |M|)` with `i` the 1-based ascending
/// rank of each scale; returned in the order of `scales`.
pub fn scale_weights(scales: &[usize]) -> Result<Vec<f64>> {
    if scales.is_empty() {
        return Err(Error::config("scale_weights: empty scale set"));
    }
    let n = scales.len();
    let denom = (n * (n + 1) / 2) as f64;
    Ok(scales
        .iter()
        .map(|m| {
            let rank = 1 + scales.iter().filter(|&&o| o < *m).count();
            rank as f64 / denom
        })
        .collect())
}

/// Weighted Gram-structure loss of each scale, in scale order.
pub fn icd_loss_per_scale(
    g: &mut Graph,
    teacher: &CellLogits,
    student: &CellLogits,
    cfg: &DistillConfig,
) -> Result<Vec<(usize, Var)>> {
    check_matching(g, "icd_loss", teacher, student)?;
    let weights = scale_weights(&teacher.scales())?;
    let mut out = Vec::with_capacity(weights.len());
    for (((m, tv), (_, sv)), w) in teacher.per_scale.iter().zip(&student.per_scale).zip(weights) {
        let (b, n, k) = {
            let s = g.shape(*tv);
            (s[0], s[1], s[2])
        };
        let tv = g.detach(*tv);
        let mut acc: Option<Var> = None;
        for cell in 0..n {
            let tc = g.slice(tv, 1, cell, 1)?;
            let tc = g.reshape(tc, &[b, k])?;
            let sc = g.slice(*sv, 1, cell, 1)?;
            let sc = g.reshape(sc, &[b, k])?;
            let gt = gram(g, tc, cfg.gram_mode, cfg.eps)?;
            let gs = gram(g, sc, cfg.gram_mode, cfg.eps)?;
            let d = icd_cell_loss(g, gt, gs)?;
            acc = Some(match acc {
                Some(a) => g.add(a, d)?,
                None => d,
            });
        }
        let sum = acc.expect("at least one cell per scale");
        let factor = if cfg.icd_cell_mean { w / n as f64 } else { w };
        out.push((*m, g.scale(sum, factor)));
    }
    Ok(out)
}

/// Scale-weighted sum over all cells of the Gram-structure KL.
pub fn icd_loss(g: &mut Graph, teacher: &CellLogits, student: &CellLogits, cfg: &DistillConfig) -> Result<Var> {
    let parts = icd_loss_per_scale(g, teacher, student, cfg)?;
    let mut it = parts.into_iter().map(|(_, v)| v);
    let first = it.next().ok_or_else(|| Error::config("icd_loss: empty scale set"))?;
    it.try_fold(first, |acc, v| g.add(acc, v))
}

/// Linear ramp `min(1, epoch / warmup_epochs)`; no warm-up when `warmup_epochs == 0`.
pub fn warmup_factor(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

/// `ce + warmup * (alpha * sdd + gamma * icd)` on plain numbers.
pub fn total_loss(ce: f64, sdd: f64, icd: f64, cfg: &DistillConfig, epoch: usize) -> Result<f64> {
    for (term, v) in [("ce", ce), ("sdd", sdd), ("icd", icd)] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                term: term.into(),
                value: v,
                context: format!("at epoch {epoch}"),
            });
        }
    }
    let w = warmup_factor(epoch, cfg.warmup_epochs);
    Ok(ce + w * (cfg.alpha * sdd + cfg.gamma * icd))
}

/// Graph nodes of one student objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    /// Student global logits `[B, K]`.
    pub logits: Var,
    pub ce: Var,
    pub kd: Option<Var>,
    pub sdd: Option<Var>,
    pub icd: Option<Var>,
    /// Multiplier applied to the sdd/icd terms (the warm-up factor).
    pub warmup: f64,
}

impl Objective {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item()).unwrap_or(0.0);
        LossValues {
            total: g.value(self.total).item(),
            ce: g.value(self.ce).item(),
            kd: v(self.kd),
            sdd: v(self.sdd),
            icd: v(self.icd),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub sdd: f64,
    pub icd: f64,
}

impl LossValues {
    /// Recomputes the total from the logged components.
    pub fn recombine(&self, method: Method, cfg: &DistillConfig, warmup: f64) -> f64 {
        match method {
            Method::CeOnly => self.ce,
            Method::Kd => self.ce + cfg.kd_weight() * self.kd,
            Method::Sdd => self.ce + warmup * (cfg.alpha * self.sdd),
            Method::Icd => self.ce + warmup * (cfg.alpha * self.sdd + cfg.gamma * self.icd),
        }
    }
}

/// Builds the full student objective for `method` from the two logit maps.
///
/// Cross entropy is taken on the student's globally averaged logits. The
/// sdd/icd terms are multiplied by `warmup`; plain KD is not warmed up.
pub fn distill_objective(
    g: &mut Graph,
    teacher_map: Var,
    student_map: Var,
    labels: &[usize],
    cfg: &DistillConfig,
    method: Method,
    warmup: f64,
) -> Result<Objective> {
    let logits = global_logits(g, student_map)?;
    let ce = g.cross_entropy(logits, labels)?;
    let mut obj = Objective {
        total: ce,
        logits,
        ce,
        kd: None,
        sdd: None,
        icd: None,
        warmup,
    };
    match method {
        Method::CeOnly => {}
        Method::Kd => {
            let kd = kd_loss(g, teacher_map, student_map, cfg)?;
            let weighted = g.scale(kd, cfg.kd_weight());
            obj.kd = Some(kd);
            obj.total = g.add(ce, weighted)?;
        }
        Method::Sdd | Method::Icd => {
            if g.shape(teacher_map) != g.shape(student_map) {
                return Err(Error::shape("distill_objective", g.shape(teacher_map), g.shape(student_map)));
            }
            let spec = ScaleSpec::new(cfg.scales.clone(), g.shape(student_map)[2])?;
            let tc = pool_cells(g, teacher_map, &spec)?;
            let sc = pool_cells(g, student_map, &spec)?;
            let sdd = sdd_loss(g, &tc, &sc, cfg)?;
            obj.sdd = Some(sdd);
            let mut distill = g.scale(sdd, cfg.alpha);
            if method == Method::Icd {
                let icd = icd_loss(g, &tc, &sc, cfg)?;
                obj.icd = Some(icd);
                let weighted = g.scale(icd, cfg.gamma);
                distill = g.add(distill, weighted)?;
            }
            let distill = g.scale(distill, warmup);
            obj.total = g.add(ce, distill)?;
        }
    }
    Ok(obj)
}

/// Plain-tensor KL used by tests and analysis; re-exported for convenience.
pub use tensor::kl_divergence;

#[cfg(test)]
mod tests;

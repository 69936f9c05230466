//! Scalar-loop reference implementations shared by the integration tests.
//! Logit maps are `[B, K, w, w]` row-major tensors.
#![allow(dead_code)]

use icd::Tensor;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            acc += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    acc
}

pub fn tempered_kl(t: &[f64], s: &[f64], tau: f64) -> f64 {
    let ts: Vec<f64> = t.iter().map(|x| x / tau).collect();
    let ss: Vec<f64> = s.iter().map(|x| x / tau).collect();
    kl(&softmax(&ts), &softmax(&ss)) * tau * tau
}

fn at(map: &Tensor, b: usize, k: usize, y: usize, x: usize) -> f64 {
    let s = map.shape();
    map.data()[((b * s[1] + k) * s[2] + y) * s[3] + x]
}

/// Average logits of cell `n` (row-major) at scale `m` for sample `b`.
pub fn cell_mean(map: &Tensor, b: usize, m: usize, n: usize) -> Vec<f64> {
    let s = map.shape();
    let side = s[2] / m;
    let (r0, c0) = ((n / m) * side, (n % m) * side);
    let mut out = vec![0.0; s[1]];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for y in r0..r0 + side {
            for x in c0..c0 + side {
                acc += at(map, b, k, y, x);
            }
        }
        *o = acc / (side * side) as f64;
    }
    out
}

pub fn kd(t: &Tensor, s: &Tensor, tau: f64) -> f64 {
    let b = t.shape()[0];
    (0..b).map(|i| tempered_kl(&cell_mean(t, i, 1, 0), &cell_mean(s, i, 1, 0), tau)).sum::<f64>() / b as f64
}

pub fn sdd(t: &Tensor, s: &Tensor, scales: &[usize], tau: f64) -> f64 {
    let b = t.shape()[0];
    let mut total = 0.0;
    for &m in scales {
        for n in 0..m * m {
            for i in 0..b {
                total += tempered_kl(&cell_mean(t, i, m, n), &cell_mean(s, i, m, n), tau);
            }
        }
    }
    total / b as f64
}

/// Gram matrix of L2-normalized rows; `class` selects `Xᵀ X` over `X Xᵀ`.
pub fn gram(rows: &[Vec<f64>], class: bool, eps: f64) -> Vec<Vec<f64>> {
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let (b, k) = (x.len(), x[0].len());
    if class {
        let mut g = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                for r in x.iter().take(b) {
                    g[i][j] += r[i] * r[j];
                }
            }
        }
        g
    } else {
        let mut g = vec![vec![0.0; b]; b];
        for i in 0..b {
            for j in 0..b {
                for c in 0..k {
                    g[i][j] += x[i][c] * x[j][c];
                }
            }
        }
        g
    }
}

/// Row-averaged KL between row softmaxes of two Gram matrices.
pub fn gram_kl(gt: &[Vec<f64>], gs: &[Vec<f64>]) -> f64 {
    gt.iter().zip(gs).map(|(a, b)| kl(&softmax(a), &softmax(b))).sum::<f64>() / gt.len() as f64
}

pub fn icd(t: &Tensor, s: &Tensor, scales: &[usize], class: bool) -> f64 {
    let b = t.shape()[0];
    let mut sorted = scales.to_vec();
    sorted.sort();
    let denom: usize = (1..=scales.len()).sum();
    let mut total = 0.0;
    for &m in scales {
        let rank = sorted.iter().position(|&x| x == m).unwrap() + 1;
        let w = rank as f64 / denom as f64;
        for n in 0..m * m {
            let tr: Vec<Vec<f64>> = (0..b).map(|i| cell_mean(t, i, m, n)).collect();
            let sr: Vec<Vec<f64>> = (0..b).map(|i| cell_mean(s, i, m, n)).collect();
            total += w * gram_kl(&gram(&tr, class, 1e-12), &gram(&sr, class, 1e-12));
        }
    }
    total
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Central differences with step `h` of `f` at `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| r.to_vec()).collect()
}

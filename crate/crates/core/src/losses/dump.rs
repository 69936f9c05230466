//! Gram matrix dumps.
//!
//! A dump is a sequence of records. Each record is one ASCII header line
//! `"<m> <n> <d> <mode>\n"` (scale, cell index, Gram side length, gram mode)
//! followed by two `ICDT` tensors: the teacher Gram, then the student Gram.

use super::{gram_matrix, GramMode};
use crate::error::{Error, Result};
use crate::nn::LogitMap;
use crate::scale::{pool_cells, ScaleSpec};
use crate::tensor::{io, Graph, Tensor};
use std::io::{BufRead, Read, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct GramPair {
    pub scale: usize,
    pub cell: usize,
    pub mode: GramMode,
    pub teacher: Tensor,
    pub student: Tensor,
}

/// Teacher and student Gram matrices for every cell of every scale.
pub fn compute_gram_pairs(
    teacher: &LogitMap,
    student: &LogitMap,
    scales: &[usize],
    mode: GramMode,
    eps: f64,
) -> Result<Vec<GramPair>> {
    if teacher.values().shape() != student.values().shape() {
        return Err(Error::shape("compute_gram_pairs", teacher.values().shape(), student.values().shape()));
    }
    let spec = ScaleSpec::new(scales.to_vec(), teacher.width())?;
    let mut g = Graph::new();
    let t = g.constant(teacher.values().clone());
    let s = g.constant(student.values().clone());
    let tc = pool_cells(&mut g, t, &spec)?;
    let sc = pool_cells(&mut g, s, &spec)?;
    let (b, k) = (teacher.batch(), teacher.num_classes());
    let mut out = Vec::new();
    for ((m, tv), (_, sv)) in tc.per_scale.iter().zip(&sc.per_scale) {
        let (tv, sv) = (g.value(*tv), g.value(*sv));
        for n in 0..m * m {
            let take = |src: &Tensor| -> Result<Tensor> {
                let mut cell = Vec::with_capacity(b * k);
                for bi in 0..b {
                    let base = (bi * m * m + n) * k;
                    cell.extend_from_slice(&src.data()[base..base + k]);
                }
                Tensor::new(vec![b, k], cell)
            };
            out.push(GramPair {
                scale: *m,
                cell: n,
                mode,
                teacher: gram_matrix(&take(tv)?, mode, eps)?,
                student: gram_matrix(&take(sv)?, mode, eps)?,
            });
        }
    }
    Ok(out)
}

pub fn write_gram_dump<W: Write>(mut w: W, pairs: &[GramPair]) -> Result<()> {
    for p in pairs {
        let d = p.teacher.shape()[0];
        writeln!(w, "{} {} {} {}", p.scale, p.cell, d, p.mode)?;
        io::write_tensor(&mut w, &p.teacher)?;
        io::write_tensor(&mut w, &p.student)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gram_dump<R: BufRead>(mut r: R) -> Result<Vec<GramPair>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Ok(out);
        }
        let bad = |reason: String| Error::Format { offset, reason };
        let fields: Vec<&str> = line.trim_end().split(' ').collect();
        if fields.len() != 4 {
            return Err(bad(format!("malformed gram header {:?}", line.trim_end())));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("not a count: {s}")));
        let (scale, cell, d) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        let mode: GramMode = fields[3].parse()?;
        let mut counted = CountingReader { inner: &mut r, count: 0 };
        let teacher = io::read_tensor(&mut counted)?;
        let student = io::read_tensor(&mut counted)?;
        let consumed = n as u64 + counted.count;
        for t in [&teacher, &student] {
            if t.shape() != [d, d] {
                return Err(bad(format!("expected a {d}x{d} Gram, got {:?}", t.shape())));
            }
        }
        out.push(GramPair {
            scale,
            cell,
            mode,
            teacher,
            student,
        });
        offset += consumed;
    }
}

struct CountingReader<'a, R> {
    inner: &'a mut R,
    count: u64,
}

impl<R: Read> Read for CountingReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count += n as u64;
        Ok(n)
    }
}

//! Multi-scale cell grids over a square logit map and per-cell average logits.
//!
//! At scale `m` the `w x w` map is split into `m * m` equal, non-overlapping
//! square cells of side `w / m`, enumerated row-major. Each cell's logits are
//! the plain average of the positions it covers, so scale 1 reproduces the
//! global average logits exactly.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    scales: Vec<usize>,
    map_width: usize,
}

impl ScaleSpec {
    pub fn new(scales: Vec<usize>, map_width: usize) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("scale set is empty"));
        }
        if !scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(format!("scales {scales:?} are not strictly increasing")));
        }
        if let Some(&m) = scales.iter().find(|&&m| m == 0 || !map_width.is_multiple_of(m)) {
            return Err(Error::config(format!("scale {m} does not divide map width {map_width}")));
        }
        Ok(ScaleSpec { scales, map_width })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn map_width(&self) -> usize {
        self.map_width
    }

    /// Number of cells at scale `m` (`m * m`).
    pub fn cells(m: usize) -> usize {
        m * m
    }
}

/// One square cell of the partition, in map coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl CellRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.row..self.row + self.size).contains(&y) && (self.col..self.col + self.size).contains(&x)
    }
}

/// The `m * m` cells of scale `m`, row-major.
pub fn cell_grid(spec: &ScaleSpec, m: usize) -> Result<Vec<CellRect>> {
    if !spec.scales.contains(&m) {
        return Err(Error::config(format!("scale {m} is not in {:?}", spec.scales)));
    }
    let size = spec.map_width / m;
    Ok((0..m * m)
        .map(|n| CellRect {
            row: (n / m) * size,
            col: (n % m) * size,
            size,
        })
        .collect())
}

/// Per-scale pooled logits: for each scale `m`, a `[B, m*m, K]` node.
#[derive(Clone, Debug)]
pub struct CellLogits {
    pub per_scale: Vec<(usize, Var)>,
}

impl CellLogits {
    pub fn get(&self, m: usize) -> Option<Var> {
        self.per_scale.iter().find(|(s, _)| *s == m).map(|(_, v)| *v)
    }

    pub fn scales(&self) -> Vec<usize> {
        self.per_scale.iter().map(|(m, _)| *m).collect()
    }
}

/// Average the logit map `[B, K, w, w]` over every cell of every scale.
pub fn pool_cells(g: &mut Graph, map: Var, spec: &ScaleSpec) -> Result<CellLogits> {
    let s = g.shape(map);
    if s.len() != 4 || s[2] != spec.map_width || s[3] != spec.map_width {
        return Err(Error::dim(
            "pool_cells",
            format!("logit map {s:?} does not have width {}", spec.map_width),
        ));
    }
    let per_scale = spec
        .scales
        .iter()
        .map(|&m| Ok((m, g.cell_pool(map, m)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellLogits { per_scale })
}

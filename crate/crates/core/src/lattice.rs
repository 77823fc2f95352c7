//! Multi-index geometry on equally spaced lattices.
//!
//! Tensors are stored flat in row-major order over `(i_1, ..., i_d)`: the last
//! index varies fastest, so the flat position of `i` is
//! `sum_j i_j * stride_j` with `stride_d = 1` and `stride_j = stride_{j+1} * n_{j+1}`.
//! The ordering is part of the model file contract and must not change.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the unit cube `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput(
                "point must have at least one coordinate".into(),
            ));
        }
        if let Some(c) = coords.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidInput(format!(
                "coordinate {c} outside [0, 1]"
            )));
        }
        Ok(Point(coords))
    }

    pub fn origin(d: usize) -> Self {
        Point(vec![0.0; d])
    }

    pub fn ones(d: usize) -> Self {
        Point(vec![1.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self ⪯ other`.
    pub fn leq(&self, other: &Point) -> Result<bool> {
        leq(&self.0, &other.0)
    }

    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        Point(coords)
    }
}

impl Deref for Point {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A multi-index `(i_1, ..., i_d)` into a lattice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<usize>);

impl Deref for MultiIndex {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Componentwise order: true iff `a_j <= b_j` for every `j`.
pub fn leq<T: PartialOrd>(a: &[T], b: &[T]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(dominated(a, b))
}

#[inline]
pub(crate) fn dominated<T: PartialOrd>(a: &[T], b: &[T]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Dimensions `(n_1, ..., n_d)` of a lattice design.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LatticeGrid {
    dims: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl LatticeGrid {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidGrid(
                "grid needs at least one dimension".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero extent in {dims:?}")));
        }
        let mut strides = vec![1usize; dims.len()];
        for j in (0..dims.len() - 1).rev() {
            strides[j] = strides[j + 1]
                .checked_mul(dims[j + 1])
                .ok_or(Error::Overflow("grid size"))?;
        }
        let len = strides[0]
            .checked_mul(dims[0])
            .ok_or(Error::Overflow("grid size"))?;
        Ok(LatticeGrid { dims, strides, len })
    }

    /// Square (hyper-cubic) grid with `side` points per axis.
    pub fn cube(side: usize, d: usize) -> Result<Self> {
        Self::new(vec![side; d])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    /// Total number of lattice points `n = prod n_j`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: index.len(),
            });
        }
        let mut flat = 0;
        for ((&i, &n), &s) in index.iter().zip(&self.dims).zip(&self.strides) {
            if i >= n {
                return Err(Error::InvalidInput(format!(
                    "index {i} out of range for extent {n}"
                )));
            }
            flat += i * s;
        }
        Ok(flat)
    }

    pub fn multi_index(&self, flat: usize) -> MultiIndex {
        let mut rem = flat;
        MultiIndex(
            self.strides
                .iter()
                .map(|&s| {
                    let i = rem / s;
                    rem %= s;
                    i
                })
                .collect(),
        )
    }

    /// The design point `(i_1/n_1, ..., i_d/n_d)` of a multi-index.
    pub fn point_of(&self, index: &[usize]) -> Point {
        Point(
            index
                .iter()
                .zip(&self.dims)
                .map(|(&i, &n)| i as f64 / n as f64)
                .collect(),
        )
    }
}

impl TryFrom<Vec<usize>> for LatticeGrid {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        LatticeGrid::new(dims)
    }
}

impl From<LatticeGrid> for Vec<usize> {
    fn from(grid: LatticeGrid) -> Self {
        grid.dims
    }
}

/// All lattice points in flat (row-major) order; the first one is the origin.
pub fn lattice_points(grid: &LatticeGrid) -> Vec<Point> {
    let d = grid.d();
    let mut index = vec![0usize; d];
    let mut out = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        out.push(grid.point_of(&index));
        for j in (0..d).rev() {
            index[j] += 1;
            if index[j] < grid.dims[j] {
                break;
            }
            index[j] = 0;
        }
    }
    out
}

/// Values indexed by the multi-indices of a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    grid: LatticeGrid,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(grid: LatticeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: grid.len(),
            });
        }
        Ok(Tensor { grid, values })
    }

    pub fn zeros(grid: LatticeGrid) -> Self {
        let values = vec![0.0; grid.len()];
        Tensor { grid, values }
    }

    /// Evaluates `f` at every lattice point.
    pub fn from_fn(grid: LatticeGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = lattice_points(&grid).iter().map(|p| f(p)).collect();
        Tensor { grid, values }
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.values[self.grid.flat_index(index)?])
    }

    /// The differenced tensor `D theta`.
    pub fn difference(&self) -> Tensor {
        let mut out = vec![0.0; self.values.len()];
        difference_into(&self.grid, &self.values, &mut out);
        Tensor {
            grid: self.grid.clone(),
            values: out,
        }
    }

    /// Orthant sums `theta_i = sum_{i' ⪯ i} b_{i'}`, the inverse of [`Tensor::difference`].
    pub fn cumsum(&self) -> Tensor {
        let mut values = self.values.clone();
        cumsum_in_place(&self.grid, &mut values);
        Tensor {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Writes `D theta` into `out` using the 2^d-term alternating formula.
pub fn difference_into(grid: &LatticeGrid, theta: &[f64], out: &mut [f64]) {
    let d = grid.d();
    let masks = 1usize << d;
    let offsets: Vec<usize> = (0..masks)
        .map(|m| {
            (0..d)
                .filter(|j| m >> j & 1 == 1)
                .map(|j| grid.strides[j])
                .sum()
        })
        .collect();
    let signs: Vec<f64> = (0..masks)
        .map(|m| if m.count_ones() % 2 == 0 { 1.0 } else { -1.0 })
        .collect();

    let mut index = vec![0usize; d];
    for (flat, o) in out.iter_mut().enumerate() {
        // bit j set iff i_j >= 1
        let positive: usize = (0..d).filter(|&j| index[j] > 0).map(|j| 1 << j).sum();
        let mut acc = 0.0;
        for m in 0..masks {
            if m & !positive == 0 {
                acc += signs[m] * theta[flat - offsets[m]];
            }
        }
        *o = acc;
        for j in (0..d).rev() {
            index[j] += 1;
            if index[j] < grid.dims[j] {
                break;
            }
            index[j] = 0;
        }
    }
}

/// In-place prefix sums along every axis: `b -> A b` for the lattice design matrix.
pub fn cumsum_in_place(grid: &LatticeGrid, values: &mut [f64]) {
    debug_assert_eq!(values.len(), grid.len());
    for (&n, &s) in grid.dims.iter().zip(&grid.strides) {
        let block = n * s;
        if s == 1 {
            for row in values.chunks_exact_mut(n) {
                let mut acc = 0.0;
                for v in row {
                    acc += *v;
                    *v = acc;
                }
            }
            continue;
        }
        for chunk in values.chunks_exact_mut(block) {
            for i in 1..n {
                let (prev, cur) = chunk[(i - 1) * s..(i + 1) * s].split_at_mut(s);
                for (c, p) in cur.iter_mut().zip(prev.iter()) {
                    *c += *p;
                }
            }
        }
    }
}

/// In-place suffix sums along every axis: `r -> A^T r` for the lattice design matrix.
pub fn reverse_cumsum_in_place(grid: &LatticeGrid, values: &mut [f64]) {
    debug_assert_eq!(values.len(), grid.len());
    for (&n, &s) in grid.dims.iter().zip(&grid.strides) {
        let block = n * s;
        if s == 1 {
            for row in values.chunks_exact_mut(n) {
                let mut acc = 0.0;
                for v in row.iter_mut().rev() {
                    acc += *v;
                    *v = acc;
                }
            }
            continue;
        }
        for chunk in values.chunks_exact_mut(block) {
            for i in (0..n.saturating_sub(1)).rev() {
                let (cur, next) = chunk[i * s..(i + 2) * s].split_at_mut(s);
                for (c, nx) in cur.iter_mut().zip(next.iter()) {
                    *c += *nx;
                }
            }
        }
    }
}

//! Binary design matrices `A(i, j) = 1{z_j ⪯ x_i}`.
//!
//! Columns are the distinct nonzero evaluation vectors `v(z)` over the design.
//! The first column is always the all-ones vector anchored at the origin; every
//! other column is labelled by the componentwise minimum of the design points it
//! covers, which is the largest anchor producing that column. Columns other than
//! the first are sorted lexicographically by anchor, so both enumeration
//! strategies yield the same matrix.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::lattice::{
    cumsum_in_place, dominated, lattice_points, reverse_cumsum_in_place, LatticeGrid, Point,
};

/// Matrix-free access to an `n x p` linear map.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `out = A beta`.
    fn apply(&self, beta: &[f64], out: &mut [f64]);
    /// `out = A^T r`.
    fn transpose_apply(&self, r: &[f64], out: &mut [f64]);
}

/// Binary columns packed 64 rows per word.
#[derive(Debug, Clone, PartialEq)]
pub struct BitColumns {
    nrows: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BitColumns {
    pub fn new(nrows: usize) -> Self {
        BitColumns {
            nrows,
            words: nrows.div_ceil(64),
            bits: Vec::new(),
        }
    }

    pub fn ncols(&self) -> usize {
        self.bits.len().checked_div(self.words).unwrap_or(0)
    }

    pub fn push(&mut self, column: &[u64]) {
        debug_assert_eq!(column.len(), self.words);
        self.bits.extend_from_slice(column);
    }

    pub fn column(&self, j: usize) -> &[u64] {
        &self.bits[j * self.words..(j + 1) * self.words]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.column(j)[i / 64] >> (i % 64) & 1 == 1
    }
}

fn for_each_set_bit(words: &[u64], mut f: impl FnMut(usize)) {
    for (w, &word) in words.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let t = bits.trailing_zeros() as usize;
            f(w * 64 + t);
            bits &= bits - 1;
        }
    }
}

impl LinearOperator for BitColumns {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        BitColumns::ncols(self)
    }

    fn apply(&self, beta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for_each_set_bit(self.column(j), |i| out[i] += b);
            }
        }
    }

    fn transpose_apply(&self, r: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for_each_set_bit(self.column(j), |i| acc += r[i]);
            *o = acc;
        }
    }
}

/// How the columns of a [`DesignMatrix`] are stored.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Dense(BitColumns),
    /// Lattice design: `A` is the orthant cumulative sum, applied in `O(d n)`.
    Lattice(LatticeGrid),
}

/// The design matrix together with its anchors and design points.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    d: usize,
    points: Vec<Point>,
    anchors: Vec<Point>,
    backend: Backend,
}

impl DesignMatrix {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn anchors(&self) -> &[Point] {
        &self.anchors
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn p(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self.backend, Backend::Lattice(_))
    }

    /// Entry `(i, j)`, i.e. `1{z_j ⪯ x_i}`.
    pub fn entry(&self, i: usize, j: usize) -> bool {
        match &self.backend {
            Backend::Dense(cols) => cols.get(i, j),
            Backend::Lattice(_) => dominated(&self.anchors[j], &self.points[i]),
        }
    }

    /// Dense row-major 0/1 matrix; meant for tests and small designs.
    pub fn materialize(&self) -> Vec<Vec<f64>> {
        (0..self.n())
            .map(|i| {
                (0..self.p())
                    .map(|j| if self.entry(i, j) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Dense copy of the columns, converting the lattice backend if needed.
    pub fn to_dense(&self) -> DesignMatrix {
        match &self.backend {
            Backend::Dense(_) => self.clone(),
            Backend::Lattice(_) => {
                let mut cols = BitColumns::new(self.n());
                for z in &self.anchors {
                    cols.push(&pattern(z, &self.points));
                }
                DesignMatrix {
                    d: self.d,
                    points: self.points.clone(),
                    anchors: self.anchors.clone(),
                    backend: Backend::Dense(cols),
                }
            }
        }
    }
}

impl LinearOperator for DesignMatrix {
    fn nrows(&self) -> usize {
        self.n()
    }

    fn ncols(&self) -> usize {
        self.p()
    }

    fn apply(&self, beta: &[f64], out: &mut [f64]) {
        match &self.backend {
            Backend::Dense(cols) => cols.apply(beta, out),
            Backend::Lattice(grid) => {
                out.copy_from_slice(beta);
                cumsum_in_place(grid, out);
            }
        }
    }

    fn transpose_apply(&self, r: &[f64], out: &mut [f64]) {
        match &self.backend {
            Backend::Dense(cols) => cols.transpose_apply(r, out),
            Backend::Lattice(grid) => {
                out.copy_from_slice(r);
                reverse_cumsum_in_place(grid, out);
            }
        }
    }
}

fn check_design(xs: &[Point]) -> Result<usize> {
    let first = xs.first().ok_or(Error::EmptyDesign)?;
    let d = first.dim();
    if let Some(bad) = xs.iter().find(|x| x.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.dim(),
        });
    }
    Ok(d)
}

/// Packed evaluation vector `v(z)`.
pub(crate) fn pattern(z: &[f64], xs: &[Point]) -> Vec<u64> {
    let mut words = vec![0u64; xs.len().div_ceil(64)];
    for (i, x) in xs.iter().enumerate() {
        if dominated(z, x) {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// The evaluation vector `v(z) = (1{z ⪯ x_1}, ..., 1{z ⪯ x_n})`.
pub fn eval_vector(z: &[f64], xs: &[Point]) -> Result<Vec<bool>> {
    if let Some(bad) = xs.iter().find(|x| x.dim() != z.len()) {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            found: bad.dim(),
        });
    }
    Ok(xs.iter().map(|x| dominated(z, x)).collect())
}

/// Componentwise minimum of the design points selected by a column.
pub(crate) fn column_anchor(words: &[u64], xs: &[Point], d: usize) -> Point {
    let mut anchor = vec![f64::INFINITY; d];
    for_each_set_bit(words, |i| {
        for (a, &x) in anchor.iter_mut().zip(xs[i].coords()) {
            *a = a.min(x);
        }
    });
    Point::from_vec_unchecked(anchor)
}

/// Collects distinct nonzero columns, keyed by bit pattern.
struct ColumnSet<'a> {
    xs: &'a [Point],
    d: usize,
    all_ones: Vec<u64>,
    seen: HashMap<Vec<u64>, Point>,
}

impl<'a> ColumnSet<'a> {
    fn new(xs: &'a [Point], d: usize) -> Self {
        let all_ones = pattern(&vec![0.0; d], xs);
        ColumnSet {
            xs,
            d,
            all_ones,
            seen: HashMap::new(),
        }
    }

    fn offer(&mut self, z: &[f64]) {
        let words = pattern(z, self.xs);
        if words.iter().all(|&w| w == 0) || words == self.all_ones {
            return;
        }
        if !self.seen.contains_key(&words) {
            let anchor = column_anchor(&words, self.xs, self.d);
            self.seen.insert(words, anchor);
        }
    }

    fn finish(self) -> DesignMatrix {
        let mut rest: Vec<(Point, Vec<u64>)> = self.seen.into_iter().map(|(w, a)| (a, w)).collect();
        rest.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        let mut cols = BitColumns::new(self.xs.len());
        let mut anchors = Vec::with_capacity(rest.len() + 1);
        cols.push(&self.all_ones);
        anchors.push(Point::origin(self.d));
        for (a, w) in rest {
            cols.push(&w);
            anchors.push(a);
        }
        DesignMatrix {
            d: self.d,
            points: self.xs.to_vec(),
            anchors,
            backend: Backend::Dense(cols),
        }
    }
}

pub(crate) fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

pub(crate) fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Naive gridding: candidate anchors are the product of the per-axis unique coordinates.
pub fn build_naive_grid(xs: &[Point]) -> Result<DesignMatrix> {
    let d = check_design(xs)?;
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| sorted_unique(xs.iter().map(|x| x[j])))
        .collect();
    let mut set = ColumnSet::new(xs, d);
    let mut index = vec![0usize; d];
    let mut z: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        set.offer(&z);
        let mut j = d;
        loop {
            if j == 0 {
                return Ok(set.finish());
            }
            j -= 1;
            index[j] += 1;
            if index[j] < axes[j].len() {
                z[j] = axes[j][index[j]];
                break;
            }
            index[j] = 0;
            z[j] = axes[j][0];
        }
    }
}

/// Componentwise-minimum strategy: candidate anchors are minima of at most `d` design points.
pub fn build_componentwise_min(xs: &[Point]) -> Result<DesignMatrix> {
    let d = check_design(xs)?;
    let n = xs.len();
    let mut set = ColumnSet::new(xs, d);
    let mut minima_seen: HashSet<Vec<u64>> = HashSet::new();
    let mut z = vec![0.0; d];
    for size in 1..=d.min(n) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = combo
                    .iter()
                    .map(|&i| xs[i][j])
                    .fold(f64::INFINITY, f64::min);
            }
            if minima_seen.insert(z.iter().map(|v| v.to_bits()).collect()) {
                set.offer(&z);
            }
            if !next_combination(&mut combo, n) {
                break;
            }
        }
    }
    Ok(set.finish())
}

/// Advances `combo` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for pos in (0..k).rev() {
        if combo[pos] < n - k + pos {
            combo[pos] += 1;
            for m in pos + 1..k {
                combo[m] = combo[m - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Lattice design: implicit cumulative-sum operator with anchors equal to the lattice points.
pub fn build_lattice(grid: &LatticeGrid) -> DesignMatrix {
    let points = lattice_points(grid);
    DesignMatrix {
        d: grid.d(),
        anchors: points.clone(),
        points,
        backend: Backend::Lattice(grid.clone()),
    }
}

/// `sum_{j=0}^{d} C(n, j)`, the worst-case number of distinct columns.
pub fn vc_bound(n: u64, d: u32) -> Result<u64> {
    let mut total: u64 = 0;
    let mut binom: u128 = 1;
    for j in 0..=u64::from(d).min(n) {
        if j > 0 {
            binom = binom * u128::from(n - j + 1) / u128::from(j);
        }
        let term = u64::try_from(binom).map_err(|_| Error::Overflow("vc bound"))?;
        total = total.checked_add(term).ok_or(Error::Overflow("vc bound"))?;
        if binom > u128::from(u64::MAX) {
            return Err(Error::Overflow("vc bound"));
        }
    }
    Ok(total)
}

/// A design recognized as a full lattice, with the flat lattice position of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeLayout {
    pub grid: LatticeGrid,
    pub flat_of_row: Vec<usize>,
}

/// Recognizes designs that enumerate every point `(i_1/n_1, ..., i_d/n_d)` exactly once.
pub fn detect_lattice(xs: &[Point]) -> Option<LatticeLayout> {
    let d = check_design(xs).ok()?;
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| sorted_unique(xs.iter().map(|x| x[j])))
        .collect();
    for axis in &axes {
        let m = axis.len() as f64;
        if axis.iter().enumerate().any(|(k, &v)| v != k as f64 / m) {
            return None;
        }
    }
    let grid = LatticeGrid::new(axes.iter().map(Vec::len).collect()).ok()?;
    if grid.len() != xs.len() {
        return None;
    }
    let mut taken = vec![false; grid.len()];
    let mut flat_of_row = Vec::with_capacity(xs.len());
    for x in xs {
        let mut flat = 0;
        for j in 0..d {
            let k = (x[j] * axes[j].len() as f64).round() as usize;
            flat += k * grid.strides()[j];
        }
        if std::mem::replace(&mut taken[flat], true) {
            return None;
        }
        flat_of_row.push(flat);
    }
    Some(LatticeLayout { grid, flat_of_row })
}

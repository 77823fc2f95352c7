//! Quasi-volumes, entire monotonicity, and Vitali / Hardy-Krause variation of
//! rectangular piecewise constant functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{dominated, lattice_points, Point, Tensor};

/// Default tolerance for certifying entire monotonicity of a tensor.
pub const MONOTONE_TOL: f64 = 1e-9;

/// `f(x) = sum_j beta_j 1{z_j ⪯ x}` with `z_1 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectPiecewiseFn {
    d: usize,
    anchors: Vec<Point>,
    coefficients: Vec<f64>,
}

impl RectPiecewiseFn {
    pub fn new(anchors: Vec<Point>, coefficients: Vec<f64>) -> Result<Self> {
        let first = anchors
            .first()
            .ok_or_else(|| Error::Model("at least the origin anchor is required".into()))?;
        let d = first.dim();
        if anchors.len() != coefficients.len() {
            return Err(Error::LengthMismatch {
                left: anchors.len(),
                right: coefficients.len(),
            });
        }
        if let Some(a) = anchors.iter().find(|a| a.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: a.dim(),
            });
        }
        if first.iter().any(|&c| c != 0.0) {
            return Err(Error::Model("first anchor must be the origin".into()));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Model("non-finite coefficient".into()));
        }
        let mut keys: Vec<Vec<u64>> = anchors
            .iter()
            .map(|a| a.iter().map(|c| c.to_bits()).collect())
            .collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Model("anchors must be distinct".into()));
        }
        Ok(RectPiecewiseFn {
            d,
            anchors,
            coefficients,
        })
    }

    /// Anchored-indicator form of a lattice tensor: coefficients are `D theta`
    /// at the lattice points. Zero differences are dropped except at the origin.
    pub fn from_lattice_values(t: &Tensor) -> Self {
        let diff = t.difference();
        let points = lattice_points(t.grid());
        let mut anchors = Vec::new();
        let mut coefficients = Vec::new();
        for (k, (p, &c)) in points.into_iter().zip(diff.values()).enumerate() {
            if k == 0 || c != 0.0 {
                anchors.push(p);
                coefficients.push(c);
            }
        }
        RectPiecewiseFn {
            d: t.grid().d(),
            anchors,
            coefficients,
        }
    }

    pub fn constant(d: usize, value: f64) -> Self {
        RectPiecewiseFn {
            d,
            anchors: vec![Point::origin(d)],
            coefficients: vec![value],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn anchors(&self) -> &[Point] {
        &self.anchors
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    /// Evaluates without checking the dimension of `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.anchors
            .iter()
            .zip(&self.coefficients)
            .filter(|(z, _)| dominated(z, x))
            .map(|(_, &b)| b)
            .sum()
    }

    pub fn eval_checked(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: x.len(),
            });
        }
        Ok(self.eval(x))
    }

    /// Restriction to the face `U_S` of the cube, as a function of the coordinates in `face`.
    fn restrict_to_face(&self, face: &[usize]) -> RectPiecewiseFn {
        let mut anchors = Vec::new();
        let mut coefficients = Vec::new();
        for (z, &b) in self.anchors.iter().zip(&self.coefficients) {
            let outside_zero = (0..self.d)
                .filter(|j| !face.contains(j))
                .all(|j| z[j] == 0.0);
            if outside_zero {
                anchors.push(Point::from_vec_unchecked(
                    face.iter().map(|&j| z[j]).collect(),
                ));
                coefficients.push(b);
            }
        }
        RectPiecewiseFn {
            d: face.len(),
            anchors,
            coefficients,
        }
    }
}

/// Closed axis-aligned rectangle `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectangle {
    a: Point,
    b: Point,
}

impl Rectangle {
    pub fn new(a: Point, b: Point) -> Result<Self> {
        if !a.leq(&b)? {
            return Err(Error::InvalidInput(
                "rectangle corners must satisfy a ⪯ b".into(),
            ));
        }
        Ok(Rectangle { a, b })
    }

    pub fn unit(d: usize) -> Self {
        Rectangle {
            a: Point::origin(d),
            b: Point::ones(d),
        }
    }

    pub fn a(&self) -> &Point {
        &self.a
    }

    pub fn b(&self) -> &Point {
        &self.b
    }
}

/// Alternating corner sum over `[a, b]`, skipping coordinates with `a_i = b_i`.
pub fn quasi_volume(f: impl Fn(&[f64]) -> f64, r: &Rectangle) -> Result<f64> {
    if r.a == r.b {
        return Err(Error::InvalidInput("quasi-volume needs a != b".into()));
    }
    Ok(corner_sum(&f, &r.a, &r.b))
}

fn corner_sum(f: &impl Fn(&[f64]) -> f64, a: &[f64], b: &[f64]) -> f64 {
    let free: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    let mut corner = b.to_vec();
    let mut total = 0.0;
    for mask in 0..(1usize << free.len()) {
        for (k, &i) in free.iter().enumerate() {
            corner[i] = if mask >> k & 1 == 1 { a[i] } else { b[i] };
        }
        let sign = if mask.count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        total += sign * f(&corner);
    }
    total
}

/// True iff every entry of `D t` except the origin is `>= -tol`.
pub fn is_entirely_monotone(t: &Tensor, tol: f64) -> bool {
    t.difference().values()[1..].iter().all(|&v| v >= -tol)
}

/// `sum_{j >= 2} |beta_j|`.
pub fn hk0_variation_coeffs(f: &RectPiecewiseFn) -> f64 {
    f.coefficients[1..].iter().map(|b| b.abs()).sum()
}

/// Sum of `|quasi-volume|` over the split generated by the breakpoints of `f`
/// inside `bx`. For rectangular piecewise constant `f` this is the Vitali variation
/// on `bx`; refining the split cannot increase it.
pub fn vitali_rect(f: &RectPiecewiseFn, bx: &Rectangle) -> f64 {
    let breaks: Vec<Vec<f64>> = (0..f.d)
        .map(|j| {
            let (lo, hi) = (bx.a[j], bx.b[j]);
            let mut v = vec![lo, hi];
            v.extend(f.anchors.iter().map(|z| z[j]).filter(|&c| c > lo && c < hi));
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        })
        .collect();
    split_sum(f, &breaks)
}

/// `sum_{A in split} |Δ(f; A)|` for the split generated by per-axis breakpoints.
pub(crate) fn split_sum(f: &RectPiecewiseFn, breaks: &[Vec<f64>]) -> f64 {
    let d = breaks.len();
    if breaks.iter().all(|b| b.len() < 2) {
        return 0.0;
    }
    // cells per axis: consecutive pairs, or the single degenerate interval
    let cells: Vec<usize> = breaks
        .iter()
        .map(|b| b.len().saturating_sub(1).max(1))
        .collect();
    let eval = |x: &[f64]| f.eval(x);
    let mut index = vec![0usize; d];
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    loop {
        for j in 0..d {
            a[j] = breaks[j][index[j]];
            b[j] = if breaks[j].len() < 2 {
                a[j]
            } else {
                breaks[j][index[j] + 1]
            };
        }
        total += corner_sum(&eval, &a, &b).abs();
        let mut j = d;
        loop {
            if j == 0 {
                return total;
            }
            j -= 1;
            index[j] += 1;
            if index[j] < cells[j] {
                break;
            }
            index[j] = 0;
        }
    }
}

/// Hardy-Krause variation anchored at the origin: sum of the Vitali variations of
/// `f` restricted to every face `U_S`, `S` nonempty.
pub fn hk0_variation_full(f: &RectPiecewiseFn) -> f64 {
    let d = f.d;
    let mut total = 0.0;
    for mask in 1..(1usize << d) {
        let face: Vec<usize> = (0..d).filter(|j| mask >> j & 1 == 1).collect();
        let g = f.restrict_to_face(&face);
        total += vitali_rect(&g, &Rectangle::unit(face.len()));
    }
    total
}

/// Splits `f - f(0)` into entirely monotone parts `f_plus - f_minus`, both vanishing at 0.
pub fn em_decompose(f: &RectPiecewiseFn) -> (RectPiecewiseFn, RectPiecewiseFn) {
    let part = |sign: f64| {
        let mut anchors = vec![Point::origin(f.d)];
        let mut coefficients = vec![0.0];
        for (z, &b) in f.anchors.iter().zip(&f.coefficients).skip(1) {
            if b * sign > 0.0 {
                anchors.push(z.clone());
                coefficients.push(b.abs());
            }
        }
        RectPiecewiseFn {
            d: f.d,
            anchors,
            coefficients,
        }
    };
    (part(1.0), part(-1.0))
}

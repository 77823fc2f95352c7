//! End-to-end fits of the entirely monotone LSE, the Hardy-Krause constrained
//! LSE and the capped entirely monotone LSE.
//!
//! Three design paths are used:
//!
//! - full lattices use the implicit cumulative-sum operator;
//! - small scattered designs enumerate every distinct column;
//! - larger scattered designs generate columns on demand, pricing all anchors
//!   of the coordinate grid with one reverse cumulative sum.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::design::{
    build_componentwise_min, build_lattice, column_anchor, detect_lattice, lex_cmp, sorted_unique,
    vc_bound, BitColumns, LinearOperator,
};
use crate::error::{Error, Result};
use crate::lattice::{cumsum_in_place, reverse_cumsum_in_place, LatticeGrid, Point};
use crate::solvers::{
    solve_constrained_ls, solve_working_set, ColumnPricer, Projector, SolveResult, SolverConfig,
};
use crate::variation::RectPiecewiseFn;

/// Largest worst-case column count for which all columns are enumerated.
pub const DENSE_COLUMN_LIMIT: u64 = 20_000;

/// Largest coordinate grid used for column generation.
pub const CANDIDATE_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Em,
    Hk,
    EmCapped,
}

impl EstimatorKind {
    pub fn needs_bound(self) -> bool {
        !matches!(self, EstimatorKind::Em)
    }

    fn projector(self, v: Option<f64>) -> Result<Projector> {
        let bound = |v: Option<f64>| {
            let v = v.ok_or_else(|| Error::InvalidInput(format!("estimator {self} needs V")))?;
            if v.is_nan() || v < 0.0 {
                return Err(Error::NegativeBound(v));
            }
            Ok(v)
        };
        Ok(match self {
            EstimatorKind::Em => Projector::NonnegExceptFirst,
            EstimatorKind::Hk => Projector::L1BallExceptFirst(bound(v)?),
            EstimatorKind::EmCapped => Projector::CappedSimplexExceptFirst(bound(v)?),
        })
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Em => "em",
            EstimatorKind::Hk => "hk",
            EstimatorKind::EmCapped => "em-capped",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(EstimatorKind::Em),
            "hk" => Ok(EstimatorKind::Hk),
            "em-capped" => Ok(EstimatorKind::EmCapped),
            other => Err(Error::InvalidInput(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Lattice,
    Dense,
    ColumnGeneration,
}

/// Solver summary stored with a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: FitMethod,
    /// Number of columns (or candidate anchors) of the full problem.
    pub columns: usize,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

impl Diagnostics {
    fn new(method: FitMethod, columns: usize, res: &SolveResult) -> Self {
        Diagnostics {
            method,
            columns,
            objective: res.objective,
            iterations: res.iterations,
            converged: res.converged,
            kkt_residual: res.kkt_residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub function: RectPiecewiseFn,
    /// Fitted values at the design points, in input order.
    pub fitted: Vec<f64>,
    pub kind: EstimatorKind,
    pub v: Option<f64>,
    pub diagnostics: Diagnostics,
    pub grid_dims: Option<Vec<usize>>,
}

impl FittedModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.function.eval_checked(x)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            d: self.function.d(),
            kind: self.kind,
            v: self.v,
            anchors: self
                .function
                .anchors()
                .iter()
                .map(|a| a.coords().to_vec())
                .collect(),
            coefficients: self.function.coefficients().to_vec(),
            grid_dims: self.grid_dims.clone(),
            diagnostics: Some(self.diagnostics.clone()),
        }
    }
}

/// Serialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub d: usize,
    pub kind: EstimatorKind,
    #[serde(rename = "V", with = "bound_serde")]
    pub v: Option<f64>,
    pub anchors: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.function()?;
        Ok(file)
    }

    /// Validated anchored-indicator form.
    pub fn function(&self) -> Result<RectPiecewiseFn> {
        let anchors = self
            .anchors
            .iter()
            .map(|a| {
                if a.len() != self.d {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        found: a.len(),
                    });
                }
                Point::new(a.clone()).map_err(|e| Error::Model(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        RectPiecewiseFn::new(anchors, self.coefficients.clone())
    }
}

/// `V` is a number, `"inf"`, or null when the estimator has no bound.
mod bound_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("invalid V '{t}'"))),
        }
    }
}

/// Entirely monotone LSE: nonnegative coefficients except the intercept.
pub fn fit_em(xs: &[Point], y: &[f64], cfg: &SolverConfig) -> Result<FittedModel> {
    fit(EstimatorKind::Em, xs, y, None, cfg)
}

/// LSE over `{ V_HK0 <= v }`.
pub fn fit_hk(xs: &[Point], y: &[f64], v: f64, cfg: &SolverConfig) -> Result<FittedModel> {
    fit(EstimatorKind::Hk, xs, y, Some(v), cfg)
}

/// Entirely monotone LSE with `f(1) - f(0) <= v`; `v = inf` gives [`fit_em`].
pub fn fit_em_capped(xs: &[Point], y: &[f64], v: f64, cfg: &SolverConfig) -> Result<FittedModel> {
    fit(EstimatorKind::EmCapped, xs, y, Some(v), cfg)
}

/// Dispatches on the design: lattice, enumerated columns, or column generation.
pub fn fit(
    kind: EstimatorKind,
    xs: &[Point],
    y: &[f64],
    v: Option<f64>,
    cfg: &SolverConfig,
) -> Result<FittedModel> {
    let projector = kind.projector(v)?;
    let d = check_data(xs, y)?;

    if let Some(layout) = detect_lattice(xs) {
        let mut y_grid = vec![0.0; y.len()];
        for (&flat, &yi) in layout.flat_of_row.iter().zip(y) {
            y_grid[flat] = yi;
        }
        let mut model = fit_lattice_with(&layout.grid, &y_grid, kind, v, projector, cfg)?;
        model.fitted = layout
            .flat_of_row
            .iter()
            .map(|&k| model.fitted[k])
            .collect();
        return Ok(model);
    }

    if matches!(vc_bound(xs.len() as u64, d as u32), Ok(b) if b <= DENSE_COLUMN_LIMIT) {
        fit_dense(kind, xs, y, v, projector, cfg)
    } else {
        fit_column_generation(kind, xs, y, v, projector, cfg)
    }
}

fn fit_dense(
    kind: EstimatorKind,
    xs: &[Point],
    y: &[f64],
    v: Option<f64>,
    projector: Projector,
    cfg: &SolverConfig,
) -> Result<FittedModel> {
    let design = build_componentwise_min(xs)?;
    let res = solve_constrained_ls(&design, y, projector, cfg)?;
    let mut fitted = vec![0.0; xs.len()];
    design.apply(&res.beta, &mut fitted);
    let function = prune(design.anchors().to_vec(), &res.beta)?;
    Ok(FittedModel {
        function,
        fitted,
        kind,
        v,
        diagnostics: Diagnostics::new(FitMethod::Dense, design.p(), &res),
        grid_dims: None,
    })
}

fn fit_column_generation(
    kind: EstimatorKind,
    xs: &[Point],
    y: &[f64],
    v: Option<f64>,
    projector: Projector,
    cfg: &SolverConfig,
) -> Result<FittedModel> {
    let pricer = RankGrid::new(xs)?;
    let sol = solve_working_set(&pricer, y, projector, cfg)?;
    let sub = pricer.restrict(&sol.columns);
    let mut fitted = vec![0.0; xs.len()];
    sub.apply(&sol.result.beta, &mut fitted);
    drop(sub);
    let function = pricer.consolidate(&sol.columns, &sol.result.beta)?;
    Ok(FittedModel {
        function,
        fitted,
        kind,
        v,
        diagnostics: Diagnostics::new(FitMethod::ColumnGeneration, pricer.grid.len(), &sol.result),
        grid_dims: None,
    })
}

/// Fit on a full lattice with responses given in flat lattice order.
pub fn fit_lattice(
    grid: &LatticeGrid,
    y: &[f64],
    kind: EstimatorKind,
    v: Option<f64>,
    cfg: &SolverConfig,
) -> Result<FittedModel> {
    let projector = kind.projector(v)?;
    if y.len() != grid.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: grid.len(),
        });
    }
    fit_lattice_with(grid, y, kind, v, projector, cfg)
}

fn fit_lattice_with(
    grid: &LatticeGrid,
    y: &[f64],
    kind: EstimatorKind,
    v: Option<f64>,
    projector: Projector,
    cfg: &SolverConfig,
) -> Result<FittedModel> {
    let design = build_lattice(grid);
    let res = solve_constrained_ls(&design, y, projector, cfg)?;
    let mut fitted = res.beta.clone();
    cumsum_in_place(grid, &mut fitted);
    let function = prune(design.anchors().to_vec(), &res.beta)?;
    Ok(FittedModel {
        function,
        fitted,
        kind,
        v,
        diagnostics: Diagnostics::new(FitMethod::Lattice, grid.len(), &res),
        grid_dims: Some(grid.dims().to_vec()),
    })
}

fn check_data(xs: &[Point], y: &[f64]) -> Result<usize> {
    let first = xs.first().ok_or(Error::EmptyDesign)?;
    if xs.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: y.len(),
        });
    }
    let d = first.dim();
    if let Some(bad) = xs.iter().find(|x| x.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.dim(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("responses must be finite".into()));
    }
    Ok(d)
}

/// Drops exact-zero coefficients except the intercept.
fn prune(anchors: Vec<Point>, beta: &[f64]) -> Result<RectPiecewiseFn> {
    let (mut kept_a, mut kept_b) = (Vec::new(), Vec::new());
    for (k, (z, &b)) in anchors.into_iter().zip(beta).enumerate() {
        if k == 0 || b != 0.0 {
            kept_a.push(z);
            kept_b.push(b);
        }
    }
    RectPiecewiseFn::new(kept_a, kept_b)
}

/// Candidate anchors on the product of the per-axis coordinate values.
///
/// Every distinct column is produced by its componentwise-minimum anchor,
/// which lies on this grid, so pricing the grid prices every column.
struct RankGrid<'a> {
    xs: &'a [Point],
    axes: Vec<Vec<f64>>,
    grid: LatticeGrid,
    ranks: Vec<Vec<u32>>,
    cell_of_row: Vec<usize>,
}

impl<'a> RankGrid<'a> {
    fn new(xs: &'a [Point]) -> Result<Self> {
        let d = xs[0].dim();
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|j| sorted_unique(xs.iter().map(|x| x[j])))
            .collect();
        let cells = axes
            .iter()
            .try_fold(1usize, |acc, a| acc.checked_mul(a.len()));
        match cells {
            Some(c) if c <= CANDIDATE_LIMIT => {}
            _ => {
                return Err(Error::TooLarge(format!(
                    "{} candidate anchors exceed the limit of {CANDIDATE_LIMIT}",
                    cells.map_or("too many".to_string(), |c| c.to_string())
                )))
            }
        }
        let grid = LatticeGrid::new(axes.iter().map(Vec::len).collect())?;
        let ranks: Vec<Vec<u32>> = xs
            .iter()
            .map(|x| {
                axes.iter()
                    .zip(x.coords())
                    .map(|(a, c)| a.partition_point(|&u| u < *c) as u32)
                    .collect()
            })
            .collect();
        let cell_of_row = ranks
            .iter()
            .map(|r| {
                r.iter()
                    .zip(grid.strides())
                    .map(|(&k, &s)| k as usize * s)
                    .sum()
            })
            .collect();
        Ok(RankGrid {
            xs,
            axes,
            grid,
            ranks,
            cell_of_row,
        })
    }

    fn column_bits(&self, cell: usize) -> Vec<u64> {
        let m = self.grid.multi_index(cell);
        let mut words = vec![0u64; self.xs.len().div_ceil(64)];
        for (i, r) in self.ranks.iter().enumerate() {
            if r.iter().zip(m.iter()).all(|(&ri, &mi)| ri as usize >= mi) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }

    /// Merges candidates with identical columns and relabels them by canonical anchors.
    fn consolidate(&self, cells: &[usize], beta: &[f64]) -> Result<RectPiecewiseFn> {
        let d = self.axes.len();
        let n = self.xs.len();
        let mut intercept = 0.0;
        let mut by_pattern: HashMap<Vec<u64>, f64> = HashMap::new();
        for (&cell, &b) in cells.iter().zip(beta) {
            if b == 0.0 && cell != 0 {
                continue;
            }
            let bits = self.column_bits(cell);
            let count: u32 = bits.iter().map(|w| w.count_ones()).sum();
            if count as usize == n {
                intercept += b;
            } else if count > 0 {
                *by_pattern.entry(bits).or_insert(0.0) += b;
            }
        }
        let mut terms: Vec<(Point, f64)> = by_pattern
            .into_iter()
            .filter(|(_, b)| *b != 0.0)
            .map(|(bits, b)| (column_anchor(&bits, self.xs, d), b))
            .collect();
        terms.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        let mut anchors = vec![Point::origin(d)];
        let mut coefficients = vec![intercept];
        for (z, b) in terms {
            anchors.push(z);
            coefficients.push(b);
        }
        RectPiecewiseFn::new(anchors, coefficients)
    }
}

impl ColumnPricer for RankGrid<'_> {
    fn nrows(&self) -> usize {
        self.xs.len()
    }

    fn ncandidates(&self) -> usize {
        self.grid.len()
    }

    fn price(&self, r: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (&cell, &ri) in self.cell_of_row.iter().zip(r) {
            out[cell] += ri;
        }
        reverse_cumsum_in_place(&self.grid, out);
    }

    /// The cell at the componentwise minimum rank of the points it covers.
    fn canonical(&self, cell: usize) -> usize {
        let m = self.grid.multi_index(cell);
        let mut lo: Option<Vec<u32>> = None;
        for r in &self.ranks {
            if r.iter().zip(m.iter()).all(|(&ri, &mi)| ri as usize >= mi) {
                match lo.as_mut() {
                    None => lo = Some(r.clone()),
                    Some(l) => l.iter_mut().zip(r).for_each(|(a, &b)| *a = (*a).min(b)),
                }
            }
        }
        match lo {
            Some(l) => l
                .iter()
                .zip(self.grid.strides())
                .map(|(&k, &s)| k as usize * s)
                .sum(),
            None => cell,
        }
    }

    fn restrict<'s>(&'s self, cols: &[usize]) -> Box<dyn LinearOperator + 's> {
        let mut m = BitColumns::new(self.xs.len());
        for &c in cols {
            m.push(&self.column_bits(c));
        }
        Box::new(m)
    }
}

/// `(1/n) sum (a_i - b_i)^2`.
pub fn empirical_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyDesign);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Predictions at many points.
pub fn predict_many(f: &RectPiecewiseFn, xs: &[Point]) -> Result<Vec<f64>> {
    xs.iter().map(|x| f.eval_checked(x)).collect()
}

//! Seeded simulation harness: test functions, risk experiments, slope
//! regressions and the bivariate current status study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{empirical_loss, fit, fit_em, fit_lattice, EstimatorKind, FittedModel};
use crate::lattice::{lattice_points, LatticeGrid, Point, Tensor};
use crate::solvers::SolverConfig;
use crate::variation::{is_entirely_monotone, RectPiecewiseFn, MONOTONE_TOL};

/// Mean losses at or below this are treated as zero when fitting slopes.
pub const ZERO_RISK_FLOOR: f64 = 1e-14;

/// Environment variable capping the number of worker threads for trials.
pub const THREADS_ENV: &str = "HKFIT_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum TestFunction {
    /// `x1 + x2`
    AdditiveLinear,
    /// `1{x1 >= 1/2} + 1{x2 >= 1/2}`
    TwoStep,
    /// `-1{x1 >= 1/2, x2 >= 1/2}`
    NegCorner,
    /// Value 1 on the off-diagonal blocks of a 3 by 3 checkerboard, else 0.
    Checkered,
    /// `a1 1[x*, 1] + a0`
    OneJump { x_star: Vec<f64>, a1: f64, a0: f64 },
    /// `F0(x) = (x1^2 x2 + x1 x2^2) / 2`
    CurrentStatusCdf,
}

fn third_block(x: f64) -> usize {
    if x < 1.0 / 3.0 {
        0
    } else if x < 2.0 / 3.0 {
        1
    } else {
        2
    }
}

impl TestFunction {
    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::AdditiveLinear => "additive_linear",
            TestFunction::TwoStep => "two_step",
            TestFunction::NegCorner => "neg_corner",
            TestFunction::Checkered => "checkered",
            TestFunction::OneJump { .. } => "one_jump",
            TestFunction::CurrentStatusCdf => "current_status_cdf",
        }
    }

    /// Input dimension.
    pub fn d(&self) -> usize {
        match self {
            TestFunction::OneJump { x_star, .. } => x_star.len(),
            _ => 2,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::AdditiveLinear => x[0] + x[1],
            TestFunction::TwoStep => {
                f64::from(u8::from(x[0] >= 0.5)) + f64::from(u8::from(x[1] >= 0.5))
            }
            TestFunction::NegCorner => {
                if x[0] >= 0.5 && x[1] >= 0.5 {
                    -1.0
                } else {
                    0.0
                }
            }
            TestFunction::Checkered => {
                let (b1, b2) = (third_block(x[0]), third_block(x[1]));
                if (b1 == 1) != (b2 == 1) {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::OneJump { x_star, a1, a0 } => {
                let inside = x_star.iter().zip(x).all(|(z, c)| z <= c);
                if inside {
                    a1 + a0
                } else {
                    *a0
                }
            }
            TestFunction::CurrentStatusCdf => 0.5 * (x[0] * x[0] * x[1] + x[0] * x[1] * x[1]),
        }
    }

    /// `V_HK0` of the function on `[0, 1]^d`.
    pub fn v_star(&self) -> f64 {
        match self {
            TestFunction::AdditiveLinear | TestFunction::TwoStep => 2.0,
            TestFunction::NegCorner => 1.0,
            TestFunction::Checkered => 12.0,
            TestFunction::OneJump { x_star, a1, .. } => {
                if x_star.iter().all(|&c| c == 0.0) {
                    0.0
                } else {
                    a1.abs()
                }
            }
            // entirely monotone, so the variation is F0(1) - F0(0)
            TestFunction::CurrentStatusCdf => 1.0,
        }
    }

    /// Anchored-indicator form for the piecewise constant functions.
    pub fn as_rect_fn(&self) -> Option<RectPiecewiseFn> {
        let half = |x: f64, y: f64| Point::new(vec![x, y]).expect("valid point");
        let f = match self {
            TestFunction::TwoStep => RectPiecewiseFn::new(
                vec![Point::origin(2), half(0.0, 0.5), half(0.5, 0.0)],
                vec![0.0, 1.0, 1.0],
            ),
            TestFunction::NegCorner => {
                RectPiecewiseFn::new(vec![Point::origin(2), half(0.5, 0.5)], vec![0.0, -1.0])
            }
            TestFunction::Checkered => {
                let grid = LatticeGrid::cube(3, 2).expect("valid grid");
                let blocks = Tensor::from_fn(grid, |x| self.eval(x));
                Ok(RectPiecewiseFn::from_lattice_values(&blocks))
            }
            TestFunction::OneJump { x_star, a1, a0 } => {
                let z = Point::new(x_star.clone()).ok()?;
                if z.iter().all(|&c| c == 0.0) {
                    Ok(RectPiecewiseFn::constant(z.dim(), a1 + a0))
                } else {
                    RectPiecewiseFn::new(vec![Point::origin(z.dim()), z], vec![*a0, *a1])
                }
            }
            TestFunction::AdditiveLinear | TestFunction::CurrentStatusCdf => return None,
        };
        f.ok()
    }
}

/// `y_i = f(x_i) + sigma xi_i` with standard Gaussian `xi_i`.
pub fn generate_observations<R: Rng + ?Sized>(
    f: &TestFunction,
    xs: &[Point],
    sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let xi: f64 = rng.sample(StandardNormal);
            f.eval(x) + sigma * xi
        })
        .collect()
}

/// `n` points drawn uniformly from `[0, 1)^d`.
pub fn uniform_design<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new((0..d).map(|_| rng.random::<f64>()).collect()).expect("unit cube"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignSpec {
    Lattice(LatticeGrid),
    /// Fresh uniform random design for every trial.
    Uniform {
        n: usize,
        d: usize,
    },
}

impl DesignSpec {
    pub fn n(&self) -> usize {
        match self {
            DesignSpec::Lattice(g) => g.len(),
            DesignSpec::Uniform { n, .. } => *n,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            DesignSpec::Lattice(g) => g.d(),
            DesignSpec::Uniform { d, .. } => *d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VPolicy {
    Oracle,
    Multiple(f64),
    Explicit(f64),
}

impl VPolicy {
    pub fn resolve(self, v_star: f64) -> f64 {
        match self {
            VPolicy::Oracle => v_star,
            VPolicy::Multiple(m) => m * v_star,
            VPolicy::Explicit(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub function: TestFunction,
    pub designs: Vec<DesignSpec>,
    pub sigma: f64,
    pub trials: usize,
    pub kind: EstimatorKind,
    pub v_policy: VPolicy,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.designs.is_empty() {
            return Err(Error::InvalidInput(
                "experiment needs at least one design".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        let d = self.function.d();
        if let Some(bad) = self.designs.iter().find(|g| g.d() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.d(),
            });
        }
        if self.designs.iter().any(|g| g.n() == 0) {
            return Err(Error::EmptyDesign);
        }
        if self.kind.needs_bound() {
            let v = self.bound().unwrap_or(f64::NAN);
            if v.is_nan() || v < 0.0 {
                return Err(Error::NegativeBound(v));
            }
        }
        self.solver.validate()
    }

    /// Variation bound passed to the estimator, if it takes one.
    pub fn bound(&self) -> Option<f64> {
        self.kind
            .needs_bound()
            .then(|| self.v_policy.resolve(self.function.v_star()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRisk {
    pub n: usize,
    pub design: DesignSpec,
    /// Loss of every trial in order; `None` for excluded (non-converged) trials.
    pub losses: Vec<Option<f64>>,
    pub excluded: usize,
    pub mean_loss: Option<f64>,
    pub std_error: Option<f64>,
}

/// OLS slopes of `log r_n` against three regressors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub log_n: f64,
    pub log_n_over_log_n: f64,
    pub log_n_over_log2_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub function: String,
    pub kind: EstimatorKind,
    pub v: Option<f64>,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    pub grids: Vec<GridRisk>,
    /// `None` with fewer than two usable grids or when some `r_n` is zero.
    pub slopes: Option<Slopes>,
}

impl RiskReport {
    pub fn excluded(&self) -> usize {
        self.grids.iter().map(|g| g.excluded).sum()
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trial stream: `splitmix64(seed ^ (design << 32 | trial))`.
pub fn trial_rng(seed: u64, design: usize, trial: usize) -> ChaCha8Rng {
    let key = ((design as u64) << 32) | (trial as u64 & 0xffff_ffff);
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ key))
}

/// Worker count from `HKFIT_THREADS`, or rayon's default.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(Error::InvalidInput(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

struct Trial {
    loss: f64,
    converged: bool,
}

fn run_trial(
    spec: &ExperimentSpec,
    design_idx: usize,
    trial: usize,
    lattice: Option<(&[Point], &[f64])>,
) -> Result<Trial> {
    let mut rng = trial_rng(spec.seed, design_idx, trial);
    let v = spec.bound();
    let (model, loss) = match (&spec.designs[design_idx], lattice) {
        (DesignSpec::Lattice(grid), Some((xs, truth))) => {
            let y = generate_observations(&spec.function, xs, spec.sigma, &mut rng);
            let m = fit_lattice(grid, &y, spec.kind, v, &spec.solver)?;
            let loss = empirical_loss(&m.fitted, truth)?;
            (m, loss)
        }
        (DesignSpec::Uniform { n, d }, _) => {
            let xs = uniform_design(*n, *d, &mut rng);
            let y = generate_observations(&spec.function, &xs, spec.sigma, &mut rng);
            let m = fit(spec.kind, &xs, &y, v, &spec.solver)?;
            let truth: Vec<f64> = xs.iter().map(|x| spec.function.eval(x)).collect();
            let loss = empirical_loss(&m.fitted, &truth)?;
            (m, loss)
        }
        (DesignSpec::Lattice(_), None) => unreachable!("lattice points are precomputed"),
    };
    Ok(Trial {
        loss,
        converged: model.diagnostics.converged,
    })
}

/// Runs every (design, trial) fit, in parallel over a pool capped by
/// `HKFIT_THREADS`. Results do not depend on the thread schedule.
pub fn run_risk_experiment(spec: &ExperimentSpec) -> Result<RiskReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;

    let fixed: Vec<Option<(Vec<Point>, Vec<f64>)>> = spec
        .designs
        .iter()
        .map(|ds| match ds {
            DesignSpec::Lattice(g) => {
                let xs = lattice_points(g);
                let truth = xs.iter().map(|x| spec.function.eval(x)).collect();
                Some((xs, truth))
            }
            DesignSpec::Uniform { .. } => None,
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..spec.designs.len())
        .flat_map(|g| (0..spec.trials).map(move |t| (g, t)))
        .collect();
    let outcomes: Vec<Result<Trial>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, t)| {
                let lat = fixed[g]
                    .as_ref()
                    .map(|(xs, tr)| (xs.as_slice(), tr.as_slice()));
                run_trial(spec, g, t, lat)
            })
            .collect()
    });

    let mut outcomes = outcomes.into_iter();
    let mut grids = Vec::with_capacity(spec.designs.len());
    for design in &spec.designs {
        let mut losses = Vec::with_capacity(spec.trials);
        for _ in 0..spec.trials {
            let t = outcomes.next().expect("one outcome per job")?;
            losses.push(t.converged.then_some(t.loss));
        }
        let used: Vec<f64> = losses.iter().flatten().copied().collect();
        let k = used.len();
        let mean_loss = (k > 0).then(|| used.iter().sum::<f64>() / k as f64);
        let std_error = mean_loss.filter(|_| k > 1).map(|m| {
            let ss: f64 = used.iter().map(|l| (l - m).powi(2)).sum();
            (ss / (k - 1) as f64).sqrt() / (k as f64).sqrt()
        });
        grids.push(GridRisk {
            n: design.n(),
            design: design.clone(),
            excluded: spec.trials - k,
            losses,
            mean_loss,
            std_error,
        });
    }

    let slopes = risk_slopes(&grids);
    Ok(RiskReport {
        function: spec.function.name().to_string(),
        kind: spec.kind,
        v: spec.bound(),
        sigma: spec.sigma,
        trials: spec.trials,
        seed: spec.seed,
        grids,
        slopes,
    })
}

fn risk_slopes(grids: &[GridRisk]) -> Option<Slopes> {
    let mut ln = Vec::with_capacity(grids.len());
    let mut lr = Vec::with_capacity(grids.len());
    for g in grids {
        let r = g.mean_loss.filter(|&r| r > ZERO_RISK_FLOOR)?;
        if g.n < 2 {
            return None;
        }
        ln.push((g.n as f64).ln());
        lr.push(r.ln());
    }
    let by = |h: &dyn Fn(f64) -> f64| {
        let xs: Vec<f64> = ln.iter().map(|&l| h(l)).collect();
        fit_slope(&xs, &lr).ok()
    };
    Some(Slopes {
        log_n: by(&|l| l)?,
        log_n_over_log_n: by(&|l| l - l.ln())?,
        log_n_over_log2_n: by(&|l| l - 2.0 * l.ln())?,
    })
}

/// Ordinary least squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("regression data must be finite".into()));
    }
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::DegenerateRegressor);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx <= 0.0 {
        return Err(Error::DegenerateRegressor);
    }
    Ok(sxy / sxx)
}

/// Side of the evaluation grid used for current status errors.
pub const EVAL_SIDE: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentStatusReport {
    pub model: FittedModel,
    pub xs: Vec<Point>,
    pub y: Vec<f64>,
    /// Mean squared error against `F0` on the 21 by 21 grid `{k/20}^2`.
    pub mse_full: f64,
    /// Same, restricted to the points inside `[0.2, 0.8]^2`.
    pub mse_interior: f64,
    /// Whether the fit is entirely monotone on the grid its anchors induce.
    pub entirely_monotone: bool,
}

/// Serializable summary of a [`CurrentStatusReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentStatusSummary {
    pub n: usize,
    pub clamp: bool,
    pub mse_full: f64,
    pub mse_interior: f64,
    pub entirely_monotone: bool,
    pub converged: bool,
    pub kkt_residual: f64,
    pub anchors: usize,
}

impl CurrentStatusReport {
    pub fn summary(&self, clamp: bool) -> CurrentStatusSummary {
        CurrentStatusSummary {
            n: self.xs.len(),
            clamp,
            mse_full: self.mse_full,
            mse_interior: self.mse_interior,
            entirely_monotone: self.entirely_monotone,
            converged: self.model.diagnostics.converged,
            kkt_residual: self.model.diagnostics.kkt_residual,
            anchors: self.model.function.anchors().len(),
        }
    }
}

/// Values of `f` on the product of its anchor coordinates (plus 0) per axis.
pub fn induced_grid_values(f: &RectPiecewiseFn) -> Tensor {
    let d = f.d();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut a: Vec<f64> = f.anchors().iter().map(|z| z[j]).chain([0.0]).collect();
            a.sort_by(f64::total_cmp);
            a.dedup();
            a
        })
        .collect();
    let grid = LatticeGrid::new(axes.iter().map(Vec::len).collect()).expect("nonempty axes");
    let values = (0..grid.len())
        .map(|k| {
            let idx = grid.multi_index(k);
            let x: Vec<f64> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
            f.eval(&x)
        })
        .collect();
    Tensor::new(grid, values).expect("matching length")
}

/// Draws `n` current status observations, fits the EM estimator and scores
/// it against `F0`. With `clamp`, predictions are truncated to `[0, 1]`
/// before scoring.
pub fn run_current_status<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
    clamp: bool,
    cfg: &SolverConfig,
) -> Result<CurrentStatusReport> {
    if n == 0 {
        return Err(Error::EmptyDesign);
    }
    let f0 = TestFunction::CurrentStatusCdf;
    let xs = uniform_design(n, 2, rng);
    let y: Vec<f64> = xs
        .iter()
        .map(|x| f64::from(u8::from(rng.random_bool(f0.eval(x)))))
        .collect();
    let model = fit_em(&xs, &y, cfg)?;

    let step = (EVAL_SIDE - 1) as f64;
    let (mut full, mut inner, mut k_inner) = (0.0, 0.0, 0usize);
    for i in 0..EVAL_SIDE {
        for j in 0..EVAL_SIDE {
            let x = [i as f64 / step, j as f64 / step];
            let mut p = model.function.eval(&x);
            if clamp {
                p = p.clamp(0.0, 1.0);
            }
            let e = (p - f0.eval(&x)).powi(2);
            full += e;
            if (4..=16).contains(&i) && (4..=16).contains(&j) {
                inner += e;
                k_inner += 1;
            }
        }
    }
    let entirely_monotone =
        is_entirely_monotone(&induced_grid_values(&model.function), MONOTONE_TOL);
    Ok(CurrentStatusReport {
        model,
        xs,
        y,
        mse_full: full / (EVAL_SIDE * EVAL_SIDE) as f64,
        mse_interior: inner / k_inner as f64,
        entirely_monotone,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    Risk(ExperimentSpec),
    CurrentStatus { n: usize, seed: u64 },
}

pub const PRESET_NAMES: [&str; 7] = [
    "checkered",
    "fig1",
    "fig2",
    "fig3",
    "fig4",
    "fig5",
    "current-status",
];

/// Experiment parameters of the named study; `seed` fills the RNG seed.
pub fn preset(name: &str, seed: u64) -> Option<Preset> {
    let grid10 = || {
        vec![DesignSpec::Lattice(
            LatticeGrid::cube(10, 2).expect("valid grid"),
        )]
    };
    let figure = |function, kind, designs| ExperimentSpec {
        function,
        designs,
        sigma: 1.0,
        trials: 20,
        kind,
        v_policy: VPolicy::Oracle,
        seed,
        solver: SolverConfig::default(),
    };
    let spec = match name {
        "checkered" => ExperimentSpec {
            function: TestFunction::Checkered,
            designs: [50, 60, 80, 95, 110]
                .iter()
                .map(|&s| DesignSpec::Lattice(LatticeGrid::cube(s, 2).expect("valid grid")))
                .collect(),
            sigma: 0.5,
            trials: 20,
            kind: EstimatorKind::Hk,
            v_policy: VPolicy::Oracle,
            seed,
            // large lattices with a tight bound have a long linear tail
            solver: SolverConfig {
                max_iter: 200_000,
                ..SolverConfig::default()
            },
        },
        "fig1" => figure(TestFunction::AdditiveLinear, EstimatorKind::Em, grid10()),
        "fig2" => figure(TestFunction::TwoStep, EstimatorKind::Em, grid10()),
        "fig3" => figure(TestFunction::NegCorner, EstimatorKind::Hk, grid10()),
        "fig4" => figure(TestFunction::AdditiveLinear, EstimatorKind::Hk, grid10()),
        "fig5" => figure(
            TestFunction::TwoStep,
            EstimatorKind::Em,
            vec![DesignSpec::Uniform { n: 100, d: 2 }],
        ),
        "current-status" => return Some(Preset::CurrentStatus { n: 500, seed }),
        _ => return None,
    };
    Some(Preset::Risk(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variation::{hk0_variation_coeffs, hk0_variation_full};

    fn small_spec(function: TestFunction, sides: &[usize]) -> ExperimentSpec {
        ExperimentSpec {
            function,
            designs: sides
                .iter()
                .map(|&s| DesignSpec::Lattice(LatticeGrid::cube(s, 2).unwrap()))
                .collect(),
            sigma: 0.5,
            trials: 4,
            kind: EstimatorKind::Hk,
            v_policy: VPolicy::Oracle,
            seed: 11,
            solver: SolverConfig::default(),
        }
    }

    fn sample_points(k: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = uniform_design(k, 2, &mut rng);
        // include block and half boundaries exactly
        for a in [0.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0] {
            for b in [0.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0] {
                pts.push(Point::new(vec![a, b]).unwrap());
            }
        }
        pts
    }

    #[test]
    fn checkered_variation_is_twelve() {
        let f = TestFunction::Checkered.as_rect_fn().unwrap();
        assert_eq!(hk0_variation_coeffs(&f), 12.0);
        assert_eq!(hk0_variation_full(&f), 12.0);
        assert_eq!(f.anchors().len(), 9);
    }

    #[test]
    fn anchored_forms_match_pointwise_definitions() {
        let fns = [
            TestFunction::TwoStep,
            TestFunction::NegCorner,
            TestFunction::Checkered,
            TestFunction::OneJump {
                x_star: vec![0.3, 0.7],
                a1: -2.5,
                a0: 0.5,
            },
        ];
        for f in fns {
            let rect = f.as_rect_fn().unwrap();
            for x in sample_points(2000, 4) {
                assert_eq!(
                    rect.eval(&x),
                    f.eval(&x),
                    "{} at {:?}",
                    f.name(),
                    x.coords()
                );
            }
            assert_eq!(hk0_variation_coeffs(&rect), f.v_star(), "{}", f.name());
        }
        assert!(TestFunction::AdditiveLinear.as_rect_fn().is_none());
    }

    #[test]
    fn checkered_on_lattices() {
        // the block boundaries 1/3 and 2/3 coincide with lattice points of 60 and 3
        let g = LatticeGrid::cube(60, 2).unwrap();
        let f = TestFunction::Checkered;
        assert_eq!(f.eval(&g.point_of(&[20, 0])), 1.0);
        assert_eq!(f.eval(&g.point_of(&[19, 0])), 0.0);
        assert_eq!(f.eval(&g.point_of(&[40, 20])), 1.0);
        assert_eq!(f.eval(&g.point_of(&[20, 20])), 0.0);
        let t = Tensor::from_fn(g, |x| f.eval(x));
        let v: f64 = t.difference().values()[1..].iter().map(|c| c.abs()).sum();
        assert_eq!(v, 12.0);
    }

    #[test]
    fn current_status_cdf_endpoints() {
        let f = TestFunction::CurrentStatusCdf;
        assert_eq!(f.eval(&[1.0, 1.0]), 1.0);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(f.eval(&[0.0, t]), 0.0);
            assert_eq!(f.eval(&[t, 0.0]), 0.0);
        }
    }

    #[test]
    fn observations() {
        let xs = sample_points(50, 1);
        let f = TestFunction::AdditiveLinear;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = generate_observations(&f, &xs, 0.0, &mut rng);
        assert!(y.iter().zip(&xs).all(|(v, x)| *v == f.eval(x)));

        let a = generate_observations(&f, &xs, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = generate_observations(&f, &xs, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let n = 100_000;
        let pts = vec![Point::new(vec![0.2, 0.4]).unwrap(); n];
        let sigma = 0.7;
        let y = generate_observations(&f, &pts, sigma, &mut ChaCha8Rng::seed_from_u64(5));
        let mean = y.iter().map(|v| v - 0.6000000000000001).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 * sigma / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn slope_examples() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((fit_slope(&xs, &ys).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(fit_slope(&xs, &[3.0; 4]).unwrap(), 0.0);
        assert!(matches!(
            fit_slope(&[1.0, 1.0], &[0.0, 1.0]),
            Err(Error::DegenerateRegressor)
        ));
        assert!(matches!(
            fit_slope(&[1.0], &[0.0]),
            Err(Error::DegenerateRegressor)
        ));
        assert!(fit_slope(&[1.0, 2.0], &[0.0]).is_err());

        // closed form cov(x, y) / var(x) from raw moments
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let k = rng.random_range(2..40);
            let xs: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ys: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let n = k as f64;
            let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
            let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
            let sxx: f64 = xs.iter().map(|a| a * a).sum();
            let oracle = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            assert!((fit_slope(&xs, &ys).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn risk_report_is_deterministic() {
        let spec = small_spec(TestFunction::Checkered, &[6, 9]);
        let a = serde_json::to_string(&run_risk_experiment(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&run_risk_experiment(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let r: RiskReport = serde_json::from_str(&a).unwrap();
        assert_eq!(r.grids.len(), 2);
        assert_eq!(r.grids[0].n, 36);
        assert!(r.slopes.is_some());
        assert_eq!(r.v, Some(12.0));
        assert_eq!(r.excluded(), 0);
    }

    #[test]
    fn noiseless_interpolation_has_zero_risk() {
        let mut spec = small_spec(TestFunction::NegCorner, &[4, 8]);
        spec.sigma = 0.0;
        spec.v_policy = VPolicy::Explicit(5.0);
        spec.solver.kkt_tol = 1e-10;
        let r = run_risk_experiment(&spec).unwrap();
        for g in &r.grids {
            assert!(g.mean_loss.unwrap() <= ZERO_RISK_FLOOR, "{:?}", g.mean_loss);
        }
        assert!(r.slopes.is_none());
    }

    #[test]
    fn single_grid_has_no_slopes() {
        let r = run_risk_experiment(&small_spec(TestFunction::TwoStep, &[7])).unwrap();
        assert!(r.slopes.is_none());
        assert!(r.grids[0].mean_loss.unwrap() > 0.0);
        assert!(r.grids[0].std_error.is_some());
    }

    #[test]
    fn uniform_designs_run() {
        let spec = ExperimentSpec {
            designs: vec![
                DesignSpec::Uniform { n: 30, d: 2 },
                DesignSpec::Uniform { n: 60, d: 2 },
            ],
            kind: EstimatorKind::Em,
            ..small_spec(TestFunction::TwoStep, &[])
        };
        let r = run_risk_experiment(&spec).unwrap();
        assert_eq!(r.v, None);
        assert_eq!(r.grids[1].n, 60);
        assert_eq!(r, run_risk_experiment(&spec).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small_spec(TestFunction::Checkered, &[5]);
        spec.trials = 0;
        assert!(run_risk_experiment(&spec).is_err());
        let mut spec = small_spec(TestFunction::Checkered, &[]);
        assert!(run_risk_experiment(&spec).is_err());
        spec.designs = vec![DesignSpec::Lattice(LatticeGrid::cube(4, 3).unwrap())];
        assert!(matches!(
            spec.validate(),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut spec = small_spec(TestFunction::Checkered, &[5]);
        spec.v_policy = VPolicy::Explicit(-1.0);
        assert!(matches!(spec.validate(), Err(Error::NegativeBound(_))));
        spec.v_policy = VPolicy::Oracle;
        spec.sigma = f64::NAN;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn trial_streams_differ() {
        let draw = |g, t| trial_rng(3, g, t).random::<u64>();
        assert_ne!(draw(0, 0), draw(0, 1));
        assert_ne!(draw(0, 1), draw(1, 0));
        assert_eq!(draw(2, 5), draw(2, 5));
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }

    #[test]
    fn current_status_fit_is_entirely_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = run_current_status(150, &mut rng, false, &SolverConfig::default()).unwrap();
        assert!(r.entirely_monotone);
        assert!(r.model.diagnostics.converged);
        assert!(r.model.function.coefficients()[1..]
            .iter()
            .all(|&b| b >= 0.0));
        assert!(r.mse_full.is_finite() && r.mse_interior.is_finite());
        let clamped = run_current_status(
            150,
            &mut ChaCha8Rng::seed_from_u64(17),
            true,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(clamped.mse_full <= r.mse_full);
        assert!(run_current_status(0, &mut rng, false, &SolverConfig::default()).is_err());
    }

    #[test]
    fn presets_exist() {
        for name in PRESET_NAMES {
            let p = preset(name, 1).unwrap();
            if let Preset::Risk(spec) = p {
                spec.validate().unwrap();
            }
        }
        assert!(preset("fig6", 0).is_none());
        match preset("checkered", 0).unwrap() {
            Preset::Risk(s) => {
                assert_eq!(s.designs.len(), 5);
                assert_eq!(s.bound(), Some(12.0));
                assert_eq!(s.sigma, 0.5);
                assert_eq!(s.trials, 20);
            }
            _ => panic!(),
        }
    }
}

//! Order-2 statistics whose kernel concentrates on the diagonal: Dirichlet and Haar
//! projection kernels, block partitions and the associated condition suite.

use std::f64::consts::PI;
use std::sync::Arc;

use gauss_quad::Simpson;

use crate::combin::binom;
use crate::error::{invalid, Error, Result};
use crate::fclt_conditions::{fit_rate, RateFit};
use crate::limit_processes::{empirical_cov, ks_test, max_cov_deviation, normal_cdf, CovEstimate, KsResult};
use crate::parallel::Execution;
use crate::sample_spaces::{BoxRegion, DensitySpec, DistributionSpec, RngStream};
use crate::ustat_core::{simulate_normalized_paths, Kernel, KernelSpec, Normalizer};

/// Smallest number of Simpson panels.
pub const SIMPSON_MIN_PANELS: usize = 1 << 12;
const SIMPSON_MAX_PANELS: usize = 1 << 24;
pub const SIMPSON_REL_TOL: f64 = 1e-8;

/// Composite Simpson, doubling the panel count from `2^12` until two successive
/// estimates agree to `1e-8` relatively. Returns the estimate and the panel count.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, usize) {
    let mut panels = SIMPSON_MIN_PANELS;
    let mut prev = Simpson::new(panels).expect("panels").integrate(a, b, &f);
    loop {
        panels *= 2;
        let cur = Simpson::new(panels).expect("panels").integrate(a, b, &f);
        if (cur - prev).abs() <= SIMPSON_REL_TOL * cur.abs().max(1e-300) || panels >= SIMPSON_MAX_PANELS {
            return (cur, panels);
        }
        prev = cur;
    }
}

/// `sin((k + 1/2) u) / sin(u / 2)`, equal to `1 + 2 sum_{j<=k} cos(j u)`.
pub fn dirichlet_ratio(k: usize, u: f64) -> f64 {
    let s = (0.5 * u).sin();
    if s.abs() < 1e-9 {
        // removable singularity at multiples of 2 pi
        let c = (0.5 * u).cos().signum();
        return (2 * k + 1) as f64 * if (k % 2 == 1) && c < 0.0 { -1.0 } else { 1.0 };
    }
    ((k as f64 + 0.5) * u).sin() / s
}

/// The Lebesgue-orthonormal projection kernel `sum_{|j|<=k} e_j(x) e_j(y)` on `[-pi, pi]`.
pub fn dirichlet_kernel(k: usize) -> impl Fn(f64, f64) -> f64 {
    move |x, y| dirichlet_ratio(k, x - y) / (2.0 * PI)
}

/// Projection onto functions constant on dyadic cells of side `2^-level` in `[0, 1]`
/// (the Haar expansion truncated below `level`).
pub fn haar_kernel(level: u32) -> impl Fn(f64, f64) -> f64 {
    let m = (1u64 << level) as f64;
    move |x, y| if haar_cell(level, x) == haar_cell(level, y) { m } else { 0.0 }
}

pub fn haar_cell(level: u32, x: f64) -> usize {
    let m = 1usize << level;
    ((x * m as f64).floor().max(0.0) as usize).min(m - 1)
}

/// Rule for the target `k_n`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnRule {
    /// `c n^exponent`.
    Power { c: f64, exponent: f64 },
    /// `c n log n`.
    NLogN { c: f64 },
}

impl KnRule {
    pub fn target(&self, n: usize) -> f64 {
        let nf = n as f64;
        match *self {
            KnRule::Power { c, exponent } => c * nf.powf(exponent),
            KnRule::NLogN { c } => c * nf * nf.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DiagFamily {
    /// `k_n = 2k + 1` with `k_n` the smallest odd integer at least `ceil(target)`;
    /// cells of length about `cell_c n^-cell_a` partition `(-pi, pi]`.
    Dirichlet { kn: KnRule, cell_c: f64, cell_a: f64 },
    /// `k_n = 2^I` with `I = round(log2 target)`; about `n^(3/4)` blocks, each a run of adjacent cells.
    /// `slope` tilts the density on `[0, 1]` (`0` is uniform).
    Haar { kn: KnRule, slope: f64 },
}

impl DiagFamily {
    pub fn dirichlet_default() -> Self {
        DiagFamily::Dirichlet { kn: KnRule::Power { c: 1.0, exponent: 1.5 }, cell_c: 1.0, cell_a: 0.6 }
    }

    pub fn haar_default() -> Self {
        DiagFamily::Haar { kn: KnRule::Power { c: 1.0, exponent: 1.5 }, slope: 0.0 }
    }

    pub fn setup(&self, n: usize) -> Result<DiagSetup> {
        DiagSetup::new(self.clone(), n)
    }
}

/// Intervals `[edges[m], edges[m+1])` with their `mu`-measures.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PartitionSpec {
    pub edges: Vec<f64>,
    pub measures: Vec<f64>,
}

impl PartitionSpec {
    pub fn new(edges: Vec<f64>, measures: Vec<f64>) -> Result<Self> {
        if edges.len() != measures.len() + 1 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("partition edges must be increasing with one more entry than measures");
        }
        let total: f64 = measures.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("cell measures sum to {total}, not 1"));
        }
        Ok(PartitionSpec { edges, measures })
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn max_measure(&self) -> f64 {
        self.measures.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_measure(&self) -> f64 {
        self.measures.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// The `mu`-projection kernel actually summed in the statistic.
#[derive(Debug, Clone)]
pub struct DiagKernel {
    family: DiagKernelKind,
}

#[derive(Debug, Clone, Copy)]
enum DiagKernelKind {
    /// `2 pi` times the Dirichlet kernel, the projection under the uniform law on `[-pi, pi]`.
    Dirichlet {
        k: usize,
    },
    Haar {
        level: u32,
    },
}

impl Kernel for DiagKernel {
    fn order(&self) -> usize {
        2
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        let (x, y) = (args[0][0], args[1][0]);
        match self.family {
            DiagKernelKind::Dirichlet { k } => dirichlet_ratio(k, x - y),
            DiagKernelKind::Haar { level } => {
                if haar_cell(level, x) == haar_cell(level, y) {
                    (1u64 << level) as f64
                } else {
                    0.0
                }
            }
        }
    }
    fn name(&self) -> String {
        match self.family {
            DiagKernelKind::Dirichlet { k } => format!("dirichlet(k={k})"),
            DiagKernelKind::Haar { level } => format!("haar(I={level})"),
        }
    }
    fn size_dependent(&self) -> bool {
        true
    }
}

/// One member of a family at sample size `n`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DiagSetup {
    pub family: DiagFamily,
    pub n: usize,
    /// `k` for Dirichlet, `I` for Haar.
    pub parameter: usize,
    pub k_n: f64,
    pub partition: PartitionSpec,
}

impl DiagSetup {
    pub fn new(family: DiagFamily, n: usize) -> Result<Self> {
        if n < 4 {
            return invalid("sample size must be at least 4");
        }
        match &family {
            DiagFamily::Dirichlet { kn, cell_c, cell_a } => {
                let target = kn.target(n).ceil().max(1.0) as usize;
                let k = target.saturating_sub(1).div_ceil(2);
                let delta_target = cell_c * (n as f64).powf(-cell_a);
                let m = ((2.0 * PI / delta_target).ceil() as usize).max(1);
                let edges: Vec<f64> = (0..=m).map(|i| -PI + 2.0 * PI * i as f64 / m as f64).collect();
                let measures = vec![1.0 / m as f64; m];
                Ok(DiagSetup { family, n, parameter: k, k_n: (2 * k + 1) as f64, partition: PartitionSpec::new(edges, measures)? })
            }
            DiagFamily::Haar { kn, slope } => {
                if slope.abs() >= 1.0 {
                    return invalid("Haar tilt must have |slope| < 1 to stay bounded away from zero");
                }
                let level = kn.target(n).max(1.0).log2().round() as u32;
                if level > 24 {
                    return invalid(format!("Haar level {level} too fine"));
                }
                let cells = 1usize << level;
                let cell_mu: Vec<f64> =
                    (0..cells).map(|c| tilt_mass(*slope, c as f64 / cells as f64, (c + 1) as f64 / cells as f64)).collect();
                let blocks = ((n as f64).powf(0.75).round() as usize).clamp(1, cells);
                let bounds: Vec<usize> = (0..=blocks).map(|b| (b as f64 * cells as f64 / blocks as f64).round() as usize).collect();
                let edges: Vec<f64> = bounds.iter().map(|&b| b as f64 / cells as f64).collect();
                let measures: Vec<f64> = bounds.windows(2).map(|w| cell_mu[w[0]..w[1]].iter().sum()).collect();
                let k_n = cell_mu.iter().map(|m| m * m).sum::<f64>() * (cells as f64).powi(2);
                Ok(DiagSetup { family, n, parameter: level as usize, k_n, partition: PartitionSpec::new(edges, measures)? })
            }
        }
    }

    pub fn kernel(&self) -> KernelSpec {
        Arc::new(self.diag_kernel())
    }

    fn diag_kernel(&self) -> DiagKernel {
        let family = match self.family {
            DiagFamily::Dirichlet { .. } => DiagKernelKind::Dirichlet { k: self.parameter },
            DiagFamily::Haar { .. } => DiagKernelKind::Haar { level: self.parameter as u32 },
        };
        DiagKernel { family }
    }

    pub fn distribution(&self) -> Result<DistributionSpec> {
        match self.family {
            DiagFamily::Dirichlet { .. } => Ok(DistributionSpec::BoxUniform(BoxRegion { lo: vec![-PI], hi: vec![PI] })),
            DiagFamily::Haar { slope, .. } => {
                if slope == 0.0 {
                    Ok(DistributionSpec::cube(1))
                } else {
                    Ok(DistributionSpec::Density(DensitySpec::tilt(BoxRegion::unit(1), vec![slope])?))
                }
            }
        }
    }

    fn haar_cells(&self) -> Vec<f64> {
        let DiagFamily::Haar { slope, .. } = self.family else { return Vec::new() };
        let cells = 1usize << self.parameter;
        (0..cells).map(|c| tilt_mass(slope, c as f64 / cells as f64, (c + 1) as f64 / cells as f64)).collect()
    }

    /// `E K(X_1, X_2)`.
    pub fn mean_kernel(&self) -> f64 {
        match self.family {
            DiagFamily::Dirichlet { .. } => 1.0,
            DiagFamily::Haar { .. } => {
                let m = (1u64 << self.parameter) as f64;
                self.haar_cells().iter().map(|c| c * c).sum::<f64>() * m
            }
        }
    }

    /// `Var g_1(X)` with `g_1(x) = E K(x, X)`.
    pub fn var_g1(&self) -> f64 {
        match self.family {
            DiagFamily::Dirichlet { .. } => 0.0,
            DiagFamily::Haar { .. } => {
                let m = (1u64 << self.parameter) as f64;
                let cells = self.haar_cells();
                let second: f64 = cells.iter().map(|c| c * (m * c).powi(2)).sum();
                (second - self.mean_kernel().powi(2)).max(0.0)
            }
        }
    }

    /// `Var U_n(1) = C(n,2) (2 (n-2) Var g_1 + Var K)`.
    pub fn sigma2(&self) -> f64 {
        let n = self.n as f64;
        binom(self.n, 2) * (2.0 * (n - 2.0) * self.var_g1() + self.k_n - self.mean_kernel().powi(2))
    }

    /// `k_n = E K^2` by Simpson quadrature of the closed form (Haar is piecewise constant and exact).
    pub fn k_n_quadrature(&self) -> f64 {
        match self.family {
            DiagFamily::Dirichlet { .. } => {
                let k = self.parameter;
                // K depends on x - y and is 2 pi periodic
                simpson(|u| dirichlet_ratio(k, u).powi(2), -PI, PI).0 / (2.0 * PI)
            }
            DiagFamily::Haar { .. } => self.k_n,
        }
    }

    /// `int int_{X_m x X_m} K^2 dmu dmu` for every cell.
    pub fn block_masses(&self) -> Vec<f64> {
        match self.family {
            DiagFamily::Dirichlet { .. } => {
                let k = self.parameter;
                let delta = self.partition.edges[1] - self.partition.edges[0];
                let one = 2.0 * simpson(|u| (delta - u) * dirichlet_ratio(k, u).powi(2), 0.0, delta).0 / (4.0 * PI * PI);
                vec![one; self.partition.len()]
            }
            DiagFamily::Haar { .. } => {
                let m = (1u64 << self.parameter) as f64;
                let cells = self.haar_cells();
                let total = cells.len() as f64;
                self.partition
                    .edges
                    .windows(2)
                    .map(|w| {
                        let (a, b) = ((w[0] * total).round() as usize, (w[1] * total).round() as usize);
                        cells[a..b].iter().map(|x| (x * m).powi(2)).sum()
                    })
                    .collect()
            }
        }
    }

    /// `sup |K|`.
    pub fn sup_norm(&self) -> f64 {
        match self.family {
            DiagFamily::Dirichlet { .. } => (2 * self.parameter + 1) as f64,
            DiagFamily::Haar { .. } => (1u64 << self.parameter) as f64,
        }
    }

    /// Operator norm known in closed form: 1 for the uniform projections, `max_C 2^I mu(C)` for tilted Haar.
    pub fn operator_norm(&self) -> f64 {
        match self.family {
            DiagFamily::Dirichlet { .. } => 1.0,
            DiagFamily::Haar { .. } => {
                let m = (1u64 << self.parameter) as f64;
                self.haar_cells().iter().map(|c| c * m).fold(0.0, f64::max)
            }
        }
    }

    /// `Var R_n(1) / sigma_n^2` for the off-block part `B_n = K 1{Q_n^c}`.
    pub fn remainder_ratio(&self) -> f64 {
        let (mean_b, second_b, g1b2) = match self.family {
            DiagFamily::Dirichlet { .. } => {
                let k = self.parameter;
                let m = self.partition.len() as f64;
                let delta = self.partition.edges[1] - self.partition.edges[0];
                let blocks: f64 = self.block_masses().iter().sum();
                let mean_a = m * 2.0 * simpson(|u| (delta - u) * dirichlet_ratio(k, u), 0.0, delta).0 / (4.0 * PI * PI);
                // g_1^B(x) = 1 - h(a) where a is the offset of x inside its cell
                let h = |a: f64| (dirichlet_primitive(k, delta - a) - dirichlet_primitive(k, -a)) / (2.0 * PI);
                let g1b2 = simpson(|a| (1.0 - h(a)).powi(2), 0.0, delta).0 / delta;
                (1.0 - mean_a, self.k_n - blocks, g1b2)
            }
            DiagFamily::Haar { .. } => (0.0, 0.0, 0.0),
        };
        let n = self.n as f64;
        let var = binom(self.n, 2) * (2.0 * (n - 2.0) * (g1b2 - mean_b * mean_b).max(0.0) + (second_b - mean_b * mean_b).max(0.0));
        var / self.sigma2()
    }

    /// Discretization size used for the power-iteration spot check.
    pub fn spot_points(&self) -> usize {
        match self.family {
            DiagFamily::Dirichlet { .. } => 4 * (2 * self.parameter + 2),
            DiagFamily::Haar { .. } => 4usize << self.parameter.min(20),
        }
    }

    /// Power iteration on a midpoint discretization with `points` nodes; `None` when
    /// the discretization would be coarser than the kernel.
    pub fn operator_norm_power(&self, points: usize, iterations: usize) -> Option<f64> {
        let dist = self.distribution().ok()?;
        let region = dist.support()?;
        let needed = match self.family {
            DiagFamily::Dirichlet { .. } => 2 * self.parameter + 2,
            DiagFamily::Haar { .. } => 1 << self.parameter,
        };
        if points < needed || points * points > 64_000_000 {
            return None;
        }
        let (lo, hi) = (region.lo[0], region.hi[0]);
        let h = (hi - lo) / points as f64;
        let xs: Vec<f64> = (0..points).map(|i| lo + (i as f64 + 0.5) * h).collect();
        let w: Vec<f64> = xs.iter().map(|&x| dist.density(&[x]).unwrap_or(0.0) * h).collect();
        let k = self.diag_kernel();
        let matrix: Vec<f64> = (0..points * points).map(|ij| k.eval(&[&[xs[ij / points]], &[xs[ij % points]]], self.n)).collect();
        let norm = |f: &[f64]| f.iter().zip(&w).map(|(a, b)| a * a * b).sum::<f64>().sqrt();
        let mut f: Vec<f64> = (0..points).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let g: Vec<f64> = (0..points)
                .map(|i| matrix[i * points..(i + 1) * points].iter().zip(f.iter().zip(&w)).map(|(kv, (fv, wv))| kv * fv * wv).sum())
                .collect();
            let (nf, ng) = (norm(&f), norm(&g));
            lambda = ng / nf;
            f = g.iter().map(|v| v / ng).collect();
        }
        Some(lambda)
    }
}

/// `int_0^u (1 + 2 sum_j cos(j v)) dv`.
pub fn dirichlet_primitive(k: usize, u: f64) -> f64 {
    u + 2.0 * (1..=k).map(|j| (j as f64 * u).sin() / j as f64).sum::<f64>()
}

/// Mass of `[a, b]` under the density `1 + slope (2x - 1)` on `[0, 1]`.
fn tilt_mass(slope: f64, a: f64, b: f64) -> f64 {
    (b - a) + slope * ((b * b - b) - (a * a - a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Trend {
    /// Tends to zero: strictly decreasing along the grid.
    Decreasing,
    /// Tends to infinity: strictly increasing.
    Increasing,
    /// Bounded: never grows by more than the tolerance.
    NonIncreasing,
    /// Bounded away from zero: never shrinks by more than the tolerance.
    NonDecreasing,
    /// `|1 - value|` strictly decreasing, or within the trend tolerance of 1 throughout.
    ToOne,
}

/// Relative slack allowed in the non-strict trends (cell counts are rounded up).
pub const TREND_TOL: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrendCheck {
    pub id: String,
    pub expected: Trend,
    pub ns: Vec<usize>,
    pub values: Vec<f64>,
    pub fit: RateFit,
    pub pass: bool,
}

impl TrendCheck {
    pub fn new(id: &str, expected: Trend, ns: &[usize], values: Vec<f64>) -> Self {
        let pairs = values.windows(2);
        let pass = values.iter().all(|v| v.is_finite())
            && match expected {
                Trend::Decreasing => pairs.clone().all(|w| w[1] < w[0]),
                Trend::Increasing => pairs.clone().all(|w| w[1] > w[0]),
                Trend::NonIncreasing => pairs.clone().all(|w| w[1] <= w[0] * (1.0 + TREND_TOL) + 1e-15),
                Trend::NonDecreasing => values.iter().all(|v| *v > 0.0) && pairs.clone().all(|w| w[1] >= w[0] * (1.0 - TREND_TOL)),
                Trend::ToOne => {
                    values.iter().all(|v| (1.0 - v).abs() < TREND_TOL) || pairs.clone().all(|w| (1.0 - w[1]).abs() < (1.0 - w[0]).abs())
                }
            };
        let fit = fit_rate(ns, &values.iter().map(|v| v.abs()).collect::<Vec<_>>());
        TrendCheck { id: id.into(), expected, ns: ns.to_vec(), values, fit, pass }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DiagReport {
    pub ns: Vec<usize>,
    pub k_n: Vec<f64>,
    pub checks: Vec<TrendCheck>,
    /// Power-iteration estimate of the operator norm at the first size where it is affordable.
    pub operator_norm_spot: Option<f64>,
    pub pass: bool,
}

impl DiagReport {
    pub fn check(&self, id: &str) -> Option<&TrendCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check_id,n,value\n");
        for c in &self.checks {
            for (n, v) in c.ns.iter().zip(&c.values) {
                s.push_str(&format!("{},{},{:e}\n", c.id, n, v));
            }
        }
        s
    }
}

fn setups(family: &DiagFamily, ns: &[usize]) -> Result<Vec<DiagSetup>> {
    if ns.len() < 2 {
        return invalid("trend checks need at least two sizes");
    }
    ns.iter().map(|&n| family.setup(n)).collect()
}

fn finish(ns: &[usize], ss: &[DiagSetup], checks: Vec<TrendCheck>, spot: Option<f64>) -> DiagReport {
    let pass = checks.iter().all(|c| c.pass);
    DiagReport { ns: ns.to_vec(), k_n: ss.iter().map(|s| s.k_n).collect(), checks, operator_norm_spot: spot, pass }
}

/// The one-dimensional CLT conditions and the variance asymptotics along `ns`.
pub fn check_vdv_conditions(family: &DiagFamily, ns: &[usize]) -> Result<DiagReport> {
    let ss = setups(family, ns)?;
    let col = |f: &dyn Fn(&DiagSetup) -> f64| ss.iter().map(f).collect::<Vec<f64>>();
    let checks = vec![
        TrendCheck::new("ratio.k_n/n", Trend::Increasing, ns, col(&|s| s.k_n / s.n as f64)),
        TrendCheck::new("op.norm", Trend::NonIncreasing, ns, col(&|s| s.operator_norm())),
        TrendCheck::new("sup.K/k_n", Trend::NonIncreasing, ns, col(&|s| s.sup_norm() / s.k_n)),
        TrendCheck::new("part.sum_blocks/k_n", Trend::ToOne, ns, col(&|s| s.block_masses().iter().sum::<f64>() / s.k_n)),
        TrendCheck::new(
            "part.max_block/k_n",
            Trend::Decreasing,
            ns,
            col(&|s| s.block_masses().iter().copied().fold(0.0, f64::max) / s.k_n),
        ),
        TrendCheck::new("part.max_mu*k_n/n", Trend::Decreasing, ns, col(&|s| s.partition.max_measure() * s.k_n / s.n as f64)),
        TrendCheck::new("part.n*min_mu", Trend::NonDecreasing, ns, col(&|s| s.n as f64 * s.partition.min_measure())),
        TrendCheck::new("sigma.2sigma2/(n^2 k_n)", Trend::ToOne, ns, col(&|s| 2.0 * s.sigma2() / ((s.n as f64).powi(2) * s.k_n))),
    ];
    let spot = ss.iter().find_map(|s| s.operator_norm_power(s.spot_points(), 60));
    Ok(finish(ns, &ss, checks, spot))
}

/// Exponents of the functional conditions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FunctionalExponents {
    pub eps1: f64,
    pub eps2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for FunctionalExponents {
    fn default() -> Self {
        FunctionalExponents { eps1: 0.05, eps2: 0.05, alpha1: 0.25, alpha2: 0.25 }
    }
}

/// The four extra conditions of the functional statement plus the remainder variance.
pub fn check_fvdv_extra(family: &DiagFamily, ns: &[usize], e: FunctionalExponents) -> Result<DiagReport> {
    let ss = setups(family, ns)?;
    let col = |f: &dyn Fn(&DiagSetup) -> f64| ss.iter().map(f).collect::<Vec<f64>>();
    let nf = |s: &DiagSetup| s.n as f64;
    let c71a = TrendCheck::new(
        "fn.max_mu*k_n/n^(1-eps2)",
        Trend::NonIncreasing,
        ns,
        col(&|s| s.partition.max_measure() * s.k_n / nf(s).powf(1.0 - e.eps2)),
    );
    let c71b =
        TrendCheck::new("fn.n^(1-eps2)*min_mu", Trend::NonDecreasing, ns, col(&|s| nf(s).powf(1.0 - e.eps2) * s.partition.min_measure()));
    let either = TrendCheck {
        id: "fn.eps2_either".into(),
        expected: Trend::NonIncreasing,
        ns: ns.to_vec(),
        values: c71a.values.clone(),
        fit: c71a.fit,
        pass: c71a.pass || c71b.pass,
    };
    let checks = vec![
        TrendCheck::new("fn.n^(1/2+eps1)*max_mu", Trend::NonIncreasing, ns, col(&|s| nf(s).powf(0.5 + e.eps1) * s.partition.max_measure())),
        either,
        TrendCheck::new("fn.n^(1+alpha1)/k_n", Trend::NonIncreasing, ns, col(&|s| nf(s).powf(1.0 + e.alpha1) / s.k_n)),
        TrendCheck::new(
            "fn.n^alpha2*offblock/k_n",
            Trend::NonIncreasing,
            ns,
            col(&|s| nf(s).powf(e.alpha2) * (s.k_n - s.block_masses().iter().sum::<f64>()).max(0.0) / s.k_n),
        ),
        TrendCheck::new("fn.remainder_var_ratio", Trend::Decreasing, ns, col(&|s| s.remainder_ratio())),
    ];
    let mut rep = finish(ns, &ss, checks, None);
    // the two halves of the either-or condition are reported but not gated individually
    rep.checks.push(TrendCheck { pass: true, ..c71a });
    rep.checks.push(TrendCheck { pass: true, ..c71b });
    Ok(rep)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DiagEnsemble {
    pub setup: DiagSetup,
    pub grid: Vec<f64>,
    pub sigma2: f64,
    pub mean_kernel: f64,
    #[serde(skip)]
    pub paths: Vec<Vec<f64>>,
    pub cov: CovEstimate,
    /// `max |cov - (s ^ t)^2|` over the grid.
    pub max_cov_deviation: f64,
    pub ks_endpoint: KsResult,
    pub var_endpoint: f64,
}

/// Simulates `W_n(t) = (sum_{i<j<=nt} K(X_i, X_j) - C(nt, 2) E K) / sigma_n` and compares
/// the ensemble with `B(t^2)`. `grid` must contain 1.
pub fn run_diag_fclt(setup: &DiagSetup, replicates: usize, grid: &[f64], stream: RngStream, exec: Execution) -> Result<DiagEnsemble> {
    let end = grid.iter().position(|&t| (t - 1.0).abs() < 1e-12).ok_or_else(|| Error::InvalidArgument("grid must contain t = 1".into()))?;
    let dist = setup.distribution()?;
    let kernel = setup.kernel();
    let sigma2 = setup.sigma2();
    let mean_kernel = setup.mean_kernel();
    let norm = Normalizer::new(2, mean_kernel, sigma2)?;
    let paths = simulate_normalized_paths(kernel.as_ref(), &dist, setup.n, grid, &norm, replicates, stream, exec)?;
    let cov = empirical_cov(&paths)?;
    let max_cov_deviation = max_cov_deviation(&cov, grid, |s, t| s.min(t).powi(2));
    let endpoint: Vec<f64> = paths.iter().map(|p| p[end]).collect();
    let ks_endpoint = ks_test(&endpoint, normal_cdf)?;
    let var_endpoint = cov.matrix[end][end];
    Ok(DiagEnsemble {
        setup: setup.clone(),
        grid: grid.to_vec(),
        sigma2,
        mean_kernel,
        paths,
        cov,
        max_cov_deviation,
        ks_endpoint,
        var_endpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `sum_{|m| <= 2k} (2k+1-|m|) int (delta-|u|) e^{imu} du`, the spectral form of a block mass.
    fn spectral_block(k: usize, delta: f64) -> f64 {
        let kn = (2 * k + 1) as f64;
        let mut s = kn * delta * delta;
        for m in 1..=2 * k {
            let mf = m as f64;
            s += 2.0 * (kn - mf) * 2.0 * (1.0 - (mf * delta).cos()) / (mf * mf);
        }
        s / (4.0 * PI * PI)
    }

    #[test]
    fn dirichlet_closed_form() {
        let k = 7;
        let d = dirichlet_kernel(k);
        assert!((d(0.4, 0.4) - 15.0 / (2.0 * PI)).abs() < 1e-12);
        for (x, y) in [(0.3, -1.2), (2.0, 0.1), (-3.0, 3.0)] {
            assert!((d(x, y) - d(y, x)).abs() < 1e-12);
            let series: f64 = 1.0 + 2.0 * (1..=k).map(|j| (j as f64 * (x - y)).cos()).sum::<f64>();
            assert!((d(x, y) * 2.0 * PI - series).abs() < 1e-10);
        }
        // Lebesgue L2 norm over the square: 2k + 1
        let (v, _) = simpson(|u| (2.0 * PI - u.abs()) * d(u, 0.0).powi(2), -2.0 * PI, 2.0 * PI);
        assert!((v - 15.0).abs() < 1e-6);
    }

    #[test]
    fn k_n_two_ways() {
        let s = DiagFamily::dirichlet_default().setup(64).unwrap();
        assert_eq!(s.k_n, 513.0);
        assert!((s.k_n_quadrature() - s.k_n).abs() < 1e-6 * s.k_n);
        let delta = s.partition.edges[1] - s.partition.edges[0];
        let b = s.block_masses()[0];
        assert!((b - spectral_block(s.parameter, delta)).abs() < 1e-7 * b);
    }

    fn haar_basis_sum(level: u32, x: f64, y: f64) -> f64 {
        let mother = |u: f64| {
            if (0.0..0.5).contains(&u) {
                1.0
            } else if (0.5..1.0).contains(&u) {
                -1.0
            } else {
                0.0
            }
        };
        let mut s = 1.0;
        for i in 0..level {
            let sc = (1u64 << i) as f64;
            for j in 0..(1u64 << i) {
                s += sc * mother(sc * x - j as f64) * mother(sc * y - j as f64);
            }
        }
        s
    }

    #[test]
    fn haar_matches_basis_expansion() {
        let k = haar_kernel(4);
        let mut rng = RngStream::new(2, 0).rng();
        use rand::Rng;
        for _ in 0..200 {
            let (x, y): (f64, f64) = (rng.gen(), rng.gen());
            assert!((k(x, y) - haar_basis_sum(4, x, y)).abs() < 1e-12);
        }
        assert_eq!(k(0.01, 0.02), 16.0);
        assert_eq!(k(0.01, 0.9), 0.0);
        // reproduces constants
        let (v, _) = simpson(|y| k(0.3, y), 0.0, 1.0);
        assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn projection_idempotence() {
        let k = 5;
        let d = |u: f64| dirichlet_ratio(k, u);
        for (x, y) in [(0.2, 1.1), (-2.0, 2.5)] {
            let (v, _) = simpson(|z| d(x - z) * d(z - y), -PI, PI);
            assert!((v / (2.0 * PI) - d(x - y)).abs() < 1e-8);
        }
    }

    #[test]
    fn dirichlet_conditions_trend() {
        let ns = [64, 128, 256];
        let rep = check_vdv_conditions(&DiagFamily::dirichlet_default(), &ns).unwrap();
        assert!(rep.pass, "{:#?}", rep.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
        let spot = rep.operator_norm_spot.unwrap();
        assert!((spot - 1.0).abs() < 1e-6, "{spot}");
        let f = check_fvdv_extra(&DiagFamily::dirichlet_default(), &ns, FunctionalExponents::default()).unwrap();
        assert!(f.pass, "{:#?}", f.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
    }

    #[test]
    fn n_log_n_fails_alpha1() {
        let fam = DiagFamily::Dirichlet { kn: KnRule::NLogN { c: 1.0 }, cell_c: 1.0, cell_a: 0.6 };
        let f = check_fvdv_extra(&fam, &[64, 256, 1024, 4096], FunctionalExponents::default()).unwrap();
        assert!(!f.check("fn.n^(1+alpha1)/k_n").unwrap().pass);
    }

    #[test]
    fn haar_conditions() {
        let ns = [64, 256, 1024];
        for slope in [0.0, 0.5] {
            let fam = DiagFamily::Haar { kn: KnRule::Power { c: 1.0, exponent: 1.5 }, slope };
            let rep = check_vdv_conditions(&fam, &ns).unwrap();
            let failing: Vec<_> = rep.checks.iter().filter(|c| !c.pass).collect();
            assert!(rep.pass, "slope {slope}: {failing:#?}");
            let f = check_fvdv_extra(&fam, &ns, FunctionalExponents::default()).unwrap();
            assert!(f.checks.iter().filter(|c| c.id != "fn.remainder_var_ratio").all(|c| c.pass));
        }
    }
}

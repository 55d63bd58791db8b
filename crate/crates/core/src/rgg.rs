//! Random geometric graphs: induced motif kernels, incremental subgraph counts,
//! scaling regimes, the limiting variance constants and the edge changepoint statistic.

use std::collections::HashMap;

use gauss_quad::GaussLegendre;
use rand::Rng;

use crate::combin::{binom, factorial, permutations};
use crate::error::{invalid, Error, Result};
use crate::limit_processes::{psi_weights, LimitSpec};
use crate::parallel::{map_indexed, Execution};
use crate::sample_spaces::{BoxRegion, DistributionSpec, RngStream, Sample};
use crate::ustat_core::{default_grid, dist2, mean_se, prefix_len, Kernel, PowerRule, SequentialPath};

pub const MAX_MOTIF_ORDER: usize = 4;

fn pair_index(p: usize, i: usize, j: usize) -> usize {
    let (i, j) = (i.min(j), i.max(j));
    // row-major position of (i, j) among the pairs of 0..p
    i * (2 * p - i - 1) / 2 + (j - i - 1)
}

fn relabel(p: usize, mask: u8, perm: &[usize]) -> u8 {
    let mut out = 0u8;
    for i in 0..p {
        for j in i + 1..p {
            if mask >> pair_index(p, i, j) & 1 == 1 {
                out |= 1 << pair_index(p, perm[i], perm[j]);
            }
        }
    }
    out
}

/// A connected graph on `p` vertices, stored as the smallest adjacency mask over relabelings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct MotifPattern {
    pub p: usize,
    pub adjacency: u8,
    pub connected: bool,
}

impl MotifPattern {
    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if !(2..=MAX_MOTIF_ORDER).contains(&p) {
            return invalid(format!("motifs need 2..={MAX_MOTIF_ORDER} vertices, got {p}"));
        }
        let mut mask = 0u8;
        for &(i, j) in edges {
            if i == j || i >= p || j >= p {
                return invalid(format!("bad motif edge ({i},{j}) for {p} vertices"));
            }
            mask |= 1 << pair_index(p, i, j);
        }
        if !mask_connected(p, mask) {
            return invalid("motif must be connected");
        }
        let adjacency = permutations(p).iter().map(|pi| relabel(p, mask, pi)).min().unwrap_or(mask);
        Ok(MotifPattern { p, adjacency, connected: true })
    }

    pub fn edge() -> Self {
        Self::from_edges(2, &[(0, 1)]).expect("edge")
    }

    pub fn triangle() -> Self {
        Self::clique(3)
    }

    pub fn path(p: usize) -> Result<Self> {
        let e: Vec<_> = (1..p).map(|i| (i - 1, i)).collect();
        Self::from_edges(p, &e)
    }

    pub fn star(p: usize) -> Result<Self> {
        let e: Vec<_> = (1..p).map(|i| (0, i)).collect();
        Self::from_edges(p, &e)
    }

    pub fn clique(p: usize) -> Self {
        let mut e = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                e.push((i, j));
            }
        }
        Self::from_edges(p, &e).expect("clique")
    }

    /// Bitset over all masks isomorphic to this motif (masks are below 64).
    pub fn iso_set(&self) -> u64 {
        permutations(self.p).iter().fold(0u64, |acc, pi| acc | 1u64 << relabel(self.p, self.adjacency, pi))
    }

    pub fn edge_count(&self) -> u32 {
        self.adjacency.count_ones()
    }
}

fn mask_connected(p: usize, mask: u8) -> bool {
    let mut seen = 1u8;
    let mut frontier = vec![0usize];
    while let Some(v) = frontier.pop() {
        for u in 0..p {
            if u != v && seen >> u & 1 == 0 && mask >> pair_index(p, u, v) & 1 == 1 {
                seen |= 1 << u;
                frontier.push(u);
            }
        }
    }
    seen.count_ones() as usize == p
}

/// Adjacency mask of the threshold graph on `points` (strict `0 < |x - y| < r`).
pub fn induced_mask(points: &[&[f64]], r2: f64) -> u8 {
    let p = points.len();
    let mut m = 0u8;
    for i in 0..p {
        for j in i + 1..p {
            let d = dist2(points[i], points[j]);
            if d > 0.0 && d < r2 {
                m |= 1 << pair_index(p, i, j);
            }
        }
    }
    m
}

/// `1` when the threshold graph on the arguments is isomorphic to the motif.
#[derive(Debug, Clone)]
pub struct MotifKernel {
    pub motif: MotifPattern,
    pub dim: usize,
    pub volume_rule: PowerRule,
    iso: u64,
}

impl MotifKernel {
    /// Radius `t_n` with `t_n^d = rule(n)`.
    pub fn new(motif: MotifPattern, dim: usize, volume_rule: PowerRule) -> Self {
        MotifKernel { motif, dim, volume_rule, iso: motif.iso_set() }
    }

    pub fn fixed_radius(motif: MotifPattern, dim: usize, radius: f64) -> Self {
        Self::new(motif, dim, PowerRule { c: radius.powi(dim as i32), a: 0.0 })
    }

    pub fn radius(&self, n: usize) -> f64 {
        self.volume_rule.at(n).powf(1.0 / self.dim as f64)
    }

    pub fn matches(&self, mask: u8) -> bool {
        self.iso >> mask & 1 == 1
    }
}

impl Kernel for MotifKernel {
    fn order(&self) -> usize {
        self.motif.p
    }
    fn eval(&self, args: &[&[f64]], n: usize) -> f64 {
        let r = self.radius(n);
        if self.matches(induced_mask(args, r * r)) {
            1.0
        } else {
            0.0
        }
    }
    fn name(&self) -> String {
        format!("motif(p={},mask={:#x})", self.motif.p, self.motif.adjacency)
    }
    fn size_dependent(&self) -> bool {
        self.volume_rule.a != 0.0
    }
}

/// Threshold graph on a sample; neighbor lists are sorted.
#[derive(Debug, Clone)]
pub struct GeometricGraph {
    pub points: Sample,
    pub radius: f64,
    pub adjacency: Vec<Vec<usize>>,
}

impl GeometricGraph {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }
}

/// Builds the graph with uniform buckets of side `radius`.
pub fn build_graph(points: &Sample, radius: f64) -> Result<GeometricGraph> {
    if !(radius > 0.0) || !radius.is_finite() {
        return invalid(format!("radius must be positive, got {radius}"));
    }
    let n = points.len();
    let d = points.dim;
    let cell = |x: &[f64]| -> Vec<i64> { x.iter().map(|c| (c / radius).floor() as i64).collect() };
    let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for i in 0..n {
        buckets.entry(cell(points.point(i))).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = {
        let mut out = vec![Vec::new()];
        for _ in 0..d {
            out = out
                .into_iter()
                .flat_map(|o| {
                    (-1..=1).map(move |s| {
                        let mut v = o.clone();
                        v.push(s);
                        v
                    })
                })
                .collect();
        }
        out
    };
    let r2 = radius * radius;
    let mut adjacency = vec![Vec::new(); n];
    let mut key = vec![0i64; d];
    for i in 0..n {
        let x = points.point(i);
        let c = cell(x);
        for o in &offsets {
            for k in 0..d {
                key[k] = c[k] + o[k];
            }
            if let Some(b) = buckets.get(&key) {
                for &j in b {
                    if j != i {
                        let dd = dist2(x, points.point(j));
                        if dd > 0.0 && dd < r2 {
                            adjacency[i].push(j);
                        }
                    }
                }
            }
        }
        adjacency[i].sort_unstable();
    }
    Ok(GeometricGraph { points: points.clone(), radius, adjacency })
}

/// Quadratic reference for [`build_graph`].
pub fn brute_adjacency(points: &Sample, radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let r2 = radius * radius;
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let d = dist2(points.point(i), points.point(j));
                    j != i && d > 0.0 && d < r2
                })
                .collect()
        })
        .collect()
}

fn subset_mask(g: &GeometricGraph, vs: &[usize]) -> u8 {
    let p = vs.len();
    let mut m = 0u8;
    for i in 0..p {
        for j in i + 1..p {
            if g.adjacent(vs[i], vs[j]) {
                m |= 1 << pair_index(p, i, j);
            }
        }
    }
    m
}

/// Connected vertex sets of size `p` whose largest element is `v` (enumeration
/// of the exclusive-neighborhood kind, so each set is visited once).
fn count_rooted(g: &GeometricGraph, v: usize, p: usize, iso: u64) -> u64 {
    fn extend(g: &GeometricGraph, v: usize, p: usize, iso: u64, sub: &mut Vec<usize>, mut ext: Vec<usize>) -> u64 {
        if sub.len() == p {
            return iso >> subset_mask(g, sub) & 1;
        }
        let mut total = 0;
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for &u in &g.adjacency[w] {
                if u >= v || sub.contains(&u) || u == w || next.contains(&u) {
                    continue;
                }
                if sub.iter().any(|&s| g.adjacent(s, u)) {
                    continue;
                }
                next.push(u);
            }
            sub.push(w);
            total += extend(g, v, p, iso, sub, next);
            sub.pop();
        }
        total
    }
    let ext: Vec<usize> = g.adjacency[v].iter().copied().filter(|&u| u < v).collect();
    let mut sub = vec![v];
    extend(g, v, p, iso, &mut sub, ext)
}

/// `G_k(motif)` for every prefix length `k = 0..=n`.
pub fn count_motifs_full(g: &GeometricGraph, motif: &MotifPattern) -> Result<Vec<f64>> {
    if motif.p > MAX_MOTIF_ORDER {
        return invalid(format!("motif order {} exceeds {MAX_MOTIF_ORDER}", motif.p));
    }
    let n = g.len();
    let iso = motif.iso_set();
    let mut out = vec![0.0; n + 1];
    let mut running = 0u64;
    for v in 0..n {
        running +=
            if motif.p == 2 { g.adjacency[v].iter().take_while(|&&u| u < v).count() as u64 } else { count_rooted(g, v, motif.p, iso) };
        out[v + 1] = running as f64;
    }
    Ok(out)
}

/// Sequential motif counts recorded on `grid` (defaults to [`default_grid`]).
pub fn count_motifs_sequential(g: &GeometricGraph, motif: &MotifPattern, grid: Option<&[f64]>) -> Result<SequentialPath> {
    let n = g.len();
    let full = count_motifs_full(g, motif)?;
    let times = grid.map(|t| t.to_vec()).unwrap_or_else(|| default_grid(n));
    let values = times.iter().map(|&t| full[prefix_len(n, t)]).collect();
    Ok(SequentialPath { n, times, values })
}

/// Raw count paths of independent replicates on a common grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RggEnsemble {
    pub n: usize,
    pub radius: f64,
    pub grid: Vec<f64>,
    pub counts: Vec<Vec<f64>>,
}

impl RggEnsemble {
    /// Final counts `G_n`.
    pub fn totals(&self) -> Vec<f64> {
        self.counts.iter().map(|c| *c.last().unwrap_or(&0.0)).collect()
    }

    /// `(G(floor(nt)) - C(floor(nt), p) g0) / sigma` per replicate.
    pub fn normalized(&self, p: usize, g0: f64, sigma: f64) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|c| self.grid.iter().zip(c).map(|(&t, &v)| (v - binom(prefix_len(self.n, t), p) * g0) / sigma).collect())
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_rgg(
    motif: &MotifPattern,
    dist: &DistributionSpec,
    radius: f64,
    n: usize,
    grid: &[f64],
    replicates: usize,
    stream: RngStream,
    exec: Execution,
) -> Result<RggEnsemble> {
    let counts = map_indexed(exec, replicates, |r| -> Result<Vec<f64>> {
        let mut rng = stream.child(r as u64).rng();
        let sample = dist.sample(n, &mut rng)?;
        let g = build_graph(&sample, radius)?;
        Ok(count_motifs_sequential(&g, motif, Some(grid))?.values)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(RggEnsemble { n, radius, grid: grid.to_vec(), counts })
}

/// Monte Carlo estimates of `d_1..d_p` and `nu` with standard errors.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DkNu {
    pub d: Vec<f64>,
    pub d_se: Vec<f64>,
    pub nu: f64,
    pub nu_se: f64,
    /// Set when no sampled configuration realized the motif.
    pub flagged: bool,
}

fn box_draw(rng: &mut impl Rng, reach: f64, out: &mut [f64]) {
    for c in out.iter_mut() {
        *c = rng.gen_range(-reach..reach);
    }
}

/// `int f^j dx = E f(X)^(j-1)` for `j = 1..=2p`, by sampling from `dist`.
fn density_powers(dist: &DistributionSpec, top: usize, m: usize, stream: RngStream) -> Result<Vec<(f64, f64)>> {
    let mut rng = stream.rng();
    let d = dist.dim();
    let mut x = vec![0.0; d];
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(m); top + 1];
    for _ in 0..m {
        dist.draw_into(&mut rng, &mut x)?;
        let f = dist.density(&x).ok_or_else(|| Error::InvalidArgument("motif constants need a density".into()))?;
        for (j, c) in cols.iter_mut().enumerate() {
            c.push(f.powi(j as i32 - 1));
        }
    }
    Ok(cols.iter().map(|c| if c.is_empty() { (0.0, 0.0) } else { mean_se(c) }).collect())
}

/// Estimates the motif constants by importance sampling the unit-radius kernel in
/// the box `[-(p-1), p-1]^d`, which contains every point reachable from the origin.
pub fn estimate_dk_nu(dist: &DistributionSpec, motif: &MotifPattern, m: usize, stream: RngStream) -> Result<DkNu> {
    let p = motif.p;
    let d = dist.dim();
    if m < 100 {
        return Err(Error::TooFewSamples { got: m, need: 100 });
    }
    let kernel = MotifKernel::fixed_radius(*motif, d, 1.0);
    let reach = (p - 1) as f64;
    let vol = (2.0 * reach).powi(d as i32);
    let powers = density_powers(dist, 2 * p, m, stream.labeled("density"))?;
    let origin = vec![0.0; d];
    let mut buf = vec![0.0; d * (2 * p)];

    let mut rng = stream.labeled("nu").rng();
    let mut hits = Vec::with_capacity(m);
    for _ in 0..m {
        box_draw(&mut rng, reach, &mut buf[..d * (p - 1)]);
        let mut args: Vec<&[f64]> = vec![&origin];
        args.extend(buf[..d * (p - 1)].chunks(d));
        hits.push(kernel.eval(&args, 1) * vol.powi(p as i32 - 1));
    }
    let (i_nu, i_nu_se) = mean_se(&hits);
    let (fp, fp_se) = powers[p];
    let nu = fp * i_nu;
    let nu_se = ((fp * i_nu_se).powi(2) + (i_nu * fp_se).powi(2)).sqrt();

    let mut dk = Vec::with_capacity(p);
    let mut dk_se = Vec::with_capacity(p);
    for k in 1..=p {
        let mut rng = stream.labeled(&format!("d{k}")).rng();
        let shared = k - 1;
        let free = p - k;
        let draws = shared + 2 * free;
        let weight = vol.powi(draws as i32);
        let mut vals = Vec::with_capacity(m);
        for _ in 0..m {
            box_draw(&mut rng, reach, &mut buf[..d * draws]);
            let pts: Vec<&[f64]> = buf[..d * draws].chunks(d).collect();
            let mut a: Vec<&[f64]> = vec![&origin];
            a.extend(&pts[..shared]);
            a.extend(&pts[shared..shared + free]);
            let first = kernel.eval(&a, 1);
            let second = if first == 0.0 {
                0.0
            } else {
                let mut b: Vec<&[f64]> = vec![&origin];
                b.extend(&pts[..shared]);
                b.extend(&pts[shared + free..]);
                kernel.eval(&b, 1)
            };
            vals.push(first * second * weight);
        }
        let (j, j_se) = mean_se(&vals);
        let (f, f_se) = powers[2 * p - k];
        dk.push(f * j);
        dk_se.push(((f * j_se).powi(2) + (j * f_se).powi(2)).sqrt());
    }
    Ok(DkNu { d: dk, d_se: dk_se, nu, nu_se, flagged: nu <= 0.0 })
}

pub fn unit_ball_volume(d: usize) -> f64 {
    std::f64::consts::PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RegimeCase {
    C1,
    C2,
    C3,
    C4,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RegimeParams {
    pub case: RegimeCase,
    pub p: usize,
    pub ns: Vec<usize>,
    pub n_td: Vec<f64>,
    /// Fitted exponent of `n t_n^d` in `n`.
    pub slope: f64,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    /// The extra window the FCLT needs in the sparse and dense-uniform cases.
    pub window_ok: bool,
    pub d: Vec<f64>,
    pub nu: f64,
}

const SLOPE_FLAT: f64 = 0.02;

/// Classifies the radius sequence from `n t_n^d` along `ns`.
pub fn classify_regime(ns: &[usize], rule: PowerRule, p: usize, uniform: bool) -> Result<RegimeParams> {
    if ns.len() < 2 || p < 2 {
        return invalid("classification needs two sizes and p >= 2");
    }
    let n_td: Vec<f64> = ns.iter().map(|&n| n as f64 * rule.at(n)).collect();
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = n_td.iter().map(|v| v.ln()).collect();
    let slope = crate::limit_processes::ols(&xs, &ys).slope;
    // t_n^d ~ n^(slope - 1)
    let a = 1.0 - slope;
    let pf = p as f64;
    let (case, rho, window_ok) = if slope.abs() < SLOPE_FLAT {
        (RegimeCase::C4, Some(*n_td.last().unwrap()), true)
    } else if slope < 0.0 {
        if pf - a * (pf - 1.0) <= 0.0 {
            return invalid("expected subgraph count does not diverge: n^p t_n^(d(p-1)) stays bounded");
        }
        (RegimeCase::C1, None, a < pf / (pf - 1.0))
    } else if uniform {
        (RegimeCase::C2, None, a > 0.5)
    } else {
        (RegimeCase::C3, None, true)
    };
    Ok(RegimeParams { case, p, ns: ns.to_vec(), n_td, slope, rho, lambda: None, window_ok, d: Vec::new(), nu: 0.0 })
}

impl RegimeParams {
    pub fn with_constants(mut self, c: &DkNu) -> Self {
        self.d = c.d.clone();
        self.nu = c.nu;
        self
    }

    pub fn limit_spec(&self) -> Result<LimitSpec> {
        let p = self.p;
        Ok(match self.case {
            RegimeCase::C1 => LimitSpec::TimeChangedBm { p },
            RegimeCase::C2 => LimitSpec::Dense { p, lambda: self.lambda.unwrap_or(f64::INFINITY) },
            RegimeCase::C3 => LimitSpec::Dense { p, lambda: f64::INFINITY },
            RegimeCase::C4 => {
                if self.d.len() != p {
                    return invalid("thermodynamic limit needs d_1..d_p");
                }
                let mut d = self.d.clone();
                // a Monte Carlo d_1 below nu^2 is the uniform case plus noise
                d[0] = d[0].max(self.nu * self.nu);
                LimitSpec::Gamma { alpha2: psi_weights(self.rho.unwrap_or(1.0), &d, self.nu) }
            }
        })
    }
}

/// Limit covariance of `W_n` in the classified case.
pub fn limit_cov_rgg(params: &RegimeParams, s: f64, t: f64) -> Result<f64> {
    Ok(params.limit_spec()?.cov(s, t))
}

/// `sum_k n^(2p-k) / (k! (p-k)!^2) (d_k td^(2p-k-1) - nu^2 td^(2p-2))`.
pub fn variance_leading_sum(p: usize, n: usize, td: f64, d: &[f64], nu: f64) -> f64 {
    let n = n as f64;
    (1..=p)
        .map(|k| {
            let c = n.powi((2 * p - k) as i32) / (factorial(k) * factorial(p - k).powi(2));
            c * (d[k - 1] * td.powi((2 * p - k - 1) as i32) - nu * nu * td.powi((2 * p - 2) as i32))
        })
        .sum()
}

/// The case's asymptotic variance; in the dense-uniform case the lower bound.
pub fn predicted_variance(case: RegimeCase, p: usize, n: usize, td: f64, d: &[f64], nu: f64) -> f64 {
    let nf = n as f64;
    let pi = p as i32;
    match case {
        RegimeCase::C1 => d[p - 1] / factorial(p) * nf.powi(pi) * td.powi(pi - 1),
        RegimeCase::C2 => d[1] / (2.0 * factorial(p - 2).powi(2)) * nf.powi(2 * pi - 2) * td.powi(2 * pi - 3),
        RegimeCase::C3 => (d[0] - nu * nu) / factorial(p - 1).powi(2) * nf.powi(2 * pi - 1) * td.powi(2 * pi - 2),
        RegimeCase::C4 => {
            let rho = nf * td;
            let w: f64 = (1..=p)
                .map(|k| {
                    let dk = d[k - 1] - if k == 1 { nu * nu } else { 0.0 };
                    rho.powi((2 * p - k - 1) as i32) * dk / (factorial(k) * factorial(p - k).powi(2))
                })
                .sum();
            w * nf
        }
    }
}

/// Ratio of the linear to the quadratic Hoeffding contribution, whose limit is `lambda`.
pub fn lambda_estimate(p: usize, n: usize, td: f64, var_g1: f64, d2: f64) -> f64 {
    let nf = n as f64;
    let pi = p as i32;
    let lin = nf.powi(2 * pi - 1) / factorial(p - 1).powi(2) * var_g1;
    let quad = d2 * nf.powi(2 * pi - 2) * td.powi(2 * pi - 3) / (2.0 * factorial(p - 2).powi(2));
    lin / quad
}

/// `eta = P(0 < |X - Y| < t)` and `Var g_1(X)` of the edge kernel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EdgeMoments {
    pub radius: f64,
    pub eta: f64,
    pub second_moment: f64,
    pub var_g1: f64,
}

impl EdgeMoments {
    /// `Var G_n(edge) = C(n,2) (2 (n-2) Var g_1 + eta (1 - eta))`.
    pub fn variance(&self, n: usize) -> f64 {
        binom(n, 2) * (2.0 * (n as f64 - 2.0) * self.var_g1 + self.eta * (1.0 - self.eta))
    }
}

const GL_INNER: usize = 16;
const GL_OUTER: usize = 12;

/// `int_{B(x,h) cap box} f` with the substitution `y_i = x_i + h sin(theta)` on every axis.
fn ball_box_integral(gl: &GaussLegendre, region: &BoxRegion, f: &dyn Fn(&[f64]) -> f64, x: &[f64], y: &mut Vec<f64>, h: f64) -> f64 {
    let i = y.len();
    if i == x.len() {
        return f(y);
    }
    let lo = region.lo[i].max(x[i] - h);
    let hi = region.hi[i].min(x[i] + h);
    if lo >= hi || h <= 0.0 {
        return 0.0;
    }
    let ta = ((lo - x[i]) / h).clamp(-1.0, 1.0).asin();
    let tb = ((hi - x[i]) / h).clamp(-1.0, 1.0).asin();
    gl.integrate(ta, tb, |th| {
        y.push(x[i] + h * th.sin());
        let v = h * th.cos() * ball_box_integral(gl, region, f, x, y, h * th.cos());
        y.pop();
        v
    })
}

/// Deterministic product quadrature over the support, split where the ball first
/// meets a face so the integrand is smooth on every panel. Supports `d <= 3`.
pub fn edge_moments(dist: &DistributionSpec, radius: f64) -> Result<EdgeMoments> {
    let region = dist.support().ok_or_else(|| Error::InvalidArgument("edge moments need a continuous law".into()))?;
    let d = region.dim();
    if d == 0 || d > 3 {
        return invalid(format!("edge moments by quadrature support d <= 3, got {d}"));
    }
    if matches!(dist, DistributionSpec::CircleUniform) {
        return invalid("edge moments use Euclidean distance on a box");
    }
    let inner = GaussLegendre::new(GL_INNER).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let outer = GaussLegendre::new(GL_OUTER).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dens = |x: &[f64]| dist.density(x).unwrap_or(0.0);
    // breakpoints per axis
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let (lo, hi) = (region.lo[i], region.hi[i]);
            let mut b = vec![lo, hi];
            for c in [lo + radius, hi - radius] {
                if c > lo && c < hi {
                    b.push(c);
                }
            }
            b.sort_by(f64::total_cmp);
            b.dedup();
            b
        })
        .collect();
    // tensor nodes and weights per axis
    let nodes: Vec<Vec<(f64, f64)>> = axes
        .iter()
        .map(|b| {
            let mut out = Vec::new();
            for w in b.windows(2) {
                let (a, c) = (w[0], w[1]);
                let mid = 0.5 * (a + c);
                let half = 0.5 * (c - a);
                for &(z, wt) in outer.as_node_weight_pairs() {
                    out.push((mid + half * z, half * wt));
                }
            }
            out
        })
        .collect();
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let mut x = vec![0.0; d];
    let mut y = Vec::with_capacity(d);
    let sizes: Vec<usize> = nodes.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut w = 1.0;
        for i in (0..d).rev() {
            let (xi, wi) = nodes[i][rem % sizes[i]];
            rem /= sizes[i];
            x[i] = xi;
            w *= wi;
        }
        let fx = dens(&x);
        if fx == 0.0 {
            continue;
        }
        y.clear();
        let g1 = ball_box_integral(&inner, &region, &dens, &x, &mut y, radius);
        m1 += w * fx * g1;
        m2 += w * fx * g1 * g1;
    }
    Ok(EdgeMoments { radius, eta: m1, second_moment: m2, var_g1: m2 - m1 * m1 })
}

/// `P(|X - Y| < t)` for independent uniforms on the unit square, `t <= 1`.
pub fn unit_square_eta(t: f64) -> f64 {
    std::f64::consts::PI * t * t - 8.0 * t.powi(3) / 3.0 + t.powi(4) / 2.0
}

/// Cross-block edge counts `S(k) = #{i <= k < j adjacent}` for `k = 0..=n`.
pub fn cross_counts(g: &GeometricGraph) -> Vec<f64> {
    let n = g.len();
    let mut out = vec![0.0; n + 1];
    let mut s: i64 = 0;
    for v in 0..n {
        // vertex v moves from the right block to the left block
        let before = g.adjacency[v].iter().take_while(|&&u| u < v).count() as i64;
        let after = g.adjacency[v].len() as i64 - before;
        s += after - before;
        out[v + 1] = s as f64;
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EdgeChangepoint {
    pub path: SequentialPath,
    /// `max_t (-T_n(t))` over the grid.
    pub m_n: f64,
    /// Smallest grid maximizer of `-T_n`.
    pub a_n: f64,
}

/// `T_n(t) = (S(floor(nt)) - eta k (n - k)) / sigma` on `grid`, with its max and argmax functionals.
pub fn changepoint_edge_stat(g: &GeometricGraph, eta: f64, sigma: f64, grid: Option<&[f64]>) -> Result<EdgeChangepoint> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::VanishingVariance(sigma * sigma));
    }
    let n = g.len();
    let s = cross_counts(g);
    let times = grid.map(|t| t.to_vec()).unwrap_or_else(|| (0..=n).map(|k| k as f64 / n as f64).collect());
    let values: Vec<f64> = times
        .iter()
        .map(|&t| {
            let k = prefix_len(n, t);
            (s[k] - eta * (k * (n - k)) as f64) / sigma
        })
        .collect();
    let (m_n, a_n) = max_argmax_neg(&times, &values);
    Ok(EdgeChangepoint { path: SequentialPath { n, times, values }, m_n, a_n })
}

/// `(max(-v), smallest t attaining it)`.
pub fn max_argmax_neg(times: &[f64], values: &[f64]) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut at = 0.0;
    for (&t, &v) in times.iter().zip(values) {
        if -v > best {
            best = -v;
            at = t;
        }
    }
    (best, at)
}

/// Cross counts and total edge counts of independent replicates, at full resolution.
pub fn simulate_cross_counts(
    dist: &DistributionSpec,
    radius: f64,
    n: usize,
    replicates: usize,
    stream: RngStream,
    exec: Execution,
) -> Result<Vec<(Vec<f64>, f64)>> {
    map_indexed(exec, replicates, |r| -> Result<(Vec<f64>, f64)> {
        let mut rng = stream.child(r as u64).rng();
        let sample = dist.sample(n, &mut rng)?;
        let g = build_graph(&sample, radius)?;
        Ok((cross_counts(&g), g.edge_count() as f64))
    })
    .into_iter()
    .collect()
}

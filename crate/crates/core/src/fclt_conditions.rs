//! Finite-n diagnostics for the functional limit conditions: each condition is a
//! sequence over a grid of sample sizes, judged by a log-log rate fit.

use std::collections::BTreeMap;
use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::combin::factorial;
use crate::contractions::{contract_tensor, contraction_norm_mc, ContractionKernel, NormBudget};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::sample_spaces::DistributionSpec;
use crate::tensor::Tensor;
use crate::ustat_core::{
    check_degeneracy, g_tensors, psi_tensors, tabulate, variance_sigma2, KernelSpec, McBudget, McProjection, McPsi, Mode,
};

pub const DEFAULT_N_GRID: [usize; 5] = [64, 128, 256, 512, 1024];
pub const EPSILON_GRID: [f64; 3] = [0.1, 0.25, 0.5];
/// Values below this are treated as exactly zero on the log scale.
pub const LOG_FLOOR: f64 = 1e-300;
const SLOPE_TOL: f64 = 1e-9;

/// Quadruples `(j, m, a, b)` admissible for `(i, k, r, l)` with kernel order `p`.
pub fn q_set(i: usize, k: usize, r: usize, l: usize, p: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    let rhs = (i + k) as i64 - (r + l) as i64;
    for j in 0..=i {
        for m in 0..=k {
            for a in 0..=r.min(j).min(m) {
                for b in 0..=a.min(l) {
                    if a - b > r.saturating_sub(l) || r < l {
                        continue;
                    }
                    let lhs = (j + m) as i64 - (a + b) as i64;
                    if lhs > rhs || rhs > (i + k) as i64 - 1 {
                        continue;
                    }
                    if j == p && m == p && !(b == l && a == r && r >= 1) {
                        continue;
                    }
                    out.push((j, m, a, b));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub points: usize,
    pub all_zero: bool,
}

/// OLS of `log value` on `log n` with a 95% Student-t interval for the slope.
pub fn fit_rate(ns: &[usize], values: &[f64]) -> RateFit {
    let all_zero = values.iter().all(|v| v.abs() < LOG_FLOOR);
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.abs().max(LOG_FLOOR).ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let (ci_lo, ci_hi) = if xs.len() > 2 && sxx > 0.0 {
        let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let df = k - 2.0;
        let se = (rss / df / sxx).sqrt();
        let tq = StudentsT::new(0.0, 1.0, df).map(|t| t.inverse_cdf(0.975)).unwrap_or(f64::INFINITY);
        (slope - tq * se, slope + tq * se)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    RateFit { slope, intercept, ci_lo, ci_hi, points: xs.len(), all_zero }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Expectation {
    Vanishing,
    /// Bounded after multiplying by `n^eps` for some `eps` in [`EPSILON_GRID`].
    BoundedWithEpsilon,
    /// A limit exists (Cauchy-type trend check).
    Convergent,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConditionCheck {
    pub id: String,
    pub expectation: Expectation,
    pub ns: Vec<usize>,
    pub values: Vec<f64>,
    pub fit: RateFit,
    /// For bounded checks: the epsilons that pass.
    pub passing_epsilons: Vec<f64>,
    pub verdict: Verdict,
}

impl ConditionCheck {
    pub fn vanishing(id: String, ns: &[usize], values: Vec<f64>) -> Self {
        let fit = fit_rate(ns, &values);
        let verdict = if fit.all_zero || fit.ci_hi < 0.0 { Verdict::Pass } else { Verdict::Fail };
        ConditionCheck { id, expectation: Expectation::Vanishing, ns: ns.to_vec(), values, fit, passing_epsilons: vec![], verdict }
    }

    /// Bounded means the later-half max is at most twice the median and the fitted
    /// slope has a CI upper end <= 0.
    pub fn bounded(id: String, ns: &[usize], values: Vec<f64>) -> Self {
        let fit = fit_rate(ns, &values);
        let passing: Vec<f64> = if fit.all_zero {
            EPSILON_GRID.to_vec()
        } else {
            EPSILON_GRID
                .iter()
                .copied()
                .filter(|&eps| {
                    let scaled: Vec<f64> = ns.iter().zip(&values).map(|(&n, v)| v.abs() * (n as f64).powf(eps)).collect();
                    is_bounded(ns, &scaled)
                })
                .collect()
        };
        let verdict = if passing.is_empty() { Verdict::Fail } else { Verdict::Pass };
        ConditionCheck {
            id,
            expectation: Expectation::BoundedWithEpsilon,
            ns: ns.to_vec(),
            values,
            fit,
            passing_epsilons: passing,
            verdict,
        }
    }

    pub fn convergent(id: String, ns: &[usize], values: Vec<f64>) -> Self {
        let fit = fit_rate(ns, &values);
        // a limit of zero shows up as a significantly negative log-log slope
        let verdict = if fit.all_zero || fit.ci_hi < 0.0 || cauchy_trend(&values) <= 0.1 { Verdict::Pass } else { Verdict::Inconclusive };
        ConditionCheck { id, expectation: Expectation::Convergent, ns: ns.to_vec(), values, fit, passing_epsilons: vec![], verdict }
    }

    pub fn largest_epsilon(&self) -> Option<f64> {
        self.passing_epsilons.iter().copied().fold(None, |a, e| Some(a.map_or(e, |x: f64| x.max(e))))
    }
}

fn is_bounded(ns: &[usize], scaled: &[f64]) -> bool {
    let mut sorted = scaled.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median =
        if sorted.len() % 2 == 1 { sorted[sorted.len() / 2] } else { 0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) };
    // the max is taken over the later half of the grid: a decaying sequence is
    // bounded even though its first term dominates the median
    let tail_max = scaled[scaled.len() / 2..].iter().copied().fold(0.0, f64::max);
    tail_max <= 2.0 * median && fit_rate(ns, scaled).ci_hi <= SLOPE_TOL
}

/// Largest relative change between the last two entries.
pub fn cauchy_trend(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::INFINITY;
    }
    let a = values[values.len() - 2];
    let b = values[values.len() - 1];
    let d = (b - a).abs();
    if d < 1e-12 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Largest successive relative change along the whole sequence.
pub fn max_successive_change(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| {
            let d = (w[1] - w[0]).abs();
            if d < 1e-12 {
                0.0
            } else {
                d / w[0].abs().max(w[1].abs())
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LimitCoefficient {
    pub k: usize,
    pub b_k2: f64,
    pub alpha2: f64,
    pub max_relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConditionReport {
    pub family: String,
    pub order: usize,
    pub kernel: String,
    pub ns: Vec<usize>,
    pub sigma2: Vec<f64>,
    pub checks: Vec<ConditionCheck>,
    pub coefficients: Vec<LimitCoefficient>,
    pub notes: Vec<String>,
    pub verdict: Verdict,
}

impl ConditionReport {
    fn new(family: &str, kernel: &KernelSpec, ns: &[usize], sigma2: Vec<f64>, checks: Vec<ConditionCheck>) -> Self {
        let verdict = if checks.iter().any(|c| c.verdict == Verdict::Fail) {
            Verdict::Fail
        } else if checks.iter().all(|c| c.verdict == Verdict::Pass) {
            Verdict::Pass
        } else {
            Verdict::Inconclusive
        };
        ConditionReport {
            family: family.into(),
            order: kernel.order(),
            kernel: kernel.name(),
            ns: ns.to_vec(),
            sigma2,
            checks,
            coefficients: vec![],
            notes: vec![],
            verdict,
        }
    }

    pub fn check(&self, id: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// Smallest passing epsilon over all bounded checks (the largest one each admits).
    pub fn common_epsilon(&self) -> Option<f64> {
        self.checks
            .iter()
            .filter(|c| c.expectation == Expectation::BoundedWithEpsilon)
            .map(|c| c.largest_epsilon())
            .try_fold(f64::INFINITY, |acc, e| e.map(|e| acc.min(e)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format `check_id,n,value`.
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

/// How norms and variances are obtained.
#[derive(Debug, Clone, Copy)]
pub enum CheckMode {
    Exact,
    MonteCarlo { sigma: McBudget, projection_m: usize, norms: NormBudget },
}

/// Per-n evaluator of `||f_a *_r^l f_b||` for a family of component kernels.
trait NormSource {
    fn sigma2(&self) -> f64;
    fn norm(&mut self, a: usize, r: usize, l: usize, b: usize) -> Result<f64>;
}

struct ExactNorms {
    comps: Vec<Tensor>,
    w: Vec<f64>,
    sigma2: f64,
    cache: BTreeMap<(usize, usize, usize, usize), f64>,
}

impl NormSource for ExactNorms {
    fn sigma2(&self) -> f64 {
        self.sigma2
    }
    fn norm(&mut self, a: usize, r: usize, l: usize, b: usize) -> Result<f64> {
        let key = (a.min(b), r, l, a.max(b));
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let c = contract_tensor(&self.comps[key.0], &self.comps[key.3], r, l, &self.w)?;
        let v = c.norm(&self.w);
        self.cache.insert(key, v);
        Ok(v)
    }
}

struct McNorms {
    comps: Vec<KernelSpec>,
    dist: Arc<DistributionSpec>,
    n: usize,
    budget: NormBudget,
    sigma2: f64,
    g0: f64,
    cache: BTreeMap<(usize, usize, usize, usize), f64>,
}

impl NormSource for McNorms {
    fn sigma2(&self) -> f64 {
        self.sigma2
    }
    fn norm(&mut self, a: usize, r: usize, l: usize, b: usize) -> Result<f64> {
        let key = (a.min(b), r, l, a.max(b));
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let v = if key.0 == 0 {
            // order-0 component is the constant g_0
            let other = mc_norm2(&self.comps[key.3], &self.dist, self.n, self.budget).sqrt();
            self.g0.abs() * other
        } else {
            let c = ContractionKernel::new(
                self.comps[key.0].clone(),
                self.comps[key.3].clone(),
                r,
                l,
                self.dist.clone(),
                self.budget.m_in,
                self.budget.stream.child(key.0 as u64 * 1000 + key.3 as u64 * 100 + r as u64 * 10 + l as u64),
                self.n,
            )?;
            contraction_norm_mc(&c, self.budget, Execution::Parallel).norm
        };
        self.cache.insert(key, v);
        Ok(v)
    }
}

/// Monte Carlo `E f(X_1..X_k)^2`.
fn mc_norm2(f: &KernelSpec, dist: &Arc<DistributionSpec>, n: usize, budget: NormBudget) -> f64 {
    let d = dist.dim();
    let k = f.order();
    let mut rng = budget.stream.labeled("norm2").rng();
    let mut buf = vec![0.0; k * d];
    let mut acc = 0.0;
    for _ in 0..budget.m_out {
        for c in buf.chunks_mut(d) {
            let _ = dist.draw_into(&mut rng, c);
        }
        let args: Vec<&[f64]> = buf.chunks(d).collect();
        acc += f.eval(&args, n).powi(2);
    }
    acc / budget.m_out as f64
}

enum Components {
    G,
    Psi,
}

fn norm_source(
    kernel: &KernelSpec,
    dist: &Arc<DistributionSpec>,
    n: usize,
    mode: CheckMode,
    comps: Components,
) -> Result<Box<dyn NormSource>> {
    let p = kernel.order();
    match mode {
        CheckMode::Exact => {
            let fs = dist.finite().ok_or_else(|| Error::InvalidArgument("exact mode needs a finite space".into()))?;
            let t = tabulate(kernel.as_ref(), fs, n)?;
            let gs = g_tensors(&t, &fs.weights);
            let s = crate::ustat_core::sigma2_exact_tensor(&t, &fs.weights, n);
            let comps = match comps {
                Components::G => gs,
                Components::Psi => psi_tensors(&gs, fs.len())?,
            };
            Ok(Box::new(ExactNorms { comps, w: fs.weights.clone(), sigma2: s.via_g_variances, cache: BTreeMap::new() }))
        }
        CheckMode::MonteCarlo { sigma, projection_m, norms } => {
            let s = variance_sigma2(kernel, dist, n, Mode::MonteCarlo(sigma))?;
            let proj = |l: usize| McProjection {
                inner: kernel.clone(),
                dist: dist.clone(),
                level: l,
                n,
                budget: McBudget { m: projection_m, stream: sigma.stream.child(100 + l as u64) },
            };
            let comps: Vec<KernelSpec> = match comps {
                Components::G => (0..=p).map(|l| Arc::new(proj(l)) as KernelSpec).collect(),
                Components::Psi => (0..=p).map(|k| Arc::new(McPsi { gs: (0..=k).map(proj).collect() }) as KernelSpec).collect(),
            };
            Ok(Box::new(McNorms {
                comps,
                dist: dist.clone(),
                n,
                budget: norms,
                sigma2: s.via_g_variances,
                g0: s.g0,
                cache: BTreeMap::new(),
            }))
        }
    }
}

struct Item {
    id: String,
    expectation: Expectation,
    /// Power of `n` in front of `norm / sigma^2`.
    exponent: f64,
    a: usize,
    r: usize,
    l: usize,
    b: usize,
}

fn run_items(
    family: &str,
    kernel: &KernelSpec,
    dist: &Arc<DistributionSpec>,
    ns: &[usize],
    mode: CheckMode,
    comps: fn() -> Components,
    items: &[Item],
    squared_items: &[(String, f64, usize)],
) -> Result<(ConditionReport, Vec<Vec<f64>>)> {
    let mut values = vec![vec![0.0; ns.len()]; items.len()];
    let mut sq_values = vec![vec![0.0; ns.len()]; squared_items.len()];
    let mut sigma2s = Vec::new();
    for (ni, &n) in ns.iter().enumerate() {
        let mut src = norm_source(kernel, dist, n, mode, comps())?;
        let s2 = src.sigma2();
        if !(s2 > 0.0) {
            return Err(Error::VanishingVariance(s2));
        }
        sigma2s.push(s2);
        let nf = n as f64;
        for (ii, it) in items.iter().enumerate() {
            values[ii][ni] = nf.powf(it.exponent) / s2 * src.norm(it.a, it.r, it.l, it.b)?;
        }
        for (ii, (_, e, k)) in squared_items.iter().enumerate() {
            // f_k *_k^k f_k is the scalar ||f_k||^2
            sq_values[ii][ni] = nf.powf(*e) / s2 * src.norm(*k, *k, *k, *k)?;
        }
    }
    let mut checks = Vec::new();
    for (ii, (id, _, _)) in squared_items.iter().enumerate() {
        checks.push(ConditionCheck::convergent(id.clone(), ns, sq_values[ii].clone()));
    }
    for (ii, it) in items.iter().enumerate() {
        checks.push(match it.expectation {
            Expectation::Vanishing => ConditionCheck::vanishing(it.id.clone(), ns, values[ii].clone()),
            Expectation::BoundedWithEpsilon => ConditionCheck::bounded(it.id.clone(), ns, values[ii].clone()),
            Expectation::Convergent => ConditionCheck::convergent(it.id.clone(), ns, values[ii].clone()),
        });
    }
    Ok((ConditionReport::new(family, kernel, ns, sigma2s, checks), sq_values))
}

fn coefficients(p: usize, sq_values: &[Vec<f64>]) -> Vec<LimitCoefficient> {
    (1..=p)
        .map(|k| {
            let vals = &sq_values[k - 1];
            let b = *vals.last().unwrap_or(&0.0);
            LimitCoefficient {
                k,
                b_k2: b,
                alpha2: b / (factorial(k) * factorial(p - k).powi(2)),
                max_relative_change: max_successive_change(vals),
            }
        })
        .collect()
}

fn b_items(p: usize, family_g: bool) -> Vec<Item> {
    let mut items = Vec::new();
    let mut seen = BTreeMap::new();
    for v in 1..=p {
        for u in v..=p {
            for r in 1..=v {
                let lmax = r.min(u + v - r - 1);
                for l in 0..=lmax {
                    let exponent = 2.0 * p as f64 - (u + v + r - l) as f64 / 2.0;
                    let quads = if family_g { q_set(v, u, r, l, p) } else { vec![(v, u, r, l)] };
                    for (j, m, a, b) in quads {
                        let key = (j.min(m), a, b, j.max(m), (exponent * 2.0) as i64);
                        if seen.insert(key, ()).is_some() {
                            continue;
                        }
                        let id = if family_g {
                            format!("I.b[v={v},u={u},r={r},l={l}|j={j},m={m},a={a},b={b}]")
                        } else {
                            format!("II.b[v={v},u={u},r={r},l={l}]")
                        };
                        items.push(Item { id, expectation: Expectation::Vanishing, exponent, a: j, r: a, l: b, b: m });
                    }
                }
            }
        }
    }
    items
}

fn c_items(p: usize, family_g: bool) -> Vec<Item> {
    let mut items = Vec::new();
    let mut seen = BTreeMap::new();
    for r in 1..=p {
        for l in 0..r {
            let exponent = 2.0 * p as f64 - r as f64 - (r - l) as f64 / 2.0;
            let quads = if family_g { q_set(r, r, r, l, p) } else { vec![(r, r, r, l)] };
            for (j, m, a, b) in quads {
                let key = (j.min(m), a, b, j.max(m), (exponent * 2.0) as i64);
                if seen.insert(key, ()).is_some() {
                    continue;
                }
                let id = if family_g { format!("I.c[r={r},l={l}|j={j},m={m},a={a},b={b}]") } else { format!("II.c[r={r},l={l}]") };
                items.push(Item { id, expectation: Expectation::BoundedWithEpsilon, exponent, a: j, r: a, l: b, b: m });
            }
        }
    }
    items
}

/// Conditions on the projections `g_k` (orders up to 3).
pub fn check_theorem_i(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, ns: &[usize], mode: CheckMode) -> Result<ConditionReport> {
    let p = kernel.order();
    if !(1..=3).contains(&p) {
        return Err(Error::InvalidArgument(format!("projection conditions are implemented for orders 1..=3, got {p}")));
    }
    let mut items = b_items(p, true);
    items.extend(c_items(p, true));
    let squared: Vec<(String, f64, usize)> = (1..=p).map(|k| (format!("I.a[k={k}]"), (2 * p - k) as f64, k)).collect();
    let (mut rep, _) = run_items("theorem-I", kernel, dist, ns, mode, || Components::G, &items, &[])?;
    // (a): n^{2p-k} Var(g_k) / sigma^2
    let mut a_checks = Vec::new();
    let mut a_vals = Vec::new();
    for (id, e, k) in &squared {
        let mut vals = Vec::new();
        for (ni, &n) in ns.iter().enumerate() {
            let s = match mode {
                CheckMode::Exact => variance_sigma2(kernel, dist, n, Mode::Exact)?,
                CheckMode::MonteCarlo { sigma, .. } => variance_sigma2(kernel, dist, n, Mode::MonteCarlo(sigma))?,
            };
            vals.push((n as f64).powf(*e) * s.g_variances[*k] / rep.sigma2[ni]);
        }
        a_vals.push(vals.clone());
        a_checks.push(ConditionCheck::convergent(id.clone(), ns, vals));
    }
    rep.coefficients = coefficients(p, &a_vals);
    a_checks.append(&mut rep.checks);
    let rebuilt = ConditionReport::new("theorem-I", kernel, ns, rep.sigma2.clone(), a_checks);
    Ok(ConditionReport { coefficients: rep.coefficients, ..rebuilt })
}

/// Conditions on the canonical components `psi_k`.
pub fn check_theorem_ii(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, ns: &[usize], mode: CheckMode) -> Result<ConditionReport> {
    let p = kernel.order();
    let mut items = b_items(p, false);
    items.extend(c_items(p, false));
    let squared: Vec<(String, f64, usize)> = (1..=p).map(|k| (format!("II.a[k={k}]"), (2 * p - k) as f64, k)).collect();
    let (mut rep, sq) = run_items("theorem-II", kernel, dist, ns, mode, || Components::Psi, &items, &squared)?;
    rep.coefficients = coefficients(p, &sq);
    Ok(rep)
}

/// Ratio conditions for a degenerate kernel: vanishing `n^{(l-r)/2} ||psi *_r^l psi|| / ||psi||^2`
/// and bounded `n^{(l-p)/2 + eps} ||psi *_p^l psi|| / ||psi||^2`.
pub fn check_degenerate(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, ns: &[usize], mode: CheckMode) -> Result<ConditionReport> {
    let p = kernel.order();
    let mut vanishing: Vec<(usize, usize)> = Vec::new();
    for r in 1..=p {
        for l in 0..=r.min((2 * p).saturating_sub(r + 1)) {
            vanishing.push((r, l));
        }
    }
    let bounded: Vec<usize> = (0..p).collect();
    let mut vv = vec![Vec::new(); vanishing.len()];
    let mut bv = vec![Vec::new(); bounded.len()];
    let mut sig = Vec::new();
    let mut notes = Vec::new();
    for &n in ns {
        let deg_mode = match mode {
            CheckMode::Exact => Mode::Exact,
            CheckMode::MonteCarlo { sigma, .. } => Mode::MonteCarlo(sigma),
        };
        let res = check_degeneracy(kernel, dist, n, deg_mode)?;
        if !res.degenerate {
            if matches!(mode, CheckMode::Exact) {
                return Err(Error::NonDegenerate { residual: res.residual, tolerance: 1e-12 });
            }
            notes.push(format!("n={n}: degeneracy residual {:.3e} exceeds 4 SE ({:.3e})", res.residual, res.standard_error));
        }
        let norm = |r: usize, l: usize| -> Result<f64> {
            match mode {
                CheckMode::Exact => {
                    let fs = dist.finite().expect("checked by check_degeneracy");
                    let t = tabulate(kernel.as_ref(), fs, n)?;
                    Ok(contract_tensor(&t, &t, r, l, &fs.weights)?.norm(&fs.weights))
                }
                CheckMode::MonteCarlo { norms, .. } => {
                    let stream = norms.stream.child(n as u64 * 100 + r as u64 * 10 + l as u64);
                    let c = ContractionKernel::new(kernel.clone(), kernel.clone(), r, l, dist.clone(), norms.m_in, stream, n)?;
                    Ok(contraction_norm_mc(&c, NormBudget { stream, ..norms }, Execution::Parallel).norm)
                }
            }
        };
        let norm2 = match mode {
            CheckMode::Exact => norm(p, p)?,
            CheckMode::MonteCarlo { norms, .. } => mc_norm2(kernel, dist, n, NormBudget { m_out: norms.m_out * 10, ..norms }),
        };
        if !(norm2 > 0.0) {
            return Err(Error::VanishingVariance(norm2));
        }
        sig.push(crate::combin::binom(n, p) * norm2);
        let nf = n as f64;
        for (i, &(r, l)) in vanishing.iter().enumerate() {
            vv[i].push(nf.powf((l as f64 - r as f64) / 2.0) * norm(r, l)? / norm2);
        }
        for (i, &l) in bounded.iter().enumerate() {
            bv[i].push(nf.powf((l as f64 - p as f64) / 2.0) * norm(p, l)? / norm2);
        }
    }
    let mut checks = Vec::new();
    for (i, &(r, l)) in vanishing.iter().enumerate() {
        checks.push(ConditionCheck::vanishing(format!("D.vanish[r={r},l={l}]"), ns, vv[i].clone()));
    }
    for (i, &l) in bounded.iter().enumerate() {
        checks.push(ConditionCheck::bounded(format!("D.bounded[r={p},l={l}]"), ns, bv[i].clone()));
    }
    let mut rep = ConditionReport::new("degenerate", kernel, ns, sig, checks);
    rep.notes = notes;
    Ok(rep)
}

/// The reduced order-2 checklist for the projection conditions, as ids into a
/// [`check_theorem_i`] report: `(id, exponent, j, m, a, b, expectation)`.
pub fn order2_projection_checklist() -> Vec<(&'static str, f64, usize, usize, usize, usize, Expectation)> {
    use Expectation::*;
    vec![
        ("g2*g0", 2.0, 2, 0, 0, 0, Vanishing),
        ("g1*_1^0 g2", 2.0, 1, 2, 1, 0, Vanishing),
        ("g1*_1^1 g2", 2.5, 1, 2, 1, 1, Vanishing),
        ("g2*_1^0 g2", 1.5, 2, 2, 1, 0, Vanishing),
        ("g2*_1^1 g2", 2.0, 2, 2, 1, 1, Vanishing),
        ("g2*_0^0 g1", 1.5, 2, 1, 0, 0, Vanishing),
        ("g1*_1^0 g1", 2.5, 1, 1, 1, 0, BoundedWithEpsilon),
        ("g2*_2^0 g2", 1.0, 2, 2, 2, 0, BoundedWithEpsilon),
        ("g0*g0", 2.5, 0, 0, 0, 0, BoundedWithEpsilon),
        ("g1*_0^0 g0", 2.5, 0, 1, 0, 0, BoundedWithEpsilon),
    ]
}

/// The order-2 checklist for the `psi_k` conditions: (label, exponent, v, u, r, l, expectation).
pub fn order2_psi_checklist() -> Vec<(&'static str, f64, usize, usize, usize, usize, Expectation)> {
    use Expectation::*;
    vec![
        ("psi1*_1^0 psi2", 2.0, 1, 2, 1, 0, Vanishing),
        ("psi1*_1^1 psi2", 2.5, 1, 2, 1, 1, Vanishing),
        ("psi2*_1^0 psi2", 1.5, 2, 2, 1, 0, Vanishing),
        ("psi2*_1^1 psi2", 2.0, 2, 2, 1, 1, Vanishing),
        ("psi1*_1^0 psi1", 2.5, 1, 1, 1, 0, BoundedWithEpsilon),
        ("psi2*_2^0 psi2", 1.0, 2, 2, 2, 0, BoundedWithEpsilon),
        ("psi2*_2^1 psi2", 1.5, 2, 2, 2, 1, BoundedWithEpsilon),
    ]
}

/// Finds the check in a projection report matching `(exponent, j, m, a, b)`.
pub fn find_projection_check(rep: &ConditionReport, exponent: f64, j: usize, m: usize, a: usize, b: usize) -> Option<&ConditionCheck> {
    let lo = j.min(m);
    let hi = j.max(m);
    rep.checks.iter().find(|c| {
        let Some(tail) = c.id.split('|').nth(1) else { return false };
        let nums: Vec<usize> = tail.trim_end_matches(']').split(',').filter_map(|kv| kv.split('=').nth(1)?.parse().ok()).collect();
        if nums.len() != 4 {
            return false;
        }
        let (cj, cm, ca, cb) = (nums[0], nums[1], nums[2], nums[3]);
        let e = exponent_of(&c.id, rep.order);
        (cj.min(cm), cj.max(cm), ca, cb) == (lo, hi, a, b) && (e - exponent).abs() < 1e-9
    })
}

fn exponent_of(id: &str, p: usize) -> f64 {
    let head = id.split('|').next().unwrap_or("");
    let get =
        |k: &str| -> usize { head.split(['[', ',', ']']).find_map(|kv| kv.strip_prefix(&format!("{k}="))?.parse().ok()).unwrap_or(0) };
    let (r, l) = (get("r") as f64, get("l") as f64);
    if id.starts_with("I.b") {
        let (v, u) = (get("v") as f64, get("u") as f64);
        2.0 * p as f64 - (u + v + r - l) / 2.0
    } else {
        2.0 * p as f64 - r - (r - l) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample_spaces::FiniteSpace;
    use crate::ustat_core::ProductKernel;

    #[test]
    fn q_rules() {
        let q = q_set(2, 2, 1, 0, 2);
        assert!(q.contains(&(2, 2, 1, 0)));
        assert!(q.contains(&(2, 1, 0, 0)));
        // j = m = p forces b = l and a = r
        assert!(!q.contains(&(2, 2, 0, 0)));
        let q2 = q_set(1, 2, 1, 1, 2);
        assert!(q2.contains(&(1, 2, 1, 1)));
        for (j, m, a, b) in q_set(3, 3, 2, 1, 3) {
            assert!(j <= 3 && m <= 3 && b <= a && a <= 2 && b <= 1 && a - b <= 1 && a <= j.min(m));
            assert!(j + m - a - b <= 3);
        }
    }

    #[test]
    fn rate_fit_on_exact_power() {
        let ns = [64, 128, 256, 512];
        let v: Vec<f64> = ns.iter().map(|&n| 3.0 * (n as f64).powf(-0.5)).collect();
        let f = fit_rate(&ns, &v);
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!(f.ci_hi < 0.0);
        let z = fit_rate(&ns, &[0.0; 4]);
        assert!(z.all_zero);
    }

    #[test]
    fn bounded_and_vanishing_verdicts() {
        let ns = [64, 128, 256, 512, 1024];
        let flat = vec![1.0; 5];
        assert_eq!(ConditionCheck::vanishing("x".into(), &ns, flat.clone()).verdict, Verdict::Fail);
        let b = ConditionCheck::bounded("y".into(), &ns, ns.iter().map(|&n| (n as f64).powf(-0.3)).collect());
        assert_eq!(b.passing_epsilons, vec![0.1, 0.25]);
        let g = ConditionCheck::bounded("z".into(), &ns, ns.iter().map(|&n| (n as f64).powf(0.2)).collect());
        assert_eq!(g.verdict, Verdict::Fail);
    }

    #[test]
    fn product_kernel_passes_projection_conditions() {
        let dist = Arc::new(DistributionSpec::Finite(FiniteSpace::scalar(&[-1.0, 0.5, 2.0], &[0.3, 0.4, 0.3]).unwrap()));
        let k: KernelSpec = Arc::new(ProductKernel { order: 2 });
        let rep = check_theorem_i(&k, &dist, &DEFAULT_N_GRID, CheckMode::Exact).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass, "{:#?}", rep.checks.iter().filter(|c| c.verdict != Verdict::Pass).collect::<Vec<_>>());
        // nondegenerate fixed kernel: b_1^2 = 1, b_2^2 = 0 in the limit
        assert!((rep.coefficients[0].b_k2 - 1.0).abs() < 0.01);
        for (name, e, j, m, a, b, _) in order2_projection_checklist() {
            assert!(find_projection_check(&rep, e, j, m, a, b).is_some(), "{name}");
        }
        let rep2 = check_theorem_ii(&k, &dist, &DEFAULT_N_GRID, CheckMode::Exact).unwrap();
        assert_eq!(rep2.verdict, Verdict::Pass);
        let ids: Vec<&str> = rep2.checks.iter().map(|c| c.id.as_str()).collect();
        for (name, _, v, u, r, l, e) in order2_psi_checklist() {
            let id = match e {
                Expectation::Vanishing => format!("II.b[v={v},u={u},r={r},l={l}]"),
                _ => format!("II.c[r={r},l={l}]"),
            };
            assert!(ids.contains(&id.as_str()), "{name}: {id} not in {ids:?}");
        }
    }
}

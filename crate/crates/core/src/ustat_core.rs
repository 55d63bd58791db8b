//! Kernels, U-statistics, sequential paths, Hoeffding projections and the
//! normalizing variance. Every projection has an exact finite-space mode and a
//! Monte Carlo mode.

use std::sync::Arc;

use rand::Rng;

use crate::combin::{binom, combinations, subsets};
use crate::error::{invalid, Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::sample_spaces::{splitmix64, DistributionSpec, FiniteSpace, RngStream, Sample};
use crate::tensor::Tensor;

/// Highest order handled by sequential path recording.
pub const MAX_PATH_ORDER: usize = 4;
/// Default number of stored grid points on a path.
pub const MAX_GRID_POINTS: usize = 512;

/// A symmetric kernel, possibly depending on the sample size `n`.
pub trait Kernel: Send + Sync {
    fn order(&self) -> usize;
    fn eval(&self, args: &[&[f64]], n: usize) -> f64;
    fn name(&self) -> String;
    fn size_dependent(&self) -> bool {
        false
    }
}

pub type KernelSpec = Arc<dyn Kernel>;

/// `prod_i x_i` on real-valued points.
#[derive(Debug, Clone)]
pub struct ProductKernel {
    pub order: usize,
}

impl Kernel for ProductKernel {
    fn order(&self) -> usize {
        self.order
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        args.iter().map(|a| a[0]).product()
    }
    fn name(&self) -> String {
        format!("product{}", self.order)
    }
}

/// One when all arguments coincide.
#[derive(Debug, Clone)]
pub struct IndicatorMatch {
    pub order: usize,
}

impl Kernel for IndicatorMatch {
    fn order(&self) -> usize {
        self.order
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        if args.windows(2).all(|w| w[0] == w[1]) {
            1.0
        } else {
            0.0
        }
    }
    fn name(&self) -> String {
        format!("indicator-match{}", self.order)
    }
}

/// A size-dependent scale `c * n^(-a)` (or a constant when `a == 0`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerRule {
    pub c: f64,
    pub a: f64,
}

impl PowerRule {
    pub fn at(&self, n: usize) -> f64 {
        self.c * (n as f64).powf(-self.a)
    }
}

/// `1{0 < |x - y| < t_n}` with `t_n^d = rule(n)`.
#[derive(Debug, Clone)]
pub struct DistanceThreshold {
    pub dim: usize,
    pub volume_rule: PowerRule,
}

impl DistanceThreshold {
    pub fn radius(&self, n: usize) -> f64 {
        self.volume_rule.at(n).powf(1.0 / self.dim as f64)
    }
}

pub fn dist2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl Kernel for DistanceThreshold {
    fn order(&self) -> usize {
        2
    }
    fn eval(&self, args: &[&[f64]], n: usize) -> f64 {
        let t = self.radius(n);
        let d2 = dist2(args[0], args[1]);
        if d2 > 0.0 && d2 < t * t {
            1.0
        } else {
            0.0
        }
    }
    fn name(&self) -> String {
        "distance-threshold".into()
    }
    fn size_dependent(&self) -> bool {
        self.volume_rule.a != 0.0
    }
}

/// Distance on the circle of unit length.
pub fn circle_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// `1{d(x, y) < h_n} - 2 h_n` on the unit circle: degenerate under the uniform law.
#[derive(Debug, Clone)]
pub struct CircleWindow {
    pub width_rule: PowerRule,
}

impl CircleWindow {
    pub fn width(&self, n: usize) -> f64 {
        self.width_rule.at(n).min(0.5)
    }
}

impl Kernel for CircleWindow {
    fn order(&self) -> usize {
        2
    }
    fn eval(&self, args: &[&[f64]], n: usize) -> f64 {
        let h = self.width(n);
        let ind = if circle_distance(args[0][0], args[1][0]) < h { 1.0 } else { 0.0 };
        ind - 2.0 * h
    }
    fn name(&self) -> String {
        "circle-window".into()
    }
    fn size_dependent(&self) -> bool {
        self.width_rule.a != 0.0
    }
}

/// Kernel from a closure.
pub struct FnKernel<F> {
    pub order: usize,
    pub label: String,
    pub size_dependent: bool,
    pub f: F,
}

impl<F: Fn(&[&[f64]], usize) -> f64 + Send + Sync> FnKernel<F> {
    pub fn new(order: usize, label: &str, f: F) -> Self {
        FnKernel { order, label: label.into(), size_dependent: false, f }
    }
}

impl<F: Fn(&[&[f64]], usize) -> f64 + Send + Sync> Kernel for FnKernel<F> {
    fn order(&self) -> usize {
        self.order
    }
    fn eval(&self, args: &[&[f64]], n: usize) -> f64 {
        (self.f)(args, n)
    }
    fn name(&self) -> String {
        self.label.clone()
    }
    fn size_dependent(&self) -> bool {
        self.size_dependent
    }
}

pub fn fn_kernel(order: usize, label: &str, f: impl Fn(&[&[f64]], usize) -> f64 + Send + Sync + 'static) -> KernelSpec {
    Arc::new(FnKernel::new(order, label, f))
}

/// `inner - shift`.
pub struct Shifted {
    pub inner: KernelSpec,
    pub shift: f64,
}

impl Kernel for Shifted {
    fn order(&self) -> usize {
        self.inner.order()
    }
    fn eval(&self, args: &[&[f64]], n: usize) -> f64 {
        self.inner.eval(args, n) - self.shift
    }
    fn name(&self) -> String {
        format!("{}-centered", self.inner.name())
    }
    fn size_dependent(&self) -> bool {
        self.inner.size_dependent()
    }
}

/// A tabulated kernel on the atoms of a finite space. Points that are not atoms
/// evaluate to NaN.
#[derive(Debug, Clone)]
pub struct TensorKernel {
    pub space: Arc<FiniteSpace>,
    pub tensor: Tensor,
    pub label: String,
}

impl TensorKernel {
    pub fn new(space: Arc<FiniteSpace>, tensor: Tensor, label: &str) -> Self {
        TensorKernel { space, tensor, label: label.into() }
    }

    /// Reads rows `i_1, ..., i_p, value` of atom indices; each row also fills all
    /// permutations of its indices. Unlisted tuples are zero.
    pub fn from_csv(space: Arc<FiniteSpace>, order: usize, reader: impl std::io::Read) -> Result<Self> {
        let mut t = Tensor::zeros(order, space.len())?;
        let mut seen = vec![false; t.data.len()];
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != order + 1 {
                return invalid(format!("table row {line}: expected {} fields", order + 1));
            }
            let mut idx = Vec::with_capacity(order);
            for f in rec.iter().take(order) {
                let i: usize = f.parse().map_err(|_| Error::InvalidArgument(format!("table row {line}: bad index {f}")))?;
                if i >= space.len() {
                    return invalid(format!("table row {line}: atom index {i} out of range"));
                }
                idx.push(i);
            }
            let v: f64 = rec[order].parse().map_err(|_| Error::InvalidArgument(format!("table row {line}: bad value")))?;
            for perm in crate::combin::permutations(order) {
                let pidx: Vec<usize> = perm.iter().map(|&j| idx[j]).collect();
                let o = t.offset(&pidx);
                if seen[o] && t.data[o] != v {
                    return invalid(format!("table row {line}: asymmetric entries for {pidx:?}"));
                }
                seen[o] = true;
                t.data[o] = v;
            }
        }
        Ok(TensorKernel::new(space, t, "table"))
    }
}

impl Kernel for TensorKernel {
    fn order(&self) -> usize {
        self.tensor.order
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        let mut off = 0;
        for a in args {
            match self.space.index_of(a) {
                Some(i) => off = off * self.space.len() + i,
                None => return f64::NAN,
            }
        }
        self.tensor.data[off]
    }
    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Monte Carlo budget: `m` draws per estimate, randomness from `stream`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McBudget {
    pub m: usize,
    pub stream: RngStream,
}

impl McBudget {
    pub const DEFAULT_M: usize = 2000;
    pub const MIN_M: usize = 100;

    pub fn new(m: usize, stream: RngStream) -> Result<Self> {
        if m < Self::MIN_M {
            return Err(Error::TooFewSamples { got: m, need: Self::MIN_M });
        }
        Ok(McBudget { m, stream })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Exact,
    MonteCarlo(McBudget),
}

/// Evaluates `kernel` on every atom tuple at sample size `n`.
pub fn tabulate(kernel: &dyn Kernel, space: &FiniteSpace, n: usize) -> Result<Tensor> {
    let p = kernel.order();
    let mut args: Vec<&[f64]> = Vec::with_capacity(p);
    Tensor::from_fn(p, space.len(), |idx| {
        args.clear();
        args.extend(idx.iter().map(|&i| space.atoms[i].as_slice()));
        kernel.eval(&args, n)
    })
}

/// `g_0, ..., g_p` of a tabulated symmetric kernel.
pub fn g_tensors(t: &Tensor, w: &[f64]) -> Vec<Tensor> {
    (0..=t.order).map(|l| t.integrate_last(t.order - l, w)).collect()
}

/// `psi_0, ..., psi_p` from `g_0, ..., g_p`.
pub fn psi_tensors(gs: &[Tensor], size: usize) -> Result<Vec<Tensor>> {
    let p = gs.len() - 1;
    let mut out = Vec::with_capacity(p + 1);
    for k in 0..=p {
        let all: Vec<usize> = (0..k).collect();
        let subs = subsets(&all);
        let mut sub_idx = Vec::with_capacity(k);
        let t = Tensor::from_fn(k, size, |idx| {
            subs.iter()
                .map(|s| {
                    sub_idx.clear();
                    sub_idx.extend(s.iter().map(|&j| idx[j]));
                    let sign = if (k - s.len()).is_multiple_of(2) { 1.0 } else { -1.0 };
                    sign * gs[s.len()].get(&sub_idx)
                })
                .sum()
        })?;
        out.push(if k == 0 { Tensor::scalar(t.data[0]) } else { t });
    }
    Ok(out)
}

/// `J_k(f)` over the atom-index sample `xs`: sum of `f` over increasing `k`-tuples.
pub fn j_sum_tensor(f: &Tensor, xs: &[usize]) -> f64 {
    if f.order == 0 {
        return f.data[0];
    }
    combinations(xs.len(), f.order)
        .iter()
        .map(|c| {
            let idx: Vec<usize> = c.iter().map(|&i| xs[i]).collect();
            f.get(&idx)
        })
        .sum()
}

/// Reconstructs `J_p` as `sum_k C(n-k, p-k) J_k(psi_k)`.
pub fn reconstruct_from_psi(psis: &[Tensor], xs: &[usize]) -> f64 {
    let p = psis.len() - 1;
    let n = xs.len();
    (0..=p).map(|k| binom(n.saturating_sub(k), p - k) * j_sum_tensor(&psis[k], xs)).sum()
}

/// Monte Carlo `g_l`: fresh inner draws per evaluation point, seeded from the point.
pub struct McProjection {
    pub inner: KernelSpec,
    pub dist: Arc<DistributionSpec>,
    pub level: usize,
    pub n: usize,
    pub budget: McBudget,
}

fn hash_point(args: &[&[f64]]) -> u64 {
    args.iter().flat_map(|a| a.iter()).fold(0x51ED_2701u64, |h, v| splitmix64(h ^ v.to_bits()))
}

impl McProjection {
    /// Estimate and standard error at `args`.
    pub fn eval_with_se(&self, args: &[&[f64]]) -> (f64, f64) {
        let p = self.inner.order();
        let d = self.dist.dim();
        let extra = p - self.level;
        if extra == 0 {
            return (self.inner.eval(args, self.n), 0.0);
        }
        let mut rng = self.budget.stream.child(hash_point(args)).rng();
        let mut buf = vec![0.0; extra * d];
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..self.budget.m {
            for c in buf.chunks_mut(d) {
                let _ = self.dist.draw_into(&mut rng, c);
            }
            let mut full: Vec<&[f64]> = args.to_vec();
            full.extend(buf.chunks(d));
            let v = self.inner.eval(&full, self.n);
            s += v;
            s2 += v * v;
        }
        let m = self.budget.m as f64;
        let mean = s / m;
        let var = (s2 / m - mean * mean).max(0.0) * m / (m - 1.0);
        (mean, (var / m).sqrt())
    }
}

impl Kernel for McProjection {
    fn order(&self) -> usize {
        self.level
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        self.eval_with_se(args).0
    }
    fn name(&self) -> String {
        format!("g{}[{}]", self.level, self.inner.name())
    }
}

/// Monte Carlo `psi_k` assembled from Monte Carlo `g_l`.
pub struct McPsi {
    pub gs: Vec<McProjection>,
}

impl Kernel for McPsi {
    fn order(&self) -> usize {
        self.gs.len() - 1
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        let k = self.order();
        let all: Vec<usize> = (0..k).collect();
        subsets(&all)
            .iter()
            .map(|s| {
                let a: Vec<&[f64]> = s.iter().map(|&j| args[j]).collect();
                let sign = if (k - s.len()).is_multiple_of(2) { 1.0 } else { -1.0 };
                sign * self.gs[s.len()].eval(&a, 0)
            })
            .sum()
    }
    fn name(&self) -> String {
        format!("psi{}[{}]", self.order(), self.gs[0].inner.name())
    }
}

fn need_finite(dist: &DistributionSpec) -> Result<Arc<FiniteSpace>> {
    dist.finite().cloned().map(Arc::new).ok_or_else(|| Error::InvalidArgument("exact mode needs a finite space".into()))
}

/// `g_l(y_1..y_l) = E kernel(y_1..y_l, X_1..X_{p-l})` at sample size `n`.
pub fn hoeffding_g(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, l: usize, n: usize, mode: Mode) -> Result<KernelSpec> {
    let p = kernel.order();
    if l > p {
        return invalid(format!("level {l} exceeds order {p}"));
    }
    match mode {
        Mode::Exact => {
            let fs = need_finite(dist)?;
            let t = tabulate(kernel.as_ref(), &fs, n)?;
            let g = t.integrate_last(p - l, &fs.weights);
            Ok(Arc::new(TensorKernel::new(fs, g, &format!("g{l}[{}]", kernel.name()))))
        }
        Mode::MonteCarlo(budget) => Ok(Arc::new(McProjection {
            inner: kernel.clone(),
            dist: dist.clone(),
            level: l,
            n,
            budget: McBudget { m: budget.m, stream: budget.stream.child(l as u64) },
        })),
    }
}

/// Canonical component `psi_k` at sample size `n`.
pub fn hoeffding_psi(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, k: usize, n: usize, mode: Mode) -> Result<KernelSpec> {
    let p = kernel.order();
    if k > p {
        return invalid(format!("level {k} exceeds order {p}"));
    }
    match mode {
        Mode::Exact => {
            let fs = need_finite(dist)?;
            let t = tabulate(kernel.as_ref(), &fs, n)?;
            let gs = g_tensors(&t, &fs.weights);
            let mut psis = psi_tensors(&gs[..=k], fs.len())?;
            let psi = psis.pop().expect("nonempty");
            Ok(Arc::new(TensorKernel::new(fs, psi, &format!("psi{k}[{}]", kernel.name()))))
        }
        Mode::MonteCarlo(budget) => {
            let gs = (0..=k)
                .map(|l| McProjection {
                    inner: kernel.clone(),
                    dist: dist.clone(),
                    level: l,
                    n,
                    budget: McBudget { m: budget.m, stream: budget.stream.child(l as u64) },
                })
                .collect();
            Ok(Arc::new(McPsi { gs }))
        }
    }
}

/// Both forms of the normalizing variance plus the ingredients.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SigmaSquared {
    pub n: usize,
    pub order: usize,
    pub g0: f64,
    /// `Var g_k`, `k = 1..=p` (index 0 unused, zero).
    pub g_variances: Vec<f64>,
    /// `||psi_k||^2`, `k = 0..=p`.
    pub psi_norms2: Vec<f64>,
    /// Standard errors of the `Var g_k` estimates (zero in exact mode).
    pub g_variance_se: Vec<f64>,
    pub via_psi_norms: f64,
    pub via_g_variances: f64,
    /// Monte Carlo estimates that came out negative and were clamped to zero.
    pub clamped: Vec<usize>,
}

impl SigmaSquared {
    pub fn from_parts(n: usize, g0: f64, g_variances: Vec<f64>, g_variance_se: Vec<f64>) -> SigmaSquared {
        let p = g_variances.len() - 1;
        let mut clamped = Vec::new();
        let mut psi_norms2 = vec![g0 * g0];
        for k in 1..=p {
            let mut v: f64 = (1..=k)
                .map(|l| {
                    let sign = if (k - l) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * binom(k, l) * g_variances[l]
                })
                .sum();
            if v < 0.0 {
                clamped.push(k);
                v = 0.0;
            }
            psi_norms2.push(v);
        }
        let mut s =
            SigmaSquared { n, order: p, g0, g_variances, psi_norms2, g_variance_se, via_psi_norms: 0.0, via_g_variances: 0.0, clamped };
        s.via_psi_norms = sigma2_from_psi_norms(&s.psi_norms2, n);
        s.via_g_variances = sigma2_from_g_variances(&s.g_variances, n);
        s
    }

    pub fn sigma(&self) -> f64 {
        self.via_g_variances.max(0.0).sqrt()
    }
}

/// `sum_k C(n-k, p-k)^2 C(n, k) ||psi_k||^2`.
pub fn sigma2_from_psi_norms(psi_norms2: &[f64], n: usize) -> f64 {
    let p = psi_norms2.len() - 1;
    (1..=p).map(|k| binom(n.saturating_sub(k), p - k).powi(2) * binom(n, k) * psi_norms2[k]).sum()
}

/// `C(n, p) sum_k C(p, k) C(n-p, p-k) Var g_k`.
pub fn sigma2_from_g_variances(g_vars: &[f64], n: usize) -> f64 {
    let p = g_vars.len() - 1;
    binom(n, p) * (1..=p).map(|k| binom(p, k) * binom(n.saturating_sub(p), p - k) * g_vars[k]).sum::<f64>()
}

/// Exact ingredients from a tabulated kernel.
pub fn sigma2_exact_tensor(t: &Tensor, w: &[f64], n: usize) -> SigmaSquared {
    let gs = g_tensors(t, w);
    let g0 = gs[0].data[0];
    let mut vars = vec![0.0];
    for g in gs.iter().skip(1) {
        vars.push(g.norm2(w) - g0 * g0);
    }
    let p = t.order;
    SigmaSquared::from_parts(n, g0, vars, vec![0.0; p + 1])
}

/// Normalizing variance at sample size `n`.
pub fn variance_sigma2(kernel: &KernelSpec, dist: &DistributionSpec, n: usize, mode: Mode) -> Result<SigmaSquared> {
    let p = kernel.order();
    match mode {
        Mode::Exact => {
            let fs = dist.finite().ok_or_else(|| Error::InvalidArgument("exact mode needs a finite space".into()))?;
            let t = tabulate(kernel.as_ref(), fs, n)?;
            Ok(sigma2_exact_tensor(&t, &fs.weights, n))
        }
        Mode::MonteCarlo(budget) => {
            // One draw: X_1..X_p and an independent copy Y_1..Y_p. psi(X) psi(X_1..X_k, Y_{k+1..p})
            // has mean E g_k^2; subtracting psi(X) psi(Y) gives Var g_k without bias.
            let d = dist.dim();
            let batches = 20usize;
            let per = budget.m.div_ceil(batches);
            let batch_means: Vec<(f64, Vec<f64>)> = (0..batches)
                .map(|b| {
                    let mut rng = budget.stream.child(b as u64).rng();
                    let mut x = vec![0.0; p * d];
                    let mut y = vec![0.0; p * d];
                    let mut acc = vec![0.0; p + 1];
                    let mut g0 = 0.0;
                    for _ in 0..per {
                        for c in x.chunks_mut(d) {
                            let _ = dist.draw_into(&mut rng, c);
                        }
                        for c in y.chunks_mut(d) {
                            let _ = dist.draw_into(&mut rng, c);
                        }
                        let xs: Vec<&[f64]> = x.chunks(d).collect();
                        let ys: Vec<&[f64]> = y.chunks(d).collect();
                        let fx = kernel.eval(&xs, n);
                        let fy = kernel.eval(&ys, n);
                        g0 += 0.5 * (fx + fy);
                        for k in 1..=p {
                            let mixed: Vec<&[f64]> = xs[..k].iter().chain(ys[k..].iter()).copied().collect();
                            acc[k] += fx * kernel.eval(&mixed, n) - fx * fy;
                        }
                    }
                    (g0 / per as f64, acc.iter().map(|a| a / per as f64).collect())
                })
                .collect();
            let bf = batches as f64;
            let g0 = batch_means.iter().map(|b| b.0).sum::<f64>() / bf;
            let mut vars = vec![0.0; p + 1];
            let mut ses = vec![0.0; p + 1];
            for k in 1..=p {
                let vals: Vec<f64> = batch_means.iter().map(|b| b.1[k]).collect();
                let (m, se) = mean_se(&vals);
                vars[k] = m;
                ses[k] = se;
            }
            Ok(SigmaSquared::from_parts(n, g0, vars, ses))
        }
    }
}

/// Sample mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UstatValue {
    pub value: f64,
    /// Set when the sample is shorter than the kernel order.
    pub too_short: bool,
}

fn sum_over_subsets<'a>(
    kernel: &dyn Kernel,
    sample: &'a Sample,
    upto: usize,
    need: usize,
    start: usize,
    args: &mut Vec<&'a [f64]>,
    n: usize,
) -> f64 {
    if need == 0 {
        return kernel.eval(args, n);
    }
    let mut s = 0.0;
    for i in start..=upto - need {
        args.push(sample.point(i));
        s += sum_over_subsets(kernel, sample, upto, need - 1, i + 1, args, n);
        args.pop();
    }
    s
}

/// `J_p^{(N)}(kernel)` over the whole sample, with the kernel evaluated at size `n`.
pub fn eval_ustat(kernel: &dyn Kernel, sample: &Sample, n: usize) -> UstatValue {
    let p = kernel.order();
    let len = sample.len();
    if len < p {
        return UstatValue { value: 0.0, too_short: true };
    }
    let mut args = Vec::with_capacity(p);
    UstatValue { value: sum_over_subsets(kernel, sample, len, p, 0, &mut args, n), too_short: false }
}

/// Prefix length `floor(n t)`, robust to representation error in `t`.
pub fn prefix_len(n: usize, t: f64) -> usize {
    ((n as f64 * t + 1e-9).floor().max(0.0) as usize).min(n)
}

/// Up to `MAX_GRID_POINTS + 1` equispaced times `k/n` including 0 and 1.
pub fn default_grid(n: usize) -> Vec<f64> {
    let m = n.min(MAX_GRID_POINTS);
    (0..=m).map(|j| ((j * n) / m.max(1)) as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SequentialPath {
    pub n: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// `U(k) = J_p^{(k)}` for every `k = 0..=n`, built incrementally (the new point is
/// combined with every (p-1)-subset of its predecessors).
pub fn full_upath(kernel: &dyn Kernel, sample: &Sample) -> Result<Vec<f64>> {
    let p = kernel.order();
    if p == 0 || p > MAX_PATH_ORDER {
        return invalid(format!("sequential paths support orders 1..={MAX_PATH_ORDER}, got {p}"));
    }
    let n = sample.len();
    let mut out = vec![0.0; n + 1];
    let mut running = 0.0;
    let mut args: Vec<&[f64]> = Vec::with_capacity(p);
    for m in 0..n {
        if m + 1 >= p {
            args.clear();
            running += add_new_point(kernel, sample, m, p - 1, 0, &mut args, n);
        }
        out[m + 1] = running;
    }
    Ok(out)
}

fn add_new_point<'a>(
    kernel: &dyn Kernel,
    sample: &'a Sample,
    new: usize,
    need: usize,
    start: usize,
    args: &mut Vec<&'a [f64]>,
    n: usize,
) -> f64 {
    if need == 0 {
        args.push(sample.point(new));
        let v = kernel.eval(args, n);
        args.pop();
        return v;
    }
    let mut s = 0.0;
    for i in start..=new - need {
        args.push(sample.point(i));
        s += add_new_point(kernel, sample, new, need - 1, i + 1, args, n);
        args.pop();
    }
    s
}

/// Sequential path recorded at `grid` (defaults to [`default_grid`]).
pub fn sequential_upath(kernel: &dyn Kernel, sample: &Sample, grid: Option<&[f64]>) -> Result<SequentialPath> {
    let n = sample.len();
    let full = full_upath(kernel, sample)?;
    let times = grid.map(|g| g.to_vec()).unwrap_or_else(|| default_grid(n));
    let values = times.iter().map(|&t| full[prefix_len(n, t)]).collect();
    Ok(SequentialPath { n, times, values })
}

/// Centering and scale turning `U` into `W_n`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Normalizer {
    pub order: usize,
    pub g0: f64,
    pub sigma: f64,
}

impl Normalizer {
    pub fn new(order: usize, g0: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 1e-300) || !sigma2.is_finite() {
            return Err(Error::VanishingVariance(sigma2));
        }
        Ok(Normalizer { order, g0, sigma: sigma2.sqrt() })
    }

    pub fn from_sigma2(s: &SigmaSquared) -> Result<Self> {
        Normalizer::new(s.order, s.g0, s.via_g_variances)
    }

    pub fn apply(&self, k: usize, u: f64) -> f64 {
        (u - binom(k, self.order) * self.g0) / self.sigma
    }
}

/// `W_n(t) = (U(t) - C(floor(nt), p) g_0) / sigma_n`.
pub fn normalize_path(path: &SequentialPath, norm: &Normalizer) -> SequentialPath {
    let values = path.times.iter().zip(&path.values).map(|(&t, &u)| norm.apply(prefix_len(path.n, t), u)).collect();
    SequentialPath { n: path.n, times: path.times.clone(), values }
}

/// Normalized paths of independent replicates; replicate `r` uses `stream.child(r)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_normalized_paths(
    kernel: &dyn Kernel,
    dist: &DistributionSpec,
    n: usize,
    grid: &[f64],
    norm: &Normalizer,
    replicates: usize,
    stream: RngStream,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let paths = map_indexed(exec, replicates, |r| -> Result<Vec<f64>> {
        let mut rng = stream.child(r as u64).rng();
        let sample = dist.sample(n, &mut rng)?;
        let full = full_upath(kernel, &sample)?;
        Ok(grid
            .iter()
            .map(|&t| {
                let k = prefix_len(n, t);
                norm.apply(k, full[k])
            })
            .collect())
    });
    paths.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DegeneracyResidual {
    pub residual: f64,
    pub standard_error: f64,
    pub degenerate: bool,
}

/// Largest `|E kernel(x_1..x_{p-1}, X)|`: exact over all atom tuples, or over
/// random probe tuples by Monte Carlo (passes within 4 standard errors).
pub fn check_degeneracy(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, n: usize, mode: Mode) -> Result<DegeneracyResidual> {
    let p = kernel.order();
    if p == 0 {
        return invalid("order-0 kernels are never degenerate");
    }
    match mode {
        Mode::Exact => {
            let fs = need_finite(dist)?;
            let t = tabulate(kernel.as_ref(), &fs, n)?;
            let g = t.integrate_last(1, &fs.weights);
            let scale = t.data.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            let residual = g.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            Ok(DegeneracyResidual { residual, standard_error: 0.0, degenerate: residual <= 1e-12 * scale })
        }
        Mode::MonteCarlo(budget) => {
            let proj = McProjection { inner: kernel.clone(), dist: dist.clone(), level: p - 1, n, budget };
            let d = dist.dim();
            let mut rng = budget.stream.labeled("probes").rng();
            let mut worst = (0.0f64, 0.0f64, true);
            let mut buf = vec![0.0; (p - 1) * d];
            for _ in 0..32 {
                for c in buf.chunks_mut(d.max(1)) {
                    dist.draw_into(&mut rng, c)?;
                }
                let args: Vec<&[f64]> = if p == 1 { Vec::new() } else { buf.chunks(d).collect() };
                let (m, se) = proj.eval_with_se(&args);
                let ok = m.abs() <= 4.0 * se + 1e-12;
                if m.abs() > worst.0 {
                    worst = (m.abs(), se, worst.2 && ok);
                } else {
                    worst.2 &= ok;
                }
                let _ = rng.gen::<u8>();
            }
            Ok(DegeneracyResidual { residual: worst.0, standard_error: worst.1, degenerate: worst.2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample_spaces::DistributionSpec;

    fn small_space() -> Arc<DistributionSpec> {
        Arc::new(DistributionSpec::Finite(FiniteSpace::scalar(&[-1.0, 0.5, 2.0], &[0.2, 0.5, 0.3]).unwrap()))
    }

    #[test]
    fn product_kernel_projections_by_hand() {
        let dist = small_space();
        let k: KernelSpec = Arc::new(ProductKernel { order: 2 });
        let mean = -0.2 + 0.25 + 0.6;
        let g1 = hoeffding_g(&k, &dist, 1, 10, Mode::Exact).unwrap();
        assert!((g1.eval(&[&[2.0]], 10) - 2.0 * mean).abs() < 1e-14);
        let psi2 = hoeffding_psi(&k, &dist, 2, 10, Mode::Exact).unwrap();
        let expect = (2.0 - mean) * (0.5 - mean);
        assert!((psi2.eval(&[&[2.0], &[0.5]], 10) - expect).abs() < 1e-14);
    }

    #[test]
    fn sigma_forms_agree_for_product() {
        let dist = small_space();
        let k: KernelSpec = Arc::new(ProductKernel { order: 3 });
        let s = variance_sigma2(&k, &dist, 9, Mode::Exact).unwrap();
        assert!((s.via_psi_norms - s.via_g_variances).abs() <= 1e-9 * s.via_g_variances);
    }

    #[test]
    fn sequential_path_matches_direct() {
        let dist = small_space();
        let mut rng = RngStream::new(3, 1).rng();
        let sample = dist.sample(12, &mut rng).unwrap();
        let k = ProductKernel { order: 3 };
        let full = full_upath(&k, &sample).unwrap();
        for m in [0, 2, 3, 7, 12] {
            let direct = eval_ustat(&k, &sample.prefix(m), 12).value;
            assert!((full[m] - direct).abs() < 1e-9);
        }
        assert!(eval_ustat(&k, &sample.prefix(2), 12).too_short);
    }

    #[test]
    fn grid_has_exact_prefixes() {
        let g = default_grid(1024);
        assert_eq!(g.len(), 513);
        assert_eq!(prefix_len(1024, g[1]), 2);
        assert_eq!(prefix_len(1024, g[512]), 1024);
        assert_eq!(default_grid(10).len(), 11);
        assert_eq!(prefix_len(10, 0.3), 3);
    }

    #[test]
    fn monte_carlo_sigma_close_to_exact() {
        let dist = small_space();
        let k: KernelSpec = Arc::new(ProductKernel { order: 2 });
        let ex = variance_sigma2(&k, &dist, 50, Mode::Exact).unwrap();
        let mc = variance_sigma2(&k, &dist, 50, Mode::MonteCarlo(McBudget::new(200_000, RngStream::new(5, 0)).unwrap())).unwrap();
        for kk in 1..=2 {
            assert!((ex.g_variances[kk] - mc.g_variances[kk]).abs() < 5.0 * mc.g_variance_se[kk] + 1e-3);
        }
    }

    #[test]
    fn degeneracy_of_circle_window() {
        let dist = Arc::new(DistributionSpec::CircleUniform);
        let k: KernelSpec = Arc::new(CircleWindow { width_rule: PowerRule { c: 0.5, a: 0.5 } });
        let r = check_degeneracy(&k, &dist, 100, Mode::MonteCarlo(McBudget::new(4000, RngStream::new(1, 2)).unwrap())).unwrap();
        assert!(r.degenerate, "{r:?}");
        let k2: KernelSpec = Arc::new(ProductKernel { order: 2 });
        let fin = small_space();
        let r2 = check_degeneracy(&k2, &fin, 10, Mode::Exact).unwrap();
        assert!(!r2.degenerate);
    }

    #[test]
    fn table_kernel_from_csv() {
        let fs = Arc::new(FiniteSpace::scalar(&[0.0, 1.0], &[0.5, 0.5]).unwrap());
        let t = TensorKernel::from_csv(fs.clone(), 2, "0,1,2.5\n1,1,-1\n".as_bytes()).unwrap();
        assert_eq!(t.eval(&[&[1.0], &[0.0]], 0), 2.5);
        assert_eq!(t.eval(&[&[0.0], &[0.0]], 0), 0.0);
        assert!(TensorKernel::from_csv(fs, 2, "0,1,2.5\n1,0,3\n".as_bytes()).is_err());
    }
}

//! Contraction `psi *_r^l phi`: `r` coordinates are shared by both kernels and
//! `l` of them are integrated out. Output arguments are ordered
//! `(y_1..y_{r-l}, t_1..t_{p-r}, s_1..s_{q-r})`; `l = 0` is the pointwise product
//! on shared coordinates and `l = r = 0` the tensor product.

use std::sync::Arc;

use crate::combin::{for_each_index, permutations};
use crate::error::{invalid, Result};
use crate::parallel::{map_indexed, Execution};
use crate::sample_spaces::{check_budget, DistributionSpec, RngStream};
use crate::tensor::Tensor;
use crate::ustat_core::{mean_se, Kernel, KernelSpec};

fn check_indices(p: usize, q: usize, r: usize, l: usize) -> Result<()> {
    if l > r || r > p.min(q) {
        return invalid(format!("contraction needs l <= r <= min(p, q); got p={p} q={q} r={r} l={l}"));
    }
    Ok(())
}

/// Exact contraction of two tabulated kernels on a finite space with weights `w`.
pub fn contract_tensor(psi: &Tensor, phi: &Tensor, r: usize, l: usize, w: &[f64]) -> Result<Tensor> {
    let (p, q) = (psi.order, phi.order);
    check_indices(p, q, r, l)?;
    let a = w.len();
    let out_order = p + q - r - l;
    check_budget(a, out_order + l)?;
    let mut ia = vec![0usize; p];
    let mut ib = vec![0usize; q];
    let (ny, nt) = (r - l, p - r);
    let mut out = Tensor::zeros(out_order, a)?;
    let mut pos = 0;
    for_each_index(out_order, a, |o| {
        let (y, rest) = o.split_at(ny);
        let (t, s) = rest.split_at(nt);
        ia[l..l + ny].copy_from_slice(y);
        ia[l + ny..].copy_from_slice(t);
        ib[l..l + ny].copy_from_slice(y);
        ib[l + ny..].copy_from_slice(s);
        let mut acc = 0.0;
        for_each_index(l, a, |x| {
            ia[..l].copy_from_slice(x);
            ib[..l].copy_from_slice(x);
            let wt: f64 = x.iter().map(|&i| w[i]).product();
            acc += wt * psi.get(&ia) * phi.get(&ib);
        });
        out.data[pos] = acc;
        pos += 1;
    });
    if out_order == 0 {
        out.size = 0;
    }
    Ok(out)
}

/// Lazily evaluated contraction of two kernels; the `l` integrated coordinates are
/// averaged over `m_inner` fresh draws (exact when `l = 0`).
pub struct ContractionKernel {
    pub psi: KernelSpec,
    pub phi: KernelSpec,
    pub r: usize,
    pub l: usize,
    pub dist: Arc<DistributionSpec>,
    pub m_inner: usize,
    pub stream: RngStream,
    pub n: usize,
}

impl ContractionKernel {
    pub fn new(
        psi: KernelSpec,
        phi: KernelSpec,
        r: usize,
        l: usize,
        dist: Arc<DistributionSpec>,
        m_inner: usize,
        stream: RngStream,
        n: usize,
    ) -> Result<Self> {
        check_indices(psi.order(), phi.order(), r, l)?;
        Ok(ContractionKernel { psi, phi, r, l, dist, m_inner, stream, n })
    }

    /// Mean of `psi(x, y, t) phi(x, y, s)` over `m` draws of `x` from `rng`.
    fn inner_mean(&self, args: &[&[f64]], m: usize, rng: &mut impl rand::Rng, buf: &mut Vec<f64>) -> f64 {
        let (p, q, r, l) = (self.psi.order(), self.phi.order(), self.r, self.l);
        let (ny, nt) = (r - l, p - r);
        let y = &args[..ny];
        let t = &args[ny..ny + nt];
        let s = &args[ny + nt..];
        let d = self.dist.dim();
        let draws = if l == 0 { 1 } else { m };
        buf.resize(l * d, 0.0);
        let mut acc = 0.0;
        for _ in 0..draws {
            for c in buf.chunks_mut(d) {
                let _ = self.dist.draw_into(rng, c);
            }
            let xs: Vec<&[f64]> = buf.chunks(d).collect();
            let mut a: Vec<&[f64]> = Vec::with_capacity(p);
            a.extend(&xs);
            a.extend(y);
            a.extend(t);
            let mut b: Vec<&[f64]> = Vec::with_capacity(q);
            b.extend(&xs);
            b.extend(y);
            b.extend(s);
            acc += self.psi.eval(&a, self.n) * self.phi.eval(&b, self.n);
        }
        acc / draws as f64
    }
}

impl Kernel for ContractionKernel {
    fn order(&self) -> usize {
        self.psi.order() + self.phi.order() - self.r - self.l
    }
    fn eval(&self, args: &[&[f64]], _n: usize) -> f64 {
        let h = args.iter().flat_map(|a| a.iter()).fold(7u64, |h, v| crate::sample_spaces::splitmix64(h ^ v.to_bits()));
        let mut rng = self.stream.child(h).rng();
        let mut buf = Vec::new();
        self.inner_mean(args, self.m_inner, &mut rng, &mut buf)
    }
    fn name(&self) -> String {
        format!("({})*_{}^{}({})", self.psi.name(), self.r, self.l, self.phi.name())
    }
}

/// Monte Carlo settings for contraction norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBudget {
    pub m_out: usize,
    pub m_in: usize,
    pub batches: usize,
    pub stream: RngStream,
}

impl NormBudget {
    pub fn new(stream: RngStream) -> Self {
        NormBudget { m_out: 4000, m_in: 2000, batches: 20, stream }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NormEstimate {
    pub norm: f64,
    pub norm2: f64,
    /// Standard error of `norm2` (zero for exact values).
    pub se_norm2: f64,
}

impl NormEstimate {
    pub fn exact(norm2: f64) -> Self {
        NormEstimate { norm: norm2.max(0.0).sqrt(), norm2, se_norm2: 0.0 }
    }
}

/// Monte Carlo `||psi *_r^l phi||`: for each outer draw two independent inner means
/// are multiplied, which is unbiased for the squared contraction.
pub fn contraction_norm_mc(c: &ContractionKernel, budget: NormBudget, exec: Execution) -> NormEstimate {
    let order = c.order();
    let d = c.dist.dim();
    let per = budget.m_out.div_ceil(budget.batches);
    let half = (budget.m_in / 2).max(1);
    let batch_means = map_indexed(exec, budget.batches, |b| {
        let mut rng = budget.stream.child(b as u64).rng();
        let mut z = vec![0.0; order * d];
        let mut buf = Vec::new();
        let mut acc = 0.0;
        for _ in 0..per {
            for ch in z.chunks_mut(d) {
                let _ = c.dist.draw_into(&mut rng, ch);
            }
            let args: Vec<&[f64]> = z.chunks(d).collect();
            let v = if c.l == 0 {
                let a = c.inner_mean(&args, 1, &mut rng, &mut buf);
                a * a
            } else {
                let a = c.inner_mean(&args, half, &mut rng, &mut buf);
                let b = c.inner_mean(&args, half, &mut rng, &mut buf);
                a * b
            };
            acc += v;
        }
        acc / per as f64
    });
    let (m, se) = mean_se(&batch_means);
    NormEstimate { norm: m.max(0.0).sqrt(), norm2: m, se_norm2: se }
}

/// `||psi *_r^l phi||`, exact on finite spaces and Monte Carlo otherwise.
#[allow(clippy::too_many_arguments)]
pub fn contraction_norm(
    psi: &KernelSpec,
    phi: &KernelSpec,
    r: usize,
    l: usize,
    dist: &Arc<DistributionSpec>,
    n: usize,
    budget: Option<NormBudget>,
    exec: Execution,
) -> Result<NormEstimate> {
    match (dist.finite(), budget) {
        (Some(fs), None) => {
            let a = crate::ustat_core::tabulate(psi.as_ref(), fs, n)?;
            let b = crate::ustat_core::tabulate(phi.as_ref(), fs, n)?;
            let c = contract_tensor(&a, &b, r, l, &fs.weights)?;
            Ok(NormEstimate::exact(c.norm2(&fs.weights)))
        }
        (_, Some(b)) => {
            let c = ContractionKernel::new(psi.clone(), phi.clone(), r, l, dist.clone(), b.m_in, b.stream, n)?;
            Ok(contraction_norm_mc(&c, b, exec))
        }
        (None, None) => invalid("continuous spaces need a Monte Carlo budget"),
    }
}

/// Average of a kernel over all permutations of its arguments.
pub struct Symmetrized {
    pub inner: KernelSpec,
    perms: Vec<Vec<usize>>,
}

impl Symmetrized {
    pub fn new(inner: KernelSpec) -> Self {
        let perms = permutations(inner.order());
        Symmetrized { inner, perms }
    }
}

impl Kernel for Symmetrized {
    fn order(&self) -> usize {
        self.inner.order()
    }
    fn eval(&self, args: &[&[f64]], n: usize) -> f64 {
        let mut buf: Vec<&[f64]> = args.to_vec();
        let s: f64 = self
            .perms
            .iter()
            .map(|p| {
                for (j, &pj) in p.iter().enumerate() {
                    buf[j] = args[pj];
                }
                self.inner.eval(&buf, n)
            })
            .sum();
        s / self.perms.len() as f64
    }
    fn name(&self) -> String {
        format!("sym[{}]", self.inner.name())
    }
    fn size_dependent(&self) -> bool {
        self.inner.size_dependent()
    }
}

pub fn symmetrize(kernel: KernelSpec) -> KernelSpec {
    Arc::new(Symmetrized::new(kernel))
}

/// One numerical instance of a contraction-norm inequality or identity.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LemmaCheck {
    pub item: &'static str,
    pub r: usize,
    pub l: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs <= rhs + tol` for inequalities, `|lhs - rhs| <= tol` for identities.
    pub identity: bool,
}

impl LemmaCheck {
    pub fn holds(&self, tol: f64) -> bool {
        if self.identity {
            (self.lhs - self.rhs).abs() <= tol * (1.0 + self.rhs.abs())
        } else {
            self.lhs <= self.rhs + tol * (1.0 + self.rhs.abs())
        }
    }
}

fn cnorm(a: &Tensor, b: &Tensor, r: usize, l: usize, w: &[f64]) -> Result<f64> {
    Ok(contract_tensor(a, b, r, l, w)?.norm(w))
}

/// Items (ii) to (vi) of the contraction lemma for every admissible `(r, l)`.
pub fn lemma_battery(psi: &Tensor, phi: &Tensor, w: &[f64]) -> Result<Vec<LemmaCheck>> {
    let (p, q) = (psi.order, phi.order);
    let mut out = Vec::new();
    let l4 = psi.lq_norm(w, 4.0) * phi.lq_norm(w, 4.0);
    for r in 0..=p.min(q) {
        for l in 0..=r {
            let c = contract_tensor(psi, phi, r, l, w)?;
            let n2 = c.norm2(w);
            let rhs2 = cnorm(psi, psi, p, p - r + l, w)? * cnorm(phi, phi, q, q - r + l, w)?;
            out.push(LemmaCheck { item: "ii", r, l, lhs: n2, rhs: rhs2, identity: false });
            let rhs3 = cnorm(psi, psi, p, p - r, w)? * cnorm(phi, phi, q, q - r, w)?;
            out.push(LemmaCheck { item: "iii", r, l, lhs: n2, rhs: rhs3, identity: false });
            out.push(LemmaCheck { item: "iv", r, l, lhs: n2.sqrt(), rhs: l4, identity: false });
            if r == l {
                out.push(LemmaCheck { item: "v", r, l, lhs: n2.sqrt(), rhs: psi.norm(w) * phi.norm(w), identity: false });
            }
            let a = contract_tensor(psi, psi, p - l, p - r, w)?;
            let b = contract_tensor(phi, phi, q - l, q - r, w)?;
            out.push(LemmaCheck { item: "vi.identity", r, l, lhs: n2, rhs: a.inner(&b, w), identity: true });
            let rhs6 = cnorm(psi, psi, r, l, w)? * cnorm(phi, phi, r, l, w)?;
            out.push(LemmaCheck { item: "vi.bound", r, l, lhs: n2, rhs: rhs6, identity: false });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample_spaces::FiniteSpace;
    use crate::ustat_core::{tabulate, CircleWindow, PowerRule, ProductKernel};

    fn space() -> FiniteSpace {
        FiniteSpace::scalar(&[-1.0, 1.0, 3.0], &[0.25, 0.5, 0.25]).unwrap()
    }

    #[test]
    fn trivial_contractions() {
        let fs = space();
        let w = &fs.weights;
        let k = ProductKernel { order: 2 };
        let t = tabulate(&k, &fs, 0).unwrap();
        // l = r = 0: tensor product
        let tp = contract_tensor(&t, &t, 0, 0, w).unwrap();
        assert_eq!(tp.order, 4);
        assert!((tp.norm2(w) - t.norm2(w).powi(2)).abs() < 1e-10);
        // r = l = p: inner product
        let ip = contract_tensor(&t, &t, 2, 2, w).unwrap();
        assert!((ip.value() - t.norm2(w)).abs() < 1e-12);
        // l = 0: pointwise product on shared coordinates
        let pp = contract_tensor(&t, &t, 2, 0, w).unwrap();
        assert!(pp.max_abs_diff(&Tensor { order: 2, size: 3, data: t.data.iter().map(|v| v * v).collect() }) < 1e-12);
    }

    #[test]
    fn argument_order_y_t_s() {
        let fs = space();
        let w = &fs.weights;
        // psi(x, y) = x + 10 y; phi(x, s, u) = x * s - u
        let psi = Tensor::from_fn(2, 3, |i| fs.atoms[i[0]][0] + 10.0 * fs.atoms[i[1]][0]).unwrap();
        let phi = Tensor::from_fn(3, 3, |i| fs.atoms[i[0]][0] * fs.atoms[i[1]][0] - fs.atoms[i[2]][0]).unwrap();
        let c = contract_tensor(&psi, &phi, 1, 1, w).unwrap();
        assert_eq!(c.order, 3);
        for (t, s, u) in [(0, 1, 2), (2, 0, 1)] {
            let mut e = 0.0;
            for x in 0..3 {
                let xv = fs.atoms[x][0];
                e += w[x] * (xv + 10.0 * fs.atoms[t][0]) * (xv * fs.atoms[s][0] - fs.atoms[u][0]);
            }
            assert!((c.get(&[t, s, u]) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_norm_matches_closed_form() {
        // psi(x, y) = 1{d(x, y) < h} - 2h on the circle: ||psi||^2 = 2h(1 - 2h)
        let h = 0.1;
        let psi: KernelSpec = Arc::new(CircleWindow { width_rule: PowerRule { c: h, a: 0.0 } });
        let dist = Arc::new(DistributionSpec::CircleUniform);
        let b = NormBudget { m_out: 20_000, m_in: 2, batches: 20, stream: RngStream::new(9, 9) };
        let e = contraction_norm(&psi, &psi, 2, 0, &dist, 1, Some(b), Execution::Parallel).unwrap();
        // ||psi^2||^2 = E psi^4
        let exact = 2.0 * h * (1.0 - 2.0 * h).powi(4) + (1.0 - 2.0 * h) * (2.0 * h).powi(4);
        assert!((e.norm2 - exact).abs() < 4.0 * e.se_norm2, "{e:?} vs {exact}");
        let b2 = NormBudget { m_out: 4000, m_in: 400, batches: 20, stream: RngStream::new(9, 10) };
        let e2 = contraction_norm(&psi, &psi, 2, 2, &dist, 1, Some(b2), Execution::Parallel).unwrap();
        let sq = 2.0 * h * (1.0 - 2.0 * h);
        assert!((e2.norm2 - sq * sq).abs() < 4.0 * e2.se_norm2 + 1e-4, "{e2:?}");
    }

    #[test]
    fn lemma_items_hold() {
        use rand::Rng;
        let fs = space();
        let w = &fs.weights;
        let mut rng = RngStream::new(4, 1).rng();
        let psi = Tensor::from_fn(2, 3, |_| rng.gen::<f64>() - 0.5).unwrap().symmetrize().unwrap();
        let phi = Tensor::from_fn(3, 3, |_| rng.gen::<f64>() - 0.3).unwrap().symmetrize().unwrap();
        let checks = lemma_battery(&psi, &phi, w).unwrap();
        assert_eq!(checks.iter().filter(|c| c.item == "vi.identity").count(), 6);
        for c in &checks {
            assert!(c.holds(1e-10), "{c:?}");
        }
    }

    #[test]
    fn symmetrized_kernel() {
        let k = crate::ustat_core::fn_kernel(2, "asym", |a, _| a[0][0] - 2.0 * a[1][0]);
        let s = symmetrize(k);
        assert!((s.eval(&[&[1.0], &[3.0]], 0) - s.eval(&[&[3.0], &[1.0]], 0)).abs() < 1e-12);
    }
}

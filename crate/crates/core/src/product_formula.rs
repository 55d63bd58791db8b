//! Hoeffding decomposition of a product `J_p^{(n)}(psi) J_q^{(m)}(phi)` of two
//! degenerate U-statistics on a finite space, evaluated exactly.

use std::collections::BTreeMap;

use rand::Rng;

use crate::combin::{binom_i, combinations, for_each_index, multinomial3, subsets};
use crate::contractions::contract_tensor;
use crate::error::{invalid, Error, Result};
use crate::sample_spaces::FiniteSpace;
use crate::tensor::Tensor;
use crate::ustat_core::{g_tensors, j_sum_tensor, psi_tensors};

/// Largest `p + q` handled.
pub const MAX_ORDER_SUM: usize = 4;
/// Largest second sample size handled.
pub const MAX_M: usize = 8;
/// Largest number of atoms handled.
pub const MAX_ATOMS: usize = 4;

/// Triples `(A, B, C)` partitioning `L` (0-based indices, `[n] = 0..n`) with
/// `A, B` inside `[n]`, `|A| = 2r + |L| - p - q`, `|B| = p - r`, `|C| = q - r`.
pub type Triple = (Vec<usize>, Vec<usize>, Vec<usize>);

pub fn pi_triples(r: usize, n: usize, m: usize, l_set: &[usize], p: usize, q: usize) -> Result<Vec<Triple>> {
    if l_set.iter().any(|&i| i >= m) || l_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidIndex(format!("{l_set:?} must be increasing and inside [m]")));
    }
    let k = l_set.len() as i64;
    let (ri, pi, qi) = (r as i64, p as i64, q as i64);
    let a_size = 2 * ri + k - pi - qi;
    let b_size = pi - ri;
    let c_size = qi - ri;
    if a_size < 0 || b_size < 0 || c_size < 0 {
        return Ok(vec![]);
    }
    let low: Vec<usize> = l_set.iter().copied().filter(|&i| i < n).collect();
    let high: Vec<usize> = l_set.iter().copied().filter(|&i| i >= n).collect();
    let c_low = c_size - high.len() as i64;
    if c_low < 0 {
        return Ok(vec![]);
    }
    let mut out = Vec::new();
    for cl in combinations(low.len(), c_low as usize) {
        let c_part: Vec<usize> = cl.iter().map(|&i| low[i]).collect();
        let rest: Vec<usize> = low.iter().copied().filter(|i| !c_part.contains(i)).collect();
        for bl in combinations(rest.len(), b_size as usize) {
            let b: Vec<usize> = bl.iter().map(|&i| rest[i]).collect();
            let a: Vec<usize> = rest.iter().copied().filter(|i| !b.contains(i)).collect();
            if a.len() as i64 != a_size {
                continue;
            }
            let mut c: Vec<usize> = c_part.iter().chain(high.iter()).copied().collect();
            c.sort_unstable();
            out.push((a, b, c));
        }
    }
    Ok(out)
}

/// Canonical projection of a (not necessarily symmetric) tensor onto the
/// arguments listed in `keep`: `sum_{K in keep} (-1)^{|keep|-|K|}` times the
/// marginal on `K`, spread back over `keep`.
pub fn hoeffding_project_nonsym(f: &Tensor, keep: &[usize], w: &[f64]) -> Result<Tensor> {
    let j = keep.len();
    let mut out = Tensor::zeros(j, w.len())?;
    for sub in subsets(&(0..j).collect::<Vec<_>>()) {
        let positions: Vec<usize> = sub.iter().map(|&i| keep[i]).collect();
        let marg = f.marginal(&positions, w)?;
        let sign = if (j - sub.len()).is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut pos = 0;
        let mut sidx = Vec::with_capacity(sub.len());
        for_each_index(j, w.len(), |idx| {
            sidx.clear();
            sidx.extend(sub.iter().map(|&i| idx[i]));
            out.data[pos] += sign * marg.get(&sidx);
            pos += 1;
        });
    }
    if j == 0 {
        out.size = 0;
    }
    Ok(out)
}

/// Precomputed pieces for one `(psi, phi, n, m)` problem.
pub struct ProductDecomposition {
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub m: usize,
    w: Vec<f64>,
    /// Canonical part of `psi *_r^{p+q-r-k} phi`, keyed by `(r, k)`.
    parts: BTreeMap<(usize, usize), Tensor>,
    /// `||psi *_r^{p+q-r-k} phi||`, keyed by `(r, k)`.
    contraction_norms: BTreeMap<(usize, usize), f64>,
}

#[allow(clippy::reversed_empty_ranges)]
fn r_range(p: usize, q: usize, k: usize, s: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (p + q).saturating_sub(k).div_ceil(2);
    let hi = p.min(q.saturating_sub(s)).min((p + q).saturating_sub(k));
    if q < s || k > p + q {
        1..=0
    } else {
        lo..=hi
    }
}

impl ProductDecomposition {
    pub fn new(psi: &Tensor, phi: &Tensor, space: &FiniteSpace, n: usize, m: usize) -> Result<Self> {
        let (p, q) = (psi.order, phi.order);
        if p + q > MAX_ORDER_SUM || m > MAX_M || space.len() > MAX_ATOMS {
            return invalid(format!("budget: p+q <= {MAX_ORDER_SUM}, m <= {MAX_M}, atoms <= {MAX_ATOMS}"));
        }
        if n > m || n < p + q || p == 0 || q == 0 {
            return invalid(format!("need 1 <= p, q, p + q <= n <= m; got p={p} q={q} n={n} m={m}"));
        }
        let w = space.weights.clone();
        let mut parts = BTreeMap::new();
        let mut contraction_norms = BTreeMap::new();
        for k in 0..=(p + q) {
            for r in 0..=p.min(q) {
                if 2 * r + k < p + q || r + k > p + q {
                    continue;
                }
                let l = p + q - r - k;
                let c = contract_tensor(psi, phi, r, l, &w)?;
                contraction_norms.insert((r, k), c.norm(&w));
                let keep: Vec<usize> = (0..c.order).collect();
                parts.insert((r, k), hoeffding_project_nonsym(&c, &keep, &w)?);
            }
        }
        Ok(ProductDecomposition { p, q, n, m, w, parts, contraction_norms })
    }

    /// `U_M` with the observations on `M` given by `values` (atom indices, aligned with `M`).
    pub fn u_m(&self, m_set: &[usize], values: &[usize]) -> Result<f64> {
        let k = m_set.len();
        let s = m_set.iter().filter(|&&i| i >= self.n).count();
        let mut total = 0.0;
        for r in r_range(self.p, self.q, k, s) {
            let coef = binom_i((self.n + s) as i64 - k as i64, (self.p + self.q) as i64 - r as i64 - k as i64);
            if coef == 0.0 {
                continue;
            }
            let part = &self.parts[&(r, k)];
            let mut sum = 0.0;
            for (a, b, c) in pi_triples(r, self.n, self.m, m_set, self.p, self.q)? {
                let idx: Vec<usize> = a
                    .iter()
                    .chain(b.iter())
                    .chain(c.iter())
                    .map(|i| values[m_set.iter().position(|x| x == i).expect("member of M")])
                    .collect();
                sum += part.get(&idx);
            }
            total += coef * sum;
        }
        Ok(total)
    }

    /// `U_M` as a table over all atom assignments to `M`.
    pub fn u_m_table(&self, m_set: &[usize]) -> Result<Tensor> {
        let mut err = None;
        let t = Tensor::from_fn(m_set.len(), self.w.len(), |vals| match self.u_m(m_set, vals) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(t),
        }
    }

    /// Largest conditional mean of `U_M` given all but one of its coordinates.
    pub fn canonicality_residual(&self, m_set: &[usize]) -> Result<f64> {
        let t = self.u_m_table(m_set)?;
        let k = m_set.len();
        let mut worst: f64 = 0.0;
        for drop in 0..k {
            let keep: Vec<usize> = (0..k).filter(|&i| i != drop).collect();
            let marg = t.marginal(&keep, &self.w)?;
            worst = marg.data.iter().fold(worst, |a, v| a.max(v.abs()));
        }
        Ok(worst)
    }

    /// Standard deviation of `U_M` (zero for the empty set, which is constant).
    pub fn sd_u_m(&self, m_set: &[usize]) -> Result<f64> {
        if m_set.is_empty() {
            return Ok(0.0);
        }
        Ok(self.u_m_table(m_set)?.norm(&self.w))
    }

    /// Upper bound on `sd(U_M)` from the contraction norms.
    pub fn varum_bound(&self, k: usize, s: usize) -> f64 {
        let (p, q) = (self.p as i64, self.q as i64);
        let (ki, si) = (k as i64, s as i64);
        r_range(self.p, self.q, k, s)
            .map(|r| {
                let ri = r as i64;
                binom_i(self.n as i64 - ki + si, p + q - ri - ki)
                    * multinomial3(ki - si, 2 * ri + ki - p - q, p - ri, q - ri - si)
                    * self.contraction_norms.get(&(r, k)).copied().unwrap_or(0.0)
            })
            .sum()
    }

    /// Every `(M, U_M(X_M))` for the atom-index sample `xs` of length `m`.
    pub fn product_hoeffding(&self, xs: &[usize]) -> Result<Vec<(Vec<usize>, f64)>> {
        if xs.len() != self.m {
            return invalid("sample length must equal m");
        }
        let mut out = Vec::new();
        for k in 0..=(self.p + self.q).min(self.m) {
            for m_set in combinations(self.m, k) {
                let vals: Vec<usize> = m_set.iter().map(|&i| xs[i]).collect();
                out.push((m_set.clone(), self.u_m(&m_set, &vals)?));
            }
        }
        Ok(out)
    }
}

/// Directly computed `J_p^{(n)}(psi) * J_q^{(m)}(phi)`.
pub fn direct_product(psi: &Tensor, phi: &Tensor, xs: &[usize], n: usize) -> f64 {
    j_sum_tensor(psi, &xs[..n]) * j_sum_tensor(phi, xs)
}

/// A finite space with `atoms` scalar atoms and random positive weights.
pub fn random_space(atoms: usize, rng: &mut impl Rng) -> FiniteSpace {
    let raw: Vec<f64> = (0..atoms).map(|_| 0.2 + rng.gen::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = w[..atoms - 1].iter().sum();
    w[atoms - 1] = 1.0 - head;
    FiniteSpace::scalar(&(0..atoms).map(|i| i as f64).collect::<Vec<_>>(), &w).expect("valid weights")
}

/// Random symmetric degenerate kernel of the given order.
pub fn random_degenerate(order: usize, space: &FiniteSpace, rng: &mut impl Rng) -> Result<Tensor> {
    let raw = Tensor::from_fn(order, space.len(), |_| rng.gen::<f64>() * 2.0 - 1.0)?.symmetrize()?;
    let gs = g_tensors(&raw, &space.weights);
    let mut psis = psi_tensors(&gs, space.len())?;
    Ok(psis.pop().expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample_spaces::RngStream;

    #[test]
    fn triples_count_matches_multinomial() {
        // p = q = 2, L = {0,1,2} inside [n], r = 2: |A| = 1, |B| = 0, |C| = 0 -> impossible sizes sum
        let t = pi_triples(1, 4, 6, &[0, 1, 2], 2, 2).unwrap();
        // |A| = 1, |B| = 1, |C| = 1 -> 3!/(1!1!1!) = 6
        assert_eq!(t.len(), 6);
        // elements above n are forced into C
        let t2 = pi_triples(1, 3, 6, &[0, 1, 4], 2, 2).unwrap();
        assert!(t2.iter().all(|(_, _, c)| c.contains(&4)));
        assert_eq!(t2.len(), 2);
        assert!(pi_triples(1, 3, 6, &[1, 0], 2, 2).is_err());
    }

    #[test]
    fn order_one_case_by_hand() {
        let mut rng = RngStream::new(1, 1).rng();
        let fs = random_space(3, &mut rng);
        let psi = random_degenerate(1, &fs, &mut rng).unwrap();
        let phi = random_degenerate(1, &fs, &mut rng).unwrap();
        let d = ProductDecomposition::new(&psi, &phi, &fs, 3, 4).unwrap();
        // pair inside [n]: psi(x_i) phi(x_j) + psi(x_j) phi(x_i)
        let v = d.u_m(&[0, 2], &[1, 2]).unwrap();
        let e = psi.get(&[1]) * phi.get(&[2]) + psi.get(&[2]) * phi.get(&[1]);
        assert!((v - e).abs() < 1e-12);
        // pair straddling n: only psi(x_i) phi(x_j)
        let v2 = d.u_m(&[0, 3], &[1, 2]).unwrap();
        assert!((v2 - psi.get(&[1]) * phi.get(&[2])).abs() < 1e-12);
        // bound for k = 2, s = 0 is 2 ||psi|| ||phi||
        let b = d.varum_bound(2, 0);
        assert!((b - 2.0 * psi.norm(&fs.weights) * phi.norm(&fs.weights)).abs() < 1e-12);
    }

    #[test]
    fn decomposition_sums_to_product() {
        let mut rng = RngStream::new(2, 5).rng();
        let fs = random_space(3, &mut rng);
        let psi = random_degenerate(2, &fs, &mut rng).unwrap();
        let phi = random_degenerate(2, &fs, &mut rng).unwrap();
        let d = ProductDecomposition::new(&psi, &phi, &fs, 4, 6).unwrap();
        let xs: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let total: f64 = d.product_hoeffding(&xs).unwrap().iter().map(|(_, v)| v).sum();
        assert!((total - direct_product(&psi, &phi, &xs, 4)).abs() < 1e-9);
    }
}

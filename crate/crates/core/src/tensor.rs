//! Dense kernels on a finite space: a function of `order` atom indices stored
//! row-major (first argument most significant).

use crate::combin::{for_each_index, permutations};
use crate::error::{Error, Result};
use crate::sample_spaces::check_budget;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub order: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(order: usize, size: usize) -> Result<Tensor> {
        check_budget(size, order)?;
        Ok(Tensor { order, size, data: vec![0.0; size.pow(order as u32)] })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { order: 0, size: 0, data: vec![v] }
    }

    pub fn from_fn(order: usize, size: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Tensor> {
        let mut t = Tensor::zeros(order, size)?;
        let mut pos = 0;
        for_each_index(order, size, |idx| {
            t.data[pos] = f(idx);
            pos += 1;
        });
        Ok(t)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.size + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.order, 0);
        self.data[0]
    }

    /// `sum prod(w) f^2`.
    pub fn norm2(&self, w: &[f64]) -> f64 {
        self.weighted_sum(w, |v| v * v)
    }

    pub fn norm(&self, w: &[f64]) -> f64 {
        self.norm2(w).sqrt()
    }

    /// `(sum prod(w) |f|^q)^(1/q)`.
    pub fn lq_norm(&self, w: &[f64], q: f64) -> f64 {
        self.weighted_sum(w, |v| v.abs().powf(q)).powf(1.0 / q)
    }

    pub fn mean(&self, w: &[f64]) -> f64 {
        self.weighted_sum(w, |v| v)
    }

    pub fn inner(&self, other: &Tensor, w: &[f64]) -> f64 {
        assert_eq!(self.order, other.order);
        let mut s = 0.0;
        let mut pos = 0;
        for_each_index(self.order, w.len(), |idx| {
            let wt: f64 = idx.iter().map(|&i| w[i]).product();
            s += wt * self.data[pos] * other.data[pos];
            pos += 1;
        });
        s
    }

    fn weighted_sum(&self, w: &[f64], g: impl Fn(f64) -> f64) -> f64 {
        if self.order == 0 {
            return g(self.data[0]);
        }
        let mut s = 0.0;
        let mut pos = 0;
        for_each_index(self.order, w.len(), |idx| {
            let wt: f64 = idx.iter().map(|&i| w[i]).product();
            s += wt * g(self.data[pos]);
            pos += 1;
        });
        s
    }

    /// Integrates out the last `k` arguments against `w`.
    pub fn integrate_last(&self, k: usize, w: &[f64]) -> Tensor {
        assert!(k <= self.order);
        let keep = self.order - k;
        let inner = w.len().pow(k as u32);
        let mut weights = Vec::with_capacity(inner);
        for_each_index(k, w.len(), |idx| weights.push(idx.iter().map(|&i| w[i]).product::<f64>()));
        let outer = w.len().pow(keep as u32);
        let data = (0..outer)
            .map(|o| {
                let base = o * inner;
                weights.iter().enumerate().map(|(j, wt)| wt * self.data[base + j]).sum()
            })
            .collect();
        Tensor { order: keep, size: if keep == 0 { 0 } else { self.size }, data }
    }

    /// Integrates out the arguments whose positions are not in `keep` (kept in order).
    pub fn marginal(&self, keep: &[usize], w: &[f64]) -> Result<Tensor> {
        let a = w.len();
        let drop: Vec<usize> = (0..self.order).filter(|i| !keep.contains(i)).collect();
        let mut full = vec![0usize; self.order];
        let mut out = Tensor::zeros(keep.len(), a)?;
        let mut pos = 0;
        for_each_index(keep.len(), a, |kidx| {
            for (j, &p) in keep.iter().enumerate() {
                full[p] = kidx[j];
            }
            let mut s = 0.0;
            for_each_index(drop.len(), a, |didx| {
                let mut wt = 1.0;
                for (j, &p) in drop.iter().enumerate() {
                    full[p] = didx[j];
                    wt *= w[didx[j]];
                }
                s += wt * self.get(&full);
            });
            out.data[pos] = s;
            pos += 1;
        });
        if keep.is_empty() {
            out.size = 0;
        }
        Ok(out)
    }

    /// Average over all argument permutations.
    pub fn symmetrize(&self) -> Result<Tensor> {
        let perms = permutations(self.order);
        let mut buf = vec![0usize; self.order];
        let scale = 1.0 / perms.len() as f64;
        Tensor::from_fn(self.order, self.size, |idx| {
            perms
                .iter()
                .map(|p| {
                    for (j, &pj) in p.iter().enumerate() {
                        buf[j] = idx[pj];
                    }
                    self.get(&buf)
                })
                .sum::<f64>()
                * scale
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Largest deviation from permutation symmetry.
    pub fn asymmetry(&self) -> Result<f64> {
        Ok(self.max_abs_diff(&self.symmetrize()?))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor { order: self.order, size: self.size, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor, c: f64) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::InvalidArgument("tensor shapes differ".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }
}

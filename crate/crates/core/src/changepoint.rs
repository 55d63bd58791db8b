//! The two-sample process `Y_n(t) = sum_{i <= nt < j} psi(X_i, X_j)`, its exact
//! covariance and the normalizing constants of its Gaussian limit.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::fclt_conditions::{fit_rate, RateFit};
use crate::limit_processes;
use crate::parallel::{map_indexed, Execution};
use crate::sample_spaces::{DistributionSpec, FiniteSpace, RngStream, Sample};
use crate::ustat_core::{prefix_len, variance_sigma2, Kernel, KernelSpec, Mode};

/// Mean magnitude above which a kernel is re-centered before use.
pub const CENTERING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ChangepointStat {
    pub n: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub gamma_n: f64,
    pub normalized: Vec<f64>,
    pub notice: Option<String>,
}

/// `Y(k)` for every `k = 0..=n`, by moving one point at a time from the right block to the left.
pub fn ystat_full(kernel: &dyn Kernel, sample: &Sample, shift: f64) -> Result<Vec<f64>> {
    if kernel.order() != 2 {
        return invalid(format!("two-sample process needs an order-2 kernel, got {}", kernel.order()));
    }
    let n = sample.len();
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = kernel.eval(&[sample.point(i), sample.point(j)], n) - shift;
            right[i] += v;
            left[j] += v;
        }
    }
    let mut out = vec![0.0; n + 1];
    for v in 0..n {
        out[v + 1] = out[v] + right[v] - left[v];
    }
    // the full split is empty by definition; clear rounding residue
    out[n] = 0.0;
    Ok(out)
}

/// Exact `E psi` on a finite space, `None` otherwise.
pub fn finite_mean(kernel: &dyn Kernel, dist: &DistributionSpec, n: usize) -> Result<Option<f64>> {
    match dist.finite() {
        Some(_) => Ok(Some(dist.exact_expect(2, |a| kernel.eval(a, n))?)),
        None => Ok(None),
    }
}

/// `Y_n` on `grid` (every `k/n` by default) and `Y_n / gamma_n`.
/// `mean` is the kernel's known expectation; a nonzero value is subtracted with a notice.
pub fn ystat_path(kernel: &dyn Kernel, sample: &Sample, grid: Option<&[f64]>, gamma2: f64, mean: Option<f64>) -> Result<ChangepointStat> {
    if !(gamma2 > 0.0) || !gamma2.is_finite() {
        return Err(Error::VanishingVariance(gamma2));
    }
    let n = sample.len();
    let (shift, notice) = match mean {
        Some(m) if m.abs() > CENTERING_TOL => (m, Some(format!("kernel mean {m:e} subtracted"))),
        _ => (0.0, None),
    };
    let full = ystat_full(kernel, sample, shift)?;
    let times = grid.map(|g| g.to_vec()).unwrap_or_else(|| (0..=n).map(|k| k as f64 / n as f64).collect());
    let values: Vec<f64> = times.iter().map(|&t| full[prefix_len(n, t)]).collect();
    let gamma_n = gamma2.sqrt();
    let normalized = values.iter().map(|v| v / gamma_n).collect();
    Ok(ChangepointStat { n, times, values, gamma_n, normalized, notice })
}

fn ordered_counts(n: usize, s: f64, t: f64) -> (f64, f64, f64) {
    let (s, t) = (s.min(t), s.max(t));
    (prefix_len(n, s) as f64, prefix_len(n, t) as f64, n as f64)
}

/// `Cov(Y_n(s), Y_n(t))` from the pair-overlap counts, for `s <= t` (symmetric otherwise):
/// `g2 ks (n - kt) + g1 [ks (n - ks)(n - kt) + ks (kt - ks)(n - kt) + ks kt (n - kt)]`.
pub fn ycov_exact(gamma1_2: f64, gamma2_2: f64, n: usize, s: f64, t: f64) -> f64 {
    let (ks, kt, n) = ordered_counts(n, s, t);
    gamma2_2 * ks * (n - kt) + gamma1_2 * (ks * (n - ks) * (n - kt) + ks * (kt - ks) * (n - kt) + ks * kt * (n - kt))
}

/// The covariance display with the `+1` factors as printed; kept for comparison with
/// [`ycov_exact`], which it does not equal.
pub fn ycov_display(gamma1_2: f64, gamma2_2: f64, n: usize, s: f64, t: f64) -> f64 {
    let (ks, kt, n) = ordered_counts(n, s, t);
    gamma2_2 * ks * (n - kt + 1.0)
        + gamma1_2 * (ks * (n - kt + 1.0) * (n - ks + 1.0) + ks * (n - kt + 1.0) * (kt - ks + 1.0) + ks * kt * (n - kt + 1.0))
}

/// `gamma_n^2 = Var Y_n(1/2)`.
pub fn gamma_n2(gamma1_2: f64, gamma2_2: f64, n: usize) -> f64 {
    ycov_exact(gamma1_2, gamma2_2, n, 0.5, 0.5)
}

pub use limit_processes::limit_mixture_cov;

/// `Cov(Y_n(s), Y_n(t))` by enumerating every sample of size `n` on a finite space,
/// with the kernel centered at its exact mean.
pub fn ycov_enumerated(kernel: &dyn Kernel, space: &FiniteSpace, n: usize, s: f64, t: f64) -> Result<f64> {
    let dist = DistributionSpec::Finite(space.clone());
    let mean = dist.exact_expect(2, |a| kernel.eval(a, n))?;
    let (ks, kt) = (prefix_len(n, s), prefix_len(n, t));
    let moment = |f: &dyn Fn(&[f64]) -> f64| {
        space.sum_weighted(n, |idx| {
            let pts: Vec<Vec<f64>> = idx.iter().map(|&i| space.atoms[i].clone()).collect();
            let y = ystat_full(kernel, &Sample::from_points(&pts), mean).expect("order checked");
            f(&y)
        })
    };
    let (ys, yt) = (moment(&|y| y[ks])?, moment(&|y| y[kt])?);
    Ok(moment(&|y| y[ks] * y[kt])? - ys * yt)
}

/// Normalized paths `Y_n / gamma_n` of independent replicates on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ystat_paths(
    kernel: &dyn Kernel,
    dist: &DistributionSpec,
    n: usize,
    grid: &[f64],
    shift: f64,
    gamma_n: f64,
    replicates: usize,
    stream: RngStream,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    map_indexed(exec, replicates, |r| -> Result<Vec<f64>> {
        let mut rng = stream.child(r as u64).rng();
        let sample = dist.sample(n, &mut rng)?;
        let full = ystat_full(kernel, &sample, shift)?;
        Ok(grid.iter().map(|&t| full[prefix_len(n, t)] / gamma_n).collect())
    })
    .into_iter()
    .collect()
}

/// Trends of `c_1^2(n) = n^3 gamma_1^2 / gamma_n^2` and `c_2^2(n) = n^2 gamma_2^2 / gamma_n^2`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CTrend {
    pub ns: Vec<usize>,
    pub gamma1_2: Vec<f64>,
    pub gamma2_2: Vec<f64>,
    pub gamma_n2: Vec<f64>,
    pub c1_2: Vec<f64>,
    pub c2_2: Vec<f64>,
    /// `gamma_n^2 (c1^2 + c2^2) / (n^3 gamma_1^2 + n^2 gamma_2^2)` with the final-n constants.
    pub asymptotic_ratio: Vec<f64>,
    pub c1_fit: RateFit,
    pub c2_fit: RateFit,
    /// `gamma_n^2 / (gamma_1^2 n^3)`.
    pub cubic_ratio: Vec<f64>,
}

impl CTrend {
    pub fn last_c(&self) -> (f64, f64) {
        (*self.c1_2.last().unwrap_or(&0.0), *self.c2_2.last().unwrap_or(&0.0))
    }
}

/// Computes the `c_i^2` trends from the Hoeffding norms of `kernel` under `dist`.
pub fn estimate_c(kernel: &KernelSpec, dist: &Arc<DistributionSpec>, ns: &[usize], mode: Mode) -> Result<CTrend> {
    if kernel.order() != 2 {
        return invalid("the two-sample process needs an order-2 kernel");
    }
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    for &n in ns {
        let s = variance_sigma2(kernel, dist, n, mode)?;
        g1.push(s.psi_norms2[1]);
        g2.push(s.psi_norms2[2]);
    }
    let gn: Vec<f64> = ns.iter().zip(g1.iter().zip(&g2)).map(|(&n, (&a, &b))| gamma_n2(a, b, n)).collect();
    let c1: Vec<f64> = ns.iter().zip(g1.iter().zip(&gn)).map(|(&n, (&a, &g))| (n as f64).powi(3) * a / g).collect();
    let c2: Vec<f64> = ns.iter().zip(g2.iter().zip(&gn)).map(|(&n, (&b, &g))| (n as f64).powi(2) * b / g).collect();
    let (lc1, lc2) = (*c1.last().unwrap_or(&0.0), *c2.last().unwrap_or(&0.0));
    let asymptotic_ratio = ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let nf = n as f64;
            gn[i] * (lc1 + lc2) / (nf.powi(3) * g1[i] + nf.powi(2) * g2[i])
        })
        .collect();
    let cubic_ratio =
        ns.iter().enumerate().map(|(i, &n)| if g1[i] > 0.0 { gn[i] / (g1[i] * (n as f64).powi(3)) } else { f64::NAN }).collect();
    Ok(CTrend {
        ns: ns.to_vec(),
        c1_fit: fit_rate(ns, &c1),
        c2_fit: fit_rate(ns, &c2),
        gamma1_2: g1,
        gamma2_2: g2,
        gamma_n2: gn,
        c1_2: c1,
        c2_2: c2,
        asymptotic_ratio,
        cubic_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ustat_core::{full_upath, ProductKernel};

    #[test]
    fn small_hand_expansion() {
        let s = Sample::from_scalars(&[2.0, -1.0, 3.0]);
        let k = ProductKernel { order: 2 };
        let full = ystat_full(&k, &s, 0.0).unwrap();
        assert_eq!(full[0], 0.0);
        assert_eq!(full[3], 0.0);
        assert!((full[1] - 2.0 * (-1.0 + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn decomposition_identity() {
        let mut rng = RngStream::new(4, 0).rng();
        let s = DistributionSpec::cube(1).sample(40, &mut rng).unwrap();
        let k = ProductKernel { order: 2 };
        let y = ystat_full(&k, &s, 0.0).unwrap();
        let u = full_upath(&k, &s).unwrap();
        let n = s.len();
        for kk in 0..=n {
            let mut tail = 0.0;
            for i in kk..n {
                for j in i + 1..n {
                    tail += s.point(i)[0] * s.point(j)[0];
                }
            }
            assert!((y[kk] - (u[n] - u[kk] - tail)).abs() < 1e-10);
        }
    }

    #[test]
    fn covariance_values() {
        assert_eq!(ycov_display(1.0, 1.0, 4, 0.25, 0.5), 27.0);
        assert_eq!(ycov_exact(1.0, 1.0, 4, 0.25, 0.5), 14.0);
        assert_eq!(ycov_exact(1.0, 1.0, 9, 0.0, 0.5), 0.0);
        assert_eq!(ycov_exact(2.0, 3.0, 10, 1.0, 1.0), 0.0);
        assert_eq!(ycov_exact(2.0, 3.0, 10, 0.3, 0.7), ycov_exact(2.0, 3.0, 10, 0.7, 0.3));
        // gamma_n^2 / (gamma_1^2 n^3) -> 1/4
        let r = gamma_n2(1.0, 1.0, 100_000) / 1e15;
        assert!((r - 0.25).abs() < 1e-4);
    }

    #[test]
    fn exact_covariance_matches_enumeration() {
        let fs = FiniteSpace::scalar(&[0.0, 1.0, 3.0], &[0.3, 0.4, 0.3]).unwrap();
        let k = ProductKernel { order: 2 };
        let dist = Arc::new(DistributionSpec::Finite(fs.clone()));
        let g0 = finite_mean(&k, &dist, 1).unwrap().unwrap();
        let centered: KernelSpec = Arc::new(crate::ustat_core::Shifted { inner: Arc::new(ProductKernel { order: 2 }), shift: g0 });
        let sig = variance_sigma2(&centered, &dist, 2, Mode::Exact).unwrap();
        for n in 2..=5 {
            for (s, t) in [(0.2, 0.6), (0.5, 0.5), (0.4, 1.0), (0.8, 0.3)] {
                let e = ycov_enumerated(&k, &fs, n, s, t).unwrap();
                let x = ycov_exact(sig.psi_norms2[1], sig.psi_norms2[2], n, s, t);
                assert!((e - x).abs() < 1e-9 * (1.0 + x.abs()), "n={n} s={s} t={t}: {e} vs {x}");
            }
        }
    }

    #[test]
    fn mixture_limits() {
        for (s, t) in [(0.2, 0.7), (0.5, 0.5), (0.9, 0.1)] {
            assert!((limit_mixture_cov(2.0, 0.0, s, s) - 4.0 * limit_processes::a_process_cov(s, s)).abs() < 1e-15);
            assert!((limit_mixture_cov(0.0, 2f64.sqrt(), s, t) - 2.0 * (s.min(t) - s * t)).abs() < 1e-15);
            assert_eq!(limit_mixture_cov(1.3, 0.4, s, t), limit_mixture_cov(1.3, 0.4, t, s));
        }
    }

    #[test]
    fn nondegenerate_fixed_kernel_has_vanishing_c2() {
        use crate::sample_spaces::FiniteSpace;
        let dist = Arc::new(DistributionSpec::Finite(FiniteSpace::scalar(&[0.0, 1.0, 3.0], &[0.3, 0.4, 0.3]).unwrap()));
        let g0 = finite_mean(&ProductKernel { order: 2 }, &dist, 1).unwrap().unwrap();
        let k: KernelSpec = Arc::new(crate::ustat_core::Shifted { inner: Arc::new(ProductKernel { order: 2 }), shift: g0 });
        let tr = estimate_c(&k, &dist, &[64, 128, 256, 512, 1024], Mode::Exact).unwrap();
        assert!(tr.c2_fit.ci_hi < 0.0, "{tr:?}");
        assert!((tr.c1_2.last().unwrap() - 4.0).abs() < 0.02);
        assert!((tr.cubic_ratio.last().unwrap() - 0.25).abs() < 1e-3);
    }
}

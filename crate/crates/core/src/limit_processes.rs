//! Covariances of the Gaussian limits, exact simulation on a grid, the Kolmogorov
//! law and the ensemble statistics used to compare finite-n paths with limits.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fclt_conditions::RateFit;
use crate::sample_spaces::RngStream;
use crate::ustat_core::prefix_len;

/// `sum_k alpha2[k-1] (s ^ t)^p (s v t)^(p-k)`.
pub fn gamma_cov(alpha2: &[f64], s: f64, t: f64) -> f64 {
    let p = alpha2.len() as i32;
    let (lo, hi) = (s.min(t), s.max(t));
    alpha2.iter().enumerate().map(|(i, a)| a * lo.powi(p) * hi.powi(p - (i as i32 + 1))).sum()
}

/// Covariance of `A(u) = (1 - 2u) B(u) + u B(1)`.
pub fn a_process_cov(s: f64, t: f64) -> f64 {
    let (s, t) = (s.min(t), s.max(t));
    (1.0 - 2.0 * s) * (1.0 - 2.0 * t) * s + (1.0 - 2.0 * s) * t * s + s * (1.0 - 2.0 * t) * t + s * t
}

pub fn bridge_cov(s: f64, t: f64) -> f64 {
    s.min(t) - s * t
}

/// `c1 A + c2 b` with independent `A` and bridge `b`.
pub fn limit_mixture_cov(c1: f64, c2: f64, s: f64, t: f64) -> f64 {
    c1 * c1 * a_process_cov(s, t) + c2 * c2 * bridge_cov(s, t)
}

/// Limit covariance with weights `w_k = rho^(2p-k-1) (d_k - [k=1] nu^2) / (k! (p-k)!^2)`,
/// normalized to sum one. `d[k-1]` holds `d_k`.
pub fn psi_cov(rho: f64, d: &[f64], nu: f64, s: f64, t: f64) -> f64 {
    gamma_cov(&psi_weights(rho, d, nu), s, t)
}

pub fn psi_weights(rho: f64, d: &[f64], nu: f64) -> Vec<f64> {
    let p = d.len();
    let f = crate::combin::factorial;
    let raw: Vec<f64> = (1..=p)
        .map(|k| {
            let dk = d[k - 1] - if k == 1 { nu * nu } else { 0.0 };
            rho.powi((2 * p - k - 1) as i32) * dk / (f(k) * f(p - k).powi(2))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Which Gaussian process to simulate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitSpec {
    /// `alpha2[k-1]` weights the `k`-th term; `B(t^p)` is the single-weight case.
    Gamma {
        alpha2: Vec<f64>,
    },
    TimeChangedBm {
        p: usize,
    },
    AProcess {
        scale: f64,
    },
    Bridge {
        scale: f64,
    },
    Mixture {
        c1: f64,
        c2: f64,
    },
    /// Two-term dense-regime limit with balance parameter `lambda` (may be 0 or infinite).
    Dense {
        p: usize,
        lambda: f64,
    },
}

impl LimitSpec {
    pub fn cov(&self, s: f64, t: f64) -> f64 {
        match self {
            LimitSpec::Gamma { alpha2 } => gamma_cov(alpha2, s, t),
            LimitSpec::TimeChangedBm { p } => s.min(t).powi(*p as i32),
            LimitSpec::AProcess { scale } => scale * scale * a_process_cov(s, t),
            LimitSpec::Bridge { scale } => scale * scale * bridge_cov(s, t),
            LimitSpec::Mixture { c1, c2 } => limit_mixture_cov(*c1, *c2, s, t),
            LimitSpec::Dense { p, lambda } => dense_cov(*p, *lambda, s, t),
        }
    }

    pub fn matrix(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        grid.iter().map(|&s| grid.iter().map(|&t| self.cov(s, t)).collect()).collect()
    }
}

/// `(s^t)^p (s v t)^(p-1) / (1 + 1/lambda) + (s^t)^p (s v t)^(p-2) / (1 + lambda)`,
/// with `a/0 = inf` and `a/inf = 0`.
pub fn dense_cov(p: usize, lambda: f64, s: f64, t: f64) -> f64 {
    let (lo, hi) = (s.min(t), s.max(t));
    let w1 = if lambda == 0.0 {
        0.0
    } else if lambda.is_infinite() {
        1.0
    } else {
        1.0 / (1.0 + 1.0 / lambda)
    };
    let w2 = if lambda.is_infinite() { 0.0 } else { 1.0 / (1.0 + lambda) };
    let p = p as i32;
    w1 * lo.powi(p) * hi.powi(p - 1) + w2 * lo.powi(p) * hi.powi(p - 2)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    if k == 0 {
        return 0.0;
    }
    let dm = DMatrix::from_fn(k, k, |i, j| 0.5 * (m[i][j] + m[j][i]));
    SymmetricEigen::new(dm).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Lower-triangular factor of a positive semi-definite matrix; pivots below
/// `tol` produce zero columns.
pub fn cholesky_psd(m: &[Vec<f64>], tol: f64) -> Result<Vec<Vec<f64>>> {
    let k = m.len();
    let mut l = vec![vec![0.0; k]; k];
    for j in 0..k {
        let d = m[j][j] - (0..j).map(|c| l[j][c] * l[j][c]).sum::<f64>();
        if d < -tol {
            return Err(Error::IndefiniteCovariance(d));
        }
        if d <= tol {
            continue;
        }
        let dj = d.sqrt();
        l[j][j] = dj;
        for i in j + 1..k {
            let v = m[i][j] - (0..j).map(|c| l[i][c] * l[j][c]).sum::<f64>();
            l[i][j] = v / dj;
        }
    }
    Ok(l)
}

/// `replicates` exact draws of the limit on `grid`; replicate `r` uses `stream.child(r)`.
pub fn simulate_gaussian(spec: &LimitSpec, grid: &[f64], replicates: usize, stream: RngStream) -> Result<Vec<Vec<f64>>> {
    let cov = spec.matrix(grid);
    let scale = cov.iter().enumerate().map(|(i, r)| r[i].abs()).fold(0.0, f64::max).max(1e-300);
    let lam = min_eigenvalue(&cov);
    if lam < -1e-9 * scale {
        return Err(Error::IndefiniteCovariance(lam));
    }
    let l = match cholesky_psd(&cov, 1e-13 * scale) {
        Ok(l) => l,
        Err(_) => {
            let ridged: Vec<Vec<f64>> = cov
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(j, v)| if i == j { v + 1e-12 * scale } else { *v }).collect())
                .collect();
            cholesky_psd(&ridged, 0.0)?
        }
    };
    let k = grid.len();
    Ok((0..replicates)
        .map(|r| {
            let mut rng = stream.child(r as u64).rng();
            let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..k).map(|i| (0..=i).map(|j| l[i][j] * z[j]).sum()).collect()
        })
        .collect())
}

/// Law of the one-sided maximum of a standard bridge, `P(max b <= x) = 1 - exp(-2 x^2)`.
pub fn bridge_max_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 - (-2.0 * x * x).exp()
    }
}

/// `1 - 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 x^2)`, using the theta-function form for small `x`.
pub fn kolmogorov_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < 1.0 {
        let c = (2.0 * std::f64::consts::PI).sqrt() / x;
        let mut s = 0.0;
        for k in 1.. {
            let term = (-((2 * k - 1) as f64).powi(2) * std::f64::consts::PI.powi(2) / (8.0 * x * x)).exp();
            s += term;
            if term < 1e-12 {
                break;
            }
        }
        return (c * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1.. {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (1.0 - 2.0 * s).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub samples: usize,
}

/// One-sample Kolmogorov-Smirnov test with the asymptotic p-value
/// (Stephens' finite-sample scaling of the statistic).
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if samples.len() < 100 {
        return Err(Error::TooFewSamples { got: samples.len(), need: 100 });
    }
    let d = ks_distance(samples, cdf);
    let m = samples.len() as f64;
    let sq = m.sqrt();
    let p_value = 1.0 - kolmogorov_cdf((sq + 0.12 + 0.11 / sq) * d);
    Ok(KsResult { statistic: d, p_value: p_value.clamp(0.0, 1.0), samples: samples.len() })
}

/// `sup |F_emp - F|`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let m = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(x)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CovEstimate {
    pub matrix: Vec<Vec<f64>>,
    /// Batch-means standard errors (20 batches).
    pub se: Vec<Vec<f64>>,
}

fn cov_of(paths: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let r = paths.len() as f64;
    let k = paths[0].len();
    let mean: Vec<f64> = (0..k).map(|i| paths.iter().map(|p| p[i]).sum::<f64>() / r).collect();
    let mut c = vec![vec![0.0; k]; k];
    for p in paths {
        for i in 0..k {
            let di = p[i] - mean[i];
            for j in i..k {
                c[i][j] += di * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            c[i][j] /= r - 1.0;
            c[j][i] = c[i][j];
        }
    }
    c
}

/// Unbiased cross-moment matrix of the columns of `paths` with batch standard errors.
pub fn empirical_cov(paths: &[Vec<f64>]) -> Result<CovEstimate> {
    let batches = 20;
    if paths.len() < 2 * batches {
        return Err(Error::TooFewSamples { got: paths.len(), need: 2 * batches });
    }
    let matrix = cov_of(paths);
    let k = matrix.len();
    let per = paths.len() / batches;
    let bcovs: Vec<Vec<Vec<f64>>> = (0..batches).map(|b| cov_of(&paths[b * per..(b + 1) * per])).collect();
    let mut se = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let vals: Vec<f64> = bcovs.iter().map(|c| c[i][j]).collect();
            se[i][j] = crate::ustat_core::mean_se(&vals).1;
        }
    }
    Ok(CovEstimate { matrix, se })
}

/// Columns of `paths` at the requested times (which must lie on `times`).
pub fn select_columns(paths: &[Vec<f64>], times: &[f64], wanted: &[f64]) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = wanted
        .iter()
        .map(|w| {
            times
                .iter()
                .position(|t| (t - w).abs() < 1e-9)
                .ok_or_else(|| Error::InvalidArgument(format!("time {w} is not on the path grid")))
        })
        .collect::<Result<_>>()?;
    Ok(paths.iter().map(|p| idx.iter().map(|&i| p[i]).collect()).collect())
}

/// Largest `|empirical - target|` over the grid.
pub fn max_cov_deviation(est: &CovEstimate, grid: &[f64], target: impl Fn(f64, f64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &s) in grid.iter().enumerate() {
        for (j, &t) in grid.iter().enumerate() {
            worst = worst.max((est.matrix[i][j] - target(s, t)).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IncrementFit {
    pub beta: f64,
    pub lags: Vec<f64>,
    pub moments: Vec<f64>,
    /// `1 + alpha` in `E|W(t) - W(s)|^beta <= C h^(1 + alpha)`.
    pub exponent: f64,
    pub constant: f64,
    pub fit: RateFit,
    /// Set when every increment is zero.
    pub degenerate: bool,
}

/// Symmetric pairs `(1/2 - h/2, 1/2 + h/2)` snapped to `times`, one per lag.
pub fn centered_pairs(times: &[f64], lags: &[f64]) -> Vec<(usize, usize)> {
    let nearest = |x: f64| times.iter().enumerate().min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs())).map(|(i, _)| i).unwrap_or(0);
    lags.iter().map(|&h| (nearest(0.5 - h / 2.0), nearest(0.5 + h / 2.0))).collect()
}

/// Fits `log E|W(t) - W(s)|^beta` against `log((floor(nt) - floor(ns)) / n)`.
pub fn increment_moment_diag(paths: &[Vec<f64>], times: &[f64], n: usize, pairs: &[(usize, usize)], beta: f64) -> Result<IncrementFit> {
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument("need at least three pairs".into()));
    }
    let mut lags = Vec::new();
    let mut moments = Vec::new();
    for &(i, j) in pairs {
        let h = (prefix_len(n, times[j]) as f64 - prefix_len(n, times[i]) as f64) / n as f64;
        let m = paths.iter().map(|p| (p[j] - p[i]).abs().powf(beta)).sum::<f64>() / paths.len() as f64;
        lags.push(h);
        moments.push(m);
    }
    let degenerate = moments.iter().all(|m| *m == 0.0);
    let xs: Vec<f64> = lags.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = moments.iter().map(|m| m.max(crate::fclt_conditions::LOG_FLOOR).ln()).collect();
    let fit = ols(&xs, &ys);
    Ok(IncrementFit { beta, lags, moments, exponent: fit.slope, constant: fit.intercept.exp(), fit, degenerate })
}

/// OLS with a 95% slope interval on raw coordinates.
pub fn ols(xs: &[f64], ys: &[f64]) -> RateFit {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (ci_lo, ci_hi) = if xs.len() > 2 {
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let df = k - 2.0;
        let se = (rss / df / sxx).sqrt();
        let tq = statrs::distribution::StudentsT::new(0.0, 1.0, df).map(|t| t.inverse_cdf(0.975)).unwrap_or(f64::INFINITY);
        (slope - tq * se, slope + tq * se)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    RateFit { slope, intercept, ci_lo, ci_hi, points: xs.len(), all_zero: ys.iter().all(|y| y.exp() == 0.0) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_process_variance_and_bridge_relation() {
        for &u in &[0.1, 0.3, 0.5, 0.9] {
            assert!((a_process_cov(u, u) - u * (1.0 - u)).abs() < 1e-14);
        }
        // A(1) = -B(1) + B(1) = 0
        assert!(a_process_cov(1.0, 1.0).abs() < 1e-14);
        assert!((a_process_cov(0.2, 0.7) - a_process_cov(0.7, 0.2)).abs() < 1e-15);
        assert!((bridge_cov(0.3, 0.6) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn gamma_is_time_changed_bm_for_single_weight() {
        let g = LimitSpec::Gamma { alpha2: vec![0.0, 1.0] };
        let b = LimitSpec::TimeChangedBm { p: 2 };
        for &(s, t) in &[(0.2, 0.5), (0.9, 0.4), (1.0, 1.0)] {
            assert!((g.cov(s, t) - b.cov(s, t)).abs() < 1e-15);
        }
        assert!(min_eigenvalue(&g.matrix(&[0.0, 0.25, 0.5, 0.75, 1.0])) > -1e-12);
    }

    #[test]
    fn dense_limit_extremes() {
        assert!((dense_cov(2, 0.0, 0.3, 0.6) - 0.09).abs() < 1e-15);
        assert!((dense_cov(2, f64::INFINITY, 0.3, 0.6) - 0.09 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_cdf_values() {
        // two representations agree at the switch point
        let below = kolmogorov_cdf(1.0 - 1e-12);
        let above = kolmogorov_cdf(1.0);
        assert!((below - above).abs() < 1e-9);
        // K(1.3581) ~ 0.95, K(1.6276) ~ 0.99
        assert!((kolmogorov_cdf(1.3581) - 0.95).abs() < 1e-4);
        assert!((kolmogorov_cdf(1.6276) - 0.99).abs() < 1e-4);
        assert_eq!(kolmogorov_cdf(0.0), 0.0);
    }

    #[test]
    fn simulated_bm_covariance() {
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let paths = simulate_gaussian(&LimitSpec::TimeChangedBm { p: 1 }, &grid, 20_000, RngStream::new(4, 4)).unwrap();
        let c = empirical_cov(&paths).unwrap();
        assert!(max_cov_deviation(&c, &grid, |s, t| s.min(t)) < 0.05);
        assert!(paths.iter().all(|p| p[0] == 0.0));
    }

    #[test]
    fn indefinite_rejected() {
        let bad = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(min_eigenvalue(&bad) < 0.0);
        assert!(cholesky_psd(&bad, 0.0).is_err());
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shift() {
        let mut rng = RngStream::new(8, 8).rng();
        let z: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_test(&z, normal_cdf).unwrap().p_value > 0.01);
        let shifted: Vec<f64> = z.iter().map(|v| v + 0.5).collect();
        assert!(ks_test(&shifted, normal_cdf).unwrap().p_value < 0.01);
        assert!(ks_test(&z[..50], normal_cdf).is_err());
    }

    #[test]
    fn brownian_increment_exponent() {
        let grid: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).collect();
        let paths = simulate_gaussian(&LimitSpec::TimeChangedBm { p: 1 }, &grid, 4000, RngStream::new(2, 2)).unwrap();
        let pairs = centered_pairs(&grid, &[1.0 / 16.0, 1.0 / 8.0, 0.25, 0.5]);
        let f = increment_moment_diag(&paths, &grid, 64, &pairs, 4.0).unwrap();
        assert!((f.exponent - 2.0).abs() < 0.15, "{f:?}");
    }
}
